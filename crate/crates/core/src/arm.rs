//! Single user–channel arm: a birth–death MDP over the age of information.
//!
//! An arm is one (user, channel) pair viewed in isolation. The state is the
//! user's AoI `s ∈ {1..S}`, the action is binary (transmit or stay idle),
//! and a transmission succeeds with the channel's probability `ρ`. Success
//! resets the age to 1; otherwise the age increments, saturating at the cap
//! `S`. The stage cost is a nondecreasing holding cost `h(s)` plus the
//! channel's transmission cost `τ` (and a virtual activation cost `λ` when
//! one is in play).
//!
//! Threshold policies (transmit iff `s ≥ θ`) induce a chain whose stationary
//! distribution has a closed form; [`stationary_exact`] solves the balance
//! equations directly and serves as the oracle for [`stationary_closed_form`].

use crate::error::{Error, Result};

/// Parameters of a single user–channel arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    holding_cost: Vec<f64>,
    tx_cost: f64,
    success_prob: f64,
}

impl ArmSpec {
    /// Builds an arm from a holding-cost curve `h(1..S)`, a transmission
    /// cost `τ ≥ 0`, and a success probability `ρ ∈ (0, 1]`.
    ///
    /// The holding curve must be nondecreasing and have at least two states.
    /// `ρ = 0` is rejected: the chain would never renew.
    pub fn new(holding_cost: Vec<f64>, tx_cost: f64, success_prob: f64) -> Result<Self> {
        if holding_cost.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "state cap must be at least 2, got {}",
                holding_cost.len()
            )));
        }
        if holding_cost.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidSpec("holding costs must be finite".into()));
        }
        if let Some(w) = holding_cost.windows(2).find(|w| w[1] < w[0]) {
            return Err(Error::InvalidSpec(format!(
                "holding cost must be nondecreasing in the age; found {} after {}",
                w[1], w[0]
            )));
        }
        if !(tx_cost >= 0.0 && tx_cost.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "transmission cost must be finite and nonnegative, got {tx_cost}"
            )));
        }
        if !(success_prob > 0.0 && success_prob <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "success probability must lie in (0, 1], got {success_prob}"
            )));
        }
        Ok(Self {
            holding_cost,
            tx_cost,
            success_prob,
        })
    }

    /// Age cap `S`.
    pub fn state_cap(&self) -> u32 {
        self.holding_cost.len() as u32
    }

    /// Holding cost at age `s` (1-based).
    pub fn holding(&self, s: u32) -> f64 {
        self.holding_cost[(s - 1) as usize]
    }

    /// Full holding curve `h(1..S)`.
    pub fn holding_curve(&self) -> &[f64] {
        &self.holding_cost
    }

    /// Transmission cost `τ`.
    pub fn tx_cost(&self) -> f64 {
        self.tx_cost
    }

    /// Success probability `ρ`.
    pub fn success_prob(&self) -> f64 {
        self.success_prob
    }

    /// Same arm with a different transmission cost.
    pub fn with_tx_cost(&self, tx_cost: f64) -> Result<Self> {
        Self::new(self.holding_cost.clone(), tx_cost, self.success_prob)
    }

    /// Same arm with a different success probability.
    pub fn with_success_prob(&self, rho: f64) -> Result<Self> {
        Self::new(self.holding_cost.clone(), self.tx_cost, rho)
    }
}

/// Transmit iff the age is at least `theta`.
///
/// `theta` ranges over `{1..S+1}`; `S+1` means never transmit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ThresholdPolicy {
    theta: u32,
}

impl ThresholdPolicy {
    pub fn new(theta: u32, state_cap: u32) -> Result<Self> {
        if theta < 1 || theta > state_cap + 1 {
            return Err(Error::OutOfRange(format!(
                "threshold {theta} outside 1..={}",
                state_cap + 1
            )));
        }
        Ok(Self { theta })
    }

    pub fn theta(&self) -> u32 {
        self.theta
    }

    /// Action taken at age `s` under this threshold.
    pub fn act(&self, s: u32) -> bool {
        s >= self.theta
    }
}

/// Stationary distribution over ages `1..S`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDist {
    probs: Vec<f64>,
}

impl StationaryDist {
    /// Validates nonnegativity and normalization (1e-10).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::from_probs(probs)
    }

    fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| *p < -1e-12) || (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Numerical(format!(
                "stationary distribution failed normalization: sum {sum}"
            )));
        }
        // Clamp solver dust so downstream expectations never see -0.0-ish mass.
        let probs = probs.iter().map(|p| p.max(0.0)).collect();
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of age `s` (1-based).
    pub fn prob(&self, s: u32) -> f64 {
        self.probs[(s - 1) as usize]
    }

    /// Expectation of a per-age function under this distribution.
    pub fn expect(&self, f: impl Fn(u32) -> f64) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| p * f(i as u32 + 1))
            .sum()
    }

    /// Probability mass at ages `>= theta`.
    pub fn tail_mass(&self, theta: u32) -> f64 {
        self.probs
            .iter()
            .skip((theta - 1).min(self.probs.len() as u32) as usize)
            .sum()
    }
}

/// Average-cost decomposition of a threshold policy:
/// `J(θ, λ) = holding + (τ + λ) · activation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostSplit {
    /// Mean holding cost `E_{d^θ}[h(s)]`.
    pub holding: f64,
    /// Activation frequency `E_{d^θ}[1(s ≥ θ)] ∈ [0, 1]`.
    pub activation: f64,
}

impl CostSplit {
    /// Total average cost at transmission cost `tau` and virtual cost `lambda`.
    pub fn total(&self, tau: f64, lambda: f64) -> f64 {
        self.holding + (tau + lambda) * self.activation
    }
}

/// One step of the arm chain: reset to 1 on a successful transmission,
/// otherwise increment the age, saturating at the cap.
pub fn arm_transition(s: u32, active: bool, success: bool, state_cap: u32) -> Result<u32> {
    if s < 1 || s > state_cap {
        return Err(Error::OutOfRange(format!(
            "age {s} outside 1..={state_cap}"
        )));
    }
    Ok(if active && success {
        1
    } else {
        (s + 1).min(state_cap)
    })
}

/// Stage cost `h(s) + (τ + λ)·a`. The virtual cost `λ` applies only when
/// transmitting and may be negative.
pub fn arm_stage_cost(spec: &ArmSpec, s: u32, active: bool, lambda: f64) -> f64 {
    spec.holding(s) + if active { spec.tx_cost + lambda } else { 0.0 }
}

/// Transition probability of the arm chain, `Pr(s' | s, a)`.
pub fn arm_transition_prob(s: u32, active: bool, s_next: u32, rho: f64, state_cap: u32) -> f64 {
    let up = (s + 1).min(state_cap);
    if active {
        if s_next == 1 {
            rho
        } else if s_next == up {
            1.0 - rho
        } else {
            0.0
        }
    } else if s_next == up {
        1.0
    } else {
        0.0
    }
}

/// Stationary distribution of the threshold chain, from a direct linear
/// solve of the balance equations.
///
/// `theta = S+1` (never transmit) makes the chain absorb at the cap; the
/// degenerate point mass at `S` is returned explicitly.
pub fn stationary_exact(theta: ThresholdPolicy, rho: f64, state_cap: u32) -> Result<StationaryDist> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "success probability must lie in (0, 1], got {rho}"
        )));
    }
    let n = state_cap as usize;
    if theta.theta() == state_cap + 1 {
        let mut probs = vec![0.0; n];
        probs[n - 1] = 1.0;
        return Ok(StationaryDist { probs });
    }

    // Balance equations d^T P = d^T with the last one replaced by the
    // normalization row (the n balance equations are rank n-1 for a
    // unichain, and they sum to zero, so dropping any one is safe).
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    for s in 1..=state_cap {
        let active = theta.act(s);
        for s_next in 1..=state_cap {
            let p = arm_transition_prob(s, active, s_next, rho, state_cap);
            if p != 0.0 {
                a[((s_next - 1) as usize, (s - 1) as usize)] += p;
            }
        }
    }
    for i in 0..n {
        a[(i, i)] -= 1.0;
    }
    let mut b = nalgebra::DVector::<f64>::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;

    let d = solve_refined(&a, &b)?;
    let resid = balance_residual(&d, theta, rho, state_cap);
    if resid > 1e-12 {
        return Err(Error::Numerical(format!(
            "balance-equation residual {resid:.3e} exceeds 1e-12"
        )));
    }
    StationaryDist::from_probs(d.iter().copied().collect())
}

/// LU solve with one pass of iterative refinement; keeps small chains at
/// near machine accuracy so the index oracle comparisons stay below 1e-9.
fn solve_refined(
    a: &nalgebra::DMatrix<f64>,
    b: &nalgebra::DVector<f64>,
) -> Result<nalgebra::DVector<f64>> {
    let lu = a.clone().lu();
    let mut x = lu
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular balance system".into()))?;
    let r = b - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    Ok(x)
}

fn balance_residual(d: &nalgebra::DVector<f64>, theta: ThresholdPolicy, rho: f64, cap: u32) -> f64 {
    let n = cap as usize;
    let mut worst: f64 = (d.iter().sum::<f64>() - 1.0).abs();
    for s_next in 1..=cap {
        let mut inflow = 0.0;
        for s in 1..=cap {
            inflow += d[(s - 1) as usize] * arm_transition_prob(s, theta.act(s), s_next, rho, cap);
        }
        worst = worst.max((inflow - d[(s_next - 1) as usize]).abs());
    }
    let _ = n;
    worst
}

/// Renewal rate `β = 1/(θ − 1 + 1/ρ)` of the threshold chain.
pub fn beta(theta: u32, rho: f64) -> f64 {
    1.0 / (theta as f64 - 1.0 + 1.0 / rho)
}

/// Closed-form stationary distribution of the threshold chain for
/// `θ ∈ {1..S}`:
///
/// ```text
/// d(z) = β                      z < θ
/// d(z) = (1-ρ)^(z-θ) β          θ ≤ z < S
/// d(z) = (1-ρ)^(S-θ) β / ρ      z = S
/// ```
///
/// The cap term's exponent `S-θ` comes from the balance equation at the cap,
/// `ρ·d(S) = (1-ρ)·d(S-1)`; it is what makes the distribution sum to one
/// (the whole-chain check against [`stationary_exact`] is enforced in tests).
/// `θ = S+1` has no closed form here; use [`stationary_exact`].
pub fn stationary_closed_form(
    theta: ThresholdPolicy,
    rho: f64,
    state_cap: u32,
) -> Result<StationaryDist> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidSpec(format!(
            "success probability must lie in (0, 1], got {rho}"
        )));
    }
    let t = theta.theta();
    if t > state_cap {
        return Err(Error::OutOfRange(format!(
            "no closed form for the never-transmit threshold {t}; use stationary_exact"
        )));
    }
    let b = beta(t, rho);
    let q = 1.0 - rho;
    let probs = (1..=state_cap)
        .map(|z| {
            if z < t {
                b
            } else if z < state_cap {
                q.powi((z - t) as i32) * b
            } else {
                q.powi((state_cap - t) as i32) * b / rho
            }
        })
        .collect();
    StationaryDist::from_probs(probs)
}

/// Average-cost decomposition of threshold `θ` on `spec`, computed from the
/// exact stationary distribution.
///
/// `J(θ, λ) = 𝒥_h + (τ + λ)·𝒥_τ` with `𝒥_h = E_{d^θ}[h]` and
/// `𝒥_τ = Pr_{d^θ}(s ≥ θ)`.
pub fn average_cost(spec: &ArmSpec, theta: ThresholdPolicy) -> Result<CostSplit> {
    let cap = spec.state_cap();
    let d = stationary_exact(theta, spec.success_prob, cap)?;
    let holding = d.expect(|s| spec.holding(s));
    let activation = if theta.theta() > cap {
        0.0
    } else {
        d.tail_mass(theta.theta())
    };
    Ok(CostSplit {
        holding,
        activation,
    })
}
