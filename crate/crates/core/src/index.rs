//! Whittle index computation and per-(channel, user) index tables.
//!
//! The index of state `θ` is the virtual activation cost at which the
//! threshold policies `θ` and `θ+1` tie in average cost:
//!
//! ```text
//! ν(θ) = (E_{d^{θ+1}}[h] − E_{d^θ}[h]) / (𝒥_τ(θ) − 𝒥_τ(θ+1)) − τ
//! ```
//!
//! where each `𝒥_τ` is that policy's own activation frequency.
//! [`analytic_index`] evaluates the formula on closed-form stationary
//! distributions; `exact::index_bisection` recomputes the same quantity
//! from direct balance-equation solves and serves as its oracle.

use crate::arm::{self, ArmSpec, StationaryDist, ThresholdPolicy};
use crate::composite::SystemConfig;
use crate::error::{Error, Result};

/// Activation gaps below this are treated as degenerate. Sits well below
/// any real gap for caps up to 64 and success rates down to 0.05.
pub const DEGENERATE_GAP: f64 = 1e-12;

/// Whittle index of state `theta` on `spec`, from the closed-form
/// stationary distributions.
///
/// At `theta = S` the comparison policy is never-transmit, whose degenerate
/// point-mass distribution comes from the exact solver since the closed
/// form excludes it.
pub fn analytic_index(spec: &ArmSpec, theta: u32) -> Result<f64> {
    let cap = spec.state_cap();
    if theta < 1 || theta > cap {
        return Err(Error::OutOfRange(format!(
            "threshold {theta} outside 1..={cap}"
        )));
    }
    let rho = spec.success_prob();
    let d_lo = arm::stationary_closed_form(ThresholdPolicy::new(theta, cap)?, rho, cap)?;
    let d_hi = if theta + 1 <= cap {
        arm::stationary_closed_form(ThresholdPolicy::new(theta + 1, cap)?, rho, cap)?
    } else {
        arm::stationary_exact(ThresholdPolicy::new(theta + 1, cap)?, rho, cap)?
    };
    index_from_distributions(spec, &d_lo, &d_hi, theta)
}

/// The index formula on explicit distributions; split out so the
/// degenerate-gap guard is testable with crafted inputs.
fn index_from_distributions(
    spec: &ArmSpec,
    d_lo: &StationaryDist,
    d_hi: &StationaryDist,
    theta: u32,
) -> Result<f64> {
    let cap = spec.state_cap();
    let act_lo = d_lo.tail_mass(theta);
    let act_hi = if theta + 1 <= cap {
        d_hi.tail_mass(theta + 1)
    } else {
        0.0
    };
    let gap = act_lo - act_hi;
    if gap.abs() < DEGENERATE_GAP {
        return Err(Error::DegenerateGap { theta });
    }
    let mean_lo = d_lo.expect(|s| spec.holding(s));
    let mean_hi = d_hi.expect(|s| spec.holding(s));
    Ok((mean_hi - mean_lo) / gap - spec.tx_cost())
}

/// Whittle indices `ν[m][n][s]` for every channel–user–state triple.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexTable {
    n_channels: usize,
    n_users: usize,
    /// `values[m-1][n-1][s-1]`.
    values: Vec<Vec<Vec<f64>>>,
}

impl IndexTable {
    pub fn new(values: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n_channels = values.len();
        let n_users = values.first().map_or(0, Vec::len);
        if n_channels == 0 || n_users == 0 || values.iter().any(|per_m| per_m.len() != n_users) {
            return Err(Error::InvalidSpec("index table must be M x N x S".into()));
        }
        Ok(Self {
            n_channels,
            n_users,
            values,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    /// Age cap of user `n` (1-based).
    pub fn state_cap(&self, n: usize) -> usize {
        self.values[0][n - 1].len()
    }

    /// `ν_{m,n}(s)` with all arguments 1-based.
    pub fn value(&self, m: usize, n: usize, s: u32) -> f64 {
        self.values[m - 1][n - 1][(s - 1) as usize]
    }

    /// Writes `m,n,s,nu` rows with a header.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "m,n,s,nu")?;
        for m in 1..=self.n_channels {
            for n in 1..=self.n_users {
                for s in 1..=self.state_cap(n) as u32 {
                    writeln!(w, "{m},{n},{s},{}", self.value(m, n, s))?;
                }
            }
        }
        Ok(())
    }

    /// Parses the `m,n,s,nu` schema produced by [`IndexTable::write_csv`].
    pub fn read_csv<R: std::io::BufRead>(r: R) -> Result<Self> {
        let mut entries: Vec<(usize, usize, u32, f64)> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            if lineno == 0 {
                if line.trim() != "m,n,s,nu" {
                    return Err(Error::Parse(format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!("line {}: want 4 fields", lineno + 1)));
            }
            let bad = |e: String| Error::Parse(format!("line {}: {e}", lineno + 1));
            entries.push((
                fields[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                fields[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                fields[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                fields[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            ));
        }
        let n_channels = entries.iter().map(|e| e.0).max().unwrap_or(0);
        let n_users = entries.iter().map(|e| e.1).max().unwrap_or(0);
        if n_channels == 0 || n_users == 0 {
            return Err(Error::Parse("empty index table".into()));
        }
        let mut caps = vec![0u32; n_users];
        for &(_, n, s, _) in &entries {
            caps[n - 1] = caps[n - 1].max(s);
        }
        let mut values: Vec<Vec<Vec<f64>>> = (0..n_channels)
            .map(|_| caps.iter().map(|&c| vec![f64::NAN; c as usize]).collect())
            .collect();
        for (m, n, s, nu) in entries {
            values[m - 1][n - 1][(s - 1) as usize] = nu;
        }
        if values.iter().flatten().flatten().any(|v| v.is_nan()) {
            return Err(Error::Parse("missing (m,n,s) entries".into()));
        }
        Self::new(values)
    }
}

/// Builds the full index table for `config` using the estimated success
/// rates `rho_hat` in place of the true ones.
///
/// Each (channel, user) pair is an independent computation; failures carry
/// the offending triple.
pub fn build_index_table(config: &SystemConfig, rho_hat: &[f64]) -> Result<IndexTable> {
    if rho_hat.len() != config.n_channels() {
        return Err(Error::OutOfRange(format!(
            "{} rate estimates for {} channels",
            rho_hat.len(),
            config.n_channels()
        )));
    }
    let mut values = Vec::with_capacity(config.n_channels());
    for m in 1..=config.n_channels() {
        let mut per_channel = Vec::with_capacity(config.n_users());
        for n in 1..=config.n_users() {
            let spec = ArmSpec::new(
                config.holding_curve(n).to_vec(),
                config.channel(m).tau,
                rho_hat[m - 1],
            )?;
            let cap = config.state_cap(n);
            let mut per_user = Vec::with_capacity(cap as usize);
            for s in 1..=cap {
                let nu = analytic_index(&spec, s).map_err(|e| match e {
                    Error::DegenerateGap { theta } => Error::Numerical(format!(
                        "degenerate activation gap at channel {m}, user {n}, state {theta}"
                    )),
                    other => other,
                })?;
                per_user.push(nu);
            }
            per_channel.push(per_user);
        }
        values.push(per_channel);
    }
    IndexTable::new(values)
}

/// Exploration bookkeeping for the UCB-augmented index policies.
#[derive(Debug, Clone, PartialEq)]
pub struct UcbState {
    /// Current epoch `k ≥ 1`.
    pub epoch: u64,
    /// Transmission attempts per channel so far.
    pub tx_counts: Vec<u64>,
    /// Exploration weight; negative values give the pessimistic variant.
    pub sigma: f64,
}

impl UcbState {
    pub fn new(n_channels: usize, sigma: f64) -> Self {
        Self {
            epoch: 1,
            tx_counts: vec![0; n_channels],
            sigma,
        }
    }

    /// Advances to epoch `k+1`, counting this epoch's transmissions.
    pub fn record(&mut self, activated_channels: &[usize]) {
        for &m in activated_channels {
            self.tx_counts[m - 1] += 1;
        }
        self.epoch += 1;
    }
}

/// `ν + σ·sqrt(ln k / N_m)`.
///
/// A channel with no recorded use has an undefined bonus; it is treated as
/// infinite for `σ > 0` (forcing exploration) and negative-infinite for
/// `σ < 0`. `σ = 0` is the identity regardless of the counts.
pub fn ucb_augment(nu: f64, ucb: &UcbState, m: usize) -> f64 {
    if ucb.sigma == 0.0 {
        return nu;
    }
    let attempts = ucb.tx_counts[m - 1];
    if attempts == 0 {
        return if ucb.sigma > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
    }
    nu + ucb.sigma * ((ucb.epoch.max(1) as f64).ln() / attempts as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composite::Channel;
    use crate::exact;

    fn linear_arm(cap: u32, tau: f64, rho: f64) -> ArmSpec {
        ArmSpec::new((1..=cap).map(f64::from).collect(), tau, rho).unwrap()
    }

    #[test]
    fn hand_values_for_deterministic_cycles() {
        let spec = linear_arm(10, 0.0, 1.0);
        assert!((analytic_index(&spec, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!((analytic_index(&spec, 3).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn tx_cost_shifts_index() {
        let base = linear_arm(7, 0.0, 0.45);
        let shifted = base.with_tx_cost(12.0).unwrap();
        for theta in 1..=7 {
            let a = analytic_index(&base, theta).unwrap();
            let b = analytic_index(&shifted, theta).unwrap();
            assert!((a - 12.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_bisection_oracle_on_random_arms() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..50 {
            let cap = 2 + (next() * 11.0) as u32;
            let rho = 0.1 + 0.9 * next();
            let tau = 20.0 * next();
            let mut h: Vec<f64> = (0..cap).map(|_| 20.0 * next()).collect();
            h.sort_by(f64::total_cmp);
            let spec = ArmSpec::new(h, tau, rho).unwrap();
            for theta in 1..=cap {
                let a = analytic_index(&spec, theta).unwrap();
                let b = exact::index_bisection(&spec, theta).unwrap();
                assert!(
                    (a - b).abs() <= 1e-9,
                    "cap={cap} rho={rho} theta={theta}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn nonnegative_when_transmission_free() {
        for rho in [0.2, 0.6, 1.0] {
            let spec = ArmSpec::new(vec![0.0, 0.5, 0.5, 2.0, 7.0], 0.0, rho).unwrap();
            for theta in 1..=5 {
                assert!(analytic_index(&spec, theta).unwrap() >= -1e-12);
            }
        }
    }

    #[test]
    fn negative_index_marks_states_below_free_threshold() {
        let spec = ArmSpec::new(vec![0.0, 1.0, 3.0, 9.0, 15.0, 16.0], 8.0, 0.75).unwrap();
        let theta_star = *exact::optimal_threshold(&spec, 0.0)
            .unwrap()
            .first()
            .unwrap();
        for theta in 1..=6u32 {
            let nu = analytic_index(&spec, theta).unwrap();
            if nu < -1e-9 {
                assert!(theta_star > theta, "nu({theta})={nu} but theta*={theta_star}");
            }
            if nu > 1e-9 {
                assert!(theta_star <= theta, "nu({theta})={nu} but theta*={theta_star}");
            }
        }
    }

    #[test]
    fn degenerate_gap_is_reported() {
        let spec = linear_arm(4, 0.0, 0.5);
        // Crafted so both policies activate with identical frequency 0.5.
        let d_lo = StationaryDist::new(vec![0.5, 0.25, 0.25, 0.0]).unwrap();
        let d_hi = StationaryDist::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        match index_from_distributions(&spec, &d_lo, &d_hi, 2) {
            Err(Error::DegenerateGap { theta }) => assert_eq!(theta, 2),
            other => panic!("expected degenerate gap, got {other:?}"),
        }
    }

    #[test]
    fn table_is_symmetric_for_identical_arms() {
        let curve = vec![0.0, 1.0, 4.0, 9.0];
        let config = SystemConfig::new(
            vec![curve.clone(), curve.clone(), curve],
            vec![
                Channel { rho: 0.8, tau: 2.0 },
                Channel { rho: 0.8, tau: 2.0 },
            ],
        )
        .unwrap();
        let table = build_index_table(&config, &[0.8, 0.8]).unwrap();
        assert_eq!(table.n_channels(), 2);
        assert_eq!(table.n_users(), 3);
        assert_eq!(table.state_cap(1), 4);
        for s in 1..=4 {
            let v = table.value(1, 1, s);
            for m in 1..=2 {
                for n in 1..=3 {
                    assert_eq!(table.value(m, n, s), v);
                }
            }
        }
    }

    #[test]
    fn index_increasing_for_convex_costs() {
        // Strictly convex increasing holding cost: indices grow with age.
        let config = SystemConfig::new(
            vec![
                (1..=8).map(|s| (s * s) as f64).collect(),
                (1..=8).map(|s| (s * s) as f64 * 0.5).collect(),
            ],
            vec![Channel { rho: 0.7, tau: 3.0 }],
        )
        .unwrap();
        let table = build_index_table(&config, &[0.7]).unwrap();
        for n in 1..=2 {
            // Strict growth in the interior; the cap aggregates the tail of
            // the age range, which ties the last two indices exactly.
            for s in 1..7u32 {
                assert!(table.value(1, n, s + 1) > table.value(1, n, s));
            }
            let tie = (table.value(1, n, 8) - table.value(1, n, 7)).abs();
            assert!(tie < 1e-9, "boundary pair differs by {tie}");
        }
        // Spot-check against the coincident-point oracle.
        let spec = config.arm_spec(1, 1).unwrap();
        for s in 1..=8 {
            let oracle = exact::index_bisection(&spec, s).unwrap();
            assert!((table.value(1, 1, s) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_round_trip() {
        let config = SystemConfig::new(
            vec![vec![0.0, 2.0, 5.0], vec![1.0, 1.0, 2.0]],
            vec![Channel { rho: 0.9, tau: 1.5 }],
        )
        .unwrap();
        let table = build_index_table(&config, &[0.9]).unwrap();
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let parsed = IndexTable::read_csv(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(parsed, table);
    }

    #[test]
    fn ucb_sigma_zero_is_identity() {
        let ucb = UcbState::new(2, 0.0);
        assert_eq!(ucb_augment(2.0, &ucb, 1), 2.0);
        assert_eq!(ucb_augment(2.0, &ucb, 2), 2.0);
    }

    #[test]
    fn ucb_bonus_hand_value() {
        // ln k = 1 at k = e: bonus = sigma * sqrt(1/4), so 2 + 10/2 = 7.
        let ucb = UcbState {
            epoch: 3,
            tx_counts: vec![4],
            sigma: 10.0,
        };
        let bonus = 10.0 * (3f64.ln() / 4.0).sqrt();
        assert!((ucb_augment(2.0, &ucb, 1) - (2.0 + bonus)).abs() < 1e-12);
        let at_e = 2.0 + 10.0 * (1.0f64 / 4.0).sqrt();
        assert_eq!(at_e, 7.0);
    }

    #[test]
    fn ucb_unused_channel_forces_extremes() {
        let mut ucb = UcbState::new(1, 10.0);
        ucb.epoch = 100;
        assert_eq!(ucb_augment(1.0, &ucb, 1), f64::INFINITY);
        ucb.sigma = -10.0;
        assert_eq!(ucb_augment(1.0, &ucb, 1), f64::NEG_INFINITY);
    }

    #[test]
    fn ucb_bonus_vanishes_with_history() {
        let ucb = UcbState {
            epoch: 1_000_000,
            tx_counts: vec![u64::MAX / 2],
            sigma: 5.0,
        };
        assert!((ucb_augment(1.0, &ucb, 1) - 1.0).abs() < 1e-6);
    }
}
