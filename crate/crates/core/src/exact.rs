//! Exact average-cost solvers on enumerable MDPs.
//!
//! Everything here is desk-scale by design: dense linear algebra over an
//! explicitly enumerated state space. The module provides
//!
//! - [`FiniteMdp`] — a generic finite MDP with sparse successor lists,
//!   built either from a single arm ([`arm_mdp`]) or from the joint system
//!   ([`SystemMdp::build`]);
//! - [`evaluate_policy`] — gain and bias of a stationary policy from the
//!   Poisson equation, anchored at a fixed state;
//! - [`policy_iteration`] — Howard policy iteration with lexicographic
//!   tie-breaking;
//! - per-arm structure probes: [`optimal_threshold`], [`index_bisection`]
//!   (the coincident-point characterization of the Whittle index),
//!   [`performance_difference`], and [`verify_value_monotonicity`].

use nalgebra::{DMatrix, DVector};
use petgraph::graph::DiGraph;

use crate::arm::{self, ArmSpec, ThresholdPolicy};
use crate::composite::{self, Assignment, StateCodec, SystemConfig};
use crate::error::{Error, Result};

/// Default cap on joint states for dense solving. Dense policy evaluation
/// stores an `(|S|+1)^2` system, so 10^4 states (four users with ten ages
/// each) already needs ~1 GB and exhausts desk-scale memory budgets.
pub const DEFAULT_STATE_LIMIT: u128 = 2048;

/// Tolerance on the Poisson residual of an [`Evaluation`].
pub const POISSON_TOL: f64 = 1e-9;

/// Improvement tolerance for policy iteration.
pub const IMPROVEMENT_TOL: f64 = 1e-10;

/// A finite MDP with a common action set across states.
///
/// Transition rows are stored as sparse successor lists and validated to
/// sum to one.
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// Indexed by `s * n_actions + a`.
    successors: Vec<Vec<(usize, f64)>>,
    costs: Vec<f64>,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        successors: Vec<Vec<(usize, f64)>>,
        costs: Vec<f64>,
    ) -> Result<Self> {
        if successors.len() != n_states * n_actions || costs.len() != n_states * n_actions {
            return Err(Error::InvalidSpec(
                "kernel and cost tables must have n_states * n_actions entries".into(),
            ));
        }
        for (i, row) in successors.iter().enumerate() {
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 || row.iter().any(|&(t, p)| t >= n_states || p < 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "row {i} is not a probability distribution (sum {total})"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            successors,
            costs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.successors[s * self.n_actions + a]
    }

    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.costs[s * self.n_actions + a]
    }
}

/// A deterministic stationary policy: one action index per state.
pub type PolicyVec = Vec<usize>;

/// Gain and bias of a stationary policy, with `bias[s_fixed] = 0`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub gain: f64,
    pub bias: Vec<f64>,
}

/// Builds the single-arm MDP with the virtual activation cost folded into
/// the stage cost. States are ages shifted to `0..S-1`; actions are
/// `{0: idle, 1: transmit}`.
pub fn arm_mdp(spec: &ArmSpec, lambda: f64) -> FiniteMdp {
    let cap = spec.state_cap();
    let n = cap as usize;
    let rho = spec.success_prob();
    let mut successors = Vec::with_capacity(n * 2);
    let mut costs = Vec::with_capacity(n * 2);
    for s in 1..=cap {
        for a in 0..2usize {
            let active = a == 1;
            let up = ((s + 1).min(cap) - 1) as usize;
            let row = if active {
                if rho == 1.0 {
                    vec![(0usize, 1.0)]
                } else {
                    vec![(0usize, rho), (up, 1.0 - rho)]
                }
            } else {
                vec![(up, 1.0)]
            };
            successors.push(row);
            costs.push(arm::arm_stage_cost(spec, s, active, lambda));
        }
    }
    FiniteMdp::new(n, 2, successors, costs).expect("arm kernel rows are stochastic")
}

/// Action vector of the threshold policy on the arm MDP.
pub fn threshold_policy_vec(theta: ThresholdPolicy, state_cap: u32) -> PolicyVec {
    (1..=state_cap).map(|s| usize::from(theta.act(s))).collect()
}

/// The joint MDP bundled with its assignment list and state codec, so
/// policies can be read back as assignments.
#[derive(Debug, Clone)]
pub struct SystemMdp {
    pub mdp: FiniteMdp,
    pub actions: Vec<Assignment>,
    pub codec: StateCodec,
}

impl SystemMdp {
    /// Enumerates states and assignments and materializes the product
    /// kernel. Refuses instances past `state_limit` joint states.
    pub fn build(config: &SystemConfig, state_limit: u128) -> Result<Self> {
        let states = config.joint_state_count();
        if states > state_limit {
            return Err(Error::StateSpaceTooLarge {
                states,
                limit: state_limit,
            });
        }
        let codec = StateCodec::for_config(config);
        let n_states = codec.state_count();
        let actions = composite::enumerate_actions(config.n_users(), config.n_channels())?;
        let n_users = config.n_users();
        let caps = config.caps();

        let mut successors = Vec::with_capacity(n_states * actions.len());
        let mut costs = Vec::with_capacity(n_states * actions.len());
        for si in 0..n_states {
            let ages = codec.decode(si);
            for assign in &actions {
                // Expand the product kernel over the active users' branches.
                let mut branches: Vec<(Vec<u32>, f64)> = vec![(vec![0; n_users], 1.0)];
                for n in 1..=n_users {
                    let s = ages[n - 1];
                    let cap = caps[n - 1];
                    let m = assign.channel_of(n);
                    let up = (s + 1).min(cap);
                    let mut next: Vec<(Vec<u32>, f64)> = Vec::with_capacity(branches.len() * 2);
                    for (partial, p) in &branches {
                        if m == 0 {
                            let mut v = partial.clone();
                            v[n - 1] = up;
                            next.push((v, *p));
                        } else {
                            let rho = config.channel(m).rho;
                            if rho > 0.0 {
                                let mut v = partial.clone();
                                v[n - 1] = 1;
                                next.push((v, p * rho));
                            }
                            if rho < 1.0 {
                                let mut v = partial.clone();
                                v[n - 1] = up;
                                next.push((v, p * (1.0 - rho)));
                            }
                        }
                    }
                    branches = next;
                }
                // A success lands on age 1 and a failure on age >= 2, so the
                // branch states are distinct and need no merging.
                let row: Vec<(usize, f64)> = branches
                    .iter()
                    .map(|(v, p)| (codec.encode(v), *p))
                    .collect();
                successors.push(row);

                let state = composite::AoIState::new(ages.clone(), config)?;
                costs.push(composite::joint_stage_cost(config, &state, assign));
            }
        }
        let mdp = FiniteMdp::new(n_states, actions.len(), successors, costs)?;
        Ok(Self {
            mdp,
            actions,
            codec,
        })
    }

    /// Index of the fresh-system state `(1, …, 1)`.
    pub fn fresh_state(&self) -> usize {
        0
    }
}

/// Number of recurrent classes (bottom strongly connected components) of
/// the chain induced by `policy`.
fn recurrent_class_count(mdp: &FiniteMdp, policy: &[usize]) -> usize {
    let mut graph = DiGraph::<(), ()>::new();
    let nodes: Vec<_> = (0..mdp.n_states()).map(|_| graph.add_node(())).collect();
    for s in 0..mdp.n_states() {
        for &(t, p) in mdp.successors(s, policy[s]) {
            if p > 0.0 && t != s {
                graph.add_edge(nodes[s], nodes[t], ());
            }
        }
    }
    let sccs = petgraph::algo::tarjan_scc(&graph);
    let mut component = vec![0usize; mdp.n_states()];
    for (ci, scc) in sccs.iter().enumerate() {
        for &node in scc {
            component[node.index()] = ci;
        }
    }
    let mut is_bottom = vec![true; sccs.len()];
    for s in 0..mdp.n_states() {
        for &(t, p) in mdp.successors(s, policy[s]) {
            if p > 0.0 && component[s] != component[t] {
                is_bottom[component[s]] = false;
            }
        }
    }
    is_bottom.iter().filter(|b| **b).count()
}

/// Solves the Poisson equation
/// `V(s) + J = c(s, π(s)) + Σ_{s'} P(s'|s, π(s)) V(s')`
/// with the anchor `V(s_fixed) = 0` appended, by dense LU.
///
/// Requires the induced chain to be unichain (a single recurrent class);
/// multichain policies have no scalar average cost and are reported as
/// such rather than silently answered. The returned gain does not depend
/// on the anchor; the bias is shifted so it vanishes at `s_fixed`.
pub fn evaluate_policy(mdp: &FiniteMdp, policy: &[usize], s_fixed: usize) -> Result<Evaluation> {
    let n = mdp.n_states();
    if policy.len() != n || s_fixed >= n {
        return Err(Error::OutOfRange(
            "policy length or anchor inconsistent with the MDP".into(),
        ));
    }
    if policy.iter().any(|&a| a >= mdp.n_actions()) {
        return Err(Error::OutOfRange("policy selects an unknown action".into()));
    }
    let classes = recurrent_class_count(mdp, policy);
    if classes != 1 {
        return Err(Error::Multichain {
            recurrent_classes: classes,
        });
    }

    // Rows 0..n: (I - P) V + J 1 = c; row n: V(s_fixed) = 0.
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut b = DVector::<f64>::zeros(n + 1);
    for s in 0..n {
        a[(s, s)] += 1.0;
        for &(t, p) in mdp.successors(s, policy[s]) {
            a[(s, t)] -= p;
        }
        a[(s, n)] = 1.0;
        b[s] = mdp.cost(s, policy[s]);
    }
    a[(n, s_fixed)] = 1.0;

    let lu = a.clone().lu();
    let mut x = lu
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular Poisson system".into()))?;
    let r = &b - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }

    let gain = x[n];
    let bias: Vec<f64> = x.iter().take(n).copied().collect();
    let resid = poisson_residual(mdp, policy, gain, &bias);
    if resid > POISSON_TOL {
        return Err(Error::Numerical(format!(
            "Poisson residual {resid:.3e} exceeds {POISSON_TOL:.0e}"
        )));
    }
    Ok(Evaluation { gain, bias })
}

/// Largest absolute Poisson-equation residual of `(gain, bias)` under
/// `policy`.
pub fn poisson_residual(mdp: &FiniteMdp, policy: &[usize], gain: f64, bias: &[f64]) -> f64 {
    (0..mdp.n_states())
        .map(|s| {
            let expect: f64 = mdp
                .successors(s, policy[s])
                .iter()
                .map(|&(t, p)| p * bias[t])
                .sum();
            (bias[s] + gain - mdp.cost(s, policy[s]) - expect).abs()
        })
        .fold(0.0, f64::max)
}

/// Stationary distribution of the chain induced by `policy`. Unichain only.
pub fn stationary_distribution(mdp: &FiniteMdp, policy: &[usize]) -> Result<Vec<f64>> {
    let n = mdp.n_states();
    let classes = recurrent_class_count(mdp, policy);
    if classes != 1 {
        return Err(Error::Multichain {
            recurrent_classes: classes,
        });
    }
    // Balance equations (P^T - I) d = 0 with the last row replaced by
    // normalization; any single balance row is redundant.
    let mut a = DMatrix::<f64>::zeros(n, n);
    for s in 0..n {
        for &(t, p) in mdp.successors(s, policy[s]) {
            a[(t, s)] += p;
        }
        a[(s, s)] -= 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut d = lu
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular balance system".into()))?;
    let r = &b - &a * &d;
    if let Some(dd) = lu.solve(&r) {
        d += dd;
    }
    Ok(d.iter().map(|p| p.max(0.0)).collect())
}

/// Relative Q-factor of `policy`: `Q(s,a) = c(s,a) − J + Σ P(s'|s,a) V(s')`
/// with `V` the bias from [`evaluate_policy`].
pub fn relative_q(mdp: &FiniteMdp, policy: &[usize], s_fixed: usize) -> Result<Vec<f64>> {
    let eval = evaluate_policy(mdp, policy, s_fixed)?;
    let mut q = vec![0.0; mdp.n_states() * mdp.n_actions()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let expect: f64 = mdp
                .successors(s, a)
                .iter()
                .map(|&(t, p)| p * eval.bias[t])
                .sum();
            q[s * mdp.n_actions() + a] = mdp.cost(s, a) - eval.gain + expect;
        }
    }
    Ok(q)
}

/// Result of policy iteration.
#[derive(Debug, Clone)]
pub struct PolicyIterationResult {
    pub policy: PolicyVec,
    pub gain: f64,
    pub bias: Vec<f64>,
    pub iterations: usize,
}

/// Howard policy iteration for the average-cost criterion.
///
/// Starts from the all-first-action policy (the idle assignment on system
/// MDPs, which is unichain thanks to age saturation), evaluates with the
/// Poisson solve, and greedily improves. A state switches action only when
/// the improvement exceeds [`IMPROVEMENT_TOL`]; among actions within
/// tolerance of the best, the lexicographically smallest index wins, which
/// keeps runs reproducible.
pub fn policy_iteration(mdp: &FiniteMdp, s_fixed: usize) -> Result<PolicyIterationResult> {
    let mut policy: PolicyVec = vec![0; mdp.n_states()];
    let max_iter = 1000;
    for iteration in 1..=max_iter {
        let eval = evaluate_policy(mdp, &policy, s_fixed)?;
        let mut changed = false;
        for s in 0..mdp.n_states() {
            let q_of = |a: usize| -> f64 {
                let expect: f64 = mdp
                    .successors(s, a)
                    .iter()
                    .map(|&(t, p)| p * eval.bias[t])
                    .sum();
                mdp.cost(s, a) + expect
            };
            let current = q_of(policy[s]);
            let mut best_q = current;
            let mut improved = false;
            for a in 0..mdp.n_actions() {
                let q = q_of(a);
                if q < best_q - IMPROVEMENT_TOL {
                    best_q = q;
                    improved = true;
                }
            }
            if improved {
                // Lexicographically smallest action within tolerance of the
                // best, so ties break deterministically.
                let pick = (0..mdp.n_actions())
                    .find(|&a| q_of(a) <= best_q + IMPROVEMENT_TOL)
                    .expect("best action exists");
                if pick != policy[s] {
                    policy[s] = pick;
                    changed = true;
                }
            }
        }
        if !changed {
            return Ok(PolicyIterationResult {
                policy,
                gain: eval.gain,
                bias: eval.bias,
                iterations: iteration,
            });
        }
    }
    Err(Error::Numerical(format!(
        "policy iteration did not converge within {max_iter} iterations"
    )))
}

/// All minimizers of `J(θ, λ)` over `θ ∈ {1..S+1}` (within 1e-9 of the
/// minimum). Coincident points report two neighbors.
pub fn optimal_threshold(spec: &ArmSpec, lambda: f64) -> Result<Vec<u32>> {
    let cap = spec.state_cap();
    let mut gains = Vec::with_capacity(cap as usize + 1);
    for theta in 1..=cap + 1 {
        let split = arm::average_cost(spec, ThresholdPolicy::new(theta, cap)?)?;
        gains.push(split.total(spec.tx_cost(), lambda));
    }
    let min = gains.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(gains
        .iter()
        .enumerate()
        .filter(|(_, g)| **g <= min + 1e-9)
        .map(|(i, _)| i as u32 + 1)
        .collect())
}

/// The virtual cost `λ` at which thresholds `θ` and `θ+1` have equal
/// average cost — the Whittle index of state `θ` by the coincident-point
/// property.
///
/// Because `J(θ, λ)` is affine in `λ`, the crossing solves in closed form
/// from the exact cost splits:
/// `λ = (𝒥_h(θ+1) − 𝒥_h(θ)) / (𝒥_τ(θ) − 𝒥_τ(θ+1)) − τ`.
/// When the activation gap is numerically degenerate (< 1e-12) the solver
/// falls back to bisection on `J(θ,λ) − J(θ+1,λ)` and reports the flat
/// direction if no crossing can be bracketed.
pub fn index_bisection(spec: &ArmSpec, theta: u32) -> Result<f64> {
    let cap = spec.state_cap();
    if theta < 1 || theta > cap {
        return Err(Error::OutOfRange(format!(
            "threshold {theta} outside 1..={cap}"
        )));
    }
    let lo = arm::average_cost(spec, ThresholdPolicy::new(theta, cap)?)?;
    let hi = arm::average_cost(spec, ThresholdPolicy::new(theta + 1, cap)?)?;
    let gap = lo.activation - hi.activation;
    if gap.abs() >= 1e-12 {
        return Ok((hi.holding - lo.holding) / gap - spec.tx_cost());
    }

    let diff =
        |lambda: f64| lo.total(spec.tx_cost(), lambda) - hi.total(spec.tx_cost(), lambda);
    let mut half_width = 1.0;
    let (mut a, mut b) = (-half_width, half_width);
    while diff(a).signum() == diff(b).signum() {
        half_width *= 2.0;
        if half_width > 1e12 {
            return Err(Error::DegenerateGap { theta });
        }
        a = -half_width;
        b = half_width;
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if diff(mid).signum() == diff(a).signum() {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Performance-difference identity between two policies:
/// `J(π₁) − J(π₂) = E_{s∼d^{π₁}}[Q^{π₂}(s, π₁(s)) − Q^{π₂}(s, π₂(s))]`.
///
/// Evaluates the right-hand side; tests compare it against the direct gain
/// difference.
pub fn performance_difference(
    mdp: &FiniteMdp,
    pi1: &[usize],
    pi2: &[usize],
    s_fixed: usize,
) -> Result<f64> {
    let d1 = stationary_distribution(mdp, pi1)?;
    let q2 = relative_q(mdp, pi2, s_fixed)?;
    let na = mdp.n_actions();
    Ok((0..mdp.n_states())
        .map(|s| d1[s] * (q2[s * na + pi1[s]] - q2[s * na + pi2[s]]))
        .sum())
}

/// True iff the bias of the threshold policy is nondecreasing in the age
/// (tolerance 1e-10).
pub fn verify_value_monotonicity(
    spec: &ArmSpec,
    theta: ThresholdPolicy,
    lambda: f64,
) -> Result<bool> {
    let mdp = arm_mdp(spec, lambda);
    let policy = threshold_policy_vec(theta, spec.state_cap());
    let eval = evaluate_policy(&mdp, &policy, 0)?;
    Ok(eval.bias.windows(2).all(|w| w[1] >= w[0] - 1e-10))
}

/// Exact relative Q-factor of the threshold policy with the anchor entry
/// pinned to zero; the reference the Q-learner is expected to approach.
pub fn exact_relative_q_factor(
    spec: &ArmSpec,
    theta: ThresholdPolicy,
    lambda: f64,
    anchor: (u32, bool),
) -> Result<Vec<[f64; 2]>> {
    let mdp = arm_mdp(spec, lambda);
    let policy = threshold_policy_vec(theta, spec.state_cap());
    let q = relative_q(&mdp, &policy, 0)?;
    let offset = q[(anchor.0 as usize - 1) * 2 + usize::from(anchor.1)];
    Ok((0..spec.state_cap() as usize)
        .map(|s| [q[s * 2] - offset, q[s * 2 + 1] - offset])
        .collect())
}
