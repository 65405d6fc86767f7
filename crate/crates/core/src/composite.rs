//! The joint N-user, M-channel MDP.
//!
//! States are age vectors, actions are channel-to-user assignments in which
//! each channel serves at most one user and each user holds at most one
//! channel. The joint kernel factorizes over users, which is what the exact
//! solvers and the simulator both build on.

use crate::arm;
use crate::error::{Error, Result};

/// Default cap on the number of enumerated assignments.
pub const DEFAULT_ACTION_LIMIT: u128 = 1_000_000;

/// One channel: success probability and transmission cost.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Channel {
    pub rho: f64,
    pub tau: f64,
}

/// A full scenario: per-user holding curves and per-channel parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SystemConfig {
    holding: Vec<Vec<f64>>,
    channels: Vec<Channel>,
}

impl SystemConfig {
    /// Validates `N > M ≥ 1`, nondecreasing holding curves, `ρ ∈ (0,1]`,
    /// and `τ ≥ 0`.
    pub fn new(holding: Vec<Vec<f64>>, channels: Vec<Channel>) -> Result<Self> {
        let n = holding.len();
        let m = channels.len();
        if m < 1 || n <= m {
            return Err(Error::InvalidSpec(format!(
                "need more users than channels (N > M >= 1), got N={n}, M={m}"
            )));
        }
        for (i, h) in holding.iter().enumerate() {
            if h.len() < 2 {
                return Err(Error::InvalidSpec(format!(
                    "user {} needs a state cap of at least 2",
                    i + 1
                )));
            }
            if h.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidSpec(format!(
                    "holding cost of user {} must be nondecreasing",
                    i + 1
                )));
            }
        }
        for (m_id, c) in channels.iter().enumerate() {
            if !(c.rho > 0.0 && c.rho <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "channel {}: success probability {} outside (0, 1]",
                    m_id + 1,
                    c.rho
                )));
            }
            if !(c.tau >= 0.0 && c.tau.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "channel {}: transmission cost {} must be finite and nonnegative",
                    m_id + 1,
                    c.tau
                )));
            }
        }
        Ok(Self { holding, channels })
    }

    pub fn n_users(&self) -> usize {
        self.holding.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, m: usize) -> &Channel {
        &self.channels[m - 1]
    }

    /// Holding curve of user `n` (1-based).
    pub fn holding_curve(&self, n: usize) -> &[f64] {
        &self.holding[n - 1]
    }

    /// Holding cost of user `n` at age `s` (both 1-based).
    pub fn holding(&self, n: usize, s: u32) -> f64 {
        self.holding[n - 1][(s - 1) as usize]
    }

    /// Age cap of user `n`.
    pub fn state_cap(&self, n: usize) -> u32 {
        self.holding[n - 1].len() as u32
    }

    pub fn caps(&self) -> Vec<u32> {
        self.holding.iter().map(|h| h.len() as u32).collect()
    }

    /// Number of joint states `Π S_n`.
    pub fn joint_state_count(&self) -> u128 {
        self.holding.iter().map(|h| h.len() as u128).product()
    }

    /// The arm extracted for channel `m` serving user `n`.
    pub fn arm_spec(&self, m: usize, n: usize) -> Result<arm::ArmSpec> {
        let c = self.channel(m);
        arm::ArmSpec::new(self.holding[n - 1].clone(), c.tau, c.rho)
    }
}

/// Joint age vector, each entry in `1..=S_n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AoIState {
    ages: Vec<u32>,
}

impl AoIState {
    pub fn new(ages: Vec<u32>, config: &SystemConfig) -> Result<Self> {
        if ages.len() != config.n_users() {
            return Err(Error::OutOfRange(format!(
                "state has {} entries for {} users",
                ages.len(),
                config.n_users()
            )));
        }
        for (i, &s) in ages.iter().enumerate() {
            let cap = config.state_cap(i + 1);
            if s < 1 || s > cap {
                return Err(Error::OutOfRange(format!(
                    "age {s} of user {} outside 1..={cap}",
                    i + 1
                )));
            }
        }
        Ok(Self { ages })
    }

    /// The fresh-system state `(1, …, 1)`.
    pub fn all_ones(n_users: usize) -> Self {
        Self {
            ages: vec![1; n_users],
        }
    }

    pub fn ages(&self) -> &[u32] {
        &self.ages
    }

    /// Age of user `n` (1-based).
    pub fn age(&self, n: usize) -> u32 {
        self.ages[n - 1]
    }
}

/// Channel choice per user: `0` means idle, `m ≥ 1` selects channel `m`.
/// Admissible when no channel appears twice.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    choice: Vec<usize>,
}

impl Assignment {
    /// Validates range and the one-user-per-channel constraint.
    pub fn new(choice: Vec<usize>, n_channels: usize) -> Result<Self> {
        let mut used = vec![false; n_channels + 1];
        for (i, &m) in choice.iter().enumerate() {
            if m > n_channels {
                return Err(Error::Inadmissible(format!(
                    "user {} selects channel {m}, but only {n_channels} exist",
                    i + 1
                )));
            }
            if m > 0 {
                if used[m] {
                    return Err(Error::Inadmissible(format!(
                        "channel {m} assigned to more than one user"
                    )));
                }
                used[m] = true;
            }
        }
        Ok(Self { choice })
    }

    /// The all-idle assignment.
    pub fn idle(n_users: usize) -> Self {
        Self {
            choice: vec![0; n_users],
        }
    }

    pub fn choice(&self) -> &[usize] {
        &self.choice
    }

    /// Channel used by user `n` (1-based); `0` when idle.
    pub fn channel_of(&self, n: usize) -> usize {
        self.choice[n - 1]
    }

    /// User served by channel `m`, if any.
    pub fn user_of(&self, m: usize) -> Option<usize> {
        self.choice.iter().position(|&c| c == m).map(|i| i + 1)
    }

    /// Channels activated by this assignment, ascending.
    pub fn activated_channels(&self) -> Vec<usize> {
        let mut ms: Vec<usize> = self.choice.iter().copied().filter(|&m| m > 0).collect();
        ms.sort_unstable();
        ms
    }
}

/// Number of admissible assignments, `Σ_j C(N,j)·M!/(M−j)!`.
pub fn assignment_count(n_users: usize, n_channels: usize) -> u128 {
    let mut total: u128 = 0;
    for j in 0..=n_users.min(n_channels) {
        let mut term: u128 = 1;
        // C(n, j)
        for i in 0..j {
            term = term * (n_users - i) as u128 / (i + 1) as u128;
        }
        // P(m, j)
        for i in 0..j {
            term *= (n_channels - i) as u128;
        }
        total += term;
    }
    total
}

/// All admissible assignments in lexicographic order of the choice vector.
///
/// Refuses when the count exceeds `limit`: the joint action space is
/// factorial in `M`, and an enumeration past the limit signals that exact
/// methods do not apply to the instance.
pub fn enumerate_actions_with_limit(
    n_users: usize,
    n_channels: usize,
    limit: u128,
) -> Result<Vec<Assignment>> {
    if n_users == 0 || n_channels == 0 {
        return Err(Error::InvalidSpec("need at least one user and channel".into()));
    }
    let count = assignment_count(n_users, n_channels);
    if count > limit {
        return Err(Error::ActionSpaceTooLarge { count, limit });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut choice = vec![0usize; n_users];
    let mut used = vec![false; n_channels + 1];
    fn recurse(
        user: usize,
        n_users: usize,
        n_channels: usize,
        choice: &mut Vec<usize>,
        used: &mut Vec<bool>,
        out: &mut Vec<Assignment>,
    ) {
        if user == n_users {
            out.push(Assignment {
                choice: choice.clone(),
            });
            return;
        }
        for m in 0..=n_channels {
            if m > 0 && used[m] {
                continue;
            }
            choice[user] = m;
            if m > 0 {
                used[m] = true;
            }
            recurse(user + 1, n_users, n_channels, choice, used, out);
            if m > 0 {
                used[m] = false;
            }
            choice[user] = 0;
        }
    }
    recurse(0, n_users, n_channels, &mut choice, &mut used, &mut out);
    debug_assert_eq!(out.len() as u128, count);
    Ok(out)
}

/// [`enumerate_actions_with_limit`] at the default limit.
pub fn enumerate_actions(n_users: usize, n_channels: usize) -> Result<Vec<Assignment>> {
    enumerate_actions_with_limit(n_users, n_channels, DEFAULT_ACTION_LIMIT)
}

/// Joint transition probability `Pr(s' | s, a) = Π_n Pr(s'_n | s_n, a_n)`.
pub fn joint_transition_prob(
    config: &SystemConfig,
    state: &AoIState,
    action: &Assignment,
    next: &AoIState,
) -> f64 {
    let mut p = 1.0;
    for n in 1..=config.n_users() {
        let m = action.channel_of(n);
        let cap = config.state_cap(n);
        let rho = if m > 0 { config.channel(m).rho } else { 0.0 };
        p *= arm::arm_transition_prob(state.age(n), m > 0, next.age(n), rho, cap);
        if p == 0.0 {
            return 0.0;
        }
    }
    p
}

/// Aggregate stage cost `Σ_n h_n(s_n) + Σ_{n: a_n = m > 0} τ_m`.
pub fn joint_stage_cost(config: &SystemConfig, state: &AoIState, action: &Assignment) -> f64 {
    let mut c = 0.0;
    for n in 1..=config.n_users() {
        c += config.holding(n, state.age(n));
        let m = action.channel_of(n);
        if m > 0 {
            c += config.channel(m).tau;
        }
    }
    c
}

/// Mixed-radix bijection between age vectors and dense state indices.
#[derive(Debug, Clone)]
pub struct StateCodec {
    caps: Vec<u32>,
}

impl StateCodec {
    pub fn new(caps: Vec<u32>) -> Self {
        Self { caps }
    }

    pub fn for_config(config: &SystemConfig) -> Self {
        Self::new(config.caps())
    }

    pub fn state_count(&self) -> usize {
        self.caps.iter().map(|&c| c as usize).product()
    }

    /// Dense index of an age vector; user 1 is the most significant digit.
    pub fn encode(&self, ages: &[u32]) -> usize {
        let mut idx = 0usize;
        for (s, &cap) in ages.iter().zip(&self.caps) {
            idx = idx * cap as usize + (s - 1) as usize;
        }
        idx
    }

    pub fn decode(&self, mut idx: usize) -> Vec<u32> {
        let mut ages = vec![0u32; self.caps.len()];
        for i in (0..self.caps.len()).rev() {
            let cap = self.caps[i] as usize;
            ages[i] = (idx % cap) as u32 + 1;
            idx /= cap;
        }
        ages
    }
}
