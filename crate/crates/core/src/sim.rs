//! Discrete-time environment and experiment harness.
//!
//! The environment draws one Bernoulli outcome per *activated* channel per
//! epoch from a per-channel RNG stream. Idle channels consume no
//! randomness, so the i-th activation of a channel sees the same outcome
//! under every policy run from the same trial seed — which makes per-seed
//! comparisons across policies paired rather than merely independent.
//!
//! Channel success rates are estimated from observed outcomes with an
//! optimistic prior: a never-used channel counts as perfect until proven
//! otherwise, which is itself an exploration device.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::composite::{joint_stage_cost, AoIState, Assignment, Channel, SystemConfig};
use crate::error::{Error, Result};
use crate::index::{build_index_table, IndexTable, UcbState};
use crate::index_learn::{LearnerBank, StepSchedule};
use crate::policy::{schedule, SchedulerKind};

/// Rebuild the index table only when some estimate moved more than this.
pub const REBUILD_TOL: f64 = 1e-6;

/// Floor applied to estimated success rates before index computation. The
/// estimator legitimately reports 0 after a run of failures, but the arm
/// model needs a renewing chain; indices vary smoothly near zero so the
/// floor is inconsequential for scheduling.
pub const RHO_HAT_FLOOR: f64 = 1e-3;

/// Scenario template: dimensions, sampling ranges, and experiment shape.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioSpec {
    pub users: usize,
    pub channels: usize,
    pub state_cap: u32,
    /// Holding costs are `state_cap` uniform draws from this range, sorted.
    pub holding_range: (f64, f64),
    pub rho_range: (f64, f64),
    pub tau_range: (f64, f64),
    pub horizon: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            users: 10,
            channels: 5,
            state_cap: 10,
            holding_range: (0.0, 20.0),
            rho_range: (0.7, 0.9),
            tau_range: (10.0, 20.0),
            horizon: 250,
            repeats: 10,
            seed: 1,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 || self.users <= self.channels {
            return Err(Error::InvalidSpec(format!(
                "need more users than channels, got N={}, M={}",
                self.users, self.channels
            )));
        }
        if self.state_cap < 2 {
            return Err(Error::InvalidSpec("state cap must be at least 2".into()));
        }
        for (name, (lo, hi)) in [
            ("holding", self.holding_range),
            ("rho", self.rho_range),
            ("tau", self.tau_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidSpec(format!(
                    "{name} range ({lo}, {hi}) is not a valid interval"
                )));
            }
        }
        let (rlo, rhi) = self.rho_range;
        if !(rlo > 0.0 && rhi <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "rho range ({rlo}, {rhi}) must sit inside (0, 1]"
            )));
        }
        if self.holding_range.0 < 0.0 || self.tau_range.0 < 0.0 {
            return Err(Error::InvalidSpec("costs must be nonnegative".into()));
        }
        Ok(())
    }
}

/// splitmix64; used to derive independent stream seeds from the master.
fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Trial seed for repeat `r` of a suite run from `master`.
pub fn trial_seed(master: u64, repeat: usize) -> u64 {
    mix_seed(master, 0x5eed_0000 + repeat as u64)
}

/// Samples a system from the scenario template. Holding curves are sorted
/// uniform draws; channel parameters are uniform in their ranges. Fully
/// determined by the spec's seed.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<SystemConfig> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5ce0));
    let sample = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    let mut holding = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let mut h: Vec<f64> = (0..spec.state_cap)
            .map(|_| sample(&mut rng, spec.holding_range))
            .collect();
        h.sort_by(f64::total_cmp);
        holding.push(h);
    }
    let channels = (0..spec.channels)
        .map(|_| Channel {
            rho: sample(&mut rng, spec.rho_range),
            tau: sample(&mut rng, spec.tau_range),
        })
        .collect();
    SystemConfig::new(holding, channels)
}

/// One independent RNG stream per channel, all derived from the trial seed.
#[derive(Debug, Clone)]
pub struct ChannelRngs {
    streams: Vec<ChaCha8Rng>,
}

impl ChannelRngs {
    pub fn new(trial_seed: u64, n_channels: usize) -> Self {
        let streams = (1..=n_channels)
            .map(|m| {
                let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
                rng.set_stream(m as u64);
                rng
            })
            .collect();
        Self { streams }
    }

    fn draw(&mut self, m: usize, rho: f64) -> bool {
        self.streams[m - 1].gen_bool(rho)
    }
}

/// Running success-rate estimates from observed transmissions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimator {
    attempts: Vec<u64>,
    successes: Vec<u64>,
}

impl ChannelEstimator {
    pub fn new(n_channels: usize) -> Self {
        Self {
            attempts: vec![0; n_channels],
            successes: vec![0; n_channels],
        }
    }

    /// `ρ̂_m`: empirical success ratio, or the optimistic prior 1.0 while
    /// the channel is untouched.
    pub fn rho_hat(&self) -> Vec<f64> {
        self.attempts
            .iter()
            .zip(&self.successes)
            .map(|(&a, &s)| if a == 0 { 1.0 } else { s as f64 / a as f64 })
            .collect()
    }

    pub fn attempts(&self) -> &[u64] {
        &self.attempts
    }

    /// Folds one epoch's outcomes in; channels absent from `outcomes` are
    /// untouched and keep their prior.
    pub fn update(&mut self, outcomes: &[(usize, bool)]) {
        for &(m, success) in outcomes {
            self.attempts[m - 1] += 1;
            if success {
                self.successes[m - 1] += 1;
            }
        }
    }
}

/// One environment step: draws an outcome for each activated channel,
/// advances every user's age, and reports the stage cost of `(state, action)`.
pub fn env_step(
    config: &SystemConfig,
    state: &AoIState,
    action: &Assignment,
    rngs: &mut ChannelRngs,
) -> Result<(AoIState, Vec<(usize, bool)>, f64)> {
    Assignment::new(action.choice().to_vec(), config.n_channels())?;
    let cost = joint_stage_cost(config, state, action);
    let outcomes: Vec<(usize, bool)> = action
        .activated_channels()
        .into_iter()
        .map(|m| (m, rngs.draw(m, config.channel(m).rho)))
        .collect();
    let mut ages = Vec::with_capacity(config.n_users());
    for n in 1..=config.n_users() {
        let m = action.channel_of(n);
        let success = m > 0 && outcomes.iter().any(|&(om, s)| om == m && s);
        let next = crate::arm::arm_transition(state.age(n), m > 0, success, config.state_cap(n))?;
        ages.push(next);
    }
    Ok((AoIState::new(ages, config)?, outcomes, cost))
}

/// Everything recorded along one closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub policy: String,
    pub seed: u64,
    pub costs: Vec<f64>,
    pub assignments: Vec<Assignment>,
    /// Cumulative mean of the per-epoch costs.
    pub moving_avg: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn final_moving_avg(&self) -> Option<f64> {
        self.moving_avg.last().copied()
    }

    /// Writes `epoch,cost,moving_avg` rows with a header.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,cost,moving_avg")?;
        for (i, (c, ma)) in self.costs.iter().zip(&self.moving_avg).enumerate() {
            writeln!(w, "{},{c},{ma}", i + 1)?;
        }
        Ok(())
    }
}

fn clamped_rho(rho_hat: &[f64]) -> Vec<f64> {
    rho_hat.iter().map(|r| r.max(RHO_HAT_FLOOR)).collect()
}

/// Runs one closed-loop trial: estimate rates, refresh the index table (or
/// the Q-learners), schedule, step the environment, fold outcomes back in.
///
/// Estimates update at epoch boundaries, so the schedule at epoch `k` sees
/// outcomes through epoch `k−1`. Every byte of the record is a function of
/// `(config, kind, horizon, seed)`.
pub fn run_trial(
    config: &SystemConfig,
    kind: SchedulerKind,
    horizon: usize,
    seed: u64,
) -> Result<TrajectoryRecord> {
    if !kind.is_online() {
        return Err(Error::InvalidSpec(format!(
            "policy {kind} cannot run in the online loop"
        )));
    }
    let n_channels = config.n_channels();
    let mut rngs = ChannelRngs::new(seed, n_channels);
    let mut estimator = ChannelEstimator::new(n_channels);
    let mut state = AoIState::all_ones(config.n_users());
    let mut ucb = match kind {
        SchedulerKind::IndexValueUcb { sigma } => Some(UcbState::new(n_channels, sigma)),
        _ => None,
    };
    let schedule_params = StepSchedule::default_schedule();
    let mut learners = match kind {
        SchedulerKind::IndexValueQ => Some(LearnerBank::new(config)?),
        _ => None,
    };

    let mut table: Option<IndexTable> = None;
    let mut table_rho: Vec<f64> = Vec::new();
    let mut record = TrajectoryRecord {
        policy: kind.to_string(),
        seed,
        costs: Vec::with_capacity(horizon),
        assignments: Vec::with_capacity(horizon),
        moving_avg: Vec::with_capacity(horizon),
    };
    let mut cost_sum = 0.0;

    for epoch in 1..=horizon {
        let rho_hat = estimator.rho_hat();
        let current_table = if let Some(bank) = &learners {
            // Learned indices stand in for the analytic table.
            IndexTable::new(bank.index_values())?
        } else if kind.uses_index_table() {
            let clamped = clamped_rho(&rho_hat);
            let stale = table.is_none()
                || table_rho
                    .iter()
                    .zip(&clamped)
                    .any(|(a, b)| (a - b).abs() > REBUILD_TOL);
            if stale {
                table = Some(build_index_table(config, &clamped)?);
                table_rho = clamped;
            }
            table.clone().expect("just built")
        } else {
            // Myopic policies ignore the table; hand them an empty-ish one.
            IndexTable::new(vec![vec![vec![0.0]; config.n_users()]; n_channels])?
        };

        if let Some(u) = &mut ucb {
            u.epoch = epoch as u64;
        }
        let action = schedule(kind, config, &state, &current_table, &rho_hat, ucb.as_ref())?;
        let (next, outcomes, cost) = env_step(config, &state, &action, &mut rngs)?;
        estimator.update(&outcomes);
        if let Some(u) = &mut ucb {
            u.record(&action.activated_channels());
        }
        if let Some(bank) = &mut learners {
            bank.synchronous_sweep(&outcomes, &schedule_params)?;
        }

        cost_sum += cost;
        record.costs.push(cost);
        record.moving_avg.push(cost_sum / epoch as f64);
        record.assignments.push(action);
        state = next;
    }
    Ok(record)
}

/// Mean/std summary of one policy across the suite's repeats.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PolicySummary {
    pub policy: String,
    pub mean: f64,
    /// Population standard deviation of the final moving averages.
    pub std: f64,
    pub final_moving_avg: Vec<f64>,
}

/// All trials of a suite, plus per-policy aggregates.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub config: SystemConfig,
    pub summaries: Vec<PolicySummary>,
    /// Ordered policy-major, then by repeat.
    pub trials: Vec<TrajectoryRecord>,
}

/// Runs `repeats` trials per policy on one sampled scenario. Repeat `r`
/// uses the same trial seed for every policy, so comparisons are paired;
/// trials fan out over a worker pool and merge in deterministic order.
pub fn run_suite(spec: &ScenarioSpec, kinds: &[SchedulerKind]) -> Result<SuiteResult> {
    let config = generate_scenario(spec)?;
    run_suite_on(&config, spec, kinds)
}

/// [`run_suite`] on an externally supplied system.
pub fn run_suite_on(
    config: &SystemConfig,
    spec: &ScenarioSpec,
    kinds: &[SchedulerKind],
) -> Result<SuiteResult> {
    for kind in kinds {
        if !kind.is_online() {
            return Err(Error::InvalidSpec(format!(
                "policy {kind} cannot run in the online loop"
            )));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..kinds.len())
        .flat_map(|ki| (0..spec.repeats).map(move |r| (ki, r)))
        .collect();
    let trials: Result<Vec<TrajectoryRecord>> = jobs
        .par_iter()
        .map(|&(ki, r)| run_trial(config, kinds[ki], spec.horizon, trial_seed(spec.seed, r)))
        .collect();
    let trials = trials?;

    let mut summaries = Vec::with_capacity(kinds.len());
    for (ki, kind) in kinds.iter().enumerate() {
        let finals: Vec<f64> = (0..spec.repeats)
            .filter_map(|r| trials[ki * spec.repeats + r].final_moving_avg())
            .collect();
        let mean = if finals.is_empty() {
            0.0
        } else {
            finals.iter().sum::<f64>() / finals.len() as f64
        };
        let var = if finals.is_empty() {
            0.0
        } else {
            finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / finals.len() as f64
        };
        summaries.push(PolicySummary {
            policy: kind.to_string(),
            mean,
            std: var.sqrt(),
            final_moving_avg: finals,
        });
    }
    Ok(SuiteResult {
        config: config.clone(),
        summaries,
        trials,
    })
}
