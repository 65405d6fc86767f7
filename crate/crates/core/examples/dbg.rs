use aoi_sched::policy::SchedulerKind;
use aoi_sched::sim::{generate_scenario, run_suite_on, ScenarioSpec};

fn main() {
    let kinds = [
        SchedulerKind::IndexValue { refined: false },
        SchedulerKind::IndexChannel { refined: false },
        SchedulerKind::IndexValue { refined: true },
        SchedulerKind::IndexChannel { refined: true },
        SchedulerKind::IndexValueQ,
        SchedulerKind::MyopicHolding,
        SchedulerKind::MyopicAge,
    ];
    for n in [4usize, 6, 8, 10] {
        let spec = ScenarioSpec { users: n, channels: n / 2, seed: 21, ..ScenarioSpec::default() };
        let config = generate_scenario(&spec).unwrap();
        let suite = run_suite_on(&config, &spec, &kinds).unwrap();
        print!("N={n}:");
        for s in &suite.summaries {
            print!("  {}={:.2}", s.policy, s.mean);
        }
        println!();
    }
}
