use std::time::Instant;

use tcr_core::config::ExperimentConfig;
use tcr_core::experiment::run_protocol;

fn main() {
    let cfg = ExperimentConfig::desk();
    let t0 = Instant::now();
    let report = run_protocol(&cfg, &mut |m| eprintln!("[{:>8.1}s] {m}", t0.elapsed().as_secs_f64())).expect("protocol");
    println!("{}", serde_json::to_string_pretty(&report.per_angles).unwrap());
}
