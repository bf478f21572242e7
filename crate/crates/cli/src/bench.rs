use std::fmt::Write as _;
use std::path::Path;

use gymfleet::bench::{
    load_bench_config, run_async_contract, run_chaos_experiment, run_datagen_experiment, run_latency_sweep,
    run_recovery_experiment, run_throughput_sweep,
};

use crate::Experiment;

pub async fn run(experiment: Experiment, config: &Path, out: &Path) -> Result<(), String> {
    let cfg = load_bench_config(config)?;
    let csv = match experiment {
        Experiment::Throughput => {
            let r = run_throughput_sweep(&cfg.throughput).await?;
            eprintln!("fit: slope {:.3} steps/s per replica, R^2 {:.4}", r.fit.slope, r.fit.r2);
            r.to_csv()
        }
        Experiment::Latency => run_latency_sweep(&cfg.latency).await?.to_csv(),
        Experiment::Recovery => {
            let r = run_recovery_experiment(&cfg.recovery).await?;
            match r.full_recovery_ms {
                Some(ms) => eprintln!("all {} replicas healthy after {ms} ms", r.replicas),
                None => eprintln!("fleet did not fully recover"),
            }
            r.to_csv()
        }
        Experiment::Datagen => {
            let r = run_datagen_experiment(&cfg.datagen).await?;
            eprintln!(
                "{:.1} trajectories/min measured, {:.1} predicted",
                r.measured_per_min, r.predicted_per_min
            );
            r.to_csv()
        }
        Experiment::Chaos => {
            let r = run_chaos_experiment(&cfg.chaos).await?;
            eprintln!("conserved: {}, exceptions: {}", r.conserved(), r.exceptions.len());
            r.to_csv()
        }
        Experiment::Async => {
            let timings = run_async_contract(&cfg.async_contract).await?;
            let mut csv = String::from("trial,submit_ms\n");
            for (i, t) in timings.iter().enumerate() {
                let _ = writeln!(csv, "{i},{:.4}", t.as_secs_f64() * 1000.0);
            }
            csv
        }
    };
    if out == Path::new("-") {
        print!("{csv}");
        Ok(())
    } else {
        std::fs::write(out, csv).map_err(|e| format!("{}: {e}", out.display()))
    }
}
