use std::fmt::Write as _;
use std::path::Path;

use gymfleet::planner::{load_catalog, load_profile, overload_probability, simulate_contention};

pub fn plan(replicas: u64, catalog: &Path, profile: &Path, oversubscription: f64) -> Result<(), String> {
    let catalog = load_catalog(catalog).map_err(|e| e.to_string())?;
    let profile = load_profile(profile).map_err(|e| e.to_string())?;
    let plan = gymfleet::planner::plan(replicas, &catalog, &profile, oversubscription).map_err(|e| e.to_string())?;
    let json = serde_json::to_string_pretty(&plan).map_err(|e| e.to_string())?;
    println!("{json}\n");
    print!("{}", plan.table());
    Ok(())
}

pub fn contention_csv(
    ks: &[u64],
    profile: &gymfleet::planner::ReplicaProfile,
    cores: Option<f64>,
    trials: u64,
    seed: u64,
    exact: bool,
) -> Result<String, String> {
    let mut out = String::from("K,overload_fraction\n");
    for &k in ks {
        let c = cores.unwrap_or(k as f64);
        let f = if exact {
            overload_probability(k, c, profile)
        } else {
            simulate_contention(k, c, profile, trials, seed)
        }
        .map_err(|e| format!("K={k}: {e}"))?;
        let _ = writeln!(out, "{k},{f:.6}");
    }
    Ok(out)
}

pub fn contention(
    ks: &[u64],
    profile: &Path,
    cores: Option<f64>,
    trials: u64,
    seed: u64,
    exact: bool,
) -> Result<(), String> {
    let profile = load_profile(profile).map_err(|e| e.to_string())?;
    print!("{}", contention_csv(ks, &profile, cores, trials, seed, exact)?);
    Ok(())
}
