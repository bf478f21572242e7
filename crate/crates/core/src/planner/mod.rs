//! Fleet sizing: how many replicas fit on a machine, what they cost, and how
//! often co-located replicas overload their host's cores.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_RAM_GB_PER_REPLICA: f64 = 6.0;
pub const DEFAULT_CPU_OVERSUBSCRIPTION: f64 = 4.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlanError {
    #[error("machine count {machines} exceeds replica count {replicas}")]
    TooManyMachines { replicas: u64, machines: u64 },
    #[error("replica count must be positive")]
    NoReplicas,
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("no machine in the catalog can host a single replica")]
    NoFeasibleMachine,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub name: String,
    pub cpu_cores: u32,
    pub ram_gb: f64,
    #[serde(default)]
    pub cpu_type: String,
    #[serde(default)]
    pub ram_type: String,
    pub daily_price_usd: f64,
}

impl MachineSpec {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.cpu_cores == 0 || !(self.ram_gb > 0.0) || !(self.daily_price_usd > 0.0) {
            return Err(PlanError::Invalid(format!("machine {:?} needs positive cores, RAM and price", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicaProfile {
    pub ram_gb_per_replica: f64,
    pub idle_cores: f64,
    pub burst_cores: f64,
    pub burst_prob: f64,
}

impl Default for ReplicaProfile {
    fn default() -> Self {
        ReplicaProfile { ram_gb_per_replica: DEFAULT_RAM_GB_PER_REPLICA, idle_cores: 0.2, burst_cores: 2.0, burst_prob: 0.1 }
    }
}

impl ReplicaProfile {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(self.ram_gb_per_replica > 0.0) {
            return Err(PlanError::Invalid("ram_gb_per_replica must be positive".into()));
        }
        if !(self.idle_cores >= 0.0) || !(self.burst_cores > 0.0) || self.burst_cores < self.idle_cores {
            return Err(PlanError::Invalid("need 0 <= idle_cores <= burst_cores and burst_cores > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.burst_prob) {
            return Err(PlanError::Invalid("burst_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Binding {
    CpuBound,
    RamBound,
}

impl std::fmt::Display for Binding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Binding::CpuBound => "CPU_BOUND",
            Binding::RamBound => "RAM_BOUND",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GroupSize {
    pub k: u64,
    /// N divides evenly over M.
    pub exact: bool,
    /// Replicas on the last machine (equal to `k` when exact).
    pub last_machine: u64,
}

/// K = ceil(N / M).
pub fn group_size(replicas: u64, machines: u64) -> Result<GroupSize, PlanError> {
    if replicas == 0 || machines == 0 {
        return Err(PlanError::NoReplicas);
    }
    if machines > replicas {
        return Err(PlanError::TooManyMachines { replicas, machines });
    }
    let k = replicas.div_ceil(machines);
    let exact = replicas % machines == 0;
    Ok(GroupSize { k, exact, last_machine: replicas - k * (machines - 1) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Capacity {
    pub replicas: u64,
    pub binding: Binding,
    pub ram_cap: u64,
    pub cpu_cap: u64,
}

/// Replicas one machine can host; a tie between the two limits reports RAM.
pub fn capacity(machine: &MachineSpec, profile: &ReplicaProfile, cpu_oversubscription: f64) -> Capacity {
    let ram_cap = (machine.ram_gb / profile.ram_gb_per_replica).floor().max(0.0) as u64;
    let cpu_cap = (f64::from(machine.cpu_cores) * cpu_oversubscription / profile.burst_cores).floor().max(0.0) as u64;
    let binding = if cpu_cap < ram_cap { Binding::CpuBound } else { Binding::RamBound };
    Capacity { replicas: ram_cap.min(cpu_cap), binding, ram_cap, cpu_cap }
}

/// USD per replica-day; exact, callers round for display.
pub fn cost_per_replica(daily_price_usd: f64, replicas: u64) -> Result<f64, PlanError> {
    if replicas == 0 {
        return Err(PlanError::NoReplicas);
    }
    Ok(daily_price_usd / replicas as f64)
}

/// Rounds to the three decimals costs are reported at.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn validate_contention(profile: &ReplicaProfile, machine_cores: f64) -> Result<(), PlanError> {
    profile.validate()?;
    if !(machine_cores > 0.0) {
        return Err(PlanError::Invalid("machine_cores must be positive".into()));
    }
    Ok(())
}

fn overloaded(bursts: u64, k: u64, machine_cores: f64, profile: &ReplicaProfile) -> bool {
    bursts as f64 * profile.burst_cores + (k - bursts) as f64 * profile.idle_cores > machine_cores
}

/// Monte Carlo estimate of how often K co-located replicas demand more than
/// `machine_cores`. Each replica bursts independently on every trial.
pub fn simulate_contention(
    k: u64,
    machine_cores: f64,
    profile: &ReplicaProfile,
    trials: u64,
    seed: u64,
) -> Result<f64, PlanError> {
    validate_contention(profile, machine_cores)?;
    if k == 0 || trials == 0 {
        return Err(PlanError::Invalid("K and trials must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = profile.burst_prob;
    // u < p on a uniform u64 draw, without float conversion per replica.
    let (always, threshold) = if p >= 1.0 { (true, 0) } else { (false, (p * 2f64.powi(64)) as u64) };
    let mut overloads = 0u64;
    for _ in 0..trials {
        let bursts = if always { k } else { (0..k).filter(|_| rng.next_u64() < threshold).count() as u64 };
        if overloaded(bursts, k, machine_cores, profile) {
            overloads += 1;
        }
    }
    Ok(overloads as f64 / trials as f64)
}

/// Exact overload probability: the binomial tail over burst counts that
/// exceed `machine_cores`.
pub fn overload_probability(k: u64, machine_cores: f64, profile: &ReplicaProfile) -> Result<f64, PlanError> {
    validate_contention(profile, machine_cores)?;
    let p = profile.burst_prob;
    if p == 0.0 || p == 1.0 {
        let b = if p == 1.0 { k } else { 0 };
        return Ok(if overloaded(b, k, machine_cores, profile) { 1.0 } else { 0.0 });
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut log_choose = 0.0f64;
    let mut total = 0.0;
    for b in 0..=k {
        if b > 0 {
            log_choose += ((k - b + 1) as f64).ln() - (b as f64).ln();
        }
        if overloaded(b, k, machine_cores, profile) {
            total += (log_choose + b as f64 * lp + (k - b) as f64 * lq).exp();
        }
    }
    Ok(total.min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PackingPlan {
    pub machine: String,
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "M")]
    pub m: u64,
    #[serde(rename = "K")]
    pub k: u64,
    pub binding: Binding,
    pub total_daily_cost_usd: f64,
    pub cost_per_replica_usd: f64,
    pub overload_fraction: f64,
}

impl PackingPlan {
    pub fn table(&self) -> String {
        let rows = [
            ("machine", self.machine.clone()),
            ("replicas (N)", self.n.to_string()),
            ("machines (M)", self.m.to_string()),
            ("group size (K)", self.k.to_string()),
            ("binding", self.binding.to_string()),
            ("total USD/day", format!("{:.2}", self.total_daily_cost_usd)),
            ("USD/replica-day", format!("{:.3}", self.cost_per_replica_usd)),
            ("overload fraction", format!("{:.4}", self.overload_fraction)),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v}\n")).collect()
    }
}

/// Cheapest homogeneous fleet for `n` replicas. Ties go to fewer machines,
/// then to the machine name. Machines are filled up to capacity.
pub fn plan(
    n: u64,
    catalog: &[MachineSpec],
    profile: &ReplicaProfile,
    cpu_oversubscription: f64,
) -> Result<PackingPlan, PlanError> {
    if n == 0 {
        return Err(PlanError::NoReplicas);
    }
    if catalog.is_empty() {
        return Err(PlanError::EmptyCatalog);
    }
    if !(cpu_oversubscription > 0.0) {
        return Err(PlanError::Invalid("cpu_oversubscription must be positive".into()));
    }
    profile.validate()?;
    let mut best: Option<(f64, u64, &MachineSpec, Capacity)> = None;
    for machine in catalog {
        machine.validate()?;
        let cap = capacity(machine, profile, cpu_oversubscription);
        if cap.replicas == 0 {
            continue;
        }
        let m = n.div_ceil(cap.replicas);
        let cost = m as f64 * machine.daily_price_usd;
        let better = match &best {
            None => true,
            Some((bc, bm, bmach, _)) => {
                cost.total_cmp(bc).then(m.cmp(bm)).then(machine.name.cmp(&bmach.name)).is_lt()
            }
        };
        if better {
            best = Some((cost, m, machine, cap));
        }
    }
    let (cost, m, machine, cap) = best.ok_or(PlanError::NoFeasibleMachine)?;
    let k = cap.replicas.min(n);
    Ok(PackingPlan {
        machine: machine.name.clone(),
        n,
        m,
        k,
        binding: cap.binding,
        total_daily_cost_usd: cost,
        cost_per_replica_usd: cost / n as f64,
        overload_fraction: overload_probability(k, f64::from(machine.cpu_cores), profile)?,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    machine: Vec<MachineSpec>,
}

fn read(path: &Path) -> Result<String, PlanError> {
    std::fs::read_to_string(path).map_err(|e| PlanError::File { path: path.display().to_string(), message: e.to_string() })
}

/// Reads a TOML catalog made of `[[machine]]` tables.
pub fn load_catalog(path: &Path) -> Result<Vec<MachineSpec>, PlanError> {
    let file: CatalogFile = toml::from_str(&read(path)?)
        .map_err(|e| PlanError::File { path: path.display().to_string(), message: e.to_string() })?;
    for m in &file.machine {
        m.validate()?;
    }
    Ok(file.machine)
}

pub fn load_profile(path: &Path) -> Result<ReplicaProfile, PlanError> {
    let profile: ReplicaProfile = toml::from_str(&read(path)?)
        .map_err(|e| PlanError::File { path: path.display().to_string(), message: e.to_string() })?;
    profile.validate()?;
    Ok(profile)
}
