//! Instance generation, exact and heuristic partitioning oracles, and the
//! benchmark harness behind the comparison tables and the scaling study.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::ITERATION_TIME_MS;
use crate::error::{Result, SpimError};
use crate::model::{
    fidelity, normalize_instance_with_precision, round_significant, AdiabaticSchedule,
    NppInstance, SignedSumTracker, SpinConfig,
};
use crate::solvers::{
    adiabatic_solve, default_flips, default_npp_schedule, lattice_shape, AnnealSchedule,
    MhParams, RunTrace, SolveMode,
};

/// Largest instance [`exhaustive_best`] accepts.
pub const EXHAUSTIVE_LIMIT: usize = 24;

/// Environment variable capping benchmark worker threads.
pub const THREADS_ENV: &str = "SPIM_SIM_THREADS";

/// `n` uniform reals in (0, 1] rounded to `digits` significant digits,
/// normalized by their maximum. Deterministic per `(n, digits, seed)`.
pub fn gen_instance(n: usize, digits: u32, seed: u64) -> Result<NppInstance> {
    if n < 2 {
        return Err(SpimError::InvalidArgument(format!("need at least 2 numbers, got {n}")));
    }
    if !(1..=8).contains(&digits) {
        return Err(SpimError::InvalidArgument(format!(
            "digits must lie in 1..=8, got {digits}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let numbers: Vec<f64> = (0..n)
        .map(|_| round_significant(1.0 - rng.random::<f64>(), digits))
        .collect();
    normalize_instance_with_precision(&numbers, digits)
}

/// Global optimum by Gray-code enumeration with the first spin fixed to +1.
pub fn exhaustive_best(inst: &NppInstance) -> Result<(SpinConfig, f64)> {
    let n = inst.len();
    if n > EXHAUSTIVE_LIMIT {
        return Err(SpimError::TooLarge {
            n,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    if n == 0 {
        return Err(SpimError::InvalidInstance("empty instance".into()));
    }
    let mut cfg = SpinConfig::from_spins(vec![1; n])?;
    let mut tracker = SignedSumTracker::new(inst.zeta().to_vec(), &cfg)?;
    let mut best_sum = tracker.sum().abs();
    let mut best_code = 0u64;
    let mut code = 0u64;
    for k in 1..(1u64 << (n - 1)) {
        // bit flipped between consecutive Gray codes of k-1 and k
        let bit = k.trailing_zeros() as usize;
        let index = bit + 1;
        tracker.apply_flip(index, cfg.get(index));
        cfg.flip(index);
        code ^= 1 << bit;
        let s = tracker.sum().abs();
        if s < best_sum {
            best_sum = s;
            best_code = code;
        }
    }
    let spins = (0..n)
        .map(|i| {
            if i > 0 && best_code >> (i - 1) & 1 == 1 {
                -1
            } else {
                1
            }
        })
        .collect();
    let best = SpinConfig::from_spins(spins)?;
    let f = fidelity(inst, &best)?;
    Ok((best, f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem {
    value: f64,
    node: usize,
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.value
            .total_cmp(&other.value)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Largest differencing method with sign reconstruction.
pub fn karmarkar_karp(inst: &NppInstance) -> Result<(SpinConfig, f64)> {
    let n = inst.len();
    if n < 2 {
        return Err(SpimError::InvalidInstance(format!("need at least 2 numbers, got {n}")));
    }
    let mut heap: BinaryHeap<HeapItem> = inst
        .zeta()
        .iter()
        .enumerate()
        .map(|(node, &value)| HeapItem { value, node })
        .collect();
    // (child, parent): child sits on the opposite side from parent
    let mut links = Vec::with_capacity(n - 1);
    while heap.len() > 1 {
        let a = heap.pop().expect("two items");
        let b = heap.pop().expect("two items");
        links.push((b.node, a.node));
        heap.push(HeapItem {
            value: a.value - b.value,
            node: a.node,
        });
    }
    let root = heap.pop().expect("one item").node;
    let mut spins = vec![0i8; n];
    spins[root] = 1;
    for &(child, parent) in links.iter().rev() {
        spins[child] = -spins[parent];
    }
    if spins[0] < 0 {
        spins.iter_mut().for_each(|s| *s = -*s);
    }
    let cfg = SpinConfig::from_spins(spins)?;
    let f = fidelity(inst, &cfg)?;
    Ok((cfg, f))
}

/// Best of `samples` uniformly random configurations.
pub fn random_search(inst: &NppInstance, samples: usize, seed: u64) -> Result<(SpinConfig, f64)> {
    let n = inst.len();
    let zeta = inst.zeta();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = Vec::new();
    let mut best_abs = f64::INFINITY;
    let mut spins = vec![0i8; n];
    for _ in 0..samples.max(1) {
        let mut sum = 0.0;
        for (k, chunk) in spins.chunks_mut(64).enumerate() {
            let bits: u64 = rng.random();
            for (j, s) in chunk.iter_mut().enumerate() {
                *s = if bits >> j & 1 == 1 { 1 } else { -1 };
                sum += *s as f64 * zeta[k * 64 + j];
            }
        }
        if sum.abs() < best_abs {
            best_abs = sum.abs();
            best.clone_from(&spins);
        }
    }
    let cfg = SpinConfig::from_spins(best)?;
    let f = fidelity(inst, &cfg)?;
    Ok((cfg, f))
}

/// Adiabatic solver settings; unset fields take size-dependent defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpimSettings {
    pub steps: usize,
    pub settle_iterations: Option<usize>,
    /// Total iteration budget; defaults to the staged iterations of the schedule.
    pub iterations: Option<usize>,
    pub d: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

impl Default for SpimSettings {
    fn default() -> Self {
        Self {
            steps: AdiabaticSchedule::DEFAULT_STEPS,
            settle_iterations: None,
            iterations: None,
            d: None,
            beta_start: None,
            beta_end: None,
        }
    }
}

impl SpimSettings {
    /// Concrete schedules and chain parameters for `n` spins.
    pub fn resolve(&self, n: usize, seed: u64) -> Result<(AdiabaticSchedule, AnnealSchedule, MhParams)> {
        let settle = self
            .settle_iterations
            .unwrap_or_else(|| AdiabaticSchedule::default_for(n).settle_iterations);
        let sched = AdiabaticSchedule::new(self.steps, settle)?;
        let total = self.iterations.unwrap_or_else(|| sched.staged_iterations());
        let mut anneal = default_npp_schedule(total);
        if let Some(b) = self.beta_start {
            anneal.beta_start = b;
        }
        if let Some(b) = self.beta_end {
            anneal.beta_end = b;
        }
        anneal.validate()?;
        let params = MhParams::new(self.d.unwrap_or_else(|| default_flips(n)), seed);
        Ok((sched, anneal, params))
    }
}

/// Fast-mode adiabatic solve with resolved settings.
pub fn solve_spim(inst: &NppInstance, settings: &SpimSettings, seed: u64) -> Result<RunTrace> {
    let (sched, anneal, params) = settings.resolve(inst.len(), seed)?;
    adiabatic_solve(inst, &sched, &anneal, &params, &SolveMode::Fast, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Spim,
    KarmarkarKarp,
    Exhaustive,
    RandomSearch,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Spim => "spim",
            SolverKind::KarmarkarKarp => "karmarkar_karp",
            SolverKind::Exhaustive => "exhaustive",
            SolverKind::RandomSearch => "random_search",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSuite {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub digits: u32,
    pub solvers: Vec<SolverKind>,
    pub spim: SpimSettings,
    /// Samples drawn by the random-search baseline.
    pub random_samples: usize,
}

impl Default for BenchSuite {
    fn default() -> Self {
        Self {
            sizes: vec![16, 64, 256],
            seeds: (0..10).collect(),
            digits: 8,
            solvers: vec![SolverKind::Spim, SolverKind::KarmarkarKarp],
            spim: SpimSettings::default(),
            random_samples: 100_000,
        }
    }
}

impl BenchSuite {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.seeds.is_empty() || self.solvers.is_empty() {
            return Err(SpimError::InvalidArgument(
                "suite needs at least one size, seed and solver".into(),
            ));
        }
        if let Some(&n) = self.sizes.iter().find(|&&n| n < 2) {
            return Err(SpimError::InvalidArgument(format!("size {n} is below 2")));
        }
        if !(1..=8).contains(&self.digits) {
            return Err(SpimError::InvalidArgument(format!(
                "digits must lie in 1..=8, got {}",
                self.digits
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub instance_id: String,
    pub n_spins: usize,
    pub solver_name: String,
    pub best_fidelity: Option<f64>,
    /// `best_fidelity` times the sum of the raw numbers.
    pub best_residual: Option<f64>,
    pub iterations: usize,
    pub simulated_time_ms: f64,
    pub wall_time_ms: f64,
    pub seed: u64,
    pub error: Option<String>,
}

pub fn instance_id(n: usize, seed: u64) -> String {
    format!("n{n}-s{seed}")
}

fn run_cell(suite: &BenchSuite, n: usize, seed: u64, solver: SolverKind) -> BenchRecord {
    let started = Instant::now();
    let mut record = BenchRecord {
        instance_id: instance_id(n, seed),
        n_spins: n,
        solver_name: solver.name().to_string(),
        best_fidelity: None,
        best_residual: None,
        iterations: 0,
        simulated_time_ms: 0.0,
        wall_time_ms: 0.0,
        seed,
        error: None,
    };
    let outcome = gen_instance(n, suite.digits, seed).and_then(|inst| {
        let (fid, iterations, sim) = match solver {
            SolverKind::Spim => {
                let trace = solve_spim(&inst, &suite.spim, seed)?;
                let s = trace.summary;
                (s.best_fidelity.unwrap_or(1.0), s.iterations, s.simulated_time_ms)
            }
            SolverKind::KarmarkarKarp => (karmarkar_karp(&inst)?.1, 0, 0.0),
            SolverKind::Exhaustive => (exhaustive_best(&inst)?.1, 0, 0.0),
            SolverKind::RandomSearch => (random_search(&inst, suite.random_samples, seed)?.1, 0, 0.0),
        };
        Ok((fid, fid * inst.total(), iterations, sim))
    });
    match outcome {
        Ok((fid, residual, iterations, sim)) => {
            record.best_fidelity = Some(fid);
            record.best_residual = Some(residual);
            record.iterations = iterations;
            record.simulated_time_ms = sim;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    record
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
}

fn with_pool<T: Send>(threads: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| SpimError::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Runs every (size, seed, solver) cell in parallel. Records come back in
/// size, seed, solver order; failing cells carry their error.
pub fn run_benchmark(suite: &BenchSuite) -> Result<Vec<BenchRecord>> {
    run_benchmark_with_threads(suite, thread_cap())
}

pub fn run_benchmark_with_threads(suite: &BenchSuite, threads: Option<usize>) -> Result<Vec<BenchRecord>> {
    suite.validate()?;
    let cells: Vec<(usize, u64, SolverKind)> = suite
        .sizes
        .iter()
        .flat_map(|&n| {
            suite
                .seeds
                .iter()
                .flat_map(move |&s| suite.solvers.iter().map(move |&k| (n, s, k)))
        })
        .collect();
    with_pool(threads, || {
        cells
            .par_iter()
            .map(|&(n, seed, solver)| run_cell(suite, n, seed, solver))
            .collect()
    })
}

fn opt_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the deterministic record columns; wall-clock time goes to
/// [`write_timings_csv`].
pub fn write_records_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "instance_id",
        "n_spins",
        "solver_name",
        "best_fidelity",
        "best_residual",
        "iterations",
        "simulated_time_ms",
        "seed",
        "error",
    ])?;
    for r in records {
        w.write_record([
            r.instance_id.clone(),
            r.n_spins.to_string(),
            r.solver_name.clone(),
            opt_string(r.best_fidelity),
            opt_string(r.best_residual),
            r.iterations.to_string(),
            r.simulated_time_ms.to_string(),
            r.seed.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_timings_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["instance_id", "solver_name", "wall_time_ms"])?;
    for r in records {
        w.write_record([r.instance_id.clone(), r.solver_name.clone(), r.wall_time_ms.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Median best fidelity of one solver's successful records.
pub fn median_fidelity(records: &[BenchRecord], solver: SolverKind) -> Option<f64> {
    let mut v: Vec<f64> = records
        .iter()
        .filter(|r| r.solver_name == solver.name())
        .filter_map(|r| r.best_fidelity)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { 0.5 * (v[m - 1] + v[m]) } else { v[m] })
}

/// Published comparison values, shipped as context only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub solver: String,
    pub n_spins: Option<usize>,
    pub best_fidelity: Option<f64>,
    pub average_fidelity: Option<f64>,
    pub runtime: Option<String>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub note: String,
    pub per_instance: Vec<ReferenceRow>,
    pub summary: Vec<ReferenceRow>,
}

/// Literature fidelities for the optical machine, a quantum annealer and a
/// MIP solver. These are not measured by this crate.
pub fn reference_table() -> ReferenceTable {
    let source = "literature".to_string();
    let per_instance_values = [
        [4.38e-5, 2.89e-5, 5.34e-4],
        [3.58e-5, 1.78e-4, 1.28e-4],
        [4.53e-5, 2.41e-3, 2.74e-4],
        [1.07e-5, 1.27e-5, 1.47e-4],
        [9.74e-5, 1.16e-4, 5.89e-4],
    ];
    let names = ["gurobi", "dwave_annealer", "spim_hardware"];
    let per_instance = per_instance_values
        .iter()
        .flat_map(|row| {
            let source = source.clone();
            row.iter().zip(names).map(move |(&f, name)| ReferenceRow {
                solver: name.to_string(),
                n_spins: None,
                best_fidelity: Some(f),
                average_fidelity: None,
                runtime: None,
                source: source.clone(),
            })
        })
        .collect();
    let summary = vec![
        ReferenceRow {
            solver: "spim_hardware".into(),
            n_spins: Some(64),
            best_fidelity: None,
            average_fidelity: Some(6e-4),
            runtime: Some("9 min (maximum over sizes up to 16384 spins)".into()),
            source: source.clone(),
        },
        ReferenceRow {
            solver: "gurobi".into(),
            n_spins: None,
            best_fidelity: None,
            average_fidelity: Some(4.66e-5),
            runtime: None,
            source: source.clone(),
        },
        ReferenceRow {
            solver: "dwave_annealer".into(),
            n_spins: None,
            best_fidelity: None,
            average_fidelity: Some(5.49e-4),
            runtime: None,
            source,
        },
    ];
    ReferenceTable {
        note: "reference values from the literature; not produced by this software".into(),
        per_instance,
        summary,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub size: usize,
    pub mean_fidelity: f64,
    /// Sample standard deviation of the best fidelity.
    pub std: f64,
    /// Mean simulated device time in milliseconds.
    pub mean_time: f64,
    pub mean_iterations: f64,
    /// Mean host wall time per iteration in milliseconds.
    pub wall_ms_per_iteration: f64,
}

/// Mean best fidelity of the fast adiabatic solver per size over
/// `seeds_per_size` generated instances.
pub fn fidelity_scaling(
    sizes: &[usize],
    seeds_per_size: usize,
    digits: u32,
    settings: &SpimSettings,
) -> Result<Vec<ScalingRow>> {
    let seeds: Vec<u64> = (0..seeds_per_size as u64).collect();
    fidelity_scaling_with_seeds(sizes, &seeds, digits, settings, thread_cap())
}

/// [`fidelity_scaling`] over explicit instance seeds and worker count.
pub fn fidelity_scaling_with_seeds(
    sizes: &[usize],
    seeds: &[u64],
    digits: u32,
    settings: &SpimSettings,
    threads: Option<usize>,
) -> Result<Vec<ScalingRow>> {
    let seeds_per_size = seeds.len();
    for &n in sizes {
        let (rows, cols) = lattice_shape(n);
        if n < 16 || rows != cols {
            return Err(SpimError::Geometry(format!(
                "scaling sizes must be perfect squares of at least 16, got {n}"
            )));
        }
    }
    if seeds_per_size == 0 {
        return Err(SpimError::InvalidArgument("need at least one seed per size".into()));
    }
    let cells: Vec<(usize, u64)> = sizes
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let results: Vec<Result<(f64, f64, usize, f64)>> = with_pool(threads, || {
        cells
            .par_iter()
            .map(|&(n, seed)| {
                let inst = gen_instance(n, digits, seed)?;
                let started = Instant::now();
                let trace = solve_spim(&inst, settings, seed)?;
                let wall = started.elapsed().as_secs_f64() * 1e3;
                let s = trace.summary;
                Ok((s.best_fidelity.unwrap_or(1.0), s.simulated_time_ms, s.iterations, wall))
            })
            .collect()
    })?;
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let chunk = &results[k * seeds_per_size..(k + 1) * seeds_per_size];
            let m = chunk.len() as f64;
            let mean = chunk.iter().map(|r| r.0).sum::<f64>() / m;
            let var = if chunk.len() > 1 {
                chunk.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            let iterations: usize = chunk.iter().map(|r| r.2).sum();
            ScalingRow {
                size,
                mean_fidelity: mean,
                std: var.sqrt(),
                mean_time: chunk.iter().map(|r| r.1).sum::<f64>() / m,
                mean_iterations: iterations as f64 / m,
                wall_ms_per_iteration: chunk.iter().map(|r| r.3).sum::<f64>() / iterations.max(1) as f64,
            }
        })
        .collect())
}

/// Plot-ready scaling CSV: `size, mean_fidelity, std, mean_time`.
pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["size", "mean_fidelity", "std", "mean_time"])?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.mean_fidelity.to_string(),
            r.std.to_string(),
            r.mean_time.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scaling_timing_csv<W: Write>(rows: &[ScalingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["size", "mean_iterations", "wall_ms_per_iteration"])?;
    for r in rows {
        w.write_record([
            r.size.to_string(),
            r.mean_iterations.to_string(),
            r.wall_ms_per_iteration.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares slope of `log y` against `log x`.
pub fn power_law_exponent(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Counts adjacent increases in `values`.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Simulated device minutes for the default schedule at `n` spins.
pub fn default_runtime_minutes(n: usize) -> f64 {
    let iterations = AdiabaticSchedule::default_for(n).staged_iterations();
    iterations as f64 * ITERATION_TIME_MS / 60_000.0
}
