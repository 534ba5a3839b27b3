//! Subcommand implementations. Each resolves its configuration, validates it,
//! runs, and only then writes artifacts.

use std::path::{Path, PathBuf};

use serde::Serialize;
use spim::bench::{
    fidelity_scaling_with_seeds, median_fidelity, reference_table, run_benchmark, thread_cap,
    write_records_csv, write_scaling_csv, write_scaling_timing_csv, write_timings_csv, BenchSuite,
    SpimSettings,
};
use spim::camera::{noise_floor as measure_noise_floor, ClockMode};
use spim::model::{normalize_instance, partition_subsets, NppInstance};
use spim::optics::{default_pixels_per_spin, OpticsConfig, SlmLayout};
use spim::solvers::{adiabatic_solve, lattice_shape, CheckerboardTask, GaParams, MhParams, RunTrace, SolveMode};

use crate::config::{self, Algorithm, FileConfig, Mode, NoiseConfig};
use crate::manifest::{InputFile, Staged};
use crate::svg::{line_chart, Series};
use crate::{BenchArgs, CheckerboardArgs, CommonArgs, Failure, NoiseFloorArgs, ScalingArgs, SolveArgs};

const DEFAULT_OUT: &str = "spim-output";
const DEFAULT_DIGITS: u32 = 8;

/// Common settings after merging flags over the file.
struct Common {
    seed: u64,
    out: PathBuf,
    mode: Mode,
    roi: Option<usize>,
    spins: Option<usize>,
    pixels_per_spin: Option<usize>,
    noise: NoiseConfig,
    svg: bool,
}

fn common(args: &CommonArgs, file: &FileConfig) -> Result<Common, Failure> {
    let c = &file.common;
    Ok(Common {
        seed: args.seed.or(c.seed).unwrap_or(0),
        out: args.out.clone().or_else(|| c.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into()),
        mode: args.mode.or(c.mode).unwrap_or_default(),
        roi: args.roi.or(c.roi),
        spins: args.spins.or(c.spins),
        pixels_per_spin: args.pixels_per_spin.or(c.pixels_per_spin),
        noise: NoiseConfig::resolve(&file.noise, args.noise, args.camera_bits.or(c.camera_bits))?,
        svg: args.svg,
    })
}

fn layout(side: usize, pixels_per_spin: Option<usize>) -> Result<SlmLayout, Failure> {
    let m = pixels_per_spin.unwrap_or_else(|| default_pixels_per_spin(side));
    SlmLayout::new(side, m).map_err(|e| Failure::usage(format!("pixels_per_spin: {e}")))
}

fn clock(mode: Mode) -> ClockMode {
    if mode == Mode::Realtime {
        ClockMode::Realtime
    } else {
        ClockMode::Fast
    }
}

fn trace_csv(trace: &RunTrace) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    Ok(buf)
}

#[derive(Debug, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
enum InstanceSpec {
    File { path: PathBuf },
    Generated { n: usize, digits: u32 },
}

#[derive(Debug, Serialize)]
struct SolveRun {
    instance: InstanceSpec,
    seed: u64,
    mode: Mode,
    roi: usize,
    spins: Option<usize>,
    pixels_per_spin: Option<usize>,
    schedule: SpimSettings,
    noise: NoiseConfig,
}

#[derive(Debug, Serialize)]
struct Partition {
    subset_plus: Vec<f64>,
    subset_minus: Vec<f64>,
    sum_plus: f64,
    sum_minus: f64,
    fidelity: f64,
    residual: f64,
    spins: Vec<i8>,
}

fn load_instance(path: &Path) -> Result<(NppInstance, InputFile), Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::usage(format!("cannot read instance {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure::usage(format!("instance {} is not UTF-8", path.display())))?;
    let numbers = spim::io::parse_instance(&text)
        .map_err(|e| Failure::usage(format!("instance {}: {e}", path.display())))?;
    let inst = normalize_instance(&numbers)?;
    Ok((inst, InputFile::hash(path, &bytes)))
}

pub fn solve(args: &CommonArgs, file: &FileConfig, a: &SolveArgs) -> Result<(), Failure> {
    let c = common(args, file)?;
    let digits = a.digits.or(file.solve.digits).unwrap_or(DEFAULT_DIGITS);
    let spec = match (&a.instance, a.n, &file.solve.instance, file.solve.n) {
        (Some(p), _, _, _) => InstanceSpec::File { path: p.clone() },
        (None, Some(n), _, _) => InstanceSpec::Generated { n, digits },
        (None, None, Some(p), _) => InstanceSpec::File { path: p.clone() },
        (None, None, None, Some(n)) => InstanceSpec::Generated { n, digits },
        _ => return Err(Failure::usage("solve needs --instance <file> or --n <size>")),
    };
    let mut inputs = Vec::new();
    let inst = match &spec {
        InstanceSpec::File { path } => {
            let (inst, input) = load_instance(path)?;
            inputs.push(input);
            inst
        }
        InstanceSpec::Generated { n, digits } => spim::bench::gen_instance(*n, *digits, c.seed)?,
    };
    let settings = config::spim_settings(&config::merge_schedule(&file.schedule, &a.schedule.section()))?;
    let (sched, anneal, mut params) = settings.resolve(inst.len(), c.seed)?;
    params.clock = clock(c.mode);
    params.settle_ms = c.noise.device.settle_ms;
    // default window spans the spin band around the zeroth order
    let roi = c.roi.unwrap_or_else(|| lattice_shape(inst.len()).0);
    let mode = match c.mode {
        Mode::Fast => SolveMode::Fast,
        Mode::Camera | Mode::Realtime => {
            let (rows, cols) = lattice_shape(inst.len());
            let side = c.spins.unwrap_or(rows);
            if rows != cols || side * side != inst.len() {
                return Err(Failure::usage(format!(
                    "camera mode needs a square lattice: {} numbers do not fill {side} x {side} spins",
                    inst.len()
                )));
            }
            SolveMode::Optical {
                layout: layout(side, c.pixels_per_spin)?,
                optics: OpticsConfig::default(),
                roi,
                camera: Some((c.noise.camera(c.seed), c.noise.device)),
            }
        }
    };
    let run = SolveRun {
        instance: spec,
        seed: c.seed,
        mode: c.mode,
        roi,
        spins: c.spins,
        pixels_per_spin: c.pixels_per_spin,
        schedule: settings,
        noise: c.noise.clone(),
    };

    let trace = adiabatic_solve(&inst, &sched, &anneal, &params, &mode, None)?;
    let best = &trace.summary.best_config;
    let (plus, minus) = partition_subsets(&inst, best)?;
    let fidelity = trace.summary.best_fidelity.unwrap_or(1.0);
    let partition = Partition {
        sum_plus: plus.iter().sum(),
        sum_minus: minus.iter().sum(),
        subset_plus: plus,
        subset_minus: minus,
        fidelity,
        residual: fidelity * inst.total(),
        spins: best.spins().to_vec(),
    };

    let mut staged = Staged::default();
    staged.add("trace.csv", trace_csv(&trace)?);
    staged.add_json("partition.json", &partition)?;
    if c.svg {
        let fid: Vec<(f64, f64)> = trace
            .records
            .iter()
            .filter_map(|r| r.fidelity.map(|f| (r.iteration as f64, f)))
            .collect();
        staged.add(
            "trace.svg",
            line_chart("Adiabatic solve", "iteration", "fidelity", &[Series { label: "fidelity", points: fid }], true)
                .into_bytes(),
        );
    }
    staged.commit(&c.out, "solve", &run, &[c.seed], &inputs)?;
    println!(
        "fidelity={:.6e} residual={:.6e} iterations={} simulated_time_s={:.1}",
        partition.fidelity,
        partition.residual,
        trace.summary.iterations,
        trace.summary.simulated_time_ms / 1e3
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CheckerboardRun {
    algorithm: Algorithm,
    seed: u64,
    mode: Mode,
    spins: usize,
    pixels_per_spin: usize,
    iterations: usize,
    ga: GaParams,
    noise: NoiseConfig,
}

#[derive(Debug, Serialize)]
struct CheckerboardSummary {
    algorithm: Algorithm,
    initial_cost: f64,
    final_cost: f64,
    ratio: f64,
    iterations: usize,
    evaluations: usize,
}

pub fn checkerboard(args: &CommonArgs, file: &FileConfig, a: &CheckerboardArgs) -> Result<(), Failure> {
    let c = common(args, file)?;
    let f = &file.checkerboard;
    let algorithm = a.algorithm.or(f.algorithm).unwrap_or(Algorithm::Mh);
    let iterations = a.iterations.or(f.iterations).unwrap_or(1500);
    let side = c.spins.unwrap_or(16);
    if side < 2 {
        return Err(Failure::usage(format!("spins must be at least 2, got {side}")));
    }
    let layout = layout(side, c.pixels_per_spin)?;
    let mut ga = GaParams::new(c.seed);
    ga.population = a.population.or(f.population).unwrap_or(ga.population);
    ga.mutation_rate = a.mutation_rate.or(f.mutation_rate).unwrap_or(ga.mutation_rate);
    ga.elitism = a.elitism.or(f.elitism).unwrap_or(ga.elitism);
    ga.validate()?;
    let run = CheckerboardRun {
        algorithm,
        seed: c.seed,
        mode: c.mode,
        spins: side,
        pixels_per_spin: layout.pixels_per_spin(),
        iterations,
        ga,
        noise: c.noise.clone(),
    };
    let task = CheckerboardTask {
        layout,
        optics: OpticsConfig::default(),
        camera: match c.mode {
            Mode::Fast => None,
            Mode::Camera | Mode::Realtime => Some((c.noise.camera(c.seed), c.noise.device)),
        },
    };

    let trace = match algorithm {
        Algorithm::Mh => {
            let mut params = MhParams::new(1, c.seed);
            params.clock = clock(c.mode);
            params.settle_ms = c.noise.device.settle_ms;
            task.run_mh(iterations, &params)?
        }
        // same number of objective evaluations as the chain
        Algorithm::Ga => task.run_ga(iterations + 1, &ga)?,
    };
    let summary = CheckerboardSummary {
        algorithm,
        initial_cost: trace.summary.initial_objective,
        final_cost: trace.summary.final_objective,
        ratio: trace.cost_ratio(),
        iterations: trace.summary.iterations,
        evaluations: trace.summary.evaluations,
    };

    let mut staged = Staged::default();
    staged.add("trace.csv", trace_csv(&trace)?);
    staged.add_json("summary.json", &summary)?;
    if c.svg {
        let init = trace.summary.initial_objective.max(f64::MIN_POSITIVE);
        let pts = trace.records.iter().map(|r| (r.iteration as f64, r.objective / init)).collect();
        staged.add(
            "trace.svg",
            line_chart("Checkerboard reconstruction", "iteration", "cost / initial cost", &[Series { label: "cost", points: pts }], true)
                .into_bytes(),
        );
    }
    staged.commit(&c.out, "checkerboard", &run, &[c.seed], &[])?;
    println!(
        "ratio={:.6} initial_cost={} final_cost={} iterations={}",
        summary.ratio, summary.initial_cost, summary.final_cost, summary.iterations
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct NoiseFloorRun {
    seed: u64,
    spins: usize,
    pixels_per_spin: usize,
    frames: usize,
    noise: NoiseConfig,
}

pub fn noise_floor(args: &CommonArgs, file: &FileConfig, a: &NoiseFloorArgs) -> Result<(), Failure> {
    let c = common(args, file)?;
    let frames = a.frames.or(file.noise_floor.frames).unwrap_or(20);
    let side = c.spins.unwrap_or(16);
    let layout = layout(side, c.pixels_per_spin)?;
    let run = NoiseFloorRun {
        seed: c.seed,
        spins: side,
        pixels_per_spin: layout.pixels_per_spin(),
        frames,
        noise: c.noise.clone(),
    };
    let floor = measure_noise_floor(&c.noise.camera(c.seed), &c.noise.device, &layout, frames)?;
    let mut staged = Staged::default();
    staged.add_json("noise_floor.json", &serde_json::json!({ "noise_floor": floor, "frames": frames }))?;
    staged.commit(&c.out, "noise-floor", &run, &[c.seed], &[])?;
    println!("{floor}");
    Ok(())
}

fn fast_only(mode: Mode, command: &str) -> Result<(), Failure> {
    if mode != Mode::Fast {
        return Err(Failure::usage(format!("{command} runs the fast solver only; use --mode fast")));
    }
    Ok(())
}

fn seed_list(base: u64, count: usize) -> Result<Vec<u64>, Failure> {
    if count == 0 {
        return Err(Failure::usage("seeds must be at least 1"));
    }
    Ok((0..count as u64).map(|i| base.wrapping_add(i)).collect())
}

#[derive(Debug, Serialize)]
struct BenchRun {
    suite: BenchSuite,
}

pub fn bench(args: &CommonArgs, file: &FileConfig, a: &BenchArgs) -> Result<(), Failure> {
    let c = common(args, file)?;
    fast_only(c.mode, "bench")?;
    let f = &file.bench;
    let defaults = BenchSuite::default();
    let suite = BenchSuite {
        sizes: a.sizes.clone().or_else(|| f.sizes.clone()).unwrap_or(defaults.sizes),
        seeds: seed_list(c.seed, a.seeds.or(f.seeds).unwrap_or(defaults.seeds.len()))?,
        digits: a.digits.or(f.digits).unwrap_or(defaults.digits),
        solvers: a.solvers.clone().or_else(|| f.solvers.clone()).unwrap_or(defaults.solvers),
        spim: config::spim_settings(&config::merge_schedule(&file.schedule, &a.schedule.section()))?,
        random_samples: a.random_samples.or(f.random_samples).unwrap_or(defaults.random_samples),
    };
    suite.validate()?;
    let records = run_benchmark(&suite)?;

    let mut staged = Staged::default();
    let mut buf = Vec::new();
    write_records_csv(&records, &mut buf)?;
    staged.add("records.csv", buf);
    let mut buf = Vec::new();
    write_timings_csv(&records, &mut buf)?;
    staged.add("timings.csv", buf);
    staged.add_json("reference_table.json", &reference_table())?;
    let seeds = suite.seeds.clone();
    staged.commit(&c.out, "bench", &BenchRun { suite: suite.clone() }, &seeds, &[])?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    println!("records={} failed={failed}", records.len());
    for &solver in &suite.solvers {
        if let Some(m) = median_fidelity(&records, solver) {
            println!("{} median_fidelity={m:.6e}", solver.name());
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScalingRun {
    sizes: Vec<usize>,
    seeds: Vec<u64>,
    digits: u32,
    schedule: SpimSettings,
}

pub fn scaling(args: &CommonArgs, file: &FileConfig, a: &ScalingArgs) -> Result<(), Failure> {
    let c = common(args, file)?;
    fast_only(c.mode, "scaling")?;
    let f = &file.scaling;
    let run = ScalingRun {
        sizes: a
            .sizes
            .clone()
            .or_else(|| f.sizes.clone())
            .unwrap_or_else(|| vec![16, 64, 256, 1024]),
        seeds: seed_list(c.seed, a.seeds.or(f.seeds).unwrap_or(5))?,
        digits: a.digits.or(f.digits).unwrap_or(DEFAULT_DIGITS),
        schedule: config::spim_settings(&config::merge_schedule(&file.schedule, &a.schedule.section()))?,
    };
    let rows = fidelity_scaling_with_seeds(&run.sizes, &run.seeds, run.digits, &run.schedule, thread_cap())?;

    let mut staged = Staged::default();
    let mut buf = Vec::new();
    write_scaling_csv(&rows, &mut buf)?;
    staged.add("scaling.csv", buf);
    let mut buf = Vec::new();
    write_scaling_timing_csv(&rows, &mut buf)?;
    staged.add("scaling_timing.csv", buf);
    if c.svg {
        let pts = rows.iter().map(|r| (r.size as f64, r.mean_fidelity)).collect();
        staged.add(
            "scaling.svg",
            line_chart("Fidelity against size", "spins", "mean best fidelity", &[Series { label: "spim", points: pts }], true)
                .into_bytes(),
        );
    }
    staged.commit(&c.out, "scaling", &run, &run.seeds, &[])?;
    for r in &rows {
        println!("size={} mean_fidelity={:.6e} std={:.6e}", r.size, r.mean_fidelity, r.std);
    }
    Ok(())
}
