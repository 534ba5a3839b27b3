//! Run configuration: an optional TOML file whose values command-line flags
//! override, resolved into one validated struct per subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spim::camera::{CameraModel, DeviceNoise, NoisePreset};
use spim::solvers::DEFAULT_CAMERA_BITS;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Analytic energies, no optics.
    #[default]
    Fast,
    /// Full optical path with the simulated camera.
    Camera,
    /// Camera path that also sleeps the modulator settle time.
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Mh,
    Ga,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub common: CommonSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub checkerboard: CheckerboardSection,
    #[serde(default)]
    pub noise_floor: NoiseFloorSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub scaling: ScalingSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommonSection {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub roi: Option<usize>,
    pub spins: Option<usize>,
    pub pixels_per_spin: Option<usize>,
    pub camera_bits: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub preset: Option<NoisePreset>,
    pub laser_rin_sigma: Option<f64>,
    pub phase_flicker_sigma: Option<f64>,
    pub read_noise_sigma: Option<f64>,
    pub shot_noise: Option<bool>,
    pub settle_ms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub instance: Option<PathBuf>,
    pub n: Option<usize>,
    pub digits: Option<u32>,
}

/// Adiabatic solver schedule, shared by `solve`, `bench` and `scaling`.
#[derive(Debug, Default, Deserialize, Clone)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: Option<usize>,
    pub settle_iterations: Option<usize>,
    pub iterations: Option<usize>,
    pub d: Option<usize>,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerboardSection {
    pub algorithm: Option<Algorithm>,
    pub iterations: Option<usize>,
    pub population: Option<usize>,
    pub mutation_rate: Option<f64>,
    pub elitism: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseFloorSection {
    pub frames: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Option<Vec<usize>>,
    pub seeds: Option<usize>,
    pub digits: Option<u32>,
    pub solvers: Option<Vec<spim::bench::SolverKind>>,
    pub random_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSection {
    pub sizes: Option<Vec<usize>>,
    pub seeds: Option<usize>,
    pub digits: Option<u32>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))
}

/// Noise and camera settings after presets and overrides.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseConfig {
    pub preset: NoisePreset,
    pub device: DeviceNoise,
    pub read_noise_sigma: f64,
    pub shot_noise: bool,
    pub camera_bits: u32,
}

impl NoiseConfig {
    pub fn resolve(section: &NoiseSection, preset_flag: Option<NoisePreset>, camera_bits: Option<u32>) -> Result<Self, Failure> {
        let preset = preset_flag.or(section.preset).unwrap_or_default();
        let (mut device, mut read) = preset.parts();
        if let Some(v) = section.laser_rin_sigma {
            device.laser_rin_sigma = v;
        }
        if let Some(v) = section.phase_flicker_sigma {
            device.phase_flicker_sigma = v;
        }
        if let Some(v) = section.settle_ms {
            device.settle_ms = v;
        }
        if let Some(v) = section.read_noise_sigma {
            read = v;
        }
        device
            .validate()
            .map_err(|e| Failure::usage(format!("noise: {e}")))?;
        if !(read.is_finite() && read >= 0.0) {
            return Err(Failure::usage(format!(
                "noise.read_noise_sigma must be nonnegative, got {read}"
            )));
        }
        let camera_bits = camera_bits.unwrap_or(DEFAULT_CAMERA_BITS);
        if !(1..=16).contains(&camera_bits) {
            return Err(Failure::usage(format!(
                "common.camera_bits must lie in 1..=16, got {camera_bits}"
            )));
        }
        Ok(Self {
            preset,
            device,
            read_noise_sigma: read,
            shot_noise: section.shot_noise.unwrap_or(false),
            camera_bits,
        })
    }

    pub fn camera(&self, seed: u64) -> CameraModel {
        let mut cam = CameraModel::new(self.camera_bits, seed);
        cam.read_noise_sigma = self.read_noise_sigma;
        cam.shot_noise = self.shot_noise;
        cam
    }
}

/// Schedule overrides: flag values win over the file section.
pub fn merge_schedule(file: &ScheduleSection, flags: &ScheduleSection) -> ScheduleSection {
    ScheduleSection {
        steps: flags.steps.or(file.steps),
        settle_iterations: flags.settle_iterations.or(file.settle_iterations),
        iterations: flags.iterations.or(file.iterations),
        d: flags.d.or(file.d),
        beta_start: flags.beta_start.or(file.beta_start),
        beta_end: flags.beta_end.or(file.beta_end),
    }
}

pub fn spim_settings(s: &ScheduleSection) -> Result<spim::bench::SpimSettings, Failure> {
    let mut settings = spim::bench::SpimSettings::default();
    if let Some(k) = s.steps {
        if k == 0 {
            return Err(Failure::usage("steps must be at least 1"));
        }
        settings.steps = k;
    }
    if let Some(v) = s.settle_iterations {
        if v == 0 {
            return Err(Failure::usage("settle_iterations must be at least 1"));
        }
    }
    settings.settle_iterations = s.settle_iterations;
    settings.iterations = s.iterations;
    if let Some(d) = s.d {
        if d == 0 {
            return Err(Failure::usage("d must be at least 1"));
        }
    }
    settings.d = s.d;
    for (name, v) in [("beta_start", s.beta_start), ("beta_end", s.beta_end)] {
        if let Some(b) = v {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Failure::usage(format!("{name} must be positive, got {b}")));
            }
        }
    }
    settings.beta_start = s.beta_start;
    settings.beta_end = s.beta_end;
    Ok(settings)
}
