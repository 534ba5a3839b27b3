//! Camera and device imperfections: exposure calibration, count quantization,
//! laser intensity noise, modulator phase flicker and settle latency.
//!
//! Noise draws come from ChaCha streams keyed by `(seed, frame_index,
//! purpose)` and positioned by pixel index, so every capture is reproducible
//! regardless of evaluation order or thread count.

use std::f64::consts::TAU;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpimError};
use crate::model::SpinConfig;
use crate::optics::{
    compose_phase, cost, IntensityImage, OpticsConfig, Propagator, SlmFrame, SlmLayout,
    TargetIntensity,
};

/// Modulator settle time per frame update.
pub const DEFAULT_SETTLE_MS: f64 = 150.0;
/// Full loop time per iteration (upload, settle, capture).
pub const ITERATION_TIME_MS: f64 = 270.0;

const STREAM_SENSOR: u64 = 0;
const STREAM_LASER: u64 = 1;
const STREAM_FLICKER: u64 = 2;
const STREAMS_PER_FRAME: u64 = 4;
// two 64-bit draws per pixel, counted in 32-bit words
const WORDS_PER_PIXEL: u128 = 4;

fn stream(seed: u64, frame_index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index.wrapping_mul(STREAMS_PER_FRAME).wrapping_add(purpose));
    rng
}

/// Two independent standard normals from exactly two 64-bit draws.
fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Per-pixel normal pairs for one frame, in row-major pixel order.
fn pixel_normals(seed: u64, frame_index: u64, purpose: u64, pixels: usize) -> Vec<(f64, f64)> {
    let mut rng = stream(seed, frame_index, purpose);
    rng.set_word_pos(0);
    (0..pixels).map(|_| normal_pair(&mut rng)).collect()
}

/// Normal pair for pixel `index` alone; agrees with [`pixel_normals`].
pub fn pixel_normal_at(seed: u64, frame_index: u64, purpose: u64, index: usize) -> (f64, f64) {
    let mut rng = stream(seed, frame_index, purpose);
    rng.set_word_pos(index as u128 * WORDS_PER_PIXEL);
    normal_pair(&mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub bit_depth: u32,
    pub exposure_gain: f64,
    pub shot_noise: bool,
    /// Gaussian read noise in counts.
    pub read_noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    frame_index: u64,
}

impl CameraModel {
    pub fn new(bit_depth: u32, seed: u64) -> Self {
        Self {
            bit_depth,
            exposure_gain: 1.0,
            shot_noise: false,
            read_noise_sigma: 0.0,
            seed,
            frame_index: 0,
        }
    }

    pub fn max_count(&self) -> f64 {
        ((1u64 << self.bit_depth) - 1) as f64
    }

    /// Index of the next capture; keys that capture's noise streams.
    pub fn frame_index(&self) -> u64 {
        self.frame_index
    }

    pub fn is_noise_free(&self) -> bool {
        !self.shot_noise && self.read_noise_sigma == 0.0
    }

    /// Quantizes one exposure of `image` into counts and advances the frame index.
    pub fn capture(&mut self, noise: &DeviceNoise, image: &IntensityImage) -> IntensityImage {
        let frame = self.frame_index;
        self.frame_index += 1;
        let rin = if noise.laser_rin_sigma > 0.0 {
            let mut rng = stream(self.seed, frame, STREAM_LASER);
            noise.laser_rin_sigma * normal_pair(&mut rng).0
        } else {
            0.0
        };
        let scale = self.exposure_gain * (1.0 + rin).max(0.0);
        let max = self.max_count();
        let data = if self.is_noise_free() {
            image.data.mapv(|i| (scale * i).round().clamp(0.0, max))
        } else {
            let draws = pixel_normals(self.seed, frame, STREAM_SENSOR, image.data.len());
            let mut data = image.data.clone();
            for (v, (shot_draw, read_draw)) in data.iter_mut().zip(draws) {
                let expected = scale * *v;
                let mut x = expected;
                if self.shot_noise {
                    x += expected.max(0.0).sqrt() * shot_draw;
                }
                x += self.read_noise_sigma * read_draw;
                *v = x.round().clamp(0.0, max);
            }
            data
        };
        IntensityImage {
            data,
            oversample: image.oversample,
        }
    }

    /// Applies phase flicker for the upcoming capture to a copy of `frame`.
    pub fn flicker(&self, noise: &DeviceNoise, frame: &SlmFrame) -> Result<SlmFrame> {
        let mut out = frame.clone();
        if noise.phase_flicker_sigma > 0.0 {
            let draws = pixel_normals(self.seed, self.frame_index, STREAM_FLICKER, frame.phase().len());
            let deltas: Vec<f64> = draws
                .into_iter()
                .map(|(d, _)| noise.phase_flicker_sigma * d)
                .collect();
            out.perturb(&deltas)?;
        }
        Ok(out)
    }
}

/// Returns `cam` with the gain that maps the brightest reference pixel to
/// the top count exactly.
pub fn calibrate_exposure(cam: &CameraModel, reference: &IntensityImage) -> Result<CameraModel> {
    let max = reference.max();
    if !(max > 0.0 && max.is_finite()) {
        return Err(SpimError::Calibration(
            "reference image has no positive intensity".into(),
        ));
    }
    let mut out = cam.clone();
    out.exposure_gain = cam.max_count() / max;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceNoise {
    /// Relative laser intensity noise, one multiplicative draw per capture.
    pub laser_rin_sigma: f64,
    /// Per-pixel, per-capture phase jitter in radians.
    pub phase_flicker_sigma: f64,
    pub settle_ms: f64,
}

impl Default for DeviceNoise {
    fn default() -> Self {
        Self::off()
    }
}

impl DeviceNoise {
    pub fn off() -> Self {
        Self {
            laser_rin_sigma: 0.0,
            phase_flicker_sigma: 0.0,
            settle_ms: DEFAULT_SETTLE_MS,
        }
    }

    /// Small but nonzero noise: 0.5% laser noise and 0.02 rad flicker.
    pub fn paper_like() -> Self {
        Self {
            laser_rin_sigma: 0.005,
            phase_flicker_sigma: 0.02,
            settle_ms: DEFAULT_SETTLE_MS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("laser_rin_sigma", self.laser_rin_sigma),
            ("phase_flicker_sigma", self.phase_flicker_sigma),
            ("settle_ms", self.settle_ms),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SpimError::InvalidArgument(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.laser_rin_sigma == 0.0 && self.phase_flicker_sigma == 0.0
    }
}

/// Named noise presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePreset {
    #[default]
    Off,
    PaperLike,
}

impl NoisePreset {
    /// Device noise and camera read noise (counts) for the preset.
    pub fn parts(self) -> (DeviceNoise, f64) {
        match self {
            NoisePreset::Off => (DeviceNoise::off(), 0.0),
            NoisePreset::PaperLike => (DeviceNoise::paper_like(), 1.0),
        }
    }
}

/// Frame upload, propagation and capture in one step.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub propagator: Propagator,
    pub camera: CameraModel,
    pub noise: DeviceNoise,
}

impl Measurement {
    pub fn new(propagator: Propagator, camera: CameraModel, noise: DeviceNoise) -> Self {
        Self {
            propagator,
            camera,
            noise,
        }
    }

    /// Noise-free readout intensity, before the camera.
    pub fn ideal(&mut self, frame: &SlmFrame) -> Result<IntensityImage> {
        self.propagator.intensity(frame)
    }

    /// Calibrates the exposure so `frame` just saturates.
    pub fn calibrate_on(&mut self, frame: &SlmFrame) -> Result<()> {
        let reference = self.ideal(frame)?;
        self.camera = calibrate_exposure(&self.camera, &reference)?;
        Ok(())
    }

    pub fn measure(&mut self, frame: &SlmFrame) -> Result<IntensityImage> {
        let image = if self.noise.phase_flicker_sigma > 0.0 {
            let jittered = self.camera.flicker(&self.noise, frame)?;
            self.propagator.intensity(&jittered)?
        } else {
            self.propagator.intensity(frame)?
        };
        Ok(self.camera.capture(&self.noise, &image))
    }
}

/// Mean cost of `frames` captures of a fixed spin-checkerboard frame against a
/// first capture of the same frame.
pub fn noise_floor(
    cam: &CameraModel,
    noise: &DeviceNoise,
    layout: &SlmLayout,
    frames: usize,
) -> Result<f64> {
    noise_floor_with_offset(cam, noise, layout, frames, 0.0)
}

/// [`noise_floor`] with a global phase added to the checkerboard frame.
pub fn noise_floor_with_offset(
    cam: &CameraModel,
    noise: &DeviceNoise,
    layout: &SlmLayout,
    frames: usize,
    phase_offset: f64,
) -> Result<f64> {
    if frames < 2 {
        return Err(SpimError::InvalidArgument(format!(
            "noise floor needs at least 2 frames, got {frames}"
        )));
    }
    noise.validate()?;
    let spins = SpinConfig::checkerboard(layout.spins_side());
    let mut frame = compose_phase(layout, &spins, &vec![0.0; layout.n_spins()])?;
    if phase_offset != 0.0 {
        frame.add_global_phase(phase_offset);
    }
    let propagator = Propagator::for_layout(layout, OpticsConfig::default())?;
    let mut channel = Measurement::new(propagator, cam.clone(), *noise);
    channel.calibrate_on(&frame)?;
    let target = TargetIntensity::captured(&channel.measure(&frame)?);
    let mut total = 0.0;
    for _ in 0..frames {
        total += cost(&channel.measure(&frame)?, &target)?;
    }
    Ok(total / frames as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Only advance the simulated clock.
    #[default]
    Fast,
    /// Also sleep for the settle time.
    Realtime,
}

/// Simulated device clock.
#[derive(Debug, Clone, Default)]
pub struct SimClock {
    mode: ClockMode,
    elapsed: Duration,
}

impl SimClock {
    pub fn new(mode: ClockMode) -> Self {
        Self {
            mode,
            elapsed: Duration::ZERO,
        }
    }

    pub fn elapsed(&self) -> Duration {
        self.elapsed
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.elapsed.as_secs_f64() * 1e3
    }

    /// Accounts one frame update.
    pub fn settle(&mut self, noise: &DeviceNoise) -> Duration {
        let delay = settle_delay(noise);
        if self.mode == ClockMode::Realtime && !delay.is_zero() {
            std::thread::sleep(delay);
        }
        self.elapsed += delay;
        delay
    }

    pub fn advance(&mut self, by: Duration) {
        self.elapsed += by;
    }
}

pub fn settle_delay(noise: &DeviceNoise) -> Duration {
    Duration::from_secs_f64(noise.settle_ms.max(0.0) / 1e3)
}

/// Simulated device time of `iterations` loop iterations.
pub fn simulated_time_ms(iterations: usize, ms_per_iteration: f64) -> f64 {
    iterations as f64 * ms_per_iteration
}

/// Iterations that fit into `run` at `ms_per_iteration`.
pub fn iteration_budget(run: Duration, ms_per_iteration: f64) -> usize {
    (run.as_secs_f64() * 1e3 / ms_per_iteration).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    #[test]
    fn calibration_examples() {
        let cam = CameraModel::new(8, 1);
        let mut img = IntensityImage::zeros(4, 4);
        img.data[[1, 2]] = 1.0;
        assert_eq!(calibrate_exposure(&cam, &img).unwrap().exposure_gain, 255.0);
        img.data[[1, 2]] = 510.0;
        assert_eq!(calibrate_exposure(&cam, &img).unwrap().exposure_gain, 0.5);
        assert!(matches!(
            calibrate_exposure(&cam, &IntensityImage::zeros(3, 3)),
            Err(SpimError::Calibration(_))
        ));
    }

    #[test]
    fn calibrated_capture_just_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = IntensityImage::new(Array2::from_shape_fn((16, 16), |_| 1e6 * rng.random::<f64>()));
        let mut cam = calibrate_exposure(&CameraModel::new(8, 0), &img).unwrap();
        let counts = cam.capture(&DeviceNoise::off(), &img);
        assert_eq!(counts.max(), 255.0);
    }

    #[test]
    fn noise_free_capture_examples() {
        let mut cam = CameraModel::new(8, 0);
        cam.exposure_gain = 2.0;
        let uniform = IntensityImage::new(Array2::from_elem((5, 5), 10.2));
        let counts = cam.capture(&DeviceNoise::off(), &uniform);
        assert!(counts.data.iter().all(|&c| c == 20.0));

        let bright = IntensityImage::new(Array2::from_elem((5, 5), 1e9));
        assert!(cam.capture(&DeviceNoise::off(), &bright).data.iter().all(|&c| c == 255.0));
    }

    #[test]
    fn noise_free_capture_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = IntensityImage::new(Array2::from_shape_fn((8, 8), |_| rng.random::<f64>()));
        let mut cam = calibrate_exposure(&CameraModel::new(8, 4), &img).unwrap();
        let a = cam.capture(&DeviceNoise::off(), &img);
        let b = cam.capture(&DeviceNoise::off(), &img);
        assert_eq!(a, b);
    }

    #[test]
    fn laser_noise_sets_relative_spread_of_total_counts() {
        let img = IntensityImage::new(Array2::from_elem((8, 8), 100.0));
        let mut cam = CameraModel::new(8, 17);
        cam.exposure_gain = 1.0;
        let noise = DeviceNoise {
            laser_rin_sigma: 0.01,
            ..DeviceNoise::off()
        };
        let totals: Vec<f64> = (0..10_000)
            .map(|_| cam.capture(&noise, &img).data.sum())
            .collect();
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (totals.len() - 1) as f64;
        let ratio = var.sqrt() / mean;
        assert!((ratio - 0.01).abs() <= 0.2 * 0.01, "std/mean = {ratio}");
    }

    #[test]
    fn pixel_streams_are_addressable() {
        let all = pixel_normals(5, 3, STREAM_SENSOR, 100);
        for i in [0, 1, 37, 99] {
            assert_eq!(all[i], pixel_normal_at(5, 3, STREAM_SENSOR, i));
        }
        assert_ne!(all[0], pixel_normal_at(5, 4, STREAM_SENSOR, 0));
    }

    #[test]
    fn noise_floor_examples() {
        let layout = SlmLayout::new(4, 4).unwrap();
        let cam = CameraModel::new(8, 1);
        assert!(matches!(
            noise_floor(&cam, &DeviceNoise::off(), &layout, 1),
            Err(SpimError::InvalidArgument(_))
        ));
        assert_eq!(noise_floor(&cam, &DeviceNoise::off(), &layout, 4).unwrap(), 0.0);

        let mut noisy = cam.clone();
        noisy.read_noise_sigma = 1.0;
        let floor = noise_floor(&noisy, &DeviceNoise::off(), &layout, 4).unwrap();
        assert!(floor > 0.0);
        assert_eq!(floor, noise_floor(&noisy, &DeviceNoise::off(), &layout, 4).unwrap());
    }

    #[test]
    fn settle_accounting() {
        let noise = DeviceNoise::off();
        let mut clock = SimClock::new(ClockMode::Fast);
        for _ in 0..1000 {
            clock.settle(&noise);
        }
        assert!((clock.elapsed().as_secs_f64() - 150.0).abs() < 1e-6);

        let instant = DeviceNoise {
            settle_ms: 0.0,
            ..noise
        };
        assert_eq!(settle_delay(&instant), Duration::ZERO);

        assert_eq!(iteration_budget(Duration::from_secs(9 * 60), ITERATION_TIME_MS), 2000);
    }

    #[test]
    fn realtime_clock_sleeps() {
        let noise = DeviceNoise {
            settle_ms: 5.0,
            ..DeviceNoise::off()
        };
        let mut clock = SimClock::new(ClockMode::Realtime);
        let start = std::time::Instant::now();
        clock.settle(&noise);
        assert!(start.elapsed() >= Duration::from_millis(5));
    }

    #[test]
    fn invalid_noise_is_rejected() {
        let bad = DeviceNoise {
            laser_rin_sigma: -0.1,
            ..DeviceNoise::off()
        };
        assert!(bad.validate().is_err());
    }
}
