//! Optical forward model: phase-mask composition on the modulator, Fourier
//! propagation to the readout plane, and the observables read there.
//!
//! Conventions:
//! - the forward transform is the unnormalized 2-D DFT, so a uniform frame of
//!   `W x H` unit-amplitude pixels puts a field of `W * H` into the DC bin;
//! - outputs are DC-centered: bin `(rows / 2, cols / 2)` is zero frequency;
//! - illumination amplitude is 1 (the laser constant and the lens scale are
//!   absorbed into the camera gain).

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::sync::Arc;

use ndarray::{s, Array2};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SpimError};
use crate::model::{NppInstance, SpinConfig};

/// Phase of an up spin.
pub const SPIN_UP_PHASE: f64 = FRAC_PI_2;
/// Phase of a down spin.
pub const SPIN_DOWN_PHASE: f64 = 3.0 * FRAC_PI_2;
/// Side of a checkerboard macropixel in pixels.
pub const MACROPIXEL_SIZE: usize = 2;
/// Levels of an 8-bit phase modulator.
pub const SLM_LEVELS: u32 = 256;

/// Rounds phases onto an evenly spaced grid of `levels` values in `[0, 2pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseQuantizer {
    levels: u32,
}

impl PhaseQuantizer {
    pub fn new(levels: u32) -> Result<Self> {
        if levels < 4 || !levels.is_multiple_of(4) {
            return Err(SpimError::Geometry(format!(
                "phase levels must be a positive multiple of 4, got {levels}"
            )));
        }
        Ok(Self { levels })
    }

    pub fn eight_bit() -> Self {
        Self { levels: SLM_LEVELS }
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn step(&self) -> f64 {
        TAU / self.levels as f64
    }

    pub fn level(&self, theta: f64) -> u32 {
        let raw = (wrap_phase(theta) / self.step()).round() as i64;
        raw.rem_euclid(self.levels as i64) as u32
    }

    pub fn quantize(&self, theta: f64) -> f64 {
        self.level(theta) as f64 * self.step()
    }
}

/// Wraps a phase into `[0, 2pi)`.
pub fn wrap_phase(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub fn spin_phase(spin: i8) -> f64 {
    if spin > 0 {
        SPIN_UP_PHASE
    } else {
        SPIN_DOWN_PHASE
    }
}

/// Sign of the macropixel containing active-area pixel `(row, col)`:
/// `+1` when `macro_row + macro_col` is even.
pub fn checker_sign(row: usize, col: usize) -> i8 {
    if (row / MACROPIXEL_SIZE + col / MACROPIXEL_SIZE).is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// Geometry of the modulator: an `S x S` spin lattice of `M x M`-pixel spins
/// centered in a frame with an inactive border of `margin` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlmLayout {
    spins_side: usize,
    pixels_per_spin: usize,
    margin: usize,
    quantizer: Option<PhaseQuantizer>,
}

impl SlmLayout {
    pub fn new(spins_side: usize, pixels_per_spin: usize) -> Result<Self> {
        if spins_side == 0 {
            return Err(SpimError::Geometry("spin lattice side must be positive".into()));
        }
        if pixels_per_spin == 0 || !pixels_per_spin.is_multiple_of(4) {
            return Err(SpimError::Geometry(format!(
                "pixels per spin must be a positive multiple of 4, got {pixels_per_spin}"
            )));
        }
        Ok(Self {
            spins_side,
            pixels_per_spin,
            margin: 0,
            quantizer: Some(PhaseQuantizer::eight_bit()),
        })
    }

    /// Layout with the default spin size: 16 pixels up to 32x32 spins
    /// (256x256 pixels at most), 4 pixels above.
    pub fn with_default_pixels(spins_side: usize) -> Result<Self> {
        Self::new(spins_side, default_pixels_per_spin(spins_side))
    }

    pub fn with_margin(mut self, margin: usize) -> Self {
        self.margin = margin;
        self
    }

    pub fn with_quantizer(mut self, quantizer: Option<PhaseQuantizer>) -> Self {
        self.quantizer = quantizer;
        self
    }

    pub fn spins_side(&self) -> usize {
        self.spins_side
    }

    pub fn n_spins(&self) -> usize {
        self.spins_side * self.spins_side
    }

    pub fn pixels_per_spin(&self) -> usize {
        self.pixels_per_spin
    }

    pub fn margin(&self) -> usize {
        self.margin
    }

    pub fn quantizer(&self) -> Option<PhaseQuantizer> {
        self.quantizer
    }

    pub fn active_size(&self) -> usize {
        self.spins_side * self.pixels_per_spin
    }

    pub fn frame_side(&self) -> usize {
        self.active_size() + 2 * self.margin
    }

    fn finish(&self, theta: f64) -> f64 {
        match self.quantizer {
            Some(q) => q.quantize(theta),
            None => wrap_phase(theta),
        }
    }

    /// Phase of active-area pixel `(row, col)` for the given spin and offset.
    pub fn pixel_phase(&self, row: usize, col: usize, spin: i8, alpha: f64) -> f64 {
        let c = checker_sign(row, col) as f64;
        self.finish(spin_phase(spin) + c * alpha)
    }
}

pub fn default_pixels_per_spin(spins_side: usize) -> usize {
    if spins_side <= 32 {
        16
    } else {
        4
    }
}

/// Phase values displayed on the modulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlmFrame {
    layout: SlmLayout,
    phase: Array2<f64>,
}

impl SlmFrame {
    pub fn layout(&self) -> &SlmLayout {
        &self.layout
    }

    pub fn width(&self) -> usize {
        self.phase.ncols()
    }

    pub fn height(&self) -> usize {
        self.phase.nrows()
    }

    /// Top-left pixel of the active window, `(row, col)`.
    pub fn active_origin(&self) -> (usize, usize) {
        (self.layout.margin, self.layout.margin)
    }

    pub fn active_size(&self) -> usize {
        self.layout.active_size()
    }

    pub fn phase(&self) -> &Array2<f64> {
        &self.phase
    }

    /// Rewrites the pixels of spin `index` for a new spin value and offset.
    pub fn write_spin(&mut self, index: usize, spin: i8, alpha: f64) {
        let m = self.layout.pixels_per_spin;
        let side = self.layout.spins_side;
        let (r0, c0) = ((index / side) * m, (index % side) * m);
        let origin = self.layout.margin;
        for r in r0..r0 + m {
            for c in c0..c0 + m {
                self.phase[[origin + r, origin + c]] = self.layout.pixel_phase(r, c, spin, alpha);
            }
        }
    }

    /// Adds a global phase to every pixel, without re-quantizing.
    pub fn add_global_phase(&mut self, offset: f64) {
        self.phase.mapv_inplace(|p| wrap_phase(p + offset));
    }

    /// Adds per-pixel perturbations (row-major), without re-quantizing.
    pub fn perturb(&mut self, deltas: &[f64]) -> Result<()> {
        check_len(self.phase.len(), deltas.len())?;
        for (p, d) in self.phase.iter_mut().zip(deltas) {
            *p = wrap_phase(*p + d);
        }
        Ok(())
    }

    /// Frame from explicit phases, e.g. a diagnostic grating. The attached
    /// layout is nominal (one spin, no quantization).
    pub fn from_phases(phase: Array2<f64>) -> Result<Self> {
        let (h, w) = phase.dim();
        if h == 0 || w == 0 {
            return Err(SpimError::Geometry("empty frame".into()));
        }
        let layout = SlmLayout {
            spins_side: 1,
            pixels_per_spin: h.min(w),
            margin: 0,
            quantizer: None,
        };
        Ok(Self {
            layout,
            phase: phase.mapv(wrap_phase),
        })
    }
}

impl fmt::Display for SlmFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} frame, {}x{} spins of {} px",
            self.width(),
            self.height(),
            self.layout.spins_side,
            self.layout.spins_side,
            self.layout.pixels_per_spin
        )
    }
}

/// Per-pixel spin phase `s_j` over the active area.
pub fn spin_mask(layout: &SlmLayout, spins: &SpinConfig) -> Result<Array2<f64>> {
    check_len(layout.n_spins(), spins.len())?;
    let n = layout.active_size();
    let m = layout.pixels_per_spin;
    let side = layout.spins_side;
    Ok(Array2::from_shape_fn((n, n), |(r, c)| {
        spin_phase(spins.get((r / m) * side + c / m))
    }))
}

/// Per-pixel macropixel sign `c_j` over the active area.
pub fn checker_mask(layout: &SlmLayout) -> Array2<i8> {
    let n = layout.active_size();
    Array2::from_shape_fn((n, n), |(r, c)| checker_sign(r, c))
}

/// Composes `theta_j = s_j + c_j * alpha_spin(j)` over the active area and the
/// fixed pixel checkerboard of up/down phases over the inactive border.
///
/// `alpha` holds one offset per spin (`acos` of its effective amplitude).
pub fn compose_phase(layout: &SlmLayout, spins: &SpinConfig, alpha: &[f64]) -> Result<SlmFrame> {
    check_len(layout.n_spins(), spins.len())?;
    check_len(layout.n_spins(), alpha.len())?;
    let side = layout.frame_side();
    let origin = layout.margin;
    let active = layout.active_size();
    let m = layout.pixels_per_spin;
    let phase = Array2::from_shape_fn((side, side), |(r, c)| {
        let inside = (origin..origin + active).contains(&r) && (origin..origin + active).contains(&c);
        if inside {
            let (ar, ac) = (r - origin, c - origin);
            let spin = (ar / m) * layout.spins_side + ac / m;
            layout.pixel_phase(ar, ac, spins.get(spin), alpha[spin])
        } else {
            let s = if (r + c) % 2 == 0 { 1 } else { -1 };
            layout.finish(spin_phase(s))
        }
    });
    Ok(SlmFrame {
        layout: *layout,
        phase,
    })
}

/// Composes a frame from spins and per-spin amplitudes in `[0, 1]`.
pub fn compose_amplitudes(
    layout: &SlmLayout,
    spins: &SpinConfig,
    amplitudes: &[f64],
) -> Result<SlmFrame> {
    let alpha: Vec<f64> = amplitudes.iter().map(|a| a.clamp(-1.0, 1.0).acos()).collect();
    compose_phase(layout, spins, &alpha)
}

/// Horizontal binary grating with phases 0 and pi alternating every
/// `period / 2` rows.
pub fn binary_grating(side: usize, period: usize) -> Result<SlmFrame> {
    if period < 2 || !period.is_multiple_of(2) {
        return Err(SpimError::Geometry(format!("grating period must be even, got {period}")));
    }
    let half = period / 2;
    SlmFrame::from_phases(Array2::from_shape_fn((side, side), |(r, _)| {
        if (r / half).is_multiple_of(2) {
            0.0
        } else {
            PI
        }
    }))
}

/// Illumination profile over the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Illumination {
    #[default]
    PlaneWave,
    /// Gaussian amplitude `exp(-r^2 / w^2)` centered on the frame, `w` in pixels.
    Gaussian { waist_px: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticsConfig {
    pub oversample: usize,
    pub illumination: Illumination,
    /// Multiply the readout intensity by the pixel-aperture `sinc^2` envelope.
    pub pixel_envelope: bool,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            oversample: 1,
            illumination: Illumination::PlaneWave,
            pixel_envelope: false,
        }
    }
}

/// Complex field at the readout plane, DC-centered.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldImage {
    pub data: Array2<Complex64>,
    pub oversample: usize,
}

impl FieldImage {
    pub fn intensity(&self) -> IntensityImage {
        IntensityImage {
            data: self.data.mapv(|z| z.norm_sqr()),
            oversample: self.oversample,
        }
    }

    pub fn dc(&self) -> Complex64 {
        let (h, w) = self.data.dim();
        self.data[[h / 2, w / 2]]
    }
}

/// Nonnegative intensity (or camera counts) at the readout plane, DC-centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityImage {
    pub data: Array2<f64>,
    pub oversample: usize,
}

impl IntensityImage {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data, oversample: 1 }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Sum over the centered `roi x roi` window.
    pub fn roi_sum(&self, roi: usize) -> Result<f64> {
        let (h, w) = self.data.dim();
        if roi == 0 || roi > h || roi > w {
            return Err(SpimError::Geometry(format!(
                "roi {roi} does not fit a {h}x{w} readout grid"
            )));
        }
        let (r0, c0) = (h / 2 - roi / 2, w / 2 - roi / 2);
        Ok(self.data.slice(s![r0..r0 + roi, c0..c0 + roi]).sum())
    }
}

/// Reusable 2-D FFT propagator for frames of a fixed size.
pub struct Propagator {
    config: OpticsConfig,
    rows: usize,
    cols: usize,
    row_fft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
    buffer: Vec<Complex64>,
    transposed: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl fmt::Debug for Propagator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Propagator")
            .field("config", &self.config)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Clone for Propagator {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            rows: self.rows,
            cols: self.cols,
            row_fft: Arc::clone(&self.row_fft),
            col_fft: Arc::clone(&self.col_fft),
            buffer: self.buffer.clone(),
            transposed: self.transposed.clone(),
            scratch: self.scratch.clone(),
        }
    }
}

impl Propagator {
    /// Propagator for `frame_rows x frame_cols` frames.
    pub fn new(frame_rows: usize, frame_cols: usize, config: OpticsConfig) -> Result<Self> {
        if config.oversample == 0 {
            return Err(SpimError::InvalidArgument("oversample must be at least 1".into()));
        }
        let rows = frame_rows * config.oversample;
        let cols = frame_cols * config.oversample;
        let mut planner = FftPlanner::new();
        let row_fft = planner.plan_fft_forward(cols);
        let col_fft = planner.plan_fft_forward(rows);
        let scratch_len = row_fft
            .get_inplace_scratch_len()
            .max(col_fft.get_inplace_scratch_len());
        Ok(Self {
            config,
            rows,
            cols,
            row_fft,
            col_fft,
            buffer: vec![Complex64::default(); rows * cols],
            transposed: vec![Complex64::default(); rows * cols],
            scratch: vec![Complex64::default(); scratch_len],
        })
    }

    pub fn for_layout(layout: &SlmLayout, config: OpticsConfig) -> Result<Self> {
        Self::new(layout.frame_side(), layout.frame_side(), config)
    }

    pub fn config(&self) -> &OpticsConfig {
        &self.config
    }

    /// Readout grid shape `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn load(&mut self, frame: &SlmFrame) -> Result<()> {
        let (fh, fw) = frame.phase.dim();
        let o = self.config.oversample;
        if fh * o != self.rows || fw * o != self.cols {
            return Err(SpimError::Dimension {
                expected: self.rows * self.cols,
                got: fh * fw * o * o,
            });
        }
        self.buffer.fill(Complex64::default());
        let (cy, cx) = ((fh as f64 - 1.0) / 2.0, (fw as f64 - 1.0) / 2.0);
        for ((r, c), &theta) in frame.phase.indexed_iter() {
            let amplitude = match self.config.illumination {
                Illumination::PlaneWave => 1.0,
                Illumination::Gaussian { waist_px } => {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    (-d2 / (waist_px * waist_px)).exp()
                }
            };
            self.buffer[r * self.cols + c] = Complex64::from_polar(amplitude, theta);
        }
        Ok(())
    }

    fn transform(&mut self) {
        let (rows, cols) = (self.rows, self.cols);
        self.row_fft
            .process_with_scratch(&mut self.buffer, &mut self.scratch);
        for r in 0..rows {
            for c in 0..cols {
                self.transposed[c * rows + r] = self.buffer[r * cols + c];
            }
        }
        self.col_fft
            .process_with_scratch(&mut self.transposed, &mut self.scratch);
    }

    /// Field at the readout plane for `frame`.
    pub fn field(&mut self, frame: &SlmFrame) -> Result<FieldImage> {
        self.load(frame)?;
        self.transform();
        let (rows, cols) = (self.rows, self.cols);
        let (hr, hc) = (rows / 2, cols / 2);
        let mut data = Array2::zeros((rows, cols));
        for c in 0..cols {
            for r in 0..rows {
                data[[(r + hr) % rows, (c + hc) % cols]] = self.transposed[c * rows + r];
            }
        }
        Ok(FieldImage {
            data,
            oversample: self.config.oversample,
        })
    }

    /// Intensity at the readout plane for `frame`.
    pub fn intensity(&mut self, frame: &SlmFrame) -> Result<IntensityImage> {
        self.load(frame)?;
        self.transform();
        let (rows, cols) = (self.rows, self.cols);
        let (hr, hc) = (rows / 2, cols / 2);
        let mut data = Array2::zeros((rows, cols));
        for c in 0..cols {
            for r in 0..rows {
                data[[(r + hr) % rows, (c + hc) % cols]] = self.transposed[c * rows + r].norm_sqr();
            }
        }
        if self.config.pixel_envelope {
            apply_pixel_envelope(&mut data);
        }
        Ok(IntensityImage {
            data,
            oversample: self.config.oversample,
        })
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Multiplies by `sinc^2` of the unit pixel aperture; 1 at DC.
fn apply_pixel_envelope(data: &mut Array2<f64>) {
    let (rows, cols) = data.dim();
    let (hr, hc) = (rows / 2, cols / 2);
    for ((r, c), v) in data.indexed_iter_mut() {
        // cycles per modulator pixel; the grid already includes oversampling
        let fy = (r as f64 - hr as f64) / rows as f64;
        let fx = (c as f64 - hc as f64) / cols as f64;
        *v *= (sinc(PI * fy) * sinc(PI * fx)).powi(2);
    }
}

/// Plane-wave field of `frame`, zero-padded by `oversample`.
pub fn forward_field(frame: &SlmFrame, oversample: usize) -> Result<FieldImage> {
    let config = OpticsConfig {
        oversample,
        ..OpticsConfig::default()
    };
    Propagator::new(frame.height(), frame.width(), config)?.field(frame)
}

/// Intensity summed over the centered `roi x roi` readout window.
pub fn center_intensity(frame: &SlmFrame, roi: usize) -> Result<f64> {
    let (h, w) = (frame.height(), frame.width());
    if roi == 0 || roi > h || roi > w {
        return Err(SpimError::Geometry(format!(
            "roi {roi} does not fit a {h}x{w} readout grid"
        )));
    }
    forward_field(frame, 1)?.intensity().roi_sum(roi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    DeltaAtCenter,
    CapturedPattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetIntensity {
    pub data: Array2<f64>,
    pub kind: TargetKind,
}

impl TargetIntensity {
    /// Zero everywhere except `peak` at the DC bin.
    pub fn delta_at_center(rows: usize, cols: usize, peak: f64) -> Self {
        let mut data = Array2::zeros((rows, cols));
        data[[rows / 2, cols / 2]] = peak;
        Self {
            data,
            kind: TargetKind::DeltaAtCenter,
        }
    }

    pub fn captured(image: &IntensityImage) -> Self {
        Self {
            data: image.data.clone(),
            kind: TargetKind::CapturedPattern,
        }
    }
}

/// `sum (I - I_target)^2` over the readout grid.
pub fn cost(image: &IntensityImage, target: &TargetIntensity) -> Result<f64> {
    if image.data.dim() != target.data.dim() {
        return Err(SpimError::Dimension {
            expected: target.data.len(),
            got: image.data.len(),
        });
    }
    Ok(image
        .data
        .iter()
        .zip(target.data.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Total intensity over the readout grid.
pub fn total_energy(image: &IntensityImage) -> f64 {
    image.data.sum()
}

/// Scales a series so its largest value is 1. All-zero series are unchanged.
pub fn normalize_to_unit_max(series: &mut [f64]) {
    let max = series.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        series.iter_mut().for_each(|v| *v /= max);
    }
}

/// Rank-1 couplings `J_mn = -2 kappa zeta_m zeta_n` induced by a delta target.
///
/// `kappa` is the total weight of the target: a delta of height `p` at the
/// readout center transforms to the constant `p` over the modulator, and the
/// pixel `sinc^2` envelope is 1 there.
pub fn coupling_matrix(inst: &NppInstance, target: &TargetIntensity) -> Result<Array2<f64>> {
    if target.kind != TargetKind::DeltaAtCenter {
        return Err(SpimError::NotSupported(
            "couplings are only defined for a delta target at the readout center".into(),
        ));
    }
    let kappa = target.data.sum();
    let z = inst.zeta();
    Ok(Array2::from_shape_fn((z.len(), z.len()), |(m, n)| {
        -2.0 * kappa * (z[m] * z[n])
    }))
}
