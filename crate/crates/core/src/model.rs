//! Problem instances, spin configurations and the Mattis Hamiltonian.
//!
//! Everything here is exact reference math: no optics, no noise. The optical
//! forward model in [`crate::optics`] is checked against these functions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result, SpimError};

/// Significant digits kept for normalized amplitudes unless configured otherwise.
pub const DEFAULT_PRECISION_DIGITS: u32 = 8;

/// Rounds `x` to `digits` significant decimal digits.
pub fn round_significant(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let exponent = digits as i32 - 1 - magnitude;
    if exponent >= 0 {
        let scale = 10f64.powi(exponent);
        (x * scale).round() / scale
    } else {
        let scale = 10f64.powi(-exponent);
        (x / scale).round() * scale
    }
}

/// A two-way number-partitioning instance together with its optical encoding.
///
/// `zeta` holds the numbers divided by the largest one, rounded to
/// `precision_digits` significant digits, and `alpha = acos(zeta)` is the
/// phase offset that synthesizes each amplitude on the modulator. `numbers`
/// is snapped to the same grid (`zeta * max`) so that partition sums and
/// fidelities agree to rounding error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NppInstance {
    numbers: Vec<f64>,
    zeta: Vec<f64>,
    alpha: Vec<f64>,
    precision_digits: u32,
}

impl NppInstance {
    pub fn numbers(&self) -> &[f64] {
        &self.numbers
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn precision_digits(&self) -> u32 {
        self.precision_digits
    }

    pub fn len(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }

    pub fn max_number(&self) -> f64 {
        self.numbers.iter().copied().fold(f64::MIN, f64::max)
    }

    pub fn total(&self) -> f64 {
        self.numbers.iter().sum()
    }

    pub fn zeta_total(&self) -> f64 {
        self.zeta.iter().sum()
    }
}

/// Normalizes `numbers` with the default precision of 8 significant digits.
pub fn normalize_instance(numbers: &[f64]) -> Result<NppInstance> {
    normalize_instance_with_precision(numbers, DEFAULT_PRECISION_DIGITS)
}

pub fn normalize_instance_with_precision(numbers: &[f64], digits: u32) -> Result<NppInstance> {
    if numbers.len() < 2 {
        return Err(SpimError::InvalidInstance(format!(
            "need at least 2 numbers, got {}",
            numbers.len()
        )));
    }
    if digits == 0 {
        return Err(SpimError::InvalidInstance("precision must be at least 1 digit".into()));
    }
    if let Some(bad) = numbers.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(SpimError::InvalidInstance(format!("non-positive or non-finite number {bad}")));
    }
    let max = numbers.iter().copied().fold(f64::MIN, f64::max);
    let zeta: Vec<f64> = numbers
        .iter()
        .map(|&x| round_significant(x / max, digits).min(1.0))
        .collect();
    let alpha = zeta.iter().map(|z| z.acos()).collect();
    let numbers = zeta.iter().map(|z| z * max).collect();
    Ok(NppInstance {
        numbers,
        zeta,
        alpha,
        precision_digits: digits,
    })
}

/// A lattice of binary spins stored row-major.
///
/// Lattice runs use `rows == cols == S`; oracles over instances whose size is
/// not a perfect square use a single row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpinConfig {
    rows: usize,
    cols: usize,
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn new(rows: usize, cols: usize, spins: Vec<i8>) -> Result<Self> {
        check_len(rows * cols, spins.len())?;
        if let Some(bad) = spins.iter().find(|s| **s != 1 && **s != -1) {
            return Err(SpimError::InvalidArgument(format!("spin value {bad} is not +1 or -1")));
        }
        Ok(Self { rows, cols, spins })
    }

    /// A single-row configuration of arbitrary length.
    pub fn from_spins(spins: Vec<i8>) -> Result<Self> {
        Self::new(1, spins.len(), spins)
    }

    pub fn uniform(side: usize, value: i8) -> Self {
        let value = if value < 0 { -1 } else { 1 };
        Self {
            rows: side,
            cols: side,
            spins: vec![value; side * side],
        }
    }

    /// `+1` where `row + col` is even.
    pub fn checkerboard(side: usize) -> Self {
        let spins = (0..side * side)
            .map(|i| if (i / side + i % side).is_multiple_of(2) { 1 } else { -1 })
            .collect();
        Self {
            rows: side,
            cols: side,
            spins,
        }
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let spins = (0..rows * cols)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        Self { rows, cols, spins }
    }

    /// Uniformly random configuration with `|sum| <= 1`: exactly half up for
    /// even sizes, one extra up spin for odd sizes.
    pub fn balanced_random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let n = rows * cols;
        let mut spins: Vec<i8> = (0..n).map(|i| if i < n.div_ceil(2) { 1 } else { -1 }).collect();
        spins.shuffle(rng);
        Self { rows, cols, spins }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Lattice side when the configuration is square.
    pub fn side(&self) -> Option<usize> {
        (self.rows == self.cols).then_some(self.rows)
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn get(&self, index: usize) -> i8 {
        self.spins[index]
    }

    pub fn flip(&mut self, index: usize) {
        self.spins[index] = -self.spins[index];
    }

    pub fn magnetization(&self) -> i64 {
        self.spins.iter().map(|&s| s as i64).sum()
    }

    /// Number of sites whose spin differs from `other`.
    pub fn hamming(&self, other: &SpinConfig) -> usize {
        self.spins
            .iter()
            .zip(&other.spins)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn negated(&self) -> SpinConfig {
        Self {
            rows: self.rows,
            cols: self.cols,
            spins: self.spins.iter().map(|s| -s).collect(),
        }
    }
}

/// `sum_j a_j * sigma_j`.
pub fn signed_sum(amplitudes: &[f64], cfg: &SpinConfig) -> Result<f64> {
    check_len(amplitudes.len(), cfg.len())?;
    Ok(amplitudes
        .iter()
        .zip(cfg.spins())
        .map(|(a, &s)| a * s as f64)
        .sum())
}

/// Mattis energy `sum_{i,j} zeta_i zeta_j sigma_i sigma_j`, evaluated as the
/// square of the single signed sum.
pub fn mattis_hamiltonian(inst: &NppInstance, cfg: &SpinConfig) -> Result<f64> {
    let s = signed_sum(inst.zeta(), cfg)?;
    Ok(s * s)
}

/// Normalized partition imbalance `|sum zeta sigma| / sum zeta`, in `[0, 1]`.
pub fn fidelity(inst: &NppInstance, cfg: &SpinConfig) -> Result<f64> {
    let s = signed_sum(inst.zeta(), cfg)?;
    Ok((s.abs() / inst.zeta_total()).min(1.0))
}

/// Sums of the raw numbers assigned to the `+1` and `-1` subsets.
pub fn partition_sums(inst: &NppInstance, cfg: &SpinConfig) -> Result<(f64, f64)> {
    check_len(inst.len(), cfg.len())?;
    let mut up = 0.0;
    let mut down = 0.0;
    for (x, &s) in inst.numbers().iter().zip(cfg.spins()) {
        if s > 0 {
            up += x;
        } else {
            down += x;
        }
    }
    Ok((up, down))
}

/// Raw numbers split by spin sign, `+1` subset first.
pub fn partition_subsets(inst: &NppInstance, cfg: &SpinConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(inst.len(), cfg.len())?;
    let (up, down): (Vec<_>, Vec<_>) = inst
        .numbers()
        .iter()
        .zip(cfg.spins())
        .partition(|(_, &s)| s > 0);
    Ok((
        up.into_iter().map(|(x, _)| *x).collect(),
        down.into_iter().map(|(x, _)| *x).collect(),
    ))
}

/// Stepwise morph of the couplings from the all-equal instance (`t = 0`) to
/// the target instance (`t = total_steps`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdiabaticSchedule {
    pub total_steps: usize,
    pub settle_iterations: usize,
}

impl AdiabaticSchedule {
    pub const DEFAULT_STEPS: usize = 64;

    pub fn new(total_steps: usize, settle_iterations: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(SpimError::InvalidArgument("adiabatic schedule needs at least one step".into()));
        }
        Ok(Self {
            total_steps,
            settle_iterations,
        })
    }

    /// `K = 64` steps, `max(32, n / 64)` settle iterations per step.
    pub fn default_for(n_spins: usize) -> Self {
        Self {
            total_steps: Self::DEFAULT_STEPS,
            settle_iterations: (n_spins / 64).max(32),
        }
    }

    /// Iterations spent stepping through `t = 0..=K`.
    pub fn staged_iterations(&self) -> usize {
        (self.total_steps + 1) * self.settle_iterations
    }
}

/// Amplitudes `cos(t * alpha_j / K)` in effect at schedule step `t`.
pub fn effective_amplitudes(
    inst: &NppInstance,
    sched: &AdiabaticSchedule,
    t: usize,
) -> Result<Vec<f64>> {
    let k = sched.total_steps;
    if t > k {
        return Err(SpimError::Schedule { step: t, total: k });
    }
    if t == k {
        return Ok(inst.zeta().to_vec());
    }
    let frac = t as f64 / k as f64;
    Ok(inst.alpha().iter().map(|a| (frac * a).cos()).collect())
}

/// Running signed sum `sum a_j sigma_j` with O(1) updates per flip.
///
/// Updates use compensated (Neumaier) summation so long flip sequences do not
/// drift from a full recompute.
#[derive(Debug, Clone)]
pub struct SignedSumTracker {
    amplitudes: Vec<f64>,
    sum: f64,
    compensation: f64,
}

impl SignedSumTracker {
    pub fn new(amplitudes: Vec<f64>, cfg: &SpinConfig) -> Result<Self> {
        let sum = signed_sum(&amplitudes, cfg)?;
        Ok(Self {
            amplitudes,
            sum,
            compensation: 0.0,
        })
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.compensation
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    /// Change of the sum when spin `index`, currently `spin`, is flipped.
    pub fn flip_delta(&self, index: usize, spin: i8) -> f64 {
        -2.0 * spin as f64 * self.amplitudes[index]
    }

    /// Records a flip of spin `index` whose value before the flip was `spin`.
    pub fn apply_flip(&mut self, index: usize, spin: i8) {
        let delta = self.flip_delta(index, spin);
        let t = self.sum + delta;
        if self.sum.abs() >= delta.abs() {
            self.compensation += (self.sum - t) + delta;
        } else {
            self.compensation += (delta - t) + self.sum;
        }
        self.sum = t;
    }

    /// Replaces the amplitudes and recomputes the sum from scratch.
    pub fn reset(&mut self, amplitudes: Vec<f64>, cfg: &SpinConfig) -> Result<()> {
        self.sum = signed_sum(&amplitudes, cfg)?;
        self.compensation = 0.0;
        self.amplitudes = amplitudes;
        Ok(())
    }

    pub fn resync(&mut self, cfg: &SpinConfig) -> Result<()> {
        self.sum = signed_sum(&self.amplitudes, cfg)?;
        self.compensation = 0.0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn double_sum(zeta: &[f64], spins: &[i8]) -> f64 {
        let mut h = 0.0;
        for i in 0..zeta.len() {
            for j in 0..zeta.len() {
                h += zeta[i] * zeta[j] * (spins[i] * spins[j]) as f64;
            }
        }
        h
    }

    #[test]
    fn rounds_to_significant_digits() {
        assert_eq!(round_significant(0.123456789, 3), 0.123);
        assert_eq!(round_significant(1.0, 8), 1.0);
        assert_eq!(round_significant(98765.0, 2), 99000.0);
        assert_eq!(round_significant(0.00012345, 2), 0.00012);
    }

    #[test]
    fn all_equal_numbers_normalize_to_unit_amplitudes() {
        let inst = normalize_instance(&[2.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(inst.zeta(), &[1.0; 4]);
        assert_eq!(inst.alpha(), &[0.0; 4]);
    }

    #[test]
    fn two_numbers_normalize_by_the_largest() {
        let inst = normalize_instance(&[1.0, 2.0]).unwrap();
        assert_eq!(inst.zeta(), &[0.5, 1.0]);
        assert!((inst.alpha()[0] - 0.5f64.acos()).abs() < 1e-15);
        assert_eq!(inst.alpha()[1], 0.0);
    }

    #[test]
    fn random_instance_matches_brute_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let numbers: Vec<f64> = (0..64).map(|_| 1.0 - rng.random::<f64>()).collect();
        let inst = normalize_instance(&numbers).unwrap();
        let mut max = 0.0f64;
        for &x in &numbers {
            if x > max {
                max = x;
            }
        }
        for (i, &x) in numbers.iter().enumerate() {
            let brute = x / max;
            // 8 significant digits: relative rounding error below 5e-8
            assert!((inst.zeta()[i] - brute).abs() <= 5e-8 * brute);
            assert!((inst.zeta()[i].acos() - inst.alpha()[i]).abs() < 1e-12);
            assert!((inst.alpha()[i].cos() - inst.zeta()[i]).abs() < 1e-12);
        }
        assert_eq!(inst.zeta().iter().copied().fold(0.0, f64::max), 1.0);

        // with full precision the recompute agrees to 1e-12
        let exact = normalize_instance_with_precision(&numbers, 17).unwrap();
        for (i, &x) in numbers.iter().enumerate() {
            assert!((exact.zeta()[i] - x / max).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_instances() {
        assert!(matches!(normalize_instance(&[]), Err(SpimError::InvalidInstance(_))));
        assert!(matches!(normalize_instance(&[1.0]), Err(SpimError::InvalidInstance(_))));
        assert!(matches!(normalize_instance(&[1.0, 0.0]), Err(SpimError::InvalidInstance(_))));
        assert!(matches!(normalize_instance(&[1.0, -3.0]), Err(SpimError::InvalidInstance(_))));
        assert!(matches!(
            normalize_instance(&[1.0, f64::NAN]),
            Err(SpimError::InvalidInstance(_))
        ));
    }

    #[test]
    fn spin_config_rejects_non_binary_values() {
        assert!(SpinConfig::from_spins(vec![1, 0, -1]).is_err());
        assert!(SpinConfig::new(2, 2, vec![1, 1, 1]).is_err());
    }

    #[test]
    fn hamiltonian_of_aligned_unit_spins_is_n_squared() {
        let inst = normalize_instance(&[1.0; 16]).unwrap();
        let cfg = SpinConfig::uniform(4, 1);
        assert_eq!(mattis_hamiltonian(&inst, &cfg).unwrap(), 256.0);
    }

    #[test]
    fn hamiltonian_of_checkerboard_unit_spins_is_zero() {
        let inst = normalize_instance(&[1.0; 16]).unwrap();
        let cfg = SpinConfig::checkerboard(4);
        assert_eq!(mattis_hamiltonian(&inst, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn single_sum_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let numbers: Vec<f64> = (0..36).map(|_| 1.0 - rng.random::<f64>()).collect();
        let inst = normalize_instance(&numbers).unwrap();
        for _ in 0..20 {
            let cfg = SpinConfig::random(6, 6, &mut rng);
            let fast = mattis_hamiltonian(&inst, &cfg).unwrap();
            let slow = double_sum(inst.zeta(), cfg.spins());
            assert!((fast - slow).abs() <= 1e-9 * slow.abs().max(1e-12), "{fast} vs {slow}");
        }
    }

    #[test]
    fn size_mismatch_is_a_dimension_error() {
        let inst = normalize_instance(&[1.0, 2.0, 3.0]).unwrap();
        let cfg = SpinConfig::uniform(2, 1);
        assert!(matches!(mattis_hamiltonian(&inst, &cfg), Err(SpimError::Dimension { .. })));
        assert!(matches!(fidelity(&inst, &cfg), Err(SpimError::Dimension { .. })));
        assert!(matches!(partition_sums(&inst, &cfg), Err(SpimError::Dimension { .. })));
    }

    #[test]
    fn fidelity_examples() {
        let inst = normalize_instance(&[1.0, 1.0]).unwrap();
        let perfect = SpinConfig::from_spins(vec![1, -1]).unwrap();
        assert_eq!(fidelity(&inst, &perfect).unwrap(), 0.0);

        let inst = normalize_instance(&[3.0, 7.0, 0.5, 2.25]).unwrap();
        let up = SpinConfig::from_spins(vec![1; 4]).unwrap();
        assert!((fidelity(&inst, &up).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn partition_sum_examples() {
        let inst = normalize_instance(&[3.0, 3.0]).unwrap();
        let cfg = SpinConfig::from_spins(vec![1, -1]).unwrap();
        assert_eq!(partition_sums(&inst, &cfg).unwrap(), (3.0, 3.0));

        let inst = normalize_instance(&[5.0, 2.0, 3.0]).unwrap();
        let cfg = SpinConfig::from_spins(vec![1, -1, -1]).unwrap();
        let (a, b) = partition_sums(&inst, &cfg).unwrap();
        assert!((a - 5.0).abs() < 1e-12 && (b - 5.0).abs() < 1e-12);
        let (up, down) = partition_subsets(&inst, &cfg).unwrap();
        assert_eq!(up.len(), 1);
        assert_eq!(down.len(), 2);
    }

    #[test]
    fn partition_sums_match_direct_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let numbers: Vec<f64> = (0..50).map(|_| 100.0 * (1.0 - rng.random::<f64>())).collect();
        let inst = normalize_instance(&numbers).unwrap();
        let cfg = SpinConfig::random(1, 50, &mut rng);
        let (a, b) = partition_sums(&inst, &cfg).unwrap();
        let mut direct_a = 0.0;
        let mut direct_b = 0.0;
        for i in 0..50 {
            if cfg.get(i) == 1 {
                direct_a += inst.numbers()[i];
            } else {
                direct_b += inst.numbers()[i];
            }
        }
        assert!((a - direct_a).abs() < 1e-9);
        assert!((b - direct_b).abs() < 1e-9);
        let total: f64 = inst.numbers().iter().sum();
        assert!((a + b - total).abs() <= 1e-9 * total);
        let eta = fidelity(&inst, &cfg).unwrap();
        assert!(((a - b).abs() - eta * total).abs() <= 1e-9 * total);
    }

    #[test]
    fn effective_amplitude_examples() {
        let inst = normalize_instance(&[0.5, 1.0, 0.25]).unwrap();
        let sched = AdiabaticSchedule::new(8, 1).unwrap();
        assert_eq!(effective_amplitudes(&inst, &sched, 0).unwrap(), vec![1.0; 3]);
        assert_eq!(effective_amplitudes(&inst, &sched, 8).unwrap(), inst.zeta().to_vec());
        assert!(matches!(
            effective_amplitudes(&inst, &sched, 9),
            Err(SpimError::Schedule { step: 9, total: 8 })
        ));

        // zeta = 0.5 gives alpha = pi/3; halfway through a 2-step schedule
        let inst = normalize_instance(&[0.5, 1.0]).unwrap();
        assert!((inst.alpha()[0] - PI / 3.0).abs() < 1e-15);
        let sched = AdiabaticSchedule::new(2, 1).unwrap();
        let mid = effective_amplitudes(&inst, &sched, 1).unwrap();
        assert!((mid[0] - 0.866_025_403_784_438_6).abs() < 1e-12);
        assert_eq!(mid[1], 1.0);
    }

    #[test]
    fn effective_amplitudes_are_monotone_in_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let numbers: Vec<f64> = (0..30).map(|_| 1.0 - rng.random::<f64>()).collect();
        let inst = normalize_instance(&numbers).unwrap();
        let sched = AdiabaticSchedule::new(17, 1).unwrap();
        let mut prev = effective_amplitudes(&inst, &sched, 0).unwrap();
        for t in 1..=17 {
            let next = effective_amplitudes(&inst, &sched, t).unwrap();
            for (p, n) in prev.iter().zip(&next) {
                assert!(n <= p);
            }
            prev = next;
        }
    }

    #[test]
    fn default_schedule_follows_spin_count() {
        assert_eq!(AdiabaticSchedule::default_for(64).settle_iterations, 32);
        assert_eq!(AdiabaticSchedule::default_for(16384).settle_iterations, 256);
        assert_eq!(AdiabaticSchedule::default_for(64).staged_iterations(), 65 * 32);
    }

    #[test]
    fn balanced_start_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(SpinConfig::balanced_random(4, 4, &mut rng).magnetization(), 0);
        assert_eq!(SpinConfig::balanced_random(3, 3, &mut rng).magnetization(), 1);
    }

    #[test]
    fn tracker_matches_full_recompute_after_many_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let numbers: Vec<f64> = (0..100).map(|_| 1.0 - rng.random::<f64>()).collect();
        let inst = normalize_instance(&numbers).unwrap();
        let mut cfg = SpinConfig::random(10, 10, &mut rng);
        let mut tracker = SignedSumTracker::new(inst.zeta().to_vec(), &cfg).unwrap();
        for _ in 0..100_000 {
            let i = rng.random_range(0..100);
            tracker.apply_flip(i, cfg.get(i));
            cfg.flip(i);
        }
        let full = signed_sum(inst.zeta(), &cfg).unwrap();
        assert!((tracker.sum() - full).abs() < 1e-12, "{} vs {full}", tracker.sum());
    }
}
