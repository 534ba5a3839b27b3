use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spim::bench::gen_instance;
use spim::model::{
    fidelity, mattis_hamiltonian, normalize_instance, signed_sum, SignedSumTracker, SpinConfig,
};
use spim::optics::{
    center_intensity, compose_phase, wrap_phase, OpticsConfig, PhaseQuantizer, Propagator, SlmLayout,
};
use spim::solvers::{anneal, metropolis_accept, AnnealSchedule, MattisObjective, MhParams};

fn numbers(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3..1.0f64, n)
}

fn spins(n: usize) -> impl Strategy<Value = SpinConfig> {
    prop::collection::vec(prop::bool::ANY, n)
        .prop_map(|b| SpinConfig::from_spins(b.into_iter().map(|u| if u { 1 } else { -1 }).collect()).unwrap())
}

fn instance_and_spins() -> impl Strategy<Value = (Vec<f64>, SpinConfig)> {
    (2usize..40).prop_flat_map(|n| (numbers(n), spins(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fidelity_squared_recovers_hamiltonian((nums, cfg) in instance_and_spins()) {
        let inst = normalize_instance(&nums).unwrap();
        let f = fidelity(&inst, &cfg).unwrap();
        let h = mattis_hamiltonian(&inst, &cfg).unwrap();
        let total = inst.zeta_total();
        prop_assert!((f * f * total * total - h).abs() <= 1e-12 * total * total);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn global_flip_leaves_energy_unchanged((nums, cfg) in instance_and_spins()) {
        let inst = normalize_instance(&nums).unwrap();
        let neg = cfg.negated();
        prop_assert_eq!(fidelity(&inst, &cfg).unwrap(), fidelity(&inst, &neg).unwrap());
        prop_assert_eq!(mattis_hamiltonian(&inst, &cfg).unwrap(), mattis_hamiltonian(&inst, &neg).unwrap());
    }

    #[test]
    fn global_flip_leaves_readout_unchanged(seed in any::<u64>(), side in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = SlmLayout::new(side, 4).unwrap().with_quantizer(None);
        let cfg = SpinConfig::random(side, side, &mut rng);
        let alpha: Vec<f64> = (0..side * side).map(|i| 0.1 * i as f64).collect();
        let a = center_intensity(&compose_phase(&layout, &cfg, &alpha).unwrap(), 2).unwrap();
        let b = center_intensity(&compose_phase(&layout, &cfg.negated(), &alpha).unwrap(), 2).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn propagation_conserves_energy(seed in any::<u64>(), side in 1usize..4, oversample in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = SlmLayout::new(side, 4).unwrap().with_margin(1);
        let cfg = SpinConfig::random(side, side, &mut rng);
        let alpha = vec![0.7; side * side];
        let frame = compose_phase(&layout, &cfg, &alpha).unwrap();
        let config = OpticsConfig { oversample, ..OpticsConfig::default() };
        let mut p = Propagator::for_layout(&layout, config).unwrap();
        let total: f64 = p.intensity(&frame).unwrap().data.sum();
        let pixels = (frame.width() * frame.height()) as f64;
        let grid = pixels * (oversample * oversample) as f64;
        prop_assert!((total - grid * pixels).abs() <= 1e-9 * grid * pixels);
    }

    #[test]
    fn phase_quantization_is_idempotent_and_within_half_step(theta in -20.0..20.0f64) {
        let q = PhaseQuantizer::eight_bit();
        let once = q.quantize(theta);
        prop_assert_eq!(q.quantize(once), once);
        let err = (wrap_phase(theta) - once).abs();
        let err = err.min(std::f64::consts::TAU - err);
        prop_assert!(err <= q.step() / 2.0 + 1e-12);
    }

    #[test]
    fn tracker_matches_recomputation((nums, cfg) in instance_and_spins(), flips in prop::collection::vec(any::<prop::sample::Index>(), 0..60)) {
        let inst = normalize_instance(&nums).unwrap();
        let mut cfg = cfg;
        let mut tracker = SignedSumTracker::new(inst.zeta().to_vec(), &cfg).unwrap();
        for f in flips {
            let i = f.index(cfg.len());
            let before = cfg.get(i);
            let mut flipped = cfg.clone();
            flipped.flip(i);
            let direct = signed_sum(inst.zeta(), &flipped).unwrap();
            prop_assert!((tracker.sum() + tracker.flip_delta(i, before) - direct).abs() < 1e-9);
            tracker.apply_flip(i, before);
            cfg.flip(i);
        }
        prop_assert!((tracker.sum() - signed_sum(inst.zeta(), &cfg).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn downhill_moves_are_always_accepted(delta in -1e6..=0.0f64, beta in 0.0..1e6f64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(metropolis_accept(delta, beta, &mut rng));
    }

    #[test]
    fn summary_best_is_trace_minimum((nums, cfg) in instance_and_spins(), seed in any::<u64>()) {
        let inst = normalize_instance(&nums).unwrap();
        let sched = AnnealSchedule::from_median_delta(1.0, 200).unwrap();
        let obj = MattisObjective::new(inst.zeta().to_vec(), &cfg).unwrap();
        let trace = anneal(obj, cfg, &sched, &MhParams::new(1, seed)).unwrap();
        let min = trace.records.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(trace.summary.best_objective, min);
        let best_h = signed_sum(inst.zeta(), &trace.summary.best_config).unwrap().powi(2);
        prop_assert!((best_h - min).abs() <= 1e-9 * (1.0 + min));
    }

    #[test]
    fn generated_instances_are_normalized(n in 2usize..300, digits in 1u32..9, seed in any::<u64>()) {
        let inst = gen_instance(n, digits, seed).unwrap();
        prop_assert_eq!(inst.len(), n);
        prop_assert_eq!(inst.zeta().iter().cloned().fold(0.0, f64::max), 1.0);
        prop_assert!(inst.zeta().iter().all(|&z| z > 0.0 && z <= 1.0));
    }
}
