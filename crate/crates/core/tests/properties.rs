use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ramimo_core::channel::{self, complex_gaussian, ChannelRealization};
use ramimo_core::conic::SolverSettings;
use ramimo_core::energy::{self, DecisionRule, PowerModel, RepeaterState, SleepSchedule};
use ramimo_core::experiments::{drop_ues, DropContext, ExperimentConfig};
use ramimo_core::optimizer::{self, CcpSettings};
use ramimo_core::scenario::{self, Deployment, Point3, ScenarioConfig};
use ramimo_core::{mimo, seeding};

fn realization(m: usize, l: usize, k: usize, seed: u64) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows, cols, scale: f64| DMatrix::from_fn(rows, cols, |_, _| complex_gaussian(&mut rng) * scale);
    let h = draw(l, k, 1.0);
    let g = draw(m, l, 0.5);
    let h_bar = draw(m, k, 0.3);
    ChannelRealization { h, g, h_bar, noise_rep: 0.2, noise_bs: 0.5, uplink_power: 1.3 }
}

fn gains(l: usize, seed: u64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..l).map(|_| rng.random_range(0.0..hi)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=6, 0usize..=5, 1usize..=3, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_is_symmetric_about_center(side in 1usize..=12, area in 100.0f64..5000.0) {
        let pts = scenario::grid_positions(side * side, area).unwrap();
        let key = |x: f64, y: f64| ((x * 1e6).round() as i64, (y * 1e6).round() as i64);
        let mut a: Vec<_> = pts.iter().map(|p| key(p.x, p.y)).collect();
        let mut b: Vec<_> = pts.iter().map(|p| key(area - p.x, area - p.y)).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pruning_is_monotone_in_threshold(t1 in 0.0f64..1500.0, dt in 0.0f64..1500.0) {
        let cfg = ScenarioConfig::default();
        let dep = Deployment::grid(&cfg, vec![Point3::new(10.0, 10.0, 1.5)]).unwrap();
        let small = scenario::prune_by_bs_distance(&dep, t1);
        let large = scenario::prune_by_bs_distance(&dep, t1 + dt);
        for (s, l) in small.active_mask.iter().zip(&large.active_mask) {
            prop_assert!(!l || *s);
        }
        prop_assert_eq!(&small.repeater_positions, &dep.repeater_positions);
    }

    #[test]
    fn pathloss_and_los_depend_on_geometry_only(d in 10.0f64..3000.0, h in 1.5f64..22.0, los in any::<bool>()) {
        let a = channel::uma_pathloss(d, 25.0, h, 3.5e9, los);
        let b = channel::uma_pathloss(d, 25.0, h, 3.5e9, los);
        prop_assert_eq!(a.to_bits(), b.to_bits());
        let p = channel::uma_los_probability(d, h);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert_eq!(p.to_bits(), channel::uma_los_probability(d, h).to_bits());
    }

    #[test]
    fn disjoint_streams_give_different_channels(seed in any::<u64>(), drop in 0u64..1000) {
        let mut a = seeding::stream(seed, &[seeding::purpose::SMALL_SCALE, drop, 0]);
        let mut b = seeding::stream(seed, &[seeding::purpose::SMALL_SCALE, drop, 1]);
        let x: Vec<Complex64> = (0..8).map(|_| complex_gaussian(&mut a)).collect();
        let y: Vec<Complex64> = (0..8).map(|_| complex_gaussian(&mut b)).collect();
        prop_assert_ne!(x, y);
    }

    #[test]
    fn sinr_matches_optimizer_quadratic_form((m, l, k, seed) in dims()) {
        let r = realization(m, l, k, seed);
        let a = gains(l, seed, 2.0);
        let pts = optimizer::linearize(&r, &a).unwrap();
        for (kk, c) in optimizer::assemble_all(&r, &pts).iter().enumerate() {
            let sinr = mimo::lmmse_sinr(&r, &a, kk).unwrap();
            prop_assert!(rel(c.lhs(&a) * r.uplink_power, sinr) < 1e-9);
            prop_assert!(rel(c.reduce().eval(&a) * r.uplink_power, sinr) < 1e-9);
        }
    }

    #[test]
    fn deactivation_equals_removal((m, l, k, seed) in dims(), pick in any::<prop::sample::Index>()) {
        prop_assume!(l > 0);
        let r = realization(m, l, k, seed);
        let off = pick.index(l);
        let mut a = gains(l, seed, 2.0);
        a[off] = 0.0;
        let keep: Vec<usize> = (0..l).filter(|j| *j != off).collect();
        let kept: Vec<f64> = keep.iter().map(|j| a[*j]).collect();
        let x = mimo::lmmse_sinrs(&r, &a).unwrap();
        let y = mimo::lmmse_sinrs(&r.select_repeaters(&keep), &kept).unwrap();
        for (p, q) in x.iter().zip(&y) {
            prop_assert!(rel(*p, *q) <= 1e-12);
        }
    }

    #[test]
    fn zero_gain_is_the_colocated_baseline((m, l, k, seed) in dims()) {
        let r = realization(m, l, k, seed);
        let with = mimo::lmmse_sinrs(&r, &vec![0.0; l]).unwrap();
        let without = mimo::mmse_sinrs(&r.h_bar, r.uplink_power, r.noise_bs).unwrap();
        for (p, q) in with.iter().zip(&without) {
            prop_assert!(rel(*p, *q) < 1e-9);
        }
    }

    #[test]
    fn covariance_always_factorizes((m, l, k, seed) in dims()) {
        let r = realization(m, l, k, seed);
        let a = gains(l, seed, 50.0);
        let sinrs = mimo::lmmse_sinrs(&r, &a);
        prop_assert!(sinrs.is_ok());
        prop_assert!(sinrs.unwrap().iter().all(|s| s.is_finite() && *s >= 0.0));
    }

    #[test]
    fn surrogate_underestimates_everywhere((m, l, k, seed) in dims()) {
        let r = realization(m, l, k, seed);
        let a0 = gains(l, seed, 2.0);
        let a = gains(l, seed.wrapping_add(1), 2.0);
        let pts = optimizer::linearize(&r, &a0).unwrap();
        for (kk, p) in pts.iter().enumerate() {
            let bound = optimizer::surrogate(&r, p, &a, kk).unwrap();
            let exact = optimizer::sinr_form(&r, &a, kk).unwrap();
            prop_assert!(bound <= exact + 1e-9 * exact.abs().max(1.0));
            let at = optimizer::surrogate(&r, p, &a0, kk).unwrap();
            prop_assert!(rel(at, optimizer::sinr_form(&r, &a0, kk).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn coefficients_ignore_receive_side_phase((m, l, k, seed) in dims(), phase in 0.0f64..std::f64::consts::TAU) {
        let r = realization(m, l, k, seed);
        let turn = Complex64::from_polar(1.0, phase);
        let mut rot = r.clone();
        rot.g = rot.g.map(|x| x * turn);
        rot.h_bar = rot.h_bar.map(|x| x * turn);
        let a0 = gains(l, seed, 2.0);
        let c1 = optimizer::assemble_all(&r, &optimizer::linearize(&r, &a0).unwrap());
        let c2 = optimizer::assemble_all(&rot, &optimizer::linearize(&rot, &a0).unwrap());
        for (x, y) in c1.iter().zip(&c2) {
            prop_assert!((&x.r - &y.r).norm() <= 1e-9 * x.r.norm().max(1.0));
            prop_assert!((&x.g_tilde - &y.g_tilde).norm() <= 1e-9 * x.g_tilde.norm().max(1.0));
            prop_assert!((x.d - y.d).abs() <= 1e-9 * x.d.abs().max(1.0));
            for i in 0..x.interference.len() {
                let (qx, qy) = (x.q_matrix(i), y.q_matrix(i));
                prop_assert!((&qx - &qy).norm() <= 1e-9 * qx.norm().max(1.0));
            }
        }
    }

    #[test]
    fn majority_states_are_a_subset_of_or_states(rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 1..8)) {
        let ind = energy::ActivationIndicators::new(rows, 6).unwrap();
        let or = ind.decide(DecisionRule::Or);
        let maj = ind.decide(DecisionRule::Majority);
        let model = PowerModel::default();
        let static_power = |s: &[RepeaterState]| s.iter().map(|x| energy::repeater_power(*x, 0.0, &model)).sum::<f64>();
        for (o, mj) in or.iter().zip(&maj) {
            prop_assert!(!mj.is_active() || o.is_active());
        }
        prop_assert!(static_power(&or) >= static_power(&maj));
    }

    #[test]
    fn activating_a_repeater_never_lowers_consumption(
        (m, l, k, seed) in (1usize..=4, 1usize..=6, 1usize..=3, any::<u64>()),
        mask in prop::collection::vec(any::<bool>(), 6),
        pick in any::<prop::sample::Index>(),
    ) {
        let r = realization(m, l, k, seed);
        let a = gains(l, seed, 2.0);
        let states: Vec<RepeaterState> =
            mask[..l].iter().map(|b| if *b { RepeaterState::Active } else { RepeaterState::Sleep }).collect();
        let alpha_for = |s: &[RepeaterState]| a.iter().zip(s).map(|(x, st)| if st.is_active() { *x } else { 0.0 }).collect::<Vec<_>>();
        let sched = |s: Vec<RepeaterState>| SleepSchedule { alpha: vec![alpha_for(&s)], states: s, feasible: vec![true], converged: vec![true] };
        let mut more = states.clone();
        more[pick.index(l)] = RepeaterState::Active;
        let model = PowerModel::default();
        let blocks = [r];
        let before = energy::total_power(&sched(states), &blocks, &model).unwrap();
        let after = energy::total_power(&sched(more), &blocks, &model).unwrap();
        prop_assert!(after >= before - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn minpow_solution_satisfies_its_linearized_constraints((m, l, k, seed) in (2usize..=5, 1usize..=4, 1usize..=3, any::<u64>())) {
        let r = realization(m, l, k, seed);
        let upper = vec![2.0; l];
        let a0 = gains(l, seed, 2.0);
        let coeffs = optimizer::assemble_all(&r, &optimizer::linearize(&r, &a0).unwrap());
        let costs: Vec<f64> = (0..l).map(|j| mimo::amplifier_input(&r, j)).collect();
        let th: Vec<f64> = coeffs.iter().map(|c| 0.5 * c.lhs(&upper)).collect();
        let sol = optimizer::solve_minpow_subproblem(&coeffs, &upper, &costs, &th, 100.0, &SolverSettings::default());
        for ((c, t), f) in coeffs.iter().zip(&th).zip(&sol.slacks) {
            prop_assert!(c.lhs(&sol.alpha) + f >= t - 1e-6 * (1.0 + t.abs()));
        }
        for (a, u) in sol.alpha.iter().zip(&upper) {
            prop_assert!(*a >= -1e-9 && *a <= u + 1e-9);
        }
    }

    #[test]
    fn maxmin_floor_is_self_consistent((m, l, k, seed) in (2usize..=5, 1usize..=4, 1usize..=3, any::<u64>())) {
        let r = realization(m, l, k, seed);
        let upper = vec![1.5; l];
        let out = optimizer::maxmin_ccp(&r, &CcpSettings::default(), &upper).unwrap();
        let min = mimo::lmmse_sinrs(&r, &out.alpha).unwrap().into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(rel(out.sinr_floor, min) < 1e-9);
        let start = mimo::lmmse_sinrs(&r, &upper).unwrap().into_iter().fold(f64::INFINITY, f64::min);
        prop_assert!(out.sinr_floor >= start - 1e-6 * start.max(1.0));
    }

    #[test]
    fn minpow_cost_never_rises_once_slacks_vanish((m, l, k, seed) in (2usize..=5, 1usize..=4, 1usize..=3, any::<u64>())) {
        let r = realization(m, l, k, seed);
        let upper = vec![1.5; l];
        let floor = mimo::lmmse_sinrs(&r, &upper).unwrap().into_iter().fold(f64::INFINITY, f64::min);
        let th = vec![0.5 * floor; k];
        let out = optimizer::minpow_fpp(&r, &CcpSettings::default(), &upper, &th).unwrap();
        let settled: Vec<f64> = out.trace.iter().skip_while(|t| t.max_slack > 0.0).map(|t| t.objective).collect();
        for w in settled.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-6 * w[0].max(1.0));
        }
    }
}

#[test]
fn channel_gain_normalization_holds_per_link() {
    let mut cfg = ExperimentConfig::preset("desk-fig1").unwrap();
    cfg.scenario.num_ues = 2;
    let ctx = DropContext::new(&cfg.scenario, drop_ues(&cfg, 3), 3).unwrap();
    let draws = 10_000u64;
    let (l, k, m) = (cfg.scenario.num_repeaters, cfg.scenario.num_ues, cfg.scenario.num_bs_antennas);
    let mut h = DMatrix::<f64>::zeros(l, k);
    let mut hb = DMatrix::<f64>::zeros(m, k);
    for b in 0..draws {
        let r = ctx.block(b);
        h += r.h.map(|x| x.norm_sqr());
        hb += r.h_bar.map(|x| x.norm_sqr());
    }
    for j in 0..l {
        for kk in 0..k {
            let ratio = h[(j, kk)] / draws as f64 / ctx.large_scale.beta_ue_rep[(j, kk)];
            assert!((0.97..=1.03).contains(&ratio), "link ({j},{kk}): {ratio}");
        }
    }
    for kk in 0..k {
        let ratio = hb.column(kk).sum() / (m as f64 * draws as f64) / ctx.large_scale.beta_ue_bs[kk];
        assert!((0.97..=1.03).contains(&ratio), "direct link {kk}: {ratio}");
    }
}
