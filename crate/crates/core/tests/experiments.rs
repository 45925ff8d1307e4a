use std::fs;

use ramimo_core::experiments::{
    self, drop_ues, DropContext, ExperimentConfig, ExperimentKind, Manifest, MMIMO, POLICIES, RA_MAXMIN, RA_MAXPOW,
};
use ramimo_core::{linear_to_db, mimo};

fn tiny(preset: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(preset).unwrap();
    c.drops = 2;
    c.blocks_per_drop = 2;
    c.scenario.num_ues = 2;
    c
}

#[test]
fn sinr_cdf_row_counts() {
    let c = tiny("desk-fig1");
    let r = experiments::run(&c).unwrap();
    let per_system = c.drops * c.blocks_per_drop * c.scenario.num_ues;
    assert_eq!(per_system, 8);
    assert_eq!(r.cdf_samples(MMIMO, 0).len(), per_system);
    assert_eq!(r.cdf_samples(RA_MAXPOW, 16).len(), per_system);
    assert_eq!(r.cdf.len(), 3 * per_system);
}

#[test]
fn direct_baseline_ignores_repeater_list() {
    let a = tiny("desk-fig1");
    let mut b = a.clone();
    b.repeater_counts = vec![64, 16];
    b.scenario.num_repeaters = 64;
    let (ra, rb) = (experiments::run(&a).unwrap(), experiments::run(&b).unwrap());
    assert_eq!(ra.cdf_samples(MMIMO, 0), rb.cdf_samples(MMIMO, 0));
    assert_eq!(ra.cdf_samples(RA_MAXPOW, 16), rb.cdf_samples(RA_MAXPOW, 16));
}

#[test]
fn direct_baseline_is_zero_gain_sinr_on_shared_draws() {
    let c = tiny("desk-fig1");
    let r = experiments::run(&c).unwrap();
    let mut expected = Vec::new();
    for d in 0..c.drops as u64 {
        let ctx = DropContext::new(&c.scenario, drop_ues(&c, d), d).unwrap();
        for real in ctx.blocks(c.blocks_per_drop) {
            let s = mimo::lmmse_sinrs(&real, &vec![0.0; real.num_repeaters()]).unwrap();
            expected.extend(s.into_iter().map(linear_to_db));
        }
    }
    assert_eq!(r.cdf_samples(MMIMO, 0), expected);
}

#[test]
fn pruning_extremes_reproduce_both_baselines() {
    let mut c = tiny("desk-fig2");
    c.prune_fractions = vec![0.0, 1.0];
    let pruned = experiments::run(&c).unwrap();
    let mut cdf = c.clone();
    cdf.experiment = ExperimentKind::SinrCdf;
    cdf.repeater_counts = vec![16];
    let full = experiments::run(&cdf).unwrap();
    let at = |f: f64| -> Vec<f64> {
        pruned.pruning.iter().filter(|p| p.system == RA_MAXPOW && p.fraction_target == f).map(|p| p.sinr_db).collect()
    };
    assert_eq!(at(0.0), full.cdf_samples(RA_MAXPOW, 16));
    let none = at(1.0);
    let direct = full.cdf_samples(MMIMO, 0);
    assert_eq!(none.len(), direct.len());
    for (a, b) in none.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    for p in pruned.pruning.iter().filter(|p| p.system == RA_MAXPOW) {
        assert!((p.fraction_removed - (16 - p.active) as f64 / 16.0).abs() < 1e-12);
    }
}

#[test]
fn maxmin_never_falls_below_full_gain() {
    let mut c = tiny("desk-fig3");
    c.blocks_per_drop = 1;
    let r = experiments::run(&c).unwrap();
    let (mm, mp) = (r.edge_samples(RA_MAXMIN), r.edge_samples(RA_MAXPOW));
    assert_eq!(mm.len(), c.drops);
    for (a, b) in mm.iter().zip(&mp) {
        assert!(*a >= b - 1e-6, "{a} < {b}");
    }
    for e in r.edge.iter().filter(|e| e.system == RA_MAXMIN) {
        assert!(e.block == 0 && e.drop < c.drops);
    }
}

#[test]
fn energy_policies_never_exceed_full_gain_consumption() {
    let mut c = tiny("desk-fig4");
    c.blocks_per_drop = 6;
    c.window = 3;
    let r = experiments::run(&c).unwrap();
    assert_eq!(r.setups.len(), c.drops * POLICIES.len());
    for setup in 0..c.drops {
        let rows: Vec<_> = r.setups.iter().filter(|s| s.setup == setup).collect();
        let maxpow = rows.iter().find(|s| s.policy == "MaxPow").unwrap().power_w;
        for s in &rows {
            assert!(s.power_w <= maxpow + 1e-9, "{} uses {} W > {maxpow} W", s.policy, s.power_w);
        }
    }
    assert_eq!(r.summary.len(), POLICIES.len());
}

#[test]
fn reruns_write_identical_files() {
    let c = tiny("desk-fig1");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        experiments::emit_csv(&experiments::run(&c).unwrap(), dir.path()).unwrap();
    }
    assert_eq!(fs::read(a.path().join("results.csv")).unwrap(), fs::read(b.path().join("results.csv")).unwrap());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let mut c = tiny("desk-fig4");
    c.blocks_per_drop = 6;
    c.window = 3;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = pool.install(|| experiments::run(&c).unwrap());
    let parallel = experiments::run(&c).unwrap();
    assert_eq!(serial.setups, parallel.setups);
}

#[test]
fn manifest_round_trips_through_the_loader() {
    let mut c = tiny("desk-fig1");
    c.set("seed=99").unwrap();
    let r = experiments::run(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = experiments::emit_csv(&r, dir.path()).unwrap();
    let path = experiments::emit_manifest(&r, &c, &files, dir.path()).unwrap();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(manifest.seed, 99);
    assert_eq!(manifest.files, vec!["results.csv".to_string()]);
    assert!(manifest.stage_seconds.contains_key("total"));
    let back = ExperimentConfig::from_path(&path).unwrap();
    assert_eq!(back, c);
    let again = experiments::run(&back).unwrap();
    assert_eq!(again.cdf, r.cdf);
}
