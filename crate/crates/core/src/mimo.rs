//! Composite channels, colored-noise covariances and LMMSE SINRs.
//!
//! With repeater gains `alpha`, UE k reaches the BS through
//! `z_k = sum_l alpha_l h_{l,k} g_l + h_bar_k`. Its post-combining SINR is
//! `rho z_k^H C_k^{-1} z_k` where `C_k` collects the other UEs, the amplified
//! repeater noise and the BS noise. Setting every gain to zero gives the
//! co-located massive MIMO baseline; there is no separate code path for it.

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelRealization, LinkClass};
use crate::scenario::{grid_positions, Point3, ScenarioConfig};
use crate::{Error, Result};

/// Repeater gains `alpha_1..alpha_L`. The direct path's fixed unit entry is
/// appended only by [`AmplificationVector::stacked`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationVector(Vec<f64>);

impl AmplificationVector {
    pub fn new(gains: Vec<f64>) -> Result<Self> {
        if gains.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Config("amplification gains must be finite and nonnegative".into()));
        }
        Ok(Self(gains))
    }

    pub fn zeros(l: usize) -> Self {
        Self(vec![0.0; l])
    }

    /// `[alpha; 1]`.
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len() + 1, self.0.iter().copied().chain(std::iter::once(1.0)))
    }

    pub fn within(&self, upper: &[f64], tol: f64) -> bool {
        self.0.len() == upper.len() && self.0.iter().zip(upper).all(|(a, u)| *a >= -tol && *a <= u + tol)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for AmplificationVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Composite channels in both representations.
#[derive(Debug, Clone)]
pub struct CompositeChannel {
    /// M x K, column k is `z_k`.
    pub z: DMatrix<Complex64>,
    /// Per UE, the M x (L+1) matrix `[h_{1,k} g_1, ..., h_{L,k} g_L, h_bar_k]`.
    pub stacked: Vec<DMatrix<Complex64>>,
}

fn check_gains(real: &ChannelRealization, alpha: &[f64]) -> Result<()> {
    if alpha.len() != real.num_repeaters() {
        return Err(Error::Dimension(format!(
            "{} gains for {} repeaters",
            alpha.len(),
            real.num_repeaters()
        )));
    }
    if !real.is_finite() || alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// `H~_k = [h_{1,k} g_1, ..., h_{L,k} g_L, h_bar_k]`.
pub fn stack_h(real: &ChannelRealization, k: usize) -> DMatrix<Complex64> {
    let (m, l) = (real.num_antennas(), real.num_repeaters());
    let mut out = DMatrix::zeros(m, l + 1);
    for j in 0..l {
        out.set_column(j, &(real.g.column(j) * real.h[(j, k)]));
    }
    out.set_column(l, &real.h_bar.column(k));
    out
}

/// All composite channels `z_k` as columns of an M x K matrix.
pub fn composite_channels(real: &ChannelRealization, alpha: &[f64]) -> DMatrix<Complex64> {
    // G diag(alpha) H + H_bar
    let mut scaled_h = real.h.clone();
    for (j, a) in alpha.iter().enumerate() {
        scaled_h.row_mut(j).scale_mut(*a);
    }
    &real.g * scaled_h + &real.h_bar
}

pub fn composite_channel(real: &ChannelRealization, alpha: &[f64]) -> Result<CompositeChannel> {
    check_gains(real, alpha)?;
    Ok(CompositeChannel {
        z: composite_channels(real, alpha),
        stacked: (0..real.num_ues()).map(|k| stack_h(real, k)).collect(),
    })
}

/// `sum_l alpha_l^2 sigma_r^2 g_l g_l^H + sigma_BS^2 I`, shared by every UE.
pub fn noise_floor_covariance(real: &ChannelRealization, alpha: &[f64]) -> DMatrix<Complex64> {
    let m = real.num_antennas();
    let mut weighted = real.g.clone();
    for (j, a) in alpha.iter().enumerate() {
        weighted.column_mut(j).scale_mut(a * real.noise_rep.sqrt());
    }
    let mut c = &weighted * weighted.adjoint();
    for i in 0..m {
        c[(i, i)] += Complex64::new(real.noise_bs, 0.0);
    }
    c
}

fn covariance_for(
    floor: &DMatrix<Complex64>,
    z: &DMatrix<Complex64>,
    rho: f64,
    k: usize,
) -> DMatrix<Complex64> {
    let mut c = floor.clone();
    for i in (0..z.ncols()).filter(|i| *i != k) {
        let zi = z.column(i);
        c.ger(Complex64::new(rho, 0.0), &zi, &zi.conjugate(), Complex64::new(1.0, 0.0));
    }
    c
}

/// Colored-noise covariance `C_k` seen by UE k (its own signal excluded).
pub fn colored_noise_cov(real: &ChannelRealization, alpha: &[f64], k: usize) -> Result<DMatrix<Complex64>> {
    check_gains(real, alpha)?;
    let z = composite_channels(real, alpha);
    Ok(covariance_for(&noise_floor_covariance(real, alpha), &z, real.uplink_power, k))
}

pub(crate) fn factorize(c: DMatrix<Complex64>) -> Result<Cholesky<Complex64, Dyn>> {
    Cholesky::new(c).ok_or(Error::Factorization)
}

/// Unnormalized LMMSE combiner `w_k = C_k^{-1} z_k`.
pub fn lmmse_combiner(real: &ChannelRealization, alpha: &[f64], k: usize) -> Result<DVector<Complex64>> {
    check_gains(real, alpha)?;
    let z = composite_channels(real, alpha);
    let c = covariance_for(&noise_floor_covariance(real, alpha), &z, real.uplink_power, k);
    Ok(factorize(c)?.solve(&z.column(k).into_owned()))
}

/// `rho z^H C^{-1} z` through a Cholesky solve.
fn quadratic_sinr(c: DMatrix<Complex64>, z: DVector<Complex64>, rho: f64) -> Result<f64> {
    let w = factorize(c)?.solve(&z);
    Ok(rho * z.dotc(&w).re)
}

/// LMMSE SINR of UE k.
pub fn lmmse_sinr(real: &ChannelRealization, alpha: &[f64], k: usize) -> Result<f64> {
    check_gains(real, alpha)?;
    let z = composite_channels(real, alpha);
    let c = covariance_for(&noise_floor_covariance(real, alpha), &z, real.uplink_power, k);
    quadratic_sinr(c, z.column(k).into_owned(), real.uplink_power)
}

/// LMMSE SINRs of every UE.
pub fn lmmse_sinrs(real: &ChannelRealization, alpha: &[f64]) -> Result<Vec<f64>> {
    check_gains(real, alpha)?;
    let z = composite_channels(real, alpha);
    let floor = noise_floor_covariance(real, alpha);
    (0..real.num_ues())
        .map(|k| {
            let c = covariance_for(&floor, &z, real.uplink_power, k);
            quadratic_sinr(c, z.column(k).into_owned(), real.uplink_power)
        })
        .collect()
}

/// `c_l = sqrt(rho ||h_l||^2 + sigma_r^2)`, the amplifier input amplitude.
pub fn amplifier_input(real: &ChannelRealization, l: usize) -> f64 {
    let row_energy: f64 = real.h.row(l).iter().map(|x| x.norm_sqr()).sum();
    (real.uplink_power * row_energy + real.noise_rep).sqrt()
}

/// `P_out,l = alpha_l^2 c_l^2`.
pub fn repeater_output_power(real: &ChannelRealization, alpha: &[f64], l: usize) -> f64 {
    let c = amplifier_input(real, l);
    alpha[l] * alpha[l] * c * c
}

/// Largest gain allowed by both the stability cap and the output power limit.
pub fn max_feasible_alpha(real: &ChannelRealization, alpha_max: f64, p_max: f64, l: usize) -> f64 {
    alpha_max.min(p_max.sqrt() / amplifier_input(real, l))
}

/// Per-repeater upper bounds; repeaters outside `active` get 0.
pub fn gain_upper_bounds(
    real: &ChannelRealization,
    alpha_max: f64,
    p_max: f64,
    active: Option<&[bool]>,
) -> Vec<f64> {
    (0..real.num_repeaters())
        .map(|l| match active {
            Some(mask) if !mask[l] => 0.0,
            _ => max_feasible_alpha(real, alpha_max, p_max, l),
        })
        .collect()
}

/// Access points of the cell-free baseline: the repeater grid recipe with
/// `M` single-antenna APs at repeater height.
pub fn cellfree_ap_grid(config: &ScenarioConfig) -> Result<Vec<Point3>> {
    Ok(grid_positions(config.num_bs_antennas, config.area_side_m)?
        .into_iter()
        .map(|p| Point3::new(p.x, p.y, config.repeater_height_m))
        .collect())
}

/// Large-scale gains of the cell-free baseline, M x K.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFreeLargeScale {
    pub beta: DMatrix<f64>,
    pub los: DMatrix<bool>,
}

pub fn draw_cellfree_large_scale<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    aps: &[Point3],
    ues: &[Point3],
    rng: &mut R,
) -> Result<CellFreeLargeScale> {
    if aps.len() != config.num_bs_antennas {
        return Err(Error::ApCount { expected: config.num_bs_antennas, got: aps.len() });
    }
    let mut beta = DMatrix::zeros(aps.len(), ues.len());
    let mut los = DMatrix::from_element(aps.len(), ues.len(), false);
    for (k, ue) in ues.iter().enumerate() {
        for (a, ap) in aps.iter().enumerate() {
            let d = ue.distance_2d(ap);
            let is_los = rng.random::<f64>() < channel::los_probability(d, LinkClass::UeToAccessPoint, ue.z);
            let std = if is_los { 4.0 } else { 6.0 };
            let shadow: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            let loss = (channel::uma_pathloss(d, ap.z, ue.z, config.carrier_hz, is_los) + std * shadow).max(0.0);
            beta[(a, k)] = crate::db_to_linear(-loss);
            los[(a, k)] = is_los;
        }
    }
    Ok(CellFreeLargeScale { beta, los })
}

/// One block of UE-to-AP channels (M x K), Rician on LOS links.
pub fn draw_cellfree_channels<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    ls: &CellFreeLargeScale,
    rng: &mut R,
) -> DMatrix<Complex64> {
    let unit = DVector::from_element(1, Complex64::new(1.0, 0.0));
    let kappa = config.k_factor();
    let (m, k) = ls.beta.shape();
    let mut out = DMatrix::zeros(m, k);
    for ue in 0..k {
        for ap in 0..m {
            let kf = if ls.los[(ap, ue)] { kappa } else { 0.0 };
            out[(ap, ue)] = channel::rician_draw(ls.beta[(ap, ue)], kf, &unit, rng)[0];
        }
    }
    out
}

/// Centralized MMSE SINRs for channels `H` (antennas x UEs) with white noise.
pub fn mmse_sinrs(channels: &DMatrix<Complex64>, rho: f64, noise: f64) -> Result<Vec<f64>> {
    if channels.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite);
    }
    let m = channels.nrows();
    let floor = DMatrix::from_diagonal_element(m, m, Complex64::new(noise, 0.0));
    (0..channels.ncols())
        .map(|k| {
            let c = covariance_for(&floor, channels, rho, k);
            quadratic_sinr(c, channels.column(k).into_owned(), rho)
        })
        .collect()
}

/// One-shot cell-free evaluation: draws large-scale and small-scale channels
/// for the given APs and UEs and returns per-UE SINRs.
pub fn cfmmimo_sinr<R: Rng + ?Sized>(
    aps: &[Point3],
    ues: &[Point3],
    config: &ScenarioConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let ls = draw_cellfree_large_scale(config, aps, ues, rng)?;
    let h = draw_cellfree_channels(config, &ls, rng);
    mmse_sinrs(&h, config.uplink_power_w, config.noise_power_w())
}


#[cfg(test)]
mod tests {
    use super::test_support::random_realization;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn stacking() {
        let r = random_realization(4, 3, 2, 1);
        let s = stack_h(&r, 1);
        assert_eq!(s.shape(), (4, 4));
        let e = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0]).map(|x| c(x, 0.0));
        assert_eq!(&s * e, r.h_bar.column(1).into_owned());
        let r0 = random_realization(4, 0, 2, 1);
        assert_eq!(stack_h(&r0, 0), r0.h_bar.column(0).into_owned());
        let mut rz = r.clone();
        rz.h.fill(c(0.0, 0.0));
        let sz = stack_h(&rz, 0);
        assert!(sz.columns(0, 3).iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn composite_representations_agree() {
        let r = random_realization(6, 4, 3, 2);
        let alpha = AmplificationVector::new(vec![0.3, 1.7, 0.0, 2.2]).unwrap();
        let cc = composite_channel(&r, &alpha).unwrap();
        let stacked = alpha.stacked().map(|x| c(x, 0.0));
        for k in 0..3 {
            let via_stack = &cc.stacked[k] * &stacked;
            let diff = (&via_stack - cc.z.column(k)).norm();
            assert!(diff <= 1e-12 * via_stack.norm());
        }
        assert_eq!(composite_channels(&r, &[0.0; 4]), r.h_bar);

        let mut single = random_realization(3, 1, 1, 3);
        single.h_bar.fill(c(0.0, 0.0));
        let z = composite_channels(&single, &[1.0]);
        assert!((z.column(0) - single.g.column(0) * single.h[(0, 0)]).norm() < 1e-15);
    }

    #[test]
    fn covariance_cases() {
        let r = random_realization(3, 2, 1, 4);
        let cov = colored_noise_cov(&r, &[0.0, 0.0], 0).unwrap();
        assert!((cov - DMatrix::from_diagonal_element(3, 3, c(0.5, 0.0))).norm() < 1e-15);

        let r = random_realization(3, 2, 2, 5);
        let cov = colored_noise_cov(&r, &[0.0, 0.0], 0).unwrap();
        let h2 = r.h_bar.column(1);
        let expected = h2 * h2.adjoint() * c(1.5, 0.0) + DMatrix::from_diagonal_element(3, 3, c(0.5, 0.0));
        assert!((cov - expected).norm() < 1e-14);
    }

    #[test]
    fn covariance_trace_identity() {
        let r = random_realization(5, 3, 3, 6);
        let alpha = [0.4, 1.1, 0.9];
        let z = composite_channels(&r, &alpha);
        for k in 0..3 {
            let cov = colored_noise_cov(&r, &alpha, k).unwrap();
            let mut expected = 5.0 * r.noise_bs;
            for i in (0..3).filter(|i| *i != k) {
                expected += r.uplink_power * z.column(i).norm_squared();
            }
            for l in 0..3 {
                expected += r.noise_rep * alpha[l] * alpha[l] * r.g.column(l).norm_squared();
            }
            assert!(rel(cov.trace().re, expected) < 1e-12);
            assert!(cov.trace().im.abs() < 1e-12);
            // Hermitian and positive definite above the BS noise floor.
            assert!((&cov - cov.adjoint()).norm() < 1e-13);
            let eig = cov.clone().symmetric_eigenvalues();
            assert!(eig.min() >= r.noise_bs - 1e-10);
        }
    }

    #[test]
    fn single_user_white_noise() {
        let r = random_realization(4, 2, 1, 7);
        let s = lmmse_sinr(&r, &[0.0, 0.0], 0).unwrap();
        let expected = r.uplink_power * r.h_bar.column(0).norm_squared() / r.noise_bs;
        assert!(rel(s, expected) < 1e-12);
    }

    #[test]
    fn scalar_one_repeater() {
        let r = ChannelRealization {
            h: DMatrix::from_element(1, 1, c(0.7, -0.2)),
            g: DMatrix::from_element(1, 1, c(-0.3, 0.5)),
            h_bar: DMatrix::from_element(1, 1, c(0.1, 0.05)),
            noise_rep: 0.2,
            noise_bs: 0.5,
            uplink_power: 1.5,
        };
        let a = 1.3;
        let (h, g, hb) = (c(0.7, -0.2), c(-0.3, 0.5), c(0.1, 0.05));
        let expected = 1.5 * (h * g * a + hb).norm_sqr() / (a * a * g.norm_sqr() * 0.2 + 0.5);
        assert!(rel(lmmse_sinr(&r, &[a], 0).unwrap(), expected) < 1e-12);
    }

    #[test]
    fn more_interference_power_never_helps() {
        let r = random_realization(3, 2, 3, 8);
        let alpha = [0.8, 1.2];
        let z = composite_channels(&r, &alpha);
        let floor = noise_floor_covariance(&r, &alpha);
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let boost = 1.0 + step as f64 * 0.5;
            // Scale the power of interferer 2 only.
            let mut c_k = covariance_for(&floor, &z.columns(0, 2).into_owned(), r.uplink_power, 0);
            let z2 = z.column(2);
            c_k.ger(c(r.uplink_power * boost, 0.0), &z2, &z2.conjugate(), c(1.0, 0.0));
            let s = quadratic_sinr(c_k, z.column(0).into_owned(), r.uplink_power).unwrap();
            assert!(s <= prev * (1.0 + 1e-12));
            prev = s;
        }
    }

    #[test]
    fn combiner_consistency() {
        for seed in 0..3 {
            let r = random_realization(5, 3, 3, 10 + seed);
            let alpha = [0.5, 0.0, 1.4];
            let z = composite_channels(&r, &alpha);
            for k in 0..3 {
                let w = lmmse_combiner(&r, &alpha, k).unwrap();
                let via_w = r.uplink_power * w.dotc(&z.column(k)).re;
                assert!(rel(lmmse_sinr(&r, &alpha, k).unwrap(), via_w) < 1e-10);
            }
        }
        let r = random_realization(4, 1, 1, 20);
        let w = lmmse_combiner(&r, &[0.0], 0).unwrap();
        // Proportional to h_bar with factor 1/sigma^2.
        assert!((w - r.h_bar.column(0) / c(r.noise_bs, 0.0)).norm() < 1e-14);
        let mut zero = r.clone();
        zero.h_bar.fill(c(0.0, 0.0));
        assert!(lmmse_combiner(&zero, &[0.0], 0).unwrap().norm() == 0.0);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut r = random_realization(3, 1, 2, 21);
        r.g[(0, 0)] = c(f64::NAN, 0.0);
        assert!(matches!(lmmse_sinr(&r, &[1.0], 0), Err(Error::NonFinite)));
    }

    #[test]
    fn deactivation_equals_removal() {
        for seed in 0..10 {
            let r = random_realization(6, 4, 3, 30 + seed);
            let mut alpha = vec![0.9, 1.3, 0.4, 2.0];
            let off = (seed % 4) as usize;
            alpha[off] = 0.0;
            let keep: Vec<usize> = (0..4).filter(|l| *l != off).collect();
            let reduced = r.select_repeaters(&keep);
            let ra: Vec<f64> = keep.iter().map(|l| alpha[*l]).collect();
            let a = lmmse_sinrs(&r, &alpha).unwrap();
            let b = lmmse_sinrs(&reduced, &ra).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!(rel(*x, *y) <= 1e-12);
            }
        }
    }

    #[test]
    fn output_power() {
        let r = random_realization(3, 2, 3, 40);
        assert_eq!(repeater_output_power(&r, &[0.0, 1.0], 0), 0.0);
        let cl = amplifier_input(&r, 1);
        assert!(rel(repeater_output_power(&r, &[0.0, 1.7], 1), cl * cl * 1.7 * 1.7) < 1e-14);
        let energy: f64 = r.h.row(1).iter().map(|x| x.norm_sqr()).sum();
        assert!(rel(cl * cl, r.uplink_power * energy + r.noise_rep) < 1e-14);
        let r0 = random_realization(3, 2, 0, 41);
        assert!(rel(repeater_output_power(&r0, &[2.0, 0.0], 0), 4.0 * r0.noise_rep) < 1e-14);
    }

    #[test]
    fn maxpow_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let mut r = random_realization(2, 3, 2, rng.random());
            let scale: f64 = 10f64.powf(rng.random_range(-8.0..4.0));
            r.h = r.h.map(|x| x * scale);
            r.noise_rep = 10f64.powf(rng.random_range(-14.0..-1.0));
            let alpha_max = 10f64.powf(rng.random_range(1.0..4.0));
            let p_max = 6.3;
            for l in 0..3 {
                let a = max_feasible_alpha(&r, alpha_max, p_max, l);
                let mut alpha = vec![0.0; 3];
                alpha[l] = a;
                assert!(a <= alpha_max);
                assert!(repeater_output_power(&r, &alpha, l) <= p_max * (1.0 + 1e-12));
            }
        }
        // Tiny input: the stability cap binds.
        let mut r = random_realization(2, 1, 1, 43);
        r.h.fill(c(0.0, 0.0));
        r.noise_rep = 1e-20;
        assert_eq!(max_feasible_alpha(&r, 100.0, 6.3, 0), 100.0);
        // Huge input: the power limit binds.
        r.h.fill(c(1e3, 0.0));
        let a = max_feasible_alpha(&r, 100.0, 6.3, 0);
        assert!(rel(a, 6.3f64.sqrt() / amplifier_input(&r, 0)) < 1e-15);
        assert_eq!(gain_upper_bounds(&r, 100.0, 6.3, Some(&[false])), vec![0.0]);
    }

    #[test]
    fn cellfree_matches_colocated_formula() {
        let r = random_realization(6, 0, 3, 50);
        let cf = mmse_sinrs(&r.h_bar, r.uplink_power, r.noise_bs).unwrap();
        let ra = lmmse_sinrs(&r, &[]).unwrap();
        for (a, b) in cf.iter().zip(&ra) {
            assert!(rel(*a, *b) < 1e-12);
        }
        let one = random_realization(6, 0, 1, 51);
        let s = mmse_sinrs(&one.h_bar, 2.0, 0.1).unwrap()[0];
        assert!(rel(s, 2.0 * one.h_bar.column(0).norm_squared() / 0.1) < 1e-12);
    }

    #[test]
    fn cellfree_ap_count_checked() {
        let config = ScenarioConfig { num_bs_antennas: 16, ..Default::default() };
        let aps = cellfree_ap_grid(&config).unwrap();
        assert_eq!(aps.len(), 16);
        let ues = vec![Point3::new(100.0, 100.0, 1.5)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(cfmmimo_sinr(&aps, &ues, &config, &mut rng).unwrap()[0] > 0.0);
        let wrong = ScenarioConfig { num_bs_antennas: 9, ..config };
        assert!(matches!(cfmmimo_sinr(&aps, &ues, &wrong, &mut rng), Err(Error::ApCount { expected: 9, got: 16 })));
    }
}
