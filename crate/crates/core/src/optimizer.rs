//! Repeater amplification control by the convex-concave procedure.
//!
//! The SINR quadratic form `z_k^H C_k^{-1} z_k` is jointly convex in
//! `(z_k, C_k)`, so its first-order expansion at a point gives a global lower
//! bound
//!
//! ```text
//! z^H C^{-1} z >= 2 Re(b^H z) - b^H C b,   b = C0^{-1} z0.
//! ```
//!
//! With `z_k = H~_k [alpha; 1]` and `C_k` quadratic in `alpha`, the bound is a
//! concave quadratic in the real gains. Maximizing its minimum over UEs (or
//! minimizing `sum_l c_l alpha_l` subject to slackened thresholds) is a
//! second-order-cone program; iterating linearize/solve gives the max-min and
//! power-minimization procedures.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::conic::{AffineRow, SocConstraint, SocpProblem, SolveStatus, SolverSettings};
use crate::mimo::{self, composite_channels, noise_floor_covariance};
use crate::scenario::ScenarioConfig;
use crate::{Error, Result};

/// Expansion point of the lower bound for one UE: `b_k = C_k^{-1} z_k`;
/// `D_k = b_k b_k^H` is kept implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationPoint {
    pub b: DVector<Complex64>,
}

impl LinearizationPoint {
    pub fn d_matrix(&self) -> DMatrix<Complex64> {
        &self.b * self.b.adjoint()
    }
}

/// Expansion points of every UE at gains `alpha0`.
pub fn linearize(real: &ChannelRealization, alpha0: &[f64]) -> Result<Vec<LinearizationPoint>> {
    let z = composite_channels(real, alpha0);
    let floor = noise_floor_covariance(real, alpha0);
    (0..real.num_ues())
        .map(|k| {
            let c = mimo::colored_noise_cov(real, alpha0, k)?;
            debug_assert!((&c - &floor).norm().is_finite());
            let b = mimo::factorize(c)?.solve(&z.column(k).into_owned());
            Ok(LinearizationPoint { b })
        })
        .collect()
}

/// `z_k^H C_k^{-1} z_k`, i.e. the SINR divided by the uplink power.
pub fn sinr_form(real: &ChannelRealization, alpha: &[f64], k: usize) -> Result<f64> {
    Ok(mimo::lmmse_sinr(real, alpha, k)? / real.uplink_power)
}

/// Lower bound `2 Re(b^H z_k(alpha)) - b^H C_k(alpha) b`, evaluated on the
/// complex channels directly.
pub fn surrogate(real: &ChannelRealization, point: &LinearizationPoint, alpha: &[f64], k: usize) -> Result<f64> {
    let z = composite_channels(real, alpha);
    let c = mimo::colored_noise_cov(real, alpha, k)?;
    let b = &point.b;
    Ok(2.0 * b.dotc(&z.column(k)).re - b.dotc(&(c * b)).re)
}

/// Real coefficients of the convexified SINR constraint of one UE:
///
/// `lhs(alpha) = r^T a - rho sum_{i != k} a^T Q_i a - sum_l g~_l alpha_l^2 - d`
///
/// with `a = [alpha; 1]` and `Q_i = Re(H~_i^H D_k H~_i)`. Since `D_k` has
/// rank one, `Q_i = Re(v_i v_i^H)` with `v_i = H~_i^H b_k`, and only the `v_i`
/// are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintCoeffs {
    pub ue: usize,
    pub r: DVector<f64>,
    /// `(i, v_i)` for every interferer `i != k`.
    pub interference: Vec<(usize, DVector<Complex64>)>,
    pub g_tilde: DVector<f64>,
    pub d: f64,
    pub rho: f64,
}

/// The constraint after eliminating the fixed unit entry:
/// `lhs(alpha) = linear^T alpha - alpha^T quad alpha + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedConstraint {
    pub quad: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
}

impl ReducedConstraint {
    pub fn eval(&self, alpha: &[f64]) -> f64 {
        let a = DVector::from_column_slice(alpha);
        self.linear.dot(&a) - a.dot(&(&self.quad * &a)) + self.constant
    }
}

impl ConstraintCoeffs {
    pub fn num_repeaters(&self) -> usize {
        self.g_tilde.len()
    }

    /// `Q_{i,k}` for the `idx`-th interferer, (L+1) x (L+1).
    pub fn q_matrix(&self, idx: usize) -> DMatrix<f64> {
        let v = &self.interference[idx].1;
        let (a, c) = (v.map(|x| x.re), v.map(|x| x.im));
        &a * a.transpose() + &c * c.transpose()
    }

    pub fn lhs(&self, alpha: &[f64]) -> f64 {
        let l = self.num_repeaters();
        let dot = |v: &DVector<f64>| v.iter().take(l).zip(alpha).map(|(x, a)| x * a).sum::<f64>() + v[l];
        let interference: f64 = self
            .interference
            .iter()
            .map(|(_, v)| {
                let re = dot(&v.map(|x| x.re));
                let im = dot(&v.map(|x| x.im));
                re * re + im * im
            })
            .sum();
        let noise: f64 = self.g_tilde.iter().zip(alpha).map(|(g, a)| g * a * a).sum();
        dot(&self.r) - self.rho * interference - noise - self.d
    }

    pub fn reduce(&self) -> ReducedConstraint {
        let l = self.num_repeaters();
        let mut quad = DMatrix::from_diagonal(&self.g_tilde);
        let mut linear = self.r.rows(0, l).into_owned();
        let mut constant = self.r[l] - self.d;
        for idx in 0..self.interference.len() {
            let q = self.q_matrix(idx);
            quad += q.view((0, 0), (l, l)) * self.rho;
            linear -= q.view((0, l), (l, 1)) * (2.0 * self.rho);
            constant -= self.rho * q[(l, l)];
        }
        ReducedConstraint { quad, linear, constant }
    }
}

/// Assembles the convexified constraint of UE `k` around `points`.
pub fn assemble_coeffs(real: &ChannelRealization, points: &[LinearizationPoint], k: usize) -> ConstraintCoeffs {
    let (l, kk) = (real.num_repeaters(), real.num_ues());
    let b = &points[k].b;
    // g_l^H b for every repeater.
    let gb = real.g.ad_mul(b);
    let project = |i: usize| {
        // H~_i^H b = [conj(h_{l,i}) g_l^H b ; h_bar_i^H b]
        DVector::from_fn(l + 1, |j, _| {
            if j < l {
                real.h[(j, i)].conj() * gb[j]
            } else {
                real.h_bar.column(i).dotc(b)
            }
        })
    };
    let own = project(k);
    ConstraintCoeffs {
        ue: k,
        r: own.map(|x| 2.0 * x.re),
        interference: (0..kk).filter(|i| *i != k).map(|i| (i, project(i))).collect(),
        g_tilde: gb.map(|x| real.noise_rep * x.norm_sqr()),
        d: real.noise_bs * b.norm_squared(),
        rho: real.uplink_power,
    }
}

pub fn assemble_all(real: &ChannelRealization, points: &[LinearizationPoint]) -> Vec<ConstraintCoeffs> {
    (0..real.num_ues()).map(|k| assemble_coeffs(real, points, k)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub alpha: Vec<f64>,
    /// Epigraph variable of the max-min subproblem.
    pub t: Option<f64>,
    /// Feasibility slacks of the power-minimization subproblem.
    pub slacks: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub relative_gap: f64,
}

/// One UE's constraint written as `||w(x)||^2 <= s(x)` over the scaled free
/// variables `x_j = alpha_j / upper_j`.
struct ScaledConstraint {
    s: AffineRow,
    w: Vec<AffineRow>,
}

impl ScaledConstraint {
    fn new(coeffs: &ConstraintCoeffs, upper: &[f64], free: &[usize], nvars: usize) -> Self {
        let l = coeffs.num_repeaters();
        let sqrt_rho = coeffs.rho.sqrt();
        let mut s = vec![0.0; nvars];
        for (j, &f) in free.iter().enumerate() {
            s[j] = coeffs.r[f] * upper[f];
        }
        let s = AffineRow::new(s, coeffs.r[l] - coeffs.d);
        let mut w = Vec::with_capacity(2 * coeffs.interference.len() + free.len());
        for (_, v) in &coeffs.interference {
            for part in [v.map(|x| x.re), v.map(|x| x.im)] {
                let mut row = vec![0.0; nvars];
                for (j, &f) in free.iter().enumerate() {
                    row[j] = sqrt_rho * part[f] * upper[f];
                }
                w.push(AffineRow::new(row, sqrt_rho * part[l]));
            }
        }
        for (j, &f) in free.iter().enumerate() {
            if coeffs.g_tilde[f] > 0.0 {
                let mut row = vec![0.0; nvars];
                row[j] = coeffs.g_tilde[f].sqrt() * upper[f];
                w.push(AffineRow::new(row, 0.0));
            }
        }
        Self { s, w }
    }

    fn w_energy(&self, x: &[f64]) -> f64 {
        self.w.iter().map(|r| r.eval(x).powi(2)).sum()
    }

    /// Magnitude of the constraint terms over the box corners `0` and `1`.
    fn scale(&self, nfree: usize, extra: f64) -> f64 {
        let mut x = vec![0.0; self.s.coeffs.len()];
        let at0 = self.s.eval(&x).abs().max(self.w_energy(&x));
        x[..nfree].fill(1.0);
        let at1 = self.s.eval(&x).abs().max(self.w_energy(&x));
        at0.max(at1).max(extra.abs()).max(f64::MIN_POSITIVE)
    }

    /// Rotated-cone encoding of `||w||^2 <= s + shift` after dividing by
    /// `scale`: `||(2w, 1 - s')|| <= 1 + s'`. `shift` is affine in the
    /// variables too.
    fn into_cone(self, shift: AffineRow, scale: f64) -> SocConstraint {
        let n = self.s.coeffs.len();
        let sp: Vec<f64> = (0..n).map(|j| (self.s.coeffs[j] + shift.coeffs[j]) / scale).collect();
        let sp0 = (self.s.constant + shift.constant) / scale;
        let head = AffineRow::new(sp.clone(), 1.0 + sp0);
        let mut tail = vec![AffineRow::new(sp.iter().map(|v| -v).collect(), 1.0 - sp0)];
        let ws = 2.0 / scale.sqrt();
        tail.extend(
            self.w
                .into_iter()
                .map(|r| AffineRow::new(r.coeffs.iter().map(|c| c * ws).collect(), r.constant * ws)),
        );
        SocConstraint { head, tail }
    }
}

fn free_indices(upper: &[f64]) -> Vec<usize> {
    (0..upper.len()).filter(|l| upper[*l] > 0.0).collect()
}

fn box_rows(nfree: usize, nvars: usize) -> Vec<AffineRow> {
    let mut rows = Vec::with_capacity(2 * nfree);
    for j in 0..nfree {
        let mut lo = vec![0.0; nvars];
        lo[j] = 1.0;
        rows.push(AffineRow::new(lo, 0.0));
        let mut hi = vec![0.0; nvars];
        hi[j] = -1.0;
        rows.push(AffineRow::new(hi, 1.0));
    }
    rows
}

fn unscale(x: &[f64], upper: &[f64], free: &[usize]) -> Vec<f64> {
    let mut alpha = vec![0.0; upper.len()];
    for (j, &f) in free.iter().enumerate() {
        alpha[f] = x[j].clamp(0.0, 1.0) * upper[f];
    }
    alpha
}

/// `maximize t  s.t. lhs_k(alpha) >= t for all k, 0 <= alpha <= upper`.
pub fn solve_maxmin_subproblem(
    coeffs: &[ConstraintCoeffs],
    upper: &[f64],
    settings: &SolverSettings,
) -> SubproblemSolution {
    let free = free_indices(upper);
    let nf = free.len();
    let nvars = nf + 1;
    let scaled: Vec<ScaledConstraint> = coeffs.iter().map(|c| ScaledConstraint::new(c, upper, &free, nvars)).collect();
    let scales: Vec<f64> = scaled.iter().map(|c| c.scale(nf, 0.0)).collect();
    // Unit of the epigraph variable: smallest constraint value at the corners.
    let t_unit = {
        let mut corner = vec![0.0; nvars];
        corner[..nf].fill(1.0);
        let vals = coeffs.iter().map(|c| c.lhs(&unscale(&corner, upper, &free)).abs());
        let m = vals.fold(f64::INFINITY, f64::min);
        let floor = scales.iter().copied().fold(0.0, f64::max) * 1e-9;
        if m.is_finite() { m.max(floor).max(f64::MIN_POSITIVE) } else { 1.0 }
    };

    let cones = scaled
        .into_iter()
        .zip(&scales)
        .map(|(c, &scale)| {
            let mut shift = vec![0.0; nvars];
            shift[nf] = -t_unit;
            c.into_cone(AffineRow::new(shift, 0.0), scale)
        })
        .collect();
    let mut objective = vec![0.0; nvars];
    objective[nf] = -1.0;
    let problem = SocpProblem { objective, inequalities: box_rows(nf, nvars), cones };
    let sol = problem.solve(settings);
    let alpha = unscale(&sol.x, upper, &free);
    let t = coeffs.iter().map(|c| c.lhs(&alpha)).fold(f64::INFINITY, f64::min);
    SubproblemSolution {
        alpha,
        t: Some(t),
        slacks: Vec::new(),
        objective: t,
        status: sol.status,
        relative_gap: sol.relative_gap(),
    }
}

/// `minimize sum_l cost_l alpha_l + lambda sum_k f_k`
/// `s.t. lhs_k(alpha) + f_k >= threshold_k, f >= 0, 0 <= alpha <= upper`.
///
/// `thresholds` are in the units of `lhs`, i.e. SINR targets divided by the
/// uplink power.
pub fn solve_minpow_subproblem(
    coeffs: &[ConstraintCoeffs],
    upper: &[f64],
    costs: &[f64],
    thresholds: &[f64],
    lambda: f64,
    settings: &SolverSettings,
) -> SubproblemSolution {
    let free = free_indices(upper);
    let (nf, nk) = (free.len(), coeffs.len());
    let nvars = nf + nk;
    let scaled: Vec<ScaledConstraint> = coeffs.iter().map(|c| ScaledConstraint::new(c, upper, &free, nvars)).collect();
    let scales: Vec<f64> = scaled.iter().zip(thresholds).map(|(c, th)| c.scale(nf, *th)).collect();

    // Slack unit: the largest threshold, so that slack weights stay
    // commensurate with the power cost in the objective.
    let unit = thresholds.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    let unit = if unit > 0.0 { unit } else { 1.0 };

    let mut cones = Vec::with_capacity(nk);
    for (k, (c, &scale)) in scaled.into_iter().zip(&scales).enumerate() {
        let mut shift = vec![0.0; nvars];
        shift[nf + k] = unit;
        cones.push(c.into_cone(AffineRow::new(shift, -thresholds[k]), scale));
    }
    let mut inequalities = box_rows(nf, nvars);
    for k in 0..nk {
        let mut row = vec![0.0; nvars];
        row[nf + k] = 1.0;
        inequalities.push(AffineRow::new(row, 0.0));
    }
    let mut objective = vec![0.0; nvars];
    for (j, &f) in free.iter().enumerate() {
        objective[j] = costs[f] * upper[f];
    }
    for k in 0..nk {
        objective[nf + k] = lambda * unit;
    }
    let norm = objective.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    objective.iter_mut().for_each(|v| *v /= norm);

    let problem = SocpProblem { objective, inequalities, cones };
    let sol = problem.solve(settings);
    let alpha = unscale(&sol.x, upper, &free);
    // Smallest slacks that make the returned gains feasible.
    let slacks: Vec<f64> = coeffs
        .iter()
        .zip(thresholds)
        .map(|(c, th)| (th - c.lhs(&alpha)).max(0.0))
        .collect();
    let objective = alpha.iter().zip(costs).map(|(a, c)| a * c).sum::<f64>() + lambda * slacks.iter().sum::<f64>();
    SubproblemSolution {
        alpha,
        t: None,
        slacks,
        objective,
        status: sol.status,
        relative_gap: sol.relative_gap(),
    }
}

/// `||new - old||^2 / ||old||^2`, or `||new - old||^2` when `old` is zero.
pub fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let diff: f64 = new.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum();
    let base: f64 = old.iter().map(|x| x * x).sum();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

/// Iteration controls of the convex-concave procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcpSettings {
    pub epsilon: f64,
    pub max_iter: usize,
    pub solver_max_iter: u32,
    /// Slack level below which a power-minimization result counts as feasible.
    pub slack_tolerance: f64,
    /// Slack penalty; `None` selects `10 K max_k threshold_k`.
    pub lambda: Option<f64>,
}

impl Default for CcpSettings {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_iter: 50, solver_max_iter: 100, slack_tolerance: 1e-4, lambda: None }
    }
}

impl CcpSettings {
    pub fn from_config(config: &ScenarioConfig) -> Self {
        Self {
            epsilon: config.epsilon,
            max_iter: config.ccp_max_iter,
            solver_max_iter: config.solver_max_iter,
            ..Self::default()
        }
    }

    fn solver(&self) -> SolverSettings {
        SolverSettings { max_iter: self.solver_max_iter, ..SolverSettings::default() }
    }
}

/// One row of an optimizer trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// Max-min: true minimum SINR (linear). Min-pow: `sum_l c_l alpha_l`.
    pub objective: f64,
    pub max_slack: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxMinOutcome {
    pub alpha: Vec<f64>,
    /// Minimum LMMSE SINR over UEs at `alpha` (linear).
    pub sinr_floor: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

fn min_sinr(real: &ChannelRealization, alpha: &[f64]) -> Result<f64> {
    Ok(mimo::lmmse_sinrs(real, alpha)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Max-min SINR amplification control, started from the gains `upper`.
pub fn maxmin_ccp(real: &ChannelRealization, settings: &CcpSettings, upper: &[f64]) -> Result<MaxMinOutcome> {
    maxmin_ccp_from(real, settings, upper, upper)
}

/// Max-min procedure started from an arbitrary point inside the box.
pub fn maxmin_ccp_from(
    real: &ChannelRealization,
    settings: &CcpSettings,
    upper: &[f64],
    start: &[f64],
) -> Result<MaxMinOutcome> {
    if start.len() != upper.len() {
        return Err(Error::Dimension(format!("start has {} gains, box has {}", start.len(), upper.len())));
    }
    let solver = settings.solver();
    let mut alpha: Vec<f64> = start.iter().zip(upper).map(|(a, u)| a.clamp(0.0, *u)).collect();
    let mut floor = min_sinr(real, &alpha)?;
    let mut trace = vec![TraceRow { iteration: 0, objective: floor, max_slack: 0.0, relative_change: f64::NAN }];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        let points = linearize(real, &alpha)?;
        let coeffs = assemble_all(real, &points);
        let sol = solve_maxmin_subproblem(&coeffs, upper, &solver);
        if sol.status != SolveStatus::Optimal {
            log::warn!("max-min subproblem ended with {:?} at iteration {iterations}", sol.status);
        }
        let next_floor = min_sinr(real, &sol.alpha)?;
        if sol.status == SolveStatus::NumericalError && next_floor < floor {
            break;
        }
        let change = relative_change(&sol.alpha, &alpha);
        alpha = sol.alpha;
        floor = next_floor;
        trace.push(TraceRow { iteration: iterations, objective: floor, max_slack: 0.0, relative_change: change });
        if change <= settings.epsilon {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("max-min procedure stopped after {iterations} iterations without converging");
    }
    Ok(MaxMinOutcome { alpha, sinr_floor: floor, iterations, converged, trace })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinPowOutcome {
    pub alpha: Vec<f64>,
    pub slacks: Vec<f64>,
    pub feasible: bool,
    /// `sum_l c_l alpha_l`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

/// Default slack penalty `10 K max_k threshold_k` (thresholds over rho).
pub fn default_lambda(scaled_thresholds: &[f64]) -> f64 {
    let max = scaled_thresholds.iter().copied().fold(0.0, f64::max);
    (10.0 * max * scaled_thresholds.len() as f64).max(f64::MIN_POSITIVE)
}

/// Power minimization with feasible point pursuit: `sinr_thresholds` are
/// linear per-UE SINR targets. Starts from `upper`.
pub fn minpow_fpp(
    real: &ChannelRealization,
    settings: &CcpSettings,
    upper: &[f64],
    sinr_thresholds: &[f64],
) -> Result<MinPowOutcome> {
    let solver = settings.solver();
    let rho = real.uplink_power;
    let scaled: Vec<f64> = sinr_thresholds.iter().map(|s| s / rho).collect();
    let lambda = settings.lambda.unwrap_or_else(|| default_lambda(&scaled));
    let costs: Vec<f64> = (0..real.num_repeaters()).map(|l| mimo::amplifier_input(real, l)).collect();
    let cost_of = |a: &[f64]| a.iter().zip(&costs).map(|(x, c)| x * c).sum::<f64>();

    let mut alpha = upper.to_vec();
    let mut slacks = vec![f64::INFINITY; real.num_ues()];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        let points = linearize(real, &alpha)?;
        let coeffs = assemble_all(real, &points);
        let sol = solve_minpow_subproblem(&coeffs, upper, &costs, &scaled, lambda, &solver);
        if sol.status != SolveStatus::Optimal {
            log::warn!("min-pow subproblem ended with {:?} at iteration {iterations}", sol.status);
            if sol.status == SolveStatus::NumericalError {
                break;
            }
        }
        let change = relative_change(&sol.alpha, &alpha);
        alpha = sol.alpha;
        slacks = sol.slacks;
        let max_slack = slacks.iter().copied().fold(0.0, f64::max);
        trace.push(TraceRow { iteration: iterations, objective: cost_of(&alpha), max_slack, relative_change: change });
        if change <= settings.epsilon {
            converged = true;
            break;
        }
    }
    if slacks.iter().any(|s| s.is_infinite()) {
        // No subproblem was solved: report the slack of the starting point.
        let points = linearize(real, &alpha)?;
        slacks = assemble_all(real, &points).iter().zip(&scaled).map(|(c, th)| (th - c.lhs(&alpha)).max(0.0)).collect();
    }
    let feasible = slacks.iter().all(|s| *s <= settings.slack_tolerance);
    Ok(MinPowOutcome { cost: cost_of(&alpha), alpha, slacks, feasible, iterations, converged, trace })
}
