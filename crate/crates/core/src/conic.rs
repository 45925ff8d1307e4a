//! Second-order-cone programs: the contract between the amplification
//! optimizer and whatever interior-point method solves its subproblems.
//!
//! A problem is `minimize c^T x` subject to affine inequalities
//! `a^T x + b >= 0` and cone constraints `||(a_i^T x + b_i)_i|| <= a_0^T x + b_0`.
//! The bundled backend is Clarabel.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus,
    SupportedConeT,
};
use serde::{Deserialize, Serialize};

/// `coeffs^T x + constant`, dense in the problem variables.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRow {
    pub coeffs: Vec<f64>,
    pub constant: f64,
}

impl AffineRow {
    pub fn new(coeffs: Vec<f64>, constant: f64) -> Self {
        Self { coeffs, constant }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.constant
    }
}

/// `||tail(x)|| <= head(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocConstraint {
    pub head: AffineRow,
    pub tail: Vec<AffineRow>,
}

impl SocConstraint {
    /// `head - ||tail||`; nonnegative when satisfied.
    pub fn margin(&self, x: &[f64]) -> f64 {
        let norm = self.tail.iter().map(|r| r.eval(x).powi(2)).sum::<f64>().sqrt();
        self.head.eval(x) - norm
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SocpProblem {
    pub objective: Vec<f64>,
    pub inequalities: Vec<AffineRow>,
    pub cones: Vec<SocConstraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    NumericalError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocpSolution {
    pub x: Vec<f64>,
    pub status: SolveStatus,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: u32,
}

impl SocpSolution {
    /// Relative duality gap `|p - d| / max(1, |p|)`.
    pub fn relative_gap(&self) -> f64 {
        (self.primal_objective - self.dual_objective).abs() / self.primal_objective.abs().max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub max_iter: u32,
    pub tol_gap: f64,
    pub tol_feas: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iter: 100, tol_gap: 1e-9, tol_feas: 1e-9 }
    }
}

impl SocpProblem {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    /// Largest constraint violation at `x` (0 when feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let lin = self.inequalities.iter().map(|r| (-r.eval(x)).max(0.0));
        let soc = self.cones.iter().map(|c| (-c.margin(x)).max(0.0));
        lin.chain(soc).fold(0.0, f64::max)
    }

    pub fn solve(&self, settings: &SolverSettings) -> SocpSolution {
        let n = self.num_vars();
        // Rows in Clarabel order: s = b - A x with s in the cone.
        let mut rows: Vec<&AffineRow> = Vec::new();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if !self.inequalities.is_empty() {
            rows.extend(self.inequalities.iter());
            cones.push(NonnegativeConeT(self.inequalities.len()));
        }
        for c in &self.cones {
            rows.push(&c.head);
            rows.extend(c.tail.iter());
            cones.push(SecondOrderConeT(1 + c.tail.len()));
        }
        let m = rows.len();
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for j in 0..n {
            for (i, r) in rows.iter().enumerate() {
                let v = r.coeffs[j];
                if v != 0.0 {
                    rowval.push(i);
                    nzval.push(-v);
                }
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);
        let b: Vec<f64> = rows.iter().map(|r| r.constant).collect();
        let p = CscMatrix::zeros((n, n));

        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(settings.max_iter)
            .tol_gap_abs(settings.tol_gap)
            .tol_gap_rel(settings.tol_gap)
            .tol_feas(settings.tol_feas)
            .build()
            .expect("valid solver settings");
        let mut solver = match DefaultSolver::new(&p, &self.objective, &a, &b, &cones, settings) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("conic solver setup failed: {e}");
                return SocpSolution {
                    x: vec![0.0; n],
                    status: SolveStatus::NumericalError,
                    primal_objective: f64::NAN,
                    dual_objective: f64::NAN,
                    iterations: 0,
                };
            }
        };
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::MaxIterations,
            _ => SolveStatus::NumericalError,
        };
        SocpSolution {
            x: sol.x.clone(),
            status,
            primal_objective: sol.obj_val,
            dual_objective: sol.obj_val_dual,
            iterations: sol.iterations,
        }
    }
}
