//! Solver-agnostic nonlinear-program contract: a sparse first/second-order
//! model plus the solution record returned by the interior-point method.

use std::time::Duration;

/// Second-order NLP model with declared Jacobian/Hessian sparsity.
///
/// Minimize f(x) subject to g(x) = 0, h(x) <= 0, lb <= x <= ub. Patterns are
/// fixed; evaluators fill value slices aligned with the pattern order.
pub trait NlpModel {
    fn n(&self) -> usize;
    fn m_eq(&self) -> usize;
    fn m_ineq(&self) -> usize;

    /// Variable bounds; infinities mark unbounded entries.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (
            vec![f64::NEG_INFINITY; self.n()],
            vec![f64::INFINITY; self.n()],
        )
    }

    /// Objective value; fills the gradient.
    fn objective(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn eval_g(&self, x: &[f64], g: &mut [f64]);
    fn eval_h(&self, x: &[f64], h: &mut [f64]);

    /// (row, col) entries of the equality Jacobian dg/dx.
    fn jac_g_pattern(&self) -> Vec<(usize, usize)>;
    fn jac_g(&self, x: &[f64], vals: &mut [f64]);

    /// (row, col) entries of the inequality Jacobian dh/dx.
    fn jac_h_pattern(&self) -> Vec<(usize, usize)>;
    fn jac_h(&self, x: &[f64], vals: &mut [f64]);

    /// (row, col) entries of the Lagrangian Hessian
    /// obj_scale d2f + sum lam_i d2g_i + sum mu_j d2h_j, full (not
    /// triangular) storage; duplicates are summed.
    fn hess_pattern(&self) -> Vec<(usize, usize)>;
    fn hess(&self, x: &[f64], obj_scale: f64, lam: &[f64], mu: &[f64], vals: &mut [f64]);
}

/// A boxed model plus layout metadata for logs and warm-start plumbing.
pub struct NlpProblem {
    pub model: Box<dyn NlpModel + Send + Sync>,
    /// Human-readable block layout of the decision vector, as
    /// (name, offset, len) triples in increasing offset order.
    pub layout: Vec<(String, usize, usize)>,
}

impl NlpProblem {
    pub fn new(model: Box<dyn NlpModel + Send + Sync>) -> Self {
        Self {
            model,
            layout: Vec::new(),
        }
    }

    pub fn block(&self, name: &str) -> Option<(usize, usize)> {
        self.layout
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|&(_, off, len)| (off, len))
    }

    pub fn describe(&self) -> String {
        let blocks: Vec<String> = self
            .layout
            .iter()
            .map(|(n, o, l)| format!("{n}[{o}..{}]", o + l))
            .collect();
        format!(
            "n={} m_eq={} m_ineq={} blocks: {}",
            self.model.n(),
            self.model.m_eq(),
            self.model.m_ineq(),
            blocks.join(" ")
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    /// Feasible and stalled close to optimality (loose tolerance met).
    Acceptable,
    Infeasible,
    IterationLimit,
    TimeLimit,
}

impl SolveStatus {
    pub fn is_usable(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Acceptable)
    }
}

/// Result of one NLP solve, including multipliers for warm starting.
#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Per-term objective breakdown, filled by the transcription layer.
    pub breakdown: Vec<(String, f64)>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub wall_time: Duration,
    pub max_violation: f64,
    pub lam: Vec<f64>,
    pub mu: Vec<f64>,
}
