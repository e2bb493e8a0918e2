//! Primal-dual interior-point method for sparse nonlinear programs, in the
//! MIPS style: slacked inequalities, a condensed symmetric-indefinite KKT
//! system per iteration, and fraction-to-boundary step clipping.

use std::time::{Duration, Instant};

use log::{debug, info};

use super::nlp::{NlpModel, NlpSolution, SolveStatus};
use crate::linalg::SparseLuSolver;
use crate::Result;

#[derive(Debug, Clone)]
pub struct SolveLimits {
    pub max_iter: usize,
    pub max_wall: Duration,
    pub feas_tol: f64,
    pub grad_tol: f64,
    pub comp_tol: f64,
    pub cost_tol: f64,
}

impl Default for SolveLimits {
    fn default() -> Self {
        Self {
            max_iter: 150,
            max_wall: Duration::from_secs(300),
            feas_tol: 1e-6,
            grad_tol: 1e-6,
            comp_tol: 1e-6,
            cost_tol: 1e-6,
        }
    }
}

/// Fraction-to-boundary parameter.
const XI: f64 = 0.999_95;
/// Centering parameter for the barrier update.
const SIGMA: f64 = 0.1;
/// Initial slack / multiplier magnitude.
const Z0: f64 = 1.0;
/// Smallest accepted step fraction before declaring failure.
const ALPHA_MIN: f64 = 1e-8;
/// Central-path band for the multiplier safeguard.
const KAPPA_SIGMA: f64 = 1e10;
/// Primal regularization added to the KKT (1,1) block.
const PRIMAL_REG: f64 = 1e-9;
/// Regularization escalations allowed within one iteration before a
/// stalled solve gives up.
const MAX_REG_BUMPS: usize = 8;
/// Largest primal regularization tried.
const MAX_REG: f64 = 1e2;

/// Dual regularization added to the KKT (2,2) block.
const DUAL_REG: f64 = 1e-11;

struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn from_pattern(m: usize, pattern: &[(usize, usize)], vals: &[f64]) -> Self {
        let mut rows = vec![Vec::new(); m];
        for (&(r, c), &v) in pattern.iter().zip(vals) {
            rows[r].push((c, v));
        }
        Self { rows }
    }

    fn mul_transpose_add(&self, y: &[f64], out: &mut [f64]) {
        // out += J^T y
        for (r, row) in self.rows.iter().enumerate() {
            let yr = y[r];
            if yr != 0.0 {
                for &(c, v) in row {
                    out[c] += v * yr;
                }
            }
        }
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (r, row) in self.rows.iter().enumerate() {
            out[r] = row.iter().map(|&(c, v)| v * x[c]).sum();
        }
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, &b| a.max(b.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve min f(x) s.t. g(x) = 0, h(x) <= 0, lb <= x <= ub from `x0`.
/// Returns the best iterate found under the limits; never errors on
/// non-convergence (the status field reports it), only on dimension abuse.
pub fn solve_nlp(model: &dyn NlpModel, x0: &[f64], limits: &SolveLimits) -> Result<NlpSolution> {
    let start = Instant::now();
    let n = model.n();
    let m_eq = model.m_eq();
    let m_h = model.m_ineq();
    if x0.len() != n {
        return Err(crate::DhnError::Dimension {
            what: "NLP initial guess",
            expected: n,
            got: x0.len(),
        });
    }
    let (lb, ub) = model.bounds();
    for i in 0..n {
        if lb[i] > ub[i] {
            return Ok(NlpSolution {
                x: x0.to_vec(),
                objective: f64::INFINITY,
                breakdown: Vec::new(),
                status: SolveStatus::Infeasible,
                iterations: 0,
                wall_time: start.elapsed(),
                max_violation: lb[i] - ub[i],
                lam: Vec::new(),
                mu: Vec::new(),
            });
        }
    }

    // Variables with lb = ub are eliminated rather than barriered: they are
    // held at their value, their bound rows are dropped, and their KKT
    // column is frozen (the fraction-to-boundary rule would otherwise choke
    // on the empty interior).
    let fixed: Vec<bool> = (0..n).map(|i| lb[i] == ub[i]).collect();

    // Bound rows are appended to the model inequalities: x - ub <= 0 for
    // finite ub, lb - x <= 0 for finite lb.
    let ub_rows: Vec<usize> = (0..n)
        .filter(|&i| ub[i].is_finite() && !fixed[i])
        .collect();
    let lb_rows: Vec<usize> = (0..n)
        .filter(|&i| lb[i].is_finite() && !fixed[i])
        .collect();
    let m_ineq = m_h + ub_rows.len() + lb_rows.len();

    // Start strictly inside the box.
    let mut x = x0.to_vec();
    for i in 0..n {
        if fixed[i] {
            x[i] = lb[i];
            continue;
        }
        let (l, u) = (lb[i], ub[i]);
        if l.is_finite() && u.is_finite() {
            let margin = 1e-8 * (u - l).max(1e-8);
            x[i] = x[i].clamp(l + margin, u - margin.min((u - l) / 2.0));
        } else if l.is_finite() {
            x[i] = x[i].max(l + 1e-8);
        } else if u.is_finite() {
            x[i] = x[i].min(u - 1e-8);
        }
    }

    let jac_g_pattern = model.jac_g_pattern();
    let jac_h_pattern = model.jac_h_pattern();
    let hess_pattern = model.hess_pattern();
    let mut jac_g_vals = vec![0.0; jac_g_pattern.len()];
    let mut jac_h_vals = vec![0.0; jac_h_pattern.len()];
    let mut hess_vals = vec![0.0; hess_pattern.len()];
    let mut grad = vec![0.0; n];
    let mut g = vec![0.0; m_eq];
    let mut h_model = vec![0.0; m_h];

    let eval_h_full = |x: &[f64], h_model: &mut [f64], model: &dyn NlpModel| -> Vec<f64> {
        model.eval_h(x, h_model);
        let mut h = Vec::with_capacity(m_ineq);
        h.extend_from_slice(h_model);
        h.extend(ub_rows.iter().map(|&i| x[i] - ub[i]));
        h.extend(lb_rows.iter().map(|&i| lb[i] - x[i]));
        h
    };

    let mut f = model.objective(&x, &mut grad);
    model.eval_g(&x, &mut g);
    let mut h = eval_h_full(&x, &mut h_model, model);
    model.jac_g(&x, &mut jac_g_vals);
    model.jac_h(&x, &mut jac_h_vals);

    let mut gamma = 1.0;
    let mut lam = vec![0.0; m_eq];
    let mut z: Vec<f64> = h.iter().map(|&hk| if hk < -Z0 { -hk } else { Z0 }).collect();
    let mut mu: Vec<f64> = z
        .iter()
        .map(|&zk| if gamma / zk > Z0 { gamma / zk } else { Z0 })
        .collect();

    let mut f0 = f;
    let mut iterations = 0;
    let status;
    let mut primal_reg = PRIMAL_REG;
    let mut theta_best = f64::INFINITY;
    let mut stalled = 0;
    let mut recenters = 0;

    loop {
        // Lagrangian gradient and convergence measures at the current point.
        let jg = SparseRows::from_pattern(m_eq, &jac_g_pattern, &jac_g_vals);
        let jh_model = SparseRows::from_pattern(m_h, &jac_h_pattern, &jac_h_vals);
        let mut l_x = grad.clone();
        jg.mul_transpose_add(&lam, &mut l_x);
        jh_model.mul_transpose_add(&mu[..m_h], &mut l_x);
        for (k, &i) in ub_rows.iter().enumerate() {
            l_x[i] += mu[m_h + k];
        }
        for (k, &i) in lb_rows.iter().enumerate() {
            l_x[i] -= mu[m_h + ub_rows.len() + k];
        }
        // Fixed variables carry an implicit equality whose multiplier
        // absorbs any gradient.
        for i in 0..n {
            if fixed[i] {
                l_x[i] = 0.0;
            }
        }

        let max_h = h.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let viol = if m_ineq > 0 {
            norm_inf(&g).max(max_h.max(0.0))
        } else {
            norm_inf(&g)
        };
        let feascond = viol / (1.0 + norm_inf(&x).max(norm_inf(&z)));
        if log::log_enabled!(log::Level::Trace) {
            let (gi, gv) = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, &v)| (i, v))
                .unwrap_or((0, 0.0));
            let (hi, hv) = h
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, &v)| (i, v))
                .unwrap_or((0, f64::NEG_INFINITY));
            log::trace!("ipm worst: g[{gi}]={gv:.3e} h[{hi}]={hv:.3e} (m_h={m_h})");
        }
        let gradcond = norm_inf(&l_x) / (1.0 + norm_inf(&lam).max(norm_inf(&mu)));
        let compcond = dot(&z, &mu) / (1.0 + norm_inf(&x));
        let costcond = (f - f0).abs() / (1.0 + f0.abs());
        debug!(
            "ipm it {iterations}: f={f:.6e} feas={feascond:.2e} grad={gradcond:.2e} comp={compcond:.2e} cost={costcond:.2e} gamma={gamma:.2e}"
        );

        // Monotone barrier update: gamma only shrinks once the KKT error
        // for the current gamma is resolved, so complementarity pairs are
        // never driven to the boundary ahead of feasibility.
        if m_ineq > 0 {
            let kkt_err = feascond.max(gradcond).max(compcond);
            if kkt_err <= 10.0 * gamma && gamma > 1e-12 {
                gamma = (0.2 * gamma).min(gamma.powf(1.2)).max(1e-12);
            }
        }

        if feascond < limits.feas_tol
            && gradcond < limits.grad_tol
            && compcond < limits.comp_tol
            && (iterations > 0 && costcond < limits.cost_tol)
        {
            status = SolveStatus::Optimal;
            info!("ipm converged in {iterations} iterations, f = {f:.6e}");
            break;
        }
        if iterations >= limits.max_iter {
            status = if feascond < 1e2 * limits.feas_tol && gradcond < 1e3 * limits.grad_tol {
                SolveStatus::Acceptable
            } else if feascond > 1e3 * limits.feas_tol && iterations > 10 {
                SolveStatus::Infeasible
            } else {
                SolveStatus::IterationLimit
            };
            break;
        }
        if start.elapsed() > limits.max_wall {
            status = if feascond < 1e2 * limits.feas_tol {
                SolveStatus::Acceptable
            } else {
                SolveStatus::TimeLimit
            };
            break;
        }
        iterations += 1;

        // Condensed KKT system: [M Jg^T; Jg -dI] [dx; dlam] = [-N; -g],
        // M = Lxx + Jh^T Z^-1 diag(mu) Jh. A step is only committed when it
        // reduces the slacked-constraint residual (full Newton steps on
        // long-horizon dynamics can diverge even inside the boundary); a
        // rejected or jammed step retries the same iterate with a stiffer
        // (more regularized) system, IPOPT-fashion.
        model.hess(&x, 1.0, &lam, &mu[..m_h], &mut hess_vals);
        let dim = n + m_eq;

        // N = Lx + Jh^T Z^-1 (diag(mu) h + gamma e); independent of delta.
        let mut n_vec = l_x.clone();
        {
            let t: Vec<f64> = (0..m_h)
                .map(|j| (mu[j] * h[j] + gamma) / z[j])
                .collect();
            jh_model.mul_transpose_add(&t, &mut n_vec);
            for (k, &i) in ub_rows.iter().enumerate() {
                let j = m_h + k;
                n_vec[i] += (mu[j] * h[j] + gamma) / z[j];
            }
            for (k, &i) in lb_rows.iter().enumerate() {
                let j = m_h + ub_rows.len() + k;
                n_vec[i] -= (mu[j] * h[j] + gamma) / z[j];
            }
        }

        let theta_of = |g: &[f64], h: &[f64], z: &[f64]| -> f64 {
            let mut r = norm_inf(g);
            for j in 0..m_ineq {
                r = r.max((h[j] + z[j]).abs());
            }
            r
        };
        let theta0 = theta_of(&g, &h, &z);
        theta_best = theta_best.min(theta0);
        // Watchdog envelope: the primal-dual trajectory is naturally
        // non-monotone in the residual, so full steps pass as long as they
        // stay within a band over the best residual seen; only runaway
        // steps get backtracked.
        let envelope = (10.0 * theta_best).max(limits.feas_tol);

        // Accepted step: (x, z, g, h, dlam, dmu, alpha_d, scale).
        #[allow(clippy::type_complexity)]
        let mut step: Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> =
            None;
        let mut delta = primal_reg;
        for _ in 0..=MAX_REG_BUMPS {
            // Fixed variables are projected out: their rows and columns are
            // dropped and replaced by an identity pivot, so dx_i = 0 exactly
            // with no conditioning penalty.
            let mut kkt = SparseLuSolver::new(dim);
            for (&(r, c), &v) in hess_pattern.iter().zip(&hess_vals) {
                if !fixed[r] && !fixed[c] {
                    kkt.add(r, c, v);
                }
            }
            for i in 0..n {
                kkt.add(i, i, if fixed[i] { 1.0 } else { delta });
            }
            for j in 0..m_h {
                let d = mu[j] / z[j];
                let row = &jh_model.rows[j];
                for &(c1, v1) in row {
                    if fixed[c1] {
                        continue;
                    }
                    for &(c2, v2) in row {
                        if !fixed[c2] {
                            kkt.add(c1, c2, d * v1 * v2);
                        }
                    }
                }
            }
            for (k, &i) in ub_rows.iter().enumerate() {
                let j = m_h + k;
                kkt.add(i, i, mu[j] / z[j]);
            }
            for (k, &i) in lb_rows.iter().enumerate() {
                let j = m_h + ub_rows.len() + k;
                kkt.add(i, i, mu[j] / z[j]);
            }
            for (&(r, c), &v) in jac_g_pattern.iter().zip(&jac_g_vals) {
                if !fixed[c] {
                    kkt.add(n + r, c, v);
                    kkt.add(c, n + r, v);
                }
            }
            for r in 0..m_eq {
                kkt.add(n + r, n + r, -DUAL_REG);
            }

            let mut rhs = vec![0.0; dim];
            for i in 0..n {
                rhs[i] = if fixed[i] { 0.0 } else { -n_vec[i] };
            }
            for r in 0..m_eq {
                rhs[n + r] = -g[r];
            }
            if kkt.solve(&mut rhs).is_err() || rhs.iter().any(|v| v.is_nan()) {
                delta = (delta * 100.0).max(1e-8).min(MAX_REG);
                continue;
            }
            let dx = &rhs[..n];

            // dz = -h - z - Jh dx; dmu = -mu + Z^-1 (gamma e - diag(mu) dz).
            let mut jh_dx = vec![0.0; m_h];
            jh_model.mul(dx, &mut jh_dx);
            let mut dz = Vec::with_capacity(m_ineq);
            for j in 0..m_h {
                dz.push(-h[j] - z[j] - jh_dx[j]);
            }
            for (k, &i) in ub_rows.iter().enumerate() {
                dz.push(-h[m_h + k] - z[m_h + k] - dx[i]);
            }
            for (k, &i) in lb_rows.iter().enumerate() {
                let j = m_h + ub_rows.len() + k;
                dz.push(-h[j] - z[j] + dx[i]);
            }
            let dmu: Vec<f64> = (0..m_ineq)
                .map(|j| -mu[j] + (gamma - mu[j] * dz[j]) / z[j])
                .collect();

            let mut alpha_p: f64 = 1.0;
            let mut blk = usize::MAX;
            for j in 0..m_ineq {
                if dz[j] < 0.0 {
                    let a = XI * z[j] / -dz[j];
                    if a < alpha_p {
                        alpha_p = a;
                        blk = j;
                    }
                }
            }
            if blk != usize::MAX && alpha_p < 0.1 {
                log::trace!(
                    "ipm clip: row {blk} alpha_p={alpha_p:.2e} z={:.2e} dz={:.2e} h={:.2e} mu={:.2e}",
                    z[blk], dz[blk], h[blk], mu[blk]
                );
            }
            let mut alpha_d: f64 = 1.0;
            for j in 0..m_ineq {
                if dmu[j] < 0.0 {
                    alpha_d = alpha_d.min(XI * mu[j] / -dmu[j]);
                }
            }
            if alpha_p < ALPHA_MIN || alpha_d < ALPHA_MIN {
                delta = (delta * 100.0).max(1e-8).min(MAX_REG);
                continue;
            }

            let mut scale = 1.0;
            let mut accepted = false;
            let mut x_try = vec![0.0; n];
            let mut z_try = vec![0.0; m_ineq];
            let mut g_try = vec![0.0; m_eq];
            for _ in 0..12 {
                for i in 0..n {
                    x_try[i] = if fixed[i] {
                        lb[i]
                    } else {
                        x[i] + scale * alpha_p * dx[i]
                    };
                }
                for j in 0..m_ineq {
                    z_try[j] = (z[j] + scale * alpha_p * dz[j]).max(1e-300);
                }
                model.eval_g(&x_try, &mut g_try);
                let h_try = eval_h_full(&x_try, &mut h_model, model);
                let theta_try = theta_of(&g_try, &h_try, &z_try);
                if theta_try <= envelope || theta_try <= (1.0 - 1e-4 * scale) * theta0 {
                    debug!("ipm step: delta={delta:.1e} alpha_p={alpha_p:.2e} alpha_d={alpha_d:.2e} scale={scale:.2e} theta {theta0:.2e}->{theta_try:.2e}");
                    let dlam = rhs[n..].to_vec();
                    step = Some((x_try, z_try, g_try, h_try, dlam, dmu, alpha_d, scale));
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if accepted {
                break;
            }
            delta = (delta * 100.0).max(1e-8).min(MAX_REG);
        }

        let Some((x_new, z_new, g_new, h_new, dlam, dmu, alpha_d, scale)) = step else {
            status = if feascond < 1e2 * limits.feas_tol {
                SolveStatus::Acceptable
            } else {
                SolveStatus::Infeasible
            };
            break;
        };
        x = x_new;
        z = z_new;
        g = g_new;
        h = h_new;
        for r in 0..m_eq {
            lam[r] += scale * alpha_d * dlam[r];
        }
        for j in 0..m_ineq {
            // kappa-sigma safeguard: keep each pair within a wide band of
            // the central path so no multiplier can jam the step rule.
            let m_new = (mu[j] + scale * alpha_d * dmu[j]).max(1e-300);
            let g_over_z = gamma / z[j];
            mu[j] = m_new.clamp(g_over_z / KAPPA_SIGMA, g_over_z * KAPPA_SIGMA);
        }
        // Remember a fraction of the level that worked; a clean run decays
        // back to the base weight.
        primal_reg = (delta * 0.1).max(PRIMAL_REG);

        // Stall detector: when the boundary rule keeps clipping steps to
        // nothing, the slacks have drifted away from the constraints they
        // shadow. Recenter them at the current iterate and barrier level so
        // the next step starts with full play.
        if scale * alpha_d < 1e-2 {
            stalled += 1;
        } else {
            stalled = 0;
        }
        if stalled >= 3 && recenters < 10 {
            for j in 0..m_ineq {
                z[j] = (-h[j]).max(1e-8);
                mu[j] = gamma / z[j];
            }
            stalled = 0;
            recenters += 1;
            debug!("ipm recenter {recenters}: slacks resynced at gamma={gamma:.1e}");
        }

        f0 = f;
        f = model.objective(&x, &mut grad);
        model.jac_g(&x, &mut jac_g_vals);
        model.jac_h(&x, &mut jac_h_vals);
        if !f.is_finite() || x.iter().any(|v| !v.is_finite()) {
            status = SolveStatus::IterationLimit;
            break;
        }
    }

    let max_violation = {
        let max_h = h.iter().fold(0.0_f64, |a, &b| a.max(b));
        norm_inf(&g).max(max_h)
    };
    Ok(NlpSolution {
        x,
        objective: f,
        breakdown: Vec::new(),
        status,
        iterations,
        wall_time: start.elapsed(),
        max_violation,
        lam,
        mu,
    })
}
