//! Pressure-drop models, the convexified Kirchhoff loop constraints,
//! constructive recovery of valve/pump settings from loop flows, and
//! pressure-consistency verification.

use nalgebra::{DMatrix, DVector};

use crate::network::{
    check_valve_assumption, Cycle, Edge, ExpandedGraph, LoopStructure, ValveReport,
};
use crate::{DhnError, Result};

/// Frictional resistance of a pipe: 8 rho L K / (pi^2 d^5), in Pa s^2 m^-6.
pub fn friction_resistance(edge: &Edge, rho: f64) -> f64 {
    8.0 * rho * edge.length * edge.friction
        / (std::f64::consts::PI.powi(2) * edge.diameter.powi(5))
}

/// Pressure change from tail to head: friction plus valve resistance minus
/// pump lift. Positive means pressure falls along the edge.
pub fn edge_pressure_change(edge: &Edge, rho: f64, q: f64, nu: f64, r: f64) -> Result<f64> {
    if nu < 0.0 {
        return Err(DhnError::Domain(format!(
            "negative valve opening {nu} on edge `{}`",
            edge.id
        )));
    }
    let r_mu = friction_resistance(edge, rho);
    let r_nu = if edge.has_valve { edge.valve_coeff * nu } else { 0.0 };
    Ok((r_mu + r_nu) * q * q - edge.pump_capacity * r)
}

/// Recovered actuator settings: one opening per valve column of Pi, one
/// normalized speed per pump edge.
#[derive(Debug, Clone)]
pub struct ActuatorState {
    /// Valve openings, aligned with `HydraulicModel::valve_edges`.
    pub nu: DVector<f64>,
    /// Pump speeds in [0, 1], aligned with `HydraulicModel::pump_edges`.
    pub r: DVector<f64>,
}

/// Hydraulic data attached to an expanded graph: friction resistances, pump
/// capacities, the loop structure with its valve report, and the quadratic
/// forms of the convex loop inequality.
#[derive(Debug, Clone)]
pub struct HydraulicModel {
    pub graph: ExpandedGraph,
    pub loops: LoopStructure,
    pub report: ValveReport,
    pub rho: f64,
    /// Friction resistance per expanded edge.
    pub r_mu: DVector<f64>,
    /// Pump capacity per expanded edge (forward directions only).
    pub c: DVector<f64>,
    /// Expanded-edge indices carrying a pump.
    pub pump_edges: Vec<usize>,
    /// Z^i = F_r diag(F_r row i) R_mu F_r^T, one per reduced loop.
    pub z: Vec<DMatrix<f64>>,
    /// Pump capacity sum per reduced loop.
    pub loop_rhs: DVector<f64>,
    /// Mirror partner of each valve column, where one exists.
    valve_mirror: Vec<Option<usize>>,
}

impl HydraulicModel {
    /// Expanded-edge indices that carry a valve, both directions of a
    /// bidirectional pipe included (one physical valve, two flow modes).
    pub fn valve_edge_indices(g: &ExpandedGraph) -> Vec<usize> {
        (0..g.n_edges()).filter(|&j| g.edge(j).has_valve).collect()
    }

    pub fn new(graph: ExpandedGraph, rho: f64, cycle_cap: usize) -> Result<Self> {
        let loops = LoopStructure::build(&graph, cycle_cap)?;
        let valve_edges = Self::valve_edge_indices(&graph);
        let report = check_valve_assumption(&loops.f, &valve_edges);
        Self::with_loops(graph, rho, loops, report)
    }

    pub fn with_loops(
        graph: ExpandedGraph,
        rho: f64,
        loops: LoopStructure,
        report: ValveReport,
    ) -> Result<Self> {
        let n_e = graph.n_edges();
        let r_mu = DVector::from_fn(n_e, |j, _| friction_resistance(graph.edge(j), rho));
        let mut c = DVector::zeros(n_e);
        let mut pump_edges = Vec::new();
        for j in 0..n_e {
            if graph.edge(j).pump_capacity > 0.0 && !graph.is_reverse(j) {
                c[j] = graph.edge(j).pump_capacity;
                pump_edges.push(j);
            }
        }
        let m_r = loops.m_r();
        let mut z = Vec::with_capacity(m_r);
        for i in 0..m_r {
            let row = loops.f_r.row(i);
            let scaled = DMatrix::from_fn(m_r, n_e, |a, b| {
                loops.f_r[(a, b)] * row[b] * r_mu[b]
            });
            z.push(&scaled * loops.f_r.transpose());
        }
        let loop_rhs = &loops.f_r * &c;

        let mirror = graph.mirror_map()?;
        let valve_mirror = report
            .valve_edges
            .iter()
            .map(|&e| {
                mirror[e].and_then(|m| report.valve_edges.iter().position(|&v| v == m))
            })
            .collect();

        Ok(Self {
            graph,
            loops,
            report,
            rho,
            r_mu,
            c,
            pump_edges,
            z,
            loop_rhs,
            valve_mirror,
        })
    }

    /// Edge flows induced by reduced loop flows: q = F_r^T q_r.
    pub fn expanded_flows(&self, q_r: &DVector<f64>) -> Result<DVector<f64>> {
        if q_r.len() != self.loops.m_r() {
            return Err(DhnError::Dimension {
                what: "q_r".into(),
                expected: self.loops.m_r(),
                got: q_r.len(),
            });
        }
        Ok(self.loops.f_r.transpose() * q_r)
    }

    /// Residual of the convex loop inequality per reduced loop:
    /// q_r^T Z^i q_r - sum of pump capacities on loop i. Feasible iff all
    /// entries are <= 0.
    pub fn loop_feasibility(&self, q_r: &DVector<f64>) -> Result<DVector<f64>> {
        if q_r.len() != self.loops.m_r() {
            return Err(DhnError::Dimension {
                what: "q_r".into(),
                expected: self.loops.m_r(),
                got: q_r.len(),
            });
        }
        Ok(DVector::from_fn(self.z.len(), |i, _| {
            (q_r.transpose() * &self.z[i] * q_r)[(0, 0)] - self.loop_rhs[i]
        }))
    }

    /// Valve opening per expanded edge implied by an actuator state.
    pub fn nu_per_edge(&self, state: &ActuatorState) -> DVector<f64> {
        let mut nu = DVector::zeros(self.graph.n_edges());
        for (k, &e) in self.report.valve_edges.iter().enumerate() {
            nu[e] += state.nu[k];
        }
        nu
    }

    /// Pump speed per expanded edge implied by an actuator state.
    pub fn r_per_edge(&self, state: &ActuatorState) -> DVector<f64> {
        let mut r = DVector::zeros(self.graph.n_edges());
        for (k, &e) in self.pump_edges.iter().enumerate() {
            r[e] = state.r[k];
        }
        r
    }

    /// Pressure change per expanded edge for flows q under actuator state.
    pub fn pressure_changes(&self, q: &DVector<f64>, state: &ActuatorState) -> DVector<f64> {
        let nu = self.nu_per_edge(state);
        let r = self.r_per_edge(state);
        DVector::from_fn(self.graph.n_edges(), |j, _| {
            let e = self.graph.edge(j);
            let r_nu = if e.has_valve { e.valve_coeff * nu[j] } else { 0.0 };
            (self.r_mu[j] + r_nu) * q[j] * q[j] - self.c[j] * r[j]
        })
    }

    /// Constructive actuator recovery: pumps at full speed, scaled valve
    /// substitutes y = G F (H(1) - R_mu q.q) >= 0, openings recovered by
    /// inverting the diagonal scaling where flow is nonzero. Openings on
    /// mirrored valve pairs are symmetrized, which keeps the fundamental
    /// loop equalities exact and extends pressure consistency to cycles
    /// outside the symmetric row space.
    pub fn recover_actuators(&self, q_r: &DVector<f64>) -> Result<ActuatorState> {
        let resid = self.loop_feasibility(q_r)?;
        let tol = 1e-9 * self.loop_rhs.amax().max(1.0);
        if resid.max() > tol {
            return Err(DhnError::Infeasible {
                max_violation: resid.max(),
            });
        }
        if !self.report.assumption_satisfied {
            return Err(DhnError::AssumptionViolation(
                "valve assumption not satisfied".into(),
            ));
        }

        let q = self.expanded_flows(q_r)?;
        let qq = q.component_mul(&q);
        // Loop surplus beta = F_r (H(1) - R_mu q.q); nonnegative whenever
        // the loop inequality holds. All reduced rows are enforced, not just
        // the fundamental subset: closed valves zero out entire fundamental
        // rows while leaving longer cycles among flowing edges that still
        // need pressure closure.
        let beta = &self.loops.f_r * (&self.c - self.r_mu.component_mul(&qq));

        // Rows whose cycle crosses a broken edge are excluded: the idle
        // direction of an actively flowing bidirectional pipe has no valve
        // authority (nu scales q^2 = 0), and a closed valve decouples the
        // pressures on its two sides, absorbing the head of an idle pump.
        let broken = self.broken_edges(&q);
        let active_rows: Vec<usize> = (0..self.loops.m_r())
            .filter(|&i| {
                (0..self.graph.n_edges())
                    .all(|j| self.loops.f_r[(i, j)] < 0.5 || !broken[j])
            })
            .collect();

        // Solve the instance-specific nonnegative system F_r Pi y = beta on
        // the active rows; valves without flow carry no authority and stay
        // at y = 0.
        let f_pi = &self.loops.f_r * &self.report.pi;
        let usable: Vec<usize> = (0..self.report.valve_edges.len())
            .filter(|&k| q[self.report.valve_edges[k]] > 1e-12)
            .collect();
        let mut sub = DMatrix::zeros(active_rows.len(), usable.len());
        let mut beta_sub = DVector::zeros(active_rows.len());
        for (a, &i) in active_rows.iter().enumerate() {
            beta_sub[a] = beta[i];
            for (b, &k) in usable.iter().enumerate() {
                sub[(a, b)] = f_pi[(i, k)];
            }
        }
        let (sol, res) = crate::linalg::nnls(&sub, &beta_sub);
        if res > 1e-8 * self.loop_rhs.amax().max(1.0) {
            return Err(DhnError::AssumptionViolation(format!(
                "no nonnegative valve substitute for this flow (residual {res:.3e})"
            )));
        }
        let mut y = DVector::zeros(self.report.valve_edges.len());
        for (b, &k) in usable.iter().enumerate() {
            y[k] = sol[b];
        }

        let y_tol = 1e-9 * self.loop_rhs.amax().max(1.0);
        if y.min() < -y_tol {
            let k = y.imin();
            return Err(DhnError::AssumptionViolation(format!(
                "negative scaled valve substitute y[{k}] = {} on edge `{}`",
                y[k],
                self.graph.edge_label(self.report.valve_edges[k])
            )));
        }

        // Symmetrize across mirrored valve pairs carrying equal flow.
        let sym = y.clone();
        for (k, m) in self.valve_mirror.iter().enumerate() {
            if let Some(m) = *m {
                if m != k {
                    let qk = q[self.report.valve_edges[k]];
                    let qm = q[self.report.valve_edges[m]];
                    if (qk - qm).abs() <= 1e-12 * qk.abs().max(1.0) {
                        y[k] = 0.5 * (sym[k] + sym[m]);
                    }
                }
            }
        }

        let nu = DVector::from_fn(y.len(), |k, _| {
            let e_idx = self.report.valve_edges[k];
            let qe = q[e_idx];
            if qe.abs() < 1e-12 {
                0.0
            } else {
                (y[k].max(0.0)) / (self.graph.edge(e_idx).valve_coeff * qe * qe)
            }
        });
        let r = DVector::from_element(self.pump_edges.len(), 1.0);
        let state = ActuatorState { nu, r };

        // Loop equality must hold on the active reduced rows.
        let dp = self.pressure_changes(&q, &state);
        let eq = &self.loops.f_r * dp;
        let scale = self.loop_rhs.amax().max(1.0);
        for &i in &active_rows {
            if eq[i].abs() > 1e-8 * scale {
                return Err(DhnError::AssumptionViolation(format!(
                    "recovered actuators leave loop {i} residual {:.3e}",
                    eq[i]
                )));
            }
        }
        Ok(state)
    }

    /// Expanded edges that are the idle direction of a bidirectional pipe
    /// whose other direction carries flow.
    pub fn shadowed_edges(&self, q: &DVector<f64>) -> Vec<bool> {
        let mut shadowed = vec![false; self.graph.n_edges()];
        for (&rev, &fwd) in &self.graph.reverse_of {
            if q[fwd] > 1e-12 && q[rev] <= 1e-12 {
                shadowed[rev] = true;
            } else if q[rev] > 1e-12 && q[fwd] <= 1e-12 {
                shadowed[fwd] = true;
            }
        }
        shadowed
    }

    /// Edges across which a cycle cannot enforce pressure closure: shadowed
    /// reverse directions and valved edges without flow (a closed valve
    /// decouples the pressures on its two sides).
    pub fn broken_edges(&self, q: &DVector<f64>) -> Vec<bool> {
        let mut broken = self.shadowed_edges(q);
        for j in 0..self.graph.n_edges() {
            if self.graph.edge(j).has_valve && q[j] <= 1e-12 {
                broken[j] = true;
            }
        }
        broken
    }

    /// Force one active direction per bidirectional pipe by zeroing the loop
    /// flows that traverse the direction not chosen. `forward_active` is
    /// consulted once per bidirectional spec edge.
    pub fn enforce_complementarity(
        &self,
        q_r: &mut DVector<f64>,
        mut forward_active: impl FnMut(usize) -> bool,
    ) {
        for (&rev, &fwd) in &self.graph.reverse_of {
            let spec_idx = self.graph.origin[fwd].0;
            let kill = if forward_active(spec_idx) { rev } else { fwd };
            for i in 0..self.loops.m_r() {
                if self.loops.f_r[(i, kill)] > 0.5 {
                    q_r[i] = 0.0;
                }
            }
        }
    }

    /// Nodal pressures by integrating net physical pressure changes along a
    /// spanning tree; every co-tree edge must close within
    /// 1e-8 * max |dp|, otherwise the loop sums are path-dependent.
    pub fn nodal_pressures(
        &self,
        q: &DVector<f64>,
        state: &ActuatorState,
        reference_node: usize,
        reference_pressure: f64,
    ) -> Result<DVector<f64>> {
        let g = &self.graph;
        let spec = &g.spec;
        let n = g.n_nodes();
        let nu = self.nu_per_edge(state);
        let r = self.r_per_edge(state);

        // Net pressure change per physical (spec) edge, tail to head.
        let mut dp_phys = vec![0.0; spec.edges.len()];
        for (i, e) in spec.edges.iter().enumerate() {
            let fwd = g.forward_index(i);
            let rev = g
                .reverse_of
                .iter()
                .find(|(_, &f)| f == fwd)
                .map(|(&rv, _)| rv);
            let q_net = q[fwd] - rev.map(|j| q[j]).unwrap_or(0.0);
            let j_act = if q_net >= 0.0 { fwd } else { rev.unwrap_or(fwd) };
            let r_nu = if e.has_valve { e.valve_coeff * nu[j_act] } else { 0.0 };
            let r_pump = r[fwd];
            dp_phys[i] = (self.r_mu[fwd] + r_nu) * q_net * q_net.abs() - self.c[fwd] * r_pump;
        }
        let dp_scale = dp_phys.iter().fold(0.0f64, |a, b| a.max(b.abs()));

        let mut p = vec![f64::NAN; n];
        p[reference_node] = reference_pressure;
        let mut in_tree = vec![false; spec.edges.len()];
        let mut frontier = vec![reference_node];
        while let Some(u) = frontier.pop() {
            for (i, e) in spec.edges.iter().enumerate() {
                let (t, h) = (spec.node_index(&e.tail)?, spec.node_index(&e.head)?);
                if t == u && p[h].is_nan() {
                    p[h] = p[u] - dp_phys[i];
                    in_tree[i] = true;
                    frontier.push(h);
                } else if h == u && p[t].is_nan() {
                    p[t] = p[u] + dp_phys[i];
                    in_tree[i] = true;
                    frontier.push(t);
                }
            }
        }
        let mut max_residual = 0.0f64;
        for (i, e) in spec.edges.iter().enumerate() {
            if in_tree[i] {
                continue;
            }
            let (t, h) = (spec.node_index(&e.tail)?, spec.node_index(&e.head)?);
            let res = (p[t] - dp_phys[i] - p[h]).abs();
            max_residual = max_residual.max(res);
        }
        if max_residual > 1e-8 * dp_scale.max(1.0) {
            return Err(DhnError::PathDependence { max_residual });
        }
        Ok(DVector::from_vec(p))
    }

    /// Maximum Kirchhoff residual over every simple directed cycle with more
    /// than two nodes: |sum of pressure changes along the cycle|. Cycles
    /// crossing a broken edge (idle direction of an actively flowing
    /// bidirectional pipe, or a closed valve) carry no pressure meaning and
    /// are skipped.
    pub fn verify_kirchhoff_all_cycles(
        &self,
        q: &DVector<f64>,
        state: &ActuatorState,
        all_cycles: &[Cycle],
    ) -> f64 {
        let dp = self.pressure_changes(q, state);
        let broken = self.broken_edges(q);
        let mut worst = 0.0f64;
        for c in all_cycles {
            if c.nodes.len() <= 2 || c.edges.iter().any(|&j| broken[j]) {
                continue;
            }
            let s: f64 = c.edges.iter().map(|&j| dp[j]).sum();
            worst = worst.max(s.abs());
        }
        worst
    }

    /// Per-loop residual report rows: (loop index, lhs, rhs, residual).
    pub fn loop_residual_rows(&self, q_r: &DVector<f64>) -> Result<Vec<(usize, f64, f64, f64)>> {
        let res = self.loop_feasibility(q_r)?;
        Ok((0..res.len())
            .map(|i| {
                let rhs = self.loop_rhs[i];
                (i, res[i] + rhs, rhs, res[i])
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::{chain_spec, two_loop_spec};
    use crate::network::{enumerate_directed_cycles, expand_bidirectional, DEFAULT_CYCLE_CAP};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    const RHO: f64 = 981.0;

    fn chain_model() -> HydraulicModel {
        let g = expand_bidirectional(&chain_spec()).unwrap();
        HydraulicModel::new(g, RHO, DEFAULT_CYCLE_CAP).unwrap()
    }

    fn two_loop_model() -> HydraulicModel {
        let g = expand_bidirectional(&two_loop_spec()).unwrap();
        HydraulicModel::new(g, RHO, DEFAULT_CYCLE_CAP).unwrap()
    }

    #[test]
    fn friction_resistance_reference_value() {
        let e = crate::network::fixtures::pipe("p", "a", "b");
        // rho=981, L=300, K=0.02, d=0.1
        let r = friction_resistance(&e, RHO);
        let want = 8.0 * 981.0 * 300.0 * 0.02 / (std::f64::consts::PI.powi(2) * 1e-5);
        assert_relative_eq!(r, want, max_relative = 1e-15);
        assert_relative_eq!(r, 4.771e8, max_relative = 1e-3);
    }

    #[test]
    fn diameter_fifth_power_law() {
        let e = crate::network::fixtures::pipe("p", "a", "b");
        let mut wide = e.clone();
        wide.diameter = 2.0 * e.diameter;
        assert_relative_eq!(
            friction_resistance(&e, RHO) / friction_resistance(&wide, RHO),
            32.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn pressure_change_cases() {
        let mut e = crate::network::fixtures::pipe("p", "a", "b");
        // Pure pipe at q = 0.
        assert_eq!(edge_pressure_change(&e, RHO, 0.0, 0.0, 0.0).unwrap(), 0.0);
        // Pump lift at standstill.
        e.pump_capacity = 2e5;
        assert_relative_eq!(
            edge_pressure_change(&e, RHO, 0.0, 0.0, 1.0).unwrap(),
            -2e5
        );
        e.pump_capacity = 0.0;
        // Fully open valve behaves like the bare pipe.
        e.has_valve = true;
        let r_mu = friction_resistance(&e, RHO);
        assert_relative_eq!(
            edge_pressure_change(&e, RHO, 0.01, 0.0, 0.0).unwrap(),
            r_mu * 1e-4
        );
        // Valve at nu = 2 with R_nu = 1e8.
        let dp = edge_pressure_change(&e, RHO, 0.01, 2.0, 0.0).unwrap();
        assert_relative_eq!(dp, (r_mu + 2e8) * 1e-4, max_relative = 1e-12);
        assert!(edge_pressure_change(&e, RHO, 0.01, -0.1, 0.0).is_err());
    }

    #[test]
    fn loop_feasibility_zero_flow() {
        let m = chain_model();
        let res = m.loop_feasibility(&DVector::zeros(1)).unwrap();
        assert_relative_eq!(res[0], -2e5);
    }

    #[test]
    fn single_loop_boundary_flow() {
        let m = chain_model();
        // One loop over four edges, all with the same R_mu.
        let r_sum: f64 = (0..4).map(|j| m.r_mu[j]).sum();
        let q_star = (2e5 / r_sum).sqrt();
        let res = m
            .loop_feasibility(&DVector::from_element(1, q_star))
            .unwrap();
        assert!(res[0].abs() < 1e-6 * 2e5);
        let res_hi = m
            .loop_feasibility(&DVector::from_element(1, 1.01 * q_star))
            .unwrap();
        assert!(res_hi[0] > 0.0);
    }

    #[test]
    fn z_matrices_match_edgewise_sums() {
        let m = two_loop_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let q_r = DVector::from_fn(m.loops.m_r(), |_, _| rng.r#gen::<f64>() * 0.01);
            let q = m.expanded_flows(&q_r).unwrap();
            let res = m.loop_feasibility(&q_r).unwrap();
            for i in 0..m.loops.m_r() {
                let brute: f64 = (0..m.graph.n_edges())
                    .filter(|&j| m.loops.f_r[(i, j)] > 0.5)
                    .map(|j| m.r_mu[j] * q[j] * q[j])
                    .sum();
                assert_relative_eq!(res[i] + m.loop_rhs[i], brute, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn z_matrices_are_psd() {
        let m = two_loop_model();
        for zi in &m.z {
            let norm = zi.norm();
            let eig = zi.clone().symmetric_eigen();
            assert!(
                eig.eigenvalues.min() >= -1e-10 * norm,
                "lambda_min {} below tolerance",
                eig.eigenvalues.min()
            );
        }
    }

    #[test]
    fn recover_boundary_gives_open_valve() {
        let m = chain_model();
        let r_sum: f64 = (0..4).map(|j| m.r_mu[j]).sum();
        let q_star = (2e5 / r_sum).sqrt();
        let st = m
            .recover_actuators(&DVector::from_element(1, q_star * (1.0 - 1e-12)))
            .unwrap();
        assert!(st.nu.amax() < 1e-6);
        assert_eq!(st.r[0], 1.0);
    }

    #[test]
    fn recover_half_flow_scalar_closed_form() {
        let m = chain_model();
        let r_sum: f64 = (0..4).map(|j| m.r_mu[j]).sum();
        let q_star = (2e5 / r_sum).sqrt();
        let q = 0.5 * q_star;
        let st = m.recover_actuators(&DVector::from_element(1, q)).unwrap();
        // Surplus absorbed by the single valve: R_nu nu q^2 = c - sum R_mu q^2.
        let hx_c = m.graph.spec.edge_index("hx_c").unwrap();
        let want = (2e5 - r_sum * q * q) / (1e8 * q * q);
        assert_relative_eq!(st.nu[0], want, max_relative = 1e-9);
        // And the recovered state closes every enumerated cycle.
        let cycles = enumerate_directed_cycles(&m.graph, DEFAULT_CYCLE_CAP).unwrap();
        let qvec = m.expanded_flows(&DVector::from_element(1, q)).unwrap();
        assert!(m.verify_kirchhoff_all_cycles(&qvec, &st, &cycles) <= 1e-8 * 2e5);
        assert!(m.graph.edge(hx_c).has_valve);
    }

    #[test]
    fn recover_rejects_infeasible_flow() {
        let m = chain_model();
        let r_sum: f64 = (0..4).map(|j| m.r_mu[j]).sum();
        let q_star = (2e5 / r_sum).sqrt();
        let err = m
            .recover_actuators(&DVector::from_element(1, 1.5 * q_star))
            .unwrap_err();
        assert!(matches!(err, DhnError::Infeasible { .. }));
    }

    #[test]
    fn random_feasible_recovery_two_loop() {
        let m = two_loop_model();
        assert!(m.report.assumption_satisfied, "valve assumption must hold");
        let cycles = enumerate_directed_cycles(&m.graph, DEFAULT_CYCLE_CAP).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut accepted = 0;
        while accepted < 200 {
            let mut q_r = DVector::from_fn(m.loops.m_r(), |_, _| rng.r#gen::<f64>() * 0.015);
            m.enforce_complementarity(&mut q_r, |_| rng.r#gen::<bool>());
            if m.loop_feasibility(&q_r).unwrap().max() > 0.0 {
                continue;
            }
            accepted += 1;
            let st = m.recover_actuators(&q_r).unwrap();
            assert!(st.nu.min() >= 0.0);
            let q = m.expanded_flows(&q_r).unwrap();
            let worst = m.verify_kirchhoff_all_cycles(&q, &st, &cycles);
            assert!(worst <= 1e-8 * 4e5, "cycle residual {worst}");
        }
    }

    #[test]
    fn z2_certificate_is_nonnegative_and_consistent() {
        let m = two_loop_model();
        let z2 = m.report.z2.as_ref().unwrap();
        let w = &m.report.psi + &m.report.theta * z2;
        assert!(w.min() >= -1e-12, "Psi + Theta Z2 has negative entry {}", w.min());
        let f_pi = &m.loops.f * &m.report.pi;
        let err = (&f_pi * &w - &m.loops.f).abs().max();
        assert!(err <= 1e-9, "F Pi (Psi + Theta Z2) deviates from F by {err}");
    }

    #[test]
    fn recovery_gain_is_right_inverse_when_present() {
        let m = chain_model();
        let f_pi = &m.loops.f * &m.report.pi;
        let gain = m.report.recovery_gain.as_ref().unwrap();
        let err = (f_pi * gain - DMatrix::identity(m.loops.m_f, m.loops.m_f))
            .abs()
            .max();
        assert!(err <= 1e-9, "FPi G deviates from identity by {err}");
        assert!(gain.min() >= 0.0);
    }

    #[test]
    fn nodal_pressures_constant_without_flow() {
        // Triangle of plain pipes: no pumps, no flow, flat pressure.
        use crate::network::fixtures::pipe;
        use crate::network::NetworkSpec;
        use std::collections::BTreeMap;
        let spec = NetworkSpec {
            nodes: vec!["a".into(), "b".into(), "c".into()],
            edges: vec![pipe("ab", "a", "b"), pipe("bc", "b", "c"), pipe("ca", "c", "a")],
            producers: BTreeMap::new(),
            consumers: BTreeMap::new(),
            prosumers: BTreeMap::new(),
            storages: BTreeMap::new(),
            pairing: [
                ("a".to_string(), "a".to_string()),
                ("b".to_string(), "b".to_string()),
                ("c".to_string(), "c".to_string()),
            ]
            .into(),
        };
        let g = expand_bidirectional(&spec).unwrap();
        let loops = LoopStructure {
            cycles: vec![],
            f_r: DMatrix::zeros(0, 3),
            f: DMatrix::zeros(0, 3),
            m_f: 0,
            pivot_rows: vec![],
            rank_ambiguity: None,
        };
        let report = check_valve_assumption(&loops.f, &[]);
        let m = HydraulicModel::with_loops(g, RHO, loops, report).unwrap();
        let st = ActuatorState {
            nu: DVector::zeros(0),
            r: DVector::zeros(0),
        };
        let p = m
            .nodal_pressures(&DVector::zeros(3), &st, 0, 2e5)
            .unwrap();
        for i in 0..3 {
            assert_relative_eq!(p[i], 2e5);
        }
    }

    #[test]
    fn nodal_pressures_telescope_and_close() {
        let m = chain_model();
        let r_sum: f64 = (0..4).map(|j| m.r_mu[j]).sum();
        let q = 0.5 * (2e5 / r_sum).sqrt();
        let q_r = DVector::from_element(1, q);
        let st = m.recover_actuators(&q_r).unwrap();
        let qvec = m.expanded_flows(&q_r).unwrap();
        let p = m.nodal_pressures(&qvec, &st, 0, 3e5).unwrap();
        // Pressure falls by R_mu q^2 across the plain pipe e1 (S1 -> S2).
        let s1 = m.graph.spec.node_index("S1").unwrap();
        let s2 = m.graph.spec.node_index("S2").unwrap();
        let e1 = m.graph.forward_index(m.graph.spec.edge_index("e1").unwrap());
        assert_relative_eq!(p[s1] - p[s2], m.r_mu[e1] * q * q, max_relative = 1e-10);
        assert_relative_eq!(p[s1], 3e5);
    }

    #[test]
    fn convexity_of_loop_quadratics() {
        let m = two_loop_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = DVector::from_fn(m.loops.m_r(), |_, _| rng.r#gen::<f64>() * 0.02);
            let b = DVector::from_fn(m.loops.m_r(), |_, _| rng.r#gen::<f64>() * 0.02);
            let lam: f64 = rng.r#gen();
            let mid = &a * lam + &b * (1.0 - lam);
            let ga = m.loop_feasibility(&a).unwrap();
            let gb = m.loop_feasibility(&b).unwrap();
            let gm = m.loop_feasibility(&mid).unwrap();
            for i in 0..ga.len() {
                assert!(gm[i] <= lam * ga[i] + (1.0 - lam) * gb[i] + 1e-9);
            }
        }
    }
}
