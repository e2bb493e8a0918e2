//! Direct transcription of the receding-horizon economic OCP: decision
//! layout, sparse first/second derivatives of the implicit-Euler dynamics
//! and convex loop inequalities, move blocking, and warm starting.
//!
//! Solver units: temperatures in K above ambient, flows in L/s, producer
//! powers and demand slacks in units of 100 kW, loop rows in bar.

use nalgebra::{DMatrix, DVector};

use super::nlp::{NlpModel, NlpProblem, NlpSolution};
use super::{ComplementarityMode, OcpOptions};
use crate::hydraulics::HydraulicModel;
use crate::thermal::{InjectionLayout, ThermalGraph, JUNCTION_EPS};
use crate::{DhnError, Result};

/// m^3/s per solver flow unit (L/s).
pub const FLOW_SCALE: f64 = 1e-3;
/// W per solver power unit.
pub const POWER_SCALE: f64 = 1e5;
/// Pa in one solver loop-row unit (rows scaled to bar).
const LOOP_SCALE: f64 = 1e-5;

/// Blocked input grid: `map[t]` is the free block index driving step t.
#[derive(Debug, Clone)]
pub struct MoveBlocking {
    pub n_steps: usize,
    pub map: Vec<usize>,
    pub n_free: usize,
}

/// Inputs are held constant over blocks of `block_len` steps and pinned to
/// the block containing N_c beyond the control horizon.
pub fn apply_move_blocking(n: usize, n_c: usize, block_len: usize) -> MoveBlocking {
    let map: Vec<usize> = (0..n).map(|t| t.min(n_c) / block_len).collect();
    let n_free = map.last().map_or(0, |&b| b + 1);
    MoveBlocking {
        n_steps: n,
        map,
        n_free,
    }
}

impl MoveBlocking {
    /// Steps driven by each free block (weights for summed terms).
    pub fn block_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_free];
        for &b in &self.map {
            w[b] += 1.0;
        }
        w
    }
}

/// Per-term objective values, in solver units.
#[derive(Debug, Clone, Default)]
pub struct ObjectiveBreakdown {
    pub price: f64,
    pub temp: f64,
    pub diff: f64,
    pub storage: f64,
    pub slack: f64,
    pub complementarity: f64,
}

impl ObjectiveBreakdown {
    pub fn total(&self) -> f64 {
        self.price + self.temp + self.diff + self.storage + self.slack + self.complementarity
    }

    pub fn named(&self) -> Vec<(String, f64)> {
        vec![
            ("price".into(), self.price),
            ("temp".into(), self.temp),
            ("diff".into(), self.diff),
            ("storage".into(), self.storage),
            ("slack".into(), self.slack),
            ("complementarity".into(), self.complementarity),
        ]
    }
}

/// Explicit trajectory for standalone objective evaluation.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    /// Relative price per step.
    pub price: Vec<f64>,
    /// Producer powers per step (solver units).
    pub p: Vec<DVector<f64>>,
    /// Penalized node temperatures per step t = 1..N.
    pub x_bounded: Vec<DVector<f64>>,
    /// Terminal storage temperatures and their common target.
    pub x_sto_terminal: DVector<f64>,
    pub sto_target: f64,
    /// All slack values.
    pub slacks: Vec<f64>,
}

/// The five objective terms of the economic OCP on an explicit trajectory.
pub fn eval_objective(traj: &Trajectory, opts: &OcpOptions) -> (f64, ObjectiveBreakdown) {
    let mut b = ObjectiveBreakdown::default();
    for (t, p) in traj.p.iter().enumerate() {
        let price = traj.price.get(t).copied().unwrap_or(0.0);
        b.price += price * p.sum();
    }
    for x in &traj.x_bounded {
        for &xi in x.iter() {
            b.temp += opts.r_temp
                * if opts.temp_power == 1 {
                    xi
                } else {
                    xi * xi
                };
        }
    }
    for w in traj.p.windows(2) {
        let d = &w[1] - &w[0];
        b.diff += opts.r_diff * d.norm_squared();
    }
    for &xs in traj.x_sto_terminal.iter() {
        b.storage += opts.r_sto * (xs - traj.sto_target).powi(2);
    }
    for &s in &traj.slacks {
        b.slack += opts.r_slack * s * s;
    }
    (b.total(), b)
}

/// Fixed ingredients of one OCP instance beyond the physical model.
#[derive(Debug, Clone)]
pub struct OcpSetup {
    /// Control interval (s).
    pub tau: f64,
    /// rho * c_p (J m^-3 K^-1).
    pub rho_cp: f64,
    /// Relative price per step, length >= horizon.
    pub price: Vec<f64>,
    /// Consumer demand forecast (W), one vector per step, length >= horizon,
    /// indexed by injection-layout column.
    pub demand: Vec<DVector<f64>>,
    /// Controllable producer columns of the injection layout.
    pub producer_cols: Vec<usize>,
    /// Demand-driven consumer columns.
    pub consumer_cols: Vec<usize>,
    /// Fixed injections (W) per step per layout column (e.g. a prosumer
    /// producing a constant 100 kW), length >= horizon or empty.
    pub fixed_w: Vec<DVector<f64>>,
    /// Refined nodes carrying the soft temperature box.
    pub bounded_nodes: Vec<usize>,
    /// Storage cells entering the terminal tracking term.
    pub storage_cells: Vec<usize>,
    /// Expanded-edge pair (charge, discharge) for the volume balance.
    pub storage_edge_pair: Option<(usize, usize)>,
    /// Reduced loops held at zero flow (e.g. storage circuits of a
    /// storage-disabled controller variant).
    pub pinned_loops: Vec<usize>,
}

/// Direct-transcription NLP over (states, blocked inputs, slacks).
#[derive(Clone)]
pub struct OcpModel {
    pub hyd: HydraulicModel,
    pub tg: ThermalGraph,
    pub layout: InjectionLayout,
    pub opts: OcpOptions,
    pub setup: OcpSetup,
    pub blocking: MoveBlocking,
    x0: DVector<f64>,
    /// F_r^T, expanded edges x reduced loops.
    ft: DMatrix<f64>,
    n_nodes: usize,
    n_loops: usize,
    n_p: usize,
    n_c: usize,
    in_segs: Vec<Vec<usize>>,
    out_segs: Vec<Vec<usize>>,
    /// Bidirectional expanded-edge pairs (forward index, reverse index).
    bidir_pairs: Vec<(usize, usize)>,
    off_u: usize,
    off_ts: usize,
    off_ds: usize,
    n_var: usize,
}

impl OcpModel {
    pub fn new(
        hyd: HydraulicModel,
        tg: ThermalGraph,
        layout: InjectionLayout,
        x0: DVector<f64>,
        opts: OcpOptions,
        setup: OcpSetup,
    ) -> Result<Self> {
        opts.validate()?;
        let n = opts.horizon;
        if setup.price.len() < n || setup.demand.len() < n {
            return Err(DhnError::Config(format!(
                "forecast shorter than horizon: {} price / {} demand steps for N = {n}",
                setup.price.len(),
                setup.demand.len()
            )));
        }
        if !setup.fixed_w.is_empty() && setup.fixed_w.len() < n {
            return Err(DhnError::Config(
                "fixed injection profile shorter than horizon".into(),
            ));
        }
        let n_nodes = tg.n_nodes();
        if x0.len() != n_nodes {
            return Err(DhnError::Dimension {
                what: "initial thermal state",
                expected: n_nodes,
                got: x0.len(),
            });
        }
        let blocking = apply_move_blocking(n, opts.control_horizon, opts.block_len);
        let ft = hyd.loops.f_r.transpose();
        let n_loops = hyd.loops.m_r();
        let mut in_segs = vec![Vec::new(); n_nodes];
        let mut out_segs = vec![Vec::new(); n_nodes];
        for (s, &(t, h)) in tg.segments.iter().enumerate() {
            out_segs[t].push(s);
            in_segs[h].push(s);
        }
        let bidir_pairs: Vec<(usize, usize)> = hyd
            .graph
            .reverse_of
            .iter()
            .map(|(&rev, &fwd)| (fwd, rev))
            .collect();

        let n_p = setup.producer_cols.len();
        let n_c = setup.consumer_cols.len();
        let off_u = n * n_nodes;
        let off_ts = off_u + blocking.n_free * (n_loops + n_p);
        let off_ds = off_ts + n;
        let n_var = off_ds + n * n_c;
        Ok(Self {
            hyd,
            tg,
            layout,
            opts,
            setup,
            blocking,
            x0,
            ft,
            n_nodes,
            n_loops,
            n_p,
            n_c,
            in_segs,
            out_segs,
            bidir_pairs,
            off_u,
            off_ts,
            off_ds,
            n_var,
        })
    }

    // Decision-vector indexing. States are x_1..x_N.
    fn xi(&self, t: usize, i: usize) -> usize {
        debug_assert!((1..=self.opts.horizon).contains(&t));
        (t - 1) * self.n_nodes + i
    }
    fn qi(&self, block: usize, l: usize) -> usize {
        self.off_u + block * (self.n_loops + self.n_p) + l
    }
    fn pi(&self, block: usize, p: usize) -> usize {
        self.off_u + block * (self.n_loops + self.n_p) + self.n_loops + p
    }
    fn tsi(&self, t: usize) -> usize {
        self.off_ts + (t - 1)
    }
    fn dsi(&self, t: usize, c: usize) -> usize {
        self.off_ds + t * self.n_c + c
    }

    pub fn n_var(&self) -> usize {
        self.n_var
    }

    /// Loop flows (m^3/s) of one free block of a decision vector.
    pub fn input_q_r(&self, z: &[f64], block: usize) -> DVector<f64> {
        DVector::from_fn(self.n_loops, |l, _| FLOW_SCALE * z[self.qi(block, l)])
    }

    /// Producer powers (W), aligned with `setup.producer_cols`.
    pub fn input_powers(&self, z: &[f64], block: usize) -> DVector<f64> {
        DVector::from_fn(self.n_p, |p, _| POWER_SCALE * z[self.pi(block, p)])
    }

    /// Demand shortfall slack (W) of consumer column c at step t.
    pub fn demand_shortfall(&self, z: &[f64], t: usize, c: usize) -> f64 {
        POWER_SCALE * z[self.dsi(t, c)]
    }

    /// d q_edge[e] (m^3/s) / d q_r[l] (solver units).
    fn flow_coeff(&self, edge: usize, l: usize) -> f64 {
        FLOW_SCALE * self.ft[(edge, l)]
    }

    /// Expanded-edge flows (m^3/s) at a free block.
    fn edge_flows(&self, z: &[f64], block: usize) -> DVector<f64> {
        let q_r = DVector::from_fn(self.n_loops, |l, _| z[self.qi(block, l)]);
        FLOW_SCALE * &self.ft * q_r
    }

    /// Nodal injection bw (K m^3/s) at step t, plus its slack columns.
    fn injections(&self, z: &[f64], t: usize) -> DVector<f64> {
        let block = self.blocking.map[t];
        let mut w = DVector::zeros(self.layout.exchangers.len());
        for (p, &col) in self.setup.producer_cols.iter().enumerate() {
            w[col] += POWER_SCALE * z[self.pi(block, p)];
        }
        for (c, &col) in self.setup.consumer_cols.iter().enumerate() {
            w[col] += -self.setup.demand[t][col] + POWER_SCALE * z[self.dsi(t, c)];
        }
        if !self.setup.fixed_w.is_empty() {
            w += &self.setup.fixed_w[t];
        }
        self.layout.inject(&w).expect("layout dimensions fixed")
    }

    fn ineq_counts(&self) -> (usize, usize, usize, usize) {
        let n = self.opts.horizon;
        let loops = self.blocking.n_free * self.n_loops;
        let temp = 2 * n * self.setup.bounded_nodes.len();
        let vol = if self.opts.storage_volume_balance && self.setup.storage_edge_pair.is_some() {
            2
        } else {
            0
        };
        let comp = match self.opts.complementarity {
            ComplementarityMode::Relaxed { .. } => self.blocking.n_free * self.bidir_pairs.len(),
            ComplementarityMode::Penalty { .. } => 0,
        };
        (loops, temp, vol, comp)
    }

    /// Allowed signed charge volume (m^3) for the balance constraint.
    fn volume_delta(&self) -> f64 {
        let daily: f64 = self
            .setup
            .storage_cells
            .iter()
            .map(|&i| self.tg.volumes[i])
            .sum();
        self.opts.volume_balance_delta * daily.max(1.0)
    }

    /// Objective terms at a decision vector.
    pub fn breakdown(&self, z: &[f64]) -> ObjectiveBreakdown {
        let n = self.opts.horizon;
        let o = &self.opts;
        let mut b = ObjectiveBreakdown::default();
        for t in 0..n {
            let block = self.blocking.map[t];
            for p in 0..self.n_p {
                b.price += self.setup.price[t] * z[self.pi(block, p)];
            }
        }
        for t in 1..=n {
            for &i in &self.setup.bounded_nodes {
                let xi = z[self.xi(t, i)];
                b.temp += o.r_temp * if o.temp_power == 1 { xi } else { xi * xi };
            }
        }
        for bb in 1..self.blocking.n_free {
            for p in 0..self.n_p {
                let d = z[self.pi(bb, p)] - z[self.pi(bb - 1, p)];
                b.diff += o.r_diff * d * d;
            }
        }
        for &i in &self.setup.storage_cells {
            let d = z[self.xi(n, i)] - o.storage_target;
            b.storage += o.r_sto * d * d;
        }
        for t in 1..=n {
            let s = z[self.tsi(t)];
            b.slack += o.r_slack * s * s;
        }
        for t in 0..n {
            for c in 0..self.n_c {
                let s = z[self.dsi(t, c)];
                b.slack += o.r_slack * s * s;
            }
        }
        if let ComplementarityMode::Penalty { eps_c } = o.complementarity {
            let weights = self.blocking.block_weights();
            for (bb, &w) in weights.iter().enumerate() {
                let q = self.edge_flows(z, bb) / FLOW_SCALE; // back to L/s
                for &(f, r) in &self.bidir_pairs {
                    b.complementarity += eps_c * w * q[f] * q[r];
                }
            }
        }
        b
    }

    /// Cold start: states propagated from x0 under mid-range inputs scaled
    /// into loop feasibility, P sized to the mean demand.
    pub fn cold_start(&self) -> Vec<f64> {
        let n = self.opts.horizon;
        let mut z = vec![0.0; self.n_var];
        // Loop flows: start mid-box, shrink until every loop inequality has
        // slack.
        let mut q_mid = 0.25 * (self.opts.q_r_min + self.opts.q_r_max) / FLOW_SCALE;
        let q_lo = (self.opts.q_r_min / FLOW_SCALE).max(1e-6);
        for _ in 0..60 {
            let q_r = DVector::from_element(self.n_loops, q_mid * FLOW_SCALE);
            let feas = self.hyd.loop_feasibility(&q_r).expect("loop dims fixed");
            if feas.iter().all(|&v| v <= -1e-3 * self.hyd.loop_rhs.amax()) || q_mid <= q_lo {
                break;
            }
            q_mid = (0.7 * q_mid).max(q_lo);
        }
        let mean_demand: f64 = (0..n)
            .map(|t| self.setup.demand[t].sum())
            .sum::<f64>()
            / n as f64;
        let p_each = if self.n_p > 0 {
            (mean_demand / self.n_p as f64 / POWER_SCALE)
                .clamp(0.01, self.opts.p_max / POWER_SCALE)
        } else {
            0.0
        };
        for b in 0..self.blocking.n_free {
            for l in 0..self.n_loops {
                if !self.setup.pinned_loops.contains(&l) {
                    z[self.qi(b, l)] = q_mid;
                }
            }
            for p in 0..self.n_p {
                z[self.pi(b, p)] = p_each;
            }
        }
        // Roll the thermal model forward so the dynamics rows start near
        // feasibility.
        let mut x = self.x0.clone();
        for t in 0..n {
            let block = self.blocking.map[t];
            let q_edges = self.edge_flows(&z, block);
            let q_seg = self.tg.extend_flows(&q_edges).expect("segment dims fixed");
            let bw = self.injections(&z, t);
            if let Ok(next) = self.tg.step_implicit_euler(&x, &q_seg, &bw, self.setup.tau, true) {
                x = next;
            }
            for i in 0..self.n_nodes {
                z[self.xi(t + 1, i)] = x[i];
            }
        }
        z
    }
}

impl NlpModel for OcpModel {
    fn n(&self) -> usize {
        self.n_var
    }

    fn m_eq(&self) -> usize {
        self.opts.horizon * self.n_nodes
    }

    fn m_ineq(&self) -> usize {
        let (a, b, c, d) = self.ineq_counts();
        a + b + c + d
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.opts.horizon;
        let mut lb = vec![f64::NEG_INFINITY; self.n_var];
        let mut ub = vec![f64::INFINITY; self.n_var];
        for b in 0..self.blocking.n_free {
            for l in 0..self.n_loops {
                if self.setup.pinned_loops.contains(&l) {
                    lb[self.qi(b, l)] = 0.0;
                    ub[self.qi(b, l)] = 0.0;
                } else {
                    lb[self.qi(b, l)] = self.opts.q_r_min / FLOW_SCALE;
                    ub[self.qi(b, l)] = self.opts.q_r_max / FLOW_SCALE;
                }
            }
            for p in 0..self.n_p {
                lb[self.pi(b, p)] = 0.0;
                ub[self.pi(b, p)] = self.opts.p_max / POWER_SCALE;
            }
        }
        for t in 1..=n {
            lb[self.tsi(t)] = 0.0;
        }
        for t in 0..n {
            for (c, &col) in self.setup.consumer_cols.iter().enumerate() {
                lb[self.dsi(t, c)] = 0.0;
                // Shortfall can at most cancel the demand.
                ub[self.dsi(t, c)] = self.setup.demand[t][col].max(0.0) / POWER_SCALE;
            }
        }
        (lb, ub)
    }

    fn objective(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let n = self.opts.horizon;
        let o = &self.opts;
        for t in 0..n {
            let block = self.blocking.map[t];
            for p in 0..self.n_p {
                grad[self.pi(block, p)] += self.setup.price[t];
            }
        }
        for t in 1..=n {
            for &i in &self.setup.bounded_nodes {
                let k = self.xi(t, i);
                grad[k] += if o.temp_power == 1 {
                    o.r_temp
                } else {
                    2.0 * o.r_temp * z[k]
                };
            }
        }
        for b in 1..self.blocking.n_free {
            for p in 0..self.n_p {
                let (k1, k0) = (self.pi(b, p), self.pi(b - 1, p));
                let d = z[k1] - z[k0];
                grad[k1] += 2.0 * o.r_diff * d;
                grad[k0] -= 2.0 * o.r_diff * d;
            }
        }
        for &i in &self.setup.storage_cells {
            let k = self.xi(n, i);
            grad[k] += 2.0 * o.r_sto * (z[k] - o.storage_target);
        }
        for t in 1..=n {
            let k = self.tsi(t);
            grad[k] += 2.0 * o.r_slack * z[k];
        }
        for t in 0..n {
            for c in 0..self.n_c {
                let k = self.dsi(t, c);
                grad[k] += 2.0 * o.r_slack * z[k];
            }
        }
        if let ComplementarityMode::Penalty { eps_c } = o.complementarity {
            let weights = self.blocking.block_weights();
            for (b, &w) in weights.iter().enumerate() {
                for &(f, r) in &self.bidir_pairs {
                    // q in L/s: q_e = sum_l ft[e,l] q_r[l].
                    let qf: f64 = (0..self.n_loops)
                        .map(|l| self.ft[(f, l)] * z[self.qi(b, l)])
                        .sum();
                    let qr: f64 = (0..self.n_loops)
                        .map(|l| self.ft[(r, l)] * z[self.qi(b, l)])
                        .sum();
                    for l in 0..self.n_loops {
                        grad[self.qi(b, l)] +=
                            eps_c * w * (self.ft[(f, l)] * qr + self.ft[(r, l)] * qf);
                    }
                }
            }
        }
        self.breakdown(z).total()
    }

    fn eval_g(&self, z: &[f64], g: &mut [f64]) {
        let n = self.opts.horizon;
        let tau = self.setup.tau;
        for t in 0..n {
            let block = self.blocking.map[t];
            let q_edges = self.edge_flows(z, block);
            let q_seg = self.tg.extend_flows(&q_edges).expect("segment dims fixed");
            let bw = self.injections(z, t);
            for i in 0..self.n_nodes {
                let xn = z[self.xi(t + 1, i)];
                let xp = if t == 0 {
                    self.x0[i]
                } else {
                    z[self.xi(t, i)]
                };
                let inflow_term: f64 = self.in_segs[i]
                    .iter()
                    .map(|&s| q_seg[s] * z[self.xi(t + 1, self.tg.segments[s].0)])
                    .sum();
                let r = t * self.n_nodes + i;
                if self.tg.is_junction(i) {
                    let inflow: f64 = self.in_segs[i].iter().map(|&s| q_seg[s]).sum();
                    g[r] = (inflow + JUNCTION_EPS) * xn - inflow_term - JUNCTION_EPS * xp;
                } else {
                    let outflow: f64 = self.out_segs[i].iter().map(|&s| q_seg[s]).sum();
                    g[r] = self.tg.volumes[i] * (xn - xp)
                        - tau * (inflow_term - (outflow + self.tg.alphas[i]) * xn + bw[i]);
                }
            }
        }
    }

    fn eval_h(&self, z: &[f64], h: &mut [f64]) {
        let (n_loop_rows, n_temp, n_vol, _) = self.ineq_counts();
        let n = self.opts.horizon;
        let mut k = 0;
        for b in 0..self.blocking.n_free {
            let q_r = DVector::from_fn(self.n_loops, |l, _| FLOW_SCALE * z[self.qi(b, l)]);
            let feas = self.hyd.loop_feasibility(&q_r).expect("loop dims fixed");
            for i in 0..self.n_loops {
                h[k] = LOOP_SCALE * feas[i];
                k += 1;
            }
        }
        debug_assert_eq!(k, n_loop_rows);
        for t in 1..=n {
            let s = z[self.tsi(t)];
            for &i in &self.setup.bounded_nodes {
                let xi = z[self.xi(t, i)];
                h[k] = xi - self.opts.x_max - s;
                h[k + 1] = self.opts.x_min - xi - s;
                k += 2;
            }
        }
        debug_assert_eq!(k, n_loop_rows + n_temp);
        if n_vol == 2 {
            let (fwd, rev) = self.setup.storage_edge_pair.unwrap();
            let mut net = 0.0;
            for t in 0..n {
                let b = self.blocking.map[t];
                for l in 0..self.n_loops {
                    net += self.setup.tau
                        * FLOW_SCALE
                        * (self.ft[(fwd, l)] - self.ft[(rev, l)])
                        * z[self.qi(b, l)];
                }
            }
            let delta = self.volume_delta();
            h[k] = net - delta;
            h[k + 1] = -net - delta;
            k += 2;
        }
        if let ComplementarityMode::Relaxed { eps } = self.opts.complementarity {
            for b in 0..self.blocking.n_free {
                let q = self.edge_flows(z, b) / FLOW_SCALE;
                for &(f, r) in &self.bidir_pairs {
                    h[k] = q[f] * q[r] - eps;
                    k += 1;
                }
            }
        }
        debug_assert_eq!(k, self.m_ineq());
    }

    fn jac_g_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.opts.horizon;
        let mut pat = Vec::new();
        for t in 0..n {
            let block = self.blocking.map[t];
            for i in 0..self.n_nodes {
                let r = t * self.n_nodes + i;
                pat.push((r, self.xi(t + 1, i)));
                if t > 0 {
                    pat.push((r, self.xi(t, i)));
                }
                for &s in &self.in_segs[i] {
                    pat.push((r, self.xi(t + 1, self.tg.segments[s].0)));
                }
                for l in 0..self.n_loops {
                    pat.push((r, self.qi(block, l)));
                }
                if !self.tg.is_junction(i) {
                    for (p, &col) in self.setup.producer_cols.iter().enumerate() {
                        if self.layout.exchangers[col].node == i {
                            pat.push((r, self.pi(block, p)));
                        }
                    }
                    for (c, &col) in self.setup.consumer_cols.iter().enumerate() {
                        if self.layout.exchangers[col].node == i {
                            pat.push((r, self.dsi(t, c)));
                        }
                    }
                }
            }
        }
        pat
    }

    fn jac_g(&self, z: &[f64], vals: &mut [f64]) {
        let n = self.opts.horizon;
        let tau = self.setup.tau;
        let mut k = 0;
        for t in 0..n {
            let block = self.blocking.map[t];
            let q_edges = self.edge_flows(z, block);
            let q_seg = self.tg.extend_flows(&q_edges).expect("segment dims fixed");
            for i in 0..self.n_nodes {
                let xn = z[self.xi(t + 1, i)];
                let junction = self.tg.is_junction(i);
                let inflow: f64 = self.in_segs[i].iter().map(|&s| q_seg[s]).sum();
                let outflow: f64 = self.out_segs[i].iter().map(|&s| q_seg[s]).sum();
                // d/d xn_i
                vals[k] = if junction {
                    inflow + JUNCTION_EPS
                } else {
                    self.tg.volumes[i] + tau * (outflow + self.tg.alphas[i])
                };
                k += 1;
                // d/d xp_i
                if t > 0 {
                    vals[k] = if junction {
                        -JUNCTION_EPS
                    } else {
                        -self.tg.volumes[i]
                    };
                    k += 1;
                }
                // d/d xn_tail per inflow segment
                for &s in &self.in_segs[i] {
                    vals[k] = if junction { -q_seg[s] } else { -tau * q_seg[s] };
                    k += 1;
                }
                // d/d q_r[l]
                for l in 0..self.n_loops {
                    let mut v = 0.0;
                    for &s in &self.in_segs[i] {
                        let coeff = self.flow_coeff(self.tg.segment_origin[s], l);
                        let xt = z[self.xi(t + 1, self.tg.segments[s].0)];
                        v += if junction {
                            coeff * (xn - xt)
                        } else {
                            -tau * coeff * xt
                        };
                    }
                    if !junction {
                        for &s in &self.out_segs[i] {
                            let coeff = self.flow_coeff(self.tg.segment_origin[s], l);
                            v += tau * coeff * xn;
                        }
                    }
                    vals[k] = v;
                    k += 1;
                }
                if !junction {
                    let binj = 1.0 / self.setup.rho_cp;
                    for &col in &self.setup.producer_cols {
                        if self.layout.exchangers[col].node == i {
                            vals[k] = -tau * POWER_SCALE * binj;
                            k += 1;
                        }
                    }
                    for &col in &self.setup.consumer_cols {
                        if self.layout.exchangers[col].node == i {
                            vals[k] = -tau * POWER_SCALE * binj;
                            k += 1;
                        }
                    }
                }
            }
        }
        debug_assert_eq!(k, vals.len());
    }

    fn jac_h_pattern(&self) -> Vec<(usize, usize)> {
        let (_, _, n_vol, _) = self.ineq_counts();
        let n = self.opts.horizon;
        let mut pat = Vec::new();
        let mut row = 0;
        for b in 0..self.blocking.n_free {
            for _i in 0..self.n_loops {
                for l in 0..self.n_loops {
                    pat.push((row, self.qi(b, l)));
                }
                row += 1;
            }
        }
        for t in 1..=n {
            for &i in &self.setup.bounded_nodes {
                pat.push((row, self.xi(t, i)));
                pat.push((row, self.tsi(t)));
                pat.push((row + 1, self.xi(t, i)));
                pat.push((row + 1, self.tsi(t)));
                row += 2;
            }
        }
        if n_vol == 2 {
            for b in 0..self.blocking.n_free {
                for l in 0..self.n_loops {
                    pat.push((row, self.qi(b, l)));
                    pat.push((row + 1, self.qi(b, l)));
                }
            }
            row += 2;
        }
        if matches!(self.opts.complementarity, ComplementarityMode::Relaxed { .. }) {
            for b in 0..self.blocking.n_free {
                for _pair in &self.bidir_pairs {
                    for l in 0..self.n_loops {
                        pat.push((row, self.qi(b, l)));
                    }
                    row += 1;
                }
            }
        }
        pat
    }

    fn jac_h(&self, z: &[f64], vals: &mut [f64]) {
        let (_, _, n_vol, _) = self.ineq_counts();
        let n = self.opts.horizon;
        let mut k = 0;
        for b in 0..self.blocking.n_free {
            let q_r = DVector::from_fn(self.n_loops, |l, _| FLOW_SCALE * z[self.qi(b, l)]);
            for zi in &self.hyd.z {
                // d/dq_r of q^T Z q in solver units.
                let grad = 2.0 * FLOW_SCALE * LOOP_SCALE * (zi * &q_r);
                for l in 0..self.n_loops {
                    vals[k] = grad[l];
                    k += 1;
                }
            }
        }
        for _t in 1..=n {
            for _i in &self.setup.bounded_nodes {
                vals[k] = 1.0; // x
                vals[k + 1] = -1.0; // slack
                vals[k + 2] = -1.0; // -x
                vals[k + 3] = -1.0; // slack
                k += 4;
            }
        }
        if n_vol == 2 {
            let (fwd, rev) = self.setup.storage_edge_pair.unwrap();
            let weights = self.blocking.block_weights();
            for (b, &w) in weights.iter().enumerate() {
                for l in 0..self.n_loops {
                    let v = w * self.setup.tau * FLOW_SCALE
                        * (self.ft[(fwd, l)] - self.ft[(rev, l)]);
                    vals[k] = v;
                    vals[k + 1] = -v;
                    k += 2;
                }
                let _ = b;
            }
        }
        if matches!(self.opts.complementarity, ComplementarityMode::Relaxed { .. }) {
            for b in 0..self.blocking.n_free {
                let q = self.edge_flows(z, b) / FLOW_SCALE;
                for &(f, r) in &self.bidir_pairs {
                    for l in 0..self.n_loops {
                        vals[k] = self.ft[(f, l)] * q[r] + self.ft[(r, l)] * q[f];
                        k += 1;
                    }
                }
            }
        }
        debug_assert_eq!(k, vals.len());
    }

    fn hess_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.opts.horizon;
        let mut pat = Vec::new();
        // Objective: quadratic diagonals and the diff-term band.
        if self.opts.temp_power == 2 {
            for t in 1..=n {
                for &i in &self.setup.bounded_nodes {
                    pat.push((self.xi(t, i), self.xi(t, i)));
                }
            }
        }
        for b in 1..self.blocking.n_free {
            for p in 0..self.n_p {
                let (k1, k0) = (self.pi(b, p), self.pi(b - 1, p));
                pat.push((k1, k1));
                pat.push((k0, k0));
                pat.push((k0, k1));
                pat.push((k1, k0));
            }
        }
        for &i in &self.setup.storage_cells {
            pat.push((self.xi(n, i), self.xi(n, i)));
        }
        for t in 1..=n {
            pat.push((self.tsi(t), self.tsi(t)));
        }
        for t in 0..n {
            for c in 0..self.n_c {
                pat.push((self.dsi(t, c), self.dsi(t, c)));
            }
        }
        // Complementarity coupling (penalty or relaxed: same q-q block).
        for b in 0..self.blocking.n_free {
            for _pair in &self.bidir_pairs {
                for l1 in 0..self.n_loops {
                    for l2 in 0..self.n_loops {
                        pat.push((self.qi(b, l1), self.qi(b, l2)));
                    }
                }
            }
        }
        // Dynamics bilinear terms: (x, q) cross blocks per row.
        for t in 0..n {
            let block = self.blocking.map[t];
            for i in 0..self.n_nodes {
                for &s in &self.in_segs[i] {
                    let xt = self.xi(t + 1, self.tg.segments[s].0);
                    for l in 0..self.n_loops {
                        pat.push((xt, self.qi(block, l)));
                        pat.push((self.qi(block, l), xt));
                    }
                }
                let xn = self.xi(t + 1, i);
                for l in 0..self.n_loops {
                    pat.push((xn, self.qi(block, l)));
                    pat.push((self.qi(block, l), xn));
                }
            }
        }
        // Loop-row Hessians: dense q-q block per free block.
        for b in 0..self.blocking.n_free {
            for l1 in 0..self.n_loops {
                for l2 in 0..self.n_loops {
                    pat.push((self.qi(b, l1), self.qi(b, l2)));
                }
            }
        }
        pat
    }

    fn hess(&self, _z: &[f64], obj_scale: f64, lam: &[f64], mu: &[f64], vals: &mut [f64]) {
        let n = self.opts.horizon;
        let o = &self.opts;
        let tau = self.setup.tau;
        let mut k = 0;
        if o.temp_power == 2 {
            for _t in 1..=n {
                for _i in &self.setup.bounded_nodes {
                    vals[k] = obj_scale * 2.0 * o.r_temp;
                    k += 1;
                }
            }
        }
        for _b in 1..self.blocking.n_free {
            for _p in 0..self.n_p {
                vals[k] = obj_scale * 2.0 * o.r_diff;
                vals[k + 1] = obj_scale * 2.0 * o.r_diff;
                vals[k + 2] = -obj_scale * 2.0 * o.r_diff;
                vals[k + 3] = -obj_scale * 2.0 * o.r_diff;
                k += 4;
            }
        }
        for _i in &self.setup.storage_cells {
            vals[k] = obj_scale * 2.0 * o.r_sto;
            k += 1;
        }
        for _t in 1..=n {
            vals[k] = obj_scale * 2.0 * o.r_slack;
            k += 1;
        }
        for _t in 0..n {
            for _c in 0..self.n_c {
                vals[k] = obj_scale * 2.0 * o.r_slack;
                k += 1;
            }
        }
        // Complementarity q-q block: penalty uses the objective scale, the
        // relaxed mode uses the row multipliers.
        let weights = self.blocking.block_weights();
        let (_, n_temp, n_vol, _) = self.ineq_counts();
        let comp_row_base = self.blocking.n_free * self.n_loops + n_temp + n_vol;
        for b in 0..self.blocking.n_free {
            for (pi, &(f, r)) in self.bidir_pairs.iter().enumerate() {
                let scale = match o.complementarity {
                    ComplementarityMode::Penalty { eps_c } => obj_scale * eps_c * weights[b],
                    ComplementarityMode::Relaxed { .. } => {
                        mu[comp_row_base + b * self.bidir_pairs.len() + pi]
                    }
                };
                for l1 in 0..self.n_loops {
                    for l2 in 0..self.n_loops {
                        vals[k] = scale
                            * (self.ft[(f, l1)] * self.ft[(r, l2)]
                                + self.ft[(r, l1)] * self.ft[(f, l2)]);
                        k += 1;
                    }
                }
            }
        }
        // Dynamics bilinear blocks, weighted by the row multipliers.
        for t in 0..n {
            for i in 0..self.n_nodes {
                let row = t * self.n_nodes + i;
                let lr = lam[row];
                let junction = self.tg.is_junction(i);
                for &s in &self.in_segs[i] {
                    for l in 0..self.n_loops {
                        let coeff = self.flow_coeff(self.tg.segment_origin[s], l);
                        let v = if junction { -lr * coeff } else { -lr * tau * coeff };
                        vals[k] = v;
                        vals[k + 1] = v;
                        k += 2;
                    }
                }
                for l in 0..self.n_loops {
                    let mut v = 0.0;
                    if junction {
                        for &s in &self.in_segs[i] {
                            v += lr * self.flow_coeff(self.tg.segment_origin[s], l);
                        }
                    } else {
                        for &s in &self.out_segs[i] {
                            v += lr * tau * self.flow_coeff(self.tg.segment_origin[s], l);
                        }
                    }
                    vals[k] = v;
                    vals[k + 1] = v;
                    k += 2;
                }
            }
        }
        // Loop-row Hessians: 2 mu_i Z_i in solver units.
        for b in 0..self.blocking.n_free {
            let mut block = DMatrix::zeros(self.n_loops, self.n_loops);
            for (i, zi) in self.hyd.z.iter().enumerate() {
                let m = mu[b * self.n_loops + i];
                if m != 0.0 {
                    block += 2.0 * m * FLOW_SCALE * FLOW_SCALE * LOOP_SCALE * zi;
                }
            }
            for l1 in 0..self.n_loops {
                for l2 in 0..self.n_loops {
                    vals[k] = block[(l1, l2)];
                    k += 1;
                }
            }
        }
        debug_assert_eq!(k, vals.len());
    }
}

/// Wrap a transcribed model into the solver-facing problem with its layout.
pub fn build_ocp(model: OcpModel) -> NlpProblem {
    let n = model.opts.horizon;
    let layout = vec![
        ("states".to_string(), 0, model.off_u),
        (
            "inputs".to_string(),
            model.off_u,
            model.off_ts - model.off_u,
        ),
        ("temp_slack".to_string(), model.off_ts, n),
        (
            "demand_slack".to_string(),
            model.off_ds,
            model.n_var - model.off_ds,
        ),
    ];
    let mut problem = NlpProblem::new(Box::new(model));
    problem.layout = layout;
    problem
}

/// Shift-by-one warm start: states advance one step, the final entry is
/// duplicated, inputs are re-read at each block's (shifted) start time, and
/// slacks reset to zero. Falls back to the cold start on dimension mismatch.
pub fn warm_start(model: &OcpModel, previous: &NlpSolution) -> Vec<f64> {
    if previous.x.len() != model.n_var {
        return model.cold_start();
    }
    let n = model.opts.horizon;
    let prev = &previous.x;
    let mut z = vec![0.0; model.n_var];
    for t in 1..=n {
        let src = (t + 1).min(n);
        for i in 0..model.n_nodes {
            z[model.xi(t, i)] = prev[model.xi(src, i)];
        }
    }
    for b in 0..model.blocking.n_free {
        // First step driven by this block, shifted one into the previous
        // solution's grid.
        let start = model
            .blocking
            .map
            .iter()
            .position(|&bb| bb == b)
            .unwrap_or(0);
        let src_block = model.blocking.map[(start + 1).min(n - 1)];
        for l in 0..model.n_loops {
            z[model.qi(b, l)] = prev[model.qi(src_block, l)];
        }
        for p in 0..model.n_p {
            z[model.pi(b, p)] = prev[model.pi(src_block, p)];
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::chain_spec;
    use crate::network::expand_bidirectional;
    use crate::ocp::{solve_nlp, SolveLimits};
    use crate::thermal::refine_mesh;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    const RHO: f64 = 981.0;
    const CP: f64 = 4182.0;

    #[test]
    fn blocking_examples() {
        let b = apply_move_blocking(8, 8, 4);
        assert_eq!(b.map, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(b.n_free, 2);

        let b = apply_move_blocking(5, 5, 1);
        assert_eq!(b.map, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.n_free, 5);

        let b = apply_move_blocking(10, 6, 2);
        assert_eq!(b.map, vec![0, 0, 1, 1, 2, 2, 3, 3, 3, 3]);
        assert_eq!(b.n_free, 4);
        assert_eq!(b.block_weights(), vec![2.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn objective_terms_arithmetic() {
        let opts = OcpOptions {
            r_diff: 2.0,
            r_temp: 0.0,
            r_sto: 0.0,
            r_slack: 3.0,
            ..OcpOptions::default()
        };
        let traj = Trajectory {
            price: vec![0.0, 0.0],
            p: vec![DVector::from_element(1, 1.0), DVector::from_element(1, 3.0)],
            x_bounded: vec![],
            x_sto_terminal: DVector::zeros(0),
            sto_target: 0.0,
            slacks: vec![0.0, 2.0],
        };
        let (total, b) = eval_objective(&traj, &opts);
        assert_relative_eq!(b.diff, 8.0, epsilon = 1e-12);
        assert_relative_eq!(b.slack, 12.0, epsilon = 1e-12);
        assert_relative_eq!(total, 20.0, epsilon = 1e-12);

        let constant = Trajectory {
            p: vec![DVector::from_element(1, 2.0); 4],
            ..traj
        };
        let (_, b) = eval_objective(&constant, &opts);
        assert_relative_eq!(b.diff, 0.0, epsilon = 1e-15);
    }

    fn toy_model(n: usize, opts: OcpOptions) -> OcpModel {
        let spec = chain_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let tg = refine_mesh(&g, &[1, 1, 1, 1], RHO, CP).unwrap();
        let layout = InjectionLayout::from_spec(&tg, &spec, RHO, CP).unwrap();
        let hyd = HydraulicModel::new(g, RHO, 100_000).unwrap();
        let producer_cols: Vec<usize> = layout
            .exchangers
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == crate::thermal::ExchangerKind::Producer)
            .map(|(j, _)| j)
            .collect();
        let consumer_cols: Vec<usize> = layout
            .exchangers
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == crate::thermal::ExchangerKind::Consumer)
            .map(|(j, _)| j)
            .collect();
        let n_cols = layout.exchangers.len();
        let mut demand = DVector::zeros(n_cols);
        for &c in &consumer_cols {
            demand[c] = 8.0e4;
        }
        let setup = OcpSetup {
            tau: 900.0,
            rho_cp: RHO * CP,
            price: vec![1.0; n],
            demand: vec![demand; n],
            producer_cols,
            consumer_cols,
            fixed_w: Vec::new(),
            bounded_nodes: vec![tg.n_junctions], // first cell
            storage_cells: Vec::new(),
            storage_edge_pair: None,
            pinned_loops: Vec::new(),
        };
        let x0 = DVector::from_element(tg.n_nodes(), 60.0);
        OcpModel::new(hyd, tg, layout, x0, opts, setup).unwrap()
    }

    #[test]
    fn one_step_matches_implicit_euler() {
        // Pin both inputs via bounds; the only feasible point of the
        // equality block is the implicit-Euler image of x0.
        let opts = OcpOptions {
            horizon: 1,
            control_horizon: 1,
            block_len: 1,
            q_r_min: 4.0e-3,
            q_r_max: 4.0e-3,
            p_max: 3.0e5,
            r_temp: 0.0,
            r_slack: 1e6,
            x_min: -1e3,
            x_max: 1e3,
            ..OcpOptions::default()
        };
        let model = toy_model(1, opts);
        let mut z0 = model.cold_start();
        // Pin P as well by squeezing its bounds through a custom model is
        // overkill; instead zero the price so P rides to whatever satisfies
        // the dynamics together with zero demand slack.
        for p in 0..model.n_p {
            z0[model.pi(0, p)] = 2.0;
        }
        let sol = solve_nlp(&model, &z0, &SolveLimits::default()).unwrap();
        assert!(sol.status.is_usable(), "status {:?}", sol.status);

        // Reproduce with the thermal stepper at the solved inputs.
        let q_edges = model.edge_flows(&sol.x, 0);
        let q_seg = model.tg.extend_flows(&q_edges).unwrap();
        let bw = model.injections(&sol.x, 0);
        let next = model
            .tg
            .step_implicit_euler(&model.x0, &q_seg, &bw, 900.0, true)
            .unwrap();
        for i in 0..model.n_nodes {
            assert_relative_eq!(sol.x[model.xi(1, i)], next[i], epsilon = 1e-5);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let opts = OcpOptions {
            horizon: 2,
            control_horizon: 2,
            block_len: 1,
            temp_power: 2,
            storage_volume_balance: false,
            ..OcpOptions::default()
        };
        let model = toy_model(2, opts);
        let n = model.n_var();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let base = model.cold_start();
        for trial in 0..5 {
            let z: Vec<f64> = base
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let scale = if i >= model.off_ts { 0.05 } else { 0.2 };
                    v + scale * (rng.gen_range(-1.0..1.0) + 0.5)
                })
                .collect();
            let mut grad = vec![0.0; n];
            let _ = model.objective(&z, &mut grad);
            let m_eq = model.m_eq();
            let m_ineq = model.m_ineq();
            let mut g0 = vec![0.0; m_eq];
            let mut h0 = vec![0.0; m_ineq];
            model.eval_g(&z, &mut g0);
            model.eval_h(&z, &mut h0);

            let gp = model.jac_g_pattern();
            let hp = model.jac_h_pattern();
            let mut gv = vec![0.0; gp.len()];
            let mut hv = vec![0.0; hp.len()];
            model.jac_g(&z, &mut gv);
            model.jac_h(&z, &mut hv);
            let mut jg = vec![vec![0.0; n]; m_eq];
            for (&(r, c), &v) in gp.iter().zip(&gv) {
                jg[r][c] += v;
            }
            let mut jh = vec![vec![0.0; n]; m_ineq];
            for (&(r, c), &v) in hp.iter().zip(&hv) {
                jh[r][c] += v;
            }

            let eps = 1e-6;
            for i in (0..n).step_by(3) {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += eps;
                zm[i] -= eps;
                let mut tmp = vec![0.0; n];
                let fp = model.objective(&zp, &mut tmp);
                let fm = model.objective(&zm, &mut tmp);
                let fd = (fp - fm) / (2.0 * eps);
                let scale = 1.0 + grad[i].abs().max(fd.abs());
                assert!(
                    (grad[i] - fd).abs() / scale < 1e-6,
                    "trial {trial} grad[{i}]: {} vs fd {}",
                    grad[i],
                    fd
                );
                let mut gp_v = vec![0.0; m_eq];
                let mut gm_v = vec![0.0; m_eq];
                model.eval_g(&zp, &mut gp_v);
                model.eval_g(&zm, &mut gm_v);
                for r in 0..m_eq {
                    let fd = (gp_v[r] - gm_v[r]) / (2.0 * eps);
                    let scale = 1.0 + jg[r][i].abs().max(fd.abs());
                    assert!(
                        (jg[r][i] - fd).abs() / scale < 1e-6,
                        "trial {trial} jac_g[{r}][{i}]: {} vs fd {}",
                        jg[r][i],
                        fd
                    );
                }
                let mut hp_v = vec![0.0; m_ineq];
                let mut hm_v = vec![0.0; m_ineq];
                model.eval_h(&zp, &mut hp_v);
                model.eval_h(&zm, &mut hm_v);
                for r in 0..m_ineq {
                    let fd = (hp_v[r] - hm_v[r]) / (2.0 * eps);
                    let scale = 1.0 + jh[r][i].abs().max(fd.abs());
                    assert!(
                        (jh[r][i] - fd).abs() / scale < 1e-6,
                        "trial {trial} jac_h[{r}][{i}]: {} vs fd {}",
                        jh[r][i],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn hessian_matches_finite_difference_of_gradient() {
        use rand::{Rng, SeedableRng};
        let opts = OcpOptions {
            horizon: 2,
            control_horizon: 2,
            block_len: 2,
            temp_power: 2,
            ..OcpOptions::default()
        };
        let model = toy_model(2, opts);
        let n = model.n_var();
        let m_eq = model.m_eq();
        let m_ineq = model.m_ineq();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let z: Vec<f64> = model
            .cold_start()
            .iter()
            .map(|&v| v + 0.1 * rng.gen_range(-1.0..1.0))
            .collect();
        let lam: Vec<f64> = (0..m_eq).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..m_ineq).map(|_| rng.gen_range(0.0..1.0)).collect();

        let hp = model.hess_pattern();
        let mut hv = vec![0.0; hp.len()];
        model.hess(&z, 1.0, &lam, &mu, &mut hv);
        let mut hess = vec![vec![0.0; n]; n];
        for (&(r, c), &v) in hp.iter().zip(&hv) {
            hess[r][c] += v;
        }

        // Lagrangian gradient at a point.
        let lag_grad = |z: &[f64]| -> Vec<f64> {
            let mut grad = vec![0.0; n];
            model.objective(z, &mut grad);
            let gp = model.jac_g_pattern();
            let mut gv = vec![0.0; gp.len()];
            model.jac_g(z, &mut gv);
            for (&(r, c), &v) in gp.iter().zip(&gv) {
                grad[c] += lam[r] * v;
            }
            let hpn = model.jac_h_pattern();
            let mut hvn = vec![0.0; hpn.len()];
            model.jac_h(z, &mut hvn);
            for (&(r, c), &v) in hpn.iter().zip(&hvn) {
                grad[c] += mu[r] * v;
            }
            grad
        };

        let eps = 1e-5;
        for i in (0..n).step_by(5) {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += eps;
            zm[i] -= eps;
            let gp = lag_grad(&zp);
            let gm = lag_grad(&zm);
            for j in 0..n {
                let fd = (gp[j] - gm[j]) / (2.0 * eps);
                let scale = 1.0 + hess[j][i].abs().max(fd.abs());
                assert!(
                    (hess[j][i] - fd).abs() / scale < 1e-5,
                    "hess[{j}][{i}]: {} vs fd {}",
                    hess[j][i],
                    fd
                );
            }
        }
    }

    #[test]
    fn solves_toy_horizon() {
        let opts = OcpOptions {
            horizon: 4,
            control_horizon: 4,
            block_len: 2,
            q_r_min: 1e-4,
            q_r_max: 8e-3,
            p_max: 4e5,
            x_min: 30.0,
            x_max: 95.0,
            storage_target: 0.0,
            r_sto: 0.0,
            ..OcpOptions::default()
        };
        let model = toy_model(4, opts);
        let z0 = model.cold_start();
        let sol = solve_nlp(&model, &z0, &SolveLimits::default()).unwrap();
        assert!(sol.status.is_usable(), "status {:?}", sol.status);
        // Demand slacks should be essentially inactive: the producer can
        // cover an 80 kW load.
        for t in 0..4 {
            for c in 0..model.n_c {
                assert!(sol.x[model.dsi(t, c)] < 1e-4, "active demand slack");
            }
        }
        // Loop flows strictly inside bounds and hydraulically recoverable.
        for b in 0..model.blocking.n_free {
            let q_r = DVector::from_fn(model.n_loops, |l, _| FLOW_SCALE * sol.x[model.qi(b, l)]);
            let state = model.hyd.recover_actuators(&q_r).unwrap();
            assert!(state.nu.min() >= 0.0);
            assert!(state.r.max() <= 1.0 + 1e-9);
        }
        // Warm start from the solution is dimensionally sound and close to
        // feasible.
        let ws = warm_start(&model, &sol);
        let mut g = vec![0.0; model.m_eq()];
        model.eval_g(&ws, &mut g);
        let cold = model.cold_start();
        let mut gc = vec![0.0; model.m_eq()];
        model.eval_g(&cold, &mut gc);
        let res_ws = g.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
        assert!(res_ws.is_finite());
    }
}
