//! Controller variants behind one stepping interface: the rule-based
//! baseline (RBC) and the four MPC configurations (SP, SPS, MP, MPS).

use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::hydraulics::HydraulicModel;
use crate::ocp::{
    solve_nlp, warm_start, NlpSolution, OcpModel, OcpOptions, OcpSetup, SolveLimits, SolveStatus,
};
use crate::scenario::{Instance, Scenario};
use crate::thermal::{ExchangerKind, InjectionLayout, ThermalGraph};
use crate::{DhnError, Result};

/// Controller variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Rbc,
    Sp,
    Sps,
    Mp,
    Mps,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().trim_end_matches("-mpc") {
            "rbc" => Ok(Variant::Rbc),
            "sp" => Ok(Variant::Sp),
            "sps" => Ok(Variant::Sps),
            "mp" => Ok(Variant::Mp),
            "mps" => Ok(Variant::Mps),
            other => Err(DhnError::Config(format!(
                "unknown controller variant `{other}` (expected rbc, sp, sps, mp, mps)"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Rbc => "RBC",
            Variant::Sp => "SP-MPC",
            Variant::Sps => "SPS-MPC",
            Variant::Mp => "MP-MPC",
            Variant::Mps => "MPS-MPC",
        }
    }

    pub fn storage_enabled(self) -> bool {
        matches!(self, Variant::Sps | Variant::Mps)
    }

    pub fn multi_producer(self) -> bool {
        matches!(self, Variant::Mp | Variant::Mps)
    }
}

/// How prosumer exchangers enter the MPC model.
#[derive(Debug, Clone)]
pub enum ProsumerMode {
    /// Demand share only; no controllable injection (SP semantics).
    ConsumerOnly,
    /// Demand share plus a controllable nonnegative injection; the net heat
    /// exchange is the difference.
    NetSigned,
    /// Exogenous injection profile (W per closed-loop step); the prosumer's
    /// own demand share is dropped ("functions as a full producer").
    FixedProducer(Vec<f64>),
}

/// Heating-curve and flow-sizing parameters of the rule-based baseline.
#[derive(Debug, Clone)]
pub struct RbcParams {
    /// Supply setpoint (degC) at the reference outdoor temperature.
    pub t_sup_ref: f64,
    /// Reference outdoor temperature (degC).
    pub t_out_ref: f64,
    /// Curve slope (K of setpoint per K outdoors).
    pub slope: f64,
    /// Design temperature drop across consumers (K) for flow sizing.
    pub dt_design: f64,
    /// Producer-edge flow floor (m^3/s) so the network never stalls.
    pub min_circulation: f64,
    /// Fraction of the loop-inequality boundary the scaled flows may reach.
    pub margin: f64,
}

impl Default for RbcParams {
    fn default() -> Self {
        Self {
            t_sup_ref: 85.0,
            t_out_ref: 10.0,
            slope: 1.0,
            dt_design: 30.0,
            min_circulation: 1e-4,
            margin: 0.9,
        }
    }
}

/// Supply setpoint from the heating curve, clamped into the temperature box.
pub fn heating_curve(params: &RbcParams, t_outdoor: f64, t_min: f64, t_max: f64) -> f64 {
    (params.t_sup_ref - params.slope * (t_outdoor - params.t_out_ref)).clamp(t_min, t_max)
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub prosumer_mode: ProsumerMode,
    pub rbc: RbcParams,
    pub limits: SolveLimits,
}

impl ControllerConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let prosumer_mode = if variant.multi_producer() {
            ProsumerMode::NetSigned
        } else {
            ProsumerMode::ConsumerOnly
        };
        Self {
            variant,
            prosumer_mode,
            rbc: RbcParams::default(),
            limits: SolveLimits::default(),
        }
    }
}

/// Diagnostics of one MPC solve attached to the applied action.
#[derive(Debug, Clone)]
pub struct SolveInfo {
    pub status: SolveStatus,
    pub iterations: usize,
    pub wall: Duration,
    pub objective: f64,
    pub max_violation: f64,
    /// True when the action came from the RBC fallback.
    pub fallback: bool,
}

/// One applied plant input: reduced loop flows and exchanger heat rates.
#[derive(Debug, Clone)]
pub struct ControlAction {
    /// Reduced loop flows (m^3/s), q_r >= 0 and loop-feasible.
    pub q_r: DVector<f64>,
    /// Heat rate per injection-layout column (W, consumers negative).
    pub w: DVector<f64>,
    /// RBC supply setpoint (degC) when the rule produced the action.
    pub t_sup_set: Option<f64>,
    pub solve: Option<SolveInfo>,
}

pub trait Controller {
    fn step(&mut self, x: &DVector<f64>, t: usize) -> Result<ControlAction>;
    fn name(&self) -> &str;
    /// Fallback and diagnostic events accumulated so far.
    fn events(&self) -> &[String] {
        &[]
    }
}

/// Rule-based baseline: heating-curve supply setpoint, demand-proportional
/// consumer flows projected into the loop inequality by uniform scaling.
pub struct RbcController {
    pub params: RbcParams,
    hyd: HydraulicModel,
    rho_cp: f64,
    t_ambient: f64,
    t_min: f64,
    t_max: f64,
    p_max: f64,
    q_r_max: f64,
    /// (layout column, expanded consuming-direction edge) per demand carrier.
    consumers: Vec<(usize, usize)>,
    /// (layout column, expanded edge, inlet node) of the main producer.
    producer: (usize, usize, usize),
    /// Flow-target matrix: one row per target edge, columns over q_r.
    targets: DMatrix<f64>,
    /// Row index of the producer edge inside `targets`.
    producer_row: usize,
    demand: Vec<DVector<f64>>,
    n_cols: usize,
}

impl RbcController {
    pub fn new(params: RbcParams, scenario: &Scenario, inst: &Instance) -> Result<Self> {
        let layout = &inst.layout;
        let fwd_to_rev: std::collections::BTreeMap<usize, usize> = inst
            .hyd
            .graph
            .reverse_of
            .iter()
            .map(|(&rev, &fwd)| (fwd, rev))
            .collect();
        // Demand carriers draw from supply to return: the forward direction
        // for consumer exchangers, the reverse one for prosumers (their
        // forward direction injects).
        let mut consumers = Vec::new();
        for &(col, _) in &inst.demand_shares {
            let ex = &layout.exchangers[col];
            let edge = match ex.kind {
                ExchangerKind::Consumer => ex.edge,
                ExchangerKind::Prosumer => *fwd_to_rev.get(&ex.edge).ok_or_else(|| {
                    DhnError::Config(format!(
                        "prosumer exchanger `{}` has no consuming direction",
                        ex.name
                    ))
                })?,
                ExchangerKind::Producer => {
                    return Err(DhnError::Config(format!(
                        "producer `{}` carries a demand share",
                        ex.name
                    )))
                }
            };
            consumers.push((col, edge));
        }
        let &pcol = inst.producer_cols.first().ok_or_else(|| {
            DhnError::Config("rule-based control needs a producer exchanger".into())
        })?;
        let pedge = layout.exchangers[pcol].edge;
        let pinlet = inst.tg.paths[pedge][0];

        // Target rows: consumer edges, the producer edge, then zero rows
        // holding the storage directions still.
        let mut rows: Vec<usize> = consumers.iter().map(|&(_, e)| e).collect();
        let producer_row = rows.len();
        rows.push(pedge);
        if let Some((charge, discharge)) = inst.storage_edge_pair {
            rows.push(charge);
            rows.push(discharge);
        }
        let m_r = inst.hyd.loops.m_r();
        let targets = DMatrix::from_fn(rows.len(), m_r, |r, l| inst.hyd.loops.f_r[(l, rows[r])]);

        let demand = (0..scenario.demand_total.len())
            .map(|t| scenario.demand_at(inst, t))
            .collect();
        Ok(Self {
            params,
            hyd: inst.hyd.clone(),
            rho_cp: scenario.rho * scenario.cp,
            t_ambient: scenario.t_ambient,
            t_min: scenario.ocp.x_min + scenario.t_ambient,
            t_max: scenario.ocp.x_max + scenario.t_ambient,
            p_max: scenario.ocp.p_max,
            q_r_max: scenario.ocp.q_r_max,
            consumers,
            producer: (pcol, pedge, pinlet),
            targets,
            producer_row,
            demand,
            n_cols: layout.exchangers.len(),
        })
    }

    /// Pre-projection flow targets (m^3/s) per target row at step t.
    pub fn flow_targets(&self, t: usize) -> DVector<f64> {
        let d = &self.demand[t.min(self.demand.len() - 1)];
        let mut b = DVector::zeros(self.targets.nrows());
        let mut total = 0.0;
        for (r, &(col, _)) in self.consumers.iter().enumerate() {
            b[r] = d[col].max(0.0) / (self.rho_cp * self.params.dt_design);
            total += d[col].max(0.0);
        }
        b[self.producer_row] =
            (total / (self.rho_cp * self.params.dt_design)).max(self.params.min_circulation);
        b
    }

    pub fn rbc_step(&self, x: &DVector<f64>, t: usize) -> ControlAction {
        let b = self.flow_targets(t);
        let (mut q_r, _res) = crate::linalg::nnls(&self.targets, &b);

        // Uniform scale-down into the loop inequality (homogeneous quadratic
        // constraints: the critical scale along a ray is explicit) and the
        // flow box; shortfalls surface as DV, never as infeasibility.
        let mut s = 1.0f64;
        for i in 0..self.hyd.loops.m_r() {
            let quad = (q_r.transpose() * &self.hyd.z[i] * &q_r)[(0, 0)];
            if quad > 0.0 {
                s = s.min(self.params.margin * (self.hyd.loop_rhs[i] / quad).sqrt());
            }
        }
        let q_max = q_r.amax();
        if q_max > self.q_r_max {
            s = s.min(self.q_r_max / q_max);
        }
        if s < 1.0 {
            q_r *= s;
        }

        // Producer power: proportional law holding the outlet cell at the
        // heating-curve setpoint, P = rho c_p q (x_set - x_inlet).
        let t_set = heating_curve(&self.params, self.t_ambient, self.t_min, self.t_max);
        let x_set = t_set - self.t_ambient;
        let (pcol, pedge, pinlet) = self.producer;
        let q_p: f64 = (0..self.hyd.loops.m_r())
            .map(|l| self.hyd.loops.f_r[(l, pedge)] * q_r[l])
            .sum();
        let p = (self.rho_cp * q_p * (x_set - x[pinlet])).clamp(0.0, self.p_max);

        let d = &self.demand[t.min(self.demand.len() - 1)];
        let mut w = DVector::zeros(self.n_cols);
        w[pcol] = p;
        for &(col, _) in &self.consumers {
            w[col] = -d[col].max(0.0);
        }
        ControlAction {
            q_r,
            w,
            t_sup_set: Some(t_set),
            solve: None,
        }
    }
}

impl Controller for RbcController {
    fn step(&mut self, x: &DVector<f64>, t: usize) -> Result<ControlAction> {
        Ok(self.rbc_step(x, t))
    }

    fn name(&self) -> &str {
        "RBC"
    }
}

/// Receding-horizon controller around one OCP transcription, with warm
/// starting and an RBC fallback on solver failure.
pub struct MpcController {
    name: String,
    hyd: HydraulicModel,
    tg: ThermalGraph,
    layout: InjectionLayout,
    pub opts: OcpOptions,
    pub producer_cols: Vec<usize>,
    pub consumer_cols: Vec<usize>,
    pub pinned_loops: Vec<usize>,
    bounded_nodes: Vec<usize>,
    storage_cells: Vec<usize>,
    storage_edge_pair: Option<(usize, usize)>,
    tau: f64,
    rho_cp: f64,
    price: Vec<f64>,
    pub demand: Vec<DVector<f64>>,
    /// Exogenous injections (W per column per step), empty when none.
    pub fixed_w: Vec<DVector<f64>>,
    limits: SolveLimits,
    prev: Option<NlpSolution>,
    fallback: RbcController,
    events: Vec<String>,
    /// True when the last step used the fallback.
    pub fallback_used: bool,
}

impl MpcController {
    fn window(&self, t: usize) -> usize {
        let n = self.opts.horizon;
        t.min(self.demand.len().saturating_sub(n))
            .min(self.price.len().saturating_sub(n))
    }

    /// The transcription for state x at closed-loop step t.
    pub fn model(&self, x: &DVector<f64>, t: usize) -> Result<OcpModel> {
        let n = self.opts.horizon;
        let t0 = self.window(t);
        let setup = OcpSetup {
            tau: self.tau,
            rho_cp: self.rho_cp,
            price: self.price[t0..t0 + n].to_vec(),
            demand: self.demand[t0..t0 + n].to_vec(),
            producer_cols: self.producer_cols.clone(),
            consumer_cols: self.consumer_cols.clone(),
            fixed_w: if self.fixed_w.is_empty() {
                Vec::new()
            } else {
                self.fixed_w[t0..t0 + n].to_vec()
            },
            bounded_nodes: self.bounded_nodes.clone(),
            storage_cells: self.storage_cells.clone(),
            storage_edge_pair: self.storage_edge_pair,
            pinned_loops: self.pinned_loops.clone(),
        };
        OcpModel::new(
            self.hyd.clone(),
            self.tg.clone(),
            self.layout.clone(),
            x.clone(),
            self.opts.clone(),
            setup,
        )
    }

    /// One receding-horizon step: solve, apply the first blocked input,
    /// refresh the warm-start cache. Falls back to the rule when the solver
    /// returns an unusable status.
    pub fn mpc_step(&mut self, x: &DVector<f64>, t: usize) -> Result<ControlAction> {
        let model = self.model(x, t)?;
        let guess = match &self.prev {
            Some(p) => warm_start(&model, p),
            None => model.cold_start(),
        };
        let sol = solve_nlp(&model, &guess, &self.limits)?;
        log::info!(
            "{} step {t}: {:?} in {} iters, obj {:.4e}, viol {:.2e}, {:?}",
            self.name,
            sol.status,
            sol.iterations,
            sol.objective,
            sol.max_violation,
            model.breakdown(&sol.x).named(),
        );
        self.fallback_used = !sol.status.is_usable();
        if self.fallback_used {
            self.events.push(format!(
                "step {t}: solver returned {:?} after {} iterations; applying RBC fallback",
                sol.status, sol.iterations
            ));
            let mut action = self.fallback.rbc_step(x, t);
            action.solve = Some(SolveInfo {
                status: sol.status,
                iterations: sol.iterations,
                wall: sol.wall_time,
                objective: sol.objective,
                max_violation: sol.max_violation,
                fallback: true,
            });
            return Ok(action);
        }

        let t0 = self.window(t);
        let q_r = model.input_q_r(&sol.x, 0);
        let p = model.input_powers(&sol.x, 0);
        let mut w = DVector::zeros(self.layout.exchangers.len());
        for (k, &col) in self.producer_cols.iter().enumerate() {
            w[col] += p[k];
        }
        for (c, &col) in self.consumer_cols.iter().enumerate() {
            w[col] += -self.demand[t0][col] + model.demand_shortfall(&sol.x, 0, c);
        }
        if !self.fixed_w.is_empty() {
            w += &self.fixed_w[t0];
        }
        let info = SolveInfo {
            status: sol.status,
            iterations: sol.iterations,
            wall: sol.wall_time,
            objective: sol.objective,
            max_violation: sol.max_violation,
            fallback: false,
        };
        self.prev = Some(sol);
        Ok(ControlAction {
            q_r,
            w,
            t_sup_set: None,
            solve: Some(info),
        })
    }
}

impl Controller for MpcController {
    fn step(&mut self, x: &DVector<f64>, t: usize) -> Result<ControlAction> {
        self.mpc_step(x, t)
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn events(&self) -> &[String] {
        &self.events
    }
}

/// Assemble the controller for a variant on a concrete scenario instance.
pub fn make_controller(
    config: &ControllerConfig,
    scenario: &Scenario,
    inst: &Instance,
) -> Result<Box<dyn Controller>> {
    if config.variant == Variant::Rbc {
        return Ok(Box::new(RbcController::new(
            config.rbc.clone(),
            scenario,
            inst,
        )?));
    }
    Ok(Box::new(make_mpc(config, scenario, inst)?))
}

/// The concrete MPC wiring behind `make_controller` for the four variants.
pub fn make_mpc(
    config: &ControllerConfig,
    scenario: &Scenario,
    inst: &Instance,
) -> Result<MpcController> {
    let mut producer_cols = inst.producer_cols.clone();
    let mut consumer_cols = inst.consumer_cols.clone();
    let mut fixed_w: Vec<DVector<f64>> = Vec::new();
    let n_cols = inst.layout.exchangers.len();
    let n_steps = scenario.demand_total.len();

    if !config.variant.multi_producer() && inst.producer_cols.len() != 1 {
        return Err(DhnError::Config(format!(
            "{} controls exactly one producer; the network has {}",
            config.variant.label(),
            inst.producer_cols.len()
        )));
    }
    match (&config.prosumer_mode, config.variant.multi_producer()) {
        (ProsumerMode::ConsumerOnly, _) | (_, false) => {
            consumer_cols.extend(inst.prosumer_cols.iter().copied());
        }
        (ProsumerMode::NetSigned, true) => {
            producer_cols.extend(inst.prosumer_cols.iter().copied());
            consumer_cols.extend(inst.prosumer_cols.iter().copied());
        }
        (ProsumerMode::FixedProducer(profile), true) => {
            if profile.is_empty() {
                return Err(DhnError::Config(
                    "fixed prosumer profile must not be empty".into(),
                ));
            }
            fixed_w = (0..n_steps)
                .map(|t| {
                    let mut w = DVector::zeros(n_cols);
                    let p = profile[t.min(profile.len() - 1)];
                    for &col in &inst.prosumer_cols {
                        w[col] = p;
                    }
                    w
                })
                .collect();
        }
    }
    if config.variant.multi_producer()
        && producer_cols.len() + usize::from(!fixed_w.is_empty()) < 2
    {
        return Err(DhnError::Config(format!(
            "{} needs at least two producing exchangers; the network has {} and no prosumer",
            config.variant.label(),
            producer_cols.len()
        )));
    }
    consumer_cols.sort_unstable();
    consumer_cols.dedup();

    let mut opts = scenario.ocp.clone();
    let (storage_cells, storage_edge_pair, pinned_loops) = if config.variant.storage_enabled() {
        let pair = inst.storage_edge_pair.ok_or_else(|| {
            DhnError::Config(format!(
                "{} requires a storage, but the network has none",
                config.variant.label()
            ))
        })?;
        opts.storage_volume_balance = true;
        (inst.storage_cells.clone(), Some(pair), Vec::new())
    } else {
        // Pin every loop crossing the storage so it stays hydraulically idle.
        let pinned = match inst.storage_edge_pair {
            Some((charge, discharge)) => (0..inst.hyd.loops.m_r())
                .filter(|&l| {
                    inst.hyd.loops.f_r[(l, charge)] > 0.5 || inst.hyd.loops.f_r[(l, discharge)] > 0.5
                })
                .collect(),
            None => Vec::new(),
        };
        opts.storage_volume_balance = false;
        (Vec::new(), None, pinned)
    };

    let demand = (0..n_steps)
        .map(|t| {
            let mut d = scenario.demand_at(inst, t);
            if !fixed_w.is_empty() {
                // Fixed-producer prosumers shed their demand share.
                for &col in &inst.prosumer_cols {
                    d[col] = 0.0;
                }
            }
            d
        })
        .collect();

    let fallback = RbcController::new(config.rbc.clone(), scenario, inst)?;
    Ok(MpcController {
        name: config.variant.label().to_string(),
        hyd: inst.hyd.clone(),
        tg: inst.tg.clone(),
        layout: inst.layout.clone(),
        opts,
        producer_cols,
        consumer_cols,
        pinned_loops,
        bounded_nodes: inst.bounded_nodes.clone(),
        storage_cells,
        storage_edge_pair,
        tau: scenario.tau,
        rho_cp: scenario.rho * scenario.cp,
        price: scenario.price.clone(),
        demand,
        fixed_w,
        limits: config.limits.clone(),
        prev: None,
        fallback,
        events: Vec::new(),
        fallback_used: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::build_aroma;

    fn aroma() -> (Scenario, Instance) {
        let s = build_aroma().unwrap();
        let inst = s.instance().unwrap();
        (s, inst)
    }

    #[test]
    fn heating_curve_clamps_into_box() {
        let p = RbcParams::default();
        assert_eq!(heating_curve(&p, 10.0, 70.0, 90.0), 85.0);
        assert_eq!(heating_curve(&p, -20.0, 70.0, 90.0), 90.0);
        assert_eq!(heating_curve(&p, 30.0, 70.0, 90.0), 70.0);
    }

    #[test]
    fn variant_parsing_round_trips() {
        for (s, v) in [
            ("rbc", Variant::Rbc),
            ("SP", Variant::Sp),
            ("sps-mpc", Variant::Sps),
            ("MP-MPC", Variant::Mp),
            ("mps", Variant::Mps),
        ] {
            assert_eq!(Variant::parse(s).unwrap(), v);
        }
        assert!(Variant::parse("pid").is_err());
    }

    #[test]
    fn rbc_targets_scale_with_demand() {
        let (mut s, _) = (build_aroma().unwrap(), ());
        let inst = s.instance().unwrap();
        let rbc = RbcController::new(RbcParams::default(), &s, &inst).unwrap();
        let b0 = rbc.flow_targets(0);
        s.demand_total = s.demand_total.iter().map(|d| 2.0 * d).collect();
        let rbc2 = RbcController::new(RbcParams::default(), &s, &inst).unwrap();
        let b1 = rbc2.flow_targets(0);
        for r in 0..b0.len() {
            // Consumer/producer targets double; the zero rows stay zero.
            assert!((b1[r] - 2.0 * b0[r]).abs() <= 1e-15 + 1e-12 * b0[r].abs());
        }
    }

    #[test]
    fn rbc_zero_demand_idles_at_minimum_circulation() {
        let (mut s, _) = (build_aroma().unwrap(), ());
        s.demand_total = vec![0.0; s.demand_total.len()];
        let inst = s.instance().unwrap();
        let rbc = RbcController::new(RbcParams::default(), &s, &inst).unwrap();
        let a = rbc.rbc_step(&inst.x0, 0);
        assert!(a.q_r.min() >= 0.0);
        assert!(inst.hyd.loop_feasibility(&a.q_r).unwrap().max() <= 0.0);
        // Producer-edge flow at the floor, power only covering losses.
        let q = inst.hyd.expanded_flows(&a.q_r).unwrap();
        let pedge = inst.layout.exchangers[inst.producer_cols[0]].edge;
        assert!((q[pedge] - rbc.params.min_circulation).abs() <= 0.2 * rbc.params.min_circulation);
        let p = a.w[inst.producer_cols[0]];
        assert!(p >= 0.0 && p < 2.0e4, "idle power {p}");
    }

    #[test]
    fn rbc_projection_keeps_feasibility_under_demand_stress() {
        let (s0, _) = (build_aroma().unwrap(), ());
        for scale in [1.0, 3.0, 10.0, 40.0] {
            let mut s = build_aroma().unwrap();
            s.demand_total = s0.demand_total.iter().map(|d| scale * d).collect();
            let inst = s.instance().unwrap();
            let rbc = RbcController::new(RbcParams::default(), &s, &inst).unwrap();
            for t in [0, 24, 48, 95] {
                let a = rbc.rbc_step(&inst.x0, t);
                assert!(a.q_r.min() >= -1e-15);
                assert!(
                    inst.hyd.loop_feasibility(&a.q_r).unwrap().max() <= 1e-9,
                    "infeasible at scale {scale}, step {t}"
                );
                assert!(a.q_r.amax() <= s.ocp.q_r_max * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn make_controller_wires_variants() {
        let (s, inst) = aroma();
        let sp = make_mpc(&ControllerConfig::for_variant(Variant::Sp), &s, &inst).unwrap();
        assert_eq!(sp.name(), "SP-MPC");
        assert_eq!(sp.producer_cols, inst.producer_cols);
        // Prosumer folded into the consumer set.
        for &col in &inst.prosumer_cols {
            assert!(sp.consumer_cols.contains(&col));
        }
        // Storage loops pinned, no volume balance, no terminal tracking.
        assert!(!sp.pinned_loops.is_empty());
        assert!(!sp.opts.storage_volume_balance);
        let (charge, discharge) = inst.storage_edge_pair.unwrap();
        for l in 0..inst.hyd.loops.m_r() {
            let crosses = inst.hyd.loops.f_r[(l, charge)] > 0.5
                || inst.hyd.loops.f_r[(l, discharge)] > 0.5;
            assert_eq!(sp.pinned_loops.contains(&l), crosses);
        }

        let mps = make_mpc(&ControllerConfig::for_variant(Variant::Mps), &s, &inst).unwrap();
        assert_eq!(mps.name(), "MPS-MPC");
        // Prosumer is a second controllable producer and keeps its demand.
        assert_eq!(
            mps.producer_cols.len(),
            inst.producer_cols.len() + inst.prosumer_cols.len()
        );
        for &col in &inst.prosumer_cols {
            assert!(mps.producer_cols.contains(&col));
            assert!(mps.consumer_cols.contains(&col));
        }
        assert!(mps.pinned_loops.is_empty());
        assert!(mps.opts.storage_volume_balance);

        // Fixed-producer prosumer: exogenous profile, demand share dropped.
        let mut cfg = ControllerConfig::for_variant(Variant::Mp);
        cfg.prosumer_mode = ProsumerMode::FixedProducer(vec![1.0e5]);
        let mp = make_mpc(&cfg, &s, &inst).unwrap();
        assert_eq!(mp.producer_cols, inst.producer_cols);
        let pcol = inst.prosumer_cols[0];
        assert!((mp.fixed_w[0][pcol] - 1.0e5).abs() < 1e-9);
        assert_eq!(mp.demand[0][pcol], 0.0);
    }

    #[test]
    fn mpc_step_solves_and_repeats_deterministically() {
        let (mut s, _) = (build_aroma().unwrap(), ());
        s.ocp.horizon = 4;
        s.ocp.control_horizon = 4;
        s.ocp.block_len = 2;
        let inst = s.instance().unwrap();
        let cfg = ControllerConfig::for_variant(Variant::Sp);
        let run = || {
            let mut c = make_controller(&cfg, &s, &inst).unwrap();
            c.step(&inst.x0, 0).unwrap()
        };
        let a = run();
        let b = run();
        let info = a.solve.as_ref().unwrap();
        assert!(info.status.is_usable(), "status {:?}", info.status);
        assert!(!info.fallback);
        assert!(a.q_r.min() >= 0.0);
        assert!(inst.hyd.loop_feasibility(&a.q_r).unwrap().max() <= 1e-6);
        assert_eq!(a.q_r, b.q_r);
        assert_eq!(a.w, b.w);
    }

    #[test]
    fn solver_failure_falls_back_to_rbc() {
        let (mut s, _) = (build_aroma().unwrap(), ());
        s.ocp.horizon = 4;
        s.ocp.control_horizon = 4;
        s.ocp.block_len = 2;
        let inst = s.instance().unwrap();
        let mut cfg = ControllerConfig::for_variant(Variant::Sp);
        cfg.limits.max_iter = 1;
        let mut c = make_controller(&cfg, &s, &inst).unwrap();
        let a = c.step(&inst.x0, 0).unwrap();
        let info = a.solve.as_ref().unwrap();
        assert!(info.fallback);
        assert!(a.t_sup_set.is_some());
        assert_eq!(c.events().len(), 1);
        // The fallback action is still hydraulically feasible.
        assert!(inst.hyd.loop_feasibility(&a.q_r).unwrap().max() <= 0.0);
    }
}
