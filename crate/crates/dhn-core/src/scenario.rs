//! Scenario configuration: network + physics + forecast series + solver
//! options, its TOML/CSV on-disk form, and the assembled per-run instance.
//!
//! On-disk units are operator-friendly (°C, kW, L/s, minutes); the in-memory
//! `Scenario` is SI with temperatures in K above ambient.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::hydraulics::HydraulicModel;
use crate::network::{expand_bidirectional, Edge, NetworkSpec, DEFAULT_CYCLE_CAP};
use crate::ocp::{ComplementarityMode, OcpOptions};
use crate::thermal::{refine_mesh, ExchangerKind, InjectionLayout, ThermalGraph};
use crate::{DhnError, Result};

/// A fully resolved scenario in SI units (temperatures in K above ambient).
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub controller: String,
    pub network: NetworkSpec,
    pub rho: f64,
    pub cp: f64,
    /// Ambient temperature in °C (reference for all states).
    pub t_ambient: f64,
    /// Control interval (s).
    pub tau: f64,
    /// Closed-loop horizon in control steps.
    pub t_f: usize,
    /// Plant-model mesh refinement factor.
    pub beta: usize,
    /// Cells per physical edge for the controller mesh.
    pub l_x: Vec<usize>,
    /// Consumer junction -> demand share (normalized to 1).
    pub demand_fractions: BTreeMap<String, f64>,
    /// Total network demand (W) on the control grid, >= t_f + horizon steps.
    pub demand_total: Vec<f64>,
    /// Energy price per step (relative), zero-order held from the file.
    pub price: Vec<f64>,
    /// Additive per-junction demand series (W per step), for load studies.
    pub demand_extra: BTreeMap<String, Vec<f64>>,
    pub ocp: OcpOptions,
    /// sha256 over the config and series files.
    pub manifest_hash: String,
    /// Non-fatal loader diagnostics (renormalizations etc.).
    pub warnings: Vec<String>,
}

/// Model objects assembled once per scenario.
pub struct Instance {
    pub hyd: HydraulicModel,
    pub tg: ThermalGraph,
    pub layout: InjectionLayout,
    /// Supply junctions carrying the soft temperature box: producer outlets
    /// and consumer/prosumer supply connections.
    pub bounded_nodes: Vec<usize>,
    pub storage_cells: Vec<usize>,
    /// Expanded (charge, discharge) edge pair of the first storage.
    pub storage_edge_pair: Option<(usize, usize)>,
    pub producer_cols: Vec<usize>,
    pub consumer_cols: Vec<usize>,
    pub prosumer_cols: Vec<usize>,
    /// Layout column -> demand share for demand-carrying exchangers.
    pub demand_shares: Vec<(usize, f64)>,
    /// Uniform initial state (K above ambient).
    pub x0: DVector<f64>,
}

impl Scenario {
    /// Demand vector (W per layout column) at control step t.
    pub fn demand_at(&self, inst: &Instance, t: usize) -> DVector<f64> {
        let total = self.demand_total[t.min(self.demand_total.len() - 1)];
        let mut d = DVector::zeros(inst.layout.exchangers.len());
        for &(col, share) in &inst.demand_shares {
            d[col] = share * total;
        }
        for (node, series) in &self.demand_extra {
            if let Some(col) = inst.layout.column_of(node) {
                d[col] += series[t.min(series.len() - 1)];
            }
        }
        d
    }

    pub fn price_at(&self, t: usize) -> f64 {
        self.price[t.min(self.price.len() - 1)]
    }

    /// Build the hydraulic/thermal/injection objects for this scenario.
    pub fn instance(&self) -> Result<Instance> {
        let g = expand_bidirectional(&self.network)?;
        let tg = refine_mesh(&g, &self.l_x, self.rho, self.cp)?;
        let layout = InjectionLayout::from_spec(&tg, &self.network, self.rho, self.cp)?;
        let hyd = HydraulicModel::new(g, self.rho, DEFAULT_CYCLE_CAP)?;
        if !hyd.report.assumption_satisfied {
            return Err(DhnError::Structure(format!(
                "valve placement violates the recovery assumption (deficient loops: {:?})",
                hyd.report.deficient_loops
            )));
        }

        let mut producer_cols = Vec::new();
        let mut consumer_cols = Vec::new();
        let mut prosumer_cols = Vec::new();
        for (j, ex) in layout.exchangers.iter().enumerate() {
            match ex.kind {
                ExchangerKind::Producer => producer_cols.push(j),
                ExchangerKind::Consumer => consumer_cols.push(j),
                ExchangerKind::Prosumer => prosumer_cols.push(j),
            }
        }
        let mut demand_shares = Vec::new();
        for (j, ex) in layout.exchangers.iter().enumerate() {
            if let Some(&share) = self.demand_fractions.get(&ex.name) {
                demand_shares.push((j, share));
            }
        }
        if demand_shares.is_empty() {
            return Err(DhnError::Config(
                "no demand fraction matches a consumer or prosumer junction".into(),
            ));
        }

        // Bounded supply junctions: producer heads plus the junctions the
        // demand exchangers hang off.
        let mut bounded: Vec<usize> = Vec::new();
        for map in [&self.network.producers, &self.network.consumers, &self.network.prosumers] {
            for node in map.keys() {
                let idx = self.network.node_index(node)?;
                if !bounded.contains(&idx) {
                    bounded.push(idx);
                }
            }
        }
        bounded.sort_unstable();

        let mut storage_cells = Vec::new();
        let mut storage_edge_pair = None;
        if let Some(edge_id) = self.network.storages.values().next() {
            let e = self.network.edge_index(edge_id)?;
            storage_cells = tg.paths[e][1..tg.paths[e].len() - 1].to_vec();
            let fwd = hyd.graph.forward_index(e);
            let rev = hyd
                .graph
                .reverse_of
                .iter()
                .find(|(_, &f)| f == fwd)
                .map(|(&r, _)| r);
            if let Some(rev) = rev {
                // Forward direction is discharge; charging runs the reverse.
                storage_edge_pair = Some((rev, fwd));
            }
        }

        let x0 = DVector::from_element(tg.n_nodes(), 0.5 * (self.ocp.x_min + self.ocp.x_max));
        Ok(Instance {
            hyd,
            tg,
            layout,
            bounded_nodes: bounded,
            storage_cells,
            storage_edge_pair,
            producer_cols,
            consumer_cols,
            prosumer_cols,
            demand_shares,
            x0,
        })
    }
}

// ---------------------------------------------------------------------------
// On-disk form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioFile {
    name: String,
    controller: String,
    time: TimeSection,
    physics: PhysicsSection,
    series: SeriesSection,
    demand_fractions: BTreeMap<String, f64>,
    mesh: MeshSection,
    ocp: OcpSection,
    network: NetworkSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TimeSection {
    control_interval_min: f64,
    steps: usize,
    beta: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PhysicsSection {
    rho: f64,
    cp: f64,
    t_ambient_c: f64,
    t_supply_min_c: f64,
    t_supply_max_c: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeriesSection {
    /// CSV `time,value`: hours, kW. Linearly interpolated.
    demand: String,
    /// CSV `time,value`: hours, relative price. Zero-order held.
    price: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MeshSection {
    default_l_x: usize,
    #[serde(default)]
    overrides: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OcpSection {
    horizon: usize,
    control_horizon: usize,
    block_len: usize,
    r_temp: f64,
    temp_power: u32,
    r_diff: f64,
    r_sto: f64,
    r_slack: f64,
    storage_target_c: f64,
    #[serde(default)]
    storage_volume_balance: bool,
    #[serde(default = "default_volume_delta")]
    volume_balance_delta: f64,
    q_r_max_lps: f64,
    p_max_kw: f64,
    /// Complementarity penalty weight; <= 0 selects the relaxed mode with
    /// |eps_c| as the relaxation.
    eps_c: f64,
}

fn default_volume_delta() -> f64 {
    0.01
}

fn hash_update(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

/// Parse one `time,value` CSV into sorted (hours, value) pairs.
fn read_series(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| DhnError::Config(format!("cannot open series {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| DhnError::Config(format!("bad CSV row: {e}")))?;
        if rec.len() != 2 {
            return Err(DhnError::Config(format!(
                "series {} needs exactly `time,value` columns",
                path.display()
            )));
        }
        let t: f64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| DhnError::Config(format!("bad time `{}`", &rec[0])))?;
        let v: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| DhnError::Config(format!("bad value `{}`", &rec[1])))?;
        if !t.is_finite() || !v.is_finite() {
            return Err(DhnError::Config(format!(
                "non-finite sample in {}",
                path.display()
            )));
        }
        if let Some(&(prev, _)) = out.last() {
            if t <= prev {
                return Err(DhnError::Config(format!(
                    "time column of {} must be strictly increasing",
                    path.display()
                )));
            }
        }
        out.push((t, v));
    }
    if out.len() < 2 {
        return Err(DhnError::Config(format!(
            "series {} needs at least two samples",
            path.display()
        )));
    }
    Ok(out)
}

/// Sample a series on the control grid. Demands interpolate linearly;
/// prices hold the most recent sample.
fn sample_series(series: &[(f64, f64)], tau_h: f64, n: usize, zoh: bool) -> Result<Vec<f64>> {
    let end = series.last().unwrap().0;
    let need = (n - 1) as f64 * tau_h;
    if need > end + 1e-9 {
        return Err(DhnError::Config(format!(
            "series covers {end:.2} h but the run needs {need:.2} h"
        )));
    }
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let t = i as f64 * tau_h;
        while k + 1 < series.len() && series[k + 1].0 <= t + 1e-12 {
            k += 1;
        }
        if zoh || k + 1 == series.len() {
            out.push(series[k].1);
        } else {
            let (t0, v0) = series[k];
            let (t1, v1) = series[k + 1];
            let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            out.push(v0 + w * (v1 - v0));
        }
    }
    Ok(out)
}

/// Load a scenario TOML and its series files (paths relative to the TOML).
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let raw = std::fs::read(path)
        .map_err(|e| DhnError::Config(format!("cannot read {}: {e}", path.display())))?;
    let file: ScenarioFile = toml::from_str(
        std::str::from_utf8(&raw)
            .map_err(|_| DhnError::Config("scenario file is not UTF-8".into()))?,
    )
    .map_err(|e| DhnError::Config(format!("scenario parse error: {e}")))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));

    let mut hasher = Sha256::new();
    hash_update(&mut hasher, &raw);

    let demand_path: PathBuf = dir.join(&file.series.demand);
    let price_path: PathBuf = dir.join(&file.series.price);
    for p in [&demand_path, &price_path] {
        let bytes = std::fs::read(p)
            .map_err(|e| DhnError::Config(format!("cannot read {}: {e}", p.display())))?;
        hash_update(&mut hasher, &bytes);
    }
    let manifest_hash = hex::encode(hasher.finalize());

    let mut warnings = Vec::new();
    file.network.validate()?;

    let tau = file.time.control_interval_min * 60.0;
    if tau <= 0.0 || file.time.steps == 0 || file.time.beta == 0 {
        return Err(DhnError::Config("time section needs positive entries".into()));
    }

    let mut fractions = file.demand_fractions.clone();
    let sum: f64 = fractions.values().sum();
    if sum <= 0.0 {
        return Err(DhnError::Config("demand fractions must sum to > 0".into()));
    }
    if (sum - 1.0).abs() > 1e-9 {
        warnings.push(format!(
            "demand fractions sum to {sum:.6}; renormalizing to 1"
        ));
        log::warn!("demand fractions sum to {sum:.6}; renormalizing");
        for v in fractions.values_mut() {
            *v /= sum;
        }
    }
    for node in fractions.keys() {
        if !file.demand_fractions.contains_key(node) || file.network.node_index(node).is_err() {
            return Err(DhnError::Config(format!(
                "demand fraction references unknown junction `{node}`"
            )));
        }
    }

    let l_x: Vec<usize> = file
        .network
        .edges
        .iter()
        .map(|e| {
            file.mesh
                .overrides
                .get(&e.id)
                .copied()
                .unwrap_or(file.mesh.default_l_x)
        })
        .collect();

    let o = &file.ocp;
    let complementarity = if o.eps_c > 0.0 {
        ComplementarityMode::Penalty { eps_c: o.eps_c }
    } else {
        ComplementarityMode::Relaxed { eps: o.eps_c.abs().max(1e-9) }
    };
    let t_a = file.physics.t_ambient_c;
    let ocp = OcpOptions {
        horizon: o.horizon,
        control_horizon: o.control_horizon,
        block_len: o.block_len,
        r_temp: o.r_temp,
        temp_power: o.temp_power,
        r_diff: o.r_diff,
        r_sto: o.r_sto,
        r_slack: o.r_slack,
        storage_target: o.storage_target_c - t_a,
        storage_volume_balance: o.storage_volume_balance,
        volume_balance_delta: o.volume_balance_delta,
        complementarity,
        q_r_min: 0.0,
        q_r_max: o.q_r_max_lps * 1e-3,
        p_max: o.p_max_kw * 1e3,
        x_min: file.physics.t_supply_min_c - t_a,
        x_max: file.physics.t_supply_max_c - t_a,
        ..OcpOptions::default()
    };
    ocp.validate()?;

    // Series must cover the closed loop plus one full prediction horizon.
    let n_grid = file.time.steps + ocp.horizon;
    let tau_h = tau / 3600.0;
    let demand_series = read_series(&demand_path)?;
    let price_series = read_series(&price_path)?;
    let demand_total: Vec<f64> = sample_series(&demand_series, tau_h, n_grid, false)?
        .into_iter()
        .map(|kw| kw * 1e3)
        .collect();
    let price = sample_series(&price_series, tau_h, n_grid, true)?;
    if demand_total.iter().any(|&d| d < 0.0) {
        return Err(DhnError::Config("negative demand sample".into()));
    }

    Ok(Scenario {
        name: file.name,
        controller: file.controller,
        network: file.network,
        rho: file.physics.rho,
        cp: file.physics.cp,
        t_ambient: t_a,
        tau,
        t_f: file.time.steps,
        beta: file.time.beta,
        l_x,
        demand_fractions: fractions,
        demand_total,
        price,
        demand_extra: BTreeMap::new(),
        ocp,
        manifest_hash,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Reference network
// ---------------------------------------------------------------------------

fn pipe(id: &str, tail: &str, head: &str, length: f64, diameter: f64, bidir: bool) -> Edge {
    Edge {
        id: id.into(),
        tail: tail.into(),
        head: head.into(),
        length,
        diameter,
        friction: 0.02,
        heat_transfer: 0.4,
        q_min: if bidir { -0.02 } else { 0.0 },
        q_max: 0.02,
        pump_capacity: 0.0,
        // Balancing valves sit on every distribution pipe; only the
        // producer trunk (e1/r1) is valve-free. Sparser placements keep the
        // loop rank but lose the nonnegative recovery certificate once the
        // prosumer loops overlap the producer loops on every valved edge.
        has_valve: !matches!(id, "e1" | "r1"),
        valve_coeff: 1e8,
    }
}

fn exchanger(id: &str, tail: &str, head: &str, pump: f64, bidir: bool) -> Edge {
    Edge {
        id: id.into(),
        tail: tail.into(),
        head: head.into(),
        length: 10.0,
        diameter: 0.07,
        friction: 0.02,
        heat_transfer: 0.4,
        q_min: if bidir { -0.02 } else { 0.0 },
        q_max: 0.02,
        pump_capacity: pump,
        has_valve: true,
        valve_coeff: 1e8,
    }
}

/// The 18-junction reference network: a looped supply/return grid with one
/// producer, four consumers, one prosumer, and a storage tank. Bidirectional
/// ties sit between S4-S5 and S8-S9 (mirrored on the return side); the
/// prosumer and storage connections are bidirectional with their own
/// circulation pumps, oriented so forward flow is production respectively
/// discharge.
pub fn aroma_network() -> NetworkSpec {
    let mut nodes = Vec::new();
    for i in 1..=9 {
        nodes.push(format!("S{i}"));
    }
    for i in 1..=9 {
        nodes.push(format!("R{i}"));
    }
    let edges = vec![
        // Supply side.
        pipe("e1", "S1", "S2", 300.0, 0.107, false),
        pipe("e2", "S2", "S3", 400.0, 0.090, false),
        pipe("e3", "S2", "S4", 350.0, 0.090, false),
        pipe("e4", "S3", "S5", 500.0, 0.080, false),
        pipe("e5", "S4", "S5", 450.0, 0.070, true),
        pipe("e6", "S5", "S6", 600.0, 0.090, false),
        pipe("e7", "S6", "S7", 400.0, 0.080, false),
        pipe("e8", "S7", "S8", 350.0, 0.080, false),
        pipe("e9", "S8", "S9", 300.0, 0.070, true),
        // Return side, mirror-oriented.
        pipe("r1", "R2", "R1", 300.0, 0.107, false),
        pipe("r2", "R3", "R2", 400.0, 0.090, false),
        pipe("r3", "R4", "R2", 350.0, 0.090, false),
        pipe("r4", "R5", "R3", 500.0, 0.080, false),
        pipe("r5", "R5", "R4", 450.0, 0.070, true),
        pipe("r6", "R6", "R5", 600.0, 0.090, false),
        pipe("r7", "R7", "R6", 400.0, 0.080, false),
        pipe("r8", "R8", "R7", 350.0, 0.080, false),
        pipe("r9", "R9", "R8", 300.0, 0.070, true),
        // Exchanger connections.
        exchanger("hx_p1", "R1", "S1", 4.0e5, false),
        exchanger("hx_c1", "R3", "S3", 2.0e5, true),
        exchanger("hx_c2", "S4", "R4", 0.0, false),
        exchanger("hx_c3", "S6", "R6", 0.0, false),
        exchanger("hx_c4", "S7", "R7", 0.0, false),
        exchanger("hx_c5", "S8", "R8", 0.0, false),
        {
            let mut sto = exchanger("sto", "R9", "S9", 1.0e5, true);
            sto.length = 8.0;
            sto.diameter = 2.0;
            sto.q_max = 0.01;
            sto.q_min = -0.01;
            sto
        },
    ];
    let mut pairing = BTreeMap::new();
    for i in 1..=9 {
        pairing.insert(format!("S{i}"), format!("R{i}"));
    }
    NetworkSpec {
        nodes,
        edges,
        producers: BTreeMap::from([("S1".into(), "hx_p1".into())]),
        consumers: BTreeMap::from([
            ("S4".into(), "hx_c2".into()),
            ("S6".into(), "hx_c3".into()),
            ("S7".into(), "hx_c4".into()),
            ("S8".into(), "hx_c5".into()),
        ]),
        prosumers: BTreeMap::from([("S3".into(), "hx_c1".into())]),
        storages: BTreeMap::from([("S9".into(), "sto".into())]),
        pairing,
    }
}

/// Synthetic two-day forecast: 48 hourly samples each.
/// Demand (kW): double-peaked residential profile around the given peak.
/// Price: night valley, morning and evening peaks.
pub fn aroma_series(peak_kw: f64) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut demand = Vec::new();
    let mut price = Vec::new();
    for h in 0..48 {
        let hod = (h % 24) as f64;
        let morning = (-(hod - 7.5_f64).powi(2) / 4.5).exp();
        let evening = (-(hod - 19.0_f64).powi(2) / 6.0).exp();
        let frac = 0.4 + 0.6 * morning.max(0.95 * evening);
        demand.push((h as f64, peak_kw * frac));
        let p = if (6.0..10.0).contains(&hod) {
            110.0
        } else if (17.0..21.0).contains(&hod) {
            120.0
        } else if (10.0..17.0).contains(&hod) {
            70.0
        } else {
            60.0
        };
        price.push((h as f64, p / 100.0));
    }
    (demand, price)
}

fn aroma_file() -> ScenarioFile {
    ScenarioFile {
        name: "aroma".into(),
        controller: "mps".into(),
        time: TimeSection {
            control_interval_min: 15.0,
            steps: 96,
            beta: 4,
        },
        physics: PhysicsSection {
            rho: 981.0,
            cp: 4182.0,
            t_ambient_c: 10.0,
            t_supply_min_c: 70.0,
            t_supply_max_c: 90.0,
        },
        series: SeriesSection {
            demand: "demand.csv".into(),
            price: "price.csv".into(),
        },
        // Shares of the five demand connections; deliberately off by 1% to
        // exercise the renormalization path.
        demand_fractions: BTreeMap::from([
            ("S3".into(), 0.08),
            ("S4".into(), 0.34),
            ("S6".into(), 0.11),
            ("S7".into(), 0.08),
            ("S8".into(), 0.38),
        ]),
        mesh: MeshSection {
            default_l_x: 4,
            overrides: BTreeMap::from([
                ("hx_p1".into(), 1),
                ("hx_c1".into(), 1),
                ("hx_c2".into(), 1),
                ("hx_c3".into(), 1),
                ("hx_c4".into(), 1),
                ("hx_c5".into(), 1),
            ]),
        },
        ocp: OcpSection {
            horizon: 32,
            control_horizon: 32,
            block_len: 4,
            r_temp: 1e-4,
            temp_power: 1,
            r_diff: 1e-3,
            r_sto: 1e-2,
            r_slack: 1e4,
            storage_target_c: 75.0,
            storage_volume_balance: false,
            volume_balance_delta: 0.01,
            q_r_max_lps: 20.0,
            p_max_kw: 800.0,
            eps_c: 1e-3,
        },
        network: aroma_network(),
    }
}

/// Write the reference scenario (TOML + CSVs) into a directory.
pub fn write_aroma(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)
        .map_err(|e| DhnError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let file = aroma_file();
    let toml_text = toml::to_string_pretty(&file)
        .map_err(|e| DhnError::Config(format!("serialize scenario: {e}")))?;
    std::fs::write(dir.join("scenario.toml"), toml_text)
        .map_err(|e| DhnError::Config(format!("write scenario.toml: {e}")))?;
    let (demand, price) = aroma_series(450.0);
    for (name, series) in [("demand.csv", demand), ("price.csv", price)] {
        let mut w = csv::Writer::from_path(dir.join(name))
            .map_err(|e| DhnError::Config(format!("write {name}: {e}")))?;
        w.write_record(["time", "value"])
            .map_err(|e| DhnError::Config(format!("write {name}: {e}")))?;
        for (t, v) in series {
            w.write_record([format!("{t}"), format!("{v:.4}")])
                .map_err(|e| DhnError::Config(format!("write {name}: {e}")))?;
        }
        w.flush()
            .map_err(|e| DhnError::Config(format!("write {name}: {e}")))?;
    }
    Ok(())
}

/// Build the reference scenario in memory (no files touched).
pub fn build_aroma() -> Result<Scenario> {
    let dir = std::env::temp_dir().join(format!("dhn-aroma-{}", std::process::id()));
    write_aroma(&dir)?;
    let s = load_scenario(dir.join("scenario.toml"));
    let _ = std::fs::remove_dir_all(&dir);
    s
}

/// Turn a scenario into the prosumer-surplus study: the prosumer becomes a
/// fixed heat source injecting 100 kW between 12:00 and 17:00, its own
/// demand is dropped (the surplus is net of local consumption), and S7
/// carries a compensatory 80 kW load increase over the same window.
/// Returns the fixed injection profile (W per control step) for the
/// controller's exogenous-producer input.
pub fn apply_prosumer_surplus(s: &mut Scenario) -> Vec<f64> {
    let n = s.demand_total.len();
    let steps_per_h = (3600.0 / s.tau).round().max(1.0) as usize;
    let window = |t: usize| (12 * steps_per_h..17 * steps_per_h).contains(&t);

    if let Some(prosumer) = s.network.prosumers.keys().next().cloned() {
        if let Some(f) = s.demand_fractions.remove(&prosumer) {
            // Keep the remaining consumers' absolute demand unchanged.
            let keep = 1.0 - f;
            if keep > 0.0 {
                for v in s.demand_fractions.values_mut() {
                    *v /= keep;
                }
                for d in &mut s.demand_total {
                    *d *= keep;
                }
            }
        }
    }
    let extra: Vec<f64> = (0..n).map(|t| if window(t) { 8.0e4 } else { 0.0 }).collect();
    s.demand_extra.insert("S7".into(), extra);
    (0..n).map(|t| if window(t) { 1.0e5 } else { 0.0 }).collect()
}
