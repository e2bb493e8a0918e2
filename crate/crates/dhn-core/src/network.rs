//! Graph model of a district heating network: bidirectional-edge expansion,
//! directed-cycle enumeration, loop matrices, and valve-placement analysis.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{nnls, pivoted_qr};
use crate::{DhnError, Result};

/// Default cap on the number of enumerated directed cycles.
pub const DEFAULT_CYCLE_CAP: usize = 1_000_000;

/// Relative pivot tolerance for rank decisions in loop-matrix factorizations.
pub const RANK_REL_TOL: f64 = 1e-10;

fn default_valve_coeff() -> f64 {
    1e8
}

/// A directed network edge: a pipe segment, optionally carrying a heat
/// exchanger, pump, or valve. Flow bounds with `q_min < 0` mark the pipe as
/// bidirectional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Edge {
    pub id: String,
    pub tail: String,
    pub head: String,
    /// Length L_e in m.
    pub length: f64,
    /// Inner diameter d_e in m.
    pub diameter: f64,
    /// Dimensionless friction coefficient K_e.
    pub friction: f64,
    /// Heat transfer coefficient U_e in W/(m^2 K).
    pub heat_transfer: f64,
    /// Lower flow bound in m^3/s (negative for bidirectional pipes).
    #[serde(default)]
    pub q_min: f64,
    /// Upper flow bound in m^3/s.
    pub q_max: f64,
    /// Pump capacity c_e in Pa (0 when the edge has no pump).
    #[serde(default)]
    pub pump_capacity: f64,
    #[serde(default)]
    pub has_valve: bool,
    /// Valve resistance R_nu in Pa s^2 m^-6 per unit opening.
    #[serde(default = "default_valve_coeff")]
    pub valve_coeff: f64,
}

impl Edge {
    pub fn is_bidirectional(&self) -> bool {
        self.q_min < 0.0
    }
}

/// The network as declared in configuration: junction nodes, edges, the
/// exchanger assignments of producers/consumers/prosumers/storages (node id
/// to edge id), and the supply/return mirror pairing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub producers: BTreeMap<String, String>,
    #[serde(default)]
    pub consumers: BTreeMap<String, String>,
    #[serde(default)]
    pub prosumers: BTreeMap<String, String>,
    #[serde(default)]
    pub storages: BTreeMap<String, String>,
    /// Supply node -> return node mirror map (stored one way, treated as an
    /// involution).
    pub pairing: BTreeMap<String, String>,
}

impl NetworkSpec {
    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n == id)
            .ok_or_else(|| DhnError::Structure(format!("unknown node `{id}`")))
    }

    pub fn edge_index(&self, id: &str) -> Result<usize> {
        self.edges
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| DhnError::Structure(format!("unknown edge `{id}`")))
    }

    /// Mirror partner of a node under the declared pairing (involutive
    /// closure of the stored map).
    pub fn pair_of(&self, node: &str) -> Result<&str> {
        if let Some(p) = self.pairing.get(node) {
            return Ok(p);
        }
        for (a, b) in &self.pairing {
            if b == node {
                return Ok(a);
            }
        }
        Err(DhnError::Config(format!(
            "node `{node}` has no supply/return pairing entry"
        )))
    }

    /// Edge ids carrying a heat exchanger (all four roles).
    pub fn exchanger_edges(&self) -> BTreeSet<String> {
        self.producers
            .values()
            .chain(self.consumers.values())
            .chain(self.prosumers.values())
            .chain(self.storages.values())
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || self.edges.is_empty() {
            return Err(DhnError::Structure("empty node or edge list".into()));
        }
        let mut seen_pairs = BTreeSet::new();
        for e in &self.edges {
            self.node_index(&e.tail)?;
            self.node_index(&e.head)?;
            if e.tail == e.head {
                return Err(DhnError::Structure(format!("edge `{}` is a self-loop", e.id)));
            }
            if !(e.length > 0.0 && e.diameter > 0.0 && e.friction > 0.0 && e.heat_transfer > 0.0)
            {
                return Err(DhnError::Structure(format!(
                    "edge `{}` needs positive L, d, K, U",
                    e.id
                )));
            }
            if e.q_min > e.q_max || e.q_max <= 0.0 {
                return Err(DhnError::Structure(format!(
                    "edge `{}` has invalid flow bounds [{}, {}]",
                    e.id, e.q_min, e.q_max
                )));
            }
            if e.pump_capacity < 0.0 {
                return Err(DhnError::Structure(format!(
                    "edge `{}` has negative pump capacity",
                    e.id
                )));
            }
            if e.has_valve && e.valve_coeff <= 0.0 {
                return Err(DhnError::Structure(format!(
                    "edge `{}` has a valve but nonpositive valve coefficient",
                    e.id
                )));
            }
            // One pipeline segment per node pair keeps cycle identity
            // unambiguous.
            let key = if e.tail < e.head {
                (e.tail.clone(), e.head.clone())
            } else {
                (e.head.clone(), e.tail.clone())
            };
            if !seen_pairs.insert(key) {
                return Err(DhnError::Structure(format!(
                    "parallel edge `{}`: at most one edge per node pair",
                    e.id
                )));
            }
        }
        for n in &self.nodes {
            let p = self.pair_of(n)?;
            let pp = self.pair_of(p)?;
            if pp != n {
                return Err(DhnError::Config(format!(
                    "pairing is not an involution at node `{n}`"
                )));
            }
        }
        for (role, map) in [
            ("producer", &self.producers),
            ("consumer", &self.consumers),
            ("prosumer", &self.prosumers),
            ("storage", &self.storages),
        ] {
            for (node, edge) in map {
                self.node_index(node)?;
                let ei = self.edge_index(edge)?;
                let e = &self.edges[ei];
                if e.tail != *node && e.head != *node {
                    return Err(DhnError::Structure(format!(
                        "{role} `{node}` references edge `{edge}` that does not touch it"
                    )));
                }
            }
        }
        // Mirror structure is advisory: asymmetric edges merely shrink the
        // symmetric cycle set.
        for e in &self.edges {
            let mt = self.pair_of(&e.head)?;
            let mh = self.pair_of(&e.tail)?;
            let found = self.edges.iter().any(|x| x.tail == mt && x.head == mh);
            if !found {
                log::warn!("edge `{}` has no mirror ({} -> {})", e.id, mt, mh);
            }
        }
        Ok(())
    }
}

/// The expanded graph G+: one extra reverse edge per bidirectional pipe.
#[derive(Debug, Clone)]
pub struct ExpandedGraph {
    pub spec: NetworkSpec,
    /// Per expanded edge: (index into spec.edges, reversed flag).
    pub origin: Vec<(usize, bool)>,
    /// Tail/head node indices per expanded edge.
    pub tails: Vec<usize>,
    pub heads: Vec<usize>,
    /// Added reverse edge index -> forward expanded index.
    pub reverse_of: BTreeMap<usize, usize>,
    /// Incidence matrix, |N| x |E+|, +1 at head, -1 at tail.
    pub incidence: DMatrix<f64>,
    /// Adjacency matrix on nodes.
    pub adjacency: DMatrix<f64>,
}

impl ExpandedGraph {
    pub fn n_nodes(&self) -> usize {
        self.spec.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.origin.len()
    }

    pub fn edge(&self, idx: usize) -> &Edge {
        &self.spec.edges[self.origin[idx].0]
    }

    pub fn is_reverse(&self, idx: usize) -> bool {
        self.origin[idx].1
    }

    /// Human-readable label for an expanded edge.
    pub fn edge_label(&self, idx: usize) -> String {
        let (i, rev) = self.origin[idx];
        if rev {
            format!("{}~rev", self.spec.edges[i].id)
        } else {
            self.spec.edges[i].id.clone()
        }
    }

    /// Expanded index of the forward direction of a spec edge.
    pub fn forward_index(&self, spec_idx: usize) -> usize {
        self.origin
            .iter()
            .position(|&(i, rev)| i == spec_idx && !rev)
            .expect("every spec edge has a forward expansion")
    }

    /// Mirror partner of each expanded edge under the supply/return pairing,
    /// if one exists: the edge from pair(head) to pair(tail).
    pub fn mirror_map(&self) -> Result<Vec<Option<usize>>> {
        let n = self.n_edges();
        let mut out = vec![None; n];
        for i in 0..n {
            let t = &self.spec.nodes[self.tails[i]];
            let h = &self.spec.nodes[self.heads[i]];
            let mt = self.spec.node_index(self.spec.pair_of(h)?)?;
            let mh = self.spec.node_index(self.spec.pair_of(t)?)?;
            // A self-mirrored edge (exchangers crossing supply/return) takes
            // precedence over any other candidate.
            if self.tails[i] == mt && self.heads[i] == mh {
                out[i] = Some(i);
                continue;
            }
            out[i] = (0..n).find(|&j| self.tails[j] == mt && self.heads[j] == mh);
        }
        Ok(out)
    }
}

/// Expand bidirectional pipes into antiparallel edge pairs (flow
/// decomposition into nonnegative components).
pub fn expand_bidirectional(spec: &NetworkSpec) -> Result<ExpandedGraph> {
    spec.validate()?;
    let n = spec.nodes.len();
    let mut origin = Vec::new();
    let mut tails = Vec::new();
    let mut heads = Vec::new();
    for (i, e) in spec.edges.iter().enumerate() {
        origin.push((i, false));
        tails.push(spec.node_index(&e.tail)?);
        heads.push(spec.node_index(&e.head)?);
    }
    let mut reverse_of = BTreeMap::new();
    for (i, e) in spec.edges.iter().enumerate() {
        if e.is_bidirectional() {
            let fwd = i; // forward expansions precede all reverses
            reverse_of.insert(origin.len(), fwd);
            origin.push((i, true));
            tails.push(spec.node_index(&e.head)?);
            heads.push(spec.node_index(&e.tail)?);
        }
    }
    let m = origin.len();
    let mut incidence = DMatrix::zeros(n, m);
    let mut adjacency = DMatrix::zeros(n, n);
    for j in 0..m {
        incidence[(tails[j], j)] = -1.0;
        incidence[(heads[j], j)] = 1.0;
        adjacency[(tails[j], heads[j])] = 1.0;
    }
    let g = ExpandedGraph {
        spec: spec.clone(),
        origin,
        tails,
        heads,
        reverse_of,
        incidence,
        adjacency,
    };
    if !strongly_connected(&g) {
        return Err(DhnError::Structure(
            "expanded graph is not strongly connected".into(),
        ));
    }
    Ok(g)
}

fn strongly_connected(g: &ExpandedGraph) -> bool {
    let n = g.n_nodes();
    let reach = |forward: bool| -> usize {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for j in 0..g.n_edges() {
                let (a, b) = if forward {
                    (g.tails[j], g.heads[j])
                } else {
                    (g.heads[j], g.tails[j])
                };
                if a == u && !seen[b] {
                    seen[b] = true;
                    count += 1;
                    stack.push(b);
                }
            }
        }
        count
    };
    reach(true) == n && reach(false) == n
}

/// A simple directed cycle in G+, stored with the smallest node id first.
/// `edges[i]` runs from `nodes[i]` to `nodes[(i+1) % len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cycle {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
}

impl Cycle {
    pub fn edge_set(&self) -> BTreeSet<usize> {
        self.edges.iter().copied().collect()
    }
}

/// Enumerate all simple directed cycles of the expanded graph, canonicalized
/// so the smallest node index leads. Errors once `cap` cycles are exceeded.
pub fn enumerate_directed_cycles(g: &ExpandedGraph, cap: usize) -> Result<Vec<Cycle>> {
    let n = g.n_nodes();
    // Outgoing edge lists sorted by (head, edge index) for determinism.
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for j in 0..g.n_edges() {
        out_edges[g.tails[j]].push(j);
    }
    for l in &mut out_edges {
        l.sort_by_key(|&j| (g.heads[j], j));
    }

    let mut cycles = Vec::new();
    let mut on_path = vec![false; n];
    let mut node_path: Vec<usize> = Vec::new();
    let mut edge_path: Vec<usize> = Vec::new();

    // Each cycle is found exactly once: rooted at its smallest node, with all
    // other nodes restricted to larger indices.
    fn dfs(
        u: usize,
        start: usize,
        g: &ExpandedGraph,
        out_edges: &[Vec<usize>],
        on_path: &mut [bool],
        node_path: &mut Vec<usize>,
        edge_path: &mut Vec<usize>,
        cycles: &mut Vec<Cycle>,
        cap: usize,
    ) -> Result<()> {
        for &j in &out_edges[u] {
            let v = g.heads[j];
            if v == start {
                if cycles.len() >= cap {
                    return Err(DhnError::CycleOverflow { cap });
                }
                let mut edges = edge_path.clone();
                edges.push(j);
                cycles.push(Cycle {
                    nodes: node_path.clone(),
                    edges,
                });
            } else if v > start && !on_path[v] {
                on_path[v] = true;
                node_path.push(v);
                edge_path.push(j);
                dfs(v, start, g, out_edges, on_path, node_path, edge_path, cycles, cap)?;
                edge_path.pop();
                node_path.pop();
                on_path[v] = false;
            }
        }
        Ok(())
    }

    for s in 0..n {
        on_path[s] = true;
        node_path.push(s);
        dfs(
            s,
            s,
            g,
            &out_edges,
            &mut on_path,
            &mut node_path,
            &mut edge_path,
            &mut cycles,
            cap,
        )?;
        node_path.pop();
        on_path[s] = false;
    }
    cycles.sort_by(|a, b| (a.nodes.len(), &a.nodes).cmp(&(b.nodes.len(), &b.nodes)));
    Ok(cycles)
}

/// Drop cycles with two or fewer nodes and cycles whose edge set is not
/// invariant under the supply/return mirror map.
pub fn filter_cycles(g: &ExpandedGraph, cycles: &[Cycle]) -> Result<Vec<Cycle>> {
    let mirror = g.mirror_map()?;
    let mut kept = Vec::new();
    for c in cycles {
        if c.nodes.len() <= 2 {
            continue;
        }
        let set = c.edge_set();
        let symmetric = set.iter().all(|&e| match mirror[e] {
            Some(m) => set.contains(&m),
            None => false,
        });
        if symmetric {
            kept.push(c.clone());
        }
    }
    Ok(kept)
}

/// Reduced loop matrix F_r: one 0/1 row per retained cycle, duplicates
/// (by edge set) removed.
pub fn reduced_loop_matrix(cycles: &[Cycle], n_edges: usize) -> DMatrix<f64> {
    let mut sets: Vec<BTreeSet<usize>> = Vec::new();
    for c in cycles {
        let s = c.edge_set();
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    let mut f_r = DMatrix::zeros(sets.len(), n_edges);
    for (i, s) in sets.iter().enumerate() {
        for &j in s {
            f_r[(i, j)] = 1.0;
        }
    }
    f_r
}

/// Select a maximal independent row subset of F_r by pivoted QR on F_r^T.
/// Returns (F, m_f, selected row indices, ambiguity). Because rows of F are
/// rows of F_r, F stays nonnegative by construction.
pub fn fundamental_loop_matrix(
    f_r: &DMatrix<f64>,
) -> (DMatrix<f64>, usize, Vec<usize>, Option<(usize, usize)>) {
    let qr = pivoted_qr(&f_r.transpose(), RANK_REL_TOL);
    if let Some((lo, hi)) = qr.ambiguous {
        log::warn!("loop matrix rank is numerically ambiguous: candidates {lo} and {hi}");
    }
    let m_f = qr.rank;
    let rows: Vec<usize> = qr.pivots[..m_f].to_vec();
    let mut f = DMatrix::zeros(m_f, f_r.ncols());
    for (k, &r) in rows.iter().enumerate() {
        f.set_row(k, &f_r.row(r));
    }
    (f, m_f, rows, qr.ambiguous)
}

/// The full loop construction: cycles, F_r, and F.
#[derive(Debug, Clone)]
pub struct LoopStructure {
    pub cycles: Vec<Cycle>,
    pub f_r: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub m_f: usize,
    /// Rows of F_r selected into F by the pivoted factorization.
    pub pivot_rows: Vec<usize>,
    pub rank_ambiguity: Option<(usize, usize)>,
}

impl LoopStructure {
    pub fn build(g: &ExpandedGraph, cap: usize) -> Result<Self> {
        let all = enumerate_directed_cycles(g, cap)?;
        let cycles = filter_cycles(g, &all)?;
        if cycles.is_empty() {
            return Err(DhnError::Structure(
                "no symmetric directed cycles found".into(),
            ));
        }
        let f_r = reduced_loop_matrix(&cycles, g.n_edges());
        let (f, m_f, pivot_rows, rank_ambiguity) = fundamental_loop_matrix(&f_r);
        Ok(Self {
            cycles,
            f_r,
            f,
            m_f,
            pivot_rows,
            rank_ambiguity,
        })
    }

    pub fn m_r(&self) -> usize {
        self.f_r.nrows()
    }
}

/// Result of checking Assumption 1 for a valve selection.
#[derive(Debug, Clone)]
pub struct ValveReport {
    /// Valved expanded-edge indices, in column order of Pi.
    pub valve_edges: Vec<usize>,
    /// Selection matrix, |E+| x |V|.
    pub pi: DMatrix<f64>,
    pub rank_f_pi: usize,
    pub psi: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub m_theta: usize,
    /// Z2 with Psi + Theta Z2 elementwise nonnegative, when found.
    pub z2: Option<DMatrix<f64>>,
    /// Nonnegative right inverse G of F Pi; Psi + Theta Z2 = G F.
    pub recovery_gain: Option<DMatrix<f64>>,
    pub assumption_satisfied: bool,
    /// Loops (rows of F) without valve coverage when the rank test fails.
    pub deficient_loops: Vec<usize>,
    /// max |F - F Pi Psi|.
    pub reconstruction_error: f64,
}

/// Check Assumption 1: rank(F Pi) = m_f and existence of Z2 making
/// Psi + Theta Z2 nonnegative. The Z2 search runs one nonnegative
/// least-squares projection per loop, seeking G >= 0 with (F Pi) G = I;
/// then Z2 = G F - Psi certifies feasibility.
pub fn check_valve_assumption(f: &DMatrix<f64>, valve_edges: &[usize]) -> ValveReport {
    let m_f = f.nrows();
    let n_e = f.ncols();
    let n_v = valve_edges.len();
    let mut pi = DMatrix::zeros(n_e, n_v);
    for (k, &e) in valve_edges.iter().enumerate() {
        pi[(e, k)] = 1.0;
    }
    let f_pi = f * &pi;
    let rank_f_pi = if n_v == 0 {
        0
    } else {
        pivoted_qr(&f_pi, RANK_REL_TOL).rank
    };

    let pinv = if n_v == 0 {
        DMatrix::zeros(0, m_f)
    } else {
        let smax = f_pi.clone().svd(false, false).singular_values.max();
        f_pi.clone()
            .svd(true, true)
            .pseudo_inverse(1e-12 * smax.max(1.0))
            .unwrap_or_else(|_| DMatrix::zeros(n_v, m_f))
    };
    let psi = &pinv * f;
    let theta = DMatrix::identity(n_v, n_v) - &pinv * &f_pi;
    let m_theta = n_v - rank_f_pi;
    let reconstruction_error = (f - &f_pi * &psi).abs().max();

    let mut deficient_loops = Vec::new();
    if rank_f_pi < m_f {
        for i in 0..m_f {
            if f_pi.row(i).iter().all(|v| v.abs() < 0.5) {
                deficient_loops.push(i);
            }
        }
    }

    // Z2 search as a columnwise nonnegative projection: W >= 0 with
    // (F Pi) W = F, then Z2 = W - Psi satisfies Psi + Theta Z2 = W >= 0.
    let mut z2 = None;
    let mut recovery_gain = None;
    if rank_f_pi == m_f && n_v > 0 {
        let mut w = DMatrix::zeros(n_v, n_e);
        let mut ok = true;
        for j in 0..n_e {
            let target = f.column(j).clone_owned();
            let (col, res) = nnls(&f_pi, &target);
            if res > 1e-8 {
                ok = false;
                break;
            }
            w.set_column(j, &col);
        }
        if ok {
            z2 = Some(&w - &psi);
        }

        // Stronger certificate used as the recovery fast path: a nonnegative
        // right inverse G of F Pi maps loop surpluses straight to valve
        // substitutes, guaranteeing y >= 0 for every loop-feasible flow.
        let mut g = DMatrix::zeros(n_v, m_f);
        let mut g_ok = true;
        for i in 0..m_f {
            let mut e_i = DVector::zeros(m_f);
            e_i[i] = 1.0;
            let (col, res) = nnls(&f_pi, &e_i);
            if res > 1e-8 {
                g_ok = false;
                break;
            }
            g.set_column(i, &col);
        }
        if g_ok {
            recovery_gain = Some(g);
        }
    }

    let assumption_satisfied = rank_f_pi == m_f && z2.is_some();
    ValveReport {
        valve_edges: valve_edges.to_vec(),
        pi,
        rank_f_pi,
        psi,
        theta,
        m_theta,
        z2,
        recovery_gain,
        assumption_satisfied,
        deficient_loops,
        reconstruction_error,
    }
}

/// Valve placement in reverse cascading order from consumers (supply section
/// only): consumer-side exchanger edges are valved first, each bidirectional
/// pipe gets a single valve, splitting nodes valve their outgoing pipes
/// unless the pipe heads into another splitting node, and merging nodes valve
/// incoming pipes that originate at a producer outlet.
pub fn suggest_valve_placement(spec: &NetworkSpec) -> Result<BTreeSet<String>> {
    spec.validate()?;
    let hx: BTreeSet<String> = spec.exchanger_edges();
    let producer_hx: BTreeSet<&String> = spec.producers.values().collect();

    let mut valves = BTreeSet::new();
    for id in spec
        .consumers
        .values()
        .chain(spec.prosumers.values())
        .chain(spec.storages.values())
    {
        valves.insert(id.clone());
    }
    for e in &spec.edges {
        if e.is_bidirectional() && !hx.contains(&e.id) {
            valves.insert(e.id.clone());
        }
    }

    // Supply section: nodes reachable from producer outlets over pipe edges.
    let mut supply: BTreeSet<String> = BTreeSet::new();
    let mut frontier: Vec<String> = Vec::new();
    for id in &producer_hx {
        let e = &spec.edges[spec.edge_index(id)?];
        supply.insert(e.head.clone());
        frontier.push(e.head.clone());
    }
    while let Some(u) = frontier.pop() {
        for e in &spec.edges {
            if hx.contains(&e.id) {
                continue;
            }
            for v in [&e.tail, &e.head] {
                if (e.tail == u || e.head == u) && !supply.contains(v.as_str()) {
                    supply.insert(v.clone());
                    frontier.push(v.clone());
                }
            }
        }
    }

    let producer_outlets: BTreeSet<String> = producer_hx
        .iter()
        .map(|id| spec.edges[spec.edge_index(id).unwrap()].head.clone())
        .collect();

    // Out-degree in the operational sense: bidirectional pipes and
    // consumer-mode exchangers count as outgoing at both incident nodes.
    let out_degree = |n: &str| -> usize {
        spec.edges
            .iter()
            .filter(|e| {
                if producer_hx.contains(&e.id) {
                    return false;
                }
                e.tail == n || (e.is_bidirectional() && e.head == n)
            })
            .count()
    };
    let is_splitting = |n: &str| out_degree(n) >= 2;

    for n in &supply {
        let degree = spec
            .edges
            .iter()
            .filter(|e| e.tail == *n || e.head == *n)
            .count();
        if degree > 3 {
            return Err(DhnError::UnsupportedTopology(format!(
                "supply junction `{n}` has degree {degree} > 3"
            )));
        }
        if is_splitting(n) {
            for e in &spec.edges {
                if e.tail == *n && !hx.contains(&e.id) && !is_splitting(&e.head) {
                    valves.insert(e.id.clone());
                }
            }
        }
        // Merging node: two or more incoming pipes.
        let in_deg = spec
            .edges
            .iter()
            .filter(|e| {
                !hx.contains(&e.id) && (e.head == *n || (e.is_bidirectional() && e.tail == *n))
            })
            .count();
        if in_deg >= 2 {
            for e in &spec.edges {
                if e.head == *n && !hx.contains(&e.id) && producer_outlets.contains(&e.tail) {
                    valves.insert(e.id.clone());
                }
            }
        }
    }
    Ok(valves)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn expand_unidirectional_adds_nothing() {
        let spec = chain_spec();
        let g = expand_bidirectional(&spec).unwrap();
        assert_eq!(g.n_edges(), 4);
        assert!(g.reverse_of.is_empty());
        // Incidence columns sum to zero.
        for j in 0..g.n_edges() {
            assert_eq!(g.incidence.column(j).sum(), 0.0);
        }
    }

    #[test]
    fn expand_bidirectional_adds_reverse() {
        let mut spec = chain_spec();
        spec.edges[1] = bidir("e1", "S1", "S2");
        let g = expand_bidirectional(&spec).unwrap();
        assert_eq!(g.n_edges(), 5);
        let (&rev, &fwd) = g.reverse_of.iter().next().unwrap();
        assert_eq!(g.origin[rev].0, g.origin[fwd].0);
        assert!(g.is_reverse(rev) && !g.is_reverse(fwd));
        assert_eq!(g.tails[rev], g.heads[fwd]);
    }

    #[test]
    fn single_directed_triangle() {
        // a->b->c->a plus pairing to itself so validation passes.
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
        let cycles = enumerate_directed_cycles(&g, DEFAULT_CYCLE_CAP).unwrap();
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].nodes, vec![0, 1, 2]);
    }

    #[test]
    fn antiparallel_pair_is_one_two_node_cycle() {
        let spec = NetworkSpec {
            nodes: vec!["a".into(), "b".into()],
            edges: vec![bidir("ab", "a", "b")],
            producers: BTreeMap::new(),
            consumers: BTreeMap::new(),
            prosumers: BTreeMap::new(),
            storages: BTreeMap::new(),
            pairing: [
                ("a".to_string(), "a".to_string()),
                ("b".to_string(), "b".to_string()),
            ]
            .into(),
        };
        let g = expand_bidirectional(&spec).unwrap();
        let cycles = enumerate_directed_cycles(&g, DEFAULT_CYCLE_CAP).unwrap();
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].nodes.len(), 2);
        let filtered = filter_cycles(&g, &cycles).unwrap();
        assert!(filtered.is_empty());
    }

    /// Brute-force oracle: enumerate node sequences by unrestricted DFS from
    /// every node, canonicalize, dedup.
    fn oracle_cycles(g: &ExpandedGraph) -> usize {
        use std::collections::BTreeSet;
        let n = g.n_nodes();
        let mut found: BTreeSet<Vec<usize>> = BTreeSet::new();
        fn walk(
            u: usize,
            start: usize,
            g: &ExpandedGraph,
            path: &mut Vec<usize>,
            found: &mut BTreeSet<Vec<usize>>,
        ) {
            for j in 0..g.n_edges() {
                if g.tails[j] != u {
                    continue;
                }
                let v = g.heads[j];
                if v == start {
                    let min_pos = path
                        .iter()
                        .enumerate()
                        .min_by_key(|(_, &x)| x)
                        .map(|(i, _)| i)
                        .unwrap();
                    let mut canon = path[min_pos..].to_vec();
                    canon.extend_from_slice(&path[..min_pos]);
                    found.insert(canon);
                } else if !path.contains(&v) {
                    path.push(v);
                    walk(v, start, g, path, found);
                    path.pop();
                }
            }
        }
        for s in 0..n {
            let mut path = vec![s];
            walk(s, s, g, &mut path, &mut found);
        }
        found.len()
    }

    #[test]
    fn two_loops_sharing_a_node() {
        // 4 nodes, loops a->b->a is not simple without parallels, so use
        // a->b->c->a and a (shared at a) second loop a->d->a? needs parallel;
        // instead: a->b->a via distinct nodes: loops (a,b,c) and (a,d) won't
        // work with simple pairs, so use (a,b,c) and (a,d,e) sharing node a.
        let spec = NetworkSpec {
            nodes: ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect(),
            edges: vec![
                pipe("ab", "a", "b"),
                pipe("bc", "b", "c"),
                pipe("ca", "c", "a"),
                pipe("ad", "a", "d"),
                pipe("de", "d", "e"),
                pipe("ea", "e", "a"),
            ],
            producers: BTreeMap::new(),
            consumers: BTreeMap::new(),
            prosumers: BTreeMap::new(),
            storages: BTreeMap::new(),
            pairing: ["a", "b", "c", "d", "e"]
                .iter()
                .map(|s| (s.to_string(), s.to_string()))
                .collect(),
        };
        let g = expand_bidirectional(&spec).unwrap();
        let cycles = enumerate_directed_cycles(&g, DEFAULT_CYCLE_CAP).unwrap();
        assert_eq!(cycles.len(), 2);
        assert_eq!(cycles.len(), oracle_cycles(&g));
    }

    #[test]
    fn cycle_cap_overflow() {
        let spec = chain_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let err = enumerate_directed_cycles(&g, 0).unwrap_err();
        assert!(matches!(err, DhnError::CycleOverflow { cap: 0 }));
    }

    #[test]
    fn filter_keeps_symmetric_loop() {
        let spec = chain_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let cycles = enumerate_directed_cycles(&g, DEFAULT_CYCLE_CAP).unwrap();
        let kept = filter_cycles(&g, &cycles).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].nodes.len(), 4);
    }

    #[test]
    fn filter_drops_asymmetric_cycle() {
        let spec = skewed_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let cycles = enumerate_directed_cycles(&g, DEFAULT_CYCLE_CAP).unwrap();
        assert_eq!(cycles.len(), 2);
        let kept = filter_cycles(&g, &cycles).unwrap();
        assert_eq!(kept.len(), 1);
        // The survivor uses the consumer exchanger, not the shortcut.
        let hx_idx = spec.edge_index("hx_c").unwrap();
        let x_idx = spec.edge_index("x").unwrap();
        assert!(kept[0].edge_set().contains(&g.forward_index(hx_idx)));
        assert!(!kept[0].edge_set().contains(&g.forward_index(x_idx)));

        // Mirror-check oracle confirms the dropped cycle is asymmetric.
        let mirror = g.mirror_map().unwrap();
        for c in &cycles {
            let set = c.edge_set();
            let sym = set
                .iter()
                .all(|&e| mirror[e].map(|m| set.contains(&m)).unwrap_or(false));
            assert_eq!(sym, kept.iter().any(|k| k.edge_set() == set));
        }
    }

    #[test]
    fn reduced_matrix_rows() {
        let c = Cycle {
            nodes: vec![0, 1],
            edges: vec![1, 3],
        };
        let f_r = reduced_loop_matrix(&[c.clone(), c], 4);
        assert_eq!(f_r.nrows(), 1); // duplicates removed
        assert_eq!(f_r.row(0).iter().copied().collect::<Vec<_>>(), vec![0., 1., 0., 1.]);
    }

    #[test]
    fn reduced_matrix_matches_hand_enumeration() {
        let spec = skewed_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let cycles = enumerate_directed_cycles(&g, DEFAULT_CYCLE_CAP).unwrap();
        let f_r = reduced_loop_matrix(&cycles, g.n_edges());
        assert_eq!(f_r.nrows(), 2);
        // Hand-built rows: loop via hx_c uses {hx_p,e1,e2,hx_c,r2,r1},
        // loop via shortcut uses {hx_p,e1,x,r2,r1}.
        let idx = |id: &str| g.forward_index(spec.edge_index(id).unwrap());
        let mut want_a = vec![0.0; g.n_edges()];
        for id in ["hx_p", "e1", "e2", "hx_c", "r2", "r1"] {
            want_a[idx(id)] = 1.0;
        }
        let mut want_b = vec![0.0; g.n_edges()];
        for id in ["hx_p", "e1", "x", "r2", "r1"] {
            want_b[idx(id)] = 1.0;
        }
        let rows: Vec<Vec<f64>> = (0..2).map(|i| f_r.row(i).iter().copied().collect()).collect();
        assert!(rows.contains(&want_a) && rows.contains(&want_b));
    }

    #[test]
    fn fundamental_full_rank_keeps_all_rows() {
        let f_r = DMatrix::from_row_slice(2, 3, &[1., 1., 0., 0., 1., 1.]);
        let (f, m_f, _, _) = fundamental_loop_matrix(&f_r);
        assert_eq!(m_f, 2);
        assert_eq!(f.nrows(), 2);
    }

    #[test]
    fn fundamental_drops_dependent_row() {
        let f_r = DMatrix::from_row_slice(3, 3, &[1., 1., 0., 0., 1., 1., 1., 2., 1.]);
        let (f, m_f, rows, _) = fundamental_loop_matrix(&f_r);
        assert_eq!(m_f, 2);
        // Exhaustive-minor rank oracle on the 3x3 integer matrix.
        let det3 = f_r[(0, 0)] * (f_r[(1, 1)] * f_r[(2, 2)] - f_r[(1, 2)] * f_r[(2, 1)])
            - f_r[(0, 1)] * (f_r[(1, 0)] * f_r[(2, 2)] - f_r[(1, 2)] * f_r[(2, 0)])
            + f_r[(0, 2)] * (f_r[(1, 0)] * f_r[(2, 1)] - f_r[(1, 1)] * f_r[(2, 0)]);
        assert_eq!(det3, 0.0);
        assert!(rows.len() == 2 && rows[0] != rows[1]);
        // Row space preserved: each F_r row solvable against F.
        let pinv = f.clone().svd(true, true).pseudo_inverse(1e-12).unwrap();
        for i in 0..3 {
            let r = f_r.row(i).transpose();
            let coeff = &pinv.transpose() * &r;
            let resid = (f.transpose() * coeff - r).norm();
            assert!(resid < 1e-9, "row {i} residual {resid}");
        }
    }

    #[test]
    fn single_loop_network_f_equals_f_r() {
        let spec = chain_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let loops = LoopStructure::build(&g, DEFAULT_CYCLE_CAP).unwrap();
        assert_eq!(loops.m_f, 1);
        assert_eq!(loops.f, loops.f_r);
    }

    #[test]
    fn valve_assumption_with_all_edges_valved() {
        let spec = chain_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let loops = LoopStructure::build(&g, DEFAULT_CYCLE_CAP).unwrap();
        let all: Vec<usize> = (0..g.n_edges()).collect();
        let rep = check_valve_assumption(&loops.f, &all);
        assert!(rep.assumption_satisfied);
        assert!(rep.reconstruction_error <= 1e-9);
        assert_eq!(rep.rank_f_pi, loops.m_f);
    }

    #[test]
    fn valve_assumption_fails_without_valves() {
        let spec = chain_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let loops = LoopStructure::build(&g, DEFAULT_CYCLE_CAP).unwrap();
        let rep = check_valve_assumption(&loops.f, &[]);
        assert!(!rep.assumption_satisfied);
        assert_eq!(rep.rank_f_pi, 0);
        assert_eq!(rep.deficient_loops, vec![0]);
    }

    #[test]
    fn placement_on_chain_passes_check() {
        let spec = chain_spec();
        let valves = suggest_valve_placement(&spec).unwrap();
        assert!(valves.contains("hx_c"));
        let g = expand_bidirectional(&spec).unwrap();
        let loops = LoopStructure::build(&g, DEFAULT_CYCLE_CAP).unwrap();
        let idx: Vec<usize> = valves
            .iter()
            .map(|id| g.forward_index(spec.edge_index(id).unwrap()))
            .collect();
        let rep = check_valve_assumption(&loops.f, &idx);
        assert!(rep.assumption_satisfied);
        assert_eq!(loops.m_f, 1);
    }

    #[test]
    fn placement_valves_splitter_outlets() {
        // One splitter feeding two consumers: S1 -> {S2, S3}.
        let mut hx_p = pipe("hx_p", "R1", "S1");
        hx_p.pump_capacity = 4e5;
        let mut hx_a = pipe("hx_a", "S2", "R2");
        hx_a.has_valve = true;
        let mut hx_b = pipe("hx_b", "S3", "R3");
        hx_b.has_valve = true;
        let spec = NetworkSpec {
            nodes: ["S1", "S2", "S3", "R1", "R2", "R3"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            edges: vec![
                hx_p,
                pipe("e1", "S1", "S2"),
                pipe("e2", "S1", "S3"),
                hx_a,
                hx_b,
                pipe("r1", "R2", "R1"),
                pipe("r2", "R3", "R1"),
            ],
            producers: [("R1".to_string(), "hx_p".to_string())].into(),
            consumers: [
                ("S2".to_string(), "hx_a".to_string()),
                ("S3".to_string(), "hx_b".to_string()),
            ]
            .into(),
            prosumers: BTreeMap::new(),
            storages: BTreeMap::new(),
            pairing: [
                ("S1".to_string(), "R1".to_string()),
                ("S2".to_string(), "R2".to_string()),
                ("S3".to_string(), "R3".to_string()),
            ]
            .into(),
        };
        let valves = suggest_valve_placement(&spec).unwrap();
        assert!(valves.contains("e1") && valves.contains("e2"));
    }

    #[test]
    fn placement_valves_producer_edges_at_merge() {
        // Two producers merging into one consumer feed.
        let mut hx_p1 = pipe("hx_p1", "R1", "S1");
        hx_p1.pump_capacity = 4e5;
        let mut hx_p2 = pipe("hx_p2", "R2", "S2");
        hx_p2.pump_capacity = 4e5;
        let mut hx_c = pipe("hx_c", "S3", "R3");
        hx_c.has_valve = true;
        let spec = NetworkSpec {
            nodes: ["S1", "S2", "S3", "R1", "R2", "R3"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            edges: vec![
                hx_p1,
                hx_p2,
                pipe("e1", "S1", "S3"),
                pipe("e2", "S2", "S3"),
                hx_c,
                pipe("r1", "R3", "R1"),
                pipe("r2", "R3", "R2"),
            ],
            producers: [
                ("R1".to_string(), "hx_p1".to_string()),
                ("R2".to_string(), "hx_p2".to_string()),
            ]
            .into(),
            consumers: [("S3".to_string(), "hx_c".to_string())].into(),
            prosumers: BTreeMap::new(),
            storages: BTreeMap::new(),
            pairing: [
                ("S1".to_string(), "R1".to_string()),
                ("S2".to_string(), "R2".to_string()),
                ("S3".to_string(), "R3".to_string()),
            ]
            .into(),
        };
        let valves = suggest_valve_placement(&spec).unwrap();
        assert!(valves.contains("e1") && valves.contains("e2"));
    }

    #[test]
    fn degree_limit_enforced() {
        // Supply junction S2 with four incident pipes.
        let mut hx_p = pipe("hx_p", "R1", "S1");
        hx_p.pump_capacity = 4e5;
        let mut edges = vec![hx_p, pipe("e1", "S1", "S2")];
        let mut nodes: Vec<String> = ["S1", "S2", "R1", "R2"].iter().map(|s| s.to_string()).collect();
        let mut pairing: BTreeMap<String, String> = [
            ("S1".to_string(), "R1".to_string()),
            ("S2".to_string(), "R2".to_string()),
        ]
        .into();
        let mut consumers = BTreeMap::new();
        for k in 0..3 {
            let sn = format!("S{}", 3 + k);
            let rn = format!("R{}", 3 + k);
            nodes.push(sn.clone());
            nodes.push(rn.clone());
            pairing.insert(sn.clone(), rn.clone());
            edges.push(pipe(&format!("p{k}"), "S2", &sn));
            let mut hx = pipe(&format!("hx{k}"), &sn, &rn);
            hx.has_valve = true;
            edges.push(hx);
            edges.push(pipe(&format!("q{k}"), &rn, "R2"));
            consumers.insert(sn, format!("hx{k}"));
        }
        edges.push(pipe("r1", "R2", "R1"));
        let spec = NetworkSpec {
            nodes,
            edges,
            producers: [("R1".to_string(), "hx_p".to_string())].into(),
            consumers,
            prosumers: BTreeMap::new(),
            storages: BTreeMap::new(),
            pairing,
        };
        let err = suggest_valve_placement(&spec).unwrap_err();
        assert!(matches!(err, DhnError::UnsupportedTopology(_)));
    }

    #[test]
    fn nodal_balance_from_cycles() {
        // q = F_r^T q_r satisfies E q = 0 for random nonnegative q_r.
        use rand::{Rng, SeedableRng};
        let spec = skewed_spec();
        let g = expand_bidirectional(&spec).unwrap();
        let cycles = enumerate_directed_cycles(&g, DEFAULT_CYCLE_CAP).unwrap();
        let f_r = reduced_loop_matrix(&cycles, g.n_edges());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let q_r = DVector::from_fn(f_r.nrows(), |_, _| rng.gen_range(0.0..1.0));
            let q = f_r.transpose() * &q_r;
            let bal = &g.incidence * q;
            assert!(bal.abs().max() <= 1e-12);
        }
    }
}
