//! Finite-volume thermal model: mesh refinement of the expanded graph into
//! thermal nodes, assembly of the advection/loss matrix A(q), implicit-Euler
//! stepping of the index-1 DAE, junction mixing residuals, and CFL
//! diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::linalg::SparseLuSolver;
use crate::network::{ExpandedGraph, NetworkSpec};
use crate::{DhnError, Result};

/// Regularization flow added to junction mixing denominators (m^3/s). A
/// junction whose inflows all vanish is held at its previous temperature.
pub const JUNCTION_EPS: f64 = 1e-9;

/// Refined thermal graph: original junctions first (volume zero), then the
/// inserted finite-volume cells, chained per physical edge. Both directions
/// of a bidirectional pipe run over the same cell chain.
#[derive(Debug, Clone)]
pub struct ThermalGraph {
    /// Number of original nodes; refined node `i < n_junctions` is original
    /// node `i`, and its volume is exactly zero.
    pub n_junctions: usize,
    /// Number of inserted cells, m_c = sum of l_x.
    pub n_cells: usize,
    /// Node labels: original ids, then `<edge>.<k>` for inserted cells.
    pub labels: Vec<String>,
    /// Cell volumes (m^3); zero on junction rows.
    pub volumes: DVector<f64>,
    /// Heat-loss coefficients alpha_i = 4 U_i V_i / (rho c_p d_i) (m^3/s).
    pub alphas: DVector<f64>,
    /// Inserted-node count per physical edge.
    pub l_x: Vec<usize>,
    /// Per physical edge, the full refined node path (tail, cells..., head).
    pub paths: Vec<Vec<usize>>,
    /// Refined directed edges (tail, head), one flow value per segment.
    pub segments: Vec<(usize, usize)>,
    /// Expanded-edge index each segment originates from.
    pub segment_origin: Vec<usize>,
    /// Number of expanded edges the segments were generated from.
    pub n_base_edges: usize,
}

/// Refine the expanded graph by inserting `l_x[e]` cells on each physical
/// edge. Directed edges get the superdiagonal chain block, bidirectional
/// edges the symmetric tridiagonal block (forward and reverse directions
/// share cells). Cell volume is the pipe volume split evenly over the chain.
pub fn refine_mesh(g: &ExpandedGraph, l_x: &[usize], rho: f64, cp: f64) -> Result<ThermalGraph> {
    let spec = &g.spec;
    if l_x.len() != spec.edges.len() {
        return Err(DhnError::Dimension {
            what: "l_x entries per physical edge",
            expected: spec.edges.len(),
            got: l_x.len(),
        });
    }
    if rho <= 0.0 || cp <= 0.0 {
        return Err(DhnError::Domain(format!(
            "nonpositive fluid properties rho={rho}, cp={cp}"
        )));
    }

    let n_j = spec.nodes.len();
    let mut labels: Vec<String> = spec.nodes.clone();
    let mut volumes = vec![0.0; n_j];
    let mut alphas = vec![0.0; n_j];
    let mut paths = Vec::with_capacity(spec.edges.len());

    for (e, edge) in spec.edges.iter().enumerate() {
        let tail = spec.node_index(&edge.tail)?;
        let head = spec.node_index(&edge.head)?;
        let l = l_x[e];
        let mut path = Vec::with_capacity(l + 2);
        path.push(tail);
        if l > 0 {
            let area = std::f64::consts::PI * edge.diameter * edge.diameter / 4.0;
            let v_cell = area * edge.length / l as f64;
            let alpha = 4.0 * edge.heat_transfer * v_cell / (rho * cp * edge.diameter);
            for k in 1..=l {
                path.push(labels.len());
                labels.push(format!("{}.{k}", edge.id));
                volumes.push(v_cell);
                alphas.push(alpha);
            }
        }
        path.push(head);
        paths.push(path);
    }

    let mut segments = Vec::new();
    let mut segment_origin = Vec::new();
    for j in 0..g.n_edges() {
        let (e, reverse) = g.origin[j];
        let path = &paths[e];
        if reverse {
            for w in path.windows(2).rev() {
                segments.push((w[1], w[0]));
                segment_origin.push(j);
            }
        } else {
            for w in path.windows(2) {
                segments.push((w[0], w[1]));
                segment_origin.push(j);
            }
        }
    }

    Ok(ThermalGraph {
        n_junctions: n_j,
        n_cells: labels.len() - n_j,
        labels,
        volumes: DVector::from_vec(volumes),
        alphas: DVector::from_vec(alphas),
        l_x: l_x.to_vec(),
        paths,
        segments,
        segment_origin,
        n_base_edges: g.n_edges(),
    })
}

impl ThermalGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_junctions + self.n_cells
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn is_junction(&self, node: usize) -> bool {
        node < self.n_junctions
    }

    /// Refined incidence matrix E~ (nodes x segments, -1 tail / +1 head).
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n_nodes(), self.n_segments());
        for (s, &(t, h)) in self.segments.iter().enumerate() {
            e[(t, s)] = -1.0;
            e[(h, s)] = 1.0;
        }
        e
    }

    /// Refined 0/1 adjacency; bidirectional chains show up symmetric.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_nodes(), self.n_nodes());
        for &(t, h) in &self.segments {
            d[(t, h)] = 1.0;
        }
        d
    }

    /// Extend per-expanded-edge flows over the refined chains,
    /// q~ = [q_i (x) 1_{p_i}].
    pub fn extend_flows(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        if q.len() != self.n_base_edges {
            return Err(DhnError::Dimension {
                what: "expanded-edge flows",
                expected: self.n_base_edges,
                got: q.len(),
            });
        }
        Ok(DVector::from_fn(self.n_segments(), |s, _| {
            q[self.segment_origin[s]]
        }))
    }

    fn check_segment_flows(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.n_segments() {
            return Err(DhnError::Dimension {
                what: "refined segment flows",
                expected: self.n_segments(),
                got: q.len(),
            });
        }
        for (s, &qs) in q.iter().enumerate() {
            if qs < -1e-12 {
                let (t, h) = self.segments[s];
                return Err(DhnError::Domain(format!(
                    "negative flow {qs:.3e} on refined segment {} -> {}; directions are fixed",
                    self.labels[t], self.labels[h]
                )));
            }
        }
        Ok(())
    }

    /// Total inflow per refined node.
    pub fn inflows(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_segment_flows(q)?;
        let mut inflow = DVector::zeros(self.n_nodes());
        for (s, &(_, h)) in self.segments.iter().enumerate() {
            inflow[h] += q[s].max(0.0);
        }
        Ok(inflow)
    }

    /// A(q) = 1/2 E~ Q (|E~| - E~)^T - D_alpha, assembled by stencil: each
    /// segment with flow q contributes -q to the tail diagonal and +q to the
    /// (head, tail) entry. Structure is flow-independent.
    pub fn assemble_a(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_segment_flows(q)?;
        let n = self.n_nodes();
        let mut a = DMatrix::zeros(n, n);
        for (s, &(t, h)) in self.segments.iter().enumerate() {
            a[(t, t)] -= q[s];
            a[(h, t)] += q[s];
        }
        for i in 0..n {
            a[(i, i)] -= self.alphas[i];
        }
        Ok(a)
    }

    /// One implicit-Euler step of V x+ = V x + tau (A(q) x+ + bw).
    ///
    /// Cell rows use the full advection/loss stencil; junction rows (V = 0)
    /// are replaced by the flow-weighted mixing constraint with an epsilon
    /// regularization holding dead junctions at their previous temperature.
    /// With `regularize` off, a junction whose inflow sum is below
    /// [`JUNCTION_EPS`] is a degenerate-junction error.
    ///
    /// `bw` is the nodal injection B w in K m^3/s, i.e. heat rates already
    /// scaled by 1/(rho c_p); see [`InjectionLayout::inject`].
    pub fn step_implicit_euler(
        &self,
        x: &DVector<f64>,
        q: &DVector<f64>,
        bw: &DVector<f64>,
        tau: f64,
        regularize: bool,
    ) -> Result<DVector<f64>> {
        let n = self.n_nodes();
        if x.len() != n || bw.len() != n {
            return Err(DhnError::Dimension {
                what: "thermal state / injection",
                expected: n,
                got: if x.len() != n { x.len() } else { bw.len() },
            });
        }
        if tau <= 0.0 {
            return Err(DhnError::Domain(format!("nonpositive step size {tau}")));
        }
        self.check_segment_flows(q)?;
        let inflow = self.inflows(q)?;

        let mut lhs = SparseLuSolver::new(n);
        let mut rhs = vec![0.0; n];
        // Diagonal accumulators so duplicate triplets stay cheap to reason
        // about; off-diagonals are pushed directly (summed on assembly).
        let mut diag = vec![0.0; n];

        for i in 0..n {
            if self.is_junction(i) {
                // Mixing row: (sum_in q + eps) x+_j - sum_in q x+_tail = eps x_j.
                if inflow[i] <= JUNCTION_EPS && !regularize {
                    return Err(DhnError::DegenerateJunction {
                        junction: self.labels[i].clone(),
                    });
                }
                diag[i] += inflow[i] + JUNCTION_EPS;
                rhs[i] = JUNCTION_EPS * x[i];
            } else {
                diag[i] += self.volumes[i] + tau * self.alphas[i];
                rhs[i] = self.volumes[i] * x[i] + tau * bw[i];
            }
        }
        for (s, &(t, h)) in self.segments.iter().enumerate() {
            if self.is_junction(h) {
                lhs.add(h, t, -q[s]);
            } else {
                // Cell row of V - tau A couples -tau q to the upstream node.
                lhs.add(h, t, -tau * q[s]);
            }
            // Outflow shows up on the tail's own diagonal for cells only;
            // junction rows carry the inflow-weighted mixing denominator.
            if !self.is_junction(t) {
                diag[t] += tau * q[s];
            }
        }
        for (i, &d) in diag.iter().enumerate() {
            lhs.add(i, i, d);
        }

        lhs.solve(&mut rhs)?;
        Ok(DVector::from_vec(rhs))
    }

    /// One CFL record per cell: ratio q_in tau / V, flagged above 1.
    pub fn check_cfl(&self, q: &DVector<f64>, tau: f64) -> Result<Vec<CflRecord>> {
        let inflow = self.inflows(q)?;
        let mut out = Vec::with_capacity(self.n_cells);
        for i in self.n_junctions..self.n_nodes() {
            let ratio = inflow[i] * tau / self.volumes[i];
            out.push(CflRecord {
                node: i,
                label: self.labels[i].clone(),
                volume: self.volumes[i],
                inflow: inflow[i],
                ratio,
                flagged: ratio > 1.0 + 1e-12,
            });
        }
        Ok(out)
    }

    /// Split evaluation of the discrete-time DAE at state `x`:
    /// `f` is the implicit-Euler update of the cell block, `g` the junction
    /// algebraic residual sum_in q (x_tail - x_j) evaluated at `x` itself
    /// (zero exactly when the flow-weighted mixing rule holds).
    pub fn evaluate_f_g(
        &self,
        x: &DVector<f64>,
        q: &DVector<f64>,
        bw: &DVector<f64>,
        tau: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let next = self.step_implicit_euler(x, q, bw, tau, true)?;
        let f = DVector::from_fn(self.n_cells, |k, _| next[self.n_junctions + k]);
        let mut g = DVector::zeros(self.n_junctions);
        for (s, &(t, h)) in self.segments.iter().enumerate() {
            if self.is_junction(h) {
                g[h] += q[s] * (x[t] - x[h]);
            }
        }
        Ok((f, g))
    }
}

/// One CFL diagnostic row. The implicit scheme stays stable above ratio 1;
/// the flag only marks loss of sub-cell transport resolution.
#[derive(Debug, Clone)]
pub struct CflRecord {
    pub node: usize,
    pub label: String,
    pub volume: f64,
    pub inflow: f64,
    pub ratio: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangerKind {
    Producer,
    Consumer,
    Prosumer,
}

/// A heat exchanger mapped onto one refined cell.
#[derive(Debug, Clone)]
pub struct Exchanger {
    /// Role-map key (the junction the exchanger hangs off).
    pub name: String,
    pub kind: ExchangerKind,
    /// Physical edge index of the exchanger.
    pub edge: usize,
    /// Refined cell carrying the injection.
    pub node: usize,
}

/// Injection matrix B: one column per exchanger, single support row, entry
/// 1/(rho c_p). Columns are ordered by increasing refined node index.
#[derive(Debug, Clone)]
pub struct InjectionLayout {
    pub exchangers: Vec<Exchanger>,
    pub b: DMatrix<f64>,
}

impl InjectionLayout {
    /// Map each producer/consumer/prosumer heat exchanger of the spec onto
    /// the middle cell of its refined chain. Exchanger edges must carry at
    /// least one cell. Storages hold water passively and get no column.
    pub fn from_spec(tg: &ThermalGraph, spec: &NetworkSpec, rho: f64, cp: f64) -> Result<Self> {
        let mut exchangers = Vec::new();
        let roles: [(&std::collections::BTreeMap<String, String>, ExchangerKind); 3] = [
            (&spec.producers, ExchangerKind::Producer),
            (&spec.consumers, ExchangerKind::Consumer),
            (&spec.prosumers, ExchangerKind::Prosumer),
        ];
        for (map, kind) in roles {
            for (name, edge_id) in map {
                let e = spec.edge_index(edge_id)?;
                let l = tg.l_x[e];
                if l == 0 {
                    return Err(DhnError::Config(format!(
                        "exchanger edge `{edge_id}` needs at least one inserted cell (l_x >= 1)"
                    )));
                }
                let node = tg.paths[e][1 + (l - 1) / 2];
                exchangers.push(Exchanger {
                    name: name.clone(),
                    kind,
                    edge: e,
                    node,
                });
            }
        }
        exchangers.sort_by_key(|ex| ex.node);
        for pair in exchangers.windows(2) {
            if pair[0].node == pair[1].node {
                return Err(DhnError::Config(format!(
                    "exchangers `{}` and `{}` share injection cell {}",
                    pair[0].name, pair[1].name, pair[0].node
                )));
            }
        }
        let mut b = DMatrix::zeros(tg.n_nodes(), exchangers.len());
        for (j, ex) in exchangers.iter().enumerate() {
            b[(ex.node, j)] = 1.0 / (rho * cp);
        }
        Ok(Self { exchangers, b })
    }

    /// Nodal injection bw = B w, with w in watts per exchanger column
    /// (producers positive, consumer demands negative).
    pub fn inject(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.exchangers.len() {
            return Err(DhnError::Dimension {
                what: "exchanger heat rates",
                expected: self.exchangers.len(),
                got: w.len(),
            });
        }
        Ok(&self.b * w)
    }

    pub fn column_of(&self, name: &str) -> Option<usize> {
        self.exchangers.iter().position(|ex| ex.name == name)
    }
}
