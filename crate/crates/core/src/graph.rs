//! Graph storage and the propagation operators used as the parameter-free P
//! primitive: symmetric GCN normalization, row-stochastic mean aggregation,
//! and single-head additive attention.

use std::sync::{Arc, OnceLock};

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sparse::{Csr, SpMat};

/// Immutable node-classification instance: features, integer labels, and a
/// sparse adjacency without self-loops (normalization re-adds them).
#[derive(Debug)]
pub struct Graph {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    undirected: bool,
    adj: Csr,
    gcn_cache: OnceLock<Arc<SpMat>>,
    sage_cache: OnceLock<Arc<SpMat>>,
    self_loop_cache: OnceLock<Arc<Csr>>,
}

impl Graph {
    /// Build a graph from directed edge pairs. Self-loops are dropped,
    /// duplicates collapsed, and the edge set is symmetrized when
    /// `undirected` is set.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        edges: &[(usize, usize)],
        undirected: bool,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::contract(
                "graph",
                format!("{} labels for {} feature rows", labels.len(), n),
            ));
        }
        if num_classes == 0 {
            return Err(Error::contract("graph", "num_classes must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(
                "graph",
                format!("label {bad} out of range for {num_classes} classes"),
            ));
        }
        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::contract(
                    "graph",
                    format!("edge ({u},{v}) out of range for {n} nodes"),
                ));
            }
            if u == v {
                continue;
            }
            neighbors[u].push(v);
            if undirected {
                neighbors[v].push(u);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Graph {
            features,
            labels,
            num_classes,
            undirected,
            adj: Csr::from_rows(&neighbors),
            gcn_cache: OnceLock::new(),
            sage_cache: OnceLock::new(),
            self_loop_cache: OnceLock::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn is_undirected(&self) -> bool {
        self.undirected
    }

    pub fn adjacency(&self) -> &Csr {
        &self.adj
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj.row(i).len()
    }

    /// Directed edge count as stored (each undirected edge counts twice).
    pub fn num_directed_edges(&self) -> usize {
        self.adj.nnz()
    }

    /// Each edge once: (u, v) with u < v for undirected graphs, stored
    /// orientation otherwise.
    pub fn edges_once(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.num_nodes() {
            for &j in self.adj.row(i) {
                if !self.undirected || i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Symmetrically normalized adjacency with self-loops,
    /// D^(-1/2) (A+I) D^(-1/2); cached after the first call.
    pub fn normalize_gcn(&self) -> Arc<SpMat> {
        Arc::clone(self.gcn_cache.get_or_init(|| {
            let n = self.num_nodes();
            let inv_sqrt: Vec<f64> = (0..n)
                .map(|i| 1.0 / ((self.degree(i) + 1) as f64).sqrt())
                .collect();
            let csr = self.adjacency_with_self_loops();
            let mut values = Vec::with_capacity(csr.nnz());
            for i in 0..n {
                for &j in csr.row(i) {
                    values.push(inv_sqrt[i] * inv_sqrt[j]);
                }
            }
            Arc::new(SpMat::new((*csr).clone(), values))
        }))
    }

    /// Row-stochastic adjacency with self-loops, D^(-1) (A+I): the mean over
    /// N(i) and i itself; cached after the first call.
    pub fn normalize_sage(&self) -> Arc<SpMat> {
        Arc::clone(self.sage_cache.get_or_init(|| {
            let n = self.num_nodes();
            let csr = self.adjacency_with_self_loops();
            let mut values = Vec::with_capacity(csr.nnz());
            for i in 0..n {
                let inv = 1.0 / (self.degree(i) + 1) as f64;
                for _ in csr.row(i) {
                    values.push(inv);
                }
            }
            Arc::new(SpMat::new((*csr).clone(), values))
        }))
    }

    /// Adjacency structure over N(i) ∪ {i}, used by the attention operator.
    pub fn adjacency_with_self_loops(&self) -> Arc<Csr> {
        Arc::clone(self.self_loop_cache.get_or_init(|| {
            let n = self.num_nodes();
            let rows: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    let mut r: Vec<usize> = self.adj.row(i).to_vec();
                    let pos = r.partition_point(|&j| j < i);
                    r.insert(pos, i);
                    r
                })
                .collect();
            Arc::new(Csr::from_rows(&rows))
        }))
    }

    /// Relabel nodes: old node i becomes perm[i]. Features, labels, and
    /// edges move consistently.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::contract(
                "permute",
                format!("permutation length {} for {} nodes", perm.len(), n),
            ));
        }
        let mut seen = vec![false; n];
        for &p in perm {
            if p >= n || seen[p] {
                return Err(Error::contract("permute", "not a bijection"));
            }
            seen[p] = true;
        }
        let mut features = Matrix::zeros(n, self.features.cols());
        let mut labels = vec![0; n];
        for i in 0..n {
            features.row_mut(perm[i]).copy_from_slice(self.features.row(i));
            labels[perm[i]] = self.labels[i];
        }
        let edges: Vec<(usize, usize)> = self
            .edges_once()
            .iter()
            .map(|&(u, v)| (perm[u], perm[v]))
            .collect();
        Graph::new(features, labels, self.num_classes, &edges, self.undirected)
    }
}

/// Learnable single-head attention parameters: one score vector for the
/// receiving node and one for its neighbors, plus the leaky-relu slope.
#[derive(Clone, Debug)]
pub struct GatAttention {
    pub a_src: Tensor,
    pub a_dst: Tensor,
    pub slope: f64,
}

impl GatAttention {
    /// Glorot-initialized vectors of width `dim`.
    pub fn new(dim: usize, slope: f64, rng: &mut impl Rng) -> Self {
        GatAttention {
            a_src: Tensor::parameter(crate::init::glorot(dim, 1, rng)),
            a_dst: Tensor::parameter(crate::init::glorot(dim, 1, rng)),
            slope,
        }
    }
}

/// The propagation operator families of the model's P primitive.
#[derive(Clone, Debug)]
pub enum PropKind {
    GcnLike,
    SageLike,
    GatLike(GatAttention),
}

/// One propagation step h ← P(h, neighborhood), differentiable through `h`
/// and, for the attention variant, through the attention vectors.
pub fn propagate(tape: &Tape, kind: &PropKind, g: &Graph, h: &Tensor) -> Result<Tensor> {
    if h.rows() != g.num_nodes() {
        return Err(Error::dimension(
            "propagate",
            format!("{} rows for {} nodes", h.rows(), g.num_nodes()),
        ));
    }
    match kind {
        PropKind::GcnLike => tape.spmatmul(&g.normalize_gcn(), h),
        PropKind::SageLike => tape.spmatmul(&g.normalize_sage(), h),
        PropKind::GatLike(att) => {
            let src = tape.matmul(h, &att.a_src)?;
            let dst = tape.matmul(h, &att.a_dst)?;
            tape.edge_softmax_aggregate(
                &g.adjacency_with_self_loops(),
                h,
                &src,
                &dst,
                att.slope,
            )
        }
    }
}
