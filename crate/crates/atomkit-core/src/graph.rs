//! Radius-graph construction and random-walk positional encodings.

use thiserror::Error;

use crate::geometry::LiftedEmbedding;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("RWPE length mismatch: have {have}, configured {want}")]
    RwpeLength { have: usize, want: usize },
    #[error("RWPE rows ({rows}) do not match atom count ({atoms})")]
    RwpeRows { rows: usize, atoms: usize },
}

/// Undirected epsilon-neighborhood graph: edge (i, j) iff distance < epsilon.
#[derive(Debug, Clone)]
pub struct RadiusGraph {
    pub n_nodes: usize,
    /// Unordered pairs with i < j; no self-loops.
    pub edges: Vec<(usize, usize)>,
    pub epsilon: f64,
}

impl RadiusGraph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n_nodes];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.n_nodes]; self.n_nodes];
        for &(i, j) in &self.edges {
            a[i][j] = 1.0;
            a[j][i] = 1.0;
        }
        a
    }
}

pub fn radius_graph(positions: &[[f64; 3]], epsilon: f64) -> RadiusGraph {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let n = positions.len();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = (0..3)
                .map(|k| (positions[i][k] - positions[j][k]).powi(2))
                .sum();
            if d2.sqrt() < epsilon {
                edges.push((i, j));
            }
        }
    }
    RadiusGraph { n_nodes: n, edges, epsilon }
}

/// Self-return probabilities p[i][k] = (M^(k+1))_ii for M = D^-1 A.
/// Isolated nodes get all-zero transition rows, hence all-zero encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct RwpeMatrix {
    pub n_nodes: usize,
    pub k: usize,
    /// Row-major N x K.
    pub p: Vec<f64>,
}

impl RwpeMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.k..(i + 1) * self.k]
    }
}

pub fn rwpe(graph: &RadiusGraph, k: usize) -> RwpeMatrix {
    assert!(k >= 1, "walk length must be at least 1");
    let n = graph.n_nodes;
    let deg = graph.degrees();
    let mut m = vec![0.0; n * n];
    for &(i, j) in &graph.edges {
        m[i * n + j] = 1.0 / deg[i] as f64;
        m[j * n + i] = 1.0 / deg[j] as f64;
    }
    let mut p = vec![0.0; n * k];
    let mut power = m.clone();
    for step in 0..k {
        if step > 0 {
            power = dense_mul(&power, &m, n);
        }
        for i in 0..n {
            p[i * k + step] = power[i * n + i];
        }
    }
    RwpeMatrix { n_nodes: n, k, p }
}

fn dense_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for l in 0..n {
            let av = a[i * n + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

/// Writes the RWPE vector into the last K scalar channels of Z, repeated for
/// every timestep copy of each atom. Returns a new embedding; X and V and the
/// other channels of Z are untouched.
pub fn attach_rwpe(
    embedding: &LiftedEmbedding,
    p: &RwpeMatrix,
    configured_k: usize,
) -> Result<LiftedEmbedding, GraphError> {
    if p.k != configured_k {
        return Err(GraphError::RwpeLength { have: p.k, want: configured_k });
    }
    if p.n_nodes != embedding.n_atoms {
        return Err(GraphError::RwpeRows { rows: p.n_nodes, atoms: embedding.n_atoms });
    }
    let d_v = embedding.layout.d_v;
    if embedding.layout.n_scalars < p.k {
        return Err(GraphError::RwpeLength { have: p.k, want: embedding.layout.n_scalars });
    }
    let keep = embedding.z.slice_cols(0, d_v - p.k);
    // Constant block: same RWPE rows for every timestep copy.
    let block = Tensor::new(&[p.n_nodes, p.k], p.p.clone())
        .expect("rwpe shape")
        .tile_rows(embedding.timesteps);
    let z = Tensor::concat_cols(&[keep, block]);
    Ok(LiftedEmbedding {
        x: embedding.x.clone(),
        v: embedding.v.clone(),
        z,
        layout: embedding.layout,
        n_atoms: embedding.n_atoms,
        timesteps: embedding.timesteps,
    })
}
