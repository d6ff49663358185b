//! Geometric preprocessing: norm augmentation, equivariant lifting into
//! channel space, and the canonicalization pipeline.
//!
//! Channel layout of the lifted width `d_v`: the first `3 * (d_v / 2 / 3)`
//! components form 3-vector triples that rotate with the input; the rest are
//! scalar channels built from norms and an atomic-number embedding, so they
//! are rotation invariant by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAX_ATOMIC_NUMBER: usize = 118;
pub const ATOM_EMBED_WIDTH: usize = 16;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate canonicalization: {0}")]
    Degenerate(String),
    #[error("invalid molecule state: {0}")]
    InvalidState(String),
    #[error("channel layout does not fit: {0}")]
    ChannelLayout(String),
}

/// One system snapshot: per-atom positions (Å), velocities (Å/fs), atomic
/// numbers, and the frame time (fs).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MoleculeState {
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub atomic_numbers: Vec<u32>,
    pub time: f64,
}

impl MoleculeState {
    pub fn new(
        positions: Vec<[f64; 3]>,
        velocities: Vec<[f64; 3]>,
        atomic_numbers: Vec<u32>,
        time: f64,
    ) -> Result<Self, GeometryError> {
        let n = positions.len();
        if n == 0 {
            return Err(GeometryError::InvalidState("empty molecule".into()));
        }
        if velocities.len() != n || atomic_numbers.len() != n {
            return Err(GeometryError::InvalidState(format!(
                "leading dimension mismatch: {} positions, {} velocities, {} atomic numbers",
                n,
                velocities.len(),
                atomic_numbers.len()
            )));
        }
        if atomic_numbers.iter().any(|&z| z == 0) {
            return Err(GeometryError::InvalidState("atomic number 0".into()));
        }
        Ok(MoleculeState { positions, velocities, atomic_numbers, time })
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    /// Applies `x -> R x + t`, `v -> R v` to every atom.
    pub fn rigid_motion(&self, rot: &[[f64; 3]; 3], shift: [f64; 3]) -> MoleculeState {
        let positions = self
            .positions
            .iter()
            .map(|x| {
                let r = mat_vec(rot, *x);
                [r[0] + shift[0], r[1] + shift[1], r[2] + shift[2]]
            })
            .collect();
        let velocities = self.velocities.iter().map(|v| mat_vec(rot, *v)).collect();
        MoleculeState {
            positions,
            velocities,
            atomic_numbers: self.atomic_numbers.clone(),
            time: self.time,
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> MoleculeState {
        MoleculeState {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            velocities: perm.iter().map(|&i| self.velocities[i]).collect(),
            atomic_numbers: perm.iter().map(|&i| self.atomic_numbers[i]).collect(),
            time: self.time,
        }
    }
}

/// (x, y, z, |r|).
pub fn augment_with_norm(v: [f64; 3]) -> [f64; 4] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0], v[1], v[2], n]
}

/// Vector-triple / scalar split of the embedding width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelLayout {
    pub d_v: usize,
    /// Number of 3-vector triples (occupying the first 3 * n_triples columns).
    pub n_triples: usize,
    pub n_scalars: usize,
}

impl ChannelLayout {
    pub fn for_width(d_v: usize) -> Result<ChannelLayout, GeometryError> {
        let n_triples = (d_v / 2) / 3;
        let n_scalars = d_v - 3 * n_triples;
        if d_v == 0 || n_scalars == 0 {
            return Err(GeometryError::ChannelLayout(format!(
                "d_v = {d_v} leaves no scalar channels"
            )));
        }
        Ok(ChannelLayout { d_v, n_triples, n_scalars })
    }

    pub fn vector_cols(&self) -> std::ops::Range<usize> {
        0..3 * self.n_triples
    }

    pub fn scalar_cols(&self) -> std::ops::Range<usize> {
        3 * self.n_triples..self.d_v
    }
}

/// Position, velocity, and phase feature matrices, all (N*P) x d_v, ordered
/// atom-major within timestep blocks (t1 atoms, then t2 atoms, ...).
pub struct LiftedEmbedding {
    pub x: Tensor,
    pub v: Tensor,
    pub z: Tensor,
    pub layout: ChannelLayout,
    pub n_atoms: usize,
    pub timesteps: usize,
}

/// Learnable lifting parameters. Vector triples take per-triple mixing
/// coefficients of the raw 3-vectors; scalar channels take dense maps of
/// norms plus the atomic-number embedding.
pub struct LiftParams {
    pub layout: ChannelLayout,
    /// True: symmetry-preserving lift. False: one dense matrix per stream on
    /// the raw 6-vector plus invariant features (ablation baseline).
    pub equivariant: bool,
    pub embed: Tensor, // (MAX_ATOMIC_NUMBER + 1) x ATOM_EMBED_WIDTH
    // Equivariant route.
    pub wx_vec: Tensor, // 1 x n_triples, position coefficients of X triples
    pub wv_vec: Tensor, // 1 x n_triples, velocity coefficients of V triples
    pub wz_vec_pos: Tensor,
    pub wz_vec_vel: Tensor,
    pub wx_scal: Tensor, // (1 + embed) x n_scalars
    pub wv_scal: Tensor,
    pub wz_scal: Tensor, // (2 + embed) x n_scalars
    pub bx: Tensor,
    pub bv: Tensor,
    pub bz: Tensor,
    // Plain-linear route: raw (x, v, |x|, |v|, embed) through a dense map.
    pub plain_x: Tensor, // (8 + embed) x d_v
    pub plain_v: Tensor,
    pub plain_z: Tensor,
}

impl LiftParams {
    pub fn init<R: Rng>(layout: ChannelLayout, equivariant: bool, rng: &mut R) -> LiftParams {
        let nt = layout.n_triples.max(1);
        let ns = layout.n_scalars;
        let se = ATOM_EMBED_WIDTH;
        let std_s = 1.0 / ((1 + se) as f64).sqrt();
        let std_z = 1.0 / ((2 + se) as f64).sqrt();
        let std_p = 1.0 / ((8 + se) as f64).sqrt();
        LiftParams {
            layout,
            equivariant,
            embed: Tensor::randn_param(&[MAX_ATOMIC_NUMBER + 1, se], 0.5, rng),
            wx_vec: Tensor::randn_param(&[1, nt], 1.0, rng),
            wv_vec: Tensor::randn_param(&[1, nt], 1.0, rng),
            wz_vec_pos: Tensor::randn_param(&[1, nt], 1.0, rng),
            wz_vec_vel: Tensor::randn_param(&[1, nt], 1.0, rng),
            wx_scal: Tensor::randn_param(&[1 + se, ns], std_s, rng),
            wv_scal: Tensor::randn_param(&[1 + se, ns], std_s, rng),
            wz_scal: Tensor::randn_param(&[2 + se, ns], std_z, rng),
            bx: Tensor::randn_param(&[ns], 0.1, rng),
            bv: Tensor::randn_param(&[ns], 0.1, rng),
            bz: Tensor::randn_param(&[ns], 0.1, rng),
            plain_x: Tensor::randn_param(&[8 + se, layout.d_v], std_p, rng),
            plain_v: Tensor::randn_param(&[8 + se, layout.d_v], std_p, rng),
            plain_z: Tensor::randn_param(&[8 + se, layout.d_v], std_p, rng),
        }
    }

    pub fn named(&self, out: &mut Vec<(String, Tensor)>) {
        let pairs: [(&str, &Tensor); 14] = [
            ("lift.embed", &self.embed),
            ("lift.wx_vec", &self.wx_vec),
            ("lift.wv_vec", &self.wv_vec),
            ("lift.wz_vec_pos", &self.wz_vec_pos),
            ("lift.wz_vec_vel", &self.wz_vec_vel),
            ("lift.wx_scal", &self.wx_scal),
            ("lift.wv_scal", &self.wv_scal),
            ("lift.wz_scal", &self.wz_scal),
            ("lift.bx", &self.bx),
            ("lift.bv", &self.bv),
            ("lift.bz", &self.bz),
            ("lift.plain_x", &self.plain_x),
            ("lift.plain_v", &self.plain_v),
            ("lift.plain_z", &self.plain_z),
        ];
        for (n, t) in pairs {
            out.push((n.to_string(), t.clone()));
        }
    }
}

/// Lifts a state into (X, V, Z), duplicating each atom's features P times
/// along the node-time axis.
pub fn equivariant_lift(
    state: &MoleculeState,
    timesteps: usize,
    params: &LiftParams,
) -> Result<LiftedEmbedding, GeometryError> {
    assert!(timesteps >= 1, "need at least one timestep");
    let n = state.n_atoms();
    let layout = params.layout;
    let pos = Tensor::new(&[n, 3], flatten3(&state.positions)).expect("shape");
    let vel = Tensor::new(&[n, 3], flatten3(&state.velocities)).expect("shape");
    let idx: Vec<usize> = state
        .atomic_numbers
        .iter()
        .map(|&z| (z as usize).min(MAX_ATOMIC_NUMBER))
        .collect();
    let embed = Tensor::gather_rows(&params.embed, &idx);
    let norms: Vec<f64> = state
        .positions
        .iter()
        .zip(&state.velocities)
        .flat_map(|(x, v)| [augment_with_norm(*x)[3], augment_with_norm(*v)[3]])
        .collect();
    let norms = Tensor::new(&[n, 2], norms).expect("shape");
    let pos_norm = norms.slice_cols(0, 1);
    let vel_norm = norms.slice_cols(1, 2);

    let (x, v, z) = if params.equivariant {
        let vec_block = |coef_pos: Option<&Tensor>, coef_vel: Option<&Tensor>| -> Option<Tensor> {
            if layout.n_triples == 0 {
                return None;
            }
            let mut triples = Vec::with_capacity(layout.n_triples);
            for j in 0..layout.n_triples {
                let mut t: Option<Tensor> = None;
                if let Some(cp) = coef_pos {
                    t = Some(pos.scale_by(&cp.slice_cols(j, j + 1)));
                }
                if let Some(cv) = coef_vel {
                    let part = vel.scale_by(&cv.slice_cols(j, j + 1));
                    t = Some(match t {
                        Some(prev) => prev.add(&part),
                        None => part,
                    });
                }
                triples.push(t.expect("at least one stream"));
            }
            Some(Tensor::concat_cols(&triples))
        };
        let scal = |feats: &Tensor, w: &Tensor, b: &Tensor| {
            feats.matmul(w).expect("shape").add_row(b)
        };
        let x_feats = Tensor::concat_cols(&[pos_norm.clone(), embed.clone()]);
        let v_feats = Tensor::concat_cols(&[vel_norm.clone(), embed.clone()]);
        let z_feats = Tensor::concat_cols(&[norms.clone(), embed.clone()]);
        let assemble = |vecs: Option<Tensor>, scals: Tensor| match vecs {
            Some(vb) => Tensor::concat_cols(&[vb, scals]),
            None => scals,
        };
        let x = assemble(
            vec_block(Some(&params.wx_vec), None),
            scal(&x_feats, &params.wx_scal, &params.bx),
        );
        let v = assemble(
            vec_block(None, Some(&params.wv_vec)),
            scal(&v_feats, &params.wv_scal, &params.bv),
        );
        let z = assemble(
            vec_block(Some(&params.wz_vec_pos), Some(&params.wz_vec_vel)),
            scal(&z_feats, &params.wz_scal, &params.bz),
        );
        (x, v, z)
    } else {
        let raw = Tensor::concat_cols(&[pos, vel, norms, embed]);
        (
            raw.matmul(&params.plain_x).expect("shape"),
            raw.matmul(&params.plain_v).expect("shape"),
            raw.matmul(&params.plain_z).expect("shape"),
        )
    };

    Ok(LiftedEmbedding {
        x: x.tile_rows(timesteps),
        v: v.tile_rows(timesteps),
        z: z.tile_rows(timesteps),
        layout,
        n_atoms: n,
        timesteps,
    })
}

/// Canonical pose: rotation, centroid, and canonicalized coordinates.
#[derive(Debug, Clone)]
pub struct CanonicalFrame {
    /// Columns are the canonical axes e1, e2, e3 (det +1).
    pub rotation: [[f64; 3]; 3],
    pub centroid: [f64; 3],
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
}

const EIGEN_GAP_TOL: f64 = 1e-8;
const CHIRALITY_TOL: f64 = 1e-10;

/// Centers, aligns to covariance eigenvectors (descending), fixes signs with
/// the chirality pseudoscalar, and enforces right-handedness.
pub fn canonicalize(state: &MoleculeState) -> Result<CanonicalFrame, GeometryError> {
    let n = state.n_atoms();
    if n < 3 {
        return Err(GeometryError::Degenerate(format!("need >= 3 atoms, got {n}")));
    }
    let nf = n as f64;
    let mut mu = [0.0; 3];
    for x in &state.positions {
        for k in 0..3 {
            mu[k] += x[k] / nf;
        }
    }
    let centered: Vec<[f64; 3]> = state
        .positions
        .iter()
        .map(|x| [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2]])
        .collect();
    let mut s = [[0.0; 3]; 3];
    for x in &centered {
        for a in 0..3 {
            for b in 0..3 {
                s[a][b] += x[a] * x[b] / nf;
            }
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen_3x3(s);
    if eigvals[0] - eigvals[1] < EIGEN_GAP_TOL || eigvals[1] - eigvals[2] < EIGEN_GAP_TOL {
        return Err(GeometryError::Degenerate(format!(
            "covariance eigenvalues not separated: {eigvals:?}"
        )));
    }
    // Chirality pseudoscalar over centered positions; rotation-equivariant
    // and translation-invariant.
    let mut c0 = [0.0; 3];
    for (x, v) in centered.iter().zip(&state.velocities) {
        let c = cross(*x, *v);
        for k in 0..3 {
            c0[k] += c[k];
        }
    }
    if norm3(c0) <= CHIRALITY_TOL {
        return Err(GeometryError::Degenerate("vanishing chirality pseudoscalar".into()));
    }
    let mut e1 = eigvecs[0];
    let mut e2 = eigvecs[1];
    if dot3(e1, c0) < 0.0 {
        e1 = neg3(e1);
    }
    // Gram-Schmidt e2 against e1, then fix its sign; a third-moment fallback
    // covers the case where c0 lies (numerically) along e1.
    let proj = dot3(e2, e1);
    for k in 0..3 {
        e2[k] -= proj * e1[k];
    }
    let n2 = norm3(e2);
    if n2 <= CHIRALITY_TOL {
        return Err(GeometryError::Degenerate("collapsed second axis".into()));
    }
    for v in e2.iter_mut() {
        *v /= n2;
    }
    let s2 = dot3(e2, c0);
    if s2.abs() > CHIRALITY_TOL {
        if s2 < 0.0 {
            e2 = neg3(e2);
        }
    } else {
        let third: f64 = centered.iter().map(|x| dot3(*x, e2).powi(3)).sum();
        if third.abs() <= CHIRALITY_TOL {
            return Err(GeometryError::Degenerate("ambiguous second-axis sign".into()));
        }
        if third < 0.0 {
            e2 = neg3(e2);
        }
    }
    let e3 = cross(e1, e2);
    let q = [
        [e1[0], e2[0], e3[0]],
        [e1[1], e2[1], e3[1]],
        [e1[2], e2[2], e3[2]],
    ];
    // Canonical coordinates are projections onto the axes: x~ = Q^T (x - mu).
    let positions = centered.iter().map(|x| [dot3(*x, e1), dot3(*x, e2), dot3(*x, e3)]).collect();
    let velocities = state
        .velocities
        .iter()
        .map(|v| [dot3(*v, e1), dot3(*v, e2), dot3(*v, e3)])
        .collect();
    Ok(CanonicalFrame { rotation: q, centroid: mu, positions, velocities })
}

/// Inverse of canonicalization on positions: y = Q y~ + mu.
pub fn decanonicalize(canonical: &[[f64; 3]], frame: &CanonicalFrame) -> Vec<[f64; 3]> {
    canonical
        .iter()
        .map(|y| {
            let r = mat_vec(&frame.rotation, *y);
            [
                r[0] + frame.centroid[0],
                r[1] + frame.centroid[1],
                r[2] + frame.centroid[2],
            ]
        })
        .collect()
}

/// Uniformly distributed SO(3) rotation, deterministic per seed.
pub fn random_rotation(seed: u64) -> [[f64; 3]; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_rotation_with(&mut rng)
}

pub fn random_rotation_with<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    // Uniform unit quaternion -> rotation matrix.
    loop {
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        return [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
    }
}

// ── small 3-vector helpers ─────────────────────────────────────────────

pub fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

fn neg3(a: [f64; 3]) -> [f64; 3] {
    [-a[0], -a[1], -a[2]]
}

pub fn flatten3(v: &[[f64; 3]]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// Eigenvalues (descending) and matching eigenvectors of a symmetric 3x3
/// matrix via cyclic Jacobi rotations.
pub fn jacobi_eigen_3x3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[0.0; 3]; 3];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..64 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut pairs: Vec<(f64, [f64; 3])> = (0..3)
        .map(|i| (a[i][i], [v[0][i], v[1][i], v[2][i]]))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    (
        [pairs[0].0, pairs[1].0, pairs[2].0],
        [pairs[0].1, pairs[1].1, pairs[2].1],
    )
}

#[cfg(test)]
mod tests;
