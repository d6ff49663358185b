//! The ATOM operator network: temporal rotary embeddings, heterogeneous
//! attention over position/velocity/phase streams with learnable gates,
//! value residuals, RMS-norm + SwiGLU blocks, and the forward map from an
//! input state to positions at queried timestamps.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    canonicalize, decanonicalize, equivariant_lift, flatten3, ChannelLayout, GeometryError,
    LiftParams, MoleculeState,
};
use crate::graph::{attach_rwpe, radius_graph, rwpe};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EquivarianceMode {
    /// Equivariant lifting only; the trunk is unconstrained.
    QuasiEquivariant,
    /// Canonicalize before the trunk, decanonicalize after. Falls back to the
    /// quasi-equivariant path when the frame is degenerate.
    Canonicalized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomModelConfig {
    pub d_v: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub rope_base: f64,
    pub rope_timescale: f64,
    pub attention_dropout: f64,
    pub mlp_hidden_multiple: usize,
    pub delta_prediction: bool,
    pub mode: EquivarianceMode,
    pub rwpe_enabled: bool,
    pub rwpe_k: usize,
    pub rwpe_epsilon: f64,
    /// Exposed for parity with the published table; semantics undefined there,
    /// so only 1 is accepted.
    pub n_output_heads: usize,
    /// False swaps the symmetry-preserving lift for a plain dense layer
    /// (rotation-robustness ablation).
    pub equivariant_lift: bool,
}

impl Default for AtomModelConfig {
    fn default() -> Self {
        AtomModelConfig {
            d_v: 32,
            n_layers: 2,
            n_heads: 4,
            rope_base: 1000.0,
            rope_timescale: 1.0,
            attention_dropout: 0.2,
            mlp_hidden_multiple: 4,
            delta_prediction: true,
            mode: EquivarianceMode::QuasiEquivariant,
            rwpe_enabled: false,
            rwpe_k: 8,
            rwpe_epsilon: 1.6,
            n_output_heads: 1,
            equivariant_lift: true,
        }
    }
}

impl AtomModelConfig {
    pub fn d_h(&self) -> usize {
        self.d_v / self.n_heads
    }

    pub fn validate(&self) -> Result<ChannelLayout, ModelError> {
        if self.n_heads == 0 || self.d_v % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_v = {} must be divisible by n_heads = {}",
                self.d_v, self.n_heads
            )));
        }
        if self.d_h() % 2 != 0 {
            return Err(ModelError::Config(format!("per-head width {} must be even", self.d_h())));
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(ModelError::Config("attention_dropout must be in [0, 1)".into()));
        }
        if self.rope_base <= 0.0 || self.rope_timescale <= 0.0 {
            return Err(ModelError::Config("rope base and timescale must be positive".into()));
        }
        if self.n_layers == 0 {
            return Err(ModelError::Config("need at least one layer".into()));
        }
        if self.n_output_heads != 1 {
            return Err(ModelError::Config(
                "only a single output head is supported".into(),
            ));
        }
        let layout = ChannelLayout::for_width(self.d_v)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        if self.rwpe_enabled && layout.n_scalars < self.rwpe_k {
            return Err(ModelError::Config(format!(
                "RWPE needs {} scalar channels but the layout has {}",
                self.rwpe_k, layout.n_scalars
            )));
        }
        Ok(layout)
    }
}

/// Per-timestep, per-frequency rotary angles. Depends on timestamps only
/// through the lags t_p - t0.
#[derive(Debug, Clone)]
pub struct TropeAngles {
    pub timesteps: usize,
    pub half_width: usize,
    /// Row-major P x (d_h / 2).
    pub angles: Vec<f64>,
}

/// theta[p][k] = (omega_k / tau) * (t_p - t0), omega_k = base^(-2k/d_h).
pub fn trope_angles(timestamps: &[f64], t0: f64, d_h: usize, base: f64, tau: f64) -> TropeAngles {
    assert!(d_h % 2 == 0, "per-head width must be even");
    assert!(tau > 0.0 && base > 0.0);
    let half = d_h / 2;
    let mut angles = Vec::with_capacity(timestamps.len() * half);
    for &t in timestamps {
        let lag = t - t0;
        for k in 0..half {
            let omega = base.powf(-2.0 * k as f64 / d_h as f64);
            angles.push(omega / tau * lag);
        }
    }
    TropeAngles { timesteps: timestamps.len(), half_width: half, angles }
}

impl TropeAngles {
    /// Cos/sin tables for an (n_atoms * P) x d_h matrix in atom-major
    /// timestep-block order: every atom at timestep p shares one rotation.
    pub fn tables(&self, n_atoms: usize) -> (Vec<f64>, Vec<f64>) {
        let half = self.half_width;
        let mut cos = Vec::with_capacity(self.timesteps * n_atoms * half);
        let mut sin = Vec::with_capacity(self.timesteps * n_atoms * half);
        for p in 0..self.timesteps {
            let row = &self.angles[p * half..(p + 1) * half];
            for _ in 0..n_atoms {
                cos.extend(row.iter().map(|a| a.cos()));
                sin.extend(row.iter().map(|a| a.sin()));
            }
        }
        (cos, sin)
    }
}

/// Rotates each consecutive coordinate pair of every row by the timestep's
/// angle schedule. Norm preserving.
pub fn apply_trope(x: &Tensor, angles: &TropeAngles, n_atoms: usize) -> Result<Tensor, ModelError> {
    let rows = x.shape()[0];
    let width = x.shape()[1];
    if rows != angles.timesteps * n_atoms || width != 2 * angles.half_width {
        return Err(ModelError::Contract(format!(
            "trope layout mismatch: {}x{} input vs {} timesteps x {} atoms, d_h {}",
            rows,
            width,
            angles.timesteps,
            n_atoms,
            2 * angles.half_width
        )));
    }
    let (cos, sin) = angles.tables(n_atoms);
    Ok(x.apply_rotations(&cos, &sin))
}

/// lambda = sigmoid(alpha), except the first layer where lambda is locked to
/// 0.5 regardless of alpha. Returns lambda * v + (1 - lambda) * v1.
pub fn value_residual_mix(v: &Tensor, v1: &Tensor, alpha: &Tensor, is_first_layer: bool) -> Tensor {
    assert_eq!(v.shape(), v1.shape(), "value residual shape mismatch");
    if is_first_layer {
        return v.add(v1).scale(0.5);
    }
    let lambda = alpha.sigmoid();
    let one = Tensor::new(lambda.shape(), vec![1.0; lambda.numel()]).expect("shape");
    let complement = one.sub(&lambda);
    v.scale_by(&lambda).add(&v1.scale_by(&complement))
}

/// The heterogeneous temporal attention core: queries come from the phase
/// stream, keys from each of the three (already normalized) streams, values
/// are the provided pre-projected (and residual-mixed) tensors. Per-stream
/// outputs are scaled by the gates and summed; T-RoPE is applied per head
/// with a shared angle schedule. Returns the concatenated head outputs,
/// shape (N*P) x d_v.
#[allow(clippy::too_many_arguments)]
pub fn heterogeneous_attention(
    z_normed: &Tensor,
    x_normed: &Tensor,
    v_normed: &Tensor,
    wq: &Tensor,
    wk: &[Tensor; 3],
    values: &[Tensor; 3],
    gamma: &[Tensor; 3],
    n_heads: usize,
    angles: &TropeAngles,
    n_atoms: usize,
    dropout: f64,
    training: bool,
    mut rng: Option<&mut ChaCha8Rng>,
    mut capture: Option<&mut Vec<Vec<f64>>>,
) -> Result<Tensor, ModelError> {
    let d_v = z_normed.shape()[1];
    assert!(n_heads >= 1 && d_v % n_heads == 0, "head split must divide d_v");
    let d_h = d_v / n_heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let streams = [x_normed, v_normed, z_normed];
    let q_full = z_normed.matmul(wq)?;
    let mut head_outputs: Vec<Tensor> = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let lo = h * d_h;
        let hi = lo + d_h;
        let qh = apply_trope(&q_full.slice_cols(lo, hi), angles, n_atoms)?;
        let mut head_sum: Option<Tensor> = None;
        for (s, feat) in streams.iter().enumerate() {
            let kh = apply_trope(&feat.matmul(&wk[s])?.slice_cols(lo, hi), angles, n_atoms)?;
            let logits = qh.matmul(&kh.t())?.scale(scale);
            let weights = logits.softmax(1);
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(weights.to_vec());
            }
            let weights = match rng.as_deref_mut() {
                Some(r) => weights.dropout(dropout, training, r),
                None => weights,
            };
            let vh = values[s].slice_cols(lo, hi);
            let out = weights.matmul(&vh)?.scale_by(&gamma[s]);
            head_sum = Some(match head_sum {
                Some(acc) => acc.add(&out),
                None => out,
            });
        }
        head_outputs.push(head_sum.expect("three streams"));
    }
    Ok(Tensor::concat_cols(&head_outputs))
}

struct LayerParams {
    wq: Tensor,
    wk: [Tensor; 3], // X, V, Z order
    wv: [Tensor; 3],
    gamma: [Tensor; 3],
    alpha: Tensor,
    wo: Tensor,
    g_z: Tensor,
    g_x: Tensor,
    g_v: Tensor,
    g_mlp: Tensor,
    w_mlp_in: Tensor,
    w_mlp_out: Tensor,
}

pub struct AtomModel {
    pub config: AtomModelConfig,
    pub lift: LiftParams,
    layers: Vec<LayerParams>,
    g_final: Tensor,
    w_out: Tensor,
    b_out: Tensor,
}

const RMS_EPS: f64 = 1e-6;

impl AtomModel {
    pub fn init(config: AtomModelConfig, rng: &mut ChaCha8Rng) -> Result<AtomModel, ModelError> {
        let layout = config.validate()?;
        let d_v = config.d_v;
        let lift = LiftParams::init(layout, config.equivariant_lift, rng);
        let std = 1.0 / (d_v as f64).sqrt();
        let hidden = config.mlp_hidden_multiple * d_v;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let proj = |rng: &mut ChaCha8Rng| Tensor::randn_param(&[d_v, d_v], std, rng);
            layers.push(LayerParams {
                wq: proj(rng),
                wk: [proj(rng), proj(rng), proj(rng)],
                wv: [proj(rng), proj(rng), proj(rng)],
                // Unweighted average of the three streams at init.
                gamma: [
                    Tensor::param(&[1], vec![1.0 / 3.0]).unwrap(),
                    Tensor::param(&[1], vec![1.0 / 3.0]).unwrap(),
                    Tensor::param(&[1], vec![1.0 / 3.0]).unwrap(),
                ],
                alpha: Tensor::param(&[1], vec![0.0]).unwrap(),
                wo: proj(rng),
                g_z: Tensor::param(&[d_v], vec![1.0; d_v]).unwrap(),
                g_x: Tensor::param(&[d_v], vec![1.0; d_v]).unwrap(),
                g_v: Tensor::param(&[d_v], vec![1.0; d_v]).unwrap(),
                g_mlp: Tensor::param(&[d_v], vec![1.0; d_v]).unwrap(),
                w_mlp_in: Tensor::randn_param(&[d_v, 2 * hidden], std, rng),
                w_mlp_out: Tensor::randn_param(&[hidden, d_v], 1.0 / (hidden as f64).sqrt(), rng),
            });
        }
        Ok(AtomModel {
            config,
            lift,
            layers,
            g_final: Tensor::param(&[d_v], vec![1.0; d_v]).unwrap(),
            // Zero-initialized projection: delta mode starts at the identity.
            w_out: Tensor::param(&[d_v, 3], vec![0.0; d_v * 3]).unwrap(),
            b_out: Tensor::param(&[3], vec![0.0; 3]).unwrap(),
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.lift.named(&mut out);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut push = |suffix: &str, t: &Tensor| {
                out.push((format!("layer.{l}.{suffix}"), t.clone()));
            };
            push("wq", &layer.wq);
            for (i, s) in ["x", "v", "z"].iter().enumerate() {
                push(&format!("wk_{s}"), &layer.wk[i]);
                push(&format!("wv_{s}"), &layer.wv[i]);
                push(&format!("gamma_{s}"), &layer.gamma[i]);
            }
            push("alpha", &layer.alpha);
            push("wo", &layer.wo);
            push("g_z", &layer.g_z);
            push("g_x", &layer.g_x);
            push("g_v", &layer.g_v);
            push("g_mlp", &layer.g_mlp);
            push("w_mlp_in", &layer.w_mlp_in);
            push("w_mlp_out", &layer.w_mlp_out);
        }
        out.push(("g_final".into(), self.g_final.clone()));
        out.push(("w_out".into(), self.w_out.clone()));
        out.push(("b_out".into(), self.b_out.clone()));
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Evaluation forward: positions at the queried timestamps, shape
    /// (N * P) x 3 in atom-major timestep blocks.
    pub fn forward(&self, state: &MoleculeState, timestamps: &[f64]) -> Result<Tensor, ModelError> {
        self.forward_full(state, timestamps, false, None, None)
    }

    pub fn forward_train(
        &self,
        state: &MoleculeState,
        timestamps: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor, ModelError> {
        self.forward_full(state, timestamps, true, Some(rng), None)
    }

    /// Forward pass that also captures every attention-weight matrix
    /// (post-softmax, pre-dropout), one entry per (layer, stream, head).
    pub fn forward_captured(
        &self,
        state: &MoleculeState,
        timestamps: &[f64],
        capture: &mut Vec<Vec<f64>>,
    ) -> Result<Tensor, ModelError> {
        self.forward_full(state, timestamps, false, None, Some(capture))
    }

    fn forward_full(
        &self,
        state: &MoleculeState,
        timestamps: &[f64],
        training: bool,
        mut rng: Option<&mut ChaCha8Rng>,
        mut capture: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<Tensor, ModelError> {
        if timestamps.is_empty() {
            return Err(ModelError::Contract("no query timestamps".into()));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::Contract("timestamps must be strictly increasing".into()));
        }
        if timestamps[0] < state.time {
            return Err(ModelError::Contract("timestamps must not precede the input frame".into()));
        }

        // Canonicalized mode wraps the whole map; degenerate frames fall back
        // to the quasi-equivariant path.
        let frame = if self.config.mode == EquivarianceMode::Canonicalized {
            match canonicalize(state) {
                Ok(f) => Some(f),
                Err(GeometryError::Degenerate(_)) => None,
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };
        let trunk_state = match &frame {
            Some(f) => MoleculeState {
                positions: f.positions.clone(),
                velocities: f.velocities.clone(),
                atomic_numbers: state.atomic_numbers.clone(),
                time: state.time,
            },
            None => state.clone(),
        };

        let n = trunk_state.n_atoms();
        let p = timestamps.len();
        let mut lifted = equivariant_lift(&trunk_state, p, &self.lift)?;
        if self.config.rwpe_enabled {
            let graph = radius_graph(&trunk_state.positions, self.config.rwpe_epsilon);
            let enc = rwpe(&graph, self.config.rwpe_k);
            lifted = attach_rwpe(&lifted, &enc, self.config.rwpe_k)
                .map_err(|e| ModelError::Config(e.to_string()))?;
        }

        let angles = trope_angles(
            timestamps,
            trunk_state.time,
            self.config.d_h(),
            self.config.rope_base,
            self.config.rope_timescale,
        );

        let mut z = lifted.z.clone();
        let mut first_values: Option<[Tensor; 3]> = None;
        for layer in self.layers.iter() {
            let zn = z.rms_norm(&layer.g_z, RMS_EPS);
            let xn = lifted.x.rms_norm(&layer.g_x, RMS_EPS);
            let vn = lifted.v.rms_norm(&layer.g_v, RMS_EPS);
            let streams = [&xn, &vn, &zn];
            let mut stream_vals: Vec<Tensor> = Vec::with_capacity(3);
            for (s, feat) in streams.iter().enumerate() {
                let raw = feat.matmul(&layer.wv[s])?;
                let mixed = match &first_values {
                    None => raw,
                    Some(firsts) => {
                        value_residual_mix(&raw, &firsts[s], &layer.alpha, false)
                    }
                };
                stream_vals.push(mixed);
            }
            if first_values.is_none() {
                // Locked lambda = 0.5 on the first block; mixing the first
                // values with themselves is the identity.
                let locked: Vec<Tensor> = stream_vals
                    .iter()
                    .map(|v| value_residual_mix(v, v, &layer.alpha, true))
                    .collect();
                stream_vals = locked;
                first_values = Some([
                    stream_vals[0].clone(),
                    stream_vals[1].clone(),
                    stream_vals[2].clone(),
                ]);
            }

            let values = [
                stream_vals[0].clone(),
                stream_vals[1].clone(),
                stream_vals[2].clone(),
            ];
            let attn = heterogeneous_attention(
                &zn,
                &xn,
                &vn,
                &layer.wq,
                &layer.wk,
                &values,
                &layer.gamma,
                self.config.n_heads,
                &angles,
                n,
                self.config.attention_dropout,
                training,
                rng.as_deref_mut(),
                capture.as_deref_mut(),
            )?
            .matmul(&layer.wo)?;
            z = z.add(&attn);

            let zm = z.rms_norm(&layer.g_mlp, RMS_EPS);
            let mlp = zm.matmul(&layer.w_mlp_in)?.swiglu()?.matmul(&layer.w_mlp_out)?;
            z = z.add(&mlp);
        }

        let projected = z
            .rms_norm(&self.g_final, RMS_EPS)
            .matmul(&self.w_out)?
            .add_row(&self.b_out);
        let out = if self.config.delta_prediction {
            let base = Tensor::new(&[n, 3], flatten3(&trunk_state.positions))
                .expect("shape")
                .tile_rows(p);
            projected.add(&base)
        } else {
            projected
        };

        Ok(match frame {
            Some(f) => {
                // y = Q y~ + mu, as a differentiable linear map.
                let q_t = Tensor::new(
                    &[3, 3],
                    vec![
                        f.rotation[0][0], f.rotation[1][0], f.rotation[2][0],
                        f.rotation[0][1], f.rotation[1][1], f.rotation[2][1],
                        f.rotation[0][2], f.rotation[1][2], f.rotation[2][2],
                    ],
                )
                .expect("shape");
                let mu = Tensor::new(&[3], f.centroid.to_vec()).expect("shape");
                out.matmul(&q_t)?.add_row(&mu)
            }
            None => out,
        })
    }

    /// Splits a forward output into P frames of N atom positions.
    pub fn frames(output: &Tensor, n_atoms: usize) -> Vec<Vec<[f64; 3]>> {
        let data = output.to_vec();
        let p = output.shape()[0] / n_atoms;
        (0..p)
            .map(|t| {
                (0..n_atoms)
                    .map(|i| {
                        let base = (t * n_atoms + i) * 3;
                        [data[base], data[base + 1], data[base + 2]]
                    })
                    .collect()
            })
            .collect()
    }
}

// The non-frame parts of forward_full never read positions after lifting, so
// rigid-motion equivariance of the canonicalized path follows from the frame
// construction alone; see the geometry tests and the acceptance suite.
pub use crate::geometry::CanonicalFrame;

impl AtomModel {
    /// Checkpoint view of all parameters.
    pub fn to_checkpoint(&self) -> crate::checkpoint::ParamMap {
        crate::checkpoint::collect(&self.named_params())
    }

    pub fn load_checkpoint(
        &self,
        params: &crate::checkpoint::ParamMap,
    ) -> Result<(), crate::checkpoint::CheckpointError> {
        crate::checkpoint::restore(&self.named_params(), params)
    }

    pub fn decanonicalize_frames(
        frame: &CanonicalFrame,
        canonical: &[[f64; 3]],
    ) -> Vec<[f64; 3]> {
        decanonicalize(canonical, frame)
    }
}

#[cfg(test)]
mod tests;
