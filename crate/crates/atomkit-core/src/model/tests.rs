use super::*;
use crate::geometry::{mat_vec, random_rotation};
use rand::Rng;
use rand::SeedableRng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> AtomModelConfig {
    AtomModelConfig {
        d_v: 8,
        n_layers: 2,
        n_heads: 2,
        attention_dropout: 0.0,
        mlp_hidden_multiple: 1,
        ..AtomModelConfig::default()
    }
}

fn sample_state() -> MoleculeState {
    MoleculeState::new(
        vec![
            [0.0, 0.0, 0.0],
            [2.0, 0.3, 0.1],
            [0.5, 1.5, -0.2],
            [0.3, 0.4, 1.0],
        ],
        vec![
            [0.1, 0.2, -0.1],
            [-0.3, 0.1, 0.2],
            [0.2, -0.2, 0.3],
            [0.0, 0.4, -0.3],
        ],
        vec![6, 1, 8, 7],
        10.0,
    )
    .unwrap()
}

#[test]
fn trope_angles_zero_lag() {
    let a = trope_angles(&[5.0, 5.0, 5.0], 5.0, 8, 1000.0, 1.0);
    assert!(a.angles.iter().all(|&x| x == 0.0));
}

#[test]
fn trope_angles_single_frequency() {
    let a = trope_angles(&[std::f64::consts::PI], 0.0, 2, 1000.0, 1.0);
    assert_eq!(a.half_width, 1);
    assert!((a.angles[0] - std::f64::consts::PI).abs() < 1e-15);
}

#[test]
fn trope_angles_shift_invariant() {
    let ts = [1.0, 2.5, 7.0];
    let a = trope_angles(&ts, 0.5, 16, 1000.0, 2.0);
    let shifted: Vec<f64> = ts.iter().map(|t| t + 17.3).collect();
    let b = trope_angles(&shifted, 0.5 + 17.3, 16, 1000.0, 2.0);
    for (x, y) in a.angles.iter().zip(&b.angles) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn apply_trope_zero_angles_identity() {
    let x = Tensor::randn(&[6, 8], 1.0, &mut rng(1));
    let a = trope_angles(&[3.0, 3.0], 3.0, 8, 1000.0, 1.0);
    let y = apply_trope(&x, &a, 3).unwrap();
    assert_eq!(x.to_vec(), y.to_vec());
}

#[test]
fn apply_trope_quarter_turn() {
    let x = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let a = TropeAngles { timesteps: 1, half_width: 1, angles: vec![std::f64::consts::FRAC_PI_2] };
    let y = apply_trope(&x, &a, 1).unwrap().to_vec();
    assert!(y[0].abs() < 1e-15);
    assert!((y[1] - 1.0).abs() < 1e-15);
}

#[test]
fn apply_trope_preserves_row_norms() {
    let mut r = rng(7);
    let x = Tensor::randn(&[8, 12], 2.0, &mut r);
    let ts: Vec<f64> = (0..4).map(|p| p as f64 * 0.7).collect();
    let a = trope_angles(&ts, 0.0, 12, 1000.0, 0.5);
    let y = apply_trope(&x, &a, 2).unwrap();
    let xv = x.to_vec();
    let yv = y.to_vec();
    for row in 0..8 {
        let nx: f64 = xv[row * 12..(row + 1) * 12].iter().map(|v| v * v).sum();
        let ny: f64 = yv[row * 12..(row + 1) * 12].iter().map(|v| v * v).sum();
        assert!((nx.sqrt() - ny.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn apply_trope_layout_mismatch() {
    let x = Tensor::zeros(&[5, 8]);
    let a = trope_angles(&[0.0, 1.0], 0.0, 8, 1000.0, 1.0);
    assert!(matches!(apply_trope(&x, &a, 3), Err(ModelError::Contract(_))));
}

#[test]
fn trope_dot_product_depends_only_on_lag() {
    let mut r = rng(11);
    let d_h = 8;
    let q: Vec<f64> = (0..d_h).map(|_| r.gen::<f64>() - 0.5).collect();
    let k: Vec<f64> = (0..d_h).map(|_| r.gen::<f64>() - 0.5).collect();
    let dot = |t_q: f64, t_k: f64| {
        let x = Tensor::new(&[2, d_h], q.iter().chain(&k).copied().collect()).unwrap();
        let a = trope_angles(&[t_q, t_k], 0.0, d_h, 1000.0, 1.0);
        let y = apply_trope(&x, &a, 1).unwrap().to_vec();
        (0..d_h).map(|i| y[i] * y[d_h + i]).sum::<f64>()
    };
    let base = dot(1.3, 4.9);
    for shift in [0.5, 17.3, -100.0] {
        assert!((dot(1.3 + shift, 4.9 + shift) - base).abs() < 1e-10);
    }
}

fn attention_fixture(
    n_rows: usize,
    d_v: usize,
    seed: u64,
) -> (Tensor, Tensor, Tensor, Tensor, [Tensor; 3], [Tensor; 3]) {
    let mut r = rng(seed);
    let z = Tensor::randn(&[n_rows, d_v], 1.0, &mut r);
    let x = Tensor::randn(&[n_rows, d_v], 1.0, &mut r);
    let v = Tensor::randn(&[n_rows, d_v], 1.0, &mut r);
    let wq = Tensor::randn(&[d_v, d_v], 0.5, &mut r);
    let wk = [
        Tensor::randn(&[d_v, d_v], 0.5, &mut r),
        Tensor::randn(&[d_v, d_v], 0.5, &mut r),
        Tensor::randn(&[d_v, d_v], 0.5, &mut r),
    ];
    let vals = [
        Tensor::randn(&[n_rows, d_v], 1.0, &mut r),
        Tensor::randn(&[n_rows, d_v], 1.0, &mut r),
        Tensor::randn(&[n_rows, d_v], 1.0, &mut r),
    ];
    (z, x, v, wq, wk, vals)
}

#[test]
fn attention_zero_gates_zero_output() {
    let (z, x, v, wq, wk, vals) = attention_fixture(6, 8, 3);
    let gamma = [Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0)];
    let a = trope_angles(&[0.0, 1.0], 0.0, 4, 1000.0, 1.0);
    let out = heterogeneous_attention(
        &z, &x, &v, &wq, &wk, &vals, &gamma, 2, &a, 3, 0.0, false, None, None,
    )
    .unwrap();
    assert!(out.to_vec().iter().all(|&e| e == 0.0));
}

#[test]
fn attention_single_key_is_gated_value_sum() {
    let (z, x, v, wq, wk, vals) = attention_fixture(1, 4, 5);
    let gamma = [Tensor::scalar(0.7), Tensor::scalar(-0.2), Tensor::scalar(1.3)];
    let a = trope_angles(&[2.0], 0.0, 4, 1000.0, 1.0);
    let out = heterogeneous_attention(
        &z, &x, &v, &wq, &wk, &vals, &gamma, 1, &a, 1, 0.0, false, None, None,
    )
    .unwrap()
    .to_vec();
    let gx = 0.7;
    let gv = -0.2;
    let gz = 1.3;
    let (vx, vv, vz) = (vals[0].to_vec(), vals[1].to_vec(), vals[2].to_vec());
    for i in 0..4 {
        let want = gx * vx[i] + gv * vv[i] + gz * vz[i];
        assert!((out[i] - want).abs() < 1e-12);
    }
}

#[test]
fn attention_identical_keys_uniform_average() {
    let mut r = rng(9);
    let n = 4;
    let d_v = 4;
    let z = Tensor::randn(&[n, d_v], 1.0, &mut r);
    // Identical rows in the X stream force identical keys.
    let row: Vec<f64> = (0..d_v).map(|_| r.gen::<f64>()).collect();
    let x = Tensor::new(&[n, d_v], row.repeat(n)).unwrap();
    let v = Tensor::randn(&[n, d_v], 1.0, &mut r);
    let wq = Tensor::randn(&[d_v, d_v], 0.5, &mut r);
    let wk = [
        Tensor::randn(&[d_v, d_v], 0.5, &mut r),
        Tensor::randn(&[d_v, d_v], 0.5, &mut r),
        Tensor::randn(&[d_v, d_v], 0.5, &mut r),
    ];
    let vals = [
        Tensor::randn(&[n, d_v], 1.0, &mut r),
        Tensor::randn(&[n, d_v], 1.0, &mut r),
        Tensor::randn(&[n, d_v], 1.0, &mut r),
    ];
    let gamma = [Tensor::scalar(1.0), Tensor::scalar(0.0), Tensor::scalar(0.0)];
    let a = trope_angles(&[0.0], 0.0, d_v, 1000.0, 1.0);
    let out = heterogeneous_attention(
        &z, &x, &v, &wq, &wk, &vals, &gamma, 1, &a, n, 0.0, false, None, None,
    )
    .unwrap()
    .to_vec();
    let vx = vals[0].to_vec();
    let mean: Vec<f64> = (0..d_v)
        .map(|c| (0..n).map(|i| vx[i * d_v + c]).sum::<f64>() / n as f64)
        .collect();
    for i in 0..n {
        for c in 0..d_v {
            assert!((out[i * d_v + c] - mean[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn value_residual_first_layer_locked() {
    let v = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let v1 = Tensor::new(&[2, 3], vec![0.0, -2.0, 1.0, 2.0, 0.0, 8.0]).unwrap();
    for alpha in [-5.0, 0.0, 3.7] {
        let out = value_residual_mix(&v, &v1, &Tensor::scalar(alpha), true).to_vec();
        for (i, (&a, &b)) in v.to_vec().iter().zip(&v1.to_vec()).enumerate() {
            assert!((out[i] - (a + b) / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn value_residual_alpha_zero_is_average() {
    let mut r = rng(2);
    let v = Tensor::randn(&[3, 4], 1.0, &mut r);
    let v1 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let out = value_residual_mix(&v, &v1, &Tensor::scalar(0.0), false).to_vec();
    for (i, (&a, &b)) in v.to_vec().iter().zip(&v1.to_vec()).enumerate() {
        assert!((out[i] - (a + b) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn value_residual_alpha_saturates_to_v() {
    let mut r = rng(4);
    let v = Tensor::randn(&[3, 4], 1.0, &mut r);
    let v1 = Tensor::randn(&[3, 4], 1.0, &mut r);
    let out = value_residual_mix(&v, &v1, &Tensor::scalar(20.0), false).to_vec();
    for (i, &a) in v.to_vec().iter().enumerate() {
        assert!((out[i] - a).abs() < 1e-8);
    }
}

#[test]
fn forward_delta_identity_at_init() {
    let model = AtomModel::init(small_config(), &mut rng(42)).unwrap();
    let state = sample_state();
    let ts = [11.0, 12.5, 20.0];
    let out = model.forward(&state, &ts).unwrap();
    let frames = AtomModel::frames(&out, state.n_atoms());
    assert_eq!(frames.len(), 3);
    for frame in &frames {
        for (got, want) in frame.iter().zip(&state.positions) {
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_permutation_equivariant() {
    let mut config = small_config();
    config.d_v = 16;
    config.n_heads = 4;
    let mut model = AtomModel::init(config, &mut rng(8)).unwrap();
    // Break the identity so the test sees nontrivial outputs.
    randomize_output(&mut model, 100);
    let state = sample_state();
    let ts = [10.5, 13.0];
    let perm = [2usize, 0, 3, 1];
    let out = model.forward(&state, &ts).unwrap();
    let out_p = model.forward(&state.permuted(&perm), &ts).unwrap();
    let frames = AtomModel::frames(&out, 4);
    let frames_p = AtomModel::frames(&out_p, 4);
    for (f, fp) in frames.iter().zip(&frames_p) {
        for (j, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((fp[j][c] - f[src][c]).abs() < 1e-9);
            }
        }
    }
}

fn randomize_output(model: &mut AtomModel, seed: u64) {
    let mut r = rng(seed);
    let shape = model.w_out.shape().to_vec();
    let n: usize = shape.iter().product();
    model
        .w_out
        .set_data((0..n).map(|_| (r.gen::<f64>() - 0.5) * 0.2).collect());
    model.b_out.set_data((0..3).map(|_| r.gen::<f64>() * 0.1).collect());
}

#[test]
fn forward_canonicalized_rigid_motion_equivariant() {
    let mut config = small_config();
    config.mode = EquivarianceMode::Canonicalized;
    let mut model = AtomModel::init(config, &mut rng(21)).unwrap();
    randomize_output(&mut model, 77);
    let state = sample_state();
    let ts = [10.2, 11.0, 14.0];
    let out = model.forward(&state, &ts).unwrap();
    let rot = random_rotation(5);
    let shift = [1.5, -2.0, 0.25];
    let moved = state.rigid_motion(&rot, shift);
    let out_m = model.forward(&moved, &ts).unwrap();
    let frames = AtomModel::frames(&out, 4);
    let frames_m = AtomModel::frames(&out_m, 4);
    for (f, fm) in frames.iter().zip(&frames_m) {
        for (x, xm) in f.iter().zip(fm) {
            let want = mat_vec(&rot, *x);
            for c in 0..3 {
                assert!(
                    (xm[c] - (want[c] + shift[c])).abs() < 1e-8,
                    "moved output disagrees: {} vs {}",
                    xm[c],
                    want[c] + shift[c]
                );
            }
        }
    }
}

#[test]
fn forward_attention_rows_stochastic() {
    let mut config = small_config();
    config.d_v = 16;
    config.n_heads = 4;
    config.rwpe_enabled = true;
    let model = AtomModel::init(config, &mut rng(13)).unwrap();
    let state = sample_state();
    let ts = [10.5, 12.0];
    let mut capture = Vec::new();
    model.forward_captured(&state, &ts, &mut capture).unwrap();
    // layers * streams * heads matrices.
    assert_eq!(capture.len(), 2 * 3 * 4);
    let rows = state.n_atoms() * ts.len();
    for weights in &capture {
        assert_eq!(weights.len(), rows * rows);
        for i in 0..rows {
            let s: f64 = weights[i * rows..(i + 1) * rows].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            assert!(weights[i * rows..(i + 1) * rows].iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn forward_contract_errors() {
    let model = AtomModel::init(small_config(), &mut rng(1)).unwrap();
    let state = sample_state();
    assert!(matches!(
        model.forward(&state, &[]),
        Err(ModelError::Contract(_))
    ));
    assert!(matches!(
        model.forward(&state, &[12.0, 11.0]),
        Err(ModelError::Contract(_))
    ));
    assert!(matches!(
        model.forward(&state, &[12.0, 12.0]),
        Err(ModelError::Contract(_))
    ));
    // Input frame sits at t = 10.
    assert!(matches!(
        model.forward(&state, &[9.0, 12.0]),
        Err(ModelError::Contract(_))
    ));
}

#[test]
fn config_validation() {
    let ok = small_config();
    assert!(ok.validate().is_ok());
    let bad_split = AtomModelConfig { d_v: 30, n_heads: 4, ..ok.clone() };
    assert!(bad_split.validate().is_err());
    let odd_head = AtomModelConfig { d_v: 6, n_heads: 2, ..ok.clone() };
    assert!(odd_head.validate().is_err());
    let bad_dropout = AtomModelConfig { attention_dropout: 1.0, ..ok.clone() };
    assert!(bad_dropout.validate().is_err());
    let bad_heads = AtomModelConfig { n_output_heads: 8, ..ok.clone() };
    assert!(bad_heads.validate().is_err());
    // d_v = 8 leaves 5 scalar channels, too few for K = 8.
    let bad_rwpe = AtomModelConfig { rwpe_enabled: true, ..ok.clone() };
    assert!(bad_rwpe.validate().is_err());
    let ok_rwpe = AtomModelConfig { d_v: 16, n_heads: 4, rwpe_enabled: true, ..ok };
    assert!(ok_rwpe.validate().is_ok());
}

#[test]
fn checkpoint_round_trip_reproduces_forward() {
    let config = small_config();
    let mut model = AtomModel::init(config.clone(), &mut rng(3)).unwrap();
    randomize_output(&mut model, 50);
    let state = sample_state();
    let ts = [10.1, 11.7];
    let out = model.forward(&state, &ts).unwrap().to_vec();
    let ckpt = model.to_checkpoint();
    let other = AtomModel::init(config, &mut rng(999)).unwrap();
    assert_ne!(other.forward(&state, &ts).unwrap().to_vec(), out);
    other.load_checkpoint(&ckpt).unwrap();
    assert_eq!(other.forward(&state, &ts).unwrap().to_vec(), out);
}

#[test]
fn forward_gradients_match_finite_differences() {
    let mut config = small_config();
    config.attention_dropout = 0.0;
    let mut model = AtomModel::init(config, &mut rng(6)).unwrap();
    randomize_output(&mut model, 31);
    let state = MoleculeState::new(
        vec![[0.0, 0.0, 0.0], [1.1, 0.2, -0.3], [0.4, 0.9, 0.7]],
        vec![[0.1, -0.2, 0.0], [0.0, 0.3, 0.1], [-0.1, 0.0, 0.2]],
        vec![6, 1, 8],
        0.0,
    )
    .unwrap();
    let ts = [0.5, 1.25];
    let target = Tensor::new(
        &[6, 3],
        (0..18).map(|i| (i as f64 * 0.37).sin()).collect(),
    )
    .unwrap();
    let params = model.params();
    let build = || {
        model
            .forward(&state, &ts)
            .unwrap()
            .scaled_sq_error(&target, 2.0)
    };
    crate::tensor::tests::check_grads(&params, &build, 1e-3);
}
