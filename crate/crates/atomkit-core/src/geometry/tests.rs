use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample_state() -> MoleculeState {
    MoleculeState::new(
        vec![
            [3.0, 0.1, -0.2],
            [-1.0, 1.4, 0.3],
            [-0.5, -1.2, 0.8],
            [0.4, 0.6, -1.5],
            [-1.9, -0.9, 0.6],
        ],
        vec![
            [0.1, -0.3, 0.2],
            [-0.2, 0.4, 0.1],
            [0.3, 0.1, -0.4],
            [-0.1, -0.2, 0.3],
            [0.2, 0.2, -0.1],
        ],
        vec![6, 1, 8, 7, 1],
        0.0,
    )
    .unwrap()
}

#[test]
fn norm_augmentation_cases() {
    assert_eq!(augment_with_norm([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0, 0.0]);
    assert_eq!(augment_with_norm([3.0, 4.0, 0.0]), [3.0, 4.0, 0.0, 5.0]);
    assert_eq!(augment_with_norm([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn norm_augmentation_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let r = random_rotation_with(&mut rng);
        let v = [0.7, -1.3, 2.1];
        let a = augment_with_norm(v)[3];
        let b = augment_with_norm(mat_vec(&r, v))[3];
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn channel_layout_split() {
    let l = ChannelLayout::for_width(32).unwrap();
    assert_eq!(l.n_triples, 5);
    assert_eq!(l.n_scalars, 17);
    assert_eq!(l.vector_cols(), 0..15);
    assert!(ChannelLayout::for_width(0).is_err());
}

#[test]
fn lift_zero_velocity_zeroes_v_vector_channels() {
    let mut state = sample_state();
    for v in state.velocities.iter_mut() {
        *v = [0.0; 3];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = LiftParams::init(ChannelLayout::for_width(24).unwrap(), true, &mut rng);
    let lifted = equivariant_lift(&state, 2, &params).unwrap();
    let data = lifted.v.to_vec();
    let d_v = lifted.layout.d_v;
    for row in 0..state.n_atoms() * 2 {
        for c in lifted.layout.vector_cols() {
            assert_eq!(data[row * d_v + c], 0.0);
        }
    }
}

#[test]
fn lift_equivariance() {
    let state = sample_state();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = LiftParams::init(ChannelLayout::for_width(30).unwrap(), true, &mut rng);
    let lifted = equivariant_lift(&state, 3, &params).unwrap();
    let rot = random_rotation(99);
    let rotated = state.rigid_motion(&rot, [0.0; 3]);
    let lifted_rot = equivariant_lift(&rotated, 3, &params).unwrap();
    let d_v = lifted.layout.d_v;
    for (a, b) in [
        (&lifted.x, &lifted_rot.x),
        (&lifted.v, &lifted_rot.v),
        (&lifted.z, &lifted_rot.z),
    ] {
        let da = a.to_vec();
        let db = b.to_vec();
        let rows = state.n_atoms() * 3;
        for r in 0..rows {
            for j in 0..lifted.layout.n_triples {
                let va = [
                    da[r * d_v + 3 * j],
                    da[r * d_v + 3 * j + 1],
                    da[r * d_v + 3 * j + 2],
                ];
                let expect = mat_vec(&rot, va);
                for k in 0..3 {
                    assert!(
                        (db[r * d_v + 3 * j + k] - expect[k]).abs() < 1e-10,
                        "vector channel not equivariant"
                    );
                }
            }
            for c in lifted.layout.scalar_cols() {
                assert!(
                    (da[r * d_v + c] - db[r * d_v + c]).abs() < 1e-12,
                    "scalar channel not invariant"
                );
            }
        }
    }
}

#[test]
fn lift_identity_mix_reproduces_position() {
    let state = MoleculeState::new(
        vec![[1.5, -2.0, 0.5]],
        vec![[0.2, 0.1, -0.3]],
        vec![6],
        0.0,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = LiftParams::init(ChannelLayout::for_width(12).unwrap(), true, &mut rng);
    params.wx_vec.set_data(vec![1.0; params.layout.n_triples]);
    let lifted = equivariant_lift(&state, 1, &params).unwrap();
    let data = lifted.x.to_vec();
    assert!((data[0] - 1.5).abs() < 1e-15);
    assert!((data[1] + 2.0).abs() < 1e-15);
    assert!((data[2] - 0.5).abs() < 1e-15);
}

#[test]
fn lift_duplicates_atom_block_per_timestep() {
    let state = sample_state();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = LiftParams::init(ChannelLayout::for_width(18).unwrap(), true, &mut rng);
    let lifted = equivariant_lift(&state, 4, &params).unwrap();
    let d_v = 18;
    let n = state.n_atoms();
    let z = lifted.z.to_vec();
    for p in 1..4 {
        for i in 0..n * d_v {
            assert_eq!(z[p * n * d_v + i], z[i]);
        }
    }
}

#[test]
fn canonicalize_fixed_point() {
    // Centered, diagonal covariance with descending spread, and a chirality
    // vector with positive components along e1 and e2.
    let positions = vec![
        [3.0, 0.0, 0.0],
        [-3.0, 0.0, 0.0],
        [0.0, 2.0, 0.0],
        [0.0, -2.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    // Velocities chosen so c0 = sum x_i cross v_i has positive x and y parts.
    let velocities = vec![
        [0.0, 0.3, -0.4],
        [0.0, -0.3, 0.4],
        [0.5, 0.0, 0.6],
        [-0.5, 0.0, -0.6],
        [0.7, 0.2, 0.0],
        [-0.7, -0.2, 0.0],
    ];
    let state =
        MoleculeState::new(positions.clone(), velocities, vec![6; 6], 0.0).unwrap();
    let frame = canonicalize(&state).unwrap();
    for k in 0..3 {
        assert!(frame.centroid[k].abs() < 1e-12);
        for l in 0..3 {
            let expect = if k == l { 1.0 } else { 0.0 };
            assert!(
                (frame.rotation[k][l] - expect).abs() < 1e-8,
                "Q not identity: {:?}",
                frame.rotation
            );
        }
    }
    for (a, b) in frame.positions.iter().zip(&positions) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-8);
        }
    }
}

#[test]
fn canonicalize_invariant_under_rigid_motion() {
    let state = sample_state();
    let base = canonicalize(&state).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..50 {
        let rot = random_rotation_with(&mut rng);
        let shift = [
            10.0 * (trial as f64).sin(),
            -3.0 + trial as f64,
            0.5 * trial as f64,
        ];
        let moved = state.rigid_motion(&rot, shift);
        let frame = canonicalize(&moved).unwrap();
        for (a, b) in frame.positions.iter().zip(&base.positions) {
            for k in 0..3 {
                assert!(
                    (a[k] - b[k]).abs() < 1e-8,
                    "canonical positions changed under rigid motion"
                );
            }
        }
    }
}

#[test]
fn canonical_positions_centered_with_sorted_diagonal_covariance() {
    let state = sample_state();
    let frame = canonicalize(&state).unwrap();
    let n = frame.positions.len() as f64;
    let mut mean = [0.0; 3];
    for x in &frame.positions {
        for k in 0..3 {
            mean[k] += x[k] / n;
        }
    }
    for k in 0..3 {
        assert!(mean[k].abs() < 1e-10);
    }
    let mut cov = [[0.0; 3]; 3];
    for x in &frame.positions {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += x[a] * x[b] / n;
            }
        }
    }
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                assert!(cov[a][b].abs() < 1e-8, "covariance not diagonal");
            }
        }
    }
    assert!(cov[0][0] >= cov[1][1] - 1e-8 && cov[1][1] >= cov[2][2] - 1e-8);
}

#[test]
fn canonicalize_degenerate_cases() {
    // Two atoms: not enough for a frame.
    let two = MoleculeState::new(
        vec![[0.0; 3], [1.0, 0.0, 0.0]],
        vec![[0.0; 3]; 2],
        vec![1, 1],
        0.0,
    )
    .unwrap();
    assert!(matches!(canonicalize(&two), Err(GeometryError::Degenerate(_))));
    // Collinear covariance: repeated (zero) eigenvalues.
    let line = MoleculeState::new(
        vec![[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
        vec![[0.0, 0.1, 0.0]; 3],
        vec![6; 3],
        0.0,
    )
    .unwrap();
    assert!(matches!(canonicalize(&line), Err(GeometryError::Degenerate(_))));
    // Zero velocities: vanishing chirality pseudoscalar.
    let mut still = sample_state();
    for v in still.velocities.iter_mut() {
        *v = [0.0; 3];
    }
    assert!(matches!(canonicalize(&still), Err(GeometryError::Degenerate(_))));
}

#[test]
fn decanonicalize_round_trip_and_identity() {
    let state = sample_state();
    let frame = canonicalize(&state).unwrap();
    let back = decanonicalize(&frame.positions, &frame);
    for (a, b) in back.iter().zip(&state.positions) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-10);
        }
    }
    let identity = CanonicalFrame {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        centroid: [0.0; 3],
        positions: vec![],
        velocities: vec![],
    };
    let pts = vec![[1.0, 2.0, 3.0]];
    assert_eq!(decanonicalize(&pts, &identity), pts);
    let shifted = CanonicalFrame { centroid: [4.0, 5.0, 6.0], ..identity };
    assert_eq!(decanonicalize(&[[0.0; 3]], &shifted), vec![[4.0, 5.0, 6.0]]);
}

#[test]
fn random_rotation_properties() {
    for seed in 0..20u64 {
        let r = random_rotation(seed);
        // R^T R = I
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() < 1e-12);
        assert_eq!(random_rotation(seed), r);
    }
}

#[test]
fn jacobi_recovers_known_spectrum() {
    let diag = [[5.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]];
    let (vals, _) = jacobi_eigen_3x3(diag);
    assert!((vals[0] - 5.0).abs() < 1e-12);
    assert!((vals[1] - 2.0).abs() < 1e-12);
    assert!((vals[2] - 1.0).abs() < 1e-12);
    // Rotate the frame and check the spectrum is unchanged.
    let r = random_rotation(7);
    let mut m = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    m[a][b] += r[a][k] * diag[k][l] * r[b][l];
                }
            }
        }
    }
    let (vals2, vecs) = jacobi_eigen_3x3(m);
    for k in 0..3 {
        assert!((vals2[k] - vals[k]).abs() < 1e-10);
        // M e_k = lambda_k e_k
        let me = mat_vec(&m, vecs[k]);
        for j in 0..3 {
            assert!((me[j] - vals2[k] * vecs[k][j]).abs() < 1e-9);
        }
    }
}
