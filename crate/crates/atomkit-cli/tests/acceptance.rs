//! Acceptance check: every subcommand is deterministic given identical flags,
//! seed, and input files, down to the bytes of its primary outputs.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;

fn atomkit(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_atomkit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "atomkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const CONFIG: &str = r#"{
  "model": {
    "d_v": 16, "n_layers": 2, "n_heads": 4,
    "rope_base": 1000.0, "rope_timescale": 1.0,
    "attention_dropout": 0.0, "mlp_hidden_multiple": 2,
    "delta_prediction": true, "mode": "quasi_equivariant",
    "rwpe_enabled": false, "rwpe_k": 8, "rwpe_epsilon": 1.6,
    "n_output_heads": 1, "equivariant_lift": true
  },
  "train": {
    "batch_size": 8, "epochs": 3, "batches_per_epoch": 4,
    "label_noise_sigma": 0.05, "dt_min": 0.2, "delta_t": 0.4, "p": 4,
    "strategy": "uniform", "tail_lag": 0.0, "seed": 11,
    "optimizer": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999,
                  "weight_decay": 0.00001, "eps": 1e-10},
    "max_grad_norm": 1.0, "val_windows": 16
  }
}"#;

fn run_pipeline(dir: &Path, label: &str) -> Vec<(String, Vec<u8>)> {
    let assets = concat!(env!("CARGO_MANIFEST_DIR"), "/../../assets/curation");
    atomkit(
        &[
            "gen-data", "--potential", "pairwise-spring", "--atoms", "4", "--steps", "300",
            "--dt", "0.05", "--seed", "5", "--out", &format!("{label}/toy.atrj"),
        ],
        dir,
    );
    std::fs::write(dir.join(label).join("config.json"), CONFIG).unwrap();
    atomkit(
        &[
            "train", "--data", &format!("{label}/toy.atrj"), "--config",
            &format!("{label}/config.json"), "--out-dir", &format!("{label}/run"),
        ],
        dir,
    );
    atomkit(
        &[
            "eval", "--ckpt", &format!("{label}/run/model.ckpt"), "--config",
            &format!("{label}/config.json"), "--data", &format!("{label}/toy.atrj"),
            "--sweep", "p", "--values", "2,4,8", "--out-dir", &format!("{label}/eval"),
        ],
        dir,
    );
    atomkit(
        &[
            "analyze", "--data", &format!("{label}/toy.atrj"), "--out-dir",
            &format!("{label}/analyze"),
        ],
        dir,
    );
    atomkit(
        &[
            "curate", "--seeds", &format!("{assets}/seeds.smi"), "--pool",
            &format!("{assets}/pool.smi"), "--preset", "strict", "--out-dir",
            &format!("{label}/curate"),
        ],
        dir,
    );

    let primary = [
        "toy.atrj",
        "run/model.ckpt",
        "run/metrics.csv",
        "run/config.json",
        "eval/eval.csv",
        "eval/sweep.csv",
        "analyze/stability.csv",
        "curate/accepted.csv",
        "curate/rejected.log",
    ];
    primary
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(label).join(f)).unwrap()))
        .collect()
}

#[test]
fn acceptance_12_cli_determinism() {
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::create_dir_all(dir.path().join("b")).unwrap();
        let a = run_pipeline(dir.path(), "a");
        let b = run_pipeline(dir.path(), "b");
        for ((name, bytes_a), (_, bytes_b)) in a.iter().zip(&b) {
            assert_eq!(bytes_a, bytes_b, "{name} differs between identical runs");
        }
    }));
    let verdict = if outcome.is_ok() { "pass" } else { "FAIL" };
    println!("criterion 12 (CLI outputs byte-identical across reruns): {verdict}");
    if let Err(e) = outcome {
        resume_unwind(e);
    }
}
