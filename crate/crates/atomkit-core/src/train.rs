//! Objectives, temporal discretization, log-uniform lag sampling, label-noise
//! regularization, S2S/S2T metrics, and the training loops.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::ParamMap;
use crate::data::{Sample, Trajectory, WindowedDataset};
use crate::geometry::MoleculeState;
use crate::model::{AtomModel, ModelError};
use crate::tensor::optim::{clip_grad_norm, AdamWConfig, OptimizerState};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizationStrategy {
    Uniform,
    Tail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationPlan {
    pub strategy: DiscretizationStrategy,
    pub t: f64,
    pub delta_t: f64,
    pub p: usize,
    pub tail_lag: f64,
    /// Strictly increasing query times t_1 .. t_P.
    pub timestamps: Vec<f64>,
}

/// Uniform: t_p = t + (p/P) dT. Tail: t_p = t + lag + (p/P)(dT - lag).
pub fn discretize(
    strategy: DiscretizationStrategy,
    t: f64,
    delta_t: f64,
    p: usize,
    tail_lag: f64,
) -> Result<DiscretizationPlan, TrainError> {
    if p < 1 {
        return Err(TrainError::Contract("P must be at least 1".into()));
    }
    if delta_t <= 0.0 {
        return Err(TrainError::Contract("horizon must be positive".into()));
    }
    if tail_lag < 0.0 || tail_lag >= delta_t {
        return Err(TrainError::Contract(format!(
            "tail lag {tail_lag} must lie in [0, {delta_t})"
        )));
    }
    let timestamps = (1..=p)
        .map(|i| {
            let frac = i as f64 / p as f64;
            match strategy {
                DiscretizationStrategy::Uniform => t + frac * delta_t,
                DiscretizationStrategy::Tail => t + tail_lag + frac * (delta_t - tail_lag),
            }
        })
        .collect();
    Ok(DiscretizationPlan { strategy, t, delta_t, p, tail_lag, timestamps })
}

/// exp(U) with U uniform on [ln lo, ln hi].
pub fn sample_loguniform(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
    if !(lo > 0.0 && lo <= hi) {
        return Err(TrainError::Contract(format!("need 0 < lo <= hi, got ({lo}, {hi})")));
    }
    if lo == hi {
        return Ok(lo);
    }
    let u = rng.gen_range(lo.ln()..hi.ln());
    Ok(u.exp())
}

/// Independent Gaussian perturbations of the input positions/velocities and of
/// every target frame. Training-path only; evaluation uses clean data.
pub fn add_label_noise(
    state: &MoleculeState,
    targets: &[Vec<[f64; 3]>],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (MoleculeState, Vec<Vec<[f64; 3]>>) {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return (state.clone(), targets.to_vec());
    }
    let mut draw = |x: f64| x + sigma * rng.sample::<f64, _>(StandardNormal);
    let positions = state
        .positions
        .iter()
        .map(|x| [draw(x[0]), draw(x[1]), draw(x[2])])
        .collect();
    let velocities = state
        .velocities
        .iter()
        .map(|v| [draw(v[0]), draw(v[1]), draw(v[2])])
        .collect();
    let noised = MoleculeState {
        positions,
        velocities,
        atomic_numbers: state.atomic_numbers.clone(),
        time: state.time,
    };
    let noised_targets = targets
        .iter()
        .map(|frame| frame.iter().map(|x| [draw(x[0]), draw(x[1]), draw(x[2])]).collect())
        .collect();
    (noised, noised_targets)
}

fn frame_sq_error(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
        .sum()
}

fn check_shapes(pred: &[Vec<[f64; 3]>], truth: &[Vec<[f64; 3]>]) -> Result<(), TrainError> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(TrainError::Contract(format!(
            "frame count mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    for (a, b) in pred.iter().zip(truth) {
        if a.len() != b.len() {
            return Err(TrainError::Contract("atom count mismatch".into()));
        }
    }
    Ok(())
}

/// (1/P) sum_p |x_p - y_p|^2 over all atom coordinates.
pub fn s2t_mse(pred: &[Vec<[f64; 3]>], truth: &[Vec<[f64; 3]>]) -> Result<f64, TrainError> {
    check_shapes(pred, truth)?;
    let total: f64 = pred.iter().zip(truth).map(|(a, b)| frame_sq_error(a, b)).sum();
    Ok(total / pred.len() as f64)
}

/// Final-frame squared error.
pub fn s2s_mse(pred: &[Vec<[f64; 3]>], truth: &[Vec<[f64; 3]>]) -> Result<f64, TrainError> {
    check_shapes(pred, truth)?;
    Ok(frame_sq_error(pred.last().unwrap(), truth.last().unwrap()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on batches consumed per epoch (desk-scale subsampling).
    pub batches_per_epoch: Option<usize>,
    pub label_noise_sigma: f64,
    /// Log-uniform lag bounds for the multitask objective.
    pub dt_min: f64,
    pub delta_t: f64,
    pub p: usize,
    pub strategy: DiscretizationStrategy,
    pub tail_lag: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub max_grad_norm: f64,
    /// Contiguous trailing windows held out for validation.
    pub val_windows: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            batch_size: 16,
            epochs: 50,
            batches_per_epoch: Some(8),
            label_noise_sigma: 0.1,
            dt_min: 1.0,
            delta_t: 8.0,
            p: 8,
            strategy: DiscretizationStrategy::Uniform,
            tail_lag: 0.0,
            seed: 0,
            optimizer: AdamWConfig::default(),
            max_grad_norm: 1.0,
            val_windows: 64,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.label_noise_sigma < 0.0 {
            return Err(TrainError::Contract("sigma must be nonnegative".into()));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.delta_t) {
            return Err(TrainError::Contract("need 0 < dt_min <= delta_t".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Contract("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub s2s: f64,
    pub s2t: f64,
    pub train_curve: Vec<f64>,
    pub val_s2s_curve: Vec<f64>,
    pub val_s2t_curve: Vec<f64>,
    pub best_epoch: usize,
    pub wall_seconds: f64,
}

/// Forward pass reshaped into P frames of N positions.
pub fn predict_frames(
    model: &AtomModel,
    state: &MoleculeState,
    timestamps: &[f64],
) -> Result<Vec<Vec<[f64; 3]>>, ModelError> {
    let out = model.forward(state, timestamps)?;
    Ok(AtomModel::frames(&out, state.n_atoms()))
}

fn target_tensor(targets: &[Vec<[f64; 3]>]) -> Tensor {
    let n = targets[0].len();
    let mut data = Vec::with_capacity(targets.len() * n * 3);
    for frame in targets {
        for x in frame {
            data.extend_from_slice(x);
        }
    }
    Tensor::new(&[targets.len() * n, 3], data).expect("target shape")
}

/// Clean-data evaluation over a set of samples: mean S2S and S2T.
pub fn evaluate(model: &AtomModel, samples: &[Rc<Sample>]) -> Result<(f64, f64), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Contract("no evaluation samples".into()));
    }
    let mut s2s = 0.0;
    let mut s2t = 0.0;
    for sample in samples {
        let pred = predict_frames(model, &sample.input, &sample.timestamps)?;
        s2s += s2s_mse(&pred, &sample.targets)?;
        s2t += s2t_mse(&pred, &sample.targets)?;
    }
    let m = samples.len() as f64;
    Ok((s2s / m, s2t / m))
}

/// The predictor that returns the input positions at every queried timestep.
pub fn static_baseline(samples: &[Rc<Sample>]) -> Result<(f64, f64), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Contract("no evaluation samples".into()));
    }
    let mut s2s = 0.0;
    let mut s2t = 0.0;
    for sample in samples {
        let pred: Vec<Vec<[f64; 3]>> =
            vec![sample.input.positions.clone(); sample.targets.len()];
        s2s += s2s_mse(&pred, &sample.targets)?;
        s2t += s2t_mse(&pred, &sample.targets)?;
    }
    let m = samples.len() as f64;
    Ok((s2s / m, s2t / m))
}

fn batch_loss(
    model: &AtomModel,
    batch: &[Rc<Sample>],
    sigma: f64,
    noise_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<Tensor, TrainError> {
    let mut total: Option<Tensor> = None;
    for sample in batch {
        let (state, targets) = add_label_noise(&sample.input, &sample.targets, sigma, noise_rng);
        let out = model.forward_train(&state, &sample.timestamps, dropout_rng)?;
        let loss = out.scaled_sq_error(&target_tensor(&targets), targets.len() as f64);
        total = Some(match total {
            Some(acc) => acc.add(&loss),
            None => loss,
        });
    }
    Ok(total.expect("nonempty batch").scale(1.0 / batch.len() as f64))
}

struct Split {
    train: Vec<Rc<Sample>>,
    val: Vec<Rc<Sample>>,
}

fn split_dataset(dataset: &WindowedDataset, val_windows: usize) -> Result<Split, TrainError> {
    let n = dataset.len();
    if n < 2 {
        return Err(TrainError::Data("dataset has fewer than 2 windows".into()));
    }
    let val = val_windows.clamp(1, n / 2);
    Ok(Split {
        train: dataset.samples[..n - val].to_vec(),
        val: dataset.samples[n - val..].to_vec(),
    })
}

pub fn train_single_task(
    traj: &Trajectory,
    model: &AtomModel,
    config: &TrainRunConfig,
) -> Result<MetricsReport, TrainError> {
    config.validate()?;
    let plan = discretize(
        config.strategy,
        traj.t0(),
        config.delta_t,
        config.p,
        config.tail_lag,
    )?;
    let dataset = WindowedDataset::new(traj, &plan).map_err(|e| TrainError::Data(e.to_string()))?;
    let split = split_dataset(&dataset, config.val_windows)?;
    run_epochs(model, config, |_, rng| {
        let mut batches = make_batches_from(&split.train, config.batch_size, rng);
        if let Some(cap) = config.batches_per_epoch {
            batches.truncate(cap);
        }
        batches
    }, &split.val)
}

fn make_batches_from(
    samples: &[Rc<Sample>],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Rc<Sample>>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| samples[i].clone()).collect())
        .collect()
}

fn run_epochs<F>(
    model: &AtomModel,
    config: &TrainRunConfig,
    mut epoch_batches: F,
    val: &[Rc<Sample>],
) -> Result<MetricsReport, TrainError>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Vec<Vec<Rc<Sample>>>,
{
    let start = Instant::now();
    let params = model.params();
    let mut opt = OptimizerState::new(config.optimizer.clone(), &params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let mut train_curve = Vec::with_capacity(config.epochs);
    let mut val_s2s_curve = Vec::with_capacity(config.epochs);
    let mut val_s2t_curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamMap)> = None;

    for epoch in 0..config.epochs {
        let batches = epoch_batches(epoch, &mut shuffle_rng);
        if batches.is_empty() {
            return Err(TrainError::Data("epoch produced no batches".into()));
        }
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let loss = batch_loss(
                model,
                batch,
                config.label_noise_sigma,
                &mut noise_rng,
                &mut dropout_rng,
            )?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(TrainError::Diverged(format!("loss {value} at epoch {epoch}")));
            }
            epoch_loss += value;
            for p in &params {
                p.zero_grad();
            }
            loss.backward().map_err(|e| TrainError::Data(e.to_string()))?;
            clip_grad_norm(&params, config.max_grad_norm);
            opt.step(&params);
        }
        epoch_loss /= batches.len() as f64;
        train_curve.push(epoch_loss);

        let (val_s2s, val_s2t) = evaluate(model, val)?;
        val_s2s_curve.push(val_s2s);
        val_s2t_curve.push(val_s2t);
        // Strict improvement only: ties keep the earliest epoch.
        let improved = match &best {
            None => true,
            Some((_, best_s2s, _)) => val_s2s < *best_s2s,
        };
        if improved {
            best = Some((epoch, val_s2s, model.to_checkpoint()));
        }
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    model
        .load_checkpoint(&best_params)
        .map_err(|e| TrainError::Data(e.to_string()))?;
    let (s2s, s2t) = evaluate(model, val)?;
    Ok(MetricsReport {
        s2s,
        s2t,
        train_curve,
        val_s2s_curve,
        val_s2t_curve,
        best_epoch,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Multitask training over several molecules. Every epoch covers all
/// molecules round-robin; each batch draws a fresh log-uniform lag and the
/// model sees it purely through the query timestamps. Evaluation uses the
/// fixed configured plan on each molecule's trailing windows.
pub fn train_multitask(
    trajs: &[Trajectory],
    model: &AtomModel,
    config: &TrainRunConfig,
) -> Result<(MetricsReport, Vec<MetricsReport>), TrainError> {
    config.validate()?;
    if trajs.is_empty() {
        return Err(TrainError::Data("no trajectories".into()));
    }
    // Per-molecule fixed-plan datasets drive validation and reporting.
    let mut splits = Vec::with_capacity(trajs.len());
    for traj in trajs {
        let plan = discretize(
            config.strategy,
            traj.t0(),
            config.delta_t,
            config.p,
            config.tail_lag,
        )?;
        let ds = WindowedDataset::new(traj, &plan).map_err(|e| TrainError::Data(e.to_string()))?;
        splits.push(split_dataset(&ds, config.val_windows)?);
    }
    let all_val: Vec<Rc<Sample>> =
        splits.iter().flat_map(|s| s.val.iter().cloned()).collect();

    let mut lag_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));
    let batches_per_epoch = config.batches_per_epoch.unwrap_or(trajs.len().max(8));
    let n_mols = trajs.len();
    let report = run_epochs(
        model,
        config,
        |_, rng| {
            let mut batches = Vec::with_capacity(batches_per_epoch);
            for b in 0..batches_per_epoch {
                // Round-robin molecule choice keeps epoch coverage complete.
                let mol = if b < n_mols { b } else { rng.gen_range(0..n_mols) };
                let traj = &trajs[mol];
                let lag = sample_loguniform(config.dt_min, config.delta_t, &mut lag_rng)
                    .expect("validated bounds");
                let plan = match discretize(
                    DiscretizationStrategy::Uniform,
                    traj.t0(),
                    lag,
                    config.p,
                    0.0,
                ) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                let ds = match WindowedDataset::new(traj, &plan) {
                    Ok(d) => d,
                    Err(_) => continue,
                };
                let limit = ds.len().saturating_sub(config.val_windows.min(ds.len() / 2)).max(1);
                let batch: Vec<Rc<Sample>> = (0..config.batch_size)
                    .map(|_| ds.samples[rng.gen_range(0..limit)].clone())
                    .collect();
                batches.push(batch);
            }
            batches
        },
        &all_val,
    )?;

    let mut per_molecule = Vec::with_capacity(trajs.len());
    for split in &splits {
        let (s2s, s2t) = evaluate(model, &split.val)?;
        per_molecule.push(MetricsReport {
            s2s,
            s2t,
            train_curve: Vec::new(),
            val_s2s_curve: Vec::new(),
            val_s2t_curve: Vec::new(),
            best_epoch: report.best_epoch,
            wall_seconds: 0.0,
        });
    }
    Ok((report, per_molecule))
}

/// S2T at several P values over a fixed horizon; the Fig.-style
/// discretization-invariance sweep.
pub fn sweep_discretization(
    model: &AtomModel,
    traj: &Trajectory,
    ps: &[usize],
    delta_t: f64,
    max_windows: usize,
) -> Result<Vec<(usize, f64)>, TrainError> {
    let mut out = Vec::with_capacity(ps.len());
    for &p in ps {
        let plan = discretize(DiscretizationStrategy::Uniform, traj.t0(), delta_t, p, 0.0)?;
        let ds =
            WindowedDataset::new(traj, &plan).map_err(|e| TrainError::Data(e.to_string()))?;
        let take = ds.len().min(max_windows.max(1));
        let (_, s2t) = evaluate(model, &ds.samples[..take])?;
        out.push((p, s2t));
    }
    Ok(out)
}

/// S2T as a function of the horizon at fixed P.
pub fn sweep_delta_t(
    model: &AtomModel,
    traj: &Trajectory,
    delta_ts: &[f64],
    p: usize,
    max_windows: usize,
) -> Result<Vec<(f64, f64)>, TrainError> {
    let mut out = Vec::with_capacity(delta_ts.len());
    for &dt_total in delta_ts {
        let plan = discretize(DiscretizationStrategy::Uniform, traj.t0(), dt_total, p, 0.0)?;
        let ds =
            WindowedDataset::new(traj, &plan).map_err(|e| TrainError::Data(e.to_string()))?;
        let take = ds.len().min(max_windows.max(1));
        let (_, s2t) = evaluate(model, &ds.samples[..take])?;
        out.push((dt_total, s2t));
    }
    Ok(out)
}
