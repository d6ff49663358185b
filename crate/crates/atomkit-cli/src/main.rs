//! `atomkit` command line: toy-data generation, training, evaluation,
//! stability analysis, and candidate curation.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 numerical failure.
//! Primary outputs carry no wall-clock information, so reruns with the same
//! flags, seed, and inputs are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use atomkit_core::checkpoint;
use atomkit_core::curation::{
    morgan_fingerprint, parse_smiles, parse_smiles_list, select_candidates, tanimoto,
    SelectionConfig,
};
use atomkit_core::data::{
    generate_toy_trajectory, load_trajectory, save_trajectory, stability_metrics, ToyPotential,
    Trajectory, WindowedDataset,
};
use atomkit_core::model::{AtomModel, AtomModelConfig};
use atomkit_core::train::{
    discretize, evaluate, static_baseline, sweep_delta_t, sweep_discretization, train_multitask,
    train_single_task, MetricsReport, TrainError, TrainRunConfig,
};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Debug)]
struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError { message: message.into(), code: EXIT_USAGE }
    }

    fn numeric(message: impl Into<String>) -> CliError {
        CliError { message: message.into(), code: EXIT_NUMERIC }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Diverged(_) => CliError::numeric(e.to_string()),
            other => CliError::usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::usage(format!("io error: {e}"))
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "atomkit", version, about = "Molecular trajectory operator toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a toy molecular-dynamics trajectory (ATRJ file).
    GenData(GenDataArgs),
    /// Train a model on one or more trajectories.
    Train(TrainArgs),
    /// Evaluate a checkpoint; optionally sweep the discretization.
    Eval(EvalArgs),
    /// Report stability metrics for trajectories.
    Analyze(AnalyzeArgs),
    /// Screen a candidate pool against seed molecules.
    Curate(CurateArgs),
    /// Fingerprint SMILES strings and print pairwise similarities.
    Fingerprint(FingerprintArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PotentialArg {
    Harmonic,
    PairwiseSpring,
}

impl From<PotentialArg> for ToyPotential {
    fn from(p: PotentialArg) -> ToyPotential {
        match p {
            PotentialArg::Harmonic => ToyPotential::Harmonic,
            PotentialArg::PairwiseSpring => ToyPotential::PairwiseSpring,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    potential: PotentialArg,
    #[arg(long)]
    atoms: usize,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainMode {
    Single,
    Multi,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "single")]
    mode: TrainMode,
    /// Trajectory files; single mode uses exactly one.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// JSON config with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the number of query timesteps P.
    #[arg(long)]
    p: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    P,
    DeltaT,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    sweep: Option<SweepKind>,
    /// Sweep points, comma separated (P values or delta-T values).
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Loose,
    Strict,
}

#[derive(Args)]
struct CurateArgs {
    /// Seed molecules, one `SMILES name` per line.
    #[arg(long)]
    seeds: PathBuf,
    /// Candidate pool in the same format.
    #[arg(long)]
    pool: PathBuf,
    /// Accepted-similarity cap preset: loose = 0.80, strict = 0.2.
    #[arg(long, value_enum, default_value = "loose")]
    preset: PresetArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct FingerprintArgs {
    /// SMILES strings to fingerprint.
    #[arg(required = true)]
    smiles: Vec<String>,
}

/// Thread cap from the environment; orchestration is currently sequential, so
/// the cap is recorded in the manifest and trivially honored.
fn thread_cap() -> Result<usize, CliError> {
    match std::env::var("ATOMKIT_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::usage(format!("ATOMKIT_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    args: BTreeMap<String, String>,
    seed: Option<u64>,
    threads: usize,
    /// path -> sha256 of every input file.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str) -> Result<Manifest, CliError> {
        Ok(Manifest {
            command: command.to_string(),
            args: BTreeMap::new(),
            seed: None,
            threads: thread_cap()?,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    fn arg(&mut self, key: &str, value: impl ToString) {
        self.args.insert(key.to_string(), value.to_string());
    }

    fn input(&mut self, path: &Path) -> CliResult {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(&self, dir: &Path) -> CliResult {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::usage(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<AtomModelConfig>,
    train: Option<TrainRunConfig>,
}

fn load_config(path: Option<&Path>) -> Result<(AtomModelConfig, TrainRunConfig), CliError> {
    let file = match path {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
        }
    };
    Ok((file.model.unwrap_or_default(), file.train.unwrap_or_default()))
}

fn load_data(path: &Path) -> Result<Trajectory, CliError> {
    load_trajectory(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn write_metrics_csv(path: &Path, report: &MetricsReport) -> CliResult {
    let mut out = String::from("epoch,train_loss,val_s2s,val_s2t\n");
    for (i, t) in report.train_curve.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            i, t, report.val_s2s_curve[i], report.val_s2t_curve[i]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> CliResult {
    if args.steps == 0 {
        return Err(CliError::usage("--steps must be positive"));
    }
    if args.atoms == 0 {
        return Err(CliError::usage("--atoms must be positive"));
    }
    let traj = generate_toy_trajectory(
        args.potential.into(),
        args.atoms,
        args.steps,
        args.dt,
        args.seed,
    )
    .map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    save_trajectory(&traj, &args.out)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", args.out.display())))?;

    let mut manifest = Manifest::new("gen-data")?;
    manifest.arg("potential", format!("{:?}", args.potential));
    manifest.arg("atoms", args.atoms);
    manifest.arg("steps", args.steps);
    manifest.arg("dt", args.dt);
    manifest.seed = Some(args.seed);
    manifest.output(&args.out);
    let manifest_dir = args.out.parent().filter(|p| !p.as_os_str().is_empty());
    manifest.write(manifest_dir.unwrap_or(Path::new(".")))?;
    println!("wrote {} ({} frames, {} atoms)", args.out.display(), traj.n_frames(), traj.n_atoms());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> CliResult {
    let (model_cfg, mut train_cfg) = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        train_cfg.epochs = epochs;
    }
    if let Some(p) = args.p {
        train_cfg.p = p;
    }
    train_cfg.validate()?;

    let mut mode = args.mode;
    if matches!(mode, TrainMode::Single) && args.data.len() != 1 {
        return Err(CliError::usage(format!(
            "single mode takes exactly one --data file, got {}",
            args.data.len()
        )));
    }
    if matches!(mode, TrainMode::Multi) && args.data.len() == 1 {
        eprintln!("warning: --mode multi with one dataset, proceeding as single-task");
        mode = TrainMode::Single;
    }
    let trajectories: Vec<Trajectory> =
        args.data.iter().map(|p| load_data(p)).collect::<Result<_, _>>()?;

    ensure_dir(&args.out_dir)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(100));
    let model = AtomModel::init(model_cfg.clone(), &mut init_rng)
        .map_err(|e| CliError::usage(e.to_string()))?;

    let report = match mode {
        TrainMode::Single => train_single_task(&trajectories[0], &model, &train_cfg)?,
        TrainMode::Multi => train_multitask(&trajectories, &model, &train_cfg)?.0,
    };

    let ckpt_path = args.out_dir.join("model.ckpt");
    checkpoint::save_to_path(&ckpt_path, &model.to_checkpoint())
        .map_err(|e| CliError::usage(e.to_string()))?;
    let metrics_path = args.out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &report)?;
    let config_path = args.out_dir.join("config.json");
    let resolved = serde_json::json!({ "model": model_cfg, "train": train_cfg });
    std::fs::write(&config_path, serde_json::to_string_pretty(&resolved).expect("serializable") + "\n")?;

    let mut manifest = Manifest::new("train")?;
    manifest.arg("mode", format!("{mode:?}"));
    manifest.seed = Some(train_cfg.seed);
    for p in &args.data {
        manifest.input(p)?;
    }
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    manifest.output(&ckpt_path);
    manifest.output(&metrics_path);
    manifest.output(&config_path);
    manifest.write(&args.out_dir)?;

    println!("final S2S {:.6e} S2T {:.6e} (best epoch {})", report.s2s, report.s2t, report.best_epoch);
    Ok(())
}

fn load_model_from_ckpt(
    ckpt: &Path,
    model_cfg: AtomModelConfig,
) -> Result<AtomModel, CliError> {
    let params = checkpoint::load_from_path(ckpt)
        .map_err(|e| CliError::usage(format!("{}: {e}", ckpt.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model =
        AtomModel::init(model_cfg, &mut rng).map_err(|e| CliError::usage(e.to_string()))?;
    model
        .load_checkpoint(&params)
        .map_err(|e| CliError::usage(format!("checkpoint/config mismatch: {e}")))?;
    Ok(model)
}

fn cmd_eval(args: &EvalArgs) -> CliResult {
    let (model_cfg, train_cfg) = load_config(args.config.as_deref())?;
    let model = load_model_from_ckpt(&args.ckpt, model_cfg)?;
    let traj = load_data(&args.data)?;
    ensure_dir(&args.out_dir)?;

    let plan = discretize(
        train_cfg.strategy,
        traj.t0(),
        train_cfg.delta_t,
        train_cfg.p,
        train_cfg.tail_lag,
    )?;
    let ds = WindowedDataset::new(&traj, &plan).map_err(|e| CliError::usage(e.to_string()))?;
    let (s2s, s2t) = evaluate(&model, &ds.samples)?;
    let (base_s2s, base_s2t) = static_baseline(&ds.samples)?;
    let eval_path = args.out_dir.join("eval.csv");
    std::fs::write(
        &eval_path,
        format!("metric,model,static_baseline\ns2s,{s2s},{base_s2s}\ns2t,{s2t},{base_s2t}\n"),
    )?;

    let mut manifest = Manifest::new("eval")?;
    manifest.input(&args.ckpt)?;
    manifest.input(&args.data)?;
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    manifest.output(&eval_path);

    if let Some(kind) = args.sweep {
        let sweep_path = args.out_dir.join("sweep.csv");
        let mut csv = String::new();
        match kind {
            SweepKind::P => {
                let ps: Vec<usize> = if args.values.is_empty() {
                    vec![4, 8, 16]
                } else {
                    args.values.iter().map(|&v| v as usize).collect()
                };
                let rows = sweep_discretization(&model, &traj, &ps, train_cfg.delta_t, 64)?;
                csv.push_str("p,s2t\n");
                let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
                for (p, s2t) in &rows {
                    csv.push_str(&format!("{p},{s2t}\n"));
                    lo = lo.min(*s2t);
                    hi = hi.max(*s2t);
                }
                println!("sweep P max/min S2T ratio {:.4}", hi / lo);
            }
            SweepKind::DeltaT => {
                let dts: Vec<f64> = if args.values.is_empty() {
                    vec![0.5, 1.0, 2.0].iter().map(|f| f * train_cfg.delta_t).collect()
                } else {
                    args.values.clone()
                };
                let rows = sweep_delta_t(&model, &traj, &dts, train_cfg.p, 64)?;
                csv.push_str("delta_t,s2t\n");
                for (dt, s2t) in &rows {
                    csv.push_str(&format!("{dt},{s2t}\n"));
                }
            }
        }
        std::fs::write(&sweep_path, csv)?;
        manifest.output(&sweep_path);
    }
    manifest.write(&args.out_dir)?;
    println!("S2S {s2s:.6e} S2T {s2t:.6e} (static baseline S2T {base_s2t:.6e})");
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> CliResult {
    ensure_dir(&args.out_dir)?;
    let mut csv = String::from("name,frames,atoms,com_drift,per_step_motion\n");
    let mut manifest = Manifest::new("analyze")?;
    for path in &args.data {
        let traj = load_data(path)?;
        let report = stability_metrics(&traj).map_err(|e| CliError::usage(e.to_string()))?;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            traj.name,
            traj.n_frames(),
            traj.n_atoms(),
            report.com_drift,
            report.per_step_motion
        ));
        manifest.input(path)?;
    }
    let out = args.out_dir.join("stability.csv");
    std::fs::write(&out, csv)?;
    manifest.output(&out);
    manifest.write(&args.out_dir)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_curate(args: &CurateArgs) -> CliResult {
    let seeds_text = std::fs::read_to_string(&args.seeds)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.seeds.display())))?;
    let pool_text = std::fs::read_to_string(&args.pool)
        .map_err(|e| CliError::usage(format!("{}: {e}", args.pool.display())))?;
    let seeds = parse_smiles_list(&seeds_text);
    let pool = parse_smiles_list(&pool_text);
    let cfg = match args.preset {
        PresetArg::Loose => SelectionConfig::preset_loose(),
        PresetArg::Strict => SelectionConfig::preset_strict(),
    };
    let result =
        select_candidates(&seeds, &pool, &cfg).map_err(|e| CliError::usage(e.to_string()))?;

    ensure_dir(&args.out_dir)?;
    let mut accepted = String::from("name,smiles,matched_seed,seed_similarity\n");
    for a in &result.accepted {
        accepted.push_str(&format!(
            "{},{},{},{:.4}\n",
            a.name, a.smiles, a.matched_seed, a.seed_similarity
        ));
    }
    let accepted_path = args.out_dir.join("accepted.csv");
    std::fs::write(&accepted_path, accepted)?;
    let mut log = String::new();
    for r in &result.rejected {
        log.push_str(&format!("{} ({}): {}\n", r.name, r.smiles, r.reason));
    }
    let rejected_path = args.out_dir.join("rejected.log");
    std::fs::write(&rejected_path, log)?;

    let mut manifest = Manifest::new("curate")?;
    manifest.arg("preset", format!("{:?}", args.preset));
    manifest.input(&args.seeds)?;
    manifest.input(&args.pool)?;
    manifest.output(&accepted_path);
    manifest.output(&rejected_path);
    manifest.write(&args.out_dir)?;
    println!("accepted {} of {} candidates", result.accepted.len(), pool.len());
    Ok(())
}

fn cmd_fingerprint(args: &FingerprintArgs) -> CliResult {
    let mut fps = Vec::new();
    for s in &args.smiles {
        let mol = parse_smiles(s).map_err(|e| CliError::usage(format!("{s}: {e}")))?;
        let fp = morgan_fingerprint(&mol);
        println!("{s}: {} bits set of {}", fp.popcount(), fp.n_bits);
        fps.push((s, fp));
    }
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            let t = tanimoto(&fps[i].1, &fps[j].1).expect("equal widths");
            println!("tanimoto({}, {}) = {t:.4}", fps[i].0, fps[j].0);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = thread_cap() {
        eprintln!("error: {}", e.message);
        return ExitCode::from(e.code);
    }
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Curate(a) => cmd_curate(a),
        Command::Fingerprint(a) => cmd_fingerprint(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
