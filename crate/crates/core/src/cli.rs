//! Command-line interface: `simulate`, `train`, `predict`, `evaluate`,
//! `sweep` and `scree` subcommands over the library. Flags override the
//! optional TOML config file; every run writes a resolved config snapshot
//! beside its outputs, logs line-delimited JSON to stderr, and writes result
//! artifacts atomically.
//!
//! Exit codes: 0 success, 2 usage/configuration/file errors, 3 numeric
//! failure mid-run (with the checkpoint path of the last consistent state in
//! the error JSON).

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, SweepAxis};
use crate::io::{self, Manifest, WindowSpec};
use crate::linalg::Mat;
use crate::optimizer::{self, Variant};
use crate::qp;
use crate::synth::{self, NoiseAxis};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser, Debug)]
#[command(name = "srddl", version, about = "Structurally regularized dynamic dictionary learning with a recurrent attention predictor")]
pub struct Cli {
    /// Declarative TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (runs are sequential and bitwise reproducible; the
    /// flag is recorded in the resolved config).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort plus its ground-truth archive.
    Simulate(SimulateArgs),
    /// Fit a model on a cohort manifest and write a checkpoint.
    Train(TrainArgs),
    /// Infer loadings, attention and scores for new subjects.
    Predict(PredictArgs),
    /// Cross-validated evaluation of a fitting variant.
    Evaluate(EvaluateArgs),
    /// Sweep one hyperparameter or noise axis.
    Sweep(SweepArgs),
    /// Export the eigenspectrum of the correlation windows.
    Scree(ScreeArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub sigma_b: Option<f64>,
    #[arg(long)]
    pub sigma_gamma: Option<f64>,
    #[arg(long)]
    pub sigma_y: Option<f64>,
    #[arg(long)]
    pub sigma_c: Option<f64>,
    /// Uniform Bernoulli edge prior, or a CSV file of per-pair priors.
    #[arg(long)]
    pub edge_prior: Option<f64>,
    #[arg(long)]
    pub edge_prior_file: Option<PathBuf>,
    #[arg(long)]
    pub gen_net_gain: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Override the manifest's window length (time-series manifests only).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value = "srddl")]
    pub variant: String,
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
    /// Enable gradient-norm clipping for long sequences.
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "srddl")]
    pub variant: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// lambda | window-length | stride | sigma-b | sigma-gamma | sigma-y
    #[arg(long)]
    pub axis: String,
    /// Comma-separated grid values.
    #[arg(long)]
    pub grid: String,
    /// Trials per grid point (noise axes).
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Cohort manifest (hyperparameter axes only).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "srddl")]
    pub variant: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ScreeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

// ---------------------------------------------------------------------------
// JSON logging
// ---------------------------------------------------------------------------

struct JsonLogger;

impl log::Log for JsonLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Info
    }
    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            let line = serde_json::json!({
                "level": record.level().to_string().to_lowercase(),
                "message": record.args().to_string(),
            });
            eprintln!("{line}");
        }
    }
    fn flush(&self) {}
}

static LOGGER: JsonLogger = JsonLogger;

pub fn install_json_logger() {
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(log::LevelFilter::Info);
}

fn emit_event(value: serde_json::Value) {
    eprintln!("{value}");
}

fn error_json(err: &Error, checkpoint: Option<&Path>) {
    let kind = match err {
        Error::Numeric(_) => "numeric",
        Error::Config(_) | Error::Parse(_) | Error::Io(_) => "usage",
        Error::Contract(_) | Error::Dimension(_) => "usage",
    };
    let mut obj = serde_json::json!({
        "error": err.to_string(),
        "kind": kind,
    });
    if let Some(path) = checkpoint {
        obj["checkpoint"] = serde_json::Value::String(path.display().to_string());
    }
    eprintln!("{obj}");
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Parse arguments and run. Returns the process exit code.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{e}");
            error_json(&Error::Config(e.to_string()), None);
            return 2;
        }
    };
    install_json_logger();
    match run(cli) {
        Ok(()) => 0,
        Err((err, checkpoint)) => {
            error_json(&err, checkpoint.as_deref());
            exit_code_for(&err)
        }
    }
}

type RunResult = std::result::Result<(), (Error, Option<PathBuf>)>;

fn plain(e: Error) -> (Error, Option<PathBuf>) {
    (e, None)
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> RunResult {
    let cfg = resolve_config(&cli).map_err(plain)?;
    match &cli.command {
        Command::Simulate(args) => simulate(&cfg, args).map_err(plain),
        Command::Train(args) => train(&cfg, args),
        Command::Predict(args) => predict(&cfg, args).map_err(plain),
        Command::Evaluate(args) => evaluate(&cfg, args).map_err(plain),
        Command::Sweep(args) => sweep(&cfg, args).map_err(plain),
        Command::Scree(args) => scree(&cfg, args).map_err(plain),
    }
}

fn parse_grid(grid: &str) -> Result<Vec<f64>> {
    grid.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad grid value {s:?}")))
        })
        .collect()
}

fn simulate(cfg: &RunConfig, args: &SimulateArgs) -> Result<()> {
    let mut sc = cfg.synth.clone();
    if let Some(v) = args.subjects {
        sc.n_subjects = v;
    }
    if let Some(v) = args.k {
        sc.k = v;
    }
    if let Some(v) = args.m {
        sc.m = v;
    }
    if let Some(v) = args.t {
        sc.t = v;
    }
    if let Some(v) = args.p {
        sc.p = v;
    }
    if let Some(v) = args.sigma_b {
        sc.sigma_b = v;
    }
    if let Some(v) = args.sigma_gamma {
        sc.sigma_gamma = v;
    }
    if let Some(v) = args.sigma_y {
        sc.sigma_y = v;
    }
    if let Some(v) = args.sigma_c {
        sc.sigma_c = v;
    }
    if let Some(v) = args.edge_prior {
        sc.edge_prior = v;
    }
    if args.edge_prior_file.is_some() {
        return Err(Error::Config(
            "per-pair edge prior files are not supported yet; use --edge-prior".into(),
        ));
    }
    if let Some(v) = args.gen_net_gain {
        sc.gen_net_gain = v;
    }

    let (cohort, truth) = synth::generate(&sc)?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;

    let mut manifest = Manifest {
        window: WindowSpec {
            window_length: 1,
            stride: 1,
        },
        has_header: false,
        residualize: false,
        scores: Some("scores.csv".into()),
        subjects: Vec::new(),
    };
    let mut scores = Vec::new();
    for subj in &cohort.subjects {
        let corr_rel = format!("corr/{}.csv", subj.id);
        let adj_rel = format!("adj/{}.csv", subj.id);
        io::write_correlations_csv(&out.join(&corr_rel), &subj.gammas)?;
        io::write_matrix_csv(&out.join(&adj_rel), &subj.graph.as_ref().unwrap().adjacency)?;
        manifest.subjects.push(io::ManifestSubject {
            id: subj.id.clone(),
            timeseries: None,
            correlations: Some(corr_rel),
            adjacency: Some(adj_rel),
        });
        scores.push(subj.scores.clone());
    }
    io::write_scores_csv(&out.join("scores.csv"), &scores)?;
    io::write_manifest(&out.join("manifest.json"), &manifest)?;
    let cfg_json = serde_json::to_string(&sc).map_err(|e| Error::Config(e.to_string()))?;
    checkpoint::save_ground_truth(&truth, &cfg_json, &out.join("ground_truth.bin"))?;

    let mut snapshot = cfg.clone();
    snapshot.synth = sc;
    snapshot.write_snapshot(out)?;
    emit_event(serde_json::json!({
        "event": "simulated",
        "subjects": cohort.len(),
        "out_dir": out.display().to_string(),
    }));
    Ok(())
}

fn build_hp(cfg: &RunConfig, k: Option<usize>, lambda: Option<f64>, gamma: Option<f64>, iters: Option<usize>, clip: Option<f64>) -> crate::srddl::HyperParams {
    let mut hp = cfg.hyper.clone();
    if let Some(v) = k {
        hp.k = v;
    }
    if let Some(v) = lambda {
        hp.lambda_tradeoff = v;
    }
    if let Some(v) = gamma {
        hp.gamma = v;
    }
    if let Some(v) = iters {
        hp.main_iters = v;
    }
    if clip.is_some() {
        hp.clip_norm = clip;
    }
    hp
}

fn load_cohort_with_window(manifest_path: &Path, window: Option<usize>, stride: Option<usize>) -> Result<(crate::io::Cohort, Manifest)> {
    let text = std::fs::read_to_string(manifest_path)?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("{}: {e}", manifest_path.display())))?;
    if window.is_some() || stride.is_some() {
        if manifest.subjects.iter().any(|s| s.timeseries.is_none()) {
            return Err(Error::Config(
                "window/stride overrides need raw time series in the manifest".into(),
            ));
        }
        if let Some(w) = window {
            manifest.window.window_length = w;
        }
        if let Some(s) = stride {
            manifest.window.stride = s;
        }
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let cohort = io::load_cohort_from_manifest(&manifest, base)?;
    Ok((cohort, manifest))
}

fn train(cfg: &RunConfig, args: &TrainArgs) -> RunResult {
    let variant: Variant = args.variant.parse().map_err(plain)?;
    let (mut cohort, _) =
        load_cohort_with_window(&args.manifest, args.window, args.stride).map_err(plain)?;
    let donors: Vec<usize> = (0..cohort.len()).collect();
    cohort.impute_missing_graphs(&donors).map_err(plain)?;

    let hp = build_hp(cfg, args.k, args.lambda, args.gamma, args.iters, args.clip_norm);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| plain(e.into()))?;
    let ckpt_path = args
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));

    let started = Instant::now();
    let mut on_iter = |rec: &optimizer::IterationRecord| {
        emit_event(serde_json::json!({
            "event": "iteration",
            "iteration": rec.iteration,
            "objective": {
                "data": rec.objective.data,
                "net": rec.objective.net,
                "dual": rec.objective.dual,
                "penalty": rec.objective.penalty,
                "total": rec.objective.total(),
            },
            "residual": rec.residual_pre_repair,
            "residual_repaired": rec.residual_post_repair,
            "net_loss": rec.net_loss,
            "wall_time_s": started.elapsed().as_secs_f64(),
        }));
    };
    let state = match variant {
        Variant::Srddl => optimizer::fit_with_progress(&cohort, &hp, cfg.seed, &mut on_iter),
        Variant::NoDti => optimizer::fit_no_dti_with_progress(&cohort, &hp, cfg.seed, &mut on_iter),
        Variant::Decoupled => optimizer::fit_decoupled(&cohort, &hp, cfg.seed),
    }
    .map_err(plain)?;

    checkpoint::save_checkpoint(&state, &ckpt_path).map_err(plain)?;
    let mut snapshot = cfg.clone();
    snapshot.hyper = hp;
    snapshot.write_snapshot(&cfg.out_dir).map_err(plain)?;

    if let Some(reason) = &state.aborted {
        return Err((
            Error::numeric(format!("training aborted: {reason}")),
            Some(ckpt_path),
        ));
    }
    emit_event(serde_json::json!({
        "event": "trained",
        "iterations": state.iterations,
        "checkpoint": ckpt_path.display().to_string(),
    }));
    Ok(())
}

fn predict(cfg: &RunConfig, args: &PredictArgs) -> Result<()> {
    let state = checkpoint::load_checkpoint(&args.checkpoint)?;
    let (cohort, _) = io::load_cohort(&args.manifest)?;
    let out = cfg.out_dir.join("predictions");
    std::fs::create_dir_all(&out)?;
    let p = cohort.p;
    for subj in &cohort.subjects {
        let lap = match (&subj.graph, state.variant) {
            (_, Variant::NoDti) => Mat::eye(p),
            (Some(g), _) => g.laplacian.clone(),
            (None, _) => {
                log::warn!("subject {}: no adjacency; using identity Laplacian", subj.id);
                Mat::eye(p)
            }
        };
        let (track, trace, converged) = qp::infer_subject(
            &state.dictionary.b,
            &state.predictor,
            &subj.gammas,
            &lap,
            qp::QP_DEFAULT_TOL,
        )?;
        let loadings = track.loadings();
        let rows: Vec<Vec<f64>> = (0..loadings.nrows())
            .map(|t| loadings.row(t).to_vec())
            .collect();
        let doc = serde_json::json!({
            "subject_id": subj.id,
            "scores": trace.final_pred.to_vec(),
            "attention": trace.attention.to_vec(),
            "loadings": rows,
            "qp_converged": converged,
        });
        io::atomic_write(
            &out.join(format!("{}.json", subj.id)),
            serde_json::to_string_pretty(&doc)
                .map_err(|e| Error::Config(e.to_string()))?
                .as_bytes(),
        )?;
    }
    cfg.write_snapshot(&cfg.out_dir)?;
    emit_event(serde_json::json!({
        "event": "predicted",
        "subjects": cohort.len(),
        "out_dir": out.display().to_string(),
    }));
    Ok(())
}

fn predictions_csv(rows: &[eval::PredictionRow], m: usize) -> String {
    let mut out = String::from("subject_id,fold,split");
    for i in 0..m {
        out.push_str(&format!(",pred_{}", i + 1));
    }
    for i in 0..m {
        out.push_str(&format!(",truth_{}", i + 1));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}", r.subject_id, r.fold, r.split));
        for v in &r.pred {
            out.push_str(&format!(",{v}"));
        }
        for (v, &obs) in r.truth.iter().zip(&r.observed) {
            if obs {
                out.push_str(&format!(",{v}"));
            } else {
                out.push(',');
            }
        }
        out.push('\n');
    }
    out
}

fn attention_csv(rows: &[(String, Vec<f64>)]) -> String {
    let max_t = rows.iter().map(|(_, a)| a.len()).max().unwrap_or(0);
    let mut out = String::from("subject_id");
    for t in 0..max_t {
        out.push_str(&format!(",a_{}", t + 1));
    }
    out.push('\n');
    for (id, attn) in rows {
        out.push_str(id);
        for t in 0..max_t {
            out.push(',');
            if t < attn.len() {
                out.push_str(&format!("{}", attn[t]));
            }
        }
        out.push('\n');
    }
    out
}

fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let (cohort, _) = io::load_cohort(&args.manifest)?;
    // missing graphs stay in place: imputation happens fold-locally inside
    // the harness
    if cohort.subjects.iter().all(|s| s.graph.is_none()) {
        return Err(Error::Config("no subject has adjacency data".into()));
    }
    let hp = build_hp(cfg, args.k, args.lambda, None, args.iters, None);
    let outcome = match args.variant.as_str() {
        "bc" => eval::bc_baseline_cv(&cohort, &hp, args.folds, cfg.seed)?,
        other => {
            let variant: Variant = other.parse()?;
            eval::run_cv(&cohort, &hp, variant, args.folds, cfg.seed)?
        }
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    io::atomic_write(
        &cfg.out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&outcome.report)
            .map_err(|e| Error::Config(e.to_string()))?
            .as_bytes(),
    )?;
    io::atomic_write(
        &cfg.out_dir.join("predictions.csv"),
        predictions_csv(&outcome.predictions, cohort.m).as_bytes(),
    )?;
    io::atomic_write(
        &cfg.out_dir.join("attention.csv"),
        attention_csv(&outcome.attention).as_bytes(),
    )?;
    let mut snapshot = cfg.clone();
    snapshot.hyper = hp;
    snapshot.write_snapshot(&cfg.out_dir)?;
    emit_event(serde_json::json!({
        "event": "evaluated",
        "variant": outcome.report.variant,
        "folds": outcome.report.folds,
    }));
    Ok(())
}

fn sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<()> {
    let grid = parse_grid(&args.grid)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv = if let Ok(axis) = args.axis.parse::<NoiseAxis>() {
        let mut hp = build_hp(cfg, args.k, None, None, args.iters, None);
        hp.k = args.k.unwrap_or(cfg.synth.k);
        let points = synth::noise_sweep(&cfg.synth, &hp, axis, &grid, args.trials)?;
        synth::sweep_csv(&points)
    } else {
        let axis: SweepAxis = args.axis.parse()?;
        let manifest = args
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("hyperparameter sweeps need --manifest".into()))?;
        let variant: Variant = args.variant.parse()?;
        let hp = build_hp(cfg, args.k, None, None, args.iters, None);
        let points = eval::param_sweep(manifest, &hp, axis, &grid, variant, args.folds, cfg.seed)?;
        eval::param_sweep_csv(&points)
    };
    io::atomic_write(&cfg.out_dir.join("sweep.csv"), csv.as_bytes())?;
    cfg.write_snapshot(&cfg.out_dir)?;
    emit_event(serde_json::json!({
        "event": "swept",
        "axis": args.axis,
        "points": grid.len(),
    }));
    Ok(())
}

fn scree(cfg: &RunConfig, args: &ScreeArgs) -> Result<()> {
    let (cohort, _) = io::load_cohort(&args.manifest)?;
    let (mean, std) = eval::scree_export(&cohort)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    io::atomic_write(&cfg.out_dir.join("scree.csv"), eval::scree_csv(&mean, &std).as_bytes())?;
    cfg.write_snapshot(&cfg.out_dir)?;
    emit_event(serde_json::json!({
        "event": "scree",
        "positions": mean.len(),
    }));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["srddl", "simulate", "--seed", "7", "--subjects", "4"]).unwrap();
        assert_eq!(cli.seed, Some(7));
        match cli.command {
            Command::Simulate(args) => assert_eq!(args.subjects, Some(4)),
            _ => panic!("wrong subcommand"),
        }

        let cli = Cli::try_parse_from([
            "srddl", "train", "--manifest", "m.json", "--variant", "no-dti", "--lambda", "2.5",
        ])
        .unwrap();
        match cli.command {
            Command::Train(args) => {
                assert_eq!(args.variant, "no-dti");
                assert_eq!(args.lambda, Some(2.5));
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(parse_and_dispatch(["srddl", "train", "--bogus"]), 2);
        assert_eq!(parse_and_dispatch(["srddl", "nonsense"]), 2);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("1,2.5, 3").unwrap(), vec![1.0, 2.5, 3.0]);
        assert!(parse_grid("1,x").is_err());
    }
}
