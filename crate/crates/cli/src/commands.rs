//! Command implementations and their argument structs.

use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use refine3d_core::checkpoint;
use refine3d_core::pipeline::{
    evaluate, eval_proposals, export_tt_norms, infer, recall_key, train, Ensemble, EvalReport,
    EvalThresholds, InferConfig, Model, ScenePrediction,
};
use refine3d_core::scene::{generate_corpus, read_corpus, write_corpus, Scene};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{sidecar, write_file, RunManifest};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "refine3d", version, about = "Diffusion-driven 3D proposal refinement experiments")]
pub struct Cli {
    /// Directory that holds `train.jsonl` and `eval.jsonl` when no corpus
    /// path is given.
    #[arg(long, global = true, env = "REFINE3D_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scene corpus as JSON lines.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint: one metrics row per sampling step.
    Eval(EvalArgs),
    /// Run one ablation axis and write a combined table.
    Sweep(SweepArgs),
    /// Write the temporal scale norm for every timestep.
    ExportTt(ExportTtArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub scenes: u64,
    /// Id of the first scene; held-out splits use a disjoint id range.
    #[arg(long, default_value_t = 0)]
    pub first_id: u64,
    /// Defaults to `<data-dir>/train.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scene generation settings are read from `[train.scene]`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to `<data-dir>/train.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Defaults to `<out-ckpt>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Defaults to `<data-dir>/eval.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overrides `[infer] steps`.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    /// Overrides `[infer] ensemble`.
    #[arg(long)]
    pub ensemble: Option<Ensemble>,
    /// Overrides `[infer] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to `<ckpt>.eval.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-proposal sampling traces as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Worker threads for scene-parallel inference.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Snr,
    Steps,
    Tt,
    Ensemble,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Snr => "snr",
            SweepAxis::Steps => "steps",
            SweepAxis::Tt => "tt",
            SweepAxis::Ensemble => "ensemble",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::Snr => &["1", "2", "4"],
            SweepAxis::Steps => &["1", "2", "3", "4", "5"],
            SweepAxis::Tt => &["off", "on"],
            SweepAxis::Ensemble => &["none", "mean", "nms"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Axes that change the trained model rather than inference only.
    pub fn retrains(self) -> bool {
        matches!(self, SweepAxis::Snr | SweepAxis::Tt)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated axis values; each axis has a default set.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<String>>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training corpus. Defaults to `<data-dir>/train.jsonl`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Defaults to `<data-dir>/eval.jsonl`.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Shared model for the steps and ensemble axes; trained from the
    /// config when absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Cells run in parallel up to this bound.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ExportTtArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest timestep exported; defaults to the schedule length.
    #[arg(long)]
    pub timesteps: Option<usize>,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a, &cli.data_dir).map(|_| ()),
        Command::Train(a) => train_cmd(a, &cli.data_dir).map(|_| ()),
        Command::Eval(a) => eval_cmd(a, &cli.data_dir).map(|_| ()),
        Command::Sweep(a) => sweep(a, &cli.data_dir).map(|_| ()),
        Command::ExportTt(a) => export_tt(a).map(|_| ()),
    }
}

pub fn default_train_corpus(data_dir: &Path) -> PathBuf {
    data_dir.join("train.jsonl")
}

pub fn default_eval_corpus(data_dir: &Path) -> PathBuf {
    data_dir.join("eval.jsonl")
}

pub fn load_corpus(path: &Path) -> CliResult<Vec<Scene>> {
    let f = std::fs::File::open(path)
        .map_err(|e| CliError::io(format!("opening corpus {}", path.display()), e))?;
    read_corpus(BufReader::new(f)).map_err(|e| CliError::io(format!("reading corpus {}", path.display()), e))
}

pub fn load_model(path: &Path) -> CliResult<Model> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::io(format!("opening checkpoint {}", path.display()), e))?;
    checkpoint::from_bytes(&bytes)
        .map_err(|e| CliError::io(format!("reading checkpoint {}", path.display()), e))
}

fn csv_float(v: f64) -> String {
    format!("{v}")
}

fn opt_float(v: Option<f64>) -> String {
    v.map(csv_float).unwrap_or_default()
}

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(CliError::Config("--jobs must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

// gen-data

pub fn gen_data(args: &GenDataArgs, data_dir: &Path) -> CliResult<RunManifest> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let out = args.out.clone().unwrap_or_else(|| default_train_corpus(data_dir));
    let last = args
        .first_id
        .checked_add(args.scenes)
        .ok_or_else(|| CliError::Config("--first-id + --scenes overflows".into()))?;
    let scenes = generate_corpus(args.seed, args.first_id..last, &cfg.train.scene)?;
    let mut buf = Vec::new();
    write_corpus(&mut buf, &scenes)?;
    write_file(&out, &buf)?;

    #[derive(Serialize)]
    struct GenConfig<'a> {
        scenes: u64,
        first_id: u64,
        scene: &'a refine3d_core::scene::SceneSpec,
    }
    let snapshot = GenConfig {
        scenes: args.scenes,
        first_id: args.first_id,
        scene: &cfg.train.scene,
    };
    let mut manifest = RunManifest::new("gen-data", &snapshot, args.seed, &[])?;
    manifest.outputs.push(out.clone());
    manifest.write(&sidecar(&out, "manifest.json"))?;
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(manifest)
}

// train

pub const TRAIN_LOG_HEADER: &str = "step,epoch,reg,cls,total,samples,positives";

pub fn train_cmd(args: &TrainArgs, data_dir: &Path) -> CliResult<RunManifest> {
    let cfg = RunConfig::load_or_default(args.config.as_deref())?;
    let data = args.data.clone().unwrap_or_else(|| default_train_corpus(data_dir));
    let scenes = load_corpus(&data)?;
    let log_path = args.log.clone().unwrap_or_else(|| sidecar(&args.out_ckpt, "log.csv"));
    let mut manifest = RunManifest::new("train", &cfg.train, cfg.train.seed, &[("corpus", &data)])?;

    let mut log = String::new();
    writeln!(log, "{}", manifest.csv_banner("train-log")).unwrap();
    writeln!(log, "{TRAIN_LOG_HEADER}").unwrap();
    let trainer = train(&cfg.train, &scenes, |r| {
        writeln!(
            log,
            "{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            csv_float(r.reg),
            csv_float(r.cls),
            csv_float(r.reg + r.cls),
            r.samples,
            r.positives
        )
        .unwrap();
    })?;
    let bytes = checkpoint::to_bytes(&trainer.model)?;
    write_file(&args.out_ckpt, &bytes)?;
    write_file(&log_path, log.as_bytes())?;
    manifest.outputs = vec![args.out_ckpt.clone(), log_path];
    manifest.write(&sidecar(&args.out_ckpt, "manifest.json"))?;
    eprintln!(
        "trained {} steps on {} scenes ({} classification-only) -> {}",
        trainer.steps_taken(),
        scenes.len(),
        trainer.classification_only_steps,
        args.out_ckpt.display()
    );
    Ok(manifest)
}

// eval

/// Predictions for a corpus and one report per sampling step. The report
/// for step `k` scores the running ensemble after `k` steps, so the last
/// entry is the final result.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub predictions: Vec<ScenePrediction>,
    pub per_step: Vec<EvalReport>,
    pub timesteps: Vec<usize>,
}

impl EvalRun {
    pub fn final_report(&self) -> &EvalReport {
        self.per_step.last().expect("at least one step")
    }
}

pub fn predict_corpus(
    model: &Model,
    scenes: &[Scene],
    cfg: &RunConfig,
    infer_cfg: &InferConfig,
) -> CliResult<Vec<ScenePrediction>> {
    scenes
        .par_iter()
        .map(|s| {
            let props = eval_proposals(s, cfg.eval.proposal_seed, &cfg.train.proposals, &cfg.train.scene)?;
            infer(model, s, &props, infer_cfg)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::from)
}

/// Truncates every trace to its first `k` steps and scores it.
pub fn report_after(
    preds: &[ScenePrediction],
    scenes: &[Scene],
    k: usize,
    thresholds: &EvalThresholds,
) -> CliResult<EvalReport> {
    let cut: Vec<ScenePrediction> = preds
        .iter()
        .map(|p| {
            let mut p = p.clone();
            for (i, tr) in p.traces.iter_mut().enumerate() {
                tr.steps.truncate(k);
                let last = tr.steps.last().expect("k >= 1");
                p.boxes[i] = last.ensembled;
                p.confidences[i] = last.confidence;
            }
            p
        })
        .collect();
    Ok(evaluate(&cut, scenes, thresholds)?)
}

pub fn run_eval(model: &Model, scenes: &[Scene], cfg: &RunConfig, jobs: usize) -> CliResult<EvalRun> {
    cfg.infer
        .validate(model.schedule.timesteps)
        .map_err(|e| CliError::in_section("infer", e))?;
    let predictions = pool(jobs)?.install(|| predict_corpus(model, scenes, cfg, &cfg.infer))?;
    let thresholds = cfg.eval.thresholds();
    let per_step = (1..=cfg.infer.steps)
        .map(|k| report_after(&predictions, scenes, k, &thresholds))
        .collect::<CliResult<Vec<_>>>()?;
    let timesteps = refine3d_core::diffusion::make_timestep_sequence(model.schedule.timesteps, cfg.infer.steps)?;
    Ok(EvalRun {
        predictions,
        per_step,
        timesteps,
    })
}

/// Fastest of `repeats` sequential inference passes, in ms per scene.
pub fn measure_latency(
    model: &Model,
    scenes: &[Scene],
    cfg: &RunConfig,
    repeats: usize,
) -> CliResult<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let props = scenes
        .iter()
        .map(|s| eval_proposals(s, cfg.eval.proposal_seed, &cfg.train.proposals, &cfg.train.scene))
        .collect::<Result<Vec<_>, _>>()?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        for (s, p) in scenes.iter().zip(&props) {
            std::hint::black_box(infer(model, s, p, &cfg.infer)?);
        }
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best / scenes.len() as f64)
}

fn recall_columns(thresholds: &[f64]) -> String {
    thresholds
        .iter()
        .map(|t| format!(",recall_{}", recall_key(*t)))
        .collect()
}

fn recall_values(report: &EvalReport, thresholds: &[f64]) -> String {
    thresholds
        .iter()
        .map(|t| format!(",{}", opt_float(report.recall_at.get(&recall_key(*t)).copied())))
        .collect()
}

pub fn eval_header(recall_ious: &[f64]) -> String {
    format!(
        "row,steps,ensemble,step,t,mean_iou_proposals,mean_iou_predictions{},ap_r40,num_gt,num_predictions,num_matched",
        recall_columns(recall_ious)
    )
}

pub fn eval_csv(run: &EvalRun, cfg: &RunConfig, banner: &str) -> String {
    let rec = &cfg.eval.recall_ious;
    let mut out = String::new();
    writeln!(out, "{banner}").unwrap();
    writeln!(out, "{}", eval_header(rec)).unwrap();
    let row = |out: &mut String, kind: &str, k: usize, r: &EvalReport| {
        writeln!(
            out,
            "{kind},{},{},{},{},{},{}{},{},{},{},{}",
            cfg.infer.steps,
            cfg.infer.ensemble,
            k + 1,
            run.timesteps[k],
            csv_float(r.mean_iou_proposals),
            csv_float(r.mean_iou_predictions),
            recall_values(r, rec),
            opt_float(r.ap_r40),
            r.num_gt,
            r.num_predictions,
            r.num_matched_proposals
        )
        .unwrap();
    };
    for (k, r) in run.per_step.iter().enumerate() {
        row(&mut out, "step", k, r);
    }
    row(&mut out, "final", run.per_step.len() - 1, run.final_report());
    out
}

fn box_json(b: &refine3d_core::boxes::Box3D) -> serde_json::Value {
    serde_json::json!(b.to_array())
}

pub fn trace_jsonl(run: &EvalRun) -> String {
    let mut out = String::new();
    for p in &run.predictions {
        for (i, tr) in p.traces.iter().enumerate() {
            let steps: Vec<_> = tr
                .steps
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "t": s.t,
                        "proposal": box_json(&s.proposal),
                        "hypothesis": box_json(&s.hypothesis),
                        "prediction": box_json(&s.prediction),
                        "ensembled": box_json(&s.ensembled),
                        "confidence": s.confidence,
                        "sigma": s.sigma,
                    })
                })
                .collect();
            let line = serde_json::json!({
                "scene_id": p.scene_id,
                "proposal": i,
                "matched_gt": p.proposals.matched_gt_index[i],
                "initial_iou": p.proposals.ious[i],
                "initial": box_json(&tr.initial),
                "steps": steps,
            });
            writeln!(out, "{line}").unwrap();
        }
    }
    out
}

pub const TIMING_HEADER: &str = "steps,ensemble,scenes,repeats,latency_ms_per_scene";

pub fn eval_cmd(args: &EvalArgs, data_dir: &Path) -> CliResult<(RunManifest, EvalRun)> {
    let mut cfg = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(s) = args.steps {
        cfg.infer.steps = s as usize;
    }
    if let Some(e) = args.ensemble {
        cfg.infer.ensemble = e;
    }
    if let Some(s) = args.seed {
        cfg.infer.seed = s;
    }
    let data = args.data.clone().unwrap_or_else(|| default_eval_corpus(data_dir));
    let out = args.out.clone().unwrap_or_else(|| sidecar(&args.ckpt, "eval.csv"));
    let model = load_model(&args.ckpt)?;
    let scenes = load_corpus(&data)?;

    #[derive(Serialize)]
    struct EvalSnapshot<'a> {
        infer: &'a InferConfig,
        eval: &'a crate::config::EvalConfig,
        proposals: &'a refine3d_core::scene::ProposalSpec,
        scene: &'a refine3d_core::scene::SceneSpec,
    }
    let snapshot = EvalSnapshot {
        infer: &cfg.infer,
        eval: &cfg.eval,
        proposals: &cfg.train.proposals,
        scene: &cfg.train.scene,
    };
    let mut manifest = RunManifest::new(
        "eval",
        &snapshot,
        cfg.infer.seed,
        &[("corpus", &data), ("checkpoint", &args.ckpt)],
    )?;

    let run = run_eval(&model, &scenes, &cfg, args.jobs)?;
    write_file(&out, eval_csv(&run, &cfg, &manifest.csv_banner("eval")).as_bytes())?;
    manifest.outputs.push(out.clone());

    let latency = measure_latency(&model, &scenes, &cfg, cfg.eval.latency_repeats)?;
    let timing_path = sidecar(&out, "timing.csv");
    let timing = format!(
        "{}\n{TIMING_HEADER}\n{},{},{},{},{}\n",
        manifest.csv_banner("eval-timing"),
        cfg.infer.steps,
        cfg.infer.ensemble,
        scenes.len(),
        cfg.eval.latency_repeats,
        csv_float(latency)
    );
    write_file(&timing_path, timing.as_bytes())?;
    manifest.outputs.push(timing_path);

    if let Some(trace) = &args.trace {
        write_file(trace, trace_jsonl(&run).as_bytes())?;
        manifest.outputs.push(trace.clone());
    }
    manifest.write(&sidecar(&out, "manifest.json"))?;
    let f = run.final_report();
    eprintln!(
        "mean IoU {:.4} -> {:.4} over {} matched proposals, {:.2} ms/scene",
        f.mean_iou_proposals, f.mean_iou_predictions, f.num_matched_proposals, latency
    );
    Ok((manifest, run))
}

// sweep

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: String,
    pub cfg: RunConfig,
    pub snr: f64,
    pub enable_tt: bool,
    pub report: EvalReport,
    pub cell_hash: String,
}

pub fn sweep_header(recall_ious: &[f64]) -> String {
    format!(
        "axis,value,steps,ensemble,snr,enable_tt,mean_iou_proposals,mean_iou_predictions,ap_r40{},latency_ms_per_scene,cell",
        recall_columns(recall_ious)
    )
}

fn parse_flag(v: &str) -> CliResult<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("tt value `{v}` is not on/off"))),
    }
}

/// Applies one axis value to a copy of the base configuration.
pub fn cell_config(base: &RunConfig, axis: SweepAxis, value: &str) -> CliResult<RunConfig> {
    let mut cfg = base.clone();
    let bad = |e: String| CliError::Config(format!("--values {value}: {e}"));
    match axis {
        SweepAxis::Snr => cfg.train.diffusion.snr = value.parse().map_err(|e| bad(format!("{e}")))?,
        SweepAxis::Steps => cfg.infer.steps = value.parse().map_err(|e| bad(format!("{e}")))?,
        SweepAxis::Tt => cfg.train.enable_tt = parse_flag(value)?,
        SweepAxis::Ensemble => cfg.infer.ensemble = value.parse().map_err(|e| bad(format!("{e}")))?,
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn sweep(args: &SweepArgs, data_dir: &Path) -> CliResult<(RunManifest, Vec<SweepRow>)> {
    let base = RunConfig::load_or_default(args.config.as_deref())?;
    let values = args.values.clone().unwrap_or_else(|| args.axis.default_values());
    if values.is_empty() {
        return Err(CliError::Config("--values is empty".into()));
    }
    let cells = values
        .iter()
        .map(|v| cell_config(&base, args.axis, v))
        .collect::<CliResult<Vec<_>>>()?;
    let train_data = args.data.clone().unwrap_or_else(|| default_train_corpus(data_dir));
    let eval_data = args.eval_data.clone().unwrap_or_else(|| default_eval_corpus(data_dir));
    let eval_scenes = load_corpus(&eval_data)?;

    let mut inputs: Vec<(&str, &Path)> = vec![("eval_corpus", &eval_data)];
    let shared_ckpt = args.ckpt.as_deref().filter(|_| !args.axis.retrains());
    match shared_ckpt {
        Some(c) => inputs.push(("checkpoint", c)),
        None => inputs.push(("corpus", &train_data)),
    }

    #[derive(Serialize)]
    struct SweepSnapshot<'a> {
        axis: &'a str,
        values: &'a [String],
        base: &'a RunConfig,
    }
    let mut manifest = RunManifest::new(
        "sweep",
        &SweepSnapshot {
            axis: args.axis.name(),
            values: &values,
            base: &base,
        },
        base.train.seed,
        &inputs,
    )?;

    let train_scenes = if shared_ckpt.is_none() {
        load_corpus(&train_data)?
    } else {
        Vec::new()
    };
    let shared = if args.axis.retrains() {
        None
    } else if let Some(c) = shared_ckpt {
        Some(load_model(c)?)
    } else {
        Some(train(&base.train, &train_scenes, |_| {})?.model)
    };

    let workers = pool(args.jobs)?;
    let results: Vec<(Option<Model>, EvalRun)> = workers.install(|| {
        cells
            .par_iter()
            .map(|cfg| {
                let own = match &shared {
                    Some(_) => None,
                    None => Some(train(&cfg.train, &train_scenes, |_| {})?.model),
                };
                let model = own.as_ref().or(shared.as_ref()).expect("a model");
                // cells are already spread over the pool
                let run = run_eval(model, &eval_scenes, cfg, 1)?;
                Ok((own, run))
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let mut csv = String::new();
    writeln!(csv, "{}", manifest.csv_banner("sweep")).unwrap();
    writeln!(csv, "{}", sweep_header(&base.eval.recall_ious)).unwrap();
    let mut rows = Vec::with_capacity(cells.len());
    // timing runs one cell at a time so cells do not compete for cores
    for ((value, cfg), (own, run)) in values.iter().zip(&cells).zip(results) {
        let model = own.as_ref().or(shared.as_ref()).expect("a model");
        let mut report = run.final_report().clone();
        report.latency_ms_per_scene =
            measure_latency(model, &eval_scenes, cfg, cfg.eval.latency_repeats)?;
        let cell = RunManifest::new("sweep-cell", cfg, cfg.train.seed, &inputs)?;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}{},{},{}",
            args.axis.name(),
            value,
            cfg.infer.steps,
            cfg.infer.ensemble,
            csv_float(model.diffusion.snr),
            model.net.cfg.enable_tt,
            csv_float(report.mean_iou_proposals),
            csv_float(report.mean_iou_predictions),
            opt_float(report.ap_r40),
            recall_values(&report, &base.eval.recall_ious),
            csv_float(report.latency_ms_per_scene),
            &cell.hash[..16]
        )
        .unwrap();
        rows.push(SweepRow {
            value: value.clone(),
            cfg: cfg.clone(),
            snr: model.diffusion.snr,
            enable_tt: model.net.cfg.enable_tt,
            report,
            cell_hash: cell.hash,
        });
    }
    write_file(&args.out, csv.as_bytes())?;
    manifest.outputs.push(args.out.clone());
    manifest.write(&sidecar(&args.out, "manifest.json"))?;
    eprintln!("{} axis: {} cells -> {}", args.axis.name(), rows.len(), args.out.display());
    Ok((manifest, rows))
}

// export-tt

pub const TT_HEADER: &str = "t,scale_norm";

pub fn export_tt(args: &ExportTtArgs) -> CliResult<(RunManifest, Vec<(usize, f64)>)> {
    let model = load_model(&args.ckpt)?;
    let last = args.timesteps.unwrap_or(model.schedule.timesteps);
    let ts: Vec<usize> = (1..=last).collect();
    let norms = export_tt_norms(&model, &ts)?;
    let mut manifest = RunManifest::new("export-tt", &last, 0, &[("checkpoint", &args.ckpt)])?;
    let mut csv = String::new();
    writeln!(csv, "{}", manifest.csv_banner("tt-norms")).unwrap();
    writeln!(csv, "{TT_HEADER}").unwrap();
    for (t, n) in &norms {
        writeln!(csv, "{t},{}", csv_float(*n)).unwrap();
    }
    write_file(&args.out, csv.as_bytes())?;
    manifest.outputs.push(args.out.clone());
    manifest.write(&sidecar(&args.out, "manifest.json"))?;
    Ok((manifest, norms))
}
