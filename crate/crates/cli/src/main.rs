use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use zoomseg::audit::{audit_one, group_runs, read_audit_inputs, write_jsonl};
use zoomseg::backends::{HttpPolicy, HttpSegmenter, OracleLpr, PolicyBackend};
use zoomseg::config::EngineConfig;
use zoomseg::dataset::{read_manifest, stats, synth_generate, synth_render, write_manifest, SampleRecord};
use zoomseg::metrics::{evaluate, render_report, PredictionRecord, ReportFormat};
use zoomseg::pipeline::{run_batch, Backends};
use zoomseg::retrospective::{ablation_random_label, label_records};
use zoomseg::simulate::{oracle_backends, simulate};

const EXIT_FINDINGS: u8 = 1;
const EXIT_OPERATIONAL: u8 = 2;
const EXIT_INTERRUPTED: u8 = 130;
const EXIT_USAGE: u8 = 64;

static CANCEL: AtomicBool = AtomicBool::new(false);

#[derive(Parser, Debug)]
#[command(name = "zoomseg", version, about = "Two-stage zoom-in segmentation and VQA engine")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML or JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `rewards.point_thresh=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory for machine-readable artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    /// Samples in flight at once.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    #[arg(long, global = true)]
    backend_policy_url: Option<String>,
    #[arg(long, global = true)]
    backend_seg_url: Option<String>,
    /// Use scripted backends built from the ground truth instead of HTTP.
    #[arg(long, global = true)]
    mock: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a manifest and list every problem.
    ValidateDataset { manifest: PathBuf },
    /// Counts per task, attribute, size, spatial bucket and split.
    Stats { manifest: PathBuf },
    /// Generate a synthetic manifest, optionally with images.
    Synth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        render: bool,
    },
    /// Run both stages and the segmenter over a manifest.
    RunPipeline {
        manifest: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
    },
    /// Score predictions against a manifest.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Pick a ground-truth region per sample with the local policy.
    LabelRegions {
        manifest: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// One random covering region per sample, no policy queries.
        #[arg(long)]
        random: bool,
    },
    /// Score logged completions and optionally group advantages.
    RewardAudit {
        /// JSON-lines rollout log, `-` for stdin.
        log: PathBuf,
        #[arg(long)]
        advantages: bool,
    },
    /// Synthetic data through oracle backends, end to end.
    Simulate {
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ValidateDataset { .. } => "validate-dataset",
            Command::Stats { .. } => "stats",
            Command::Synth { .. } => "synth",
            Command::RunPipeline { .. } => "run-pipeline",
            Command::Evaluate { .. } => "evaluate",
            Command::LabelRegions { .. } => "label-regions",
            Command::RewardAudit { .. } => "reward-audit",
            Command::Simulate { .. } => "simulate",
        }
    }
}

struct Ctx {
    cfg: EngineConfig,
    seed: u64,
    out: Option<PathBuf>,
    mock: bool,
}

impl Ctx {
    fn out_path(&self, name: &str) -> Option<PathBuf> {
        self.out.as_ref().map(|d| d.join(name))
    }

    fn write(&self, name: &str, content: &str) -> Result<()> {
        if let Some(p) = self.out_path(name) {
            std::fs::write(&p, content).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }

    fn write_jsonl<T: serde::Serialize>(&self, name: &str, items: &[T]) -> Result<()> {
        if let Some(p) = self.out_path(name) {
            let mut w = BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?);
            write_jsonl(&mut w, items)?;
            w.flush()?;
        }
        Ok(())
    }

    fn write_run(&self, command: &str) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.backends.bearer_token = None;
        let run = json!({
            "command": command,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": cfg,
        });
        self.write("run.json", &(serde_json::to_string_pretty(&run)? + "\n"))
    }
}

fn load_config(g: &Global) -> Result<EngineConfig> {
    let base = match &g.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    let mut cfg = base.with_overrides(&g.overrides)?.with_env();
    if let Some(u) = &g.backend_policy_url {
        cfg.backends.policy_url = Some(u.clone());
    }
    if let Some(u) = &g.backend_seg_url {
        cfg.backends.seg_url = Some(u.clone());
    }
    if let Some(c) = g.concurrency {
        cfg.pipeline.concurrency_cap = c;
        cfg.backends.max_in_flight = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>> {
    if path == Path::new("-") {
        return Ok(Box::new(BufReader::new(io::stdin())));
    }
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Box::new(BufReader::new(f)))
}

fn load_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let (records, findings) = read_manifest(open_input(path)?)?;
    if let Some(f) = findings.first() {
        bail!("{}: {} invalid record(s); first: {f}", path.display(), findings.len());
    }
    Ok(records)
}

fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in open_input(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn http_policy(cfg: &EngineConfig) -> Result<Arc<dyn PolicyBackend>> {
    if cfg.backends.policy_url.is_none() {
        bail!("no policy backend: pass --backend-policy-url, set backends.policy_url, or use --mock");
    }
    Ok(Arc::new(HttpPolicy::new(&cfg.backends)?))
}

fn http_backends(cfg: &EngineConfig) -> Result<Backends> {
    let policy = http_policy(cfg)?;
    if cfg.backends.seg_url.is_none() {
        bail!("no segmenter backend: pass --backend-seg-url, set backends.seg_url, or use --mock");
    }
    Ok(Backends { gse: policy.clone(), lpr: policy, segmenter: Arc::new(HttpSegmenter::new(&cfg.backends)?) })
}

/// Predictions without traces, and traces keyed by sample id.
fn write_predictions(ctx: &Ctx, preds: &[PredictionRecord]) -> Result<()> {
    let bare: Vec<PredictionRecord> =
        preds.iter().map(|p| PredictionRecord { stage_trace: None, ..p.clone() }).collect();
    let traces: Vec<_> = preds
        .iter()
        .filter_map(|p| p.stage_trace.as_ref().map(|t| json!({"sample_id": p.sample_id, "trace": t})))
        .collect();
    ctx.write_jsonl("predictions.jsonl", &bare)?;
    ctx.write_jsonl("traces.jsonl", &traces)
}

fn write_reports(ctx: &Ctx, report: &zoomseg::metrics::EvalReport) -> Result<()> {
    ctx.write("report.json", &render_report(report, ReportFormat::Json))?;
    ctx.write("report.txt", &render_report(report, ReportFormat::Text))?;
    ctx.write("report.csv", &render_report(report, ReportFormat::Csv))
}

fn dispatch(cmd: &Command, ctx: &Ctx) -> Result<u8> {
    match cmd {
        Command::ValidateDataset { manifest } => {
            let (records, findings) = read_manifest(open_input(manifest)?)?;
            for f in &findings {
                println!("{f}");
            }
            println!("{} valid record(s), {} finding(s)", records.len(), findings.len());
            ctx.write_jsonl("findings.jsonl", &findings)?;
            Ok(if findings.is_empty() { 0 } else { EXIT_FINDINGS })
        }
        Command::Stats { manifest } => {
            let report = stats(&load_records(manifest)?);
            let csv = report.to_csv();
            print!("{csv}");
            ctx.write("stats.csv", &csv)?;
            ctx.write("stats.json", &(serde_json::to_string_pretty(&report)? + "\n"))?;
            Ok(0)
        }
        Command::Synth { n, render } => {
            let Some(dir) = &ctx.out else { bail!("synth needs --out") };
            let scenes = synth_generate(*n, ctx.seed, &ctx.cfg.synth);
            let records: Vec<SampleRecord> = scenes.iter().map(|s| s.record.clone()).collect();
            let mut w = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
            write_manifest(&mut w, &records)?;
            w.flush()?;
            if *render {
                for s in &scenes {
                    if CANCEL.load(Ordering::Relaxed) {
                        return Ok(EXIT_INTERRUPTED);
                    }
                    let p = dir.join(&s.record.image_path);
                    if let Some(parent) = p.parent() {
                        std::fs::create_dir_all(parent)?;
                    }
                    synth_render(s, ctx.seed).save(&p).with_context(|| format!("writing {}", p.display()))?;
                }
            }
            println!("wrote {} record(s) to {}", records.len(), dir.display());
            Ok(0)
        }
        Command::RunPipeline { manifest, image_root } => {
            let records = load_records(manifest)?;
            let mut pcfg = ctx.cfg.pipeline.clone();
            if image_root.is_some() {
                pcfg.image_root = image_root.clone();
            }
            let backends = if ctx.mock { oracle_backends(&records, &ctx.cfg)? } else { http_backends(&ctx.cfg)? };
            let results = run_batch(&records, &pcfg, &backends, &CANCEL);
            let mut preds = Vec::new();
            let mut done = Vec::new();
            let mut errors = Vec::new();
            for (r, res) in records.iter().zip(results) {
                match res {
                    Ok(p) => {
                        preds.push(p);
                        done.push(r.clone());
                    }
                    Err(e) => errors.push(json!({"sample_id": r.id, "error": e.to_string()})),
                }
            }
            write_predictions(ctx, &preds)?;
            ctx.write_jsonl("errors.jsonl", &errors)?;
            let (report, _) = evaluate(&preds, &done, &ctx.cfg.metrics, Some(ctx.seed))?;
            write_reports(ctx, &report)?;
            print!("{}", render_report(&report, ReportFormat::Text));
            if CANCEL.load(Ordering::Relaxed) {
                return Ok(EXIT_INTERRUPTED);
            }
            if !errors.is_empty() {
                eprintln!("{} sample(s) failed; see errors.jsonl", errors.len());
                return Ok(EXIT_OPERATIONAL);
            }
            Ok(0)
        }
        Command::Evaluate { predictions, manifest, format } => {
            let preds = load_predictions(predictions)?;
            let records = load_records(manifest)?;
            let (report, diff) = evaluate(&preds, &records, &ctx.cfg.metrics, Some(ctx.seed))?;
            write_reports(ctx, &report)?;
            print!("{}", render_report(&report, (*format).into()));
            if !diff.is_empty() {
                for id in &diff.missing_predictions {
                    eprintln!("missing prediction: {id}");
                }
                for id in &diff.unknown_predictions {
                    eprintln!("unknown prediction: {id}");
                }
                ctx.write("id_diff.json", &(serde_json::to_string_pretty(&diff)? + "\n"))?;
                return Ok(EXIT_FINDINGS);
            }
            Ok(0)
        }
        Command::LabelRegions { manifest, image_root, random } => {
            let records = load_records(manifest)?;
            let root = image_root.clone().or_else(|| ctx.cfg.pipeline.image_root.clone());
            let lcfg = &ctx.cfg.labeler;
            let results = if *random {
                records
                    .iter()
                    .map(|r| {
                        let gt = r.gt_bbox().map_err(zoomseg::retrospective::LabelError::from)?;
                        ablation_random_label(&r.id, &gt, lcfg.side, zoomseg::derive_seed(ctx.seed, &r.id), lcfg)
                    })
                    .collect()
            } else {
                let lpr: Arc<dyn PolicyBackend> = if ctx.mock {
                    let truths = records
                        .iter()
                        .map(|r| {
                            Ok((
                                r.id.clone(),
                                zoomseg::backends::OracleTruth::from_mask(r.mask.clone(), r.reference_response())?,
                            ))
                        })
                        .collect::<Result<_>>()?;
                    Arc::new(OracleLpr::new(Arc::new(truths), ctx.cfg.backends.mock_lpr_margin))
                } else {
                    http_policy(&ctx.cfg)?
                };
                label_records(&records, root.as_deref(), lpr.as_ref(), &ctx.cfg.pipeline.prompts, lcfg, ctx.seed)
            };
            let mut labels = Vec::new();
            let mut errors = Vec::new();
            for (r, res) in records.iter().zip(results) {
                match res {
                    Ok(l) => labels.push(l),
                    Err(e) => errors.push(json!({"sample_id": r.id, "error": e.to_string()})),
                }
            }
            if ctx.out.is_some() {
                ctx.write_jsonl("labels.jsonl", &labels)?;
                ctx.write_jsonl("errors.jsonl", &errors)?;
            } else {
                write_jsonl(io::stdout().lock(), &labels)?;
            }
            let low = labels.iter().filter(|l| l.low_confidence).count();
            eprintln!("{} label(s), {} low-confidence, {} error(s)", labels.len(), low, errors.len());
            Ok(if errors.is_empty() { 0 } else { EXIT_OPERATIONAL })
        }
        Command::RewardAudit { log, advantages } => {
            let inputs = read_audit_inputs(open_input(log)?)?;
            let outputs = inputs.iter().map(|i| audit_one(i, &ctx.cfg.rewards)).collect::<Result<Vec<_>, _>>()?;
            if ctx.out.is_some() {
                ctx.write_jsonl("audit.jsonl", &outputs)?;
            } else {
                write_jsonl(io::stdout().lock(), &outputs)?;
            }
            if *advantages {
                let groups = group_runs(&outputs, &ctx.cfg.grpo, Some(ctx.seed))?;
                if ctx.out.is_some() {
                    ctx.write_jsonl("advantages.jsonl", &groups)?;
                } else {
                    write_jsonl(io::stdout().lock(), &groups)?;
                }
            }
            Ok(0)
        }
        Command::Simulate { n } => {
            let sim = simulate(*n, ctx.seed, &ctx.cfg, &CANCEL)?;
            if let Some(dir) = &ctx.out {
                let mut w = BufWriter::new(File::create(dir.join("manifest.jsonl"))?);
                write_manifest(&mut w, &sim.records)?;
                w.flush()?;
            }
            write_predictions(ctx, &sim.predictions)?;
            write_reports(ctx, &sim.report)?;
            print!("{}", render_report(&sim.report, ReportFormat::Text));
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    if let Err(e) = ctrlc::set_handler(|| CANCEL.store(true, Ordering::Relaxed)) {
        log::warn!("no Ctrl-C handler: {e}");
    }
    let run = || -> Result<u8> {
        let cfg = load_config(&cli.global)?;
        if let Some(dir) = &cli.global.out {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let ctx = Ctx { cfg, seed: cli.global.seed, out: cli.global.out.clone(), mock: cli.global.mock };
        ctx.write_run(cli.command.name())?;
        dispatch(&cli.command, &ctx)
    };
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_OPERATIONAL)
        }
    }
}
