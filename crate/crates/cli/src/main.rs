//! `clickprobe`: synthesize data, train and evaluate click probes, render
//! reports and features, and serve live sessions.

mod error;
mod output;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use clickprobe::clicks::{next_click_eval, sample_iterative_click, sample_random_clicks, Click, ClickState};
use clickprobe::config::RunConfig;
use clickprobe::data::{
    generate_synthetic, load_dataset, lookup_ingested_features, read_binary_mask, read_rgb, read_tensor_file, write_tensor_file, MANIFEST_FILE,
};
use clickprobe::eval::{aggregate, evaluate_dataset, export_curve, render_report, write_results, ProbeSegmenter, ReportEntry};
use clickprobe::model::{checkpoint_config, ClickEncoderKind, HeadKind, InjectionMode, ProbeModel};
use clickprobe::train::fit_with_features;
use clickprobe::upsample::{FeatureMap, UpsamplerKind};
use serde_json::json;

use crate::error::CliError;
use crate::output::RunDir;

#[derive(Parser)]
#[command(name = "clickprobe", version, about = "Interactive segmentation probes for frozen feature upsamplers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// lowres, bilinear, nearest, jbu or ingested:<tag>.
    #[arg(long, global = true)]
    upsampler: Option<String>,
    /// early, late or separate_upsample.
    #[arg(long, global = true)]
    injection: Option<String>,
    /// linear, simple_conv, conv or multiscale.
    #[arg(long, global = true)]
    head: Option<String>,
    /// patch_embed or simple_vit.
    #[arg(long, global = true)]
    encoder: Option<String>,
    /// Keep clicking to the budget instead of stopping at the top threshold.
    #[arg(long, global = true)]
    full_curve: bool,
    /// Evaluation threads; 0 for one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the output directory.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        first_index: Option<usize>,
    },
    /// Fit the click encoder and head; writes model.ckpt and train_log.jsonl.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the NoC / IoU@k protocol; writes results.jsonl, summary.json, curve.csv.
    Eval {
        /// Row label in reports; defaults to the upsampler name.
        #[arg(long)]
        method: Option<String>,
        /// Dataset label in reports; defaults to the dataset directory name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        max_clicks: Option<usize>,
    },
    /// Tabulate eval summaries (files or run directories).
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write the frozen features of one image after the chosen upsampler.
    Upsample {
        #[arg(long)]
        image: PathBuf,
    },
    /// Render the PCA view of one image's features as a PNG.
    VizFeatures {
        #[arg(long)]
        image: PathBuf,
        /// Tensor file with precomputed stride-1 features (ingested kinds).
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Print the click a protocol would issue for a prediction and ground truth.
    SimulateClicks {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        /// eval (deterministic), iterative (training corrective) or random (initial training clicks).
        #[arg(long, default_value = "eval")]
        protocol: String,
    },
    /// Serve live segmentation sessions over HTTP.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
        /// Directory holding `<id>.ckpt` checkpoints; defaults to the --checkpoint file's directory.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
            Command::Upsample { .. } => "upsample",
            Command::VizFeatures { .. } => "viz-features",
            Command::SimulateClicks { .. } => "simulate-clicks",
            Command::Serve { .. } => "serve",
        }
    }
}

fn parse_flag<T: std::str::FromStr>(flag: &str, v: &Option<String>) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    v.as_deref().map(|s| s.parse::<T>().map_err(|e| CliError::Config(format!("--{flag}: {e}")))).transpose()
}

fn resolve_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.train.seed = s;
    }
    if let Some(u) = parse_flag::<UpsamplerKind>("upsampler", &c.upsampler)? {
        cfg.model.upsampler = u;
    }
    if let Some(i) = parse_flag::<InjectionMode>("injection", &c.injection)? {
        cfg.model.injection = i;
    }
    if let Some(h) = parse_flag::<HeadKind>("head", &c.head)? {
        cfg.model.head.kind = h;
    }
    if let Some(e) = parse_flag::<ClickEncoderKind>("encoder", &c.encoder)? {
        cfg.model.encoder.kind = e;
    }
    if c.full_curve {
        cfg.eval.full_curve = true;
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(d) = &c.dataset {
        cfg.paths.dataset = Some(d.clone());
    }
    if let Some(k) = &c.checkpoint {
        cfg.paths.checkpoint = Some(k.clone());
    }
    if let Some(o) = &c.out {
        cfg.paths.out = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, command: &str) -> PathBuf {
    cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("no {what} given (use --{flag} or the config file)")))
}

fn exists(p: &Path) -> Result<&Path, CliError> {
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Missing(p.to_path_buf()))
    }
}

/// The checkpoint's model with any upsampler or injection flag applied.
fn load_checkpoint(path: &Path, c: &Common) -> Result<ProbeModel<f32>, CliError> {
    let map = read_tensor_file(exists(path)?)?;
    let mut mcfg = checkpoint_config(&map)?;
    if let Some(u) = parse_flag::<UpsamplerKind>("upsampler", &c.upsampler)? {
        mcfg.upsampler = u;
    }
    if let Some(i) = parse_flag::<InjectionMode>("injection", &c.injection)? {
        mcfg.injection = i;
    }
    let mut model = ProbeModel::new(mcfg)?;
    model.load_params(&map)?;
    Ok(model)
}

fn print_json(v: serde_json::Value) {
    println!("{v}");
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut cfg = resolve_config(c)?;
    let name = cli.command.name();
    match cli.command {
        Command::Synth { n, resolution, first_index } => {
            if let Some(n) = n {
                cfg.synth.n_images = n;
            }
            if let Some(r) = resolution {
                cfg.synth.resolution = r;
            }
            if let Some(f) = first_index {
                cfg.synth.first_index = f;
            }
            cfg.validate()?;
            let out = out_dir(&cfg, name);
            let mut run = RunDir::create(&out, name, &cfg)?;
            let entries = generate_synthetic(&out, &cfg.synth)?;
            run.record(&out.join(MANIFEST_FILE));
            for e in &entries {
                run.record(&out.join(&e.image_path));
                run.record(&out.join(&e.mask_path));
            }
            run.finish()?;
            print_json(json!({ "command": name, "instances": entries.len(), "dataset": out }));
        }
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let dir = exists(require(&cfg.paths.dataset, "training dataset", "dataset")?)?.to_path_buf();
            let data = load_dataset(&dir)?;
            let mut model = ProbeModel::<f32>::new(cfg.model.clone())?;
            let out = out_dir(&cfg, name);
            let mut run = RunDir::create(&out, name, &cfg)?;
            let log_path = run.path("train_log.jsonl");
            let mut log_file = std::fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
            let epochs = cfg.train.epochs;
            let features = match &cfg.model.upsampler {
                UpsamplerKind::Ingested(tag) => Some(
                    data.iter()
                        .map(|inst| lookup_ingested_features(&dir, &inst.id, tag, inst.gt.dims()))
                        .collect::<Result<Vec<_>, _>>()?,
                ),
                _ => None,
            };
            let history = fit_with_features(&mut model, &data, features.as_deref(), &cfg.train, Some(&mut log_file), |e| {
                eprintln!("epoch {}/{epochs} loss {:.4} lr {:e} {} ms", e.epoch, e.mean_loss, e.lr, e.wall_ms);
            })?;
            log_file.flush().map_err(|e| CliError::io(&log_path, e))?;
            run.record(&log_path);
            let ckpt = run.path("model.ckpt");
            model.save(&ckpt)?;
            run.record(&ckpt);
            run.finish()?;
            print_json(json!({
                "command": name,
                "checkpoint": ckpt,
                "first_loss": history.first().map(|e| e.mean_loss),
                "last_loss": history.last().map(|e| e.mean_loss),
            }));
        }
        Command::Eval { method, name: label, max_clicks } => {
            if let Some(m) = max_clicks {
                cfg.eval.max_clicks = m;
            }
            let ckpt = require(&cfg.paths.checkpoint, "checkpoint", "checkpoint")?.to_path_buf();
            let model = load_checkpoint(&ckpt, c)?;
            cfg.model = model.config().clone();
            cfg.validate()?;
            let dir = c
                .dataset
                .clone()
                .or_else(|| cfg.paths.eval_dataset.clone())
                .or_else(|| cfg.paths.dataset.clone());
            let dir = exists(require(&dir, "evaluation dataset", "dataset")?)?.to_path_buf();
            let data = load_dataset(&dir)?;
            let workers = cfg.resolved_workers();
            let method = method.unwrap_or_else(|| cfg.model.upsampler.to_string());
            let label = label.unwrap_or_else(|| dir.file_name().map_or("dataset".into(), |s| s.to_string_lossy().into_owned()));
            let seg = ProbeSegmenter::new(model, Some(dir.clone()));

            let out = out_dir(&cfg, name);
            let mut run = RunDir::create(&out, name, &cfg)?;
            let records = evaluate_dataset(&seg, &data, &cfg.eval, workers)?;
            let results = run.path("results.jsonl");
            write_results(&results, &records)?;
            run.record(&results);
            let agg = aggregate(&records, &cfg.eval)?;
            let entry = ReportEntry { method: method.clone(), dataset: label.clone(), aggregate: agg.clone() };
            run.write("summary.json", serde_json::to_string_pretty(&entry).expect("serializable").as_bytes())?;
            run.write("curve.csv", export_curve(&[(method.clone(), agg.clone())]).as_bytes())?;
            run.finish()?;
            print_json(json!({
                "command": name,
                "method": method,
                "dataset": label,
                "instances": agg.instances,
                "skipped": agg.skipped,
                "noc": agg.noc,
                "iou@1": agg.iou_at(1),
            }));
        }
        Command::Report { inputs } => {
            let mut entries = Vec::new();
            for p in &inputs {
                let file = if p.is_dir() { p.join("summary.json") } else { p.clone() };
                let text = std::fs::read_to_string(&file).map_err(|e| CliError::io(&file, e))?;
                let e: ReportEntry = serde_json::from_str(&text)
                    .map_err(|e| clickprobe::Error::Format(format!("{}: {e}", file.display())))?;
                entries.push(e);
            }
            let report = render_report(&entries);
            let series: Vec<(String, _)> =
                entries.iter().map(|e| (format!("{}/{}", e.method, e.dataset), e.aggregate.clone())).collect();
            let out = out_dir(&cfg, name);
            let mut run = RunDir::create(&out, name, &cfg)?;
            run.write("report.txt", report.text.as_bytes())?;
            run.write("report.tex", report.latex.as_bytes())?;
            run.write("report.json", report.json.as_bytes())?;
            run.write("curves.csv", export_curve(&series).as_bytes())?;
            run.finish()?;
            print!("{}", report.text);
        }
        Command::Upsample { image } => {
            cfg.validate()?;
            let img = read_rgb(exists(&image)?)?;
            let model = match &cfg.paths.checkpoint {
                Some(p) => load_checkpoint(p, c)?,
                None => ProbeModel::new(cfg.model.clone())?,
            };
            let kind = model.config().upsampler.clone();
            let feats = model.upsampled_features(&img, &kind)?;
            let (ch, h, w) = feats.dims()?;
            let out = out_dir(&cfg, name);
            let mut run = RunDir::create(&out, name, &cfg)?;
            let path = run.path("features.feat");
            write_tensor_file(&path, [("features", &feats.data)])?;
            run.record(&path);
            run.finish()?;
            print_json(json!({ "command": name, "upsampler": kind.to_string(), "shape": [ch, h, w], "stride": feats.stride, "file": path }));
        }
        Command::VizFeatures { image, features } => {
            cfg.validate()?;
            let img = read_rgb(exists(&image)?)?;
            let model = match &cfg.paths.checkpoint {
                Some(p) => load_checkpoint(p, c)?,
                None => ProbeModel::new(cfg.model.clone())?,
            };
            let kind = model.config().upsampler.clone();
            let ingested = match &features {
                Some(p) => {
                    let map = read_tensor_file(exists(p)?)?;
                    let t = map
                        .into_values()
                        .next()
                        .ok_or_else(|| clickprobe::Error::Format(format!("{} holds no tensors", p.display())))?;
                    Some(FeatureMap::ingested(t))
                }
                None => None,
            };
            let rgb = model.visualize_features(&img, &kind, ingested.as_ref())?;
            let out = out_dir(&cfg, name);
            let mut run = RunDir::create(&out, name, &cfg)?;
            let path = run.write("features.png", &clickprobe::data::rgb_png(&rgb)?)?;
            run.finish()?;
            print_json(json!({ "command": name, "upsampler": kind.to_string(), "file": path }));
        }
        Command::SimulateClicks { gt, pred, protocol } => {
            cfg.validate()?;
            let gt = read_binary_mask(exists(&gt)?)?;
            let pred_mask = match &pred {
                Some(p) => Some(read_binary_mask(exists(p)?)?),
                None => None,
            };
            let needs_pred = || pred_mask.clone().ok_or_else(|| CliError::Config(format!("--protocol {protocol} needs --pred")));
            let clicks: Vec<Click> = match protocol.as_str() {
                "eval" => {
                    let (h, w) = gt.dims();
                    vec![next_click_eval(&needs_pred()?, &gt, &ClickState::new(h, w))?]
                }
                "iterative" => vec![sample_iterative_click(&needs_pred()?, &gt, cfg.seed)?],
                "random" => sample_random_clicks(&gt, cfg.seed, &cfg.train.clicks)?.clicks().to_vec(),
                other => return Err(CliError::Config(format!("unknown protocol {other:?}; expected eval, iterative or random"))),
            };
            let rows: Vec<serde_json::Value> =
                clicks.iter().map(|k| json!({ "row": k.row, "col": k.col, "positive": k.positive })).collect();
            if c.out.is_some() {
                let out = out_dir(&cfg, name);
                let mut run = RunDir::create(&out, name, &cfg)?;
                run.write("clicks.json", serde_json::to_string_pretty(&rows).expect("serializable").as_bytes())?;
                run.finish()?;
            }
            for r in rows {
                print_json(r);
            }
        }
        Command::Serve { port, host, checkpoint_dir, static_dir } => {
            cfg.validate()?;
            let mut s = cfg.serve.clone();
            if let Some(p) = port {
                s.port = p;
            }
            if let Some(h) = host {
                s.host = h;
            }
            s.checkpoint_dir = checkpoint_dir
                .or(s.checkpoint_dir)
                .or_else(|| cfg.paths.checkpoint.as_deref().and_then(Path::parent).map(Path::to_path_buf));
            if let Some(d) = static_dir {
                s.static_dir = Some(d);
            }
            let dataset = cfg.paths.dataset.clone().or_else(|| cfg.paths.eval_dataset.clone());
            for d in [&s.checkpoint_dir, &s.static_dir, &dataset].into_iter().flatten() {
                exists(d)?;
            }
            clickprobe_serve::run(s, dataset).map_err(CliError::Serve)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", CliError::Usage(line.trim_start_matches("error: ").to_string()).json_line());
            std::process::exit(2);
        }
    };
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("{}", e.json_line());
        std::process::exit(e.exit_code());
    }
}
