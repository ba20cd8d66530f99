//! Simulated click-by-click evaluation, NoC / IoU@k aggregation and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::clicks::{iou, next_click_eval, BinaryMask, ClickState};
use crate::data::{lookup_ingested_features, Instance};
use crate::model::{Context, ProbeModel};
use crate::tensor::Float;
use crate::upsample::UpsamplerKind;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub max_clicks: usize,
    pub thresholds: Vec<f64>,
    pub prob_threshold: f64,
    /// Keep clicking after every threshold is met.
    pub full_curve: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_clicks: 20, thresholds: vec![0.80, 0.85, 0.90], prob_threshold: 0.5, full_curve: false }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_clicks == 0 {
            return Err(Error::Config("max_clicks must be at least 1".into()));
        }
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!("thresholds must be strictly ascending in (0, 1): {:?}", self.thresholds)));
        }
        if !(0.0..1.0).contains(&self.prob_threshold) {
            return Err(Error::Config(format!("prob_threshold {} is outside [0, 1)", self.prob_threshold)));
        }
        Ok(())
    }
}

/// Map key for a threshold: `0.85 -> "0.85"`.
pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Something that turns clicks into a probability map.
pub trait Segmenter: Sync {
    type Context;
    fn prepare(&self, instance: &Instance) -> Result<Self::Context>;
    /// Row-major probabilities, one per image pixel.
    fn predict(&self, ctx: &mut Self::Context, clicks: &ClickState) -> Result<Vec<f32>>;
}

/// A probe model plus where to find ingested features, if it needs them.
pub struct ProbeSegmenter<T: Float = f32> {
    pub model: ProbeModel<T>,
    pub dataset_dir: Option<PathBuf>,
}

impl<T: Float> ProbeSegmenter<T> {
    pub fn new(model: ProbeModel<T>, dataset_dir: Option<PathBuf>) -> Self {
        ProbeSegmenter { model, dataset_dir }
    }
}

impl<T: Float> Segmenter for ProbeSegmenter<T> {
    type Context = Context<T>;

    fn prepare(&self, instance: &Instance) -> Result<Context<T>> {
        match &self.model.config().upsampler {
            UpsamplerKind::Ingested(tag) => {
                let dir = self
                    .dataset_dir
                    .as_deref()
                    .ok_or_else(|| Error::Ingestion("ingested features need a dataset directory".into()))?;
                let (_, h, w) = instance.image.dims3()?;
                let feats = lookup_ingested_features(dir, &instance.id, tag, (h, w))?;
                self.model.prepare(&instance.image, Some(&feats))
            }
            _ => self.model.prepare(&instance.image, None),
        }
    }

    fn predict(&self, ctx: &mut Context<T>, clicks: &ClickState) -> Result<Vec<f32>> {
        self.model.predict(ctx, clicks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// IoU after each issued click.
    pub ious: Vec<f64>,
    pub noc: BTreeMap<String, usize>,
    pub failed: BTreeMap<String, bool>,
    /// Reason the instance was not evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

impl EvalRecord {
    /// Fill `noc` and `failed` from the IoU trajectory.
    pub fn from_ious(id: impl Into<String>, ious: Vec<f64>, cfg: &EvalConfig) -> Self {
        let mut noc = BTreeMap::new();
        let mut failed = BTreeMap::new();
        for &t in &cfg.thresholds {
            let hit = ious.iter().position(|&v| v >= t);
            noc.insert(threshold_key(t), hit.map_or(cfg.max_clicks, |k| k + 1));
            failed.insert(threshold_key(t), hit.is_none());
        }
        EvalRecord { id: id.into(), ious, noc, failed, skipped: None }
    }
}

/// Run the clicking protocol on one instance: each click goes to the
/// interior of the largest error region of the current binarized prediction.
pub fn evaluate_instance<S: Segmenter>(model: &S, instance: &Instance, cfg: &EvalConfig) -> Result<EvalRecord> {
    let gt = &instance.gt;
    if gt.is_empty() {
        log::warn!("skipping {}: empty ground truth", instance.id);
        return Ok(EvalRecord {
            id: instance.id.clone(),
            ious: Vec::new(),
            noc: BTreeMap::new(),
            failed: BTreeMap::new(),
            skipped: Some("empty ground truth".into()),
        });
    }
    let (h, w) = gt.dims();
    let mut ctx = model.prepare(instance)?;
    let mut state = ClickState::new(h, w);
    let mut pred = BinaryMask::empty(h, w);
    let mut ious = Vec::with_capacity(cfg.max_clicks);
    let top = cfg.thresholds.iter().cloned().fold(f64::MIN, f64::max);
    for _ in 0..cfg.max_clicks {
        let click = match next_click_eval(&pred, gt, &state) {
            Ok(c) => c,
            Err(Error::NoErrorRegion) => break,
            Err(e) => return Err(e),
        };
        state.push(click)?;
        let probs = model.predict(&mut ctx, &state)?;
        if probs.len() != h * w {
            return Err(Error::shape(format!("model returned {} probabilities for a {h}x{w} image", probs.len())));
        }
        state.set_prev_prob(&probs)?;
        pred = BinaryMask::from_probs(h, w, &probs, cfg.prob_threshold)?;
        let v = iou(&pred, gt)?;
        ious.push(v);
        if !cfg.full_curve && v >= top {
            break;
        }
    }
    Ok(EvalRecord::from_ious(instance.id.clone(), ious, cfg))
}

/// Evaluate every instance on `workers` threads. Results come back in the
/// order of `instances`, independent of scheduling.
pub fn evaluate_dataset<S: Segmenter>(model: &S, instances: &[Instance], cfg: &EvalConfig, workers: usize) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    let slots: Vec<Mutex<Option<Result<EvalRecord>>>> = instances.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= instances.len() {
            break;
        }
        let r = evaluate_instance(model, &instances[i], cfg);
        *slots[i].lock().expect("slot lock") = Some(r);
    };
    let workers = workers.clamp(1, instances.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every instance visited"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub instances: usize,
    pub skipped: usize,
    /// Mean clicks to reach each threshold; failures count as `max_clicks`.
    pub noc: BTreeMap<String, f64>,
    pub failures: BTreeMap<String, usize>,
    /// Mean IoU after k clicks for k = 1..=max_clicks, the last value carried
    /// forward when an instance stopped early.
    pub iou_curve: Vec<f64>,
}

impl Aggregate {
    pub fn iou_at(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.iou_curve.get(i)).copied()
    }

    pub fn noc_at(&self, t: f64) -> Option<f64> {
        self.noc.get(&threshold_key(t)).copied()
    }
}

pub fn aggregate(records: &[EvalRecord], cfg: &EvalConfig) -> Result<Aggregate> {
    let valid: Vec<&EvalRecord> = records.iter().filter(|r| r.skipped.is_none()).collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("no evaluated instances to aggregate".into()));
    }
    let n = valid.len() as f64;
    let mut noc = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for &t in &cfg.thresholds {
        let key = threshold_key(t);
        let mut sum = 0.0;
        let mut fails = 0;
        for r in &valid {
            let failed = r.failed.get(&key).copied().unwrap_or(true);
            sum += if failed { cfg.max_clicks as f64 } else { r.noc.get(&key).copied().unwrap_or(cfg.max_clicks) as f64 };
            fails += usize::from(failed);
        }
        noc.insert(key.clone(), sum / n);
        failures.insert(key, fails);
    }
    let iou_curve = (1..=cfg.max_clicks)
        .map(|k| {
            valid
                .iter()
                .map(|r| match r.ious.len() {
                    0 => 0.0,
                    len => r.ious[k.min(len) - 1],
                })
                .sum::<f64>()
                / n
        })
        .collect();
    Ok(Aggregate { instances: valid.len(), skipped: records.len() - valid.len(), noc, failures, iou_curve })
}

/// One cell group of a report: a method evaluated on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub method: String,
    pub dataset: String,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub latex: String,
    pub json: String,
}

const REPORT_THRESHOLDS: [f64; 3] = [0.80, 0.85, 0.90];

fn cells(a: Option<&Aggregate>) -> [String; 4] {
    match a {
        Some(a) => {
            let noc = |t: f64| a.noc_at(t).map_or("-".to_string(), |v| format!("{v:.2}"));
            let iou1 = a.iou_at(1).map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
            [noc(REPORT_THRESHOLDS[0]), noc(REPORT_THRESHOLDS[1]), noc(REPORT_THRESHOLDS[2]), iou1]
        }
        None => ["-".into(), "-".into(), "-".into(), "-".into()],
    }
}

/// Methods as rows, datasets as groups of NoC80 / NoC85 / NoC90 / IoU@1
/// columns, both in first-appearance order. IoU is shown in percent.
pub fn render_report(entries: &[ReportEntry]) -> Report {
    let mut methods: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for e in entries {
        if !methods.contains(&e.method.as_str()) {
            methods.push(&e.method);
        }
        if !datasets.contains(&e.dataset.as_str()) {
            datasets.push(&e.dataset);
        }
    }
    let lookup = |m: &str, d: &str| entries.iter().find(|e| e.method == m && e.dataset == d).map(|e| &e.aggregate);
    let name_w = methods.iter().map(|m| m.len()).chain(["Method".len()]).max().unwrap_or(6);
    const COLS: [&str; 4] = ["NoC80", "NoC85", "NoC90", "IoU@1"];
    let group_w = 4 * 7 - 1;

    let mut text = String::new();
    let _ = write!(text, "{:<name_w$}", "Method");
    for d in &datasets {
        let _ = write!(text, " | {d:<group_w$}");
    }
    text.push('\n');
    let _ = write!(text, "{:<name_w$}", "");
    for _ in &datasets {
        let _ = write!(text, " | {}", COLS.iter().map(|c| format!("{c:>6}")).collect::<Vec<_>>().join(" "));
    }
    text.push('\n');
    for m in &methods {
        let _ = write!(text, "{m:<name_w$}");
        for d in &datasets {
            let c = cells(lookup(m, d));
            let _ = write!(text, " | {}", c.iter().map(|v| format!("{v:>6}")).collect::<Vec<_>>().join(" "));
        }
        text.push('\n');
    }

    let mut latex = String::new();
    let _ = writeln!(latex, "\\begin{{tabular}}{{l{}}}", "|cccc".repeat(datasets.len()));
    let _ = writeln!(latex, "\\toprule");
    let _ = write!(latex, "Method");
    for d in &datasets {
        let _ = write!(latex, " & \\multicolumn{{4}}{{c}}{{{d}}}");
    }
    latex.push_str(" \\\\\n");
    for _ in &datasets {
        latex.push_str(" & NoC80 & NoC85 & NoC90 & IoU@1");
    }
    latex.push_str(" \\\\\n\\midrule\n");
    for m in &methods {
        latex.push_str(&latex_row(m, datasets.iter().map(|d| lookup(m, d))));
        latex.push('\n');
    }
    latex.push_str("\\bottomrule\n\\end{tabular}\n");

    let json = serde_json::to_string_pretty(entries).expect("serializable");
    Report { text, latex, json }
}

/// `Method & 1.72 & 2.92 & 4.66 & 78.49 \\`
pub fn latex_row<'a>(method: &str, groups: impl IntoIterator<Item = Option<&'a Aggregate>>) -> String {
    let mut row = method.to_string();
    for a in groups {
        for c in cells(a) {
            row.push_str(" & ");
            row.push_str(&c);
        }
    }
    row.push_str(" \\\\");
    row
}

/// CSV with one column per series and one row per click count.
pub fn export_curve(series: &[(String, Aggregate)]) -> String {
    let mut out = String::from("click");
    for (name, _) in series {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let rows = series.iter().map(|(_, a)| a.iou_curve.len()).max().unwrap_or(0);
    for k in 0..rows {
        let _ = write!(out, "{}", k + 1);
        for (_, a) in series {
            match a.iou_curve.get(k) {
                Some(v) => {
                    let _ = write!(out, ",{v:.6}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// One JSON record per line, in the given order.
pub fn write_results(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    crate::data::write_bytes(path, text.as_bytes())
}

pub fn read_results(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
