//! Command implementations behind the `spectralmoe` binary.
//!
//! Every command writes a `resolved_config.txt` next to its outputs and a
//! `<file>.config-hash` sidecar for each output file, so results can be
//! traced back to the exact configuration that produced them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adapter::{count_parameters, forward_prepared, AdapterStack};
use crate::backbone::FrozenBackbone;
use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck, tiny_model, GradcheckOptions, GradcheckReport};
use crate::losses::importance;
use crate::synthbench::{generate_dataset, prepare, read_dataset, write_dataset, BenchSpec, Dataset, DomainShift, SegMetrics};
use crate::train::{train, MetricRecord};

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: RunConfig,
    pub force: bool,
    pub out: Option<PathBuf>,
}

impl Invocation {
    pub fn new(config: RunConfig) -> Self {
        Self { config, force: false, out: None }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        match &self.out {
            Some(p) => Ok(p.clone()),
            None => self.config.require_path("out_dir").map(Path::to_path_buf),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".config-hash");
    path.with_file_name(name)
}

/// Writes an output file together with its config-hash sidecar.
fn write_output(path: &Path, bytes: &[u8], cfg: &RunConfig) -> Result<()> {
    write_file(path, bytes)?;
    write_file(&sidecar_path(path), format!("{}\n", cfg.hash()).as_bytes())
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = format!("# config_hash={}\n{}", cfg.hash(), cfg.resolved_text());
    write_file(&dir.join("resolved_config.txt"), text.as_bytes())
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut it| it.next().is_some()).unwrap_or(false)
}

pub fn bench_spec(cfg: &RunConfig) -> BenchSpec {
    BenchSpec {
        seed: cfg.seed,
        height: cfg.height,
        width: cfg.width,
        classes: cfg.model.classes,
        channels: cfg.model.channels,
        n_source: cfg.n_source,
        n_target: cfg.n_target,
        shift: DomainShift::default_target(cfg.model.channels),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenSummary {
    pub dir: PathBuf,
    pub n_source: usize,
    pub n_target: usize,
}

/// Generates the source and target splits into `--out` or `dataset_dir`.
pub fn cmd_gen(inv: &Invocation) -> Result<GenSummary> {
    let dir = match &inv.out {
        Some(p) => p.clone(),
        None => inv.config.require_path("dataset_dir")?.to_path_buf(),
    };
    if dir_is_nonempty(&dir) {
        if !inv.force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let spec = bench_spec(&inv.config);
    let data = generate_dataset(&spec)?;
    write_dataset(&dir, &spec, &data)?;
    write_file(&dir.join("config-hash"), format!("{}\n", inv.config.hash()).as_bytes())?;
    write_resolved(&dir, &inv.config)?;
    Ok(GenSummary { dir, n_source: data.source.len(), n_target: data.target.len() })
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.require_path("dataset_dir")?;
    let (spec, data) = read_dataset(dir)?;
    let m = &cfg.model;
    if spec.channels != m.channels || spec.classes != m.classes || spec.height != cfg.height || spec.width != cfg.width {
        return Err(Error::Config(format!(
            "dataset at {} has C={} K={} {}×{}, config expects C={} K={} {}×{}",
            dir.display(),
            spec.channels,
            spec.classes,
            spec.height,
            spec.width,
            m.channels,
            m.classes,
            cfg.height,
            cfg.width
        )));
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub n_experts: usize,
    pub param_count: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub source: SegMetrics,
    pub target: SegMetrics,
}

/// Where one training run puts its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            checkpoint: dir.join("checkpoint"),
            metrics: dir.join("metrics.jsonl"),
        }
    }
}

/// Trains one configuration and writes checkpoint, metrics stream and a
/// `result.json` summary.
pub fn run_training(cfg: &RunConfig, data: &Dataset, paths: &RunPaths) -> Result<RunResult> {
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    write_resolved(&paths.dir, cfg)?;
    if let Some(parent) = paths.metrics.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(&paths.metrics).map_err(|e| Error::io(&paths.metrics, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let metrics_path = paths.metrics.clone();
    let mut sink = |rec: &MetricRecord| -> Result<()> {
        writeln!(writer, "{}", rec.to_json()).map_err(|e| Error::io(&metrics_path, e))
    };
    let outcome = match train(cfg, data, &mut sink) {
        Ok(o) => o,
        Err(err) => {
            if let Error::Divergence { step, detail } = &err {
                let line = serde_json::json!({ "kind": "divergence", "step": step, "detail": detail });
                writeln!(writer, "{line}").map_err(|e| Error::io(&paths.metrics, e))?;
                writer.flush().map_err(|e| Error::io(&paths.metrics, e))?;
            }
            return Err(err);
        }
    };
    writer.flush().map_err(|e| Error::io(&paths.metrics, e))?;
    drop(writer);
    write_file(&sidecar_path(&paths.metrics), format!("{}\n", cfg.hash()).as_bytes())?;
    outcome.stack.save(&paths.checkpoint, outcome.backbone_seed)?;
    write_file(&paths.checkpoint.join("config-hash"), format!("{}\n", cfg.hash()).as_bytes())?;
    let result = RunResult {
        variant: cfg.model.variant,
        seed: cfg.seed,
        n_experts: outcome.stack.config.n_experts,
        param_count: count_parameters(&cfg.model)?.total,
        first_loss: outcome.history.first().map_or(f64::NAN, |r| r.total),
        final_loss: outcome.history.last().map_or(f64::NAN, |r| r.total),
        source: outcome.source,
        target: outcome.target,
    };
    let json = serde_json::to_string_pretty(&result).expect("result serializes");
    write_output(&paths.dir.join("result.json"), json.as_bytes(), cfg)?;
    Ok(result)
}

/// Loads a previous run's summary when its checkpoint is complete and its
/// configuration hash matches.
fn cached_result(cfg: &RunConfig, paths: &RunPaths) -> Option<RunResult> {
    let hash = fs::read_to_string(paths.checkpoint.join("config-hash")).ok()?;
    if hash.trim() != cfg.hash() || !paths.checkpoint.join("checkpoint.manifest").exists() {
        return None;
    }
    let text = fs::read_to_string(paths.dir.join("result.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    let metrics = |key: &str| -> Option<SegMetrics> { serde_json::from_value(v.get(key)?.clone()).ok() };
    Some(RunResult {
        variant: cfg.model.variant,
        seed: cfg.seed,
        n_experts: v.get("n_experts")?.as_u64()? as usize,
        param_count: v.get("param_count")?.as_u64()? as usize,
        first_loss: v.get("first_loss")?.as_f64()?,
        final_loss: v.get("final_loss")?.as_f64()?,
        source: metrics("source")?,
        target: metrics("target")?,
    })
}

/// Trains the configured variant. Checkpoint and metrics go to
/// `checkpoint_dir` / `metrics_path` when set, otherwise under `--out`.
pub fn cmd_train(inv: &Invocation) -> Result<RunResult> {
    let cfg = &inv.config;
    let data = load_dataset(cfg)?;
    let dir = match (&inv.out, &cfg.out_dir) {
        (Some(p), _) | (None, Some(p)) => p.clone(),
        (None, None) => match (&cfg.checkpoint_dir, &cfg.metrics_path) {
            (Some(c), Some(_)) => c.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
            _ => return Err(Error::Config("missing required key `out_dir`".into())),
        },
    };
    let mut paths = RunPaths::in_dir(&dir);
    if let Some(c) = &cfg.checkpoint_dir {
        paths.checkpoint = c.clone();
    }
    if let Some(m) = &cfg.metrics_path {
        paths.metrics = m.clone();
    }
    run_training(cfg, &data, &paths)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_source_miou: f64,
    pub median_target_miou: f64,
    pub median_target_macc: f64,
    /// Variant median minus full-variant median, target mIoU.
    pub delta_target_miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub runs: Vec<RunResult>,
    pub summary: Vec<VariantSummary>,
}

impl AblationTable {
    pub fn run(&self, variant: Variant, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn summary_for(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }
}

/// Trains every variant for every seed on the same dataset. Runs whose
/// checkpoint already exists under the same config are reused unless
/// `force` is set.
pub fn run_ablation(cfg: &RunConfig, data: &Dataset, runs_dir: &Path, variants: &[Variant], force: bool) -> Result<AblationTable> {
    let mut runs = Vec::new();
    for &variant in variants {
        for &seed in &cfg.seeds {
            let run_cfg = cfg.for_run(variant, seed);
            let paths = RunPaths::in_dir(&runs_dir.join(format!("{}_seed{seed}", variant.name())));
            let cached = if force { None } else { cached_result(&run_cfg, &paths) };
            let result = match cached {
                Some(r) => r,
                None => run_training(&run_cfg, data, &paths)?,
            };
            runs.push(result);
        }
    }
    let med = |v: Variant, f: &dyn Fn(&RunResult) -> f64| {
        let mut xs: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(f).collect();
        median(&mut xs)
    };
    let full = med(Variant::Full, &|r| r.target.miou);
    let summary = variants
        .iter()
        .map(|&v| {
            let target = med(v, &|r| r.target.miou);
            VariantSummary {
                variant: v,
                median_source_miou: med(v, &|r| r.source.miou),
                median_target_miou: target,
                median_target_macc: med(v, &|r| r.target.macc),
                delta_target_miou: target - full,
            }
        })
        .collect();
    Ok(AblationTable { runs, summary })
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Runs all five variants over the seed list and writes
/// `ablation.csv` (one row per variant, seed and split),
/// `ablation_per_class.csv`, `ablation_summary.csv` and `ablation.json`.
pub fn cmd_ablate(inv: &Invocation) -> Result<AblationTable> {
    let cfg = &inv.config;
    let data = load_dataset(cfg)?;
    let out = inv.out_dir()?;
    write_resolved(&out, cfg)?;
    let table = run_ablation(cfg, &data, &out.join("runs"), &Variant::ALL, inv.force)?;

    let mut rows = String::from("variant,seed,split,mIoU,mAcc\n");
    let mut per_class = String::from("variant,seed,split,class,IoU,mIoU,mAcc\n");
    for r in &table.runs {
        for (split, m) in [("source", &r.source), ("target", &r.target)] {
            rows += &format!("{},{},{split},{},{}\n", r.variant, r.seed, fmt(m.miou), fmt(m.macc));
            for (c, iou) in m.per_class_iou.iter().enumerate() {
                let iou = iou.map(fmt).unwrap_or_default();
                per_class += &format!("{},{},{split},{c},{iou},{},{}\n", r.variant, r.seed, fmt(m.miou), fmt(m.macc));
            }
        }
    }
    let mut summary = String::from("variant,median_source_mIoU,median_target_mIoU,median_target_mAcc,delta_target_mIoU_vs_full\n");
    for s in &table.summary {
        summary += &format!(
            "{},{},{},{},{}\n",
            s.variant,
            fmt(s.median_source_miou),
            fmt(s.median_target_miou),
            fmt(s.median_target_macc),
            fmt(s.delta_target_miou)
        );
    }
    write_output(&out.join("ablation.csv"), rows.as_bytes(), cfg)?;
    write_output(&out.join("ablation_per_class.csv"), per_class.as_bytes(), cfg)?;
    write_output(&out.join("ablation_summary.csv"), summary.as_bytes(), cfg)?;
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    write_output(&out.join("ablation.json"), json.as_bytes(), cfg)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n_experts: usize,
    pub median_target_miou: f64,
    pub param_count: usize,
}

/// Trains the full variant for each expert count and writes `sweep.csv`.
pub fn cmd_sweep_experts(inv: &Invocation) -> Result<Vec<SweepRow>> {
    let cfg = &inv.config;
    if cfg.ne_list.is_empty() {
        return Err(Error::Config("`ne_list` must not be empty".into()));
    }
    let data = load_dataset(cfg)?;
    let out = inv.out_dir()?;
    write_resolved(&out, cfg)?;
    let mut counts = cfg.ne_list.clone();
    counts.sort_unstable();
    counts.dedup();
    let mut rows = Vec::new();
    for &n in &counts {
        let mut c = cfg.clone();
        c.model.variant = Variant::Full;
        c.model.n_experts = n;
        c.model.k = cfg.model.k.min(n);
        let table = run_ablation(&c, &data, &out.join("sweep").join(format!("ne{n}")), &[Variant::Full], inv.force)?;
        rows.push(SweepRow {
            n_experts: n,
            median_target_miou: table.summary[0].median_target_miou,
            param_count: count_parameters(&c.model)?.total,
        });
    }
    let mut csv = String::from("N_e,median_target_mIoU,param_count\n");
    for r in &rows {
        csv += &format!("{},{},{}\n", r.n_experts, fmt(r.median_target_miou), r.param_count);
    }
    write_output(&out.join("sweep.csv"), csv.as_bytes(), cfg)?;
    Ok(rows)
}

/// Finite-difference check on a tiny model. The model comes from the
/// config when `use_config_model` is set, otherwise the built-in tiny one.
/// A failing group is reported as an invariant error after the report is
/// written.
pub fn cmd_gradcheck(inv: &Invocation, use_config_model: bool, corrupt: Option<(String, f64)>) -> Result<GradcheckReport> {
    let model = if use_config_model { inv.config.model.clone() } else { tiny_model() };
    let opts = GradcheckOptions {
        height: 2 * model.patch,
        width: 2 * model.patch,
        model,
        seed: inv.config.seed,
        corrupt,
        ..GradcheckOptions::default()
    };
    let report = gradcheck(&opts)?;
    if let Some(out) = inv.out.clone().or_else(|| inv.config.out_dir.clone()) {
        write_resolved(&out, &inv.config)?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_output(&out.join("gradcheck.json"), json.as_bytes(), &inv.config)?;
    }
    Ok(report)
}

/// Turns a failed report into the error the CLI exits with.
pub fn gradcheck_verdict(report: &GradcheckReport) -> Result<()> {
    if report.passed {
        return Ok(());
    }
    let mut lines = Vec::new();
    for g in report.groups.iter().filter(|g| !g.passed) {
        for f in &g.failures {
            lines.push(format!("{}[{}] analytic={:e} numeric={:e} rel={:e}", f.param, f.index, f.analytic, f.numeric, f.rel_error));
        }
    }
    Err(Error::Invariant(format!("gradient check failed:\n  {}", lines.join("\n  "))))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OccupancyRow {
    pub layer: usize,
    pub modality: &'static str,
    pub importance: Vec<f64>,
    pub occupancy: Vec<f64>,
    /// Max over min importance; infinite when an expert is never used.
    pub max_min_ratio: f64,
    /// `assignments[class][expert]`: tokens of that class routed to that expert.
    pub assignments: Vec<Vec<u64>>,
}

/// Evaluation-mode routing statistics over a sample set.
pub fn routing_stats(stack: &AdapterStack, backbone: &FrozenBackbone, samples: &[crate::synthbench::SynthSample]) -> Result<Vec<OccupancyRow>> {
    if samples.is_empty() {
        return Err(Error::Degenerate("no samples to route".into()));
    }
    let (n, k, layers) = (stack.config.n_experts, stack.config.classes, stack.layers.len());
    let mut rows: Vec<OccupancyRow> = (0..layers)
        .flat_map(|l| {
            ["visual", "depth"].into_iter().map(move |modality| OccupancyRow {
                layer: l,
                modality,
                importance: vec![0.0; n],
                occupancy: vec![0.0; n],
                max_min_ratio: 0.0,
                assignments: vec![vec![0; n]; k],
            })
        })
        .collect();
    let traces = crate::par::map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let input = prepare(stack, backbone, s)?;
        let trace = forward_prepared(stack, backbone, &input, None)?;
        let labels = s.token_labels(stack.config.patch, k)?;
        let per_layer = trace
            .layers
            .iter()
            .map(|t| Ok([(importance(&t.visual.gates)?, t.visual.selected.clone()), (importance(&t.depth.gates)?, t.depth.selected.clone())]))
            .collect::<Result<Vec<_>>>()?;
        Ok((per_layer, labels))
    })?;
    for (per_layer, labels) in &traces {
        for (l, pair) in per_layer.iter().enumerate() {
            for (mi, (imp, selected)) in pair.iter().enumerate() {
                let row = &mut rows[2 * l + mi];
                for (acc, v) in row.importance.iter_mut().zip(imp.data()) {
                    *acc += v;
                }
                for (token, experts) in selected.iter().enumerate() {
                    for &e in experts {
                        row.assignments[labels[token]][e] += 1;
                    }
                }
            }
        }
    }
    for row in &mut rows {
        let total: f64 = row.importance.iter().sum();
        row.occupancy = row.importance.iter().map(|v| v / total).collect();
        let max = row.importance.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = row.importance.iter().cloned().fold(f64::INFINITY, f64::min);
        row.max_min_ratio = if min > 0.0 { max / min } else { f64::INFINITY };
    }
    Ok(rows)
}

/// Routing occupancy of a trained checkpoint over the target split. Writes
/// `route_occupancy.csv`, `route_summary.csv` and `route_classes.csv`.
pub fn cmd_route_stats(inv: &Invocation) -> Result<Vec<OccupancyRow>> {
    let cfg = &inv.config;
    let ckpt = cfg.require_path("checkpoint_dir")?;
    let (stack, backbone_seed) = AdapterStack::load(ckpt)?;
    let m = &stack.config;
    let backbone = FrozenBackbone::generate(backbone_seed, m.channels, m.patch, m.d, m.layers);
    let (_, data) = read_dataset(cfg.require_path("dataset_dir")?)?;
    let rows = routing_stats(&stack, &backbone, &data.target)?;
    let out = inv.out_dir()?;
    write_resolved(&out, cfg)?;
    let mut occ = String::from("layer,modality,expert,importance,occupancy\n");
    let mut summary = String::from("layer,modality,max_min_ratio\n");
    let mut classes = String::from("layer,modality,class,expert,tokens\n");
    for r in &rows {
        for e in 0..r.importance.len() {
            occ += &format!("{},{},{e},{},{}\n", r.layer, r.modality, fmt(r.importance[e]), fmt(r.occupancy[e]));
        }
        summary += &format!("{},{},{}\n", r.layer, r.modality, fmt(r.max_min_ratio));
        for (c, counts) in r.assignments.iter().enumerate() {
            for (e, n) in counts.iter().enumerate() {
                classes += &format!("{},{},{c},{e},{n}\n", r.layer, r.modality);
            }
        }
    }
    write_output(&out.join("route_occupancy.csv"), occ.as_bytes(), cfg)?;
    write_output(&out.join("route_summary.csv"), summary.as_bytes(), cfg)?;
    write_output(&out.join("route_classes.csv"), classes.as_bytes(), cfg)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_lists() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn sidecar_sits_next_to_its_file() {
        assert_eq!(sidecar_path(Path::new("/a/b/metrics.jsonl")), Path::new("/a/b/metrics.jsonl.config-hash"));
    }
}
