//! Config-driven experiment runner: sweeps over data ratios, class orders
//! and seeds, report files, checkpoints and run comparison.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{
    generate_dataset, load_dataset, save_dataset, select_for_step, ClassId, ClassPartition, LabelMap, LabeledImage,
    Protocol, SyntheticSceneSpec, TaskSchedule, BACKGROUND,
};
use crate::decouple::{rank_and_split, ChannelSimilarity, SimilarityMetric};
use crate::distill::PrototypeStore;
use crate::error::{config, contract, Result};
use crate::eval::{class_order_summary, ConfusionMatrix, MetricsGroup};
use crate::net::{NetCheckpoint, NetConfig, SegNetwork};
use crate::pseudo::certainty_maps;
use crate::relevance::{propagate_relevance, Depth, DEFAULT_EPS};
use crate::tensor::Tensor;
use crate::trainer::{run_schedule_with, ScheduleConfig, StepReport, Toggles, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub spec: SyntheticSceneSpec,
    pub train_count: usize,
    pub val_count: usize,
    /// Seed of the validation images; the spec seed drives training images.
    pub val_seed: u64,
    /// Directory written by `generate` holding `train/` and `val/`.
    /// Images are generated in memory when absent.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSceneSpec::with_classes(5, 32, 32, 11),
            train_count: 400,
            val_count: 60,
            val_seed: 12,
            dir: None,
        }
    }
}

impl DatasetConfig {
    pub fn val_spec(&self) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            seed: self.val_seed,
            ..self.spec.clone()
        }
    }

    pub fn generate(&self) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
        Ok((
            generate_dataset(&self.spec, self.train_count)?,
            generate_dataset(&self.val_spec(), self.val_count)?,
        ))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (train, val) = self.generate()?;
        save_dataset(&dir.join("train"), &self.spec, &train)?;
        save_dataset(&dir.join("val"), &self.val_spec(), &val)
    }

    pub fn load(&self) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
        let Some(dir) = &self.dir else {
            return self.generate();
        };
        let (tm, train) = load_dataset(&dir.join("train"))?;
        let (vm, val) = load_dataset(&dir.join("val"))?;
        if tm.spec != self.spec || vm.spec != self.val_spec() {
            return Err(config(format!("dataset in {} was generated from a different spec", dir.display())));
        }
        Ok((train, val))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    pub data_ratios: Vec<f64>,
    /// Explicit permutations of the class universe. Empty means ids in order.
    pub class_orders: Vec<Vec<ClassId>>,
    pub seeds: Vec<u64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            data_ratios: vec![1.0],
            class_orders: Vec::new(),
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    /// Classes introduced per step, e.g. `[4, 1]` or `[2, 1, 1, 1]`.
    pub split: Vec<usize>,
    pub protocol: Protocol,
    pub train: ScheduleConfig,
    pub sweep: SweepAxes,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ExperimentConfig {
    /// Seeded toy 4-1 overlapped task with every module on.
    pub fn reference() -> Self {
        let mut train = ScheduleConfig::default();
        train.initial_epochs = Some(20);
        train.initial_lr = Some(0.05);
        train.step.epochs = 20;
        train.step.lr = 0.02;
        Self {
            name: "toy-4-1".into(),
            dataset: DatasetConfig::default(),
            split: vec![4, 1],
            protocol: Protocol::Overlapped,
            train,
            sweep: SweepAxes::default(),
        }
    }

    pub fn universe(&self) -> Vec<ClassId> {
        self.dataset.spec.universe()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.spec.validate()?;
        if self.dataset.train_count == 0 || self.dataset.val_count == 0 {
            return Err(config("dataset needs training and validation images"));
        }
        let universe = self.universe();
        if self.split.is_empty() || self.split.contains(&0) {
            return Err(config("split needs at least one step and no empty steps"));
        }
        if self.split.iter().sum::<usize>() != universe.len() {
            return Err(config(format!(
                "split {:?} does not cover the {} dataset classes",
                self.split,
                universe.len()
            )));
        }
        if self.sweep.data_ratios.is_empty() || self.sweep.seeds.is_empty() {
            return Err(config("sweep needs at least one data ratio and one seed"));
        }
        if let Some(r) = self.sweep.data_ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(config(format!("data ratio {r} outside (0, 1]")));
        }
        for order in &self.sweep.class_orders {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != universe {
                return Err(config(format!("class order {order:?} is not a permutation of {universe:?}")));
            }
        }
        self.train.net.validate()?;
        for t in 0..self.split.len() {
            self.train.for_step(t).validate(&self.train.net)?;
        }
        if universe.contains(&self.train.unknown_id) || self.train.unknown_id == BACKGROUND {
            return Err(config("unknown id collides with a dataset class"));
        }
        for p in self.points() {
            p.schedule(self).validate(&universe)?;
        }
        Ok(())
    }

    /// Every combination of the sweep axes, ratio-major.
    pub fn points(&self) -> Vec<SweepPoint> {
        let orders: Vec<Option<usize>> = if self.sweep.class_orders.is_empty() {
            vec![None]
        } else {
            (0..self.sweep.class_orders.len()).map(Some).collect()
        };
        let mut out = Vec::new();
        for &ratio in &self.sweep.data_ratios {
            for &order in &orders {
                for &seed in &self.sweep.seeds {
                    out.push(SweepPoint {
                        data_ratio: ratio,
                        order,
                        seed,
                    });
                }
            }
        }
        out
    }

    /// The config restricted to the first value of every sweep axis.
    pub fn single(&self) -> Self {
        let mut c = self.clone();
        c.sweep.data_ratios.truncate(1);
        c.sweep.class_orders.truncate(1);
        c.sweep.seeds.truncate(1);
        c
    }

    pub fn label(&self) -> String {
        method_label(&self.train.step.toggles)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let parsed: ExperimentConfig = serde_json::from_str(text)?;
        let mut value = serde_json::to_value(&parsed)?;
        apply_overrides(&mut value, overrides)?;
        Ok(serde_json::from_value(value)?)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, overrides)
    }
}

/// "fine tuning" with every module off, "full" with every module on.
pub fn method_label(t: &Toggles) -> String {
    if !t.any() {
        return "fine tuning".into();
    }
    if *t == Toggles::all(true) {
        return "full".into();
    }
    let names = [
        (t.spm, "spm"),
        (t.sfp, "sfp"),
        (t.nsc, "nsc"),
        (t.upl, "upl"),
        (t.unknown, "unknown"),
    ];
    names
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect::<Vec<_>>()
        .join("+")
}

/// Applies `key.path=value` assignments. Values parse as JSON, falling back
/// to a plain string. Every path must already exist in the config.
pub fn apply_overrides(value: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| config(format!("override `{item}` is not key=value")))?;
        let mut slot = &mut *value;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    }
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub data_ratio: f64,
    /// Index into the configured class orders.
    pub order: Option<usize>,
    pub seed: u64,
}

impl SweepPoint {
    pub fn id(&self) -> String {
        let order = self.order.map_or("natural".into(), |o| format!("o{o}"));
        format!("ratio{}_{order}_seed{}", self.data_ratio, self.seed)
    }

    pub fn class_order(&self, cfg: &ExperimentConfig) -> Vec<ClassId> {
        match self.order {
            Some(o) => cfg.sweep.class_orders[o].clone(),
            None => cfg.universe(),
        }
    }

    pub fn schedule(&self, cfg: &ExperimentConfig) -> TaskSchedule {
        let order = self.class_order(cfg);
        let mut steps = Vec::with_capacity(cfg.split.len());
        let mut at = 0;
        for &n in &cfg.split {
            steps.push(order[at..at + n].to_vec());
            at += n;
        }
        TaskSchedule {
            steps,
            protocol: cfg.protocol,
            data_ratio: self.data_ratio,
        }
    }

    pub fn train_config(&self, cfg: &ExperimentConfig) -> ScheduleConfig {
        let mut c = cfg.train.clone();
        c.step.seed = self.seed;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub id: String,
    pub point: SweepPoint,
    pub class_order: Vec<ClassId>,
    pub schedule: Vec<Vec<ClassId>>,
    /// Training images per step.
    pub samples: Vec<usize>,
    pub steps: Vec<StepReport>,
}

impl PointResult {
    pub fn final_metrics(&self) -> Option<&MetricsGroup> {
        self.steps.last().and_then(|s| s.metrics.as_ref())
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Grouped {
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
    pub all_with_bg: Option<f64>,
}

impl Grouped {
    pub fn of(m: &MetricsGroup) -> Self {
        Self {
            old: m.old,
            new: m.new,
            all: m.all,
            all_with_bg: m.all_with_bg,
        }
    }

    pub fn fields(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("old", self.old),
            ("new", self.new),
            ("all", self.all),
            ("all_with_bg", self.all_with_bg),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub samples: Vec<usize>,
    pub values: Grouped,
    /// Population std over class orders, on aggregate rows only.
    pub std: Option<Grouped>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub name: String,
    pub label: String,
    pub dataset: DatasetConfig,
    pub split: Vec<usize>,
    pub protocol: Protocol,
    pub points: Vec<PointResult>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointTiming {
    pub id: String,
    pub step_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub config_hash: String,
    pub started_unix: u64,
    pub total_seconds: f64,
    pub points: Vec<PointTiming>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCheckpoint {
    pub config_hash: String,
    pub step: usize,
    pub partition: ClassPartition,
    pub net: NetCheckpoint,
    pub stores: Vec<PrototypeStore>,
}

impl StepCheckpoint {
    pub fn of(state: &TrainState, config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.into(),
            step: state.partition.step_index,
            partition: state.partition.clone(),
            net: state.net.to_checkpoint(),
            stores: state.stores.clone(),
        }
    }

    pub fn network(&self) -> Result<SegNetwork> {
        SegNetwork::from_checkpoint(&self.net)
    }
}

fn summary_rows(cfg: &ExperimentConfig, points: &[PointResult]) -> Result<Vec<SummaryRow>> {
    let mut rows: Vec<SummaryRow> = points
        .iter()
        .map(|p| SummaryRow {
            name: p.id.clone(),
            samples: p.samples.clone(),
            values: p.final_metrics().map(Grouped::of).unwrap_or_default(),
            std: None,
        })
        .collect();
    if cfg.sweep.class_orders.len() < 2 {
        return Ok(rows);
    }
    for &ratio in &cfg.sweep.data_ratios {
        for &seed in &cfg.sweep.seeds {
            let group: Vec<Grouped> = points
                .iter()
                .filter(|p| p.point.data_ratio == ratio && p.point.seed == seed)
                .map(|p| p.final_metrics().map(Grouped::of).unwrap_or_default())
                .collect();
            let agg = |f: fn(&Grouped) -> Option<f64>| -> Result<(Option<f64>, Option<f64>)> {
                let vals: Vec<f64> = group.iter().filter_map(f).collect();
                if vals.len() < 2 {
                    return Ok((None, None));
                }
                let s = class_order_summary(&vals)?;
                Ok((Some(s.mean), Some(s.std)))
            };
            let (old, new, all, bg) = (agg(|g| g.old)?, agg(|g| g.new)?, agg(|g| g.all)?, agg(|g| g.all_with_bg)?);
            rows.push(SummaryRow {
                name: format!("mean ± std (ratio {ratio}, seed {seed})"),
                samples: Vec::new(),
                values: Grouped {
                    old: old.0,
                    new: new.0,
                    all: all.0,
                    all_with_bg: bg.0,
                },
                std: Some(Grouped {
                    old: old.1,
                    new: new.1,
                    all: all.1,
                    all_with_bg: bg.1,
                }),
            });
        }
    }
    Ok(rows)
}

fn fmt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

fn write_reports(dir: &Path, metrics: &RunMetrics) -> Result<()> {
    let h = &metrics.config_hash;
    let mut summary = String::from("config_hash,label,row,samples,old,new,all,all_with_bg,old_std,new_std,all_std,all_with_bg_std\n");
    for r in &metrics.summary {
        let s = r.std.unwrap_or_default();
        let samples: Vec<String> = r.samples.iter().map(|n| n.to_string()).collect();
        summary.push_str(&format!(
            "{h},{},\"{}\",{},{},{},{},{},{},{},{},{}\n",
            metrics.label,
            r.name,
            samples.join(" "),
            fmt(r.values.old),
            fmt(r.values.new),
            fmt(r.values.all),
            fmt(r.values.all_with_bg),
            fmt(s.old),
            fmt(s.new),
            fmt(s.all),
            fmt(s.all_with_bg),
        ));
    }
    fs::write(dir.join("summary.csv"), summary)?;

    let mut md = format!(
        "# {} ({})\n\nconfig `{h}`\n\n| row | samples | old | new | all | all+bg |\n|---|---|---|---|---|---|\n",
        metrics.name, metrics.label
    );
    for r in &metrics.summary {
        let cell = |v: Option<f64>, s: Option<f64>| match (v, s) {
            (Some(v), Some(s)) => format!("{v:.4} ± {s:.4}"),
            (Some(v), None) => format!("{v:.4}"),
            _ => "-".into(),
        };
        let s = r.std.unwrap_or_default();
        let samples: Vec<String> = r.samples.iter().map(|n| n.to_string()).collect();
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.name,
            samples.join("/"),
            cell(r.values.old, s.old),
            cell(r.values.new, s.new),
            cell(r.values.all, s.all),
            cell(r.values.all_with_bg, s.all_with_bg),
        ));
    }
    fs::write(dir.join("summary.md"), md)?;

    let mut per_class = String::from("config_hash,point,step,class,iou\n");
    let mut evolution = String::from("config_hash,point,step,old,new,all,all_with_bg\n");
    for p in &metrics.points {
        for s in &p.steps {
            let Some(m) = &s.metrics else { continue };
            for (c, v) in &m.per_class {
                per_class.push_str(&format!("{h},{},{},{c},{}\n", p.id, s.step, fmt(*v)));
            }
            evolution.push_str(&format!(
                "{h},{},{},{},{},{},{}\n",
                p.id,
                s.step,
                fmt(m.old),
                fmt(m.new),
                fmt(m.all),
                fmt(m.all_with_bg)
            ));
        }
    }
    fs::write(dir.join("per_class.csv"), per_class)?;
    fs::write(dir.join("evolution.csv"), evolution)?;
    Ok(())
}

/// Runs every sweep point and writes `config.json`, `metrics.json`,
/// `timing.json`, CSV and markdown summaries, and per-step checkpoints
/// under `points/<id>/`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunMetrics> {
    cfg.validate()?;
    let start = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let hash = cfg.hash();
    let (train, val) = cfg.dataset.load()?;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({ "config_hash": hash, "config": cfg }))?,
    )?;

    let mut points = Vec::new();
    let mut timing = Vec::new();
    for point in cfg.points() {
        let id = point.id();
        let dir = out.join("points").join(&id);
        fs::create_dir_all(&dir)?;
        let schedule = point.schedule(cfg);
        let samples = (0..schedule.num_steps())
            .map(|t| select_for_step(&train, &schedule, t).map(|v| v.len()))
            .collect::<Result<Vec<_>>>()?;
        let mut on_step = |state: &TrainState, _: &StepReport| -> Result<()> {
            let ckpt = StepCheckpoint::of(state, &hash);
            let path = dir.join(format!("step{}.ckpt.json", ckpt.step));
            fs::write(path, serde_json::to_string(&ckpt)?)?;
            Ok(())
        };
        let (_, steps) = run_schedule_with(&schedule, &train, &val, &point.train_config(cfg), &mut on_step)?;
        timing.push(PointTiming {
            id: id.clone(),
            step_seconds: steps.iter().map(|s| s.seconds).collect(),
        });
        points.push(PointResult {
            id,
            point,
            class_order: point.class_order(cfg),
            schedule: schedule.steps.clone(),
            samples,
            steps,
        });
    }

    let metrics = RunMetrics {
        config_hash: hash.clone(),
        name: cfg.name.clone(),
        label: cfg.label(),
        dataset: cfg.dataset.clone(),
        split: cfg.split.clone(),
        protocol: cfg.protocol,
        summary: summary_rows(cfg, &points)?,
        points,
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    let timing = RunTiming {
        config_hash: hash,
        started_unix,
        total_seconds: start.elapsed().as_secs_f64(),
        points: timing,
    };
    fs::write(out.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    write_reports(out, &metrics)?;
    Ok(metrics)
}

pub fn load_metrics(dir: &Path) -> Result<RunMetrics> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("metrics.json"))?)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub point: String,
    pub metric: String,
    pub base: Option<f64>,
    pub value: Option<f64>,
    pub delta: Option<f64>,
    pub regression: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub base: String,
    pub tolerance: f64,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn regressions(&self) -> Vec<&ComparisonRow> {
        self.rows.iter().filter(|r| r.regression).collect()
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("base {} (tolerance {})\n", self.base, self.tolerance);
        s.push_str("run\tpoint\tmetric\tbase\tvalue\tdelta\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}{}\n",
                r.run,
                r.point,
                r.metric,
                fmt(r.base),
                fmt(r.value),
                r.delta.map_or(String::new(), |d| format!("{d:+.6}")),
                if r.regression { "\tREGRESSION" } else { "" }
            ));
        }
        s
    }
}

/// Final-step grouped mIoU of every run against the first. A delta below
/// `-tolerance` is a regression.
pub fn compare_metrics(runs: &[(String, RunMetrics)], tolerance: f64) -> Result<Comparison> {
    let ((base_name, base), rest) = runs
        .split_first()
        .ok_or_else(|| contract("comparison needs at least one run"))?;
    let mut rows = Vec::new();
    let others = if rest.is_empty() { &runs[..1] } else { rest };
    for (name, run) in others {
        if run.dataset.spec != base.dataset.spec || run.split.len() != base.split.len() || run.protocol != base.protocol
        {
            return Err(contract(format!("run {name} does not share the dataset and schedule of {base_name}")));
        }
        let ids: Vec<&str> = run.points.iter().map(|p| p.id.as_str()).collect();
        let base_ids: Vec<&str> = base.points.iter().map(|p| p.id.as_str()).collect();
        if ids != base_ids {
            return Err(contract(format!("run {name} has different sweep points than {base_name}")));
        }
        for (bp, p) in base.points.iter().zip(&run.points) {
            let b = bp.final_metrics().map(Grouped::of).unwrap_or_default();
            let v = p.final_metrics().map(Grouped::of).unwrap_or_default();
            for ((metric, bv), (_, vv)) in b.fields().into_iter().zip(v.fields()) {
                let delta = bv.zip(vv).map(|(b, v)| v - b);
                rows.push(ComparisonRow {
                    run: name.clone(),
                    point: p.id.clone(),
                    metric: metric.into(),
                    base: bv,
                    value: vv,
                    delta,
                    regression: delta.is_some_and(|d| d < -tolerance),
                });
            }
        }
    }
    Ok(Comparison {
        base: base_name.clone(),
        tolerance,
        rows,
    })
}

/// Compares run directories; a single directory is compared to itself.
pub fn compare_runs(dirs: &[PathBuf], tolerance: f64) -> Result<Comparison> {
    let runs = dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), load_metrics(d)?)))
        .collect::<Result<Vec<_>>>()?;
    compare_metrics(&runs, tolerance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Quick randomized self-checks against brute-force references.
pub fn run_oracles(cases: usize, seed: u64) -> Result<Vec<OracleOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut failures = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ratio = rng.random_range(0.0..=1.0);
        let emb = Tensor::new(vec![n, 1, 2], (0..2 * n).map(|_| rng.random()).collect())?;
        let sim = ChannelSimilarity {
            scores: scores.clone(),
            metric: SimilarityMetric::Cosine,
        };
        let d = rank_and_split(&sim, &emb, ratio)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let k = ((ratio * n as f64) + 0.5).floor() as usize;
        let mut si = order[..k.min(n)].to_vec();
        si.sort_unstable();
        if d.si_indices != si || d.reconstruct() != emb {
            failures += 1;
        }
    }
    out.push(OracleOutcome {
        name: "decoupling".into(),
        cases,
        failures,
        detail: "split matches a sorted ranking and reconstructs exactly".into(),
    });

    let mut failures = 0;
    for _ in 0..cases {
        let k = rng.random_range(2..8);
        let p = random_simplex(&mut rng, k);
        let m = certainty_maps(&Tensor::new(vec![k, 1, 1], p.clone())?)?;
        let mut s = p.clone();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let (u, r) = (m.certainty[0], m.range[0]);
        let ok = u == s[0] - s[1] && r == s[0] - s[k - 1] && u <= r && (0.0..=1.0).contains(&u) && r <= 1.0;
        if !ok {
            failures += 1;
        }
    }
    out.push(OracleOutcome {
        name: "certainty".into(),
        cases,
        failures,
        detail: "margins match a per-pixel sort and satisfy u ≤ Δ".into(),
    });

    let mut failures = 0;
    for _ in 0..cases {
        let classes: Vec<ClassId> = (0..rng.random_range(2..6)).collect();
        let n = rng.random_range(1..64);
        let draw = |rng: &mut ChaCha8Rng| LabelMap {
            height: 1,
            width: n,
            data: (0..n).map(|_| classes[rng.random_range(0..classes.len())]).collect(),
        };
        let (pred, gt) = (draw(&mut rng), draw(&mut rng));
        let mut cm = ConfusionMatrix::new(classes.clone(), None);
        cm.accumulate(&pred, &gt)?;
        for &c in &classes {
            let tp = pred.data.iter().zip(&gt.data).filter(|(p, g)| **p == c && **g == c).count();
            let union = pred.data.iter().zip(&gt.data).filter(|(p, g)| **p == c || **g == c).count();
            let want = (union > 0).then(|| tp as f64 / union as f64);
            if cm.iou(c) != want {
                failures += 1;
                break;
            }
        }
    }
    out.push(OracleOutcome {
        name: "miou".into(),
        cases,
        failures,
        detail: "per-class IoU matches a pixel tally".into(),
    });

    let mut failures = 0;
    let mut absorbing = 0;
    for i in 0..cases {
        let depth = rng.random_range(1..4);
        let cfg = NetConfig {
            in_channels: rng.random_range(1..4),
            widths: (0..depth).map(|_| rng.random_range(2..8)).collect(),
            pool_after: (0..depth).map(|_| rng.random_bool(0.5)).collect(),
            decoupling_stage: Some(0),
            ..NetConfig::default()
        };
        let net = SegNetwork::new(cfg.clone(), rng.random_range(2..4), seed.wrapping_add(i as u64))?;
        let input = Tensor::new(
            vec![cfg.in_channels, 8, 8],
            (0..cfg.in_channels * 64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let rows = net.num_outputs();
        let field = propagate_relevance(&net, &net.forward(&input)?, rng.random_range(0..rows), Depth::DecouplingStage, DEFAULT_EPS)?;
        if !field.fully_conserving() {
            absorbing += 1;
            continue;
        }
        let total = field.terminal().sum();
        if (total - field.seed_total).abs() > 1e-6 * field.seed_total.abs().max(1e-12) {
            failures += 1;
        }
    }
    out.push(OracleOutcome {
        name: "relevance conservation".into(),
        cases,
        failures,
        detail: format!("{absorbing} cases with stabilized denominators skipped"),
    });
    Ok(out)
}
