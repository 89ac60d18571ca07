//! Evaluation sweeps: embeddings × post-processing × tasks × seeds, and the
//! report files they produce.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_bundle, load_link_db, Dataset, EmbeddingMatrix, LinkDatabase, Metadata};
use crate::embed::{fit_pca, random_embed, transform_pca, PcaParams};
use crate::error::{Error, Result};
use crate::metrics::consistency::{consistency_test, select_null_perturbations, Tail};
use crate::metrics::mixing::{ilisi, IlisiParams};
use crate::metrics::recall::{aggregate_perturbations, predicted_links, recall_against_db};
use crate::metrics::reconstruction::{
    spearman_score, structural_integrity, train_decoder, Activation, DecoderHyper, SpearmanAxis,
};
use crate::metrics::separability::{knn_accuracy, topk_accuracy, train_linear_probe, KnnTopMode, ProbeHyper};
use crate::postprocess::{self, CenterMode, PostProcessing};
use crate::preprocess::{lognorm_values, make_probe_split, make_recon_split, SplitSpec, DEFAULT_TARGET_SUM};

pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const BEST: &str = "best";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mixing,
    Probe,
    Consistency,
    Knn,
    Recall,
    Recon,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Mixing,
        Task::Probe,
        Task::Consistency,
        Task::Knn,
        Task::Recall,
        Task::Recon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mixing => "mixing",
            Task::Probe => "probe",
            Task::Consistency => "consistency",
            Task::Knn => "knn",
            Task::Recall => "recall",
            Task::Recon => "recon",
        }
    }

    /// Whether repeated seeds change the result.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Task::Probe | Task::Recon)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingOptions {
    pub perplexity: f64,
    pub null_permutations: usize,
}

impl Default for MixingOptions {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            null_permutations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        let h = ProbeHyper::default();
        Self {
            epochs: h.total_epochs,
            batch_size: h.batch_size,
            lr: h.lr,
            weight_decay: h.weight_decay,
            warmup_epochs: h.warmup_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnOptions {
    pub k: Option<usize>,
    pub mode: KnnTopMode,
}

impl Default for KnnOptions {
    fn default() -> Self {
        Self {
            k: None,
            mode: KnnTopMode::RankedFrequency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyOptions {
    pub null_threshold: f64,
    pub min_null: usize,
    pub alpha: f64,
    pub tail: Tail,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        Self {
            null_threshold: crate::metrics::consistency::DEFAULT_NULL_THRESHOLD,
            min_null: crate::metrics::consistency::DEFAULT_MIN_NULL,
            alpha: crate::metrics::consistency::DEFAULT_ALPHA,
            tail: Tail::Right,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecallOptions {
    pub low_pct: f64,
    pub high_pct: f64,
}

impl Default for RecallOptions {
    fn default() -> Self {
        Self {
            low_pct: 5.0,
            high_pct: 95.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub spearman_axis: SpearmanAxis,
}

impl Default for ReconOptions {
    fn default() -> Self {
        let h = DecoderHyper::default();
        Self {
            epochs: h.total_epochs,
            batch_size: h.batch_size,
            lr: h.lr,
            warmup_epochs: h.warmup_epochs,
            hidden: None,
            activation: Activation::Identity,
            spearman_axis: SpearmanAxis::PerSample,
        }
    }
}

/// One evaluation sweep. Relative paths are resolved against the directory
/// of the config file when loaded with [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub bundle: PathBuf,
    /// Names stored in the bundle are used as is; `pca` and `random` are otherwise computed on the fly.
    pub embeddings: Vec<String>,
    pub post_processing: Vec<PostProcessing>,
    pub tasks: Vec<Task>,
    pub probe_split: Option<PathBuf>,
    pub recon_split: Option<PathBuf>,
    pub databases: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub center_mode: CenterMode,
    pub pca_dim: usize,
    pub pca_seed: u64,
    pub random_dim: usize,
    pub random_seed: u64,
    pub split_seed: u64,
    pub train_frac: f64,
    pub pert_holdout_frac: f64,
    pub mixing: MixingOptions,
    pub probe: ProbeOptions,
    pub knn: KnnOptions,
    pub consistency: ConsistencyOptions,
    pub recall: RecallOptions,
    pub recon: ReconOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bundle: PathBuf::new(),
            embeddings: vec!["pca".into(), "random".into()],
            post_processing: PostProcessing::ALL.to_vec(),
            tasks: Task::ALL.to_vec(),
            probe_split: None,
            recon_split: None,
            databases: Vec::new(),
            seeds: DEFAULT_SEEDS.to_vec(),
            output_dir: PathBuf::from("report"),
            center_mode: CenterMode::PerBatchControl,
            pca_dim: crate::embed::DEFAULT_PCA_DIM,
            pca_seed: 0,
            random_dim: crate::embed::DEFAULT_PCA_DIM,
            random_seed: 0,
            split_seed: 0,
            train_frac: crate::preprocess::DEFAULT_TRAIN_FRAC,
            pert_holdout_frac: 0.2,
            mixing: MixingOptions::default(),
            probe: ProbeOptions::default(),
            knn: KnnOptions::default(),
            consistency: ConsistencyOptions::default(),
            recall: RecallOptions::default(),
            recon: ReconOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.bundle);
        fix(&mut cfg.output_dir);
        if let Some(p) = cfg.probe_split.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.recon_split.as_mut() {
            fix(p);
        }
        cfg.databases.iter_mut().for_each(fix);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument("config: tasks must be non-empty".into()));
        }
        if self.embeddings.is_empty() || self.post_processing.is_empty() {
            return Err(Error::InvalidArgument(
                "config: embeddings and post_processing must be non-empty".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("config: seeds must be non-empty".into()));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::InvalidArgument("config: seeds must be distinct".into()));
        }
        if self.tasks.contains(&Task::Probe) {
            self.probe_hyper(0).validate()?;
        }
        if self.tasks.contains(&Task::Recon) {
            self.decoder_hyper(0).validate()?;
        }
        Ok(())
    }

    fn probe_hyper(&self, seed: u64) -> ProbeHyper {
        ProbeHyper {
            batch_size: self.probe.batch_size,
            lr: self.probe.lr,
            weight_decay: self.probe.weight_decay,
            warmup_epochs: self.probe.warmup_epochs,
            total_epochs: self.probe.epochs,
            seed,
            ..ProbeHyper::default()
        }
    }

    fn decoder_hyper(&self, seed: u64) -> DecoderHyper {
        DecoderHyper {
            batch_size: self.recon.batch_size,
            lr: self.recon.lr,
            warmup_epochs: self.recon.warmup_epochs,
            total_epochs: self.recon.epochs,
            hidden: self.recon.hidden,
            activation: self.recon.activation,
            seed,
            ..DecoderHyper::default()
        }
    }

    fn ilisi_params(&self) -> IlisiParams {
        IlisiParams {
            perplexity: self.mixing.perplexity,
            null_permutations: self.mixing.null_permutations,
            ..IlisiParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub embedding: String,
    pub post_processing: String,
    pub task: Task,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// `(seed, value)` per run.
    pub per_seed: Vec<(u64, f64)>,
    /// For `best` rows: the post-processing that achieved the maximum.
    pub selected: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    pub fn n_errors(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn get(&self, embedding: &str, post_processing: &str, task: Task, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.embedding == embedding && r.post_processing == post_processing && r.task == task && r.metric == metric
        })
    }
}

/// Mean and population standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything a sweep needs besides the config.
pub struct Inputs {
    pub dataset: Dataset,
    pub databases: Vec<LinkDatabase>,
    pub probe_split: Option<SplitSpec>,
    pub recon_split: Option<SplitSpec>,
}

impl Inputs {
    /// Loads the bundle, link databases and split files named in `cfg`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dataset = load_bundle(&cfg.bundle)?;
        let databases = cfg
            .databases
            .iter()
            .map(|p| load_link_db(p).map(|l| l.db))
            .collect::<Result<Vec<_>>>()?;
        let read_split = |p: &Option<PathBuf>| -> Result<Option<SplitSpec>> {
            p.as_ref()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    SplitSpec::from_json(&text)
                })
                .transpose()
        };
        Ok(Self {
            dataset,
            databases,
            probe_split: read_split(&cfg.probe_split)?,
            recon_split: read_split(&cfg.recon_split)?,
        })
    }
}

/// Materializes an embedding by name. Stored embeddings win; otherwise
/// `pca` and `random` are computed from the config.
pub fn resolve_embedding(dataset: &Dataset, name: &str, cfg: &RunConfig) -> Result<EmbeddingMatrix> {
    if let Some(stored) = dataset.embeddings.get(name) {
        return Ok(stored.clone());
    }
    match name {
        "pca" => {
            let expr = dataset.expression()?;
            let d = cfg.pca_dim.min(expr.n_samples()).min(expr.n_genes());
            if d < cfg.pca_dim {
                log::warn!("pca dim reduced from {} to {d} by data shape", cfg.pca_dim);
            }
            let model = fit_pca(expr, &PcaParams::new(d, cfg.pca_seed))?;
            transform_pca(&model, expr)
        }
        "random" => random_embed(dataset.n_samples(), cfg.random_dim, cfg.random_seed),
        other => dataset.embedding(other).cloned(),
    }
}

type TaskValues = Vec<(String, f64)>;

struct Context<'a> {
    cfg: &'a RunConfig,
    inputs: &'a Inputs,
    probe_split: SplitSpec,
    recon_split: Option<SplitSpec>,
    lognorm: Option<ndarray::Array2<f64>>,
}

/// Runs the sweep in `cfg` on preloaded inputs. Fatal problems (bad config,
/// unusable splits) return an error; per-cell failures are annotated.
pub fn run_pipeline(cfg: &RunConfig, inputs: &Inputs) -> Result<MetricReport> {
    cfg.validate()?;
    let meta = &inputs.dataset.metadata;
    let needs = |t: Task| cfg.tasks.contains(&t);
    let probe_split = match &inputs.probe_split {
        Some(s) => s.clone(),
        None => make_probe_split(meta, cfg.train_frac, cfg.split_seed)?,
    };
    let recon_split = if needs(Task::Recon) {
        match &inputs.recon_split {
            Some(s) => Some(s.clone()),
            None => Some(make_recon_split(meta, cfg.train_frac, cfg.pert_holdout_frac, cfg.split_seed)?),
        }
    } else {
        None
    };
    let lognorm = match (&inputs.dataset.expression, needs(Task::Recon)) {
        (Some(expr), true) => Some(lognorm_values(expr, DEFAULT_TARGET_SUM)?),
        _ => None,
    };
    let ctx = Context {
        cfg,
        inputs,
        probe_split,
        recon_split,
        lognorm,
    };

    let mut tasks = cfg.tasks.clone();
    tasks.sort();
    tasks.dedup();

    let mut rows = Vec::new();
    for name in &cfg.embeddings {
        let base = resolve_embedding(&inputs.dataset, name, cfg);
        let mut per_pp: Vec<(PostProcessing, Vec<ReportRow>)> = Vec::new();
        for &pp in &cfg.post_processing {
            let processed = base
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|b| postprocess::apply(pp, b, meta, cfg.center_mode).map_err(|e| e.to_string()));
            let cells: Vec<Vec<ReportRow>> = tasks
                .par_iter()
                .map(|&task| match &processed {
                    Ok(p) => run_cell(&ctx, name, pp, task, &p.embedding),
                    Err(e) => vec![error_row(name, pp.as_str(), task, e.clone())],
                })
                .collect();
            per_pp.push((pp, cells.into_iter().flatten().collect()));
        }
        for &task in &tasks {
            let task_rows: Vec<&ReportRow> = per_pp
                .iter()
                .flat_map(|(_, r)| r.iter())
                .filter(|r| r.task == task)
                .collect();
            rows.extend(task_rows.iter().map(|r| (*r).clone()));
            rows.extend(best_rows(name, task, &task_rows));
        }
    }
    Ok(MetricReport { rows })
}

fn error_row(embedding: &str, pp: &str, task: Task, error: String) -> ReportRow {
    log::error!("{embedding}/{pp}/{task}: {error}");
    ReportRow {
        embedding: embedding.to_string(),
        post_processing: pp.to_string(),
        task,
        metric: "*".into(),
        mean: None,
        std: None,
        per_seed: Vec::new(),
        selected: None,
        error: Some(error),
    }
}

fn run_cell(ctx: &Context<'_>, name: &str, pp: PostProcessing, task: Task, emb: &EmbeddingMatrix) -> Vec<ReportRow> {
    let seeds = &ctx.cfg.seeds;
    let runs: Result<Vec<(u64, TaskValues)>> = if task.is_stochastic() {
        seeds
            .iter()
            .map(|&s| evaluate(ctx, task, emb, s).map(|v| (s, v)))
            .collect()
    } else {
        evaluate(ctx, task, emb, seeds[0]).map(|v| seeds.iter().map(|&s| (s, v.clone())).collect())
    };
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return vec![error_row(name, pp.as_str(), task, e.to_string())],
    };
    let metrics: Vec<String> = runs[0].1.iter().map(|(m, _)| m.clone()).collect();
    metrics
        .iter()
        .enumerate()
        .map(|(k, metric)| {
            let per_seed: Vec<(u64, f64)> = runs.iter().map(|(s, v)| (*s, v[k].1)).collect();
            let values: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
            let (mean, std) = mean_std(&values);
            ReportRow {
                embedding: name.to_string(),
                post_processing: pp.as_str().to_string(),
                task,
                metric: metric.clone(),
                mean: Some(mean),
                std: Some(std),
                per_seed,
                selected: None,
                error: None,
            }
        })
        .collect()
}

/// Max over post-processings of each metric; higher is better for all of them.
fn best_rows(embedding: &str, task: Task, rows: &[&ReportRow]) -> Vec<ReportRow> {
    let mut metrics: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.error.is_none()) {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
    }
    if metrics.is_empty() {
        return vec![ReportRow {
            embedding: embedding.to_string(),
            post_processing: BEST.into(),
            task,
            metric: "*".into(),
            mean: None,
            std: None,
            per_seed: Vec::new(),
            selected: None,
            error: Some("no post-processing produced a value".into()),
        }];
    }
    metrics
        .into_iter()
        .map(|m| {
            let winner = rows
                .iter()
                .filter(|r| r.metric == m && r.mean.is_some_and(f64::is_finite))
                .fold(None::<&ReportRow>, |best, r| match best {
                    Some(b) if b.mean >= r.mean => Some(b),
                    _ => Some(r),
                });
            match winner {
                Some(w) => ReportRow {
                    post_processing: BEST.into(),
                    selected: Some(w.post_processing.clone()),
                    ..(*w).clone()
                },
                None => ReportRow {
                    embedding: embedding.to_string(),
                    post_processing: BEST.into(),
                    task,
                    metric: m.to_string(),
                    mean: None,
                    std: None,
                    per_seed: Vec::new(),
                    selected: None,
                    error: Some("no finite value".into()),
                },
            }
        })
        .collect()
}

fn labels(meta: &Metadata, rows: &[usize]) -> Vec<String> {
    rows.iter().map(|&r| meta.get(r).perturbation.clone()).collect()
}

fn non_control(meta: &Metadata, rows: Vec<usize>) -> Vec<usize> {
    rows.into_iter().filter(|&r| !meta.get(r).is_control).collect()
}

fn evaluate(ctx: &Context<'_>, task: Task, emb: &EmbeddingMatrix, seed: u64) -> Result<TaskValues> {
    let cfg = ctx.cfg;
    let dataset = &ctx.inputs.dataset;
    let meta = &dataset.metadata;
    let x = emb.values().view();
    match task {
        Task::Mixing => {
            let (_, codes) = meta.batch_codes();
            let s = ilisi(x, &codes, &cfg.ilisi_params())?;
            let normalized = s
                .normalized
                .ok_or_else(|| Error::InsufficientData("mixing needs at least 2 batches".into()))?;
            Ok(vec![
                ("ilisi".into(), normalized),
                ("ilisi_raw".into(), s.raw),
                ("ilisi_by_batches".into(), s.normalized_by_batches.unwrap_or(f64::NAN)),
            ])
        }
        Task::Probe => {
            let (train, test) = ctx.probe_split.rows(meta);
            let (train, test) = (non_control(meta, train), non_control(meta, test));
            let train_x = x.select(Axis(0), &train);
            let test_x = x.select(Axis(0), &test);
            let model = train_linear_probe(train_x.view(), &labels(meta, &train), &cfg.probe_hyper(seed))?;
            let acc = topk_accuracy(&model, test_x.view(), &labels(meta, &test), &[1, 5])?;
            Ok(vec![("top1".into(), acc[0]), ("top5".into(), acc[1])])
        }
        Task::Knn => {
            let (train, test) = ctx.probe_split.rows(meta);
            let (train, test) = (non_control(meta, train), non_control(meta, test));
            let acc = knn_accuracy(
                x.select(Axis(0), &train).view(),
                &labels(meta, &train),
                x.select(Axis(0), &test).view(),
                &labels(meta, &test),
                cfg.knn.k,
                &[1, 5],
                cfg.knn.mode,
            )?;
            Ok(vec![("top1".into(), acc[0]), ("top5".into(), acc[1])])
        }
        Task::Consistency => {
            let c = &cfg.consistency;
            let sel = select_null_perturbations(dataset.expression()?, meta, c.null_threshold, c.min_null)?;
            let r = consistency_test(x, meta, &sel.null_set, c.alpha, c.tail)?;
            Ok(vec![("fraction_significant".into(), r.fraction_significant)])
        }
        Task::Recall => {
            if ctx.inputs.databases.is_empty() {
                return Err(Error::InvalidArgument("recall needs at least one link database".into()));
            }
            let map = aggregate_perturbations(x, meta)?;
            let predicted = predicted_links(&map, cfg.recall.low_pct, cfg.recall.high_pct)?;
            let universe: BTreeSet<String> = map.labels.iter().cloned().collect();
            ctx.inputs
                .databases
                .iter()
                .map(|db| Ok((format!("recall_{}", db.name()), recall_against_db(&predicted, db, &universe)?.recall)))
                .collect()
        }
        Task::Recon => {
            let split = ctx.recon_split.as_ref().expect("recon split prepared");
            let y = ctx
                .lognorm
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("bundle has no expression payload".into()))?;
            let (train, test) = split.rows(meta);
            let model = train_decoder(
                x.select(Axis(0), &train).view(),
                y.select(Axis(0), &train).view(),
                &cfg.decoder_hyper(seed),
            )?;
            let pred = model.predict(x.select(Axis(0), &test).view())?;
            let actual = y.select(Axis(0), &test);
            let sp = spearman_score(pred.view(), actual.view(), cfg.recon.spearman_axis)?;
            let si = structural_integrity(pred.view(), actual.view(), &meta.subset(&test))?;
            Ok(vec![
                ("spearman".into(), sp.mean),
                ("structural_integrity".into(), si.integrity),
            ])
        }
    }
}

/// `printf("%g")` with `sig` significant digits.
pub fn format_g(x: f64, sig: usize) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let p = sig.max(1);
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        strip_zeros(&format!("{x:.decimals$}"))
    }
}

fn strip_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn opt_g(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format_g(v, 6))
}

pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_SEEDS_TSV: &str = "report_per_seed.tsv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Tsv,
    Json,
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

pub fn report_tsv(report: &MetricReport) -> String {
    let mut out = String::from("embedding\tpost_processing\ttask\tmetric\tmean\tstd\tn_seeds\tselected\terror\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.embedding,
            r.post_processing,
            r.task,
            r.metric,
            opt_g(r.mean),
            opt_g(r.std),
            r.per_seed.len(),
            r.selected.as_deref().unwrap_or(""),
            clean(r.error.as_deref().unwrap_or("")),
        ));
    }
    out
}

pub fn report_seeds_tsv(report: &MetricReport) -> String {
    let mut out = String::from("embedding\tpost_processing\ttask\tmetric\tseed\tvalue\n");
    for r in &report.rows {
        for (seed, v) in &r.per_seed {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.embedding,
                r.post_processing,
                r.task,
                r.metric,
                seed,
                format_g(*v, 6)
            ));
        }
    }
    out
}

/// Writes the report in each format into `dir`; returns the written paths.
pub fn emit_report(report: &MetricReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for f in formats {
        match f {
            ReportFormat::Tsv => {
                write(REPORT_TSV, report_tsv(report))?;
                write(REPORT_SEEDS_TSV, report_seeds_tsv(report))?;
            }
            ReportFormat::Json => {
                let mut text = serde_json::to_string_pretty(report)?;
                text.push('\n');
                write(REPORT_JSON, text)?;
            }
        }
    }
    Ok(written)
}

pub fn read_report_json(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Group rows by `(embedding, task)` for display.
pub fn summarize(report: &MetricReport) -> BTreeMap<(String, Task), Vec<&ReportRow>> {
    let mut out: BTreeMap<(String, Task), Vec<&ReportRow>> = BTreeMap::new();
    for r in &report.rows {
        out.entry((r.embedding.clone(), r.task)).or_default().push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn format_g_matches_printf() {
        let cases = [
            (0.1, "0.1"),
            (1.0, "1"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001234567, "0.000123457"),
            (0.00001234567, "1.23457e-05"),
            (-2.5, "-2.5"),
            (0.9999995, "1"),
            (999999.5, "1e+06"),
            (1.0 / 3.0, "0.333333"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g(x, 6), want, "{x}");
        }
        assert_eq!(format_g(f64::NAN, 6), "nan");
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]).1, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(RunConfig::from_json(r#"{"tasks": []}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seeds": [1, 1]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let c = RunConfig::from_json(r#"{"tasks": ["mixing"], "post_processing": ["raw", "tvn"]}"#).unwrap();
        assert_eq!(c.tasks, vec![Task::Mixing]);
        assert_eq!(c.seeds, DEFAULT_SEEDS.to_vec());
    }

    #[test]
    fn best_row_takes_max() {
        let row = |pp: &str, v: f64| ReportRow {
            embedding: "e".into(),
            post_processing: pp.into(),
            task: Task::Knn,
            metric: "top1".into(),
            mean: Some(v),
            std: Some(0.0),
            per_seed: vec![(0, v)],
            selected: None,
            error: None,
        };
        let rows = [row("raw", 0.2), row("center", 0.5), row("tvn", 0.5)];
        let refs: Vec<&ReportRow> = rows.iter().collect();
        let best = best_rows("e", Task::Knn, &refs);
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].mean, Some(0.5));
        assert_eq!(best[0].selected.as_deref(), Some("center"));
    }

    #[test]
    fn tsv_one_row() {
        let report = MetricReport {
            rows: vec![ReportRow {
                embedding: "pca".into(),
                post_processing: "raw".into(),
                task: Task::Mixing,
                metric: "ilisi".into(),
                mean: Some(0.5),
                std: Some(0.0),
                per_seed: vec![(0, 0.5)],
                selected: None,
                error: None,
            }],
        };
        let tsv = report_tsv(&report);
        assert_eq!(tsv.lines().count(), 2);
        assert_eq!(tsv.lines().nth(1).unwrap(), "pca\traw\tmixing\tilisi\t0.5\t0\t1\t\t");
    }
}
