//! Experiment runner: config parsing, per-seed pipelines, persisted results and
//! paired comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::counterfactual::{
    train_baseline, train_counterfactual, BaselineModel, ClassifierTraining, CounterfactualModel,
    Prediction, TrainingCurve,
};
use crate::data::{
    load_embeddings, split, synthesize, synthesize_features, TrainingSet, ZeroShotDataset,
    ZeroShotTaskSpec,
};
use crate::error::{Error, Result};
use crate::eval::{confusion, report, MetricsReport};
use crate::generator::{
    generate, train_generator, FakeFeatureBatch, FakeOrigin, GeneratorNet, GeneratorTraining,
};
use crate::graph::{
    build_graph, impute, train_gcn, BankPolicy, ClassGraph, FeatureBank, GcnNet, GcnTraining,
    Normalization,
};
use crate::numerics::Matrix;
use crate::rng::substream;

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides `output_dir` of every config when set.
pub const OUTPUT_ENV: &str = "CFZS_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// One classifier on real seen and fake unseen features.
    Baseline,
    /// Counterfactual twin branches with fusion.
    #[default]
    Cf,
    /// Counterfactual with GCN-imputed unseen features.
    Cfg,
}

impl ModelVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::Cf => "cf",
            ModelVariant::Cfg => "cfg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic(ZeroShotTaskSpec),
    /// Real class embeddings with synthesized features. `features` supplies the
    /// feature-generation fields; its class counts are ignored.
    EmbeddingFile {
        path: PathBuf,
        unseen_names: Vec<String>,
        #[serde(default)]
        features: ZeroShotTaskSpec,
    },
}

impl Default for TaskSource {
    fn default() -> Self {
        TaskSource::Synthetic(ZeroShotTaskSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSettings {
    /// Defaults to twice the feature dimension.
    pub hidden_width: Option<usize>,
    pub noise_dim: usize,
    pub fake_samples_per_class: usize,
    pub training: GeneratorTraining,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            hidden_width: None,
            noise_dim: 8,
            fake_samples_per_class: 100,
            training: GeneratorTraining::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphSettings {
    pub threshold: f64,
    pub normalization: Normalization,
    pub bank_policy: BankPolicy,
    /// Defaults to twice the feature dimension.
    pub hidden_width: Option<usize>,
    /// Shift of unseen fake samples toward the GCN-imputed row: 0 keeps the MLP
    /// generator output, 1 centers the samples on the imputed row.
    pub mix: f64,
    pub training: GcnTraining,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            normalization: Normalization::Symmetric,
            bank_policy: BankPolicy::RunningMean,
            hidden_width: None,
            mix: 0.5,
            training: GcnTraining::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run_id: Option<String>,
    pub task: TaskSource,
    pub model_variant: ModelVariant,
    pub generator: GeneratorSettings,
    pub graph: GraphSettings,
    pub classifier: ClassifierTraining,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: None,
            task: TaskSource::default(),
            model_variant: ModelVariant::Cf,
            generator: GeneratorSettings::default(),
            graph: GraphSettings::default(),
            classifier: ClassifierTraining::default(),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("loading {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        match &self.task {
            TaskSource::Synthetic(spec) => {
                spec.validate()?;
                if self.model_variant == ModelVariant::Cfg && spec.n_classes < 3 {
                    return Err(Error::Config(
                        "the cfg variant needs at least 3 classes for a meaningful graph".into(),
                    ));
                }
            }
            TaskSource::EmbeddingFile { unseen_names, .. } => {
                if unseen_names.is_empty() {
                    return Err(Error::Config("unseen_names must not be empty".into()));
                }
            }
        }
        self.generator.training.optimizer.validate()?;
        if self.generator.fake_samples_per_class < 2 {
            return Err(Error::Config(
                "fake_samples_per_class must be at least 2".into(),
            ));
        }
        self.classifier.validate()?;
        if self.model_variant == ModelVariant::Cfg {
            self.graph.training.optimizer.validate()?;
            if !(0.0..=1.0).contains(&self.graph.mix) {
                return Err(Error::Config("graph.mix must lie in [0, 1]".into()));
            }
            if !(self.graph.threshold > -1.0 && self.graph.threshold < 1.0) {
                return Err(Error::Config("graph.threshold must lie in (-1, 1)".into()));
            }
        }
        Ok(())
    }

    /// Stable identifier: the configured `run_id`, or variant plus a config hash.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let mut echo = self.clone();
        echo.output_dir = PathBuf::new();
        let text = serde_json::to_string(&echo).expect("config serializes");
        let hash = text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        });
        format!("{}-{:08x}", self.model_variant.as_str(), hash as u32)
    }

    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }
}

/// Builds the dataset for one seed. The seed replaces the task's own seed.
pub fn prepare_dataset(config: &ExperimentConfig, seed: u64) -> Result<ZeroShotDataset> {
    match &config.task {
        TaskSource::Synthetic(spec) => synthesize(&ZeroShotTaskSpec {
            seed,
            ..spec.clone()
        }),
        TaskSource::EmbeddingFile {
            path,
            unseen_names,
            features,
        } => {
            let embeddings = load_embeddings(path)?;
            if config.model_variant == ModelVariant::Cfg && embeddings.len() < 3 {
                return Err(Error::Config(
                    "the cfg variant needs at least 3 classes for a meaningful graph".into(),
                ));
            }
            let spec = ZeroShotTaskSpec {
                seed,
                n_classes: embeddings.len(),
                embedding_dim: embeddings[0].vector.len(),
                ..features.clone()
            };
            let pool = synthesize_features(&embeddings, &spec)?;
            let mut ds = split(&pool, unseen_names)?;
            ds.spec = Some(spec);
            Ok(ds)
        }
    }
}

/// Class graph of the configured task (first seed).
pub fn adjacency_for(config: &ExperimentConfig) -> Result<(ClassGraph, Vec<String>)> {
    let ds = prepare_dataset(config, config.seeds[0])?;
    let graph = build_graph(&ds.embeddings, config.graph.threshold)?;
    Ok((graph, ds.class_names()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[allow(clippy::large_enum_variant)]
pub enum TrainedModel {
    Baseline(BaselineModel),
    Counterfactual(CounterfactualModel),
}

impl TrainedModel {
    pub fn predict(&self, features: &Matrix) -> Result<Prediction> {
        match self {
            TrainedModel::Baseline(m) => m.predict(features),
            TrainedModel::Counterfactual(m) => m.predict(features),
        }
    }
}

/// Everything one seed's training produces.
#[derive(Clone, Debug)]
pub struct TrainedVariant {
    pub model: TrainedModel,
    pub generator: GeneratorNet,
    pub generator_curve: Vec<f64>,
    pub classifier_curve: TrainingCurve,
    pub fakes: FakeFeatureBatch,
    pub graph: Option<ClassGraph>,
    /// Unseen classes the GCN could not reach; they keep MLP features.
    pub isolated_unseen: Vec<usize>,
}

/// Fake features for the cfg variant: unseen samples shifted toward the GCN imputation.
fn gcn_adjusted_fakes<T: TrainingSet + ?Sized>(
    config: &ExperimentConfig,
    data: &T,
    mut fakes: FakeFeatureBatch,
    seed: u64,
) -> Result<(FakeFeatureBatch, ClassGraph, Vec<usize>)> {
    let settings = &config.graph;
    let graph = build_graph(data.embeddings(), settings.threshold)?;
    let bank = FeatureBank::from_training(data, settings.bank_policy)?;
    let l = data.feature_dim();
    let mut rng = substream(seed, "gcn");
    let mut net = GcnNet::new(
        l,
        settings.hidden_width.unwrap_or(2 * l),
        settings.normalization,
        &mut rng,
    );
    train_gcn(&mut net, &graph, &bank, &settings.training)?;
    let unseen: Vec<usize> = data.unseen_ids().iter().copied().collect();
    let (imputed, isolated) = impute(&net, &graph, &bank, &unseen)?;
    for (k, &u) in unseen.iter().enumerate() {
        if isolated.contains(&u) {
            log::warn!("class {u}: no graph neighbor, keeping generator features");
            continue;
        }
        let rows: Vec<usize> = (0..fakes.len())
            .filter(|&i| fakes.class_ids[i] == u)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mean = fakes
            .features
            .select_rows(&rows)
            .sum_rows()
            .scale(1.0 / rows.len() as f64);
        let target = imputed.features.row(k);
        for &r in &rows {
            for (j, v) in fakes.features.row_mut(r).iter_mut().enumerate() {
                *v += settings.mix * (target[j] - mean.get(0, j));
            }
        }
    }
    fakes.origin = FakeOrigin::Mixed;
    Ok((fakes, graph, isolated))
}

/// Trains the configured variant on `data`. Real features are read only through `data`.
pub fn train_variant<T: TrainingSet + ?Sized>(
    config: &ExperimentConfig,
    data: &T,
    seed: u64,
) -> Result<TrainedVariant> {
    let l = data.feature_dim();
    let w = data.embeddings()[0].vector.len();
    let settings = &config.generator;
    let mut gen_rng = substream(seed, "generator");
    let mut generator = GeneratorNet::new(
        w,
        settings.noise_dim,
        settings.hidden_width.unwrap_or(2 * l),
        l,
        &mut gen_rng,
    );
    let generator_curve = train_generator(&mut generator, data, &settings.training, &mut gen_rng)
        .map_err(|e| e.context("training generator"))?;

    let all: Vec<usize> = (0..data.n_classes()).collect();
    let mut noise_rng = substream(seed, "noise");
    let fakes = generate(
        &generator,
        data.embeddings(),
        &all,
        settings.fake_samples_per_class,
        &mut noise_rng,
    )?;

    let (fakes, graph, isolated_unseen) = if config.model_variant == ModelVariant::Cfg {
        let (f, g, i) = gcn_adjusted_fakes(config, data, fakes, seed)
            .map_err(|e| e.context("graph imputation"))?;
        (f, Some(g), i)
    } else {
        (fakes, None, Vec::new())
    };

    let mut train_rng = substream(seed, "training");
    let (model, classifier_curve) = match config.model_variant {
        ModelVariant::Baseline => {
            let (m, curve) = train_baseline(data, &fakes, &config.classifier, &mut train_rng)
                .map_err(|e| e.context("training baseline"))?;
            (
                TrainedModel::Baseline(m),
                TrainingCurve {
                    rl: curve,
                    ..Default::default()
                },
            )
        }
        ModelVariant::Cf | ModelVariant::Cfg => {
            let (m, curve) = train_counterfactual(data, &fakes, &config.classifier, &mut train_rng)
                .map_err(|e| e.context("training counterfactual classifiers"))?;
            (TrainedModel::Counterfactual(m), curve)
        }
    };
    Ok(TrainedVariant {
        model,
        generator,
        generator_curve,
        classifier_curve,
        fakes,
        graph,
        isolated_unseen,
    })
}

pub fn evaluate(model: &TrainedModel, dataset: &ZeroShotDataset) -> Result<MetricsReport> {
    let (x, y) = dataset.test_matrix()?;
    let pred = model.predict(&x)?;
    let conf = confusion(&pred.classes, &y, dataset.n_classes())?;
    Ok(report(&conf, &dataset.unseen_ids))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stddev: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub metrics_csv: PathBuf,
    pub per_class_csv: PathBuf,
    pub result_json: PathBuf,
    pub bundle_json: PathBuf,
    pub adjacency_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub unseen_ids: Vec<usize>,
    pub seeds: Vec<SeedResult>,
    pub aggregate: BTreeMap<String, Aggregate>,
    pub wall_clock_secs: f64,
    pub artifacts: ArtifactPaths,
}

impl RunResult {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push("result.json");
        }
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn metric_values(&self, name: &str) -> Vec<Option<f64>> {
        self.seeds
            .iter()
            .map(|s| metric(&s.metrics, name))
            .collect()
    }
}

pub const METRICS: [&str; 5] = [
    "miou_overall",
    "miou_seen",
    "miou_unseen",
    "hiou",
    "bias_gap",
];

pub fn metric(m: &MetricsReport, name: &str) -> Option<f64> {
    match name {
        "miou_overall" => m.miou_overall,
        "miou_seen" => m.miou_seen,
        "miou_unseen" => m.miou_unseen,
        "hiou" => m.hiou,
        "bias_gap" => m.bias_gap,
        _ => None,
    }
}

fn aggregate(seeds: &[SeedResult]) -> BTreeMap<String, Aggregate> {
    METRICS
        .iter()
        .filter_map(|&name| {
            let vals: Vec<f64> = seeds
                .iter()
                .filter_map(|s| metric(&s.metrics, name))
                .collect();
            if vals.is_empty() {
                return None;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Some((
                name.to_string(),
                Aggregate {
                    mean,
                    stddev: var.sqrt(),
                    count: vals.len(),
                },
            ))
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", 100.0 * x)).unwrap_or_default()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn metrics_csv(
    run_id: &str,
    variant: ModelVariant,
    n_unseen: usize,
    seeds: &[SeedResult],
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run_id",
        "seed",
        "model_variant",
        "n_unseen",
        "miou_overall",
        "miou_seen",
        "miou_unseen",
        "hiou",
        "bias_gap",
    ])?;
    for s in seeds {
        let m = &s.metrics;
        w.write_record([
            run_id.to_string(),
            s.seed.to_string(),
            variant.as_str().to_string(),
            n_unseen.to_string(),
            pct(m.miou_overall),
            pct(m.miou_seen),
            pct(m.miou_unseen),
            pct(m.hiou),
            pct(m.bias_gap),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

fn per_class_csv(
    run_id: &str,
    names: &[String],
    unseen: &[usize],
    seeds: &[SeedResult],
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["run_id", "seed", "class_id", "class_name", "unseen", "iou"])?;
    for s in seeds {
        for (k, iou) in s.metrics.per_class_iou.iter().enumerate() {
            w.write_record([
                run_id.to_string(),
                s.seed.to_string(),
                k.to_string(),
                names[k].clone(),
                unseen.contains(&k).to_string(),
                pct(*iou),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

#[derive(Serialize)]
struct BundleEntry<'a> {
    seed: u64,
    model: &'a TrainedModel,
    generator: &'a GeneratorNet,
}

#[derive(Serialize)]
struct BundleFile<'a> {
    run_id: &'a str,
    config: &'a ExperimentConfig,
    bundles: Vec<BundleEntry<'a>>,
}

/// Runs every seed, writing `metrics.csv`, `per_class.csv`, `result.json` and
/// `bundle.json` under `<output root>/<run_id>/`. Metrics of finished seeds are
/// flushed after each seed so a failing run leaves its partial results behind.
pub fn run(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let started = Instant::now();
    let run_id = config.run_id();
    let dir = config.output_root().join(&run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let artifacts = ArtifactPaths {
        metrics_csv: dir.join("metrics.csv"),
        per_class_csv: dir.join("per_class.csv"),
        result_json: dir.join("result.json"),
        bundle_json: dir.join("bundle.json"),
        adjacency_csv: (config.model_variant == ModelVariant::Cfg)
            .then(|| dir.join("adjacency.csv")),
    };

    let mut seeds = Vec::with_capacity(config.seeds.len());
    let mut trained = Vec::with_capacity(config.seeds.len());
    let mut class_names = Vec::new();
    let mut unseen_ids = Vec::new();
    for &seed in &config.seeds {
        let t0 = Instant::now();
        let outcome = (|| -> Result<_> {
            let ds = prepare_dataset(config, seed)?;
            let variant = train_variant(config, &ds, seed)?;
            let metrics = evaluate(&variant.model, &ds)?;
            Ok((ds, variant, metrics))
        })()
        .map_err(|e| e.context(format!("run {run_id}, seed {seed}")))?;
        let (ds, variant, metrics) = outcome;
        if class_names.is_empty() {
            class_names = ds.class_names();
            unseen_ids = ds.unseen_ids.iter().copied().collect();
            if let (Some(path), Some(graph)) = (&artifacts.adjacency_csv, &variant.graph) {
                write_file(path, graph.to_csv(&class_names)?.as_bytes())?;
            }
        }
        log::info!(
            "{run_id} seed {seed}: unseen mIoU {} hIoU {}",
            pct(metrics.miou_unseen),
            pct(metrics.hiou)
        );
        seeds.push(SeedResult {
            seed,
            metrics,
            wall_clock_secs: t0.elapsed().as_secs_f64(),
        });
        trained.push((seed, variant));
        write_file(
            &artifacts.metrics_csv,
            &metrics_csv(&run_id, config.model_variant, unseen_ids.len(), &seeds)?,
        )?;
    }
    write_file(
        &artifacts.per_class_csv,
        &per_class_csv(&run_id, &class_names, &unseen_ids, &seeds)?,
    )?;
    let bundle = BundleFile {
        run_id: &run_id,
        config,
        bundles: trained
            .iter()
            .map(|(seed, v)| BundleEntry {
                seed: *seed,
                model: &v.model,
                generator: &v.generator,
            })
            .collect(),
    };
    write_file(
        &artifacts.bundle_json,
        serde_json::to_string(&bundle)?.as_bytes(),
    )?;

    let result = RunResult {
        run_id,
        config: config.clone(),
        class_names,
        unseen_ids,
        aggregate: aggregate(&seeds),
        seeds,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        artifacts,
    };
    write_file(
        &result.artifacts.result_json,
        serde_json::to_string_pretty(&result)?.as_bytes(),
    )?;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b - mean_a`.
    pub delta: f64,
    /// Seeds where `b` beats `a` (for `bias_gap`, where `b` is smaller).
    pub wins_b: usize,
    pub seeds: usize,
    pub per_seed_delta: Vec<Option<f64>>,
}

impl MetricDelta {
    /// True when `b` improves on `a` in the mean.
    pub fn improved(&self) -> bool {
        if self.metric == "bias_gap" {
            self.delta < 0.0
        } else {
            self.delta > 0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub run_a: String,
    pub run_b: String,
    pub variant_a: ModelVariant,
    pub variant_b: ModelVariant,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricDelta>,
}

impl Comparison {
    pub fn get(&self, metric: &str) -> Option<&MetricDelta> {
        self.metrics.iter().find(|m| m.metric == metric)
    }

    /// Text table; `*` marks metrics where `b` improves on `a`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} ({}) -> {} ({}), seeds {:?}",
            self.run_a,
            self.variant_a.as_str(),
            self.run_b,
            self.variant_b.as_str(),
            self.seeds
        );
        let _ = writeln!(
            out,
            "{:<14}{:>10}{:>10}{:>10}{:>8}",
            "metric", "a", "b", "delta", "wins"
        );
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{:<14}{:>10.2}{:>10.2}{:>+10.2}{:>5}/{:<2}{}",
                m.metric,
                100.0 * m.mean_a,
                100.0 * m.mean_b,
                100.0 * m.delta,
                m.wins_b,
                m.seeds,
                if m.improved() { " *" } else { "" }
            );
        }
        if let Some(h) = self.get("hiou") {
            let _ = writeln!(out, "per-seed hiou delta:");
            for (seed, d) in self.seeds.iter().zip(&h.per_seed_delta) {
                let _ = writeln!(
                    out,
                    "  seed {seed:<6}{}",
                    d.map(|v| format!("{:+.2}", 100.0 * v))
                        .unwrap_or_else(|| "n/a".into())
                );
            }
        }
        out
    }
}

/// Paired per-metric comparison of two runs over identical seeds and task.
pub fn compare(a: &RunResult, b: &RunResult) -> Result<Comparison> {
    let seeds_a: Vec<u64> = a.seeds.iter().map(|s| s.seed).collect();
    let seeds_b: Vec<u64> = b.seeds.iter().map(|s| s.seed).collect();
    if seeds_a != seeds_b {
        return Err(Error::Invalid(format!(
            "runs cover different seeds: {seeds_a:?} vs {seeds_b:?}"
        )));
    }
    if a.config.task != b.config.task {
        return Err(Error::Invalid("runs use different tasks".into()));
    }
    let metrics = METRICS
        .iter()
        .map(|&name| {
            let va = a.metric_values(name);
            let vb = b.metric_values(name);
            let per_seed_delta: Vec<Option<f64>> = va
                .iter()
                .zip(&vb)
                .map(|(x, y)| Some((*y)? - (*x)?))
                .collect();
            let wins_b = per_seed_delta
                .iter()
                .flatten()
                .filter(|&&d| if name == "bias_gap" { d < 0.0 } else { d > 0.0 })
                .count();
            let mean = |v: &[Option<f64>]| {
                let p: Vec<f64> = v.iter().flatten().copied().collect();
                if p.is_empty() {
                    0.0
                } else {
                    p.iter().sum::<f64>() / p.len() as f64
                }
            };
            let (mean_a, mean_b) = (mean(&va), mean(&vb));
            MetricDelta {
                metric: name.to_string(),
                mean_a,
                mean_b,
                delta: mean_b - mean_a,
                wins_b,
                seeds: seeds_a.len(),
                per_seed_delta,
            }
        })
        .collect();
    Ok(Comparison {
        run_a: a.run_id.clone(),
        run_b: b.run_id.clone(),
        variant_a: a.config.model_variant,
        variant_b: b.config.model_variant,
        seeds: seeds_a,
        metrics,
    })
}
