//! Staged runs over on-disk artifacts, driven by a TOML config with
//! environment overrides.
//!
//! Every stage reads what earlier stages left under the output directory
//! and records the hashes of what it wrote in `manifest.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::communities::{detect_communities, ego_network, read_partitions, write_partitions, CommunityPartition};
use crate::corpus::{
    parse_checkins, parse_edges, select_active_users, ActivityFilter, BBox, CityScope, Corpus, EdgeMode, SocialGraph,
    UserId,
};
use crate::diversity::{bucket_histogram, community_entropy, influence_entropy, EntropyParams};
use crate::error::{Error, Result};
use crate::eval::{fit_models, run_experiment, ExperimentConfig, Protocol, TrainedModel};
use crate::influence::{Baseline, ContextWindow, SocialMobility};
use crate::predict::{Hyper, ModelKind, Strategy};
use crate::synth::{generate, SyntheticSpec};

/// Environment variables `COMLOC_<SECTION>__<KEY>` override config keys.
pub const ENV_PREFIX: &str = "COMLOC_";

pub const SYNTH_CHECKINS: &str = "synth/checkins.tsv";
pub const SYNTH_EDGES: &str = "synth/edges.tsv";
pub const SYNTH_TRUTH: &str = "synth/ground_truth.json";
pub const CORPUS_CHECKINS: &str = "corpus/checkins.tsv";
pub const CORPUS_EDGES: &str = "corpus/edges.tsv";
pub const CORPUS_ACTIVE: &str = "corpus/active_users.txt";
pub const CORPUS_SUMMARY: &str = "corpus/summary.json";
pub const PARTITIONS: &str = "communities/partitions.tsv";
pub const DIVERSITY: &str = "diversity/diversity.csv";
pub const COMMUNITY_ENTROPY_HIST: &str = "diversity/community_entropy_hist.csv";
pub const INFLUENCE_ENTROPY_HIST: &str = "diversity/influence_entropy_hist.csv";
pub const PROFILES: &str = "influence/profiles.csv";
pub const CDF: &str = "influence/cdf.csv";
pub const CDF_PERCENTILES: &str = "influence/cdf_percentiles.csv";
pub const CONTEXT: &str = "influence/context.csv";
pub const CONTEXT_SUMMARY: &str = "influence/context_summary.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const ENTROPY_BUCKETS: &str = "entropy_buckets.csv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CityConfig {
    pub name: String,
    /// `[lat_min, lat_max, lon_min, lon_max]`.
    pub bbox: [f64; 4],
    pub timezone: String,
}

impl Default for CityConfig {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        CityConfig {
            name: "new-york".into(),
            bbox: [spec.city.lat_min, spec.city.lat_max, spec.city.lon_min, spec.city.lon_max],
            timezone: spec.timezone,
        }
    }
}

/// Input files. Without check-ins and edges the run reads the synthetic
/// corpus from the `synth` stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub checkins: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    /// Precomputed partitions, used instead of community detection.
    pub communities_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgesConfig {
    pub mode: EdgeMode,
}

impl Default for EdgesConfig {
    fn default() -> Self {
        EdgesConfig {
            mode: EdgeMode::Undirected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiltersConfig {
    pub min_checkins: usize,
    /// 0 disables the upper bound.
    pub max_checkins: usize,
}

impl Default for FiltersConfig {
    fn default() -> Self {
        let f = ActivityFilter::default();
        FiltersConfig {
            min_checkins: f.min,
            max_checkins: f.max.unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunitiesConfig {
    pub seed: u64,
}

impl Default for CommunitiesConfig {
    fn default() -> Self {
        CommunitiesConfig { seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityConfig {
    /// Order of the community entropy; 1 selects the Shannon limit.
    pub alpha: f64,
    pub bucket_width: f64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            alpha: crate::diversity::DEFAULT_ALPHA,
            bucket_width: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoConfig {
    pub cluster_cutoff_m: f64,
    pub grid_deg: f64,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig {
            cluster_cutoff_m: crate::geo::DEFAULT_CLUSTER_CUTOFF_M,
            grid_deg: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceConfig {
    pub seed: u64,
    /// Size-matched friend samples drawn per community.
    pub virtual_draws: usize,
    /// Random users sampled per location for the distance baseline.
    pub random_users: usize,
    pub cdf_step_m: f64,
    pub cdf_max_m: f64,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            seed: 1,
            virtual_draws: 3,
            random_users: 20,
            cdf_step_m: 25.0,
            cdf_max_m: 5000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub a: ContextWindow,
    pub b: ContextWindow,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            a: ContextWindow::lunch(),
            b: ContextWindow::dinner(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub models: Vec<String>,
    /// Model whose per-user AUC is bucketed by community entropy.
    pub reference_model: String,
    pub seed: u64,
    pub train_ratio: f64,
    /// `chronological` or `kfold`.
    pub protocol: String,
    pub folds: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub epochs: usize,
    pub grad_tol: f64,
    pub hit_radius_m: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        PredictConfig {
            models: e.models.iter().map(ModelKind::id).collect(),
            reference_model: e.reference.id(),
            seed: e.seed,
            train_ratio: e.train_ratio,
            protocol: "chronological".into(),
            folds: 5,
            learning_rate: e.hyper.lr,
            l2: e.hyper.l2,
            epochs: e.hyper.epochs,
            grad_tol: e.hyper.grad_tol,
            hit_radius_m: e.hit_radius_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: String,
    /// Community selection strategy; only used by the community model.
    pub strategy: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: "community".into(),
            strategy: Strategy::Nearest.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub city: CityConfig,
    pub input: InputConfig,
    pub edges: EdgesConfig,
    pub filters: FiltersConfig,
    pub communities: CommunitiesConfig,
    pub diversity: DiversityConfig,
    pub geo: GeoConfig,
    pub influence: InfluenceConfig,
    pub context: ContextConfig,
    pub predict: PredictConfig,
    pub train: TrainConfig,
    /// Generator settings; its city and timezone follow `[city]`.
    pub synth: SyntheticSpec,
}

fn parse_override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, var: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = var.to_ascii_lowercase().split("__").map(str::to_string).collect();
    let dotted = path.join(".");
    if path.iter().any(String::is_empty) {
        return Err(Error::config(dotted, format!("malformed override variable {ENV_PREFIX}{var}")));
    }
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(dotted.clone(), format!("`{p}` is not a section")))?;
    }
    table.insert(last.clone(), parse_override_value(raw));
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, then applies `COMLOC_*` overrides from `env`.
    /// Unrelated variables are ignored.
    pub fn from_toml_str(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::config("<config>", e.message()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| Some((k.strip_prefix(ENV_PREFIX)?.to_string(), v)))
            .collect();
        overrides.sort();
        for (k, v) in &overrides {
            apply_override(&mut root, k, v)?;
        }
        let mut cfg: PipelineConfig = serde_path_to_error::deserialize(toml::Value::Table(root))
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        cfg.synth.city = cfg.bbox()?;
        cfg.synth.timezone = cfg.city.timezone.clone();
        Ok(cfg)
    }

    /// Reads the config file, or starts from defaults, and applies the
    /// process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, std::env::vars())
    }

    fn bbox(&self) -> Result<BBox> {
        let [a, b, c, d] = self.city.bbox;
        BBox::new(a, b, c, d).map_err(|e| Error::config("city.bbox", e.to_string()))
    }

    pub fn scope(&self) -> Result<CityScope> {
        let timezone = self
            .city
            .timezone
            .parse()
            .map_err(|_| Error::config("city.timezone", format!("unknown timezone {:?}", self.city.timezone)))?;
        Ok(CityScope {
            name: self.city.name.clone(),
            bbox: self.bbox()?,
            timezone,
        })
    }

    pub fn activity_filter(&self) -> Result<ActivityFilter> {
        let max = (self.filters.max_checkins > 0).then_some(self.filters.max_checkins);
        ActivityFilter::new(self.filters.min_checkins, max)
    }

    pub fn entropy(&self) -> Result<EntropyParams> {
        if self.diversity.alpha == 1.0 {
            Ok(EntropyParams::Shannon)
        } else {
            EntropyParams::renyi(self.diversity.alpha)
        }
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let p = &self.predict;
        let models = p
            .models
            .iter()
            .map(|m| m.parse().map_err(|_| Error::config("predict.models", format!("unknown model {m:?}"))))
            .collect::<Result<Vec<ModelKind>>>()?;
        if models.is_empty() {
            return Err(Error::config("predict.models", "at least one model is required"));
        }
        let reference = p
            .reference_model
            .parse()
            .map_err(|_| Error::config("predict.reference_model", format!("unknown model {:?}", p.reference_model)))?;
        let protocol = match p.protocol.as_str() {
            "chronological" => Protocol::Chronological,
            "kfold" if p.folds >= 2 => Protocol::KFold { folds: p.folds },
            "kfold" => return Err(Error::config("predict.folds", "need at least 2 folds")),
            other => return Err(Error::config("predict.protocol", format!("unknown protocol {other:?}"))),
        };
        let checks = [
            ("predict.train_ratio", p.train_ratio > 0.0 && p.train_ratio < 1.0, "must lie in (0, 1)"),
            ("predict.learning_rate", p.learning_rate > 0.0, "must be positive"),
            ("predict.l2", p.l2 >= 0.0, "must be non-negative"),
            ("predict.epochs", p.epochs >= 1, "must be at least 1"),
            ("predict.grad_tol", p.grad_tol >= 0.0, "must be non-negative"),
            ("predict.hit_radius_m", p.hit_radius_m > 0.0, "must be positive"),
            ("geo.grid_deg", self.geo.grid_deg > 0.0 && self.geo.grid_deg <= 1.0, "must lie in (0, 1]"),
            ("diversity.bucket_width", self.diversity.bucket_width > 0.0, "must be positive"),
        ];
        if let Some((key, _, msg)) = checks.iter().find(|c| !c.1) {
            return Err(Error::config(*key, *msg));
        }
        Ok(ExperimentConfig {
            models,
            seed: p.seed,
            train_ratio: p.train_ratio,
            cell_deg: self.geo.grid_deg,
            entropy: self.entropy()?,
            bucket_width: self.diversity.bucket_width,
            protocol,
            hyper: Hyper {
                lr: p.learning_rate,
                l2: p.l2,
                epochs: p.epochs,
                grad_tol: p.grad_tol,
            },
            hit_radius_m: p.hit_radius_m,
            reference,
        })
    }

    pub fn train_model(&self) -> Result<ModelKind> {
        let kind: ModelKind = self
            .train
            .model
            .parse()
            .map_err(|_| Error::config("train.model", format!("unknown model {:?}", self.train.model)))?;
        let strategy: Strategy = self
            .train
            .strategy
            .parse()
            .map_err(|_| Error::config("train.strategy", format!("unknown strategy {:?}", self.train.strategy)))?;
        Ok(match kind {
            ModelKind::Community(Strategy::Nearest) => ModelKind::Community(strategy),
            k => k,
        })
    }

    fn check_window(&self, key: &str, w: &ContextWindow) -> Result<()> {
        let checked = match w {
            ContextWindow::Temporal {
                name,
                weekdays,
                start_hour,
                end_hour,
            } => ContextWindow::temporal(name, weekdays, *start_hour, *end_hour).map(drop),
            ContextWindow::Spatial { name, bbox } => BBox::new(bbox.lat_min, bbox.lat_max, bbox.lon_min, bbox.lon_max)
                .and_then(|b| ContextWindow::spatial(name, b, &self.bbox()?))
                .map(drop),
        };
        checked.map_err(|e| match e {
            Error::Config { msg, .. } => Error::config(key, msg),
            other => Error::config(key, other.to_string()),
        })
    }

    /// Checks every key against its documented range and that input
    /// files exist.
    pub fn validate(&self) -> Result<()> {
        self.scope()?;
        self.activity_filter()?;
        self.experiment()?;
        self.train_model()?;
        let g = &self.geo;
        let inf = &self.influence;
        let checks = [
            ("geo.cluster_cutoff_m", g.cluster_cutoff_m > 0.0, "must be positive"),
            ("influence.virtual_draws", inf.virtual_draws >= 1, "must be at least 1"),
            ("influence.random_users", inf.random_users >= 1, "must be at least 1"),
            ("influence.cdf_step_m", inf.cdf_step_m > 0.0, "must be positive"),
            ("influence.cdf_max_m", inf.cdf_max_m >= inf.cdf_step_m, "must be at least cdf_step_m"),
        ];
        if let Some((key, _, msg)) = checks.iter().find(|c| !c.1) {
            return Err(Error::config(*key, *msg));
        }
        self.check_window("context.a", &self.context.a)?;
        self.check_window("context.b", &self.context.b)?;
        if self.context.a.name() == self.context.b.name() {
            return Err(Error::config("context.b", "windows need distinct names"));
        }
        let inputs = [
            ("input.checkins", &self.input.checkins),
            ("input.edges", &self.input.edges),
            ("input.communities_file", &self.input.communities_file),
        ];
        for (key, path) in inputs {
            if let Some(p) = path.as_ref().filter(|p| !p.is_file()) {
                return Err(Error::config(key, format!("no such file {}", p.display())));
            }
        }
        if self.input.checkins.is_some() != self.input.edges.is_some() {
            return Err(Error::config("input", "set both input.checkins and input.edges, or neither"));
        }
        self.synth.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Ingest,
    Communities,
    Diversity,
    Influence,
    Train,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Communities,
        Stage::Diversity,
        Stage::Influence,
        Stage::Train,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Communities => "communities",
            Stage::Diversity => "diversity",
            Stage::Influence => "influence",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    /// Per stage, artifact path relative to the output directory and its
    /// SHA-256.
    pub stages: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub checkin_lines: usize,
    pub malformed_checkins: usize,
    pub out_of_scope: usize,
    pub malformed_edges: usize,
    pub n_checkins: usize,
    pub n_users: usize,
    pub n_active: usize,
    pub n_graph_users: usize,
    pub n_friendships: usize,
}

#[derive(Debug, Serialize)]
struct DiversityRow {
    user_id: UserId,
    n_communities: usize,
    community_entropy: Option<f64>,
    n_influential: Option<usize>,
    influence_entropy: Option<f64>,
}

#[derive(Debug, Serialize)]
struct HistRow {
    bucket_lo: f64,
    bucket_hi: f64,
    n_users: usize,
}

#[derive(Debug, Serialize)]
struct ProfileRow {
    owner_kind: &'static str,
    owner_id: String,
    centroid_lat: f64,
    centroid_lon: f64,
    member_count: usize,
}

#[derive(Debug, Serialize)]
struct CdfRow {
    baseline: &'static str,
    distance_m: f64,
    cdf: f64,
}

#[derive(Debug, Serialize)]
struct PercentileRow {
    baseline: &'static str,
    p25: Option<f64>,
    p50: Option<f64>,
    p75: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ContextCsvRow {
    user_id: UserId,
    sim: Option<f64>,
    entropy_a: Option<f64>,
    entropy_b: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ContextSummary<'a> {
    a: &'a ContextWindow,
    b: &'a ContextWindow,
    n_users: usize,
    mean_similarity: Option<f64>,
    mean_entropy_all: Option<f64>,
    mean_entropy_a: Option<f64>,
    mean_entropy_b: Option<f64>,
}

/// Per-user fitted models of one kind, with the users that were skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub model: String,
    pub fitted: BTreeMap<UserId, TrainedModel>,
    pub skipped: BTreeMap<UserId, String>,
}

struct Ingested {
    corpus: Corpus,
    graph: SocialGraph,
    active: BTreeSet<UserId>,
}

/// A run over one output directory. Loaded artifacts are cached, so
/// chained stages do not re-read or rebuild them.
pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    scope: CityScope,
    data: Option<Ingested>,
    partitions: Option<BTreeMap<UserId, CommunityPartition>>,
    mobility: Option<SocialMobility>,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn model_file(kind: ModelKind) -> String {
    format!("models/{}.json", kind.id().replace(':', "-"))
}

impl Pipeline {
    /// Validates the config; fails with a config error naming the key.
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let scope = cfg.scope()?;
        Ok(Pipeline {
            cfg,
            out: out.into(),
            scope,
            data: None,
            partitions: None,
            mobility: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// The artifact path, or a dependency error naming it and the stage
    /// that produces it.
    fn require(&self, rel: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Dependency {
                path: p,
                stage: stage.name(),
            })
        }
    }

    /// Runs one stage and records its artifacts in the manifest.
    pub fn run(&mut self, stage: Stage) -> Result<Vec<String>> {
        let written = match stage {
            Stage::Synth => self.synth()?,
            Stage::Ingest => self.ingest()?,
            Stage::Communities => self.communities()?,
            Stage::Diversity => self.diversity()?,
            Stage::Influence => self.influence()?,
            Stage::Train => self.train()?,
            Stage::Evaluate => self.evaluate()?,
        };
        self.record(stage, &written)?;
        Ok(written)
    }

    /// Every stage in order; the generator runs only when no input files
    /// are configured.
    pub fn run_all(&mut self) -> Result<()> {
        for stage in Stage::ALL {
            if stage == Stage::Synth && self.cfg.input.checkins.is_some() {
                continue;
            }
            self.run(stage)?;
        }
        Ok(())
    }

    fn record(&self, stage: Stage, written: &[String]) -> Result<()> {
        let path = self.path(MANIFEST);
        let mut manifest: Manifest = fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default();
        manifest.config = serde_json::to_value(&self.cfg)?;
        let hashes = written
            .iter()
            .map(|rel| Ok((rel.clone(), sha256_file(&self.path(rel))?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        manifest.stages.insert(stage.name().to_string(), hashes);
        write_json(&path, &manifest)
    }

    fn synth(&mut self) -> Result<Vec<String>> {
        let corpus = generate(&self.cfg.synth)?;
        corpus.write_to(&self.path("synth"))?;
        Ok(vec![SYNTH_CHECKINS.into(), SYNTH_EDGES.into(), SYNTH_TRUTH.into()])
    }

    fn ingest(&mut self) -> Result<Vec<String>> {
        let (ck_path, ed_path) = match (&self.cfg.input.checkins, &self.cfg.input.edges) {
            (Some(c), Some(e)) => (c.clone(), e.clone()),
            _ => (
                self.require(SYNTH_CHECKINS, Stage::Synth)?,
                self.require(SYNTH_EDGES, Stage::Synth)?,
            ),
        };
        let (checkins, parsed) = parse_checkins(BufReader::new(File::open(&ck_path)?), &self.scope)?;
        let (graph, malformed_edges) = parse_edges(BufReader::new(File::open(&ed_path)?), self.cfg.edges.mode)?;
        let corpus = Corpus::new(self.scope.clone(), checkins);
        let active = select_active_users(&corpus, &self.cfg.activity_filter()?);

        let mut w = create(&self.path(CORPUS_CHECKINS))?;
        for c in corpus.all() {
            let time = c.time.format("%Y-%m-%dT%H:%M:%SZ");
            writeln!(w, "{}\t{time}\t{}\t{}", c.user, c.point.lat, c.point.lon)?;
        }
        w.flush()?;
        let mut w = create(&self.path(CORPUS_EDGES))?;
        for (a, b) in graph.edges() {
            writeln!(w, "{a}\t{b}")?;
        }
        w.flush()?;
        let mut w = create(&self.path(CORPUS_ACTIVE))?;
        for u in &active {
            writeln!(w, "{u}")?;
        }
        w.flush()?;
        let summary = IngestSummary {
            checkin_lines: parsed.lines,
            malformed_checkins: parsed.malformed,
            out_of_scope: parsed.out_of_scope,
            malformed_edges,
            n_checkins: corpus.n_checkins(),
            n_users: corpus.n_users(),
            n_active: active.len(),
            n_graph_users: graph.n_nodes(),
            n_friendships: graph.n_edges(),
        };
        write_json(&self.path(CORPUS_SUMMARY), &summary)?;
        self.data = None;
        self.partitions = None;
        self.mobility = None;
        Ok(vec![
            CORPUS_CHECKINS.into(),
            CORPUS_EDGES.into(),
            CORPUS_ACTIVE.into(),
            CORPUS_SUMMARY.into(),
        ])
    }

    fn ensure_data(&mut self) -> Result<()> {
        if self.data.is_some() {
            return Ok(());
        }
        let ck = self.require(CORPUS_CHECKINS, Stage::Ingest)?;
        let ed = self.require(CORPUS_EDGES, Stage::Ingest)?;
        let ac = self.require(CORPUS_ACTIVE, Stage::Ingest)?;
        let (checkins, _) = parse_checkins(BufReader::new(File::open(ck)?), &self.scope)?;
        let (graph, _) = parse_edges(BufReader::new(File::open(ed)?), EdgeMode::Undirected)?;
        let mut active = BTreeSet::new();
        for line in BufReader::new(File::open(ac)?).lines() {
            let line = line?;
            let u = line
                .parse()
                .map_err(|_| Error::Format(format!("{CORPUS_ACTIVE}: bad user id {line:?}")))?;
            active.insert(u);
        }
        self.data = Some(Ingested {
            corpus: Corpus::new(self.scope.clone(), checkins),
            graph,
            active,
        });
        Ok(())
    }

    fn data(&self) -> &Ingested {
        self.data.as_ref().expect("ensure_data ran")
    }

    fn communities(&mut self) -> Result<Vec<String>> {
        self.ensure_data()?;
        let data = self.data();
        let graph = &data.graph;
        let no_friends = BTreeSet::new();
        let friends_of = |u: UserId| graph.friends(u).unwrap_or(&no_friends);
        let parts: Vec<CommunityPartition> = match &self.cfg.input.communities_file {
            Some(file) => {
                let mut given = read_partitions(BufReader::new(File::open(file)?))?;
                data.active
                    .iter()
                    .map(|&u| match given.remove(&u) {
                        Some(p) => p.validate(friends_of(u)).map(|_| p),
                        None if friends_of(u).is_empty() => Ok(CommunityPartition::new(u, Vec::new())),
                        None => Err(Error::Format(format!("{}: no partition for user {u}", file.display()))),
                    })
                    .collect::<Result<_>>()?
            }
            None => {
                let seed = self.cfg.communities.seed;
                data.active
                    .par_iter()
                    .map(|&u| {
                        if graph.contains(u) {
                            Ok(detect_communities(&ego_network(graph, u)?, seed))
                        } else {
                            Ok(CommunityPartition::new(u, Vec::new()))
                        }
                    })
                    .collect::<Result<_>>()?
            }
        };
        let mut w = create(&self.path(PARTITIONS))?;
        write_partitions(&mut w, &parts)?;
        w.flush()?;
        self.partitions = None;
        self.mobility = None;
        Ok(vec![PARTITIONS.into()])
    }

    fn ensure_partitions(&mut self) -> Result<()> {
        if self.partitions.is_some() {
            return Ok(());
        }
        self.ensure_data()?;
        let path = self.require(PARTITIONS, Stage::Communities)?;
        let mut parts = read_partitions(BufReader::new(File::open(path)?))?;
        for &u in &self.data().active {
            parts.entry(u).or_insert_with(|| CommunityPartition::new(u, Vec::new()));
        }
        self.partitions = Some(parts);
        Ok(())
    }

    fn ensure_mobility(&mut self) -> Result<()> {
        if self.mobility.is_some() {
            return Ok(());
        }
        self.ensure_partitions()?;
        let data = self.data();
        let sm = SocialMobility::build(
            data.corpus.clone(),
            data.graph.clone(),
            self.partitions.as_ref().expect("ensure_partitions ran"),
            self.cfg.geo.cluster_cutoff_m,
            self.cfg.influence.seed,
            self.cfg.influence.virtual_draws,
        )?;
        self.mobility = Some(sm);
        Ok(())
    }

    fn mobility(&self) -> &SocialMobility {
        self.mobility.as_ref().expect("ensure_mobility ran")
    }

    fn diversity(&mut self) -> Result<Vec<String>> {
        self.ensure_mobility()?;
        let sm = self.mobility();
        let entropy = self.cfg.entropy()?;
        let active: Vec<UserId> = self.data().active.iter().copied().collect();
        let rows = active
            .par_iter()
            .map(|&u| {
                let uc = sm.communities(u)?;
                let sizes: Vec<usize> = uc.communities.iter().map(|c| c.members.len()).collect();
                let profile = sm.influence_profile(u, None).ok();
                Ok(DiversityRow {
                    user_id: u,
                    n_communities: sizes.len(),
                    community_entropy: community_entropy(&sizes, entropy).ok(),
                    n_influential: profile.as_ref().map(|p| p.n_influential()),
                    influence_entropy: profile.and_then(|p| influence_entropy(&p).ok()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let width = self.cfg.diversity.bucket_width;
        let hist = |values: Vec<f64>| {
            bucket_histogram(&values, width)
                .into_iter()
                .map(|(bucket_lo, bucket_hi, n_users)| HistRow {
                    bucket_lo,
                    bucket_hi,
                    n_users,
                })
                .collect::<Vec<_>>()
        };
        let ce = hist(rows.iter().filter_map(|r| r.community_entropy).collect());
        let ie = hist(rows.iter().filter_map(|r| r.influence_entropy).collect());
        write_csv(&self.path(DIVERSITY), rows)?;
        write_csv(&self.path(COMMUNITY_ENTROPY_HIST), ce)?;
        write_csv(&self.path(INFLUENCE_ENTROPY_HIST), ie)?;
        Ok(vec![
            DIVERSITY.into(),
            COMMUNITY_ENTROPY_HIST.into(),
            INFLUENCE_ENTROPY_HIST.into(),
        ])
    }

    fn influence(&mut self) -> Result<Vec<String>> {
        self.ensure_mobility()?;
        let sm = self.mobility();
        let active = &self.data().active;
        let inf = &self.cfg.influence;

        let mut profiles = Vec::new();
        for &u in active {
            let own = sm.user_profile(u);
            let uc = sm.communities(u)?;
            let owned = std::iter::once((u.to_string(), &own))
                .chain(uc.communities.iter().enumerate().map(|(i, c)| (format!("{u}#{i}"), &c.profile)));
            for (owner_id, p) in owned {
                for (c, &n) in p.centroids.iter().zip(&p.member_counts) {
                    profiles.push(ProfileRow {
                        owner_kind: p.owner_kind.as_str(),
                        owner_id: owner_id.clone(),
                        centroid_lat: c.lat,
                        centroid_lon: c.lon,
                        member_count: n,
                    });
                }
            }
        }
        write_csv(&self.path(PROFILES), profiles)?;

        let cdf = sm.distance_cdf_compare(active, inf.random_users, inf.seed);
        let rows = cdf
            .export(inf.cdf_step_m, inf.cdf_max_m)
            .into_iter()
            .map(|(b, distance_m, cdf)| CdfRow {
                baseline: b.as_str(),
                distance_m,
                cdf,
            });
        write_csv(&self.path(CDF), rows)?;
        let pct = Baseline::ALL.into_iter().map(|b| PercentileRow {
            baseline: b.as_str(),
            p25: cdf.percentile(b, 0.25),
            p50: cdf.percentile(b, 0.5),
            p75: cdf.percentile(b, 0.75),
        });
        write_csv(&self.path(CDF_PERCENTILES), pct)?;

        let (a, b) = (&self.cfg.context.a, &self.cfg.context.b);
        let report = sm.context_report(active, a, b);
        let rows = report.rows.iter().map(|r| ContextCsvRow {
            user_id: r.user,
            sim: r.similarity,
            entropy_a: r.entropy_a,
            entropy_b: r.entropy_b,
        });
        write_csv(&self.path(CONTEXT), rows)?;
        let summary = ContextSummary {
            a,
            b,
            n_users: report.rows.len(),
            mean_similarity: report.mean_similarity,
            mean_entropy_all: report.mean_entropy_all,
            mean_entropy_a: report.mean_entropy_a,
            mean_entropy_b: report.mean_entropy_b,
        };
        write_json(&self.path(CONTEXT_SUMMARY), &summary)?;
        Ok(vec![
            PROFILES.into(),
            CDF.into(),
            CDF_PERCENTILES.into(),
            CONTEXT.into(),
            CONTEXT_SUMMARY.into(),
        ])
    }

    fn train(&mut self) -> Result<Vec<String>> {
        self.ensure_mobility()?;
        let kind = self.cfg.train_model()?;
        let exp = self.cfg.experiment()?;
        let fits = fit_models(self.mobility(), &self.data().active, kind, &exp);
        let mut dump = ModelDump {
            model: kind.id(),
            fitted: BTreeMap::new(),
            skipped: BTreeMap::new(),
        };
        for (u, fit) in fits {
            match fit {
                Ok(m) => {
                    dump.fitted.insert(u, m);
                }
                Err(reason) => {
                    dump.skipped.insert(u, reason);
                }
            }
        }
        let rel = model_file(kind);
        write_json(&self.path(&rel), &dump)?;
        Ok(vec![rel])
    }

    fn evaluate(&mut self) -> Result<Vec<String>> {
        self.ensure_mobility()?;
        let exp = self.cfg.experiment()?;
        let report = run_experiment(self.mobility(), &self.data().active, &exp);
        write_json(&self.path(REPORT_JSON), &report)?;
        let mut w = create(&self.path(REPORT_CSV))?;
        report.write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(&self.path(ENTROPY_BUCKETS))?;
        report.write_buckets_csv(&mut w)?;
        w.flush()?;
        Ok(vec![REPORT_JSON.into(), REPORT_CSV.into(), ENTROPY_BUCKETS.into()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_carry_reference_constants() {
        let cfg = PipelineConfig::from_toml_str("", env(&[])).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.geo.cluster_cutoff_m, 500.0);
        assert_eq!(cfg.geo.grid_deg, 0.001);
        assert_eq!(cfg.diversity.alpha, 10.0);
        assert_eq!(cfg.predict.train_ratio, 0.8);
        assert_eq!(cfg.predict.hit_radius_m, 1000.0);
        assert_eq!(cfg.context.a, ContextWindow::lunch());
        assert_eq!(cfg.filters.min_checkins, 100);
    }

    #[test]
    fn env_overrides_file_values() {
        let text = "[filters]\nmin_checkins = 50\n[city]\nname = \"sf\"\n";
        let cfg = PipelineConfig::from_toml_str(
            text,
            env(&[
                ("COMLOC_FILTERS__MIN_CHECKINS", "20"),
                ("COMLOC_PREDICT__MODELS", "[\"community\", \"psmm\"]"),
                ("COMLOC_CITY__TIMEZONE", "America/Los_Angeles"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.filters.min_checkins, 20);
        assert_eq!(cfg.predict.models, vec!["community", "psmm"]);
        assert_eq!(cfg.city.name, "sf");
        assert_eq!(cfg.synth.timezone, "America/Los_Angeles");
    }

    #[test]
    fn config_errors_name_the_key() {
        let key_of = |r: Result<PipelineConfig>| match r.and_then(|c| c.validate().map(|_| c)) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(key_of(PipelineConfig::from_toml_str("[geo]\ncluster_cutoff_m = -1\n", env(&[]))), "geo.cluster_cutoff_m");
        assert_eq!(key_of(PipelineConfig::from_toml_str("[geo]\ngrid_deg = \"x\"\n", env(&[]))), "geo.grid_deg");
        assert_eq!(key_of(PipelineConfig::from_toml_str("", env(&[("COMLOC_DIVERSITY__ALPHA", "0")]))), "diversity.alpha");
        assert_eq!(key_of(PipelineConfig::from_toml_str("[predict]\nmodels = [\"nope\"]\n", env(&[]))), "predict.models");
        assert_eq!(key_of(PipelineConfig::from_toml_str("[city]\nbbox = [1, 0, 0, 1]\n", env(&[]))), "city.bbox");
        assert_eq!(key_of(PipelineConfig::from_toml_str("[synth]\nn_users = 0\n", env(&[]))), "synth.n_users");
        assert_eq!(
            key_of(PipelineConfig::from_toml_str("[input]\ncheckins = \"/nonexistent\"\nedges = \"/nonexistent\"\n", env(&[]))),
            "input.checkins"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r = PipelineConfig::from_toml_str("[geo]\ncutoff = 3\n", env(&[]));
        assert!(matches!(r, Err(Error::Config { ref key, .. }) if key == "geo.cutoff"), "{r:?}");
    }

    #[test]
    fn alpha_one_is_shannon() {
        let cfg = PipelineConfig::from_toml_str("[diversity]\nalpha = 1.0\n", env(&[])).unwrap();
        assert_eq!(cfg.entropy().unwrap(), EntropyParams::Shannon);
    }

    #[test]
    fn train_strategy_applies_to_community_model() {
        let mut cfg = PipelineConfig::default();
        cfg.train.strategy = "max-con".into();
        assert_eq!(cfg.train_model().unwrap(), ModelKind::Community(Strategy::MaxCon));
        cfg.train.model = "psmm".into();
        assert_eq!(cfg.train_model().unwrap(), ModelKind::Psmm);
    }

    #[test]
    fn missing_stage_output_is_a_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::new(PipelineConfig::default(), dir.path()).unwrap();
        match p.run(Stage::Ingest) {
            Err(Error::Dependency { path, stage }) => {
                assert!(path.ends_with(SYNTH_CHECKINS));
                assert_eq!(stage, "synth");
            }
            other => panic!("{other:?}"),
        }
    }
}
