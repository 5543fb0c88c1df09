//! Experiment configuration, artifact files and the experiment pipelines.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::improve::{improve_loop, ImproveConfig, ImprovementTrace};
use crate::lang::{build_triplets, Catalog, CatalogEntry, Epsilon, PairsPerSplit, TripletDataset, Vocabulary};
use crate::latent::{accuracy, continue_latent, train_latent, EncoderPair, LatentConfig, LatentRun, PoolEmbeddings};
use crate::reward::{
    auc, learn_reward_comparison, learn_reward_language, EvalSet, LossMode, RewardConfig, RewardContext, RewardRun,
};
use crate::seed::{streams, SeedStream};
use crate::simhuman::{HumanSpec, SimulatedHuman, SimulatedSource};
use crate::world::{self, Features, Split, TrajId, TrajectoryPool, WorldConfig, FEATURE_COUNT};

pub const FORMAT_VERSION: u32 = 1;

pub const POOL_FILE: &str = "pool.json";
pub const TRIPLETS_FILE: &str = "triplets.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardExperimentConfig {
    /// Seeds per simulated human.
    pub seeds: usize,
    pub humans: Vec<HumanSpec>,
    pub learning: RewardConfig,
}

impl Default for RewardExperimentConfig {
    fn default() -> Self {
        RewardExperimentConfig {
            seeds: 3,
            humans: vec![
                HumanSpec { w: [-3.0, 7.5, 5.0, 5.5], beta: 1.0 },
                HumanSpec { w: [5.5, -7.5, -5.0, -3.0], beta: 1.0 },
                HumanSpec { w: [-3.0, -14.5, 5.0, 3.0], beta: 1.0 },
            ],
            learning: RewardConfig::default(),
        }
    }
}

/// Settings for live sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    /// Improve sessions start in the bottom quartile under these weights;
    /// anywhere in the pool when unset.
    pub reference_w: Option<[f64; FEATURE_COUNT]>,
    pub improve_iterations: usize,
    pub learn_iterations: usize,
    /// Learn sessions ask for a rating every this many iterations.
    pub rating_every: usize,
    /// Session logs are appended here when set.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            reference_w: None,
            improve_iterations: 10,
            learn_iterations: 20,
            rating_every: 5,
            log_dir: None,
        }
    }
}

impl ServeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.improve_iterations == 0 || self.learn_iterations == 0 || self.rating_every == 0 {
            return Err(Error::Config("session iteration limits and rating spacing must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub pool_size: usize,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    pub pairs: PairsPerSplit,
    /// Dead-band as a fraction of each feature's training range.
    pub epsilon_fraction: f64,
    /// Optional extra paraphrases (a JSON list of catalog entries).
    pub paraphrases: Option<PathBuf>,
    pub latent: LatentConfig,
    pub improve: ImproveConfig,
    pub reward: RewardExperimentConfig,
    pub serve: ServeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            pool_size: 320,
            split: [0.8, 0.1, 0.1],
            pairs: PairsPerSplit::default(),
            epsilon_fraction: 0.1,
            paraphrases: None,
            latent: LatentConfig::default(),
            improve: ImproveConfig::default(),
            reward: RewardExperimentConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.latent.validate()?;
        self.improve.validate()?;
        self.reward.learning.validate()?;
        if self.reward.seeds == 0 {
            return Err(Error::Config("reward experiment needs at least one seed".into()));
        }
        for h in &self.reward.humans {
            h.validate()?;
        }
        self.serve.validate()?;
        if self.pool_size < 10 {
            return Err(Error::Config(format!("pool size {} is below the minimum of 10", self.pool_size)));
        }
        if !(self.epsilon_fraction > 0.0 && self.epsilon_fraction < 1.0) {
            return Err(Error::Config(format!("epsilon fraction must lie in (0, 1), got {}", self.epsilon_fraction)));
        }
        world::split_counts(self.pool_size, self.split)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn seeds(&self) -> SeedStream {
        SeedStream::new(self.master_seed)
    }
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format_version: u32,
    #[serde(flatten)]
    body: T,
}

pub fn write_json<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let doc = Versioned {
        format_version: FORMAT_VERSION,
        body,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("documents serialize");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &'static str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse = |e: serde_json::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse)?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        message: "missing format_version".into(),
    })?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::FormatVersion {
            kind,
            found: found as u32,
            expected: FORMAT_VERSION,
        });
    }
    let doc: Versioned<T> = serde_json::from_value(value).map_err(parse)?;
    Ok(doc.body)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolDocument {
    pub pool: TrajectoryPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletDocument {
    pub epsilon: Epsilon,
    pub catalog: Catalog,
    pub triplets: TripletDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDocument {
    pub latent: LatentConfig,
    pub best_epoch: usize,
    pub encoder: EncoderPair,
}

/// One row of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub method: String,
    pub seed: String,
    pub x: String,
    pub metric: String,
    pub value: f64,
}

pub const METRIC_HEADER: [&str; 6] = ["experiment", "method", "seed", "x", "metric", "value"];

/// Append-only table of metric rows with a fixed header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn new() -> Self {
        MetricsTable::default()
    }

    pub fn push(
        &mut self,
        experiment: &str,
        method: &str,
        seed: impl fmt::Display,
        x: impl fmt::Display,
        metric: &str,
        value: f64,
    ) {
        self.rows.push(MetricRow {
            experiment: experiment.into(),
            method: method.into(),
            seed: seed.to_string(),
            x: x.to_string(),
            metric: metric.into(),
            value,
        });
    }

    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(METRIC_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| err(e.to_string()))?;
        if header.iter().ne(METRIC_HEADER) {
            return Err(err(format!("unexpected header {header:?}")));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| err(e.to_string()))?;
        Ok(MetricsTable { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        MetricsTable::parse(&text, path)
    }

    /// Values of `metric` for one `(experiment, method, seed)`, by `x`.
    pub fn series(&self, experiment: &str, method: &str, seed: &str, metric: &str) -> Vec<(String, f64)> {
        self.rows
            .iter()
            .filter(|r| r.experiment == experiment && r.method == method && r.seed == seed && r.metric == metric)
            .map(|r| (r.x.clone(), r.value))
            .collect()
    }
}

/// Pool, catalog and triplets produced by [`gen_data`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pool: TrajectoryPool,
    pub epsilon: Epsilon,
    pub catalog: Catalog,
    pub triplets: TripletDataset,
}

impl Dataset {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_catalog(&self.catalog)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(POOL_FILE), &PoolDocument { pool: self.pool.clone() })?;
        write_json(
            &dir.join(TRIPLETS_FILE),
            &TripletDocument {
                epsilon: self.epsilon,
                catalog: self.catalog.clone(),
                triplets: self.triplets.clone(),
            },
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let pool: PoolDocument = read_json(&dir.join(POOL_FILE), "pool")?;
        let t: TripletDocument = read_json(&dir.join(TRIPLETS_FILE), "triplets")?;
        pool.pool.validate()?;
        Ok(Dataset {
            pool: pool.pool,
            epsilon: t.epsilon,
            catalog: t.catalog,
            triplets: t.triplets,
        })
    }

    /// Checks every triplet against recomputed features: both trajectories
    /// in the triplet's split, the named feature moved beyond its dead-band
    /// in the stated direction, and the text belongs to that class.
    pub fn validate_labels(&self) -> Result<()> {
        for split in Split::ALL {
            for t in self.triplets.split(split) {
                let fetch = |id: TrajId| {
                    self.pool
                        .get(id)
                        .filter(|e| e.split == Some(split))
                        .ok_or_else(|| Error::Invalid(format!("triplet trajectory {id} is not in the {} split", split.name())))
                };
                let (a, b) = (fetch(t.a_id)?, fetch(t.b_id)?);
                let fa = world::features(&a.trajectory, &self.pool.config);
                let fb = world::features(&b.trajectory, &self.pool.config);
                let d = t.feature;
                if d >= FEATURE_COUNT || !(t.direction.sign() * (fb.get(d) - fa.get(d)) > self.epsilon.0[d]) {
                    return Err(Error::Invalid(format!(
                        "triplet ({}, {}, {:?}) is not supported by the features",
                        t.a_id, t.b_id, t.text
                    )));
                }
                if self.catalog.class_of(&t.text) != Some(t.class()) {
                    return Err(Error::Invalid(format!("text {:?} is not in class {:?}", t.text, t.class())));
                }
            }
        }
        Ok(())
    }
}

pub fn load_catalog(cfg: &ExperimentConfig) -> Result<Catalog> {
    let mut catalog = Catalog::builtin();
    if let Some(path) = &cfg.paraphrases {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let extra: Vec<CatalogEntry> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        catalog.extend(extra)?;
    }
    Ok(catalog)
}

/// Generates and splits the pool and labels triplets.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    let seeds = cfg.seeds();
    let mut pool = world::generate_pool(&cfg.world, cfg.pool_size, seeds.seed(streams::POOL, 0))?;
    world::split(&mut pool, cfg.split, seeds.seed(streams::SPLIT, 0))?;
    let epsilon = Epsilon::from_train_split(&pool, cfg.epsilon_fraction)?;
    let catalog = load_catalog(cfg)?;
    let triplets = build_triplets(&pool, &catalog, &epsilon, cfg.pairs, seeds.seed(streams::TRIPLETS, 0))?;
    let data = Dataset {
        pool,
        epsilon,
        catalog,
        triplets,
    };
    data.validate_labels()?;
    Ok(data)
}

/// Per-split counts for reporting.
pub fn data_summary(data: &Dataset) -> MetricsTable {
    let mut t = MetricsTable::new();
    for split in Split::ALL {
        let trajs = data.pool.in_split(split).count();
        t.push("data", split.name(), "", "", "trajectories", trajs as f64);
        t.push("data", split.name(), "", "", "triplets", data.triplets.split(split).len() as f64);
    }
    t
}

pub fn latent_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds().seed(streams::LATENT, cfg.latent.seed)
}

/// Trains (or resumes) the encoders; the table holds the per-epoch history
/// and the held-out accuracy of the kept encoder.
pub fn run_train_latent(
    cfg: &ExperimentConfig,
    data: &Dataset,
    frozen_language: bool,
    resume: Option<EncoderPair>,
) -> Result<(LatentRun, MetricsTable)> {
    cfg.validate()?;
    let mut lc = if frozen_language {
        cfg.latent.frozen_language()
    } else {
        cfg.latent.clone()
    };
    lc.seed = latent_seed(cfg);
    let run = match resume {
        Some(enc) => continue_latent(enc, &data.pool, &data.triplets.train, &data.triplets.val, &lc)?,
        None => train_latent(&data.pool, &data.triplets.train, &data.triplets.val, data.vocabulary(), &lc)?,
    };
    let method = if frozen_language { "frozen" } else { "cofinetune" };
    let seed = cfg.latent.seed;
    let mut t = MetricsTable::new();
    for r in &run.history {
        t.push("latent", method, seed, r.epoch, &format!("{}_train_loss", r.phase.name()), r.train_loss);
        t.push("latent", method, seed, r.epoch, "val_loss", r.val_loss);
        t.push("latent", method, seed, r.epoch, "val_accuracy", r.val_accuracy);
    }
    if !data.triplets.test.is_empty() {
        let acc = accuracy(&run.encoder, &data.pool, &data.triplets.test)?;
        t.push("latent", method, seed, run.best_epoch, "test_accuracy", acc);
    }
    Ok((run, t))
}

pub fn checkpoint_document(cfg: &ExperimentConfig, run: &LatentRun) -> CheckpointDocument {
    CheckpointDocument {
        latent: cfg.latent.clone(),
        best_epoch: run.best_epoch,
        encoder: run.encoder.clone(),
    }
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointDocument> {
    read_json(path, "checkpoint")
}

fn feature_std(pool: &TrajectoryPool) -> [f64; FEATURE_COUNT] {
    let n = pool.len() as f64;
    std::array::from_fn(|d| {
        let mean = pool.entries.iter().map(|e| e.features.get(d)).sum::<f64>() / n;
        let var = pool.entries.iter().map(|e| (e.features.get(d) - mean).powi(2)).sum::<f64>() / n;
        var.sqrt().max(1e-9)
    })
}

/// Min-max normalizer of `w . theta` over a set of features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardScale {
    pub min: f64,
    pub max: f64,
}

impl RewardScale {
    pub fn over<'a>(w: &[f64; FEATURE_COUNT], features: impl IntoIterator<Item = &'a Features>) -> Self {
        let (min, max) = features
            .into_iter()
            .map(|f| f.dot(w))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r), h.max(r)));
        RewardScale { min, max }
    }

    pub fn normalize(&self, r: f64) -> f64 {
        if self.max > self.min {
            (r - self.min) / (self.max - self.min)
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImproveRun {
    pub seed: usize,
    pub w: [f64; FEATURE_COUNT],
    pub trace: ImprovementTrace,
    /// Normalized true reward after each round, starting at round 0.
    pub rewards: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImproveSummary {
    pub runs: Vec<ImproveRun>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Normalized reward of the pool optimum.
    pub optimum: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Improvement experiment: per seed, random reward weights (scaled by the
/// pool's feature spread) and a random starting trajectory, then
/// `iterations` rounds with a simulated human over the whole pool.
pub fn run_improve(cfg: &ExperimentConfig, data: &Dataset, enc: &EncoderPair) -> Result<(ImproveSummary, MetricsTable)> {
    cfg.validate()?;
    let pool = &data.pool;
    let embeddings = enc.embed_pool(pool)?;
    run_improve_with(cfg, pool, &data.catalog, enc, &embeddings)
}

pub fn run_improve_with(
    cfg: &ExperimentConfig,
    pool: &TrajectoryPool,
    catalog: &Catalog,
    enc: &EncoderPair,
    embeddings: &PoolEmbeddings,
) -> Result<(ImproveSummary, MetricsTable)> {
    let seeds = cfg.seeds();
    let std = feature_std(pool);
    let ids = pool.ids();
    let rounds = cfg.improve.iterations;
    let mut runs = Vec::with_capacity(cfg.improve.seeds);
    for s in 0..cfg.improve.seeds {
        let mut rng = seeds.sub(streams::IMPROVE, s as u64);
        let w: [f64; FEATURE_COUNT] = std::array::from_fn(|d| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z / std[d]
        });
        let start = ids[rng.random_range(0..ids.len())];
        let human = SimulatedHuman::from_pool(&HumanSpec { w, beta: 1.0 }, pool)?;
        let scale = RewardScale::over(&w, pool.entries.iter().map(|e| &e.features));
        let mut source = SimulatedSource {
            human: &human,
            pool,
            catalog,
            rng: seeds.sub(streams::HUMANS, s as u64),
        };
        let reward = |id: TrajId| scale.normalize(pool.get(id).expect("pool member").features.dot(&w));
        let trace = improve_loop(embeddings, enc, start, &mut source, rounds, &cfg.improve, Some(&reward))?;
        let rewards = trace.steps.iter().map(|st| st.true_reward.expect("reward given")).collect();
        runs.push(ImproveRun { seed: s, w, trace, rewards });
    }
    let (mut mean, mut sd) = (Vec::new(), Vec::new());
    for i in 0..=rounds {
        let col: Vec<f64> = runs.iter().filter_map(|r| r.rewards.get(i).copied()).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        sd.push(s);
    }
    let mut t = MetricsTable::new();
    for r in &runs {
        for (i, v) in r.rewards.iter().enumerate() {
            t.push("improve", "language", r.seed, i, "normalized_reward", *v);
        }
    }
    for i in 0..=rounds {
        t.push("improve", "language", "all", i, "mean_normalized_reward", mean[i]);
        t.push("improve", "language", "all", i, "std_normalized_reward", sd[i]);
        t.push("improve", "optimum", "all", i, "mean_normalized_reward", 1.0);
    }
    Ok((
        ImproveSummary {
            runs,
            mean,
            std: sd,
            optimum: 1.0,
        },
        t,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMethod {
    Language,
    Comparison,
    AblationExplicit,
    AblationImplicit,
}

impl RewardMethod {
    pub const ALL: [RewardMethod; 4] = [
        RewardMethod::Language,
        RewardMethod::Comparison,
        RewardMethod::AblationExplicit,
        RewardMethod::AblationImplicit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardMethod::Language => "language",
            RewardMethod::Comparison => "comparison",
            RewardMethod::AblationExplicit => "ablation-explicit",
            RewardMethod::AblationImplicit => "ablation-implicit",
        }
    }

    fn loss(self) -> LossMode {
        match self {
            RewardMethod::AblationExplicit => LossMode::ExplicitOnly,
            RewardMethod::AblationImplicit => LossMode::ImplicitOnly,
            _ => LossMode::Full,
        }
    }
}

impl fmt::Display for RewardMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RewardMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reward method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardRunRecord {
    pub method: RewardMethod,
    pub human: usize,
    pub seed: usize,
    pub run: RewardRun,
}

impl RewardRunRecord {
    pub fn label(&self) -> String {
        format!("h{}-s{}", self.human, self.seed)
    }
}

/// Reward-learning experiment over every (human, seed) and method. Queries
/// come from the training split; evaluation uses the test split with pairs
/// fixed per seed.
pub fn run_learn_reward(
    cfg: &ExperimentConfig,
    data: &Dataset,
    enc: &EncoderPair,
    methods: &[RewardMethod],
) -> Result<(Vec<RewardRunRecord>, MetricsTable)> {
    cfg.validate()?;
    let embeddings = enc.embed_pool(&data.pool)?;
    run_learn_reward_with(cfg, data, enc, &embeddings, methods)
}

pub fn run_learn_reward_with(
    cfg: &ExperimentConfig,
    data: &Dataset,
    enc: &EncoderPair,
    embeddings: &PoolEmbeddings,
    methods: &[RewardMethod],
) -> Result<(Vec<RewardRunRecord>, MetricsTable)> {
    let seeds = cfg.seeds();
    let pool = &data.pool;
    let train_ids: Vec<TrajId> = pool.in_split(Split::Train).map(|e| e.trajectory.id).collect();
    let test: Vec<&world::PoolEntry> = pool.in_split(Split::Test).collect();
    let test_ids: Vec<TrajId> = test.iter().map(|e| e.trajectory.id).collect();
    let test_phis = embeddings.subset(&test_ids)?;
    let test_features: Vec<Features> = test.iter().map(|e| e.features).collect();
    let train_pool = TrajectoryPool {
        config: pool.config.clone(),
        thresholds: pool.thresholds,
        entries: pool.in_split(Split::Train).cloned().collect(),
    };

    let mut records = Vec::new();
    let mut t = MetricsTable::new();
    for s in 0..cfg.reward.seeds {
        let eval = EvalSet::new(
            test_ids.clone(),
            test_ids.iter().map(|&id| test_phis.get(id).expect("subset").to_vec()).collect(),
            test_features.clone(),
            cfg.reward.learning.eval_pairs,
            seeds.seed(streams::REWARD, s as u64),
        )?;
        for (h, spec) in cfg.reward.humans.iter().enumerate() {
            let human = SimulatedHuman::from_pool(spec, &train_pool)?;
            let run_index = ((h as u64) << 20) | s as u64;
            let ctx = RewardContext {
                enc,
                embeddings,
                query_ids: &train_ids,
                catalog: &data.catalog,
                eval: &eval,
                w: spec.w,
            };
            for &method in methods {
                let learning = RewardConfig {
                    loss: method.loss(),
                    ..cfg.reward.learning.clone()
                };
                let mut source = SimulatedSource {
                    human: &human,
                    pool: &train_pool,
                    catalog: &data.catalog,
                    rng: seeds.sub(streams::HUMANS, (1 << 30) | run_index),
                };
                let learn_seed = seeds.seed(streams::REWARD, (1 << 30) | run_index);
                let run = match method {
                    RewardMethod::Comparison => learn_reward_comparison(&ctx, &mut source, &learning, learn_seed)?,
                    _ => learn_reward_language(&ctx, &mut source, &learning, learn_seed)?,
                };
                let rec = RewardRunRecord {
                    method,
                    human: h,
                    seed: s,
                    run,
                };
                let label = rec.label();
                for c in &rec.run.checkpoints {
                    t.push("reward", method.name(), &label, c.queries, "cross_entropy", c.cross_entropy);
                    t.push("reward", method.name(), &label, c.queries, "best_true_reward", c.best.normalized);
                }
                for curve in [rec.run.cross_entropy_curve(), rec.run.best_reward_curve()] {
                    if curve.points.len() >= 2 {
                        t.push("reward", method.name(), &label, "auc", &curve.metric, auc(&curve)?);
                    }
                }
                records.push(rec);
            }
        }
    }
    Ok((records, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            pool_size: 60,
            split: [0.6, 0.2, 0.2],
            pairs: PairsPerSplit { train: 80, val: 20, test: 20 },
            ..ExperimentConfig::default()
        };
        cfg.latent.d_z = 8;
        cfg.latent.hidden = vec![8];
        cfg.latent.phase1_epochs = 2;
        cfg.latent.phase2_epochs = 2;
        cfg.improve.seeds = 4;
        cfg.improve.iterations = 3;
        cfg.reward.seeds = 1;
        cfg.reward.humans.truncate(2);
        cfg.reward.learning.queries = 4;
        cfg.reward.learning.checkpoint_every = 2;
        cfg.reward.learning.epochs_per_query = 2;
        cfg.reward.learning.eval_pairs = 30;
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = tiny();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = toml::from_str("master_seed = 9\n[latent]\nd_z = 4\n").unwrap();
        assert_eq!(partial.master_seed, 9);
        assert_eq!(partial.latent.d_z, 4);
        assert_eq!(partial.pool_size, 320);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "pool_size = 3\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config(_))));
        fs::write(&path, "pool_size = [\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::Parse { .. })));
        assert!(matches!(ExperimentConfig::load(&dir.path().join("missing.toml")), Err(Error::Io { .. })));
        let cfg = ExperimentConfig { epsilon_fraction: 1.5, ..tiny() };
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.reward.humans[0].beta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn documents_check_their_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("doc.json");
        write_json(&path, &MetricRow {
            experiment: "e".into(),
            method: "m".into(),
            seed: "0".into(),
            x: "1".into(),
            metric: "v".into(),
            value: 0.5,
        })
        .unwrap();
        let row: MetricRow = read_json(&path, "row").unwrap();
        assert_eq!(row.value, 0.5);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&path, text).unwrap();
        match read_json::<MetricRow>(&path, "row") {
            Err(Error::FormatVersion { kind: "row", found: 7, expected: 1 }) => {}
            other => panic!("{other:?}"),
        }
        fs::write(&path, "{\"value\": 1}").unwrap();
        assert!(matches!(read_json::<MetricRow>(&path, "row"), Err(Error::Parse { .. })));
    }

    #[test]
    fn metrics_table_round_trips_through_csv() {
        let mut t = MetricsTable::new();
        t.push("reward", "language", "h0-s1", 5, "cross_entropy", 0.123456789012345);
        t.push("reward", "language", "h0-s1", "auc", "cross_entropy", 1e-300);
        let text = t.to_csv();
        assert!(text.starts_with("experiment,method,seed,x,metric,value\n"));
        let back = MetricsTable::parse(&text, Path::new("t.csv")).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.series("reward", "language", "h0-s1", "cross_entropy").len(), 2);
        assert!(MetricsTable::parse("a,b\n1,2\n", Path::new("t.csv")).is_err());
    }

    #[test]
    fn generated_data_validates_and_round_trips() {
        let cfg = tiny();
        let data = gen_data(&cfg).unwrap();
        data.validate_labels().unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write(dir.path()).unwrap();
        assert_eq!(Dataset::read(dir.path()).unwrap(), data);

        let mut broken = data.clone();
        let t = &mut broken.triplets.train[0];
        std::mem::swap(&mut t.a_id, &mut t.b_id);
        assert!(broken.validate_labels().is_err());
    }

    #[test]
    fn pipelines_are_reproducible() {
        let cfg = tiny();
        let run = || {
            let data = gen_data(&cfg).unwrap();
            let (latent, mut t) = run_train_latent(&cfg, &data, false, None).unwrap();
            let (_, imp) = run_improve(&cfg, &data, &latent.encoder).unwrap();
            let (_, rew) = run_learn_reward(&cfg, &data, &latent.encoder, &RewardMethod::ALL).unwrap();
            t.extend(imp);
            t.extend(rew);
            t.to_csv()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.contains("test_accuracy"));
        assert!(a.contains("mean_normalized_reward"));
        assert!(a.contains(",auc,"));
    }

    #[test]
    fn frozen_runs_and_resumes() {
        let cfg = tiny();
        let data = gen_data(&cfg).unwrap();
        let (frozen, t) = run_train_latent(&cfg, &data, true, None).unwrap();
        assert!(t.rows().iter().all(|r| r.method == "frozen"));
        assert!(frozen.history.iter().all(|r| r.phase != crate::latent::Phase::Cofinetune));
        let (resumed, _) = run_train_latent(&cfg, &data, false, Some(frozen.encoder.clone())).unwrap();
        assert!(resumed.encoder.epochs > frozen.encoder.epochs);
    }

    #[test]
    fn improve_summary_shapes() {
        let cfg = tiny();
        let data = gen_data(&cfg).unwrap();
        let enc = EncoderPair::new(&cfg.latent, data.vocabulary(), &mut crate::seed::rng_from_seed(1)).unwrap();
        let (s, _) = run_improve(&cfg, &data, &enc).unwrap();
        assert_eq!(s.runs.len(), 4);
        assert_eq!(s.mean.len(), 4);
        for r in &s.runs {
            assert!(r.rewards.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(s.mean.iter().all(|&m| m <= s.optimum));
    }

    #[test]
    fn reward_methods_parse() {
        for m in RewardMethod::ALL {
            assert_eq!(m.name().parse::<RewardMethod>().unwrap(), m);
        }
        assert!("bogus".parse::<RewardMethod>().is_err());
        assert_eq!(RewardScale { min: 1.0, max: 1.0 }.normalize(3.0), 1.0);
        assert_eq!(RewardScale { min: 0.0, max: 4.0 }.normalize(1.0), 0.25);
    }
}
