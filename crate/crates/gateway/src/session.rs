//! Session state machines. A session only changes through [`Command`]s
//! stamped with server time, and every accepted command is logged, so the
//! log alone rebuilds the session.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use clfb_core::harness::{Dataset, ExperimentConfig, ServeConfig};
use clfb_core::improve::{improve_step, Objective};
use clfb_core::lang::{normalize, tokenize};
use clfb_core::latent::{dot, norm, Embedding};
use clfb_core::reward::{
    auc, best_of_pool, embed_query, sample_negatives, train_comparisons, train_language, ComparisonQuery,
    LanguageQuery, LearningCurve, PsiCache, QueryEmbedding, RewardConfig, RewardModel,
};
use clfb_core::seed::rng_from_seed;
use clfb_core::world::{Split, TrajId};
use clfb_core::{Catalog, EncoderPair, PoolEmbeddings, TrajectoryPool};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Improve,
    LearnLanguage,
    LearnComparison,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Improve, Mode::LearnLanguage, Mode::LearnComparison];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Improve => "improve",
            Mode::LearnLanguage => "learn-language",
            Mode::LearnComparison => "learn-comparison",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self, SessionError> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SessionError::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Active,
    Satisfied,
    Completed,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("session has ended")]
    Closed,
    #[error("feedback is empty")]
    EmptyFeedback,
    #[error("{0}")]
    WrongPayload(String),
    #[error("rating {0} is outside 1..=5")]
    RatingOutOfRange(i64),
    #[error("no rating was requested{}", .0.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    NoRatingRequested(Option<usize>),
    #[error("there is no pending suggestion to accept")]
    NoSuggestion,
    #[error("log does not describe a session: {0}")]
    BadLog(String),
    #[error(transparent)]
    Core(#[from] clfb_core::Error),
}

impl SessionError {
    /// Machine-readable code sent to clients.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::UnknownMode(_) => "unknown_mode",
            SessionError::Closed => "session_closed",
            SessionError::EmptyFeedback => "empty_feedback",
            SessionError::WrongPayload(_) => "wrong_payload",
            SessionError::RatingOutOfRange(_) => "rating_out_of_range",
            SessionError::NoRatingRequested(_) => "no_rating_requested",
            SessionError::NoSuggestion => "no_suggestion",
            SessionError::BadLog(_) => "bad_log",
            SessionError::Core(_) => "internal",
        }
    }
}

/// Read-only data shared by every session.
pub struct Assets {
    pub pool: TrajectoryPool,
    pub catalog: Catalog,
    pub encoder: EncoderPair,
    pub embeddings: PoolEmbeddings,
    pub reward: RewardConfig,
    pub objective: Objective,
    pub serve: ServeConfig,
    /// Trajectories learn sessions ask about.
    pub query_ids: Vec<TrajId>,
    /// Trajectories improve sessions may start from.
    pub start_ids: Vec<TrajId>,
    catalog_psis: Vec<(String, Embedding)>,
}

impl Assets {
    pub fn new(cfg: &ExperimentConfig, data: Dataset, encoder: EncoderPair) -> clfb_core::Result<Self> {
        cfg.serve.validate()?;
        cfg.reward.learning.validate()?;
        let embeddings = encoder.embed_pool(&data.pool)?;
        let mut query_ids: Vec<TrajId> = data.pool.in_split(Split::Train).map(|e| e.trajectory.id).collect();
        if query_ids.len() < 2 {
            query_ids = data.pool.ids();
        }
        if query_ids.len() < 2 {
            return Err(clfb_core::Error::Invalid("sessions need a pool of at least two trajectories".into()));
        }
        let start_ids = match cfg.serve.reference_w {
            Some(w) => {
                let mut ranked: Vec<(f64, TrajId)> =
                    data.pool.entries.iter().map(|e| (e.features.dot(&w), e.trajectory.id)).collect();
                ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let quarter = ranked.len().div_ceil(4);
                ranked.into_iter().take(quarter).map(|(_, id)| id).collect()
            }
            None => data.pool.ids(),
        };
        let catalog_psis = data
            .catalog
            .iter()
            .map(|(_, t)| Ok((t.to_string(), encoder.encode_text(t)?)))
            .collect::<clfb_core::Result<_>>()?;
        Ok(Assets {
            pool: data.pool,
            catalog: data.catalog,
            encoder,
            embeddings,
            reward: cfg.reward.learning.clone(),
            objective: cfg.improve.objective,
            serve: cfg.serve.clone(),
            query_ids,
            start_ids,
            catalog_psis,
        })
    }

    pub fn max_iterations(&self, mode: Mode) -> usize {
        match mode {
            Mode::Improve => self.serve.improve_iterations,
            _ => self.serve.learn_iterations,
        }
    }

    /// Catalog text whose embedding is closest in cosine to `psi`.
    pub fn nearest_utterance(&self, psi: &[f64]) -> &str {
        let np = norm(psi).max(1e-12);
        let mut best = (f64::NEG_INFINITY, "");
        for (text, p) in &self.catalog_psis {
            let c = dot(psi, p) / (np * norm(p).max(1e-12));
            if c > best.0 {
                best = (c, text);
            }
        }
        best.1
    }
}

/// Client input, as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Command {
    Create {
        mode: Mode,
        seed: u64,
    },
    Feedback {
        text: String,
        #[serde(default)]
        use_suggestion: bool,
    },
    Choice {
        chosen: Side,
    },
    Satisfied,
    Rating {
        iteration: Option<usize>,
        value: i64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: usize,
    /// Server time the command arrived, in milliseconds.
    pub at_ms: u64,
    /// Server time the resulting query was handed back, when it changed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shown_ms: Option<u64>,
    pub command: Command,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub text: String,
    pub unknown_words: Vec<String>,
    /// Nearest catalog utterance.
    pub suggestion: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRequest {
    pub iteration: usize,
    /// Best trajectory under the current learned reward.
    pub trajectory: TrajId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub iteration: usize,
    pub previous: u8,
    pub value: u8,
    pub at_ms: u64,
}

/// One answered query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub iteration: usize,
    pub shown: Vec<TrajId>,
    pub text: Option<String>,
    pub chosen: Option<TrajId>,
    /// Server-observed time between showing and answering.
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub iteration: usize,
    pub trajectory: TrajId,
    pub rating: u8,
}

/// Everything observable about a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub mode: Mode,
    pub status: Status,
    pub iteration: usize,
    pub max_iterations: usize,
    pub shown: Vec<TrajId>,
    pub turns: Vec<Turn>,
    pub rating_requests: Vec<RatingRequest>,
    pub ratings: Vec<RatingRecord>,
    pub audit: Vec<AuditEntry>,
    pub pending_suggestion: Option<Suggestion>,
    pub log_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub per_query_seconds: Vec<f64>,
    pub mean_seconds: Option<f64>,
    pub ratings: Vec<RatingRecord>,
    /// Area under the rating curve over iterations, from two ratings on.
    pub rating_auc: Option<f64>,
}

/// What a command produced, for the response.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub accepted: bool,
    pub status: Status,
    pub iteration: usize,
    pub shown: Vec<TrajId>,
    pub rate: Option<RatingRequest>,
    pub suggestion: Option<Suggestion>,
}

pub struct Session {
    id: String,
    mode: Mode,
    rng: ChaCha8Rng,
    status: Status,
    iteration: usize,
    shown: Vec<TrajId>,
    sent_at_ms: u64,
    turns: Vec<Turn>,
    embedded: Vec<QueryEmbedding>,
    pairs: Vec<(Embedding, Embedding)>,
    model: Option<RewardModel>,
    rating_requests: Vec<RatingRequest>,
    ratings: BTreeMap<usize, u8>,
    audit: Vec<AuditEntry>,
    suggestion: Option<Suggestion>,
    log: Vec<LogEntry>,
}

impl Session {
    /// `clock` is read once the first query is ready.
    pub fn create(
        assets: &Assets,
        id: String,
        mode: Mode,
        seed: u64,
        now_ms: u64,
        clock: impl FnOnce() -> u64,
    ) -> Result<(Self, Step), SessionError> {
        let mut rng = rng_from_seed(seed);
        let model = match mode {
            Mode::Improve => None,
            _ => Some(RewardModel::new(
                assets.encoder.d_z,
                &assets.reward.hidden,
                &mut rng_from_seed(rng.random()),
            )?),
        };
        let mut s = Session {
            id,
            mode,
            rng,
            status: Status::Active,
            iteration: 0,
            shown: Vec::new(),
            sent_at_ms: now_ms,
            turns: Vec::new(),
            embedded: Vec::new(),
            pairs: Vec::new(),
            model,
            rating_requests: Vec::new(),
            ratings: BTreeMap::new(),
            audit: Vec::new(),
            suggestion: None,
            log: Vec::new(),
        };
        s.shown = match mode {
            Mode::Improve => vec![*assets.start_ids.choose(&mut s.rng).expect("nonempty start set")],
            _ => s.draw_query(assets),
        };
        s.sent_at_ms = clock();
        s.record(now_ms, Some(s.sent_at_ms), Command::Create { mode, seed });
        let step = s.step(true, None, None);
        Ok((s, step))
    }

    /// Rebuilds a session by re-running its log.
    pub fn replay(assets: &Assets, id: String, log: &[LogEntry]) -> Result<Self, SessionError> {
        let Some((first, rest)) = log.split_first() else {
            return Err(SessionError::BadLog("empty log".into()));
        };
        let Command::Create { mode, seed } = first.command else {
            return Err(SessionError::BadLog("first entry is not a create".into()));
        };
        let shown = |e: &LogEntry| e.shown_ms.unwrap_or(e.at_ms);
        let (mut s, _) = Session::create(assets, id, mode, seed, first.at_ms, || shown(first))?;
        for e in rest {
            s.handle(assets, e.command.clone(), e.at_ms, || shown(e))?;
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn model(&self) -> Option<&RewardModel> {
        self.model.as_ref()
    }

    fn record(&mut self, at_ms: u64, shown_ms: Option<u64>, command: Command) {
        let seq = self.log.len();
        self.log.push(LogEntry {
            seq,
            at_ms,
            shown_ms,
            command,
        });
    }

    fn draw_query(&mut self, assets: &Assets) -> Vec<TrajId> {
        let ids = &assets.query_ids;
        match self.mode {
            Mode::LearnComparison => {
                let i = self.rng.random_range(0..ids.len());
                let j = (i + self.rng.random_range(1..ids.len())) % ids.len();
                vec![ids[i], ids[j]]
            }
            _ => vec![*ids.choose(&mut self.rng).expect("nonempty query set")],
        }
    }

    fn step(&self, accepted: bool, rate: Option<RatingRequest>, suggestion: Option<Suggestion>) -> Step {
        Step {
            accepted,
            status: self.status,
            iteration: self.iteration,
            shown: self.shown.clone(),
            rate,
            suggestion,
        }
    }

    /// Applies one command that arrived at `now_ms`; rejected commands
    /// leave the session untouched. When a new query results, `clock` is
    /// read once it is ready and the next answer is timed from there.
    pub fn handle(
        &mut self,
        assets: &Assets,
        command: Command,
        now_ms: u64,
        clock: impl FnOnce() -> u64,
    ) -> Result<Step, SessionError> {
        let step = match &command {
            Command::Create { .. } => return Err(SessionError::WrongPayload("session already exists".into())),
            Command::Rating { iteration, value } => self.rate(*iteration, *value, now_ms)?,
            Command::Satisfied => {
                self.ensure_active()?;
                if self.mode != Mode::Improve {
                    return Err(SessionError::WrongPayload(format!("{} sessions cannot be marked satisfied", self.mode)));
                }
                self.status = Status::Satisfied;
                self.step(true, None, None)
            }
            Command::Choice { chosen } => {
                self.ensure_active()?;
                if self.mode != Mode::LearnComparison {
                    return Err(SessionError::WrongPayload(format!("{} sessions take text feedback", self.mode)));
                }
                self.choose(assets, *chosen, now_ms)?
            }
            Command::Feedback { text, use_suggestion } => {
                self.ensure_active()?;
                if self.mode == Mode::LearnComparison {
                    return Err(SessionError::WrongPayload("comparison sessions take a choice, not text".into()));
                }
                let text = if *use_suggestion {
                    self.suggestion.as_ref().ok_or(SessionError::NoSuggestion)?.suggestion.clone()
                } else {
                    text.clone()
                };
                self.feedback(assets, text, now_ms)?
            }
        };
        let advanced = step.accepted && matches!(command, Command::Feedback { .. } | Command::Choice { .. });
        let shown_ms = advanced.then(clock);
        if let Some(t) = shown_ms {
            self.sent_at_ms = t;
        }
        self.record(now_ms, shown_ms, command);
        Ok(step)
    }

    fn ensure_active(&self) -> Result<(), SessionError> {
        if self.status == Status::Active {
            Ok(())
        } else {
            Err(SessionError::Closed)
        }
    }

    fn elapsed(&self, now_ms: u64) -> f64 {
        now_ms.saturating_sub(self.sent_at_ms) as f64 / 1000.0
    }

    fn feedback(&mut self, assets: &Assets, text: String, now_ms: u64) -> Result<Step, SessionError> {
        let words = normalize(&text);
        if words.is_empty() {
            return Err(SessionError::EmptyFeedback);
        }
        let vocab = &assets.encoder.vocab;
        let unknown: Vec<String> = words.iter().filter(|w| vocab.get(w).is_none()).cloned().collect();
        if !unknown.is_empty() {
            let psi = assets.encoder.encode_language(&tokenize(&text, vocab)?)?;
            let s = Suggestion {
                text,
                unknown_words: unknown,
                suggestion: assets.nearest_utterance(&psi).to_string(),
            };
            self.suggestion = Some(s.clone());
            return Ok(self.step(false, None, Some(s)));
        }
        let psi = assets.encoder.encode_text(&text)?;
        let shown = self.shown.clone();
        let seconds = self.elapsed(now_ms);
        let rate = match self.mode {
            Mode::Improve => {
                let choice = improve_step(&assets.embeddings, shown[0], &psi, assets.objective, None)?;
                self.shown = vec![choice.id];
                None
            }
            _ => {
                let class = assets.catalog.class_of(&text);
                let negatives = sample_negatives(&assets.catalog, &text, class, assets.reward.negatives, &mut self.rng)?;
                let q = LanguageQuery {
                    shown: shown[0],
                    text: text.clone(),
                    class,
                    negatives,
                };
                let phi = assets.embeddings.get(shown[0]).expect("pool embedding");
                self.embedded.push(embed_query(&q, phi, &mut PsiCache::new(&assets.encoder))?);
                let model = self.model.as_mut().expect("learn sessions own a model");
                train_language(model, &self.embedded, &assets.reward, assets.reward.epochs_per_query, &mut self.rng)?;
                None
            }
        };
        self.iteration += 1;
        self.turns.push(Turn {
            iteration: self.iteration,
            shown,
            text: Some(text),
            chosen: None,
            seconds,
        });
        self.suggestion = None;
        let rate = match self.mode {
            Mode::Improve => rate,
            _ => self.after_learn_step(assets)?,
        };
        if self.iteration >= assets.max_iterations(self.mode) {
            self.status = Status::Completed;
        }
        Ok(self.step(true, rate, None))
    }

    fn choose(&mut self, assets: &Assets, side: Side, now_ms: u64) -> Result<Step, SessionError> {
        let (a, b) = (self.shown[0], self.shown[1]);
        let q = ComparisonQuery {
            a,
            b,
            chosen: if side == Side::A { a } else { b },
        };
        let phi = |id| assets.embeddings.get(id).expect("pool embedding").to_vec();
        self.pairs.push((phi(q.chosen), phi(q.rejected())));
        let model = self.model.as_mut().expect("learn sessions own a model");
        train_comparisons(model, &self.pairs, &assets.reward, assets.reward.epochs_per_query, &mut self.rng)?;
        self.iteration += 1;
        self.turns.push(Turn {
            iteration: self.iteration,
            shown: vec![a, b],
            text: None,
            chosen: Some(q.chosen),
            seconds: self.elapsed(now_ms),
        });
        let rate = self.after_learn_step(assets)?;
        if self.iteration >= assets.max_iterations(self.mode) {
            self.status = Status::Completed;
        }
        Ok(self.step(true, rate, None))
    }

    /// Draws the next query and, on schedule, asks for a rating.
    fn after_learn_step(&mut self, assets: &Assets) -> Result<Option<RatingRequest>, SessionError> {
        let rate = if self.iteration % assets.serve.rating_every == 0 {
            let model = self.model.as_ref().expect("learn sessions own a model");
            let ids = assets.embeddings.ids().to_vec();
            let phis: Vec<&[f64]> = ids.iter().map(|&id| assets.embeddings.get(id).expect("listed")).collect();
            let learned = model.rewards(&phis)?;
            let best = best_of_pool(&ids, &learned, &vec![0.0; ids.len()]);
            let r = RatingRequest {
                iteration: self.iteration,
                trajectory: best.id,
            };
            self.rating_requests.push(r);
            Some(r)
        } else {
            None
        };
        self.shown = if self.iteration < assets.max_iterations(self.mode) {
            self.draw_query(assets)
        } else {
            Vec::new()
        };
        Ok(rate)
    }

    fn rate(&mut self, iteration: Option<usize>, value: i64, now_ms: u64) -> Result<Step, SessionError> {
        if !(1..=5).contains(&value) {
            return Err(SessionError::RatingOutOfRange(value));
        }
        let request = match iteration {
            Some(i) => self.rating_requests.iter().find(|r| r.iteration == i),
            None => self.rating_requests.last(),
        }
        .ok_or(SessionError::NoRatingRequested(iteration))?;
        let (at, value) = (request.iteration, value as u8);
        if let Some(previous) = self.ratings.insert(at, value) {
            self.audit.push(AuditEntry {
                iteration: at,
                previous,
                value,
                at_ms: now_ms,
            });
        }
        Ok(self.step(true, None, None))
    }

    pub fn view(&self, assets: &Assets) -> SessionView {
        SessionView {
            id: self.id.clone(),
            mode: self.mode,
            status: self.status,
            iteration: self.iteration,
            max_iterations: assets.max_iterations(self.mode),
            shown: self.shown.clone(),
            turns: self.turns.clone(),
            rating_requests: self.rating_requests.clone(),
            ratings: self.rating_records(),
            audit: self.audit.clone(),
            pending_suggestion: self.suggestion.clone(),
            log_len: self.log.len(),
        }
    }

    fn rating_records(&self) -> Vec<RatingRecord> {
        self.ratings
            .iter()
            .map(|(&iteration, &rating)| RatingRecord {
                iteration,
                trajectory: self
                    .rating_requests
                    .iter()
                    .find(|r| r.iteration == iteration)
                    .expect("ratings follow requests")
                    .trajectory,
                rating,
            })
            .collect()
    }

    pub fn metrics(&self) -> SessionMetrics {
        let per_query_seconds: Vec<f64> = self.turns.iter().map(|t| t.seconds).collect();
        let mean_seconds =
            (!per_query_seconds.is_empty()).then(|| per_query_seconds.iter().sum::<f64>() / per_query_seconds.len() as f64);
        let ratings = self.rating_records();
        let rating_auc = (ratings.len() >= 2)
            .then(|| {
                let curve = LearningCurve::new("rating", ratings.iter().map(|r| (r.iteration, r.rating as f64)).collect())
                    .expect("ratings are keyed by increasing iteration");
                auc(&curve).ok()
            })
            .flatten();
        SessionMetrics {
            per_query_seconds,
            mean_seconds,
            ratings,
            rating_auc,
        }
    }
}
