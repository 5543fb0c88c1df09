//! Reward learning from comparative language and from pairwise choices,
//! plus the evaluation metrics shared by both.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{log_sigmoid, sigmoid, AdamConfig, Bound, Graph, Mlp, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::lang::{Catalog, UtteranceClass};
use crate::latent::{EncoderPair, Embedding, PoolEmbeddings};
use crate::seed::rng_from_seed;
use crate::simhuman::{ChoiceSource, FeedbackSource};
use crate::world::{Features, TrajId, FEATURE_COUNT};

/// `exp(x) / (exp(x) + exp(y))`, stable for any finite gap.
pub fn bt_prob(x: f64, y: f64) -> f64 {
    sigmoid(x - y)
}

/// Which terms of the language loss are trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Full,
    ExplicitOnly,
    ImplicitOnly,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Full => "full",
            LossMode::ExplicitOnly => "explicit_only",
            LossMode::ImplicitOnly => "implicit_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    /// Negative utterances per language query.
    pub negatives: usize,
    pub queries: usize,
    pub checkpoint_every: usize,
    /// Training epochs over all queries so far, run after each new query.
    pub epochs_per_query: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Re-initialize the model before each round of training.
    pub from_scratch: bool,
    pub eval_pairs: usize,
    pub loss: LossMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            hidden: vec![16],
            negatives: 5,
            queries: 20,
            checkpoint_every: 5,
            epochs_per_query: 30,
            learning_rate: 3e-4,
            batch_size: 32,
            from_scratch: false,
            eval_pairs: 200,
            loss: LossMode::Full,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 {
            return Err(Error::Config("at least one negative utterance is required".into()));
        }
        if self.checkpoint_every == 0 || self.batch_size == 0 || self.eval_pairs == 0 {
            return Err(Error::Config("checkpoint spacing, batch size and eval pairs must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be nonzero".into()));
        }
        AdamConfig::with_lr(self.learning_rate).validate()
    }
}

/// Scalar reward over trajectory embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub mlp: Mlp,
    pub params: ParamSet,
}

impl RewardModel {
    pub fn new<R: Rng + ?Sized>(d_z: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut sizes = vec![d_z];
        sizes.extend(hidden);
        sizes.push(1);
        let mlp = Mlp::new("reward", sizes)?;
        let mut params = ParamSet::new();
        mlp.init(&mut params, rng)?;
        Ok(RewardModel { mlp, params })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Records `r` on `n x d` rows, giving an `n x 1` column.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, rows: Var) -> Result<Var> {
        self.mlp.forward(g, bound, rows)
    }

    pub fn rewards(&self, phis: &[&[f64]]) -> Result<Vec<f64>> {
        if phis.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let x = g.leaf(Tensor::from_rows(phis)?);
        let r = self.forward(&mut g, &b, x)?;
        Ok(g.value(r).values().to_vec())
    }

    pub fn reward(&self, phi: &[f64]) -> Result<f64> {
        Ok(self.rewards(&[phi])?[0])
    }
}

/// A language query as asked: the shown trajectory, the feedback and the
/// sampled negative utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageQuery {
    pub shown: TrajId,
    pub text: String,
    pub class: Option<UtteranceClass>,
    pub negatives: Vec<String>,
}

/// Embedded form of a [`LanguageQuery`]: `phi`, `psi` and the negative
/// `psi`s.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub phi: Embedding,
    pub psi: Embedding,
    pub negatives: Vec<Embedding>,
}

impl QueryEmbedding {
    pub fn improved(&self) -> Embedding {
        self.phi.iter().zip(&self.psi).map(|(a, b)| a + b).collect()
    }

    pub fn imagined(&self, j: usize) -> Embedding {
        self.phi.iter().zip(&self.negatives[j]).map(|(a, b)| a + b).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonQuery {
    pub a: TrajId,
    pub b: TrajId,
    pub chosen: TrajId,
}

impl ComparisonQuery {
    pub fn rejected(&self) -> TrajId {
        if self.chosen == self.a {
            self.b
        } else {
            self.a
        }
    }
}

/// Explicit and implicit terms recorded on a graph. A term is `None` when
/// the mode leaves it out.
pub struct LanguageLoss {
    pub explicit: Option<Var>,
    pub implicit: Option<Var>,
    pub total: Var,
}

/// Records the language losses over `batch`; the implicit term uses the
/// first `k` negatives of each query.
pub fn language_loss_graph(
    model: &RewardModel,
    g: &mut Graph,
    bound: &Bound,
    batch: &[QueryEmbedding],
    k: usize,
    mode: LossMode,
) -> Result<LanguageLoss> {
    if batch.is_empty() {
        return Err(Error::Invalid("loss needs at least one query".into()));
    }
    let implicit_needed = mode != LossMode::ExplicitOnly;
    if implicit_needed {
        if k == 0 {
            return Err(Error::Invalid("at least one negative is required".into()));
        }
        if let Some(q) = batch.iter().find(|q| q.negatives.len() < k) {
            return Err(Error::Invalid(format!(
                "query has {} negatives, {k} required",
                q.negatives.len()
            )));
        }
    }
    let n = batch.len();
    let mut rows: Vec<Embedding> = Vec::with_capacity(n * (k + 2));
    rows.extend(batch.iter().map(QueryEmbedding::improved));
    rows.extend(batch.iter().map(|q| q.phi.clone()));
    if implicit_needed {
        for q in batch {
            rows.extend((0..k).map(|j| q.imagined(j)));
        }
    }
    let x = g.leaf(Tensor::from_rows(&rows)?);
    let r = model.forward(g, bound, x)?;
    let r_hat = g.gather_rows(r, &(0..n).collect::<Vec<_>>())?;

    let explicit = if mode != LossMode::ImplicitOnly {
        let r_phi = g.gather_rows(r, &(n..2 * n).collect::<Vec<_>>())?;
        let gap = g.sub(r_hat, r_phi)?;
        let ls = g.log_sigmoid(gap);
        let m = g.mean(ls);
        Some(g.scale(m, -1.0))
    } else {
        None
    };
    let implicit = if implicit_needed {
        let hat_rep: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let rh = g.gather_rows(r, &hat_rep)?;
        let rt = g.gather_rows(r, &(2 * n..2 * n + n * k).collect::<Vec<_>>())?;
        let gap = g.sub(rh, rt)?;
        let ls = g.log_sigmoid(gap);
        let m = g.mean(ls);
        Some(g.scale(m, -1.0))
    } else {
        None
    };
    let total = match (explicit, implicit) {
        (Some(e), Some(i)) => g.add(e, i)?,
        (Some(e), None) => e,
        (None, Some(i)) => i,
        (None, None) => unreachable!("every mode keeps a term"),
    };
    Ok(LanguageLoss {
        explicit,
        implicit,
        total,
    })
}

fn eval_language(model: &RewardModel, batch: &[QueryEmbedding], k: usize, mode: LossMode) -> Result<(Option<f64>, Option<f64>, f64)> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let l = language_loss_graph(model, &mut g, &b, batch, k, mode)?;
    let item = |v: Var| g.value(v).item().expect("scalar");
    Ok((l.explicit.map(item), l.implicit.map(item), item(l.total)))
}

/// Mean of `-log P(improved > shown)` over the batch.
pub fn explicit_loss(model: &RewardModel, batch: &[QueryEmbedding]) -> Result<f64> {
    Ok(eval_language(model, batch, 0, LossMode::ExplicitOnly)?.0.expect("explicit term"))
}

/// Mean over queries and their first `k` negatives of
/// `-log P(improved > imagined)`.
pub fn implicit_loss(model: &RewardModel, batch: &[QueryEmbedding], k: usize) -> Result<f64> {
    Ok(eval_language(model, batch, k, LossMode::ImplicitOnly)?.1.expect("implicit term"))
}

/// Explicit plus implicit loss, or the single term a mode keeps.
pub fn reward_total_loss(model: &RewardModel, batch: &[QueryEmbedding], k: usize, mode: LossMode) -> Result<f64> {
    Ok(eval_language(model, batch, k, mode)?.2)
}

/// Records the Bradley–Terry negative log-likelihood of the recorded
/// choices; `pairs` holds `(chosen, rejected)` embeddings.
pub fn comparison_loss_graph(
    model: &RewardModel,
    g: &mut Graph,
    bound: &Bound,
    pairs: &[(&[f64], &[f64])],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Invalid("loss needs at least one comparison".into()));
    }
    let n = pairs.len();
    let rows: Vec<&[f64]> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
    let x = g.leaf(Tensor::from_rows(&rows)?);
    let r = model.forward(g, bound, x)?;
    let rc = g.gather_rows(r, &(0..n).collect::<Vec<_>>())?;
    let rr = g.gather_rows(r, &(n..2 * n).collect::<Vec<_>>())?;
    let gap = g.sub(rc, rr)?;
    let ls = g.log_sigmoid(gap);
    let m = g.mean(ls);
    Ok(g.scale(m, -1.0))
}

pub fn comparison_loss(model: &RewardModel, pairs: &[(&[f64], &[f64])]) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g);
    let l = comparison_loss_graph(model, &mut g, &b, pairs)?;
    Ok(g.value(l).item().expect("scalar"))
}

/// Held-out trajectories and pairs for evaluating a learned reward.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub ids: Vec<TrajId>,
    pub phis: Vec<Embedding>,
    pub features: Vec<Features>,
    /// Index pairs into `ids`.
    pub pairs: Vec<(usize, usize)>,
}

impl EvalSet {
    /// Draws `pairs` uniformly random distinct-index pairs.
    pub fn new(
        ids: Vec<TrajId>,
        phis: Vec<Embedding>,
        features: Vec<Features>,
        pairs: usize,
        seed: u64,
    ) -> Result<Self> {
        if ids.len() < 2 || ids.len() != phis.len() || ids.len() != features.len() {
            return Err(Error::Invalid(format!(
                "evaluation needs at least two trajectories with embeddings and features, got {}/{}/{}",
                ids.len(),
                phis.len(),
                features.len()
            )));
        }
        let mut rng = rng_from_seed(seed);
        let n = ids.len();
        let pairs = (0..pairs)
            .map(|_| {
                let i = rng.random_range(0..n);
                let j = (i + rng.random_range(1..n)) % n;
                (i, j)
            })
            .collect();
        Ok(EvalSet {
            ids,
            phis,
            features,
            pairs,
        })
    }

    pub fn cross_entropy(&self, model: &RewardModel, w: &[f64; FEATURE_COUNT]) -> Result<f64> {
        let refs: Vec<&[f64]> = self.phis.iter().map(Vec::as_slice).collect();
        let r = model.rewards(&refs)?;
        let true_r: Vec<f64> = self.features.iter().map(|f| f.dot(w)).collect();
        Ok(cross_entropy(&true_r, &r, &self.pairs))
    }

    pub fn best_of_pool(&self, model: &RewardModel, w: &[f64; FEATURE_COUNT]) -> Result<BestOfPool> {
        let refs: Vec<&[f64]> = self.phis.iter().map(Vec::as_slice).collect();
        let r = model.rewards(&refs)?;
        let true_r: Vec<f64> = self.features.iter().map(|f| f.dot(w)).collect();
        Ok(best_of_pool(&self.ids, &r, &true_r))
    }
}

/// Mean over `pairs` of the cross-entropy between the true preference
/// probability (from `true_rewards`) and the learned one.
pub fn cross_entropy(true_rewards: &[f64], learned: &[f64], pairs: &[(usize, usize)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|&(a, b)| {
            let p = bt_prob(true_rewards[a], true_rewards[b]);
            let gap = learned[a] - learned[b];
            -(p * log_sigmoid(gap) + (1.0 - p) * log_sigmoid(-gap))
        })
        .sum();
    total / pairs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfPool {
    pub id: TrajId,
    /// True reward of `id`, min-max normalized over the pool.
    pub normalized: f64,
    /// The pool's true rewards were all equal.
    pub degenerate: bool,
}

/// The trajectory the learned reward ranks highest (lowest id on ties) and
/// its normalized true reward.
pub fn best_of_pool(ids: &[TrajId], learned: &[f64], true_rewards: &[f64]) -> BestOfPool {
    let mut best = 0;
    for i in 1..ids.len() {
        if learned[i] > learned[best] || (learned[i] == learned[best] && ids[i] < ids[best]) {
            best = i;
        }
    }
    let (lo, hi) = true_rewards
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let degenerate = !(hi > lo);
    BestOfPool {
        id: ids[best],
        normalized: if degenerate { 1.0 } else { (true_rewards[best] - lo) / (hi - lo) },
        degenerate,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub metric: String,
    /// `(queries consumed, value)`, queries strictly increasing.
    pub points: Vec<(usize, f64)>,
}

impl LearningCurve {
    pub fn new(metric: impl Into<String>, points: Vec<(usize, f64)>) -> Result<Self> {
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Invalid("curve query counts must increase strictly".into()));
        }
        Ok(LearningCurve {
            metric: metric.into(),
            points,
        })
    }
}

/// Trapezoidal area under the curve divided by its query span.
pub fn auc(curve: &LearningCurve) -> Result<f64> {
    let p = &curve.points;
    if p.len() < 2 {
        return Err(Error::Invalid(format!("area under `{}` needs at least two points", curve.metric)));
    }
    let area: f64 = p
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(area / (p[p.len() - 1].0 - p[0].0) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub queries: usize,
    pub cross_entropy: f64,
    pub best: BestOfPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRun {
    pub model: RewardModel,
    pub checkpoints: Vec<Checkpoint>,
    pub language_queries: Vec<LanguageQuery>,
    pub comparison_queries: Vec<ComparisonQuery>,
    /// `false` when the feedback source failed before all queries ran.
    pub complete: bool,
}

pub const CROSS_ENTROPY: &str = "cross_entropy";
pub const BEST_REWARD: &str = "best_true_reward";

impl RewardRun {
    pub fn cross_entropy_curve(&self) -> LearningCurve {
        LearningCurve {
            metric: CROSS_ENTROPY.into(),
            points: self.checkpoints.iter().map(|c| (c.queries, c.cross_entropy)).collect(),
        }
    }

    pub fn best_reward_curve(&self) -> LearningCurve {
        LearningCurve {
            metric: BEST_REWARD.into(),
            points: self.checkpoints.iter().map(|c| (c.queries, c.best.normalized)).collect(),
        }
    }
}

/// Everything a reward-learning run reads but never changes.
pub struct RewardContext<'a> {
    pub enc: &'a EncoderPair,
    /// Embeddings of at least every trajectory queries may show.
    pub embeddings: &'a PoolEmbeddings,
    /// Trajectories queries are drawn from.
    pub query_ids: &'a [TrajId],
    pub catalog: &'a Catalog,
    pub eval: &'a EvalSet,
    /// True weights, for evaluation only.
    pub w: [f64; FEATURE_COUNT],
}

/// Embeds utterances on demand, caching by text.
pub struct PsiCache<'a> {
    enc: &'a EncoderPair,
    cache: HashMap<String, Embedding>,
}

impl<'a> PsiCache<'a> {
    pub fn new(enc: &'a EncoderPair) -> Self {
        PsiCache {
            enc,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, text: &str) -> Result<Embedding> {
        if let Some(p) = self.cache.get(text) {
            return Ok(p.clone());
        }
        let p = self.enc.encode_text(text)?;
        self.cache.insert(text.to_string(), p.clone());
        Ok(p)
    }
}

/// `k` distinct catalog texts outside the feedback's class (outside the
/// exact text when its class is unknown).
pub fn sample_negatives<R: Rng + ?Sized>(
    catalog: &Catalog,
    text: &str,
    class: Option<UtteranceClass>,
    k: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    let class = class.or_else(|| catalog.class_of(text));
    let pool: Vec<&str> = catalog
        .iter()
        .filter(|(c, t)| match class {
            Some(cl) => *c != cl,
            None => *t != text,
        })
        .map(|(_, t)| t)
        .collect();
    if pool.len() < k {
        return Err(Error::Invalid(format!("only {} negative utterances available, {k} required", pool.len())));
    }
    Ok(pool.choose_multiple(rng, k).map(|t| t.to_string()).collect())
}

pub fn embed_query(q: &LanguageQuery, phi: &[f64], psis: &mut PsiCache) -> Result<QueryEmbedding> {
    Ok(QueryEmbedding {
        phi: phi.to_vec(),
        psi: psis.get(&q.text)?,
        negatives: q.negatives.iter().map(|t| psis.get(t)).collect::<Result<_>>()?,
    })
}

fn checkpoint(model: &RewardModel, ctx: &RewardContext, queries: usize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        queries,
        cross_entropy: ctx.eval.cross_entropy(model, &ctx.w)?,
        best: ctx.eval.best_of_pool(model, &ctx.w)?,
    })
}

fn due(cfg: &RewardConfig, queries: usize) -> bool {
    queries % cfg.checkpoint_every == 0
}

/// Language-query training: `epochs` passes of shuffled minibatches.
pub fn train_language<R: Rng + ?Sized>(
    model: &mut RewardModel,
    queries: &[QueryEmbedding],
    cfg: &RewardConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<()> {
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<QueryEmbedding> = chunk.iter().map(|&i| queries[i].clone()).collect();
            let mut g = Graph::new();
            let b = model.params.bind(&mut g);
            let l = language_loss_graph(model, &mut g, &b, &batch, cfg.negatives, cfg.loss)?;
            let grads = g.backward(l.total)?;
            model.params.adam_step(&b.collect(&g, &grads), &adam)?;
        }
    }
    Ok(())
}

/// Comparison training over `(chosen, rejected)` embedding pairs.
pub fn train_comparisons<R: Rng + ?Sized>(
    model: &mut RewardModel,
    pairs: &[(Embedding, Embedding)],
    cfg: &RewardConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<()> {
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], &[f64])> =
                chunk.iter().map(|&i| (pairs[i].0.as_slice(), pairs[i].1.as_slice())).collect();
            let mut g = Graph::new();
            let b = model.params.bind(&mut g);
            let l = comparison_loss_graph(model, &mut g, &b, &batch)?;
            let grads = g.backward(l)?;
            model.params.adam_step(&b.collect(&g, &grads), &adam)?;
        }
    }
    Ok(())
}

fn phi_of<'e>(ctx: &'e RewardContext, id: TrajId) -> Result<&'e [f64]> {
    ctx.embeddings
        .get(id)
        .ok_or_else(|| Error::Invalid(format!("trajectory {id} has no embedding")))
}

/// Learns a reward from language feedback on uniformly sampled trajectories.
pub fn learn_reward_language(
    ctx: &RewardContext,
    source: &mut dyn FeedbackSource,
    cfg: &RewardConfig,
    seed: u64,
) -> Result<RewardRun> {
    cfg.validate()?;
    if ctx.query_ids.is_empty() {
        return Err(Error::Invalid("no trajectories to query".into()));
    }
    let mut rng = rng_from_seed(seed);
    let init_seed: u64 = rng.random();
    let fresh = || RewardModel::new(ctx.enc.d_z, &cfg.hidden, &mut rng_from_seed(init_seed));
    let mut model = fresh()?;
    let mut psis = PsiCache::new(ctx.enc);
    let mut asked = Vec::new();
    let mut embedded = Vec::new();
    let mut checkpoints = vec![checkpoint(&model, ctx, 0)?];
    let mut complete = true;
    for n in 1..=cfg.queries {
        let shown = *ctx.query_ids.choose(&mut rng).expect("nonempty");
        let feedback = match source.feedback(shown) {
            Ok(Some(f)) => f,
            Ok(None) => {
                // satisfied humans give no information; the query is spent
                tracing::debug!(shown, "no feedback for the shown trajectory");
                if due(cfg, n) {
                    checkpoints.push(checkpoint(&model, ctx, n)?);
                }
                continue;
            }
            Err(e) => {
                tracing::warn!(query = n, error = %e, "feedback source failed, truncating curve");
                complete = false;
                break;
            }
        };
        let negatives = sample_negatives(ctx.catalog, &feedback.text, feedback.class, cfg.negatives, &mut rng)?;
        let q = LanguageQuery {
            shown,
            text: feedback.text,
            class: feedback.class,
            negatives,
        };
        embedded.push(embed_query(&q, phi_of(ctx, shown)?, &mut psis)?);
        asked.push(q);
        if cfg.from_scratch {
            model = fresh()?;
        }
        train_language(&mut model, &embedded, cfg, cfg.epochs_per_query, &mut rng)?;
        if due(cfg, n) {
            checkpoints.push(checkpoint(&model, ctx, n)?);
        }
    }
    Ok(RewardRun {
        model,
        checkpoints,
        language_queries: asked,
        comparison_queries: Vec::new(),
        complete,
    })
}

/// Learns a reward from choices between uniformly sampled pairs.
pub fn learn_reward_comparison(
    ctx: &RewardContext,
    source: &mut dyn ChoiceSource,
    cfg: &RewardConfig,
    seed: u64,
) -> Result<RewardRun> {
    cfg.validate()?;
    let m = ctx.query_ids.len();
    if m < 2 {
        return Err(Error::Invalid("comparisons need at least two trajectories".into()));
    }
    let mut rng = rng_from_seed(seed);
    let init_seed: u64 = rng.random();
    let fresh = || RewardModel::new(ctx.enc.d_z, &cfg.hidden, &mut rng_from_seed(init_seed));
    let mut model = fresh()?;
    let mut asked = Vec::new();
    let mut pairs: Vec<(Embedding, Embedding)> = Vec::new();
    let mut checkpoints = vec![checkpoint(&model, ctx, 0)?];
    let mut complete = true;
    for n in 1..=cfg.queries {
        let i = rng.random_range(0..m);
        let j = (i + rng.random_range(1..m)) % m;
        let (a, b) = (ctx.query_ids[i], ctx.query_ids[j]);
        let chosen = match source.choose(a, b) {
            Ok(c) if c == a || c == b => c,
            Ok(c) => return Err(Error::Invalid(format!("choice {c} is not one of {a}, {b}"))),
            Err(e) => {
                tracing::warn!(query = n, error = %e, "choice source failed, truncating curve");
                complete = false;
                break;
            }
        };
        let q = ComparisonQuery { a, b, chosen };
        pairs.push((phi_of(ctx, chosen)?.to_vec(), phi_of(ctx, q.rejected())?.to_vec()));
        asked.push(q);
        if cfg.from_scratch {
            model = fresh()?;
        }
        train_comparisons(&mut model, &pairs, cfg, cfg.epochs_per_query, &mut rng)?;
        if due(cfg, n) {
            checkpoints.push(checkpoint(&model, ctx, n)?);
        }
    }
    Ok(RewardRun {
        model,
        checkpoints,
        language_queries: Vec::new(),
        comparison_queries: asked,
        complete,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use rand::Rng;
    use crate::diff::finite_diff_check;
    use crate::lang::Vocabulary;
    use crate::latent::LatentConfig;
    use crate::simhuman::{Feedback, HumanSpec, SimulatedHuman, SimulatedSource};
    use crate::world::{self, Split, TrajectoryPool, WorldConfig};

    const LN2: f64 = std::f64::consts::LN_2;

    fn zero_model(d: usize, hidden: &[usize]) -> RewardModel {
        let mut m = RewardModel::new(d, hidden, &mut rng_from_seed(0)).unwrap();
        let names: Vec<String> = m.params.names().map(str::to_string).collect();
        for n in names {
            m.params.get_mut(&n).unwrap().values_mut().fill(0.0);
        }
        m
    }

    fn linear(weights: &[f64]) -> RewardModel {
        let mut m = zero_model(weights.len(), &[]);
        let name = m.mlp.weight_name(0);
        m.params.get_mut(&name).unwrap().values_mut().copy_from_slice(weights);
        m
    }

    fn random_vec<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_batch(n: usize, d: usize, k: usize, seed: u64) -> Vec<QueryEmbedding> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| QueryEmbedding {
                phi: random_vec(d, &mut rng),
                psi: random_vec(d, &mut rng),
                negatives: (0..k).map(|_| random_vec(d, &mut rng)).collect(),
            })
            .collect()
    }

    fn nll(gap: f64) -> f64 {
        -bt_prob(gap, 0.0).ln()
    }

    #[test]
    fn bt_prob_identities() {
        assert_eq!(bt_prob(2.0, 2.0), 0.5);
        assert!((bt_prob(3f64.ln(), 0.0) - 0.75).abs() < 1e-12);
        let p = bt_prob(1000.0, 0.0);
        assert!(p.is_finite() && (p - 1.0).abs() < 1e-12);
        assert!(bt_prob(0.0, 1000.0) >= 0.0);
    }

    #[test]
    fn constant_model_losses() {
        let m = zero_model(4, &[8]);
        let batch = random_batch(6, 4, 5, 1);
        assert!((explicit_loss(&m, &batch).unwrap() - LN2).abs() < 1e-12);
        assert!((implicit_loss(&m, &batch, 5).unwrap() - LN2).abs() < 1e-12);
        assert!((reward_total_loss(&m, &batch, 5, LossMode::Full).unwrap() - 2.0 * LN2).abs() < 1e-12);
        let pairs: Vec<(&[f64], &[f64])> = batch.iter().map(|q| (q.phi.as_slice(), q.psi.as_slice())).collect();
        assert!((comparison_loss(&m, &pairs).unwrap() - LN2).abs() < 1e-12);
    }

    #[test]
    fn ln3_gap_gives_three_to_one_odds() {
        let m = linear(&[3f64.ln(), 0.0]);
        let q = QueryEmbedding {
            phi: vec![0.2, -0.7],
            psi: vec![1.0, 0.0],
            negatives: vec![vec![0.0, 5.0]],
        };
        let expected = -(0.75f64).ln();
        assert!((explicit_loss(&m, std::slice::from_ref(&q)).unwrap() - expected).abs() < 1e-12);
        assert!((implicit_loss(&m, std::slice::from_ref(&q), 1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn losses_match_loop_oracles() {
        let mut rng = rng_from_seed(5);
        let m = RewardModel::new(6, &[8, 4], &mut rng).unwrap();
        let k = 5;
        let batch = random_batch(7, 6, k, 9);
        let r = |x: &[f64]| m.reward(x).unwrap();
        let mut e = 0.0;
        let mut i = 0.0;
        for q in &batch {
            let hat = r(&q.improved());
            e += nll(hat - r(&q.phi));
            for j in 0..k {
                i += nll(hat - r(&q.imagined(j))) / k as f64;
            }
        }
        e /= batch.len() as f64;
        i /= batch.len() as f64;
        assert!((explicit_loss(&m, &batch).unwrap() - e).abs() < 1e-10);
        assert!((implicit_loss(&m, &batch, k).unwrap() - i).abs() < 1e-10);
        let total = reward_total_loss(&m, &batch, k, LossMode::Full).unwrap();
        assert!((total - (e + i)).abs() < 1e-10);
        assert!((reward_total_loss(&m, &batch, k, LossMode::ExplicitOnly).unwrap() - e).abs() < 1e-12);
        assert!((reward_total_loss(&m, &batch, k, LossMode::ImplicitOnly).unwrap() - i).abs() < 1e-12);

        let pairs: Vec<(&[f64], &[f64])> = batch.iter().map(|q| (q.phi.as_slice(), q.psi.as_slice())).collect();
        let c: f64 = pairs.iter().map(|(a, b)| nll(r(a) - r(b))).sum::<f64>() / pairs.len() as f64;
        assert!((comparison_loss(&m, &pairs).unwrap() - c).abs() < 1e-10);
    }

    #[test]
    fn single_negative_reduces_to_explicit_form() {
        let m = RewardModel::new(4, &[6], &mut rng_from_seed(2)).unwrap();
        let batch = random_batch(5, 4, 1, 3);
        // put the imagined point where the shown trajectory was
        let swapped: Vec<QueryEmbedding> = batch
            .iter()
            .map(|q| QueryEmbedding {
                phi: q.phi.clone(),
                psi: q.psi.clone(),
                negatives: vec![vec![0.0; 4]],
            })
            .collect();
        let a = implicit_loss(&m, &swapped, 1).unwrap();
        let b = explicit_loss(&m, &swapped).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn missing_negatives_are_rejected() {
        let m = zero_model(3, &[]);
        let batch = random_batch(2, 3, 2, 0);
        assert!(implicit_loss(&m, &batch, 3).is_err());
        assert!(reward_total_loss(&m, &batch, 3, LossMode::Full).is_err());
        assert!(explicit_loss(&m, &batch).is_ok());
        assert!(explicit_loss(&m, &[]).is_err());
        assert!(comparison_loss(&m, &[]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let m = RewardModel::new(5, &[6], &mut rng_from_seed(seed)).unwrap();
            let batch = random_batch(4, 5, 3, seed + 100);
            for mode in [LossMode::Full, LossMode::ExplicitOnly, LossMode::ImplicitOnly] {
                let report = finite_diff_check(
                    |g, b| Ok(language_loss_graph(&m, g, b, &batch, 3, mode)?.total),
                    &m.params,
                    1e-6,
                    1e-4,
                )
                .unwrap();
                assert!(report.passed, "{mode:?} {report:?}");
            }
            let pairs: Vec<(&[f64], &[f64])> = batch.iter().map(|q| (q.phi.as_slice(), q.psi.as_slice())).collect();
            let report = finite_diff_check(|g, b| comparison_loss_graph(&m, g, b, &pairs), &m.params, 1e-6, 1e-4).unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    fn binary_entropy(p: f64) -> f64 {
        if p <= 0.0 || p >= 1.0 {
            0.0
        } else {
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        }
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let truth = [0.0, 1.0, -2.0, 0.5];
        let pairs = [(0, 1), (1, 2), (3, 0), (2, 3)];
        let floor: f64 = pairs.iter().map(|&(a, b)| binary_entropy(bt_prob(truth[a], truth[b]))).sum::<f64>() / 4.0;
        assert!((cross_entropy(&truth, &truth, &pairs) - floor).abs() < 1e-12);
        assert!((cross_entropy(&[0.0; 4], &[0.0; 4], &pairs) - LN2).abs() < 1e-12);
        let learned = [0.3, -0.2, 0.9, 0.0];
        assert!(cross_entropy(&truth, &learned, &pairs) > floor);
        let oracle: f64 = pairs
            .iter()
            .map(|&(a, b)| {
                let p = bt_prob(truth[a], truth[b]);
                let q = bt_prob(learned[a], learned[b]);
                -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((cross_entropy(&truth, &learned, &pairs) - oracle).abs() < 1e-12);
    }

    #[test]
    fn best_of_pool_reference_cases() {
        let ids = [10, 11, 12, 13];
        let truth = [1.0, 3.0, 2.0, 5.0];
        let monotone: Vec<f64> = truth.iter().map(|x: &f64| x.powi(3) + 7.0).collect();
        let b = best_of_pool(&ids, &monotone, &truth);
        assert_eq!((b.id, b.normalized, b.degenerate), (13, 1.0, false));
        let b = best_of_pool(&ids, &[0.0; 4], &truth);
        assert_eq!((b.id, b.normalized), (10, 0.0));
        let b = best_of_pool(&ids, &[0.0, 1.0, 1.0, 0.0], &truth);
        assert_eq!((b.id, b.normalized), (11, 0.5));
        let b = best_of_pool(&ids, &[0.0, 1.0, 1.0, 0.0], &[2.0; 4]);
        assert_eq!((b.normalized, b.degenerate), (1.0, true));
    }

    #[test]
    fn auc_reference_cases() {
        let c = LearningCurve::new("m", vec![(0, 0.3), (5, 0.3), (20, 0.3)]).unwrap();
        assert!((auc(&c).unwrap() - 0.3).abs() < 1e-12);
        let c = LearningCurve::new("m", vec![(0, 0.0), (10, 0.5), (20, 1.0)]).unwrap();
        assert!((auc(&c).unwrap() - 0.5).abs() < 1e-12);
        let c = LearningCurve::new("m", vec![(0, 0.0), (5, 0.4), (10, 0.8), (20, 1.0)]).unwrap();
        assert!((auc(&c).unwrap() - 0.65).abs() < 1e-12);
        assert!(auc(&LearningCurve::new("m", vec![(0, 1.0)]).unwrap()).is_err());
        assert!(LearningCurve::new("m", vec![(5, 1.0), (5, 2.0)]).is_err());
    }

    #[test]
    fn negatives_avoid_the_feedback_class() {
        let cat = Catalog::builtin();
        let mut rng = rng_from_seed(1);
        let class = cat.class_of("Move faster.");
        for _ in 0..50 {
            let neg = sample_negatives(&cat, "Move faster.", class, 5, &mut rng).unwrap();
            assert_eq!(neg.len(), 5);
            assert!(neg.iter().all(|t| cat.class_of(t) != class));
            let mut uniq = neg.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 5);
        }
        let neg = sample_negatives(&cat, "zoom around", None, 5, &mut rng).unwrap();
        assert!(neg.iter().all(|t| t != "zoom around"));
        assert!(sample_negatives(&cat, "Move faster.", class, cat.len(), &mut rng).is_err());
    }

    struct Fixture {
        pool: TrajectoryPool,
        enc: EncoderPair,
        embeddings: PoolEmbeddings,
        train: Vec<TrajId>,
        eval: EvalSet,
        catalog: Catalog,
    }

    fn fixture() -> Fixture {
        let mut pool = world::generate_pool(&WorldConfig::default(), 60, 4).unwrap();
        world::split(&mut pool, [0.6, 0.2, 0.2], 4).unwrap();
        let catalog = Catalog::builtin();
        let enc = EncoderPair::new(
            &LatentConfig { d_z: 8, ..LatentConfig::default() },
            Vocabulary::from_catalog(&catalog),
            &mut rng_from_seed(4),
        )
        .unwrap();
        let embeddings = enc.embed_pool(&pool).unwrap();
        let train = pool.in_split(Split::Train).map(|e| e.trajectory.id).collect();
        let test: Vec<_> = pool.in_split(Split::Test).collect();
        let eval = EvalSet::new(
            test.iter().map(|e| e.trajectory.id).collect(),
            test.iter().map(|e| embeddings.get(e.trajectory.id).unwrap().to_vec()).collect(),
            test.iter().map(|e| e.features).collect(),
            100,
            4,
        )
        .unwrap();
        Fixture { pool, enc, embeddings, train, eval, catalog }
    }

    fn context<'a>(f: &'a Fixture, w: [f64; 4]) -> RewardContext<'a> {
        RewardContext {
            enc: &f.enc,
            embeddings: &f.embeddings,
            query_ids: &f.train,
            catalog: &f.catalog,
            eval: &f.eval,
            w,
        }
    }

    fn source<'a>(f: &'a Fixture, human: &'a SimulatedHuman, seed: u64) -> SimulatedSource<'a, rand_chacha::ChaCha8Rng> {
        SimulatedSource { human, pool: &f.pool, catalog: &f.catalog, rng: rng_from_seed(seed) }
    }

    #[test]
    fn zero_queries_leave_one_checkpoint() {
        let f = fixture();
        let w = [1.0, 0.0, 0.0, 0.0];
        let human = SimulatedHuman::from_pool(&HumanSpec { w, beta: 1.0 }, &f.pool).unwrap();
        let cfg = RewardConfig { queries: 0, ..RewardConfig::default() };
        let run = learn_reward_language(&context(&f, w), &mut source(&f, &human, 1), &cfg, 1).unwrap();
        assert_eq!(run.checkpoints.len(), 1);
        assert!(run.language_queries.is_empty() && run.complete);
        let run = learn_reward_comparison(&context(&f, w), &mut source(&f, &human, 1), &cfg, 1).unwrap();
        assert_eq!(run.checkpoints.len(), 1);
    }

    #[test]
    fn checkpoints_every_five_queries() {
        let f = fixture();
        let w = [1.0, -2.0, 0.5, 3.0];
        let human = SimulatedHuman::from_pool(&HumanSpec { w, beta: 1.0 }, &f.pool).unwrap();
        let cfg = RewardConfig { epochs_per_query: 2, ..RewardConfig::default() };
        let run = learn_reward_language(&context(&f, w), &mut source(&f, &human, 1), &cfg, 1).unwrap();
        let xs: Vec<usize> = run.checkpoints.iter().map(|c| c.queries).collect();
        assert_eq!(xs, vec![0, 5, 10, 15, 20]);
        assert!(run.language_queries.iter().all(|q| q.negatives.len() == cfg.negatives));
        assert!(run.language_queries.iter().all(|q| f.train.contains(&q.shown)));
        let run = learn_reward_comparison(&context(&f, w), &mut source(&f, &human, 1), &cfg, 1).unwrap();
        assert_eq!(run.best_reward_curve().points.len(), 5);
        assert_eq!(run.comparison_queries.len(), 20);
        assert!(run.comparison_queries.iter().all(|q| q.a != q.b && (q.chosen == q.a || q.chosen == q.b)));
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let f = fixture();
        let w = [1.0, -2.0, 0.5, 3.0];
        let human = SimulatedHuman::from_pool(&HumanSpec { w, beta: 1.0 }, &f.pool).unwrap();
        let cfg = RewardConfig { queries: 6, epochs_per_query: 3, ..RewardConfig::default() };
        let a = learn_reward_language(&context(&f, w), &mut source(&f, &human, 2), &cfg, 3).unwrap();
        let b = learn_reward_language(&context(&f, w), &mut source(&f, &human, 2), &cfg, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indifferent_chooser_keeps_cross_entropy_near_ln2() {
        let f = fixture();
        let w = [0.0; 4];
        let human = SimulatedHuman::from_pool(&HumanSpec { w, beta: 1.0 }, &f.pool).unwrap();
        let run = learn_reward_comparison(&context(&f, w), &mut source(&f, &human, 7), &RewardConfig::default(), 7).unwrap();
        for c in &run.checkpoints {
            assert!(c.cross_entropy >= LN2 - 1e-12 && c.cross_entropy < LN2 + 0.05, "{c:?}");
        }
    }

    #[test]
    fn rational_chooser_lowers_cross_entropy() {
        let f = fixture();
        let w = [-20.0, 0.0, 0.0, 20.0];
        let human = SimulatedHuman::from_pool(&HumanSpec { w, beta: 1.0 }, &f.pool).unwrap();
        let cfg = RewardConfig { queries: 40, learning_rate: 1e-2, ..RewardConfig::default() };
        let run = learn_reward_comparison(&context(&f, w), &mut source(&f, &human, 8), &cfg, 8).unwrap();
        let first = run.checkpoints[0].cross_entropy;
        let last = run.checkpoints.last().unwrap().cross_entropy;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn two_trajectory_pool_always_shows_the_same_pair() {
        let f = fixture();
        let w = [1.0, 0.0, 0.0, 0.0];
        let human = SimulatedHuman::from_pool(&HumanSpec { w, beta: 1.0 }, &f.pool).unwrap();
        let ids = [f.train[0], f.train[1]];
        let ctx = RewardContext { query_ids: &ids, ..context(&f, w) };
        let cfg = RewardConfig { queries: 10, epochs_per_query: 1, ..RewardConfig::default() };
        let run = learn_reward_comparison(&ctx, &mut source(&f, &human, 1), &cfg, 1).unwrap();
        for q in &run.comparison_queries {
            let mut pair = [q.a, q.b];
            pair.sort();
            assert_eq!(pair, ids);
        }
    }

    #[test]
    fn failing_source_truncates_the_curve() {
        struct Stop(usize);
        impl FeedbackSource for Stop {
            fn feedback(&mut self, _: TrajId) -> Result<Option<Feedback>> {
                self.0 = self.0.checked_sub(1).ok_or_else(|| Error::Invalid("closed".into()))?;
                Ok(Some(Feedback::free_text("Move faster.")))
            }
        }
        let f = fixture();
        let cfg = RewardConfig { epochs_per_query: 1, ..RewardConfig::default() };
        let run = learn_reward_language(&context(&f, [1.0; 4]), &mut Stop(7), &cfg, 1).unwrap();
        assert!(!run.complete);
        assert_eq!(run.language_queries.len(), 7);
        assert_eq!(run.checkpoints.iter().map(|c| c.queries).collect::<Vec<_>>(), vec![0, 5]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn bt_prob_is_complementary(x in -1e3f64..1e3, y in -1e3f64..1e3) {
            let s = bt_prob(x, y) + bt_prob(y, x);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn shifting_learned_rewards_changes_nothing(
            learned in prop::collection::vec(-5.0f64..5.0, 6),
            truth in prop::collection::vec(-5.0f64..5.0, 6),
            shift in -100.0f64..100.0,
        ) {
            let pairs: Vec<(usize, usize)> = (0..6).flat_map(|a| (0..6).filter(move |&b| b != a).map(move |b| (a, b))).collect();
            let shifted: Vec<f64> = learned.iter().map(|x| x + shift).collect();
            let ids: Vec<TrajId> = (0..6).collect();
            prop_assert!((cross_entropy(&truth, &learned, &pairs) - cross_entropy(&truth, &shifted, &pairs)).abs() < 1e-9);
            prop_assert_eq!(best_of_pool(&ids, &learned, &truth).id, best_of_pool(&ids, &shifted, &truth).id);
            prop_assert!(cross_entropy(&truth, &learned, &pairs) >= cross_entropy(&truth, &truth, &pairs) - 1e-12);
        }

        #[test]
        fn best_of_pool_matches_scan(learned in prop::collection::vec(-3i32..3, 1..12), seed in 0u64..1000) {
            let mut rng = rng_from_seed(seed);
            let learned: Vec<f64> = learned.into_iter().map(f64::from).collect();
            let truth: Vec<f64> = (0..learned.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ids: Vec<TrajId> = (0..learned.len() as TrajId).rev().collect();
            let b = best_of_pool(&ids, &learned, &truth);
            let top = learned.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let id = ids.iter().zip(&learned).filter(|(_, &r)| r == top).map(|(&i, _)| i).min().unwrap();
            prop_assert_eq!(b.id, id);
            prop_assert!((0.0..=1.0).contains(&b.normalized));
        }

        #[test]
        fn auc_of_constant_is_the_constant(v in -10.0f64..10.0, xs in prop::collection::btree_set(0usize..100, 2..8)) {
            let c = LearningCurve::new("m", xs.into_iter().map(|x| (x, v)).collect()).unwrap();
            prop_assert!((auc(&c).unwrap() - v).abs() < 1e-9);
        }
    }
}
