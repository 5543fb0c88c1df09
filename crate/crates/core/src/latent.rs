//! Shared trajectory/language latent space.
//!
//! A per-step MLP maps each `(s_t, a_t)` pair to the latent space and the
//! trajectory embedding is the mean over steps. Utterances are embedded as
//! the mean of their token embeddings followed by a dense head. Training
//! pushes `psi . (phi_b - phi_a)` up for every triplet `(a, b, utterance)`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diff::{log_sigmoid, AdamConfig, Bound, Graph, Mlp, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::lang::{tokenize, Triplet, Vocabulary};
use crate::seed::rng_from_seed;
use crate::world::{TrajId, Trajectory, TrajectoryPool};

/// Width of the per-step encoder input: `(x, y, g, dx/dt, dy/dt, dg)`.
pub const STEP_INPUT: usize = 6;

pub const LANG_EMBED: &str = "lang.embed";
const TRAJ_PREFIX: &str = "traj";
const LANG_HEAD_PREFIX: &str = "lang.head";

pub type Embedding = Vec<f64>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    pub d_z: usize,
    pub hidden: Vec<usize>,
    /// Weight of the trajectory-norm hinge.
    pub a: f64,
    /// Weight of the language-norm penalty.
    pub b: f64,
    /// Epochs with the language encoder frozen.
    pub phase1_epochs: usize,
    /// Epochs updating both encoders.
    pub phase2_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            d_z: 16,
            hidden: vec![32, 32],
            a: 1.0,
            b: 1.0,
            phase1_epochs: 50,
            phase2_epochs: 150,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_z < 2 {
            return Err(Error::Config(format!("latent dimension must be at least 2, got {}", self.d_z)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be nonzero".into()));
        }
        if !(self.a >= 0.0 && self.b >= 0.0) {
            return Err(Error::Config(format!("norm weights must be nonnegative, got a={} b={}", self.a, self.b)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        AdamConfig::with_lr(self.learning_rate).validate()
    }

    /// The frozen-language ablation: the same epoch budget spent entirely
    /// with the language encoder frozen.
    pub fn frozen_language(&self) -> Self {
        LatentConfig {
            phase1_epochs: self.phase1_epochs + self.phase2_epochs,
            phase2_epochs: 0,
            ..self.clone()
        }
    }
}

/// Trajectory and language encoders sharing one latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub d_z: usize,
    pub traj_mlp: Mlp,
    pub traj: ParamSet,
    pub vocab: Vocabulary,
    pub lang_head: Mlp,
    pub lang: ParamSet,
    /// Training epochs applied so far.
    pub epochs: usize,
}

/// Per-step encoder input for every step of `traj`, row-major `T x 6`.
pub fn step_inputs(traj: &Trajectory, dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.len() * STEP_INPUT);
    for (s, a) in traj.states.iter().zip(&traj.actions) {
        out.extend_from_slice(&[s[0], s[1], s[2], a[0] / dt, a[1] / dt, a[2]]);
    }
    out
}

impl EncoderPair {
    pub fn new<R: Rng + ?Sized>(cfg: &LatentConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![STEP_INPUT];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.d_z);
        let traj_mlp = Mlp::new(TRAJ_PREFIX, sizes)?;
        let mut traj = ParamSet::new();
        traj_mlp.init(&mut traj, rng)?;

        let lang_head = Mlp::new(LANG_HEAD_PREFIX, vec![cfg.d_z, cfg.d_z])?;
        let mut lang = ParamSet::new();
        let limit = (3.0 / cfg.d_z as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("positive width");
        let table = (0..vocab.len() * cfg.d_z).map(|_| dist.sample(rng)).collect();
        lang.insert(LANG_EMBED, Tensor::matrix(vocab.len(), cfg.d_z, table)?)?;
        lang_head.init(&mut lang, rng)?;
        Ok(EncoderPair {
            d_z: cfg.d_z,
            traj_mlp,
            traj,
            vocab,
            lang_head,
            lang,
            epochs: 0,
        })
    }

    /// Records the trajectory encoder on `rows` (stacked per-step inputs),
    /// returning one embedding row per group of `lengths`.
    pub fn traj_forward(&self, g: &mut Graph, tb: &Bound, rows: Tensor, lengths: &[usize]) -> Result<Var> {
        let x = g.leaf(rows);
        let h = self.traj_mlp.forward(g, tb, x)?;
        g.segment_mean(h, lengths)
    }

    /// Records the language encoder on concatenated `tokens`.
    pub fn lang_forward(&self, g: &mut Graph, lb: &Bound, tokens: &[usize], lengths: &[usize]) -> Result<Var> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Invalid(format!("token {t} outside vocabulary of {}", self.vocab.len())));
        }
        let table = lb.var(LANG_EMBED)?;
        let e = g.gather_rows(table, tokens)?;
        let pooled = g.segment_mean(e, lengths)?;
        self.lang_head.forward(g, lb, pooled)
    }

    pub fn encode_trajectory(&self, traj: &Trajectory, dt: f64) -> Result<Embedding> {
        Ok(self.encode_trajectories(&[traj], dt)?.remove(0))
    }

    pub fn encode_trajectories(&self, trajs: &[&Trajectory], dt: f64) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(trajs.len());
        for chunk in trajs.chunks(64) {
            let mut rows = Vec::new();
            let mut lengths = Vec::with_capacity(chunk.len());
            for t in chunk {
                if t.is_empty() {
                    return Err(Error::Invalid(format!("trajectory {} has no steps", t.id)));
                }
                rows.extend(step_inputs(t, dt));
                lengths.push(t.len());
            }
            let n = rows.len() / STEP_INPUT;
            let mut g = Graph::new();
            let tb = self.traj.bind(&mut g);
            let phi = self.traj_forward(&mut g, &tb, Tensor::matrix(n, STEP_INPUT, rows)?, &lengths)?;
            let v = g.value(phi);
            out.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
        }
        Ok(out)
    }

    pub fn encode_language(&self, tokens: &[usize]) -> Result<Embedding> {
        if tokens.is_empty() {
            return Err(Error::Invalid("cannot embed an empty token list".into()));
        }
        let mut g = Graph::new();
        let lb = self.lang.bind(&mut g);
        let psi = self.lang_forward(&mut g, &lb, tokens, &[tokens.len()])?;
        Ok(g.value(psi).values().to_vec())
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        self.encode_language(&tokenize(text, &self.vocab)?)
    }

    /// Embeddings of every trajectory in `pool`.
    pub fn embed_pool(&self, pool: &TrajectoryPool) -> Result<PoolEmbeddings> {
        let trajs: Vec<&Trajectory> = pool.entries.iter().map(|e| &e.trajectory).collect();
        let phis = self.encode_trajectories(&trajs, pool.config.dt)?;
        Ok(PoolEmbeddings {
            index: trajs.iter().enumerate().map(|(i, t)| (t.id, i)).collect(),
            ids: trajs.iter().map(|t| t.id).collect(),
            phis,
        })
    }
}

/// Cached trajectory embeddings keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEmbeddings {
    ids: Vec<TrajId>,
    phis: Vec<Embedding>,
    index: HashMap<TrajId, usize>,
}

impl PoolEmbeddings {
    /// Embeddings from explicit `(id, phi)` pairs; ids must be distinct.
    pub fn new(entries: Vec<(TrajId, Embedding)>) -> Result<Self> {
        let mut out = PoolEmbeddings {
            ids: Vec::with_capacity(entries.len()),
            phis: Vec::with_capacity(entries.len()),
            index: HashMap::new(),
        };
        for (id, phi) in entries {
            if out.index.insert(id, out.ids.len()).is_some() {
                return Err(Error::Invalid(format!("duplicate trajectory id {id}")));
            }
            out.ids.push(id);
            out.phis.push(phi);
        }
        Ok(out)
    }

    /// Restriction to `ids`, in the given order.
    pub fn subset(&self, ids: &[TrajId]) -> Result<Self> {
        PoolEmbeddings::new(
            ids.iter()
                .map(|&id| {
                    self.get(id)
                        .map(|p| (id, p.to_vec()))
                        .ok_or_else(|| Error::Invalid(format!("trajectory {id} has no embedding")))
                })
                .collect::<Result<_>>()?,
        )
    }

    pub fn ids(&self) -> &[TrajId] {
        &self.ids
    }

    pub fn get(&self, id: TrajId) -> Option<&[f64]> {
        self.index.get(&id).map(|&i| self.phis[i].as_slice())
    }

    /// `(id, embedding)` in pool order.
    pub fn iter(&self) -> impl Iterator<Item = (TrajId, &[f64])> {
        self.ids.iter().copied().zip(self.phis.iter().map(Vec::as_slice))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `-log sigmoid(psi . (phi_b - phi_a))`.
pub fn align_loss(phi_a: &[f64], phi_b: &[f64], psi: &[f64]) -> f64 {
    let diff: Vec<f64> = phi_b.iter().zip(phi_a).map(|(b, a)| b - a).collect();
    -log_sigmoid(dot(psi, &diff))
}

/// Hinge on trajectory norms above one plus a pull of `|psi|` towards one.
pub fn norm_loss(phi_a: &[f64], phi_b: &[f64], psi: &[f64], a: f64, b: f64) -> f64 {
    let hinge = |v: &[f64]| (norm(v) - 1.0).max(0.0);
    a * (hinge(phi_a) + hinge(phi_b)) + b * (norm(psi) - 1.0).powi(2)
}

/// Batch means of the alignment and norm losses for `r x d` embedding rows.
pub fn latent_losses(g: &mut Graph, phi_a: Var, phi_b: Var, psi: Var, a: f64, b: f64) -> Result<(Var, Var)> {
    let diff = g.sub(phi_b, phi_a)?;
    let score = g.row_dot(psi, diff)?;
    let ls = g.log_sigmoid(score);
    let mean_ls = g.mean(ls);
    let align = g.scale(mean_ls, -1.0);

    let hinge = |g: &mut Graph, v: Var| {
        let n = g.row_norm(v);
        let shifted = g.add_scalar(n, -1.0);
        g.relu(shifted)
    };
    let ha = hinge(g, phi_a);
    let hb = hinge(g, phi_b);
    let hsum = g.add(ha, hb)?;
    let traj_term = g.scale(hsum, a);
    let pn = g.row_norm(psi);
    let pd = g.add_scalar(pn, -1.0);
    let psq = g.square(pd);
    let lang_term = g.scale(psq, b);
    let per_row = g.add(traj_term, lang_term)?;
    let norm = g.mean(per_row);
    Ok((align, norm))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Frozen,
    Cofinetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Frozen => "frozen",
            Phase::Cofinetune => "cofinetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRun {
    /// Encoder from the epoch with the best validation accuracy.
    pub encoder: EncoderPair,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Triplets resolved against a pool: cached step inputs and token ids.
struct Prepared {
    dt: f64,
    traj_rows: Vec<Vec<f64>>,
    traj_len: Vec<usize>,
    slot: HashMap<TrajId, usize>,
    tokens: Vec<Vec<usize>>,
    text_slot: HashMap<String, usize>,
}

#[derive(Clone, Copy)]
struct Item {
    a: usize,
    b: usize,
    text: usize,
}

impl Prepared {
    fn new(pool: &TrajectoryPool) -> Self {
        let mut p = Prepared {
            dt: pool.config.dt,
            traj_rows: Vec::new(),
            traj_len: Vec::new(),
            slot: HashMap::new(),
            tokens: Vec::new(),
            text_slot: HashMap::new(),
        };
        for e in &pool.entries {
            p.slot.insert(e.trajectory.id, p.traj_rows.len());
            p.traj_rows.push(step_inputs(&e.trajectory, p.dt));
            p.traj_len.push(e.trajectory.len());
        }
        p
    }

    fn items(&mut self, triplets: &[Triplet], vocab: &Vocabulary) -> Result<Vec<Item>> {
        triplets
            .iter()
            .map(|t| {
                let lookup = |id: TrajId| {
                    self.slot
                        .get(&id)
                        .copied()
                        .ok_or_else(|| Error::Invalid(format!("triplet refers to unknown trajectory {id}")))
                };
                let (a, b) = (lookup(t.a_id)?, lookup(t.b_id)?);
                let text = match self.text_slot.get(&t.text) {
                    Some(&i) => i,
                    None => {
                        self.tokens.push(tokenize(&t.text, vocab)?);
                        self.text_slot.insert(t.text.clone(), self.tokens.len() - 1);
                        self.tokens.len() - 1
                    }
                };
                Ok(Item { a, b, text })
            })
            .collect()
    }
}

struct BatchLoss {
    total: Var,
    lang: Bound,
    traj: Bound,
}

fn batch_graph(enc: &EncoderPair, prep: &Prepared, batch: &[Item], a: f64, b: f64, g: &mut Graph) -> Result<BatchLoss> {
    let traj = enc.traj.bind(g);
    let lang = enc.lang.bind(g);

    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut order = Vec::new();
    let mut pick = |slot: usize| {
        *local.entry(slot).or_insert_with(|| {
            order.push(slot);
            order.len() - 1
        })
    };
    let a_idx: Vec<usize> = batch.iter().map(|it| pick(it.a)).collect();
    let b_idx: Vec<usize> = batch.iter().map(|it| pick(it.b)).collect();
    let mut rows = Vec::new();
    let mut lengths = Vec::new();
    for &s in &order {
        rows.extend_from_slice(&prep.traj_rows[s]);
        lengths.push(prep.traj_len[s]);
    }
    let n = rows.len() / STEP_INPUT;
    let phi = enc.traj_forward(g, &traj, Tensor::matrix(n, STEP_INPUT, rows)?, &lengths)?;
    let phi_a = g.gather_rows(phi, &a_idx)?;
    let phi_b = g.gather_rows(phi, &b_idx)?;

    let mut text_local: HashMap<usize, usize> = HashMap::new();
    let mut texts = Vec::new();
    let u_idx: Vec<usize> = batch
        .iter()
        .map(|it| {
            *text_local.entry(it.text).or_insert_with(|| {
                texts.push(it.text);
                texts.len() - 1
            })
        })
        .collect();
    let tokens: Vec<usize> = texts.iter().flat_map(|&t| prep.tokens[t].iter().copied()).collect();
    let tlens: Vec<usize> = texts.iter().map(|&t| prep.tokens[t].len()).collect();
    let psi_u = enc.lang_forward(g, &lang, &tokens, &tlens)?;
    let psi = g.gather_rows(psi_u, &u_idx)?;

    let (align, normv) = latent_losses(g, phi_a, phi_b, psi, a, b)?;
    let total = g.add(align, normv)?;
    Ok(BatchLoss { total, lang, traj })
}

/// Fraction of triplets with `psi . (phi_b - phi_a) > 0`.
pub fn accuracy(enc: &EncoderPair, pool: &TrajectoryPool, triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Invalid("accuracy needs at least one triplet".into()));
    }
    let phis = enc.embed_pool(pool)?;
    accuracy_with(enc, &phis, triplets)
}

/// [`accuracy`] against precomputed trajectory embeddings.
pub fn accuracy_with(enc: &EncoderPair, phis: &PoolEmbeddings, triplets: &[Triplet]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Invalid("accuracy needs at least one triplet".into()));
    }
    let mut psi_cache: HashMap<&str, Embedding> = HashMap::new();
    let mut correct = 0usize;
    for t in triplets {
        let psi = match psi_cache.get(t.text.as_str()) {
            Some(p) => p,
            None => {
                let p = enc.encode_text(&t.text)?;
                psi_cache.entry(t.text.as_str()).or_insert(p)
            }
        };
        let get = |id| phis.get(id).ok_or_else(|| Error::Invalid(format!("triplet refers to unknown trajectory {id}")));
        let (pa, pb) = (get(t.a_id)?, get(t.b_id)?);
        let score: f64 = psi.iter().zip(pb.iter().zip(pa)).map(|(p, (b, a))| p * (b - a)).sum();
        if score > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / triplets.len() as f64)
}

/// Mean total loss over `triplets`.
pub fn dataset_loss(enc: &EncoderPair, pool: &TrajectoryPool, triplets: &[Triplet], a: f64, b: f64) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Invalid("loss needs at least one triplet".into()));
    }
    let mut prep = Prepared::new(pool);
    let items = prep.items(triplets, &enc.vocab)?;
    mean_loss(enc, &prep, &items, a, b)
}

fn mean_loss(enc: &EncoderPair, prep: &Prepared, items: &[Item], a: f64, b: f64) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in items.chunks(256) {
        let mut g = Graph::new();
        let bl = batch_graph(enc, prep, chunk, a, b, &mut g)?;
        sum += g.value(bl.total).item().expect("scalar") * chunk.len() as f64;
    }
    Ok(sum / items.len() as f64)
}

/// Initializes an encoder pair from `cfg.seed` and trains it.
pub fn train_latent(
    pool: &TrajectoryPool,
    train: &[Triplet],
    val: &[Triplet],
    vocab: Vocabulary,
    cfg: &LatentConfig,
) -> Result<LatentRun> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let enc = EncoderPair::new(cfg, vocab, &mut rng)?;
    continue_latent(enc, pool, train, val, cfg)
}

/// Runs `cfg.phase1_epochs` frozen-language epochs then
/// `cfg.phase2_epochs` co-finetuning epochs on `enc`, keeping the encoder
/// with the best validation accuracy (ties keep the earlier one).
pub fn continue_latent(
    enc: EncoderPair,
    pool: &TrajectoryPool,
    train: &[Triplet],
    val: &[Triplet],
    cfg: &LatentConfig,
) -> Result<LatentRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("training and validation splits must be nonempty".into()));
    }
    if enc.d_z != cfg.d_z {
        return Err(Error::Config(format!("encoder has d_z {} but config asks for {}", enc.d_z, cfg.d_z)));
    }
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut prep = Prepared::new(pool);
    let mut train_items = prep.items(train, &enc.vocab)?;
    let val_items = prep.items(val, &enc.vocab)?;
    // shuffling stream depends on where training resumes
    let mut rng = rng_from_seed(cfg.seed ^ (enc.epochs as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));

    let evaluate = |enc: &EncoderPair| -> Result<(f64, f64)> {
        let phis = enc.embed_pool(pool)?;
        Ok((mean_loss(enc, &prep, &val_items, cfg.a, cfg.b)?, accuracy_with(enc, &phis, val)?))
    };

    let mut enc = enc;
    let start = enc.epochs;
    let (val_loss, val_accuracy) = evaluate(&enc)?;
    let train_loss = mean_loss(&enc, &prep, &train_items, cfg.a, cfg.b)?;
    let mut history = vec![EpochRecord {
        epoch: start,
        phase: Phase::Init,
        train_loss,
        val_loss,
        val_accuracy,
    }];
    let mut best = (val_accuracy, start, enc.clone());

    let schedule = std::iter::repeat_n(Phase::Frozen, cfg.phase1_epochs)
        .chain(std::iter::repeat_n(Phase::Cofinetune, cfg.phase2_epochs));
    for phase in schedule {
        enc.epochs += 1;
        train_items.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in train_items.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bl = batch_graph(&enc, &prep, batch, cfg.a, cfg.b, &mut g)?;
            let loss = g.value(bl.total).item().expect("scalar");
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch: enc.epochs });
            }
            sum += loss * batch.len() as f64;
            let grads = g.backward(bl.total)?;
            enc.traj.adam_step(&bl.traj.collect(&g, &grads), &adam)?;
            if phase == Phase::Cofinetune {
                enc.lang.adam_step(&bl.lang.collect(&g, &grads), &adam)?;
            }
        }
        let (val_loss, val_accuracy) = evaluate(&enc)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch: enc.epochs });
        }
        tracing::debug!(epoch = enc.epochs, phase = phase.name(), val_accuracy, "latent epoch");
        history.push(EpochRecord {
            epoch: enc.epochs,
            phase,
            train_loss: sum / train_items.len() as f64,
            val_loss,
            val_accuracy,
        });
        if val_accuracy > best.0 {
            best = (val_accuracy, enc.epochs, enc.clone());
        }
    }
    let (_, best_epoch, mut encoder) = best;
    // the returned encoder keeps the full epoch count so resumed runs
    // continue numbering monotonically
    encoder.epochs = enc.epochs;
    Ok(LatentRun {
        encoder,
        best_epoch,
        history,
    })
}
