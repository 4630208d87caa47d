//! Training loops: MLE pretraining, DPA/DPO finetuning against a frozen
//! copy of the starting model, and alpha sweeps.

use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{EncodedRecord, EncodedReference};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::losses::{self, CachedReference, KlMode};
use crate::model::{LanguageModel, LogitSource, Params, WindowedLM};
use crate::textcore::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Mle,
    #[default]
    Dpa,
    Dpo,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(LossMode::Mle),
            "dpa" => Ok(LossMode::Dpa),
            "dpo" => Ok(LossMode::Dpo),
            other => Err(Error::InvalidConfig(format!("unknown loss mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Mle => "mle",
            LossMode::Dpa => "dpa",
            LossMode::Dpo => "dpo",
        })
    }
}

/// Where the KL regularizer draws its reference responses from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSource {
    /// The supplied reference records, normally drawn from the corpus the
    /// base model was pretrained on.
    #[default]
    Seen,
    /// Correct responses of the training records.
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossMode,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub kl_mode: KlMode,
    pub reference: ReferenceSource,
    /// Divergence probe interval in steps; `0` probes only at the start.
    pub probe_every: usize,
    pub probe_size: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossMode::Dpa,
            alpha: 0.4,
            beta: 0.1,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0,
            clip: 5.0,
            steps: 2000,
            batch: 32,
            seed: 0,
            kl_mode: KlMode::FullVocab,
            reference: ReferenceSource::Seen,
            probe_every: 50,
            probe_size: 256,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.loss == LossMode::Dpo && !(self.beta > 0.0) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.clip < 0.0 {
            return bad("momentum must be in [0, 1); weight_decay and clip must be >= 0".into());
        }
        Ok(())
    }

    /// Worker count: `threads` if set above 1, else `HALVA_KIT_THREADS`,
    /// else 1.
    pub fn worker_count(&self) -> usize {
        if self.threads > 1 {
            return self.threads;
        }
        std::env::var("HALVA_KIT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    }
}

/// SGD with momentum and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    clip: f64,
    velocity: Params,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, model: &WindowedLM) -> Self {
        Optimizer {
            lr: config.lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            clip: config.clip,
            velocity: Params::zeros_like(&model.config),
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, model: &mut WindowedLM, grads: &mut Params) -> f64 {
        let norm = grads.sq_norm().sqrt();
        if self.clip > 0.0 && norm > self.clip {
            grads.scale(self.clip / norm);
        }
        for ((p, v), g) in model
            .params
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grads.iter())
        {
            for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * (*vi + self.weight_decay * *pi);
            }
        }
        norm
    }
}

/// One `(instruction, response)` pair of an MLE corpus, response ending
/// with `EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub instruction: TokenSeq,
    pub response: TokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_a: f64,
    pub l_d: f64,
    pub total: f64,
    pub divergence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub wall_time: Duration,
}

impl TrainTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "l_a", "l_d", "total", "divergence"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.l_a.to_string(),
                r.l_d.to_string(),
                r.total.to_string(),
                r.divergence.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            rows.push(rec?);
        }
        Ok(TrainTrace {
            rows,
            wall_time: Duration::ZERO,
        })
    }

    pub fn divergences(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().filter_map(|r| r.divergence.map(|d| (r.step, d)))
    }
}

/// Deterministic epoch-shuffled batch sampler.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

struct RecordGrad {
    grads: Params,
    values: [f64; 3],
}

/// Evaluates `f` for every item, in parallel chunks when `workers > 1`, and
/// returns results in item order.
fn map_ordered<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Vec<Result<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Sums per-record gradients in record order; reports the first
/// non-finite loss.
fn reduce(
    model: &WindowedLM,
    results: Vec<Result<RecordGrad>>,
    ids: &[&str],
    step: usize,
) -> Result<(Params, [f64; 3])> {
    let mut total = Params::zeros_like(&model.config);
    let mut values = [0.0; 3];
    for (r, id) in results.into_iter().zip(ids) {
        let r = r?;
        if !r.values.iter().all(|v| v.is_finite()) || !r.grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                record: id.to_string(),
            });
        }
        total.add_assign(&r.grads);
        for (a, b) in values.iter_mut().zip(r.values) {
            *a += b;
        }
    }
    Ok((total, values))
}

/// Next-token NLL pretraining. Returns the final mean per-token NLL over
/// the last logged batch window.
pub fn pretrain_mle(model: &mut WindowedLM, corpus: &[Example], config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = Optimizer::new(config, model);
    let mut batcher = Batcher::new(corpus.len(), ChaCha8Rng::seed_from_u64(config.seed));
    let workers = config.worker_count();
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&Example> = batcher.next(config.batch).into_iter().map(|i| &corpus[i]).collect();
        let tokens: usize = batch.iter().map(|e| e.response.len()).sum();
        let scale = 1.0 / tokens.max(1) as f64;
        let frozen = &*model;
        let results = map_ordered(&batch, workers, |e| {
            let mut g = Graph::new();
            let bound = frozen.bind(&mut g);
            let logits = bound.logits(&mut g, e.instruction.ids(), e.response.ids())?;
            let logp = g.log_softmax(logits);
            let idx: Vec<(usize, usize)> =
                e.response.ids().iter().enumerate().map(|(j, &t)| (j, t as usize)).collect();
            let picked = g.select(logp, &idx)?;
            let sum = g.sum(picked);
            let root = g.scalar_mul(sum, -scale);
            let grads = g.backward(root)?;
            Ok(RecordGrad {
                grads: bound.grads(&g, &grads),
                values: [g.scalar(root), 0.0, 0.0],
            })
        });
        let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
        let (mut grads, values) = reduce(model, results, &ids, step)?;
        history.push(values[0]);
        opt.step(model, &mut grads);
    }
    Ok(history)
}

/// Mean per-token NLL of `model` over `corpus`.
pub fn mean_nll(model: &dyn LanguageModel, corpus: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0;
    for e in corpus {
        let lp = model.logprobs(&e.instruction, &e.response)?;
        total -= lp.total();
        tokens += e.response.len();
    }
    Ok(total / tokens.max(1) as f64)
}

/// Mean full-vocabulary KL of `model` from the cached reference
/// distributions.
pub fn divergence(model: &dyn LanguageModel, probes: &[CachedReference]) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for p in probes {
        sum += losses::kl_cached(p, model, KlMode::FullVocab)?;
    }
    Ok(sum / probes.len() as f64)
}

/// Mean alignment loss over records.
pub fn mean_alignment_loss(model: &dyn LanguageModel, records: &[EncodedRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut sum = 0.0;
    for r in records {
        sum += losses::alignment_loss(model, r)?.0;
    }
    Ok(sum / records.len() as f64)
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: WindowedLM,
    pub trace: TrainTrace,
    /// Mean training-set alignment loss before and after.
    pub initial_l_a: f64,
    pub final_l_a: f64,
    /// Divergence from the starting model after the last step.
    pub final_divergence: f64,
}

/// Reference responses the regularizer and divergence probe draw from.
pub fn reference_pool(train: &[EncodedRecord], references: &[EncodedReference], source: ReferenceSource) -> Vec<EncodedReference> {
    match source {
        ReferenceSource::Seen => references.to_vec(),
        ReferenceSource::Unseen => train
            .iter()
            .map(|r| EncodedReference {
                id: r.id.clone(),
                instruction: r.instruction.clone(),
                response: r.correct.clone(),
            })
            .collect(),
    }
}

/// DPA or DPO finetuning. The frozen reference is a clone of `model` taken
/// at entry.
pub fn finetune(
    model: &WindowedLM,
    train: &[EncodedRecord],
    references: &[EncodedReference],
    config: &TrainConfig,
) -> Result<FinetuneResult> {
    config.validate()?;
    if config.loss == LossMode::Mle {
        return Err(Error::InvalidConfig("finetune needs loss dpa or dpo".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let start = Instant::now();
    let frozen = model.clone_frozen();
    let mut current = model.clone();
    let pool = reference_pool(train, references, config.reference);
    if config.loss == LossMode::Dpa && pool.is_empty() && config.alpha > 0.0 {
        return Err(Error::InvalidConfig("no reference records for the KL term".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let probe_idx: Vec<usize> = if pool.len() <= config.probe_size {
        (0..pool.len()).collect()
    } else {
        rand::seq::index::sample(&mut rng, pool.len(), config.probe_size).into_vec()
    };
    let probes = probe_idx
        .iter()
        .map(|&i| CachedReference::new(&frozen, &pool[i]))
        .collect::<Result<Vec<_>>>()?;

    let mut ref_cache: Vec<Option<CachedReference>> = vec![None; pool.len()];
    let dpo_refs = if config.loss == LossMode::Dpo {
        train
            .iter()
            .map(|r| losses::reference_sequence_logps(&frozen, r))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let initial_l_a = mean_alignment_loss(&frozen, train)?;
    let mut opt = Optimizer::new(config, &current);
    let mut batcher = Batcher::new(train.len(), ChaCha8Rng::seed_from_u64(rng.gen()));
    let workers = config.worker_count();
    let mut trace = TrainTrace::default();
    let inv_b = 1.0 / config.batch as f64;

    for step in 0..config.steps {
        let idx = batcher.next(config.batch);
        let probe_now = step == 0 || (config.probe_every > 0 && step % config.probe_every == 0);
        let div = if probe_now {
            Some(divergence(&current, &probes)?)
        } else {
            None
        };

        let mut jobs: Vec<(usize, Option<usize>)> = Vec::with_capacity(idx.len());
        for &i in &idx {
            let r = if config.loss == LossMode::Dpa && config.alpha > 0.0 {
                let j = rng.gen_range(0..pool.len());
                if ref_cache[j].is_none() {
                    ref_cache[j] = Some(CachedReference::new(&frozen, &pool[j])?);
                }
                Some(j)
            } else {
                None
            };
            jobs.push((i, r));
        }

        let cur = &current;
        let cache = &ref_cache;
        let results = map_ordered(&jobs, workers, |&(i, r)| {
            let record = &train[i];
            let mut g = Graph::new();
            let bound = cur.bind(&mut g);
            let (root, values) = match config.loss {
                LossMode::Dpa => {
                    let refs: Vec<CachedReference> = r.iter().filter_map(|&j| cache[j].clone()).collect();
                    let (root, b) = losses::dpa_loss_graph(&mut g, &bound, record, &refs, config.alpha, config.kl_mode)?;
                    (root, [b.l_a, b.l_d, b.total])
                }
                LossMode::Dpo => {
                    let root = losses::dpo_loss_graph(&mut g, &bound, record, dpo_refs[i], config.beta)?;
                    let v = g.scalar(root);
                    (root, [v, 0.0, v])
                }
                LossMode::Mle => unreachable!(),
            };
            let scaled = g.scalar_mul(root, inv_b);
            let grads = g.backward(scaled)?;
            Ok(RecordGrad {
                grads: bound.grads(&g, &grads),
                values,
            })
        });
        let ids: Vec<&str> = idx.iter().map(|&i| train[i].id.as_str()).collect();
        let (mut grads, values) = reduce(&current, results, &ids, step)?;
        trace.rows.push(TraceRow {
            step,
            l_a: values[0] * inv_b,
            l_d: values[1] * inv_b,
            total: values[2] * inv_b,
            divergence: div,
        });
        opt.step(&mut current, &mut grads);
    }

    let final_divergence = divergence(&current, &probes)?;
    let final_l_a = mean_alignment_loss(&current, train)?;
    trace.wall_time = start.elapsed();
    Ok(FinetuneResult {
        model: current,
        trace,
        initial_l_a,
        final_l_a,
        final_divergence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub final_l_a: f64,
    pub final_divergence: f64,
    pub chair_i: f64,
    pub chair_s: f64,
    pub coverage: f64,
    pub f1: f64,
}

/// One finetune per alpha, all from `model` with the same seed.
pub fn sweep_alpha(
    model: &WindowedLM,
    train: &[EncodedRecord],
    references: &[EncodedReference],
    alphas: &[f64],
    config: &TrainConfig,
    evaluate: &dyn Fn(&WindowedLM) -> Result<EvalReport>,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() {
        return Err(Error::InvalidConfig("alpha list is empty".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = TrainConfig {
            alpha,
            loss: LossMode::Dpa,
            ..config.clone()
        };
        let result = finetune(model, train, references, &cfg)?;
        let report = evaluate(&result.model)?;
        rows.push(SweepRow {
            alpha,
            final_l_a: result.final_l_a,
            final_divergence: result.final_divergence,
            chair_i: report.chair_i,
            chair_s: report.chair_s,
            coverage: report.coverage,
            f1: report.f1,
        });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
