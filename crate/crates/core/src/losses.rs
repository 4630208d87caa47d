//! Phrase-level alignment loss, token-wise KL regularizer, their weighted
//! sum, and the sequence-level DPO baseline.
//!
//! Every loss has a graph form (for training and gradient checks) taking a
//! [`LogitSource`], and a plain form evaluating finished models.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{EncodedRecord, EncodedReference};
use crate::autodiff::{softplus, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, LogitSource};
use crate::textcore::{Span, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    #[default]
    FullVocab,
    LabelOnly,
}

impl FromStr for KlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_vocab" => Ok(KlMode::FullVocab),
            "label_only" => Ok(KlMode::LabelOnly),
            other => Err(Error::InvalidConfig(format!("unknown kl mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_d: f64,
    pub total: f64,
    pub alpha: f64,
    pub per_pair_margins: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_dpo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

/// `l_i = sum of label log-probs over span i`.
pub fn accumulate_phrase_logps(label_logps: &[f64], spans: &[Span]) -> Result<Vec<f64>> {
    spans
        .iter()
        .map(|s| {
            if !s.is_valid_for(label_logps.len()) {
                return Err(Error::InvalidSpan {
                    start: s.start,
                    end: s.end,
                    len: label_logps.len(),
                });
            }
            Ok(label_logps[s.start..s.end].iter().sum())
        })
        .collect()
}

/// `mean_i softplus(m_i)` over per-pair margins `m_i = l_h - l_c`.
pub fn alignment_from_margins(margins: &[f64]) -> Result<f64> {
    if margins.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(margins.iter().map(|&m| softplus(m)).sum::<f64>() / margins.len() as f64)
}

/// Alignment loss of a finished model, with per-pair margins.
pub fn alignment_loss(model: &dyn LanguageModel, record: &EncodedRecord) -> Result<(f64, Vec<f64>)> {
    if record.pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    let c = model.logprobs(&record.instruction, &record.correct)?;
    let h = model.logprobs(&record.instruction, &record.hallucinated)?;
    let (cs, hs): (Vec<Span>, Vec<Span>) = record.pairs.iter().copied().unzip();
    let lc = accumulate_phrase_logps(&c.labels, &cs)?;
    let lh = accumulate_phrase_logps(&h.labels, &hs)?;
    let margins: Vec<f64> = lh.iter().zip(&lc).map(|(h, c)| h - c).collect();
    Ok((alignment_from_margins(&margins)?, margins))
}

/// Sums of selected label log-probs per span, as graph scalars.
fn phrase_vars(g: &mut Graph, logp: Var, y: &[u32], spans: &[Span]) -> Result<Vec<Var>> {
    let len = y.len();
    spans
        .iter()
        .map(|s| {
            if !s.is_valid_for(len) {
                return Err(Error::InvalidSpan {
                    start: s.start,
                    end: s.end,
                    len,
                });
            }
            let idx: Vec<(usize, usize)> = (s.start..s.end).map(|j| (j, y[j] as usize)).collect();
            let picked = g.select(logp, &idx)?;
            Ok(g.sum(picked))
        })
        .collect()
}

/// Graph form of the alignment loss; returns the scalar node and margins.
pub fn alignment_loss_graph(
    g: &mut Graph,
    src: &dyn LogitSource,
    record: &EncodedRecord,
) -> Result<(Var, Vec<f64>)> {
    if record.pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    let x = record.instruction.ids();
    let lc = src.logits(g, x, record.correct.ids())?;
    let lc = g.log_softmax(lc);
    let lh = src.logits(g, x, record.hallucinated.ids())?;
    let lh = g.log_softmax(lh);
    let (cs, hs): (Vec<Span>, Vec<Span>) = record.pairs.iter().copied().unzip();
    let pc = phrase_vars(g, lc, record.correct.ids(), &cs)?;
    let ph = phrase_vars(g, lh, record.hallucinated.ids(), &hs)?;
    let mut margins = Vec::with_capacity(pc.len());
    let mut margin_vars = Vec::with_capacity(pc.len());
    for (c, h) in pc.into_iter().zip(ph) {
        let m = g.sub(h, c)?;
        margins.push(g.scalar(m));
        margin_vars.push(m);
    }
    let all = g.concat(&margin_vars)?;
    let sp = g.softplus(all);
    Ok((g.mean(sp), margins))
}

/// Reference log-distributions over one reference record, computed once
/// from the frozen model.
#[derive(Debug, Clone)]
pub struct CachedReference {
    pub instruction: TokenSeq,
    pub response: TokenSeq,
    pub logp: Tensor,
    pub prob: Tensor,
}

impl CachedReference {
    pub fn new(reference_model: &dyn LanguageModel, record: &EncodedReference) -> Result<Self> {
        let logp = reference_model
            .logprobs(&record.instruction, &record.response)?
            .rows;
        let prob = logp.map(f64::exp);
        Ok(CachedReference {
            instruction: record.instruction.clone(),
            response: record.response.clone(),
            logp,
            prob,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.logp.cols()
    }
}

fn kl_rows(reference: &CachedReference, logp: &Tensor, mode: KlMode) -> f64 {
    match mode {
        KlMode::FullVocab => reference
            .prob
            .data()
            .iter()
            .zip(reference.logp.data())
            .zip(logp.data())
            .map(|((p, lr), lt)| if *p == 0.0 { 0.0 } else { p * (lr - lt) })
            .sum(),
        KlMode::LabelOnly => reference
            .response
            .ids()
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let t = t as usize;
                reference.prob.get(j, t) * (reference.logp.get(j, t) - logp.get(j, t))
            })
            .sum(),
    }
}

/// Token-wise KL of one reference record, summed over positions.
pub fn kl_divergence(
    reference_model: &dyn LanguageModel,
    model: &dyn LanguageModel,
    record: &EncodedReference,
    mode: KlMode,
) -> Result<f64> {
    if reference_model.vocab_size() != model.vocab_size() {
        return Err(Error::VocabMismatch(reference_model.vocab_size(), model.vocab_size()));
    }
    let cached = CachedReference::new(reference_model, record)?;
    kl_cached(&cached, model, mode)
}

/// KL against a cached reference.
pub fn kl_cached(reference: &CachedReference, model: &dyn LanguageModel, mode: KlMode) -> Result<f64> {
    if reference.vocab_size() != model.vocab_size() {
        return Err(Error::VocabMismatch(reference.vocab_size(), model.vocab_size()));
    }
    let logp = model
        .logprobs(&reference.instruction, &reference.response)?
        .rows;
    Ok(kl_rows(reference, &logp, mode))
}

/// Graph form of the token-wise KL; the reference enters as constants.
pub fn kl_divergence_graph(
    g: &mut Graph,
    src: &dyn LogitSource,
    reference: &CachedReference,
    mode: KlMode,
) -> Result<Var> {
    let logits = src.logits(g, reference.instruction.ids(), reference.response.ids())?;
    let logp = g.log_softmax(logits);
    if g.shape(logp) != reference.logp.shape() {
        return Err(Error::VocabMismatch(reference.vocab_size(), g.shape(logp)[1]));
    }
    match mode {
        KlMode::FullVocab => {
            let ref_logp = g.constant(reference.logp.clone());
            let diff = g.sub(ref_logp, logp)?;
            let prob = g.constant(reference.prob.clone());
            let weighted = g.mul(prob, diff)?;
            Ok(g.sum(weighted))
        }
        KlMode::LabelOnly => {
            let idx: Vec<(usize, usize)> = reference
                .response
                .ids()
                .iter()
                .enumerate()
                .map(|(j, &t)| (j, t as usize))
                .collect();
            let picked = g.select(logp, &idx)?;
            let pick_const = |t: &Tensor| {
                let data = idx.iter().map(|&(r, c)| t.get(r, c)).collect();
                Tensor::new(idx.len(), 1, data)
            };
            let ref_logp = g.constant(pick_const(&reference.logp)?);
            let prob = g.constant(pick_const(&reference.prob)?);
            let diff = g.sub(ref_logp, picked)?;
            let weighted = g.mul(prob, diff)?;
            Ok(g.sum(weighted))
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")))
    }
}

/// `L_a + alpha * L_d`, where `L_d` is the mean over `references` of the
/// per-record KL sums.
pub fn dpa_loss(
    record: &EncodedRecord,
    references: &[CachedReference],
    model: &dyn LanguageModel,
    alpha: f64,
    mode: KlMode,
) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    let (l_a, margins) = alignment_loss(model, record)?;
    let l_d = if references.is_empty() {
        0.0
    } else {
        let mut sum = 0.0;
        for r in references {
            sum += kl_cached(r, model, mode)?;
        }
        sum / references.len() as f64
    };
    Ok(LossBreakdown {
        l_a,
        l_d,
        total: l_a + alpha * l_d,
        alpha,
        per_pair_margins: margins,
        l_dpo: None,
        beta: None,
    })
}

/// Graph form of [`dpa_loss`].
pub fn dpa_loss_graph(
    g: &mut Graph,
    src: &dyn LogitSource,
    record: &EncodedRecord,
    references: &[CachedReference],
    alpha: f64,
    mode: KlMode,
) -> Result<(Var, LossBreakdown)> {
    check_alpha(alpha)?;
    let (la, margins) = alignment_loss_graph(g, src, record)?;
    let l_a = g.scalar(la);
    if references.is_empty() {
        return Ok((
            la,
            LossBreakdown {
                l_a,
                l_d: 0.0,
                total: l_a,
                alpha,
                per_pair_margins: margins,
                l_dpo: None,
                beta: None,
            },
        ));
    }
    let mut terms = Vec::with_capacity(references.len());
    for r in references {
        terms.push(kl_divergence_graph(g, src, r, mode)?);
    }
    let all = g.concat(&terms)?;
    let ld = g.mean(all);
    let l_d = g.scalar(ld);
    let scaled = g.scalar_mul(ld, alpha);
    let total = g.add(la, scaled)?;
    Ok((
        total,
        LossBreakdown {
            l_a,
            l_d,
            total: g.scalar(total),
            alpha,
            per_pair_margins: margins,
            l_dpo: None,
            beta: None,
        },
    ))
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("beta must be > 0, got {beta}")))
    }
}

/// Frozen-model sequence log-probs `(log p_ref(y_c|x), log p_ref(y_h|x))`.
pub fn reference_sequence_logps(reference_model: &dyn LanguageModel, record: &EncodedRecord) -> Result<(f64, f64)> {
    let c = reference_model.logprobs(&record.instruction, &record.correct)?;
    let h = reference_model.logprobs(&record.instruction, &record.hallucinated)?;
    Ok((c.total(), h.total()))
}

/// `softplus(-z)` with `z = beta * (log-ratio of y_c - log-ratio of y_h)`.
pub fn dpo_from_logps(policy: (f64, f64), reference: (f64, f64), beta: f64) -> Result<f64> {
    check_beta(beta)?;
    let z = beta * ((policy.0 - reference.0) - (policy.1 - reference.1));
    Ok(softplus(-z))
}

pub fn dpo_loss(
    record: &EncodedRecord,
    model: &dyn LanguageModel,
    reference_model: &dyn LanguageModel,
    beta: f64,
) -> Result<f64> {
    check_beta(beta)?;
    let c = model.logprobs(&record.instruction, &record.correct)?;
    let h = model.logprobs(&record.instruction, &record.hallucinated)?;
    dpo_from_logps((c.total(), h.total()), reference_sequence_logps(reference_model, record)?, beta)
}

fn outside_spans(len: usize, spans: impl Iterator<Item = Span> + Clone) -> Vec<usize> {
    (0..len).filter(|&j| !spans.clone().any(|s| s.start <= j && j < s.end)).collect()
}

/// Graph form of the DPO loss, given cached reference sequence log-probs.
pub fn dpo_loss_graph(
    g: &mut Graph,
    src: &dyn LogitSource,
    record: &EncodedRecord,
    reference: (f64, f64),
    beta: f64,
) -> Result<Var> {
    check_beta(beta)?;
    let x = record.instruction.ids();
    let yc = record.correct.ids();
    let yh = record.hallucinated.ids();
    let lc = src.logits(g, x, yc)?;
    let lc = g.log_softmax(lc);
    let lh = src.logits(g, x, yh)?;
    let lh = g.log_softmax(lh);
    let pick = |y: &[u32], js: &[usize]| -> Vec<(usize, usize)> { js.iter().map(|&j| (j, y[j] as usize)).collect() };

    // Positions outside the spans are paired one to one so that terms with
    // identical context cancel exactly.
    let (shared_c, shared_h) = (outside_spans(yc.len(), record.pairs.iter().map(|p| p.0)), outside_spans(yh.len(), record.pairs.iter().map(|p| p.1)));
    let diff = if shared_c.len() == shared_h.len() && !shared_c.is_empty() {
        let inside = |len: usize, shared: &[usize]| -> Vec<usize> { (0..len).filter(|j| !shared.contains(j)).collect() };
        let pc = g.select(lc, &pick(yc, &shared_c))?;
        let ph = g.select(lh, &pick(yh, &shared_h))?;
        let paired = g.sub(pc, ph)?;
        let mut diff = g.sum(paired);
        let span_c = inside(yc.len(), &shared_c);
        if !span_c.is_empty() {
            let v = g.select(lc, &pick(yc, &span_c))?;
            let v = g.sum(v);
            diff = g.add(diff, v)?;
        }
        let span_h = inside(yh.len(), &shared_h);
        if !span_h.is_empty() {
            let v = g.select(lh, &pick(yh, &span_h))?;
            let v = g.sum(v);
            diff = g.sub(diff, v)?;
        }
        diff
    } else {
        let all_c: Vec<usize> = (0..yc.len()).collect();
        let all_h: Vec<usize> = (0..yh.len()).collect();
        let c = g.select(lc, &pick(yc, &all_c))?;
        let c = g.sum(c);
        let h = g.select(lh, &pick(yh, &all_h))?;
        let h = g.sum(h);
        g.sub(c, h)?
    };
    let offset = g.constant(Tensor::scalar(reference.0 - reference.1));
    let ratio = g.sub(diff, offset)?;
    let neg_z = g.scalar_mul(ratio, -beta);
    Ok(g.softplus(neg_z))
}

/// A [`LogitSource`] serving fixed logit leaves per `(x, y)`; lets tests
/// differentiate losses directly with respect to logits.
#[derive(Debug, Default)]
pub struct LogitTable {
    entries: Vec<(Vec<u32>, Vec<u32>, Var)>,
}

impl LogitTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, x: &[u32], y: &[u32], logits: Var) {
        self.entries.push((x.to_vec(), y.to_vec(), logits));
    }

    pub fn get(&self, x: &[u32], y: &[u32]) -> Option<Var> {
        self.entries
            .iter()
            .find(|(ex, ey, _)| ex == x && ey == y)
            .map(|e| e.2)
    }
}

impl LogitSource for LogitTable {
    fn logits(&self, _g: &mut Graph, x: &[u32], y: &[u32]) -> Result<Var> {
        self.get(x, y).ok_or_else(|| {
            Error::InvalidConfig(format!("no logits registered for response of length {}", y.len()))
        })
    }
}
