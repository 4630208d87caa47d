//! Conditional next-token models.
//!
//! [`WindowedLM`] is the trainable model: the last `k` response tokens plus
//! a mean-pooled embedding of the instruction feed a tanh hidden layer and a
//! vocabulary head. [`TabularLM`] is a smoothed count model with closed-form
//! probabilities, used as an oracle in tests.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::textcore::{TokenSeq, BOS, EOS, PAD};

/// Per-position log-distributions and the log-probability of each label.
#[derive(Debug, Clone)]
pub struct LogProbs {
    /// `T x V`; row `j` is `log p(. | x, y_<j)`.
    pub rows: Tensor,
    pub labels: Vec<f64>,
}

impl LogProbs {
    fn from_rows(rows: Tensor, y: &[u32]) -> Self {
        let labels = y.iter().enumerate().map(|(j, &t)| rows.get(j, t as usize)).collect();
        LogProbs { rows, labels }
    }

    pub fn total(&self) -> f64 {
        self.labels.iter().sum()
    }
}

fn check_tokens(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&t| t as usize >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

/// Context windows for every label position: window `j` holds the `k`
/// tokens preceding `y_j` in `BOS y`, left-padded with `PAD`.
pub fn windows(y: &[u32], k: usize) -> Vec<Vec<u32>> {
    let mut seq = vec![PAD; k.saturating_sub(1)];
    seq.push(BOS);
    seq.extend_from_slice(y);
    (0..y.len()).map(|j| seq[j..j + k].to_vec()).collect()
}

/// A model exposing `log p(y_j | x, y_<j)`.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// `T x V` log-distributions for the label positions of `y`.
    fn log_dist(&self, x: &[u32], y: &[u32]) -> Result<Tensor>;

    fn logprobs(&self, x: &TokenSeq, y: &TokenSeq) -> Result<LogProbs> {
        if y.is_empty() {
            return Err(Error::InvalidConfig("logprobs needs a nonempty response".into()));
        }
        let rows = self.log_dist(x.ids(), y.ids())?;
        Ok(LogProbs::from_rows(rows, y.ids()))
    }

    /// Log-distribution of the token following `prefix`.
    fn next_log_dist(&self, x: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
        let mut y = prefix.to_vec();
        y.push(PAD);
        let rows = self.log_dist(x, &y)?;
        Ok(rows.row(rows.rows() - 1).to_vec())
    }

    /// Greedy decoding until `EOS` or `max_len` tokens. The returned
    /// sequence excludes `EOS`.
    fn generate(&self, x: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
        let mut out = Vec::new();
        while out.len() < max_len {
            let dist = self.next_log_dist(x.ids(), &out)?;
            let next = argmax(&dist);
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(TokenSeq(out))
    }
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Something that can produce differentiable `T x V` logits inside a graph.
pub trait LogitSource {
    fn logits(&self, g: &mut Graph, x: &[u32], y: &[u32]) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d: usize,
    pub h: usize,
    pub k: usize,
}

impl ModelConfig {
    pub fn new(vocab: usize) -> Self {
        ModelConfig {
            vocab,
            d: 32,
            h: 64,
            k: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab < 4 || self.d == 0 || self.h == 0 || self.k == 0 {
            return Err(Error::InvalidConfig(format!("bad model dimensions {self:?}")));
        }
        Ok(())
    }

    /// Input width of the hidden layer: `k` window slots plus the pooled scene.
    pub fn input_width(&self) -> usize {
        (self.k + 1) * self.d
    }
}

/// Parameters of a [`WindowedLM`], in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub const PARAM_NAMES: [&str; 5] = ["embed", "w1", "b1", "w2", "b2"];

impl Params {
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        Params {
            embed: Tensor::zeros(cfg.vocab, cfg.d),
            w1: Tensor::zeros(cfg.input_width(), cfg.h),
            b1: Tensor::zeros(1, cfg.h),
            w2: Tensor::zeros(cfg.h, cfg.vocab),
            b2: Tensor::zeros(1, cfg.vocab),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        [&self.embed, &self.w1, &self.b1, &self.w2, &self.b2].into_iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        [
            &mut self.embed,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
        .into_iter()
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.iter().cloned().collect()
    }

    fn from_vec(mut v: Vec<Tensor>) -> Self {
        let b2 = v.pop().unwrap();
        let w2 = v.pop().unwrap();
        let b1 = v.pop().unwrap();
        let w1 = v.pop().unwrap();
        let embed = v.pop().unwrap();
        Params { embed, w1, b1, w2, b2 }
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.iter_mut() {
            a.scale(factor);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter().flat_map(|t| t.data()).map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(Tensor::all_finite)
    }

    pub fn count(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }
}

/// Fixed-window MLP language model conditioned on a pooled instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedLM {
    pub config: ModelConfig,
    pub params: Params,
}

/// Parameter leaves of a model registered in one graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundLM {
    config: ModelConfig,
    vars: [Var; 5],
}

impl BoundLM {
    /// Wraps externally created leaves, in [`PARAM_NAMES`] order.
    pub fn from_vars(config: ModelConfig, vars: [Var; 5]) -> Self {
        BoundLM { config, vars }
    }

    pub fn vars(&self) -> [Var; 5] {
        self.vars
    }

    /// Collects parameter gradients, zeros for parameters the root ignores.
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Params {
        Params::from_vec(self.vars.iter().map(|&v| grads.get_or_zeros(g, v)).collect())
    }
}

impl LogitSource for BoundLM {
    fn logits(&self, g: &mut Graph, x: &[u32], y: &[u32]) -> Result<Var> {
        let cfg = self.config;
        check_tokens(x, cfg.vocab)?;
        check_tokens(y, cfg.vocab)?;
        let [embed, w1, b1, w2, b2] = self.vars;
        let t = y.len();

        let pooled = if x.is_empty() {
            g.constant(Tensor::zeros(1, cfg.d))
        } else {
            let xe = g.gather_rows(embed, x)?;
            let avg = g.constant(Tensor::filled(1, x.len(), 1.0 / x.len() as f64));
            g.matmul(avg, xe)?
        };
        let ones = g.constant(Tensor::filled(t, 1, 1.0));
        let scene = g.matmul(ones, pooled)?;

        let wins = windows(y, cfg.k);
        let mut parts = Vec::with_capacity(cfg.k + 1);
        for slot in 0..cfg.k {
            let ids: Vec<u32> = wins.iter().map(|w| w[slot]).collect();
            parts.push(g.gather_rows(embed, &ids)?);
        }
        parts.push(scene);
        let input = g.concat(&parts)?;
        let pre = g.matmul(input, w1)?;
        let pre = g.add_row(pre, b1)?;
        let hidden = g.tanh(pre);
        let out = g.matmul(hidden, w2)?;
        g.add_row(out, b2)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<(String, TensorFile)>,
}

const MODEL_FORMAT: &str = "halva-kit/windowed-lm";

impl WindowedLM {
    /// Random initialization: embeddings and hidden weights uniform with
    /// variance `1/fan_in`, small output head, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros_like(&config);
        let mut fill = |t: &mut Tensor, scale: f64| {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        };
        fill(&mut params.embed, 3f64.sqrt());
        fill(&mut params.w1, (3.0 / config.input_width() as f64).sqrt());
        fill(&mut params.w2, 0.1 * (3.0 / config.h as f64).sqrt());
        Ok(WindowedLM { config, params })
    }

    /// Same initialization with an all-zero output head, so every
    /// conditional distribution is uniform.
    pub fn with_zero_head(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, seed)?;
        m.params.w2 = Tensor::zeros(config.h, config.vocab);
        m.params.b2 = Tensor::zeros(1, config.vocab);
        Ok(m)
    }

    /// Deep copy to serve as a frozen reference.
    pub fn clone_frozen(&self) -> WindowedLM {
        self.clone()
    }

    /// Registers the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundLM {
        let vars = [
            g.param(self.params.embed.clone()),
            g.param(self.params.w1.clone()),
            g.param(self.params.b1.clone()),
            g.param(self.params.w2.clone()),
            g.param(self.params.b2.clone()),
        ];
        BoundLM {
            config: self.config,
            vars,
        }
    }

    /// Registers the parameters as constants.
    pub fn bind_constant(&self, g: &mut Graph) -> BoundLM {
        let vars = [
            g.constant(self.params.embed.clone()),
            g.constant(self.params.w1.clone()),
            g.constant(self.params.b1.clone()),
            g.constant(self.params.w2.clone()),
            g.constant(self.params.b2.clone()),
        ];
        BoundLM {
            config: self.config,
            vars,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: 1,
            config: self.config,
            params: PARAM_NAMES
                .iter()
                .zip(self.params.iter())
                .map(|(n, t)| {
                    (
                        n.to_string(),
                        TensorFile {
                            rows: t.rows(),
                            cols: t.cols(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::json("model", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::json("model", e))?;
        if file.format != MODEL_FORMAT || file.version != 1 {
            return Err(Error::InvalidConfig(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let expected = Params::zeros_like(&file.config);
        if file.params.len() != PARAM_NAMES.len() {
            return Err(Error::InvalidConfig("model file has wrong parameter count".into()));
        }
        let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
        for (((name, tf), want_name), want) in file.params.into_iter().zip(PARAM_NAMES).zip(expected.iter()) {
            if name != want_name || [tf.rows, tf.cols] != want.shape() {
                return Err(Error::InvalidConfig(format!(
                    "model parameter `{name}` has shape [{}, {}], expected `{want_name}` {:?}",
                    tf.rows,
                    tf.cols,
                    want.shape()
                )));
            }
            tensors.push(Tensor::new(tf.rows, tf.cols, tf.data)?);
        }
        Ok(WindowedLM {
            config: file.config,
            params: Params::from_vec(tensors),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Plain forward pass for a batch of windows sharing one pooled scene.
    fn hidden_logits(&self, pooled: &[f64], wins: &[Vec<u32>]) -> Result<Tensor> {
        let cfg = self.config;
        let mut input = Tensor::zeros(wins.len(), cfg.input_width());
        for (r, w) in wins.iter().enumerate() {
            let row = input.row_mut(r);
            for (slot, &tok) in w.iter().enumerate() {
                row[slot * cfg.d..(slot + 1) * cfg.d].copy_from_slice(self.params.embed.row(tok as usize));
            }
            row[cfg.k * cfg.d..].copy_from_slice(pooled);
        }
        let mut hidden = crate::autodiff::matmul(&input, &self.params.w1)?;
        for r in 0..hidden.rows() {
            for (v, b) in hidden.row_mut(r).iter_mut().zip(self.params.b1.data()) {
                *v = (*v + b).tanh();
            }
        }
        let mut out = crate::autodiff::matmul(&hidden, &self.params.w2)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(self.params.b2.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    fn pooled(&self, x: &[u32]) -> Vec<f64> {
        let mut pooled = vec![0.0; self.config.d];
        if x.is_empty() {
            return pooled;
        }
        for &t in x {
            for (p, e) in pooled.iter_mut().zip(self.params.embed.row(t as usize)) {
                *p += e;
            }
        }
        for p in &mut pooled {
            *p /= x.len() as f64;
        }
        pooled
    }
}

impl LanguageModel for WindowedLM {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    /// Runs the same graph ops used in training, with constant leaves, so
    /// reference and trained log-probs agree bit for bit at a clone.
    fn log_dist(&self, x: &[u32], y: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let logits = bound.logits(&mut g, x, y)?;
        let ls = g.log_softmax(logits);
        Ok(g.value(ls).clone())
    }

    fn next_log_dist(&self, x: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
        check_tokens(x, self.config.vocab)?;
        check_tokens(prefix, self.config.vocab)?;
        let mut y = prefix.to_vec();
        y.push(PAD);
        let win = windows(&y, self.config.k).pop().unwrap_or_default();
        let logits = self.hidden_logits(&self.pooled(x), &[win])?;
        Ok(crate::autodiff::log_softmax_rows(&logits).into_data())
    }
}

/// Add-one smoothed count model over the `k`-token context window. The
/// instruction is ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    vocab: usize,
    k: usize,
    counts: HashMap<Vec<u32>, HashMap<u32, u64>>,
}

impl TabularLM {
    pub fn new(vocab: usize, k: usize) -> Self {
        TabularLM {
            vocab,
            k,
            counts: HashMap::new(),
        }
    }

    /// Counts every `(window, next token)` of each response, `EOS` included
    /// when the caller appended it.
    pub fn fit<'a>(&mut self, responses: impl IntoIterator<Item = &'a TokenSeq>) -> Result<()> {
        for y in responses {
            check_tokens(y.ids(), self.vocab)?;
            for (w, &t) in windows(y.ids(), self.k).into_iter().zip(y.ids()) {
                *self.counts.entry(w).or_default().entry(t).or_insert(0) += 1;
            }
        }
        Ok(())
    }

    pub fn count(&self, window: &[u32], next: u32) -> u64 {
        self.counts
            .get(window)
            .and_then(|m| m.get(&next))
            .copied()
            .unwrap_or(0)
    }

    fn row(&self, window: &[u32]) -> Vec<f64> {
        let v = self.vocab as f64;
        match self.counts.get(window) {
            None => vec![-v.ln(); self.vocab],
            Some(m) => {
                let total: u64 = m.values().sum();
                let denom = (total as f64 + v).ln();
                (0..self.vocab as u32)
                    .map(|t| ((m.get(&t).copied().unwrap_or(0) + 1) as f64).ln() - denom)
                    .collect()
            }
        }
    }
}

impl LanguageModel for TabularLM {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn log_dist(&self, x: &[u32], y: &[u32]) -> Result<Tensor> {
        check_tokens(x, self.vocab)?;
        check_tokens(y, self.vocab)?;
        let rows: Vec<Vec<f64>> = windows(y, self.k).iter().map(|w| self.row(w)).collect();
        if rows.is_empty() {
            return Ok(Tensor::zeros(0, self.vocab));
        }
        Tensor::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WindowedLM {
        WindowedLM::new(
            ModelConfig {
                vocab: 12,
                d: 4,
                h: 5,
                k: 3,
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn zero_head_is_uniform() {
        let m = WindowedLM::with_zero_head(ModelConfig::new(50), 1).unwrap();
        let lp = m.logprobs(&TokenSeq(vec![5, 6, 7]), &TokenSeq(vec![9, 10, EOS])).unwrap();
        for l in &lp.labels {
            assert!((l + 50f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_normalized() {
        let m = small();
        let lp = m.logprobs(&TokenSeq(vec![4, 5]), &TokenSeq(vec![6, 7, 8, 9, EOS])).unwrap();
        for r in 0..lp.rows.rows() {
            let s: f64 = lp.rows.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(lp.labels.len(), 5);
        assert_eq!(lp.labels[1], lp.rows.get(1, 7));
    }

    #[test]
    fn out_of_range_tokens_error() {
        let m = small();
        let err = m.logprobs(&TokenSeq(vec![4]), &TokenSeq(vec![12])).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 12, vocab: 12 }));
        assert!(m.logprobs(&TokenSeq(vec![40]), &TokenSeq(vec![5])).is_err());
        assert!(m.logprobs(&TokenSeq(vec![4]), &TokenSeq(vec![])).is_err());
    }

    #[test]
    fn conditioning_changes_logprobs() {
        let m = small();
        let y = TokenSeq(vec![6, 7, EOS]);
        let a = m.logprobs(&TokenSeq(vec![4, 5]), &y).unwrap();
        let b = m.logprobs(&TokenSeq(vec![4, 11]), &y).unwrap();
        assert!(a.labels.iter().zip(&b.labels).any(|(p, q)| p != q));
    }

    #[test]
    fn windows_pad_and_shift() {
        assert_eq!(
            windows(&[7, 8], 3),
            vec![vec![PAD, PAD, BOS], vec![PAD, BOS, 7]]
        );
        assert_eq!(windows(&[7], 1), vec![vec![BOS]]);
    }

    #[test]
    fn incremental_next_matches_full_pass() {
        let m = small();
        let x = [4, 5, 6];
        let y = [7, 8, 9];
        let full = m.log_dist(&x, &y).unwrap();
        for j in 0..y.len() {
            let next = m.next_log_dist(&x, &y[..j]).unwrap();
            for (a, b) in next.iter().zip(full.row(j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generate_stops_at_eos_and_max_len() {
        let mut m = WindowedLM::with_zero_head(ModelConfig::new(10), 3).unwrap();
        m.params.b2.data_mut()[EOS as usize] = 5.0;
        let out = m.generate(&TokenSeq(vec![4]), 10).unwrap();
        assert!(out.is_empty());

        let mut m = WindowedLM::with_zero_head(ModelConfig::new(10), 3).unwrap();
        m.params.b2.data_mut()[6] = 5.0;
        let out = m.generate(&TokenSeq(vec![4]), 4).unwrap();
        assert_eq!(out.ids(), &[6, 6, 6, 6]);
    }

    #[test]
    fn clone_is_independent() {
        let mut m = small();
        let frozen = m.clone_frozen();
        m.params.w2.data_mut()[0] += 1.0;
        assert_ne!(m, frozen);
        assert_eq!(frozen.params.w2.data()[0] + 1.0, m.params.w2.data()[0]);
    }

    #[test]
    fn save_load_is_bit_exact() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = WindowedLM::load(&path).unwrap();
        assert_eq!(m, back);
        let x = TokenSeq(vec![4, 5]);
        let y = TokenSeq(vec![6, 7, EOS]);
        let a = m.logprobs(&x, &y).unwrap();
        let b = back.logprobs(&x, &y).unwrap();
        for (p, q) in a.rows.data().iter().zip(b.rows.data()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn load_rejects_wrong_shapes() {
        let m = small();
        let text = m.to_json().unwrap().replace("\"vocab\":12", "\"vocab\":13");
        assert!(WindowedLM::from_json(&text).is_err());
    }

    #[test]
    fn tabular_smoothing_formula() {
        let v = 20;
        let mut t = TabularLM::new(v, 2);
        let seqs: Vec<TokenSeq> = (0..5).map(|_| TokenSeq(vec![7, 8, EOS])).collect();
        t.fit(&seqs).unwrap();
        let lp = t.logprobs(&TokenSeq(vec![]), &TokenSeq(vec![7, 8, EOS])).unwrap();
        let n = 5.0;
        let want = ((n + 1.0) / (n + v as f64)).ln();
        for l in &lp.labels {
            assert!((l - want).abs() < 1e-12);
        }
        for r in 0..lp.rows.rows() {
            let s: f64 = lp.rows.row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tabular_memorizes_single_caption() {
        let caption = TokenSeq(vec![4, 5, 6, 5, 7, 8]);
        let mut t = TabularLM::new(10, 3);
        t.fit(&[caption.with_eos()]).unwrap();
        let out = t.generate(&TokenSeq(vec![]), 20).unwrap();
        assert_eq!(out, caption);
        assert!(t.generate(&TokenSeq(vec![]), 3).unwrap().len() <= 3);
    }
}
