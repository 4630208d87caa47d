//! Hallucination and utility metrics, and the paired significance test.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, Task};
use crate::error::{Error, Result};
use crate::lexicon::ConceptLexicon;
use crate::model::LanguageModel;
use crate::textcore::{self, TokenSeq, Vocab, EOS, UNK};
use crate::world::{self, Negatives, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairMetrics {
    pub chair_i: f64,
    pub chair_s: f64,
    pub coverage: f64,
    pub hall_rate: f64,
    pub avg_len: f64,
}

/// Splits tokens into sentences ending at `"."`; a trailing fragment
/// without a period counts as a sentence.
fn sentences(tokens: &[String]) -> Vec<&[String]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t == "." {
            if i > start {
                out.push(&tokens[start..=i]);
            }
            start = i + 1;
        }
    }
    if start < tokens.len() {
        out.push(&tokens[start..]);
    }
    out
}

/// CHAIR-style counts over generated texts paired with their scenes.
pub fn chair_metrics(outputs: &[(String, &SceneSpec)], lexicon: &ConceptLexicon) -> Result<ChairMetrics> {
    if outputs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut mentions, mut hallucinated) = (0usize, 0usize);
    let (mut n_sent, mut bad_sent) = (0usize, 0usize);
    let (mut coverage, mut hall_records, mut tokens) = (0.0, 0usize, 0usize);
    for (text, scene) in outputs {
        let words = textcore::words(text);
        tokens += words.len();
        let truth: BTreeSet<&str> = scene.concepts().into_iter().collect();
        let mut mentioned = BTreeSet::new();
        let mut record_bad = false;
        for sentence in sentences(&words) {
            n_sent += 1;
            let mut sentence_bad = false;
            for (_, _, name) in lexicon.find_mentions(sentence) {
                mentions += 1;
                mentioned.insert(name);
                if !truth.contains(name) {
                    hallucinated += 1;
                    sentence_bad = true;
                }
            }
            if sentence_bad {
                bad_sent += 1;
                record_bad = true;
            }
        }
        if record_bad {
            hall_records += 1;
        }
        if !truth.is_empty() {
            coverage += truth.iter().filter(|c| mentioned.contains(*c)).count() as f64 / truth.len() as f64;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let n = outputs.len() as f64;
    Ok(ChairMetrics {
        chair_i: ratio(hallucinated, mentions),
        chair_s: ratio(bad_sent, n_sent),
        coverage: coverage / n,
        hall_rate: hall_records as f64 / n,
        avg_len: tokens as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Metrics {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub yes_bias: f64,
}

/// Binary metrics with "yes" as the positive class; pairs are
/// `(predicted, gold)`.
pub fn discriminative_f1(answers: &[(bool, bool)]) -> Result<F1Metrics> {
    if answers.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for &(p, g) in answers {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let n = answers.len() as f64;
    let yes_bias = (tp + fp) as f64 / n - (tp + fneg) as f64 / n;
    if tp + fp + fneg == 0 {
        return Ok(F1Metrics {
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
            yes_bias,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(F1Metrics {
        f1,
        precision,
        recall,
        yes_bias,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub delta: f64,
    pub se: f64,
    pub adjusted_delta: f64,
    pub significant: bool,
}

/// `delta = m1 - m2`, `se = sqrt(m1 (1 - m1) / n)`,
/// `adjusted = delta - 1.96 se`.
pub fn significance(m1: f64, m2: f64, n: u64) -> Result<Significance> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    for m in [m1, m2] {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::InvalidConfig(format!("rate {m} outside [0, 1]")));
        }
    }
    let se = (m1 * (1.0 - m1) / n as f64).sqrt();
    let delta = m1 - m2;
    let adjusted_delta = delta - 1.96 * se;
    Ok(Significance {
        delta,
        se,
        adjusted_delta,
        significant: adjusted_delta > 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub chair_i: f64,
    pub chair_s: f64,
    pub coverage: f64,
    pub hall_rate: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub yes_bias: f64,
    pub avg_len: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn combine(chair: ChairMetrics, f1: F1Metrics, n: usize) -> Self {
        EvalReport {
            chair_i: chair.chair_i,
            chair_s: chair.chair_s,
            coverage: chair.coverage,
            hall_rate: chair.hall_rate,
            f1: f1.f1,
            precision: f1.precision,
            recall: f1.recall,
            yes_bias: f1.yes_bias,
            avg_len: chair.avg_len,
            n,
        }
    }
}

/// Report file: all metric fields plus the echoed config and seed.
pub fn write_report(path: &Path, report: &EvalReport, config: &serde_json::Value, seed: u64) -> Result<()> {
    let mut value = serde_json::to_value(report).map_err(|e| Error::json("report", e))?;
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("config".into(), config.clone());
        map.insert("seed".into(), seed.into());
    }
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::json("report", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Description task used for generation.
    pub task: Task,
    pub seed: u64,
    pub max_len: usize,
    /// Yes/no questions asked about each scene.
    pub questions: usize,
    pub negatives: Negatives,
}


impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            task: Task::Short,
            seed: 0,
            max_len: 48,
            questions: 4,
            negatives: Negatives::Random,
        }
    }
}

/// Greedy caption for one scene under the task's instruction.
pub fn describe(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    scene: &SceneSpec,
    index: usize,
    lexicon: &ConceptLexicon,
    options: &EvalOptions,
) -> Result<String> {
    let prompt = augment::ground_truth_prompt(scene, index, options.task, lexicon, options.seed)?;
    let out = model.generate(&vocab.tokenize(&prompt.instruction), options.max_len)?;
    Ok(vocab.detokenize(&out))
}

/// Answers a yes/no instruction by comparing `log p(yes)` with `log p(no)`.
pub fn answer_yes_no(model: &dyn LanguageModel, vocab: &Vocab, instruction: &str) -> Result<bool> {
    let x = vocab.tokenize(instruction);
    let score = |word: &str| -> Result<f64> {
        let y = TokenSeq(vec![vocab.id(word).unwrap_or(UNK), EOS]);
        Ok(model.logprobs(&x, &y)?.total())
    };
    Ok(score("yes")? > score("no")?)
}

/// The `k`-th yes/no question about scene `index` and its gold answer.
pub fn yes_no_probe(
    scene: &SceneSpec,
    index: usize,
    k: usize,
    lexicon: &ConceptLexicon,
    options: &EvalOptions,
) -> Result<(String, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0xa5a5_0000 ^ ((index as u64) << 20) ^ ((k as u64) << 52));
    let (question, yes) = world::sample_yes_no(scene, lexicon, options.negatives, &mut rng);
    Ok((format!("{} {question}", scene.prefix()), yes))
}

/// Captions every scene and answers `options.questions` yes/no questions
/// about it.
pub fn evaluate(
    model: &dyn LanguageModel,
    vocab: &Vocab,
    scenes: &[SceneSpec],
    lexicon: &ConceptLexicon,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut captions = Vec::with_capacity(scenes.len());
    let mut answers = Vec::with_capacity(scenes.len() * options.questions);
    for (i, scene) in scenes.iter().enumerate() {
        captions.push((describe(model, vocab, scene, i, lexicon, options)?, scene));
        for k in 0..options.questions {
            let (instruction, gold) = yes_no_probe(scene, i, k, lexicon, options)?;
            answers.push((answer_yes_no(model, vocab, &instruction)?, gold));
        }
    }
    let chair = chair_metrics(&captions, lexicon)?;
    let f1 = discriminative_f1(&answers)?;
    Ok(EvalReport::combine(chair, f1, scenes.len()))
}
