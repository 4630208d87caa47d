//! Generative data augmentation: hallucinated responses are built by
//! replacing ground-truth concepts in a correct response, keeping every other
//! token in place, and recording the token span of each replaced phrase.

pub mod llm;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::lexicon::{ConceptKind, ConceptLexicon};
use crate::textcore::{self, locate_phrase, Span, TokenSeq, Vocab};
use crate::world::{self, derived_rng, CaptionStyle, Negatives, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    OneSentence,
    Short,
    Detailed,
    #[serde(rename = "yesno")]
    YesNo,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::OneSentence, Task::Short, Task::Detailed, Task::YesNo];

    pub fn style(self) -> Option<CaptionStyle> {
        match self {
            Task::OneSentence => Some(CaptionStyle::OneSentence),
            Task::Short => Some(CaptionStyle::Short),
            Task::Detailed => Some(CaptionStyle::Detailed),
            Task::YesNo => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::OneSentence => "one_sentence",
            Task::Short => "short",
            Task::Detailed => "detailed",
            Task::YesNo => "yesno",
        }
    }

    /// Replacements per description when not configured.
    pub fn default_targets(self) -> Option<usize> {
        match self {
            Task::OneSentence => Some(1),
            Task::Short => Some(2),
            Task::Detailed | Task::YesNo => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task `{s}`")))
    }
}

/// One correct/hallucinated phrase pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "PairRepr", into = "PairRepr")]
pub struct AlignedPair {
    pub correct_span: Span,
    pub hallucinated_span: Span,
    pub correct_text: String,
    pub hallucinated_text: String,
}

#[derive(Serialize, Deserialize)]
struct PairRepr {
    c_start: usize,
    c_end: usize,
    h_start: usize,
    h_end: usize,
    c_text: String,
    h_text: String,
}

impl From<PairRepr> for AlignedPair {
    fn from(r: PairRepr) -> Self {
        AlignedPair {
            correct_span: Span { start: r.c_start, end: r.c_end },
            hallucinated_span: Span { start: r.h_start, end: r.h_end },
            correct_text: r.c_text,
            hallucinated_text: r.h_text,
        }
    }
}

impl From<AlignedPair> for PairRepr {
    fn from(p: AlignedPair) -> Self {
        PairRepr {
            c_start: p.correct_span.start,
            c_end: p.correct_span.end,
            h_start: p.hallucinated_span.start,
            h_end: p.hallucinated_span.end,
            c_text: p.correct_text,
            h_text: p.hallucinated_text,
        }
    }
}

/// Instruction plus correct and hallucinated responses. Texts are stored in
/// normalized token form, so spans index `textcore::words(text)` directly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub id: String,
    pub task: Task,
    pub instruction: String,
    pub correct: String,
    pub hallucinated: String,
    pub pairs: Vec<AlignedPair>,
    pub scene_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub id: String,
    pub instruction: String,
    pub response: String,
}

/// A training record in vocabulary ids. Responses carry a trailing EOS;
/// spans are unaffected by it.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRecord {
    pub id: String,
    pub instruction: TokenSeq,
    pub correct: TokenSeq,
    pub hallucinated: TokenSeq,
    pub pairs: Vec<(Span, Span)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedReference {
    pub id: String,
    pub instruction: TokenSeq,
    pub response: TokenSeq,
}

impl TrainingRecord {
    pub fn encode(&self, vocab: &Vocab) -> EncodedRecord {
        EncodedRecord {
            id: self.id.clone(),
            instruction: vocab.tokenize(&self.instruction),
            correct: vocab.tokenize(&self.correct).with_eos(),
            hallucinated: vocab.tokenize(&self.hallucinated).with_eos(),
            pairs: self
                .pairs
                .iter()
                .map(|p| (p.correct_span, p.hallucinated_span))
                .collect(),
        }
    }
}

impl ReferenceRecord {
    pub fn encode(&self, vocab: &Vocab) -> EncodedReference {
        EncodedReference {
            id: self.id.clone(),
            instruction: vocab.tokenize(&self.instruction),
            response: vocab.tokenize(&self.response).with_eos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementMode {
    #[default]
    Closed,
    Open,
}

impl FromStr for ReplacementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(ReplacementMode::Closed),
            "open" => Ok(ReplacementMode::Open),
            _ => Err(Error::InvalidConfig(format!("unknown replacement mode `{s}`"))),
        }
    }
}

/// An instruction and its ground-truth response for one scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub task: Task,
    pub instruction: String,
    pub response: String,
}

/// Renders the ground-truth prompt for `scene` and `task`. Deterministic in
/// `(seed, scene index, task)`, so the same scene always yields the same text.
pub fn ground_truth_prompt(
    scene: &SceneSpec,
    index: usize,
    task: Task,
    lexicon: &ConceptLexicon,
    seed: u64,
) -> Result<Prompt> {
    let task_no = Task::ALL.iter().position(|t| *t == task).unwrap_or(0) as u64;
    let mut rng = derived_rng(seed ^ 0x5eed_0000_0000 ^ (task_no << 56), index as u64);
    match task.style() {
        Some(style) => {
            let text = world::ground_truth_caption(scene, lexicon, style, &mut rng)?;
            let question = world::caption_prompt(style, &mut rng);
            Ok(Prompt {
                task,
                instruction: format!("{} {question}", scene.prefix()),
                response: textcore::normalize(&text),
            })
        }
        None => {
            let pool: Vec<&str> = lexicon
                .of_kind(ConceptKind::Object)
                .map(|c| c.name.as_str())
                .collect();
            let (question, yes) = world::yes_no_question(scene, &pool, &mut rng);
            Ok(Prompt {
                task,
                instruction: format!("{} {question}", scene.prefix()),
                response: if yes { "yes" } else { "no" }.into(),
            })
        }
    }
}

/// Ground-truth `(instruction, response)` pairs for every scene and task:
/// the corpus a base model is pretrained on.
pub fn ground_truth_corpus(
    scenes: &[SceneSpec],
    lexicon: &ConceptLexicon,
    tasks: &[Task],
    seed: u64,
) -> Result<Vec<ReferenceRecord>> {
    let mut out = Vec::with_capacity(scenes.len() * tasks.len());
    for (i, scene) in scenes.iter().enumerate() {
        for &task in tasks {
            let p = ground_truth_prompt(scene, i, task, lexicon, seed)?;
            out.push(ReferenceRecord {
                id: format!("{}/{}", scene.id, task),
                instruction: p.instruction,
                response: p.response,
            });
        }
    }
    Ok(out)
}

struct Replacement {
    correct: Span,
    words: Vec<String>,
}

/// Picks `k_targets` concept mentions of the response and samples a
/// replacement for each. Mentions whose sampling fails are skipped in favor
/// of others; fewer than `k_targets` successes is an error.
fn plan_replacements<R: Rng + ?Sized>(
    scene: &SceneSpec,
    tokens: &[String],
    lexicon: &ConceptLexicon,
    mode: ReplacementMode,
    k_targets: usize,
    rng: &mut R,
) -> Result<Vec<Replacement>> {
    let scene_concepts = scene.concepts();
    let mentions = lexicon.find_mentions(tokens);
    if let Some((_, _, name)) = mentions.iter().find(|m| !scene_concepts.contains(m.2)) {
        return Err(Error::InvalidRecord {
            id: scene.id.clone(),
            reason: format!("response mentions `{name}`, which is not in the scene"),
        });
    }
    if k_targets == 0 || k_targets > mentions.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot replace {k_targets} of {} concept mentions in scene `{}`",
            mentions.len(),
            scene.id
        )));
    }
    let mut order: Vec<usize> = (0..mentions.len()).collect();
    order.shuffle(rng);
    let mut forbidden: BTreeSet<String> = scene_concepts.iter().map(|s| s.to_string()).collect();
    let mut chosen = Vec::new();
    let mut last_err = None;
    for idx in order {
        if chosen.len() == k_targets {
            break;
        }
        let (start, end, name) = mentions[idx];
        let sampled = match mode {
            ReplacementMode::Closed => lexicon.sample_closed_set_replacement(name, &forbidden, rng),
            ReplacementMode::Open => lexicon.sample_open_set_replacement(name, &forbidden, rng),
        };
        match sampled {
            Ok(c) => {
                forbidden.insert(c.name.clone());
                chosen.push(Replacement {
                    correct: Span { start, end },
                    words: textcore::words(&c.name),
                });
            }
            Err(e @ Error::NoReplacement(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    if chosen.len() < k_targets {
        return Err(last_err.unwrap_or_else(|| Error::NoReplacement(scene.id.clone())));
    }
    chosen.sort_by_key(|r| r.correct.start);
    Ok(chosen)
}

/// Applies planned replacements and records spans with a left-to-right
/// cursor over the hallucinated tokens.
fn apply_replacements(tokens: &[String], plan: &[Replacement]) -> Result<(Vec<String>, Vec<AlignedPair>)> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut pos = 0;
    let mut expected = Vec::with_capacity(plan.len());
    for r in plan {
        out.extend_from_slice(&tokens[pos..r.correct.start]);
        expected.push(out.len());
        out.extend(r.words.iter().cloned());
        pos = r.correct.end;
    }
    out.extend_from_slice(&tokens[pos..]);

    let mut pairs = Vec::with_capacity(plan.len());
    let mut cursor = 0;
    for (r, &want) in plan.iter().zip(&expected) {
        let span = locate_phrase(&out, &r.words, cursor).filter(|s| s.start == want);
        let span = match span {
            Some(s) => s,
            None => {
                // an earlier identical phrase shadows the replacement
                locate_phrase(&out, &r.words, want).ok_or_else(|| Error::InvalidRecord {
                    id: String::new(),
                    reason: "replacement phrase not found".into(),
                })?
            }
        };
        cursor = span.end;
        pairs.push(AlignedPair {
            correct_span: r.correct,
            hallucinated_span: span,
            correct_text: tokens[r.correct.start..r.correct.end].join(" "),
            hallucinated_text: r.words.join(" "),
        });
    }
    Ok((out, pairs))
}

/// Builds a training record by replacing `k_targets` ground-truth concepts
/// of a description.
pub fn augment_description<R: Rng + ?Sized>(
    scene: &SceneSpec,
    prompt: &Prompt,
    lexicon: &ConceptLexicon,
    mode: ReplacementMode,
    k_targets: usize,
    rng: &mut R,
) -> Result<TrainingRecord> {
    let tokens = textcore::words(&prompt.response);
    let plan = plan_replacements(scene, &tokens, lexicon, mode, k_targets, rng)?;
    let (hallucinated, pairs) = apply_replacements(&tokens, &plan)?;
    let record = TrainingRecord {
        id: format!("{}/{}", scene.id, prompt.task),
        task: prompt.task,
        instruction: textcore::normalize(&prompt.instruction),
        correct: tokens.join(" "),
        hallucinated: hallucinated.join(" "),
        pairs,
        scene_id: scene.id.clone(),
    };
    validate_record(&record, scene, lexicon)?;
    Ok(record)
}

/// Yes/no record: the hallucinated answer is the inverted correct answer.
pub fn augment_yesno(scene: &SceneSpec, question: &str, answer: bool) -> TrainingRecord {
    let (c, h) = if answer { ("yes", "no") } else { ("no", "yes") };
    let span = Span { start: 0, end: 1 };
    TrainingRecord {
        id: format!("{}/yesno", scene.id),
        task: Task::YesNo,
        instruction: textcore::normalize(question),
        correct: c.into(),
        hallucinated: h.into(),
        pairs: vec![AlignedPair {
            correct_span: span,
            hallucinated_span: span,
            correct_text: c.into(),
            hallucinated_text: h.into(),
        }],
        scene_id: scene.id.clone(),
    }
}

pub fn invert_answer(answer: &str) -> Option<&'static str> {
    match answer {
        "yes" => Some("no"),
        "no" => Some("yes"),
        _ => None,
    }
}

/// Checks the four record invariants: pair well-formedness, ordering and
/// disjointness of spans, token identity outside spans, and exclusion of
/// scene concepts from hallucinated phrases.
pub fn validate_record(record: &TrainingRecord, scene: &SceneSpec, lexicon: &ConceptLexicon) -> Result<()> {
    let fail = |reason: String| Error::InvalidRecord {
        id: record.id.clone(),
        reason,
    };
    let c = textcore::words(&record.correct);
    let h = textcore::words(&record.hallucinated);
    if c.join(" ") != record.correct || h.join(" ") != record.hallucinated {
        return Err(fail("responses are not in normalized token form".into()));
    }
    if record.pairs.is_empty() {
        return Err(fail("no phrase pairs".into()));
    }

    for (i, p) in record.pairs.iter().enumerate() {
        if !p.correct_span.is_valid_for(c.len()) || !p.hallucinated_span.is_valid_for(h.len()) {
            return Err(fail(format!(
                "pair {i}: span {} / {} out of range",
                p.correct_span, p.hallucinated_span
            )));
        }
        let ct = c[p.correct_span.start..p.correct_span.end].join(" ");
        let ht = h[p.hallucinated_span.start..p.hallucinated_span.end].join(" ");
        if ct != p.correct_text || ht != p.hallucinated_text {
            return Err(fail(format!(
                "pair {i}: span text `{ct}`/`{ht}` differs from stored `{}`/`{}`",
                p.correct_text, p.hallucinated_text
            )));
        }
        if p.correct_text == p.hallucinated_text {
            return Err(fail(format!("pair {i}: correct and hallucinated text are equal")));
        }
    }

    for w in record.pairs.windows(2) {
        if w[0].correct_span.end > w[1].correct_span.start
            || w[0].hallucinated_span.end > w[1].hallucinated_span.start
        {
            return Err(fail("spans overlap or are out of order".into()));
        }
    }

    let (mut cp, mut hp) = (0, 0);
    for (i, p) in record.pairs.iter().enumerate() {
        if c[cp..p.correct_span.start] != h[hp..p.hallucinated_span.start] {
            return Err(fail(format!("tokens before pair {i} differ")));
        }
        cp = p.correct_span.end;
        hp = p.hallucinated_span.end;
    }
    if c[cp..] != h[hp..] {
        return Err(fail("tokens after the last pair differ".into()));
    }

    let scene_concepts = scene.concepts();
    for p in &record.pairs {
        let words = textcore::words(&p.hallucinated_text);
        if let Some(m) = lexicon
            .find_mentions(&words)
            .into_iter()
            .find(|m| scene_concepts.contains(m.2))
        {
            return Err(fail(format!(
                "hallucinated phrase `{}` mentions scene concept `{}`",
                p.hallucinated_text, m.2
            )));
        }
    }
    Ok(())
}

/// Task proportions. Each task gets `round(p * scenes)` records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mix {
    pub one_sentence: f64,
    pub short: f64,
    pub detailed: f64,
    pub yesno: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            one_sentence: 0.025,
            short: 0.54,
            detailed: 0.38,
            yesno: 0.07,
        }
    }
}

impl Mix {
    pub fn only(task: Task) -> Self {
        let mut m = Mix {
            one_sentence: 0.0,
            short: 0.0,
            detailed: 0.0,
            yesno: 0.0,
        };
        *m.get_mut(task) = 1.0;
        m
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::OneSentence => self.one_sentence,
            Task::Short => self.short,
            Task::Detailed => self.detailed,
            Task::YesNo => self.yesno,
        }
    }

    fn get_mut(&mut self, task: Task) -> &mut f64 {
        match task {
            Task::OneSentence => &mut self.one_sentence,
            Task::Short => &mut self.short,
            Task::Detailed => &mut self.detailed,
            Task::YesNo => &mut self.yesno,
        }
    }

    pub fn counts(&self, scenes: usize) -> BTreeMap<Task, usize> {
        Task::ALL
            .into_iter()
            .map(|t| (t, (self.get(t) * scenes as f64).round() as usize))
            .collect()
    }
}

impl FromStr for Mix {
    type Err = Error;

    /// `task=p` pairs separated by commas; omitted tasks get 0.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim_start().starts_with('{') {
            return serde_json::from_str(s).map_err(|e| Error::json("mix", e));
        }
        let mut mix = Mix {
            one_sentence: 0.0,
            short: 0.0,
            detailed: 0.0,
            yesno: 0.0,
        };
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("bad mix entry `{part}`")))?;
            let task: Task = k.trim().parse()?;
            let p: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad proportion `{v}`")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("proportion {p} outside [0, 1]")));
            }
            *mix.get_mut(task) = p;
        }
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetOptions {
    pub seed: u64,
    pub mode: ReplacementMode,
    pub mix: Mix,
    /// Overrides the per-task default number of replaced concepts.
    pub k_targets: Option<usize>,
    /// Negative sampling of the yes/no questions.
    pub negatives: Negatives,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            seed: 0,
            mode: ReplacementMode::Closed,
            mix: Mix::default(),
            k_targets: None,
            negatives: Negatives::Random,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainingRecord>,
    pub reference: Vec<ReferenceRecord>,
}

impl Dataset {
    pub fn task_counts(&self) -> BTreeMap<Task, usize> {
        let mut counts: BTreeMap<Task, usize> = Task::ALL.into_iter().map(|t| (t, 0)).collect();
        for r in &self.train {
            *counts.entry(r.task).or_default() += 1;
        }
        counts
    }
}

/// Builds training records per the task mix plus one reference record per
/// scene. Reference records are ground-truth prompts rendered with the same
/// seed as [`ground_truth_corpus`], so a corpus built from the same scenes
/// contains them verbatim.
pub fn build_dataset(
    scenes: &[SceneSpec],
    lexicon: &ConceptLexicon,
    options: &DatasetOptions,
) -> Result<Dataset> {
    build_dataset_with(scenes, lexicon, options, |scene, prompt, k, rng| {
        augment_description(scene, prompt, lexicon, options.mode, k, rng)
    })
}

/// [`build_dataset`] with a custom description augmenter.
pub fn build_dataset_with<F>(
    scenes: &[SceneSpec],
    lexicon: &ConceptLexicon,
    options: &DatasetOptions,
    mut augment: F,
) -> Result<Dataset>
where
    F: FnMut(&SceneSpec, &Prompt, usize, &mut rand_chacha::ChaCha8Rng) -> Result<TrainingRecord>,
{
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("empty scene list".into()));
    }
    let mut train = Vec::new();
    for (task_no, (task, count)) in options.mix.counts(scenes.len()).into_iter().enumerate() {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut derived_rng(options.seed, 0xdada_0000 + task_no as u64));
        for n in 0..count {
            let idx = order[n % order.len()];
            let scene = &scenes[idx];
            let prompt = ground_truth_prompt(scene, idx, task, lexicon, options.seed)?;
            let rng = derived_rng(options.seed ^ ((task_no as u64 + 1) << 48), n as u64);
            let mut record = match task {
                Task::YesNo if options.negatives == Negatives::Random => {
                    augment_yesno(scene, &prompt.instruction, prompt.response == "yes")
                }
                Task::YesNo => {
                    let (question, yes) = world::sample_yes_no(scene, lexicon, options.negatives, &mut rng.clone());
                    augment_yesno(scene, &format!("{} {question}", scene.prefix()), yes)
                }
                _ => {
                    let mentions = lexicon.find_mentions(&textcore::words(&prompt.response)).len();
                    let mut k = options
                        .k_targets
                        .or(task.default_targets())
                        .unwrap_or(mentions)
                        .min(mentions)
                        .max(1);
                    // a scene can hold every member of a category; replace fewer
                    loop {
                        let mut attempt = rng.clone();
                        match augment(scene, &prompt, k, &mut attempt) {
                            Err(Error::NoReplacement(_)) if k > 1 => k -= 1,
                            other => break other?,
                        }
                    }
                }
            };
            record.id = format!("{}-{n:06}", task);
            validate_record(&record, scene, lexicon)?;
            train.push(record);
        }
    }
    let reference = reference_records(scenes, lexicon, options.seed)?;
    Ok(Dataset { train, reference })
}

/// One ground-truth description prompt per scene, task chosen by seed.
pub fn reference_records(scenes: &[SceneSpec], lexicon: &ConceptLexicon, seed: u64) -> Result<Vec<ReferenceRecord>> {
    let styles = [Task::OneSentence, Task::Short, Task::Detailed];
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let task = styles[derived_rng(seed ^ 0x4ef0, i as u64).gen_range(0..styles.len())];
            let p = ground_truth_prompt(scene, i, task, lexicon, seed)?;
            Ok(ReferenceRecord {
                id: format!("{}/{}", scene.id, task),
                instruction: p.instruction,
                response: p.response,
            })
        })
        .collect()
}

pub fn write_training(path: &Path, records: &[TrainingRecord]) -> Result<()> {
    jsonl::write(path, records)
}

pub fn read_training(path: &Path) -> Result<Vec<TrainingRecord>> {
    jsonl::read(path)
}

pub fn write_reference(path: &Path, records: &[ReferenceRecord]) -> Result<()> {
    jsonl::write(path, records)
}

pub fn read_reference(path: &Path) -> Result<Vec<ReferenceRecord>> {
    jsonl::read(path)
}
