//! The bundled desk-scale setup: default lexicon, world configurations and
//! the pipeline that pretrains a biased base model and finetunes it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, Dataset, DatasetOptions, EncodedRecord, EncodedReference, Mix, ReferenceRecord, Task};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, EvalReport};
use crate::lexicon::ConceptLexicon;
use crate::model::{ModelConfig, WindowedLM};
use crate::textcore::Vocab;
use crate::trainer::{self, Example, FinetuneResult, LossMode, TrainConfig};
use crate::world::{self, Bias, Negatives, SceneSpec, WorldConfig};

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");

/// The bundled concept lexicon.
pub fn default_lexicon() -> ConceptLexicon {
    ConceptLexicon::from_json(DEFAULT_LEXICON).expect("bundled lexicon is valid")
}

/// Pretraining world: the fork/toothpick pair co-occurs with probability
/// `p`.
pub fn biased_world(seed: u64, p: f64, objects: &[String]) -> WorldConfig {
    WorldConfig {
        seed,
        objects: objects.to_vec(),
        bias: vec![Bias {
            given: "fork".into(),
            then: "toothpick".into(),
            p,
        }],
        ..Default::default()
    }
}

pub fn unbiased_world(seed: u64, objects: &[String]) -> WorldConfig {
    WorldConfig {
        seed,
        objects: objects.to_vec(),
        ..Default::default()
    }
}

/// Every template word that can appear in prompts or captions, so that
/// vocabularies never depend on which scenes were sampled.
const TEMPLATE_TEXT: &str = "image : . , a there is the image shows in is also we can see \
    yes no please answer in one word or ? provide a one-sentence caption for \
    summarize sentence describe briefly give short description of detail detailed";

/// Vocabulary over the lexicon, the fixed templates and any extra texts.
pub fn build_vocab<S: AsRef<str>>(lexicon: &ConceptLexicon, texts: &[S]) -> Result<Vocab> {
    let mut corpus: Vec<String> = lexicon.concepts().iter().map(|c| {
        let mut s = c.name.clone();
        if let Some(m) = &c.modifier {
            s.push(' ');
            s.push_str(m);
        }
        s
    }).collect();
    corpus.push(TEMPLATE_TEXT.to_string());
    corpus.extend(texts.iter().map(|t| t.as_ref().to_string()));
    Vocab::build(&corpus)
}

/// Object pool of the desk worlds.
pub const DESK_OBJECTS: [&str; 12] = [
    "fork", "toothpick", "knife", "spoon", "cup", "plate", "bowl", "bottle", "table", "chair", "man", "dog",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskConfig {
    pub seed: u64,
    pub bias: f64,
    /// Object pool of every world; all lexicon objects when empty.
    pub objects: Vec<String>,
    /// Chance that an object is left out of a pretraining prefix while the
    /// caption still mentions it.
    pub occlusion: f64,
    pub pretrain_scenes: usize,
    pub finetune_scenes: usize,
    pub test_scenes: usize,
    pub pretrain_tasks: Vec<Task>,
    pub mix: Mix,
    /// Negative sampling of the finetuning yes/no questions.
    pub negatives: Negatives,
    pub d: usize,
    pub h: usize,
    pub k: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig {
            seed: 7,
            bias: 0.9,
            objects: DESK_OBJECTS.iter().map(|s| s.to_string()).collect(),
            occlusion: 0.2,
            pretrain_scenes: 20000,
            finetune_scenes: 4000,
            test_scenes: 500,
            pretrain_tasks: vec![Task::Short, Task::YesNo],
            mix: Mix::default(),
            negatives: Negatives::Cooccurring,
            d: 32,
            h: 64,
            k: 3,
            pretrain: TrainConfig {
                loss: LossMode::Mle,
                lr: 0.05,
                steps: 20000,
                batch: 32,
                seed: 7,
                ..Default::default()
            },
            finetune: TrainConfig {
                loss: LossMode::Dpa,
                lr: 0.05,
                steps: 2000,
                batch: 64,
                seed: 7,
                ..Default::default()
            },
            eval: EvalOptions {
                negatives: Negatives::Cooccurring,
                ..Default::default()
            },
        }
    }
}

/// Hides objects from the rendered prefix of each prompt, keeping at least
/// one visible. Responses are untouched. `prompts` holds `per_scene`
/// consecutive records per scene, as [`augment::ground_truth_corpus`] emits.
pub fn occlude(prompts: &mut [ReferenceRecord], scenes: &[SceneSpec], per_scene: usize, q: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0cc1_0de0);
    for (scene, chunk) in scenes.iter().zip(prompts.chunks_mut(per_scene.max(1))) {
        let mut seen = scene.clone();
        seen.objects.retain(|_| !rng.gen_bool(q));
        if seen.objects.is_empty() {
            seen.objects.push(scene.objects[rng.gen_range(0..scene.objects.len())].clone());
        }
        seen.attributes.retain(|o, _| seen.objects.contains(o));
        let (full, partial) = (scene.prefix(), seen.prefix());
        for p in chunk {
            p.instruction = p.instruction.replacen(&full, &partial, 1);
        }
    }
}

/// Ground-truth corpus over `tasks` with objects occluded from the prefixes
/// at rate `occlusion`.
pub fn pretraining_corpus(
    scenes: &[SceneSpec],
    lexicon: &ConceptLexicon,
    tasks: &[Task],
    occlusion: f64,
    seed: u64,
) -> Result<Vec<ReferenceRecord>> {
    if !(0.0..1.0).contains(&occlusion) {
        return Err(Error::InvalidConfig(format!("occlusion must be in [0, 1), got {occlusion}")));
    }
    let mut prompts = augment::ground_truth_corpus(scenes, lexicon, tasks, seed)?;
    if occlusion > 0.0 {
        occlude(&mut prompts, scenes, tasks.len(), occlusion, seed);
    }
    Ok(prompts)
}

pub fn encode_corpus(records: &[ReferenceRecord], vocab: &Vocab) -> Vec<Example> {
    records
        .iter()
        .map(|p| Example {
            id: p.id.clone(),
            instruction: vocab.tokenize(&p.instruction),
            response: vocab.tokenize(&p.response).with_eos(),
        })
        .collect()
}

/// Everything the desk-scale experiment trains and evaluates on.
#[derive(Debug, Clone)]
pub struct DeskData {
    /// Lexicon with co-occurrence counts of the pretraining scenes.
    pub lexicon: ConceptLexicon,
    pub vocab: Vocab,
    pub pretrain_scenes: Vec<SceneSpec>,
    pub corpus: Vec<Example>,
    pub finetune_scenes: Vec<SceneSpec>,
    pub dataset: Dataset,
    pub train: Vec<EncodedRecord>,
    pub reference: Vec<EncodedReference>,
    pub test_scenes: Vec<SceneSpec>,
}

impl DeskData {
    pub fn prepare(config: &DeskConfig) -> Result<Self> {
        let base = default_lexicon();
        let pretrain_scenes = world::generate_scenes(&biased_world(config.seed, config.bias, &config.objects), &base, config.pretrain_scenes)?;
        let lexicon = base.build_cooccurrence(&pretrain_scenes)?;
        let finetune_scenes =
            world::generate_scenes(&unbiased_world(config.seed.wrapping_add(1), &config.objects), &lexicon, config.finetune_scenes)?;
        let test_scenes =
            world::generate_scenes(&unbiased_world(config.seed.wrapping_add(2), &config.objects), &lexicon, config.test_scenes)?;

        let prompts = pretraining_corpus(&pretrain_scenes, &lexicon, &config.pretrain_tasks, config.occlusion, config.seed)?;
        let options = DatasetOptions {
            seed: config.seed,
            mix: config.mix,
            negatives: config.negatives,
            ..Default::default()
        };
        let dataset = augment::build_dataset(&finetune_scenes, &lexicon, &options)?;

        let mut texts: Vec<String> = prompts
            .iter()
            .flat_map(|p| [p.instruction.clone(), p.response.clone()])
            .collect();
        for r in &dataset.train {
            texts.extend([r.instruction.clone(), r.correct.clone(), r.hallucinated.clone()]);
        }
        let vocab = build_vocab(&lexicon, &texts)?;

        let corpus = encode_corpus(&prompts, &vocab);
        let train = dataset.train.iter().map(|r| r.encode(&vocab)).collect();
        let reference = corpus
            .iter()
            .map(|e: &Example| EncodedReference {
                id: e.id.clone(),
                instruction: e.instruction.clone(),
                response: e.response.clone(),
            })
            .collect();
        Ok(DeskData {
            lexicon,
            vocab,
            pretrain_scenes,
            corpus,
            finetune_scenes,
            dataset,
            train,
            reference,
            test_scenes,
        })
    }

    pub fn model_config(&self, config: &DeskConfig) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab.len(),
            d: config.d,
            h: config.h,
            k: config.k,
        }
    }

    /// MLE-pretrained base model.
    pub fn pretrain(&self, config: &DeskConfig) -> Result<WindowedLM> {
        let mut model = WindowedLM::new(self.model_config(config), config.seed)?;
        trainer::pretrain_mle(&mut model, &self.corpus, &config.pretrain)?;
        Ok(model)
    }

    pub fn finetune(&self, base: &WindowedLM, config: &TrainConfig) -> Result<FinetuneResult> {
        trainer::finetune(base, &self.train, &self.reference, config)
    }

    pub fn evaluate(&self, model: &WindowedLM, options: &EvalOptions) -> Result<EvalReport> {
        eval::evaluate(model, &self.vocab, &self.test_scenes, &self.lexicon, options)
    }
}
