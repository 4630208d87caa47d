//! Shared fixtures for the benchmarks.

use halva_core::augment::{self, DatasetOptions, EncodedRecord, EncodedReference};
use halva_core::experiment;
use halva_core::lexicon::ConceptLexicon;
use halva_core::model::{ModelConfig, WindowedLM};
use halva_core::world::{self, SceneSpec};
use halva_core::Vocab;

pub struct Fixture {
    pub lexicon: ConceptLexicon,
    pub scenes: Vec<SceneSpec>,
    pub vocab: Vocab,
    pub model: WindowedLM,
    pub records: Vec<EncodedRecord>,
    pub references: Vec<EncodedReference>,
}

/// Desk-sized model with records from `n` default-world scenes.
pub fn fixture(n: usize) -> Fixture {
    let objects: Vec<String> = experiment::DESK_OBJECTS.iter().map(|s| s.to_string()).collect();
    let base = experiment::default_lexicon();
    let scenes = world::generate_scenes(&experiment::unbiased_world(1, &objects), &base, n).expect("scenes");
    let lexicon = base.build_cooccurrence(&scenes).expect("lexicon");
    let dataset = augment::build_dataset(&scenes, &lexicon, &DatasetOptions::default()).expect("dataset");
    let texts: Vec<&str> = dataset.train.iter().flat_map(|r| [r.instruction.as_str(), r.hallucinated.as_str()]).collect();
    let vocab = experiment::build_vocab(&lexicon, &texts).expect("vocab");
    let model = WindowedLM::new(
        ModelConfig {
            vocab: vocab.len(),
            d: 32,
            h: 64,
            k: 3,
        },
        1,
    )
    .expect("model");
    let records = dataset.train.iter().map(|r| r.encode(&vocab)).collect();
    let references = dataset.reference.iter().map(|r| r.encode(&vocab)).collect();
    Fixture {
        lexicon,
        scenes,
        vocab,
        model,
        records,
        references,
    }
}
