//! Synthetic symbolic scenes with controllable co-occurrence bias, plus the
//! caption and question templates rendered from them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{ConceptKind, ConceptLexicon, Placement};
use crate::jsonl;

/// Symbolic stand-in for an image: the concepts it contains.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub objects: Vec<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    #[serde(default)]
    pub action: Option<String>,
    #[serde(default)]
    pub location: Option<String>,
}

impl SceneSpec {
    /// Every concept name present in the scene.
    pub fn concepts(&self) -> BTreeSet<&str> {
        self.objects
            .iter()
            .map(String::as_str)
            .chain(self.attributes.values().map(String::as_str))
            .chain(self.action.as_deref())
            .chain(self.location.as_deref())
            .collect()
    }

    pub fn contains(&self, concept: &str) -> bool {
        self.concepts().contains(concept)
    }

    pub fn validate(&self, lexicon: &ConceptLexicon) -> Result<()> {
        let bad = |reason: String| Error::InvalidScene {
            id: self.id.clone(),
            reason,
        };
        if self.objects.is_empty() {
            return Err(bad("no objects".into()));
        }
        let mut seen = BTreeSet::new();
        for o in &self.objects {
            if !seen.insert(o) {
                return Err(bad(format!("duplicate object `{o}`")));
            }
        }
        let expect = |name: &str, kind: ConceptKind| -> Result<()> {
            let c = lexicon.require(name)?;
            if c.kind != kind {
                return Err(bad(format!("`{name}` is not of kind {kind:?}")));
            }
            Ok(())
        };
        for o in &self.objects {
            expect(o, ConceptKind::Object)?;
        }
        for (o, a) in &self.attributes {
            if !self.objects.contains(o) {
                return Err(bad(format!("attribute key `{o}` is not an object of the scene")));
            }
            expect(a, ConceptKind::Attribute)?;
        }
        if let Some(a) = &self.action {
            expect(a, ConceptKind::Action)?;
        }
        if let Some(l) = &self.location {
            expect(l, ConceptKind::Location)?;
        }
        Ok(())
    }

    /// The scene rendered as the instruction prefix that conditions the model.
    pub fn prefix(&self) -> String {
        let mut parts = vec!["image :".to_string()];
        for o in &self.objects {
            if let Some(a) = self.attributes.get(o) {
                parts.push(a.clone());
            }
            parts.push(o.clone());
        }
        parts.extend(self.action.iter().cloned());
        parts.extend(self.location.iter().cloned());
        parts.push(".".into());
        parts.join(" ")
    }
}

/// `P(then present | given present) = p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bias {
    pub given: String,
    pub then: String,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object pool; all lexicon objects when empty.
    pub objects: Vec<String>,
    pub bias: Vec<Bias>,
    pub attribute_prob: f64,
    pub action_prob: f64,
    pub location_prob: f64,
    /// Object category to attribute category; `*` is the fallback.
    pub attribute_rules: BTreeMap<String, String>,
    /// Categories whose members can perform actions.
    pub agent_categories: Vec<String>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            min_objects: 1,
            max_objects: 4,
            objects: Vec::new(),
            bias: Vec::new(),
            attribute_prob: 0.3,
            action_prob: 0.5,
            location_prob: 0.5,
            attribute_rules: [("person", "clothing"), ("*", "color")]
                .into_iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            agent_categories: vec!["person".into(), "animal".into()],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self, lexicon: &ConceptLexicon) -> Result<()> {
        if self.min_objects < 1 || self.max_objects < self.min_objects {
            return Err(Error::InvalidConfig(format!(
                "scene size range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        for p in [self.attribute_prob, self.action_prob, self.location_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("probability {p} outside [0, 1]")));
            }
        }
        for b in &self.bias {
            for name in [&b.given, &b.then] {
                if lexicon.require(name)?.kind != ConceptKind::Object {
                    return Err(Error::InvalidConfig(format!("bias concept `{name}` is not an object")));
                }
            }
            if b.given == b.then || !(0.0..=1.0).contains(&b.p) {
                return Err(Error::InvalidConfig(format!(
                    "bad bias entry {} -> {} ({})",
                    b.given, b.then, b.p
                )));
            }
        }
        for o in &self.objects {
            lexicon.require(o)?;
        }
        Ok(())
    }

    fn pool<'a>(&'a self, lexicon: &'a ConceptLexicon) -> Vec<&'a str> {
        if self.objects.is_empty() {
            lexicon
                .of_kind(ConceptKind::Object)
                .map(|c| c.name.as_str())
                .collect()
        } else {
            // canonical lexicon order regardless of config order
            lexicon
                .of_kind(ConceptKind::Object)
                .map(|c| c.name.as_str())
                .filter(|n| self.objects.iter().any(|o| o == n))
                .collect()
        }
    }
}

/// Per-index generator: the same `(seed, index)` always yields the same
/// stream, independent of how indices are scheduled.
pub fn derived_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `n` scenes. Objects are a uniform subset of the pool, then each
/// bias rule `(given, then, p)` forces `then` present with probability `p`
/// (absent otherwise) whenever `given` is present.
pub fn generate_scenes(
    config: &WorldConfig,
    lexicon: &ConceptLexicon,
    n: usize,
) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(Error::InvalidConfig("scene count must be at least 1".into()));
    }
    config.validate(lexicon)?;
    let pool = config.pool(lexicon);
    if pool.is_empty() {
        return Err(Error::InvalidConfig("object pool is empty".into()));
    }
    let actions: Vec<&str> = lexicon
        .of_kind(ConceptKind::Action)
        .map(|c| c.name.as_str())
        .collect();
    let locations: Vec<&str> = lexicon
        .of_kind(ConceptKind::Location)
        .map(|c| c.name.as_str())
        .collect();
    let rank = |name: &str| pool.iter().position(|p| *p == name);

    (0..n)
        .map(|i| {
            let mut rng = derived_rng(config.seed, i as u64);
            let size = rng
                .gen_range(config.min_objects..=config.max_objects)
                .min(pool.len());
            let mut order: Vec<&str> = pool.clone();
            for j in 0..size {
                let k = rng.gen_range(j..order.len());
                order.swap(j, k);
            }
            let mut chosen: BTreeSet<&str> = order[..size].iter().copied().collect();
            for b in &config.bias {
                if chosen.contains(b.given.as_str()) {
                    if rng.gen_bool(b.p) {
                        chosen.insert(b.then.as_str());
                    } else {
                        chosen.remove(b.then.as_str());
                    }
                }
            }
            let mut objects: Vec<String> = chosen.into_iter().map(str::to_string).collect();
            objects.sort_by_key(|o| rank(o).unwrap_or(usize::MAX));

            let mut attributes = BTreeMap::new();
            for o in &objects {
                if !rng.gen_bool(config.attribute_prob) {
                    continue;
                }
                let category = &lexicon.require(o)?.category;
                let attr_category = config
                    .attribute_rules
                    .get(category)
                    .or_else(|| config.attribute_rules.get("*"));
                if let Some(cat) = attr_category {
                    let options: Vec<&str> = lexicon
                        .category(cat)
                        .filter(|c| c.kind == ConceptKind::Attribute)
                        .map(|c| c.name.as_str())
                        .collect();
                    if !options.is_empty() {
                        let pick = options[rng.gen_range(0..options.len())];
                        attributes.insert(o.clone(), pick.to_string());
                    }
                }
            }
            let lead_is_agent = config
                .agent_categories
                .contains(&lexicon.require(&objects[0])?.category);
            let action = if lead_is_agent && !actions.is_empty() && rng.gen_bool(config.action_prob) {
                Some(actions[rng.gen_range(0..actions.len())].to_string())
            } else {
                None
            };
            let location = if !locations.is_empty() && rng.gen_bool(config.location_prob) {
                Some(locations[rng.gen_range(0..locations.len())].to_string())
            } else {
                None
            };
            Ok(SceneSpec {
                id: format!("scene-{i:06}"),
                objects,
                attributes,
                action,
                location,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStyle {
    OneSentence,
    Short,
    Detailed,
}

fn object_phrase(scene: &SceneSpec, lexicon: &ConceptLexicon, object: &str, with_attribute: bool) -> Result<String> {
    let concept = lexicon.require(object)?;
    let mut words = vec!["a".to_string()];
    words.extend(concept.modifier.iter().cloned());
    let attr = if with_attribute {
        scene
            .attributes
            .get(object)
            .map(|a| lexicon.require(a))
            .transpose()?
    } else {
        None
    };
    if let Some(a) = attr.filter(|a| a.placement == Placement::Before) {
        words.push(a.name.clone());
    }
    words.push(concept.name.clone());
    if let Some(a) = attr.filter(|a| a.placement == Placement::After) {
        words.push(format!("in a {}", a.name));
    }
    Ok(words.join(" "))
}

/// Renders a ground-truth caption. Every concept mentioned comes from the
/// scene.
pub fn ground_truth_caption<R: Rng + ?Sized>(
    scene: &SceneSpec,
    lexicon: &ConceptLexicon,
    style: CaptionStyle,
    rng: &mut R,
) -> Result<String> {
    let first = scene.objects.first().ok_or_else(|| Error::InvalidScene {
        id: scene.id.clone(),
        reason: "no objects".into(),
    })?;
    let text = match style {
        CaptionStyle::OneSentence => format!("{} .", object_phrase(scene, lexicon, first, true)?),
        CaptionStyle::Short => {
            let opener = ["there is", "the image shows"][rng.gen_range(0..2)];
            let list = scene
                .objects
                .iter()
                .map(|o| object_phrase(scene, lexicon, o, false))
                .collect::<Result<Vec<_>>>()?;
            format!("{opener} {} .", list.join(" , "))
        }
        CaptionStyle::Detailed => {
            let mut text = object_phrase(scene, lexicon, first, true)?;
            match (&scene.action, &scene.location) {
                (Some(a), Some(l)) => text.push_str(&format!(" is {a} in a {l}")),
                (Some(a), None) => text.push_str(&format!(" is {a}")),
                (None, Some(l)) => text.push_str(&format!(" is in a {l}")),
                (None, None) => {}
            }
            text.push_str(" .");
            if scene.objects.len() > 1 {
                let rest = scene.objects[1..]
                    .iter()
                    .map(|o| object_phrase(scene, lexicon, o, true))
                    .collect::<Result<Vec<_>>>()?;
                let opener = ["there is also", "we can also see"][rng.gen_range(0..2)];
                text.push_str(&format!(" {opener} {} .", rest.join(" , ")));
            }
            text
        }
    };
    Ok(text)
}

pub const YES_NO_SUFFIX: &str = "please answer in one word , yes or no .";

/// A balanced yes/no question: positives ask about a scene object, negatives
/// about an object from `pool` that the scene lacks.
pub fn yes_no_question<R: Rng + ?Sized>(
    scene: &SceneSpec,
    pool: &[&str],
    rng: &mut R,
) -> (String, bool) {
    let absent: Vec<&str> = pool
        .iter()
        .copied()
        .filter(|o| !scene.objects.iter().any(|s| s == o))
        .collect();
    let positive = rng.gen_bool(0.5) || absent.is_empty();
    let subject = if positive {
        scene.objects[rng.gen_range(0..scene.objects.len())].as_str()
    } else {
        absent[rng.gen_range(0..absent.len())]
    };
    (yes_no_text(subject), positive)
}

/// How absent objects are picked for negative yes/no questions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Negatives {
    /// Uniform over absent objects.
    #[default]
    Random,
    /// Weighted by co-occurrence counts with the scene's objects; uniform
    /// when no absent object has a count.
    Cooccurring,
}

/// A yes/no question over the lexicon's objects with the given negative
/// sampling, and whether the answer is yes.
pub fn sample_yes_no<R: Rng + ?Sized>(
    scene: &SceneSpec,
    lexicon: &ConceptLexicon,
    negatives: Negatives,
    rng: &mut R,
) -> (String, bool) {
    let pool: Vec<&str> = lexicon
        .of_kind(ConceptKind::Object)
        .map(|c| c.name.as_str())
        .collect();
    if negatives == Negatives::Random {
        return yes_no_question(scene, &pool, rng);
    }
    let absent: Vec<(&str, u32)> = pool
        .iter()
        .copied()
        .filter(|o| !scene.objects.iter().any(|s| s == o))
        .map(|o| (o, scene.objects.iter().map(|p| lexicon.cooccurrence(p, o)).sum()))
        .collect();
    let total: u32 = absent.iter().map(|a| a.1).sum();
    let positive = rng.gen_bool(0.5) || absent.is_empty();
    let subject = if positive {
        scene.objects[rng.gen_range(0..scene.objects.len())].as_str()
    } else if total == 0 {
        absent[rng.gen_range(0..absent.len())].0
    } else {
        let mut r = rng.gen_range(0..total);
        let mut pick = absent[0].0;
        for &(o, w) in &absent {
            if r < w {
                pick = o;
                break;
            }
            r -= w;
        }
        pick
    };
    (yes_no_text(subject), positive)
}

pub fn yes_no_text(subject: &str) -> String {
    format!("is there a {subject} in the image ? {YES_NO_SUFFIX}")
}

/// Instruction variants per caption style.
pub fn caption_prompt<R: Rng + ?Sized>(style: CaptionStyle, rng: &mut R) -> &'static str {
    let options: &[&str] = match style {
        CaptionStyle::OneSentence => &[
            "provide a one-sentence caption for the image .",
            "summarize the image in one sentence .",
        ],
        CaptionStyle::Short => &[
            "describe the image briefly .",
            "give a short description of the image .",
        ],
        CaptionStyle::Detailed => &[
            "describe the image in detail .",
            "give a detailed description of the image .",
        ],
    };
    options[rng.gen_range(0..options.len())]
}

pub fn write_scenes(path: &Path, scenes: &[SceneSpec]) -> Result<()> {
    jsonl::write(path, scenes)
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneSpec>> {
    jsonl::read(path)
}
