//! The concept universe, its categories, and co-occurrence statistics used to
//! pick hallucinated replacements.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcore;
use crate::world::SceneSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Object,
    Attribute,
    Action,
    Location,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub kind: ConceptKind,
    pub category: String,
    /// Non-concept word rendered before the name in captions ("young man").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modifier: Option<String>,
    /// Where an attribute is rendered relative to its object.
    #[serde(default, skip_serializing_if = "Placement::is_before")]
    pub placement: Placement,
}

/// `Before`: "a red car". `After`: "a man in a white shirt".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Before,
    After,
}

impl Placement {
    fn is_before(&self) -> bool {
        *self == Placement::Before
    }
}

impl Concept {
    pub fn new(name: &str, kind: ConceptKind, category: &str) -> Self {
        Concept {
            name: name.to_string(),
            kind,
            category: category.to_string(),
            modifier: None,
            placement: Placement::Before,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    concepts: Vec<Concept>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    cooccur: BTreeMap<String, BTreeMap<String, u32>>,
}

/// Concept set `U` with co-occurrence counts and category index.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptLexicon {
    concepts: Vec<Concept>,
    by_name: HashMap<String, usize>,
    categories: BTreeMap<String, Vec<usize>>,
    cooccur: BTreeMap<String, BTreeMap<String, u32>>,
    /// Minimum count for a co-occurring concept to be a closed-set candidate.
    pub min_count: u32,
}

impl ConceptLexicon {
    pub fn new(concepts: Vec<Concept>) -> Result<Self> {
        let mut by_name = HashMap::new();
        let mut categories: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, c) in concepts.iter().enumerate() {
            if c.name.trim().is_empty() {
                return Err(Error::InvalidLexicon("empty concept name".into()));
            }
            if by_name.insert(c.name.clone(), i).is_some() {
                return Err(Error::InvalidLexicon(format!(
                    "duplicate concept `{}`",
                    c.name
                )));
            }
            categories.entry(c.category.clone()).or_default().push(i);
        }
        Ok(ConceptLexicon {
            concepts,
            by_name,
            categories,
            cooccur: BTreeMap::new(),
            min_count: 1,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LexiconFile =
            serde_json::from_str(text).map_err(|e| Error::json("lexicon", e))?;
        let mut lex = Self::new(file.concepts)?;
        for (a, row) in file.cooccur {
            for (b, count) in row {
                lex.set_cooccurrence(&a, &b, count)?;
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = LexiconFile {
            concepts: self.concepts.clone(),
            cooccur: self.cooccur.clone(),
        };
        serde_json::to_string_pretty(&file).expect("lexicon serializes")
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn get(&self, name: &str) -> Option<&Concept> {
        self.by_name.get(name).map(|&i| &self.concepts[i])
    }

    pub fn require(&self, name: &str) -> Result<&Concept> {
        self.get(name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn of_kind(&self, kind: ConceptKind) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(move |c| c.kind == kind)
    }

    pub fn category(&self, category: &str) -> impl Iterator<Item = &Concept> {
        self.categories
            .get(category)
            .into_iter()
            .flatten()
            .map(|&i| &self.concepts[i])
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }

    /// Co-occurrence counts for `name`, empty when unseen.
    pub fn cooccurrences(&self, name: &str) -> impl Iterator<Item = (&str, u32)> {
        self.cooccur
            .get(name)
            .into_iter()
            .flatten()
            .map(|(k, &v)| (k.as_str(), v))
    }

    pub fn cooccurrence(&self, a: &str, b: &str) -> u32 {
        self.cooccur
            .get(a)
            .and_then(|row| row.get(b))
            .copied()
            .unwrap_or(0)
    }

    /// Sets a symmetric co-occurrence count.
    pub fn set_cooccurrence(&mut self, a: &str, b: &str, count: u32) -> Result<()> {
        self.require(a)?;
        self.require(b)?;
        if a == b {
            return Err(Error::InvalidLexicon(format!(
                "`{a}` cannot co-occur with itself"
            )));
        }
        self.cooccur
            .entry(a.to_string())
            .or_default()
            .insert(b.to_string(), count);
        self.cooccur
            .entry(b.to_string())
            .or_default()
            .insert(a.to_string(), count);
        Ok(())
    }

    /// Returns a copy whose co-occurrence table counts, for every pair of
    /// distinct concepts, the scenes containing both.
    pub fn build_cooccurrence(&self, scenes: &[SceneSpec]) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::InvalidConfig("no scenes to count".into()));
        }
        let mut cooccur: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for scene in scenes {
            let names = scene.concepts();
            for name in &names {
                self.require(name)?;
            }
            for a in &names {
                for b in &names {
                    if a != b {
                        *cooccur
                            .entry(a.to_string())
                            .or_default()
                            .entry(b.to_string())
                            .or_default() += 1;
                    }
                }
            }
        }
        let mut lex = self.clone();
        lex.cooccur = cooccur;
        Ok(lex)
    }

    /// Closed-set replacement: the most frequent co-occurring concept of the
    /// same kind that is not forbidden, ties broken by `rng`. Falls back to
    /// same-category sampling when no co-occurrence candidate is left.
    pub fn sample_closed_set_replacement<R: Rng + ?Sized>(
        &self,
        target: &str,
        forbidden: &BTreeSet<String>,
        rng: &mut R,
    ) -> Result<&Concept> {
        let target_concept = self.require(target)?;
        let mut best: Vec<&Concept> = Vec::new();
        let mut best_count = 0;
        for (name, count) in self.cooccurrences(target) {
            if count < self.min_count.max(1) || name == target || forbidden.contains(name) {
                continue;
            }
            let Some(c) = self.get(name) else { continue };
            if c.kind != target_concept.kind {
                continue;
            }
            if count > best_count {
                best_count = count;
                best.clear();
            }
            if count == best_count {
                best.push(c);
            }
        }
        if best.is_empty() {
            return self.sample_open_set_replacement(target, forbidden, rng);
        }
        Ok(best[rng.gen_range(0..best.len())])
    }

    /// Open-set replacement: uniform over same-category, same-kind concepts
    /// other than the target and the forbidden set.
    pub fn sample_open_set_replacement<R: Rng + ?Sized>(
        &self,
        target: &str,
        forbidden: &BTreeSet<String>,
        rng: &mut R,
    ) -> Result<&Concept> {
        let target_concept = self.require(target)?;
        let candidates: Vec<&Concept> = self
            .category(&target_concept.category)
            .filter(|c| {
                c.name != target && c.kind == target_concept.kind && !forbidden.contains(&c.name)
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::NoReplacement(target.to_string()));
        }
        Ok(candidates[rng.gen_range(0..candidates.len())])
    }

    /// Finds concept mentions in a word sequence, longest match first,
    /// scanning left to right. Returns `(start, end, concept name)`.
    pub fn find_mentions<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<(usize, usize, &str)> {
        let phrases: Vec<(Vec<String>, &str)> = self
            .concepts
            .iter()
            .map(|c| (textcore::words(&c.name), c.name.as_str()))
            .collect();
        let max_len = phrases.iter().map(|(w, _)| w.len()).max().unwrap_or(1);
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let mut matched = None;
            for len in (1..=max_len.min(tokens.len() - i)).rev() {
                let window = &tokens[i..i + len];
                if let Some((_, name)) = phrases.iter().find(|(w, _)| {
                    w.len() == len && w.iter().zip(window).all(|(a, b)| a == b.as_ref())
                }) {
                    matched = Some((len, *name));
                    break;
                }
            }
            match matched {
                Some((len, name)) => {
                    out.push((i, i + len, name));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obj(name: &str, cat: &str) -> Concept {
        Concept::new(name, ConceptKind::Object, cat)
    }

    fn utensils() -> ConceptLexicon {
        ConceptLexicon::new(vec![
            obj("fork", "utensil"),
            obj("knife", "utensil"),
            obj("spoon", "utensil"),
            obj("toothpick", "utensil"),
            obj("ladle", "utensil"),
        ])
        .unwrap()
    }

    fn scene(objects: &[&str]) -> SceneSpec {
        SceneSpec {
            id: "s".into(),
            objects: objects.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    fn forbid(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cooccurrence_counts() {
        let lex = utensils()
            .build_cooccurrence(&[scene(&["fork", "knife"]), scene(&["fork", "spoon"])])
            .unwrap();
        let row: Vec<_> = lex.cooccurrences("fork").collect();
        assert_eq!(row, vec![("knife", 1), ("spoon", 1)]);
        let lex = utensils()
            .build_cooccurrence(&[scene(&["fork"]), scene(&["knife"])])
            .unwrap();
        assert_eq!(lex.cooccurrences("fork").count(), 0);
        assert!(matches!(
            utensils().build_cooccurrence(&[scene(&["spork"])]),
            Err(Error::UnknownConcept(name)) if name == "spork"
        ));
    }

    #[test]
    fn cooccurrence_matches_pair_enumeration() {
        let scenes = [
            scene(&["fork", "knife"]),
            scene(&["fork", "knife"]),
            scene(&["spoon", "knife", "ladle"]),
        ];
        let lex = utensils().build_cooccurrence(&scenes).unwrap();
        for a in lex.concepts() {
            for b in lex.concepts() {
                let brute = scenes
                    .iter()
                    .filter(|s| a.name != b.name && s.objects.contains(&a.name) && s.objects.contains(&b.name))
                    .count() as u32;
                assert_eq!(lex.cooccurrence(&a.name, &b.name), brute);
            }
        }
        assert_eq!(lex.cooccurrence("fork", "knife"), 2);
        assert_eq!(lex.cooccurrence("knife", "fork"), 2);
    }

    #[test]
    fn closed_set_prefers_frequent_candidates() {
        let mut lex = utensils();
        lex.set_cooccurrence("fork", "toothpick", 5).unwrap();
        lex.set_cooccurrence("fork", "spoon", 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = lex
            .sample_closed_set_replacement("fork", &forbid(&["fork", "spoon"]), &mut rng)
            .unwrap();
        assert_eq!(got.name, "toothpick");
        // spoon is also a candidate once unforbidden, but toothpick outranks it
        let got = lex
            .sample_closed_set_replacement("fork", &forbid(&["fork"]), &mut rng)
            .unwrap();
        assert_eq!(got.name, "toothpick");
    }

    #[test]
    fn closed_set_falls_back_to_category() {
        let lex = ConceptLexicon::new(vec![obj("fork", "utensil"), obj("ladle", "utensil")]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = lex
            .sample_closed_set_replacement("fork", &forbid(&["fork"]), &mut rng)
            .unwrap();
        assert_eq!(got.name, "ladle");
        let err = lex
            .sample_closed_set_replacement("fork", &forbid(&["fork", "ladle"]), &mut rng)
            .unwrap_err();
        assert_eq!(err.to_string(), "no replacement for fork");
    }

    #[test]
    fn open_set_uniform_and_deterministic() {
        let lex = ConceptLexicon::new(vec![
            obj("man", "person"),
            obj("woman", "person"),
            obj("child", "person"),
            obj("cat", "animal"),
            Concept::new("skateboarding", ConceptKind::Action, "sport"),
            Concept::new("rollerblading", ConceptKind::Action, "sport"),
        ])
        .unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| {
                    lex.sample_open_set_replacement("man", &BTreeSet::new(), &mut rng)
                        .unwrap()
                        .name
                        .clone()
                })
                .collect::<Vec<_>>()
        };
        let a = draw(7);
        assert_eq!(a, draw(7));
        assert!(a.iter().all(|n| n == "woman" || n == "child"));
        assert!(a.iter().any(|n| n == "woman") && a.iter().any(|n| n == "child"));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(lex
            .sample_open_set_replacement("cat", &BTreeSet::new(), &mut rng)
            .is_err());
        let got = lex
            .sample_open_set_replacement("skateboarding", &BTreeSet::new(), &mut rng)
            .unwrap();
        assert_eq!(got.name, "rollerblading");
    }

    #[test]
    fn replacement_preserves_kind_and_avoids_forbidden() {
        let lex = crate::experiment::default_lexicon();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for c in lex.concepts() {
            let forbidden = forbid(&[c.name.as_str()]);
            for closed in [true, false] {
                let got = if closed {
                    lex.sample_closed_set_replacement(&c.name, &forbidden, &mut rng)
                } else {
                    lex.sample_open_set_replacement(&c.name, &forbidden, &mut rng)
                };
                if let Ok(r) = got {
                    assert_eq!(r.kind, c.kind);
                    assert_ne!(r.name, c.name);
                }
            }
        }
    }

    #[test]
    fn mentions_prefer_longest_match() {
        let lex = ConceptLexicon::new(vec![
            Concept::new("white", ConceptKind::Attribute, "color"),
            Concept::new("white shirt", ConceptKind::Attribute, "clothing"),
            obj("man", "person"),
        ])
        .unwrap();
        let toks = textcore::words("a man in a white shirt and a white man");
        let got: Vec<_> = lex.find_mentions(&toks).into_iter().map(|m| m.2).collect();
        assert_eq!(got, vec!["man", "white shirt", "white", "man"]);
    }

    #[test]
    fn json_round_trip_and_self_cooccurrence_rejected() {
        let mut lex = utensils();
        lex.set_cooccurrence("fork", "knife", 3).unwrap();
        let back = ConceptLexicon::from_json(&lex.to_json()).unwrap();
        assert_eq!(back, lex);
        assert!(lex.set_cooccurrence("fork", "fork", 1).is_err());
        assert!(ConceptLexicon::from_json(r#"{"concepts":[],"bogus":1}"#).is_err());
    }
}
