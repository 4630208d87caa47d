//! Run configuration: one JSON document, deep-merged over the built-in
//! desk defaults, then patched by `--set key=value` and flat flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use halva_core::augment::{DatasetOptions, Task};
use halva_core::eval::EvalOptions;
use halva_core::experiment::{self, DeskConfig};
use halva_core::lexicon::ConceptLexicon;
use halva_core::trainer::TrainConfig;
use halva_core::world::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d: usize,
    pub h: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// The only seed; copied into every section by [`RunConfig::resolve`].
    pub seed: u64,
    /// Base lexicon file; the bundled lexicon when absent.
    pub lexicon: Option<PathBuf>,
    /// World of the pretraining split. The finetune and test splits drop
    /// its co-occurrence biases.
    pub world: WorldConfig,
    pub occlusion: f64,
    pub pretrain_tasks: Vec<Task>,
    pub augment: DatasetOptions,
    pub model: ModelShape,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub alphas: Vec<f64>,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = DeskConfig::default();
        RunConfig {
            seed: desk.seed,
            lexicon: None,
            world: experiment::biased_world(desk.seed, desk.bias, &desk.objects),
            occlusion: desk.occlusion,
            pretrain_tasks: desk.pretrain_tasks,
            augment: DatasetOptions {
                seed: desk.seed,
                mix: desk.mix,
                negatives: desk.negatives,
                ..Default::default()
            },
            model: ModelShape {
                d: desk.d,
                h: desk.h,
                k: desk.k,
            },
            pretrain: desk.pretrain,
            finetune: desk.finetune,
            alphas: vec![0.01, 0.1, 0.4, 2.0],
            eval: desk.eval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Pretrain,
    Finetune,
    Test,
}

impl RunConfig {
    /// Defaults, then the file at `path`, then `key=value` overrides.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut value, patch, "").with_context(|| format!("in config {}", path.display()))?;
        }
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{set}` is not of the form key=value"))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        serde_json::from_value(value).context("invalid run config")
    }

    /// Copies the top-level seed into every section.
    pub fn resolve(mut self) -> Self {
        let seed = self.seed;
        self.world.seed = seed;
        self.augment.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn world_for(&self, split: Split) -> WorldConfig {
        let mut world = self.world.clone();
        match split {
            Split::Pretrain => {}
            Split::Finetune => {
                world.seed = self.seed.wrapping_add(1);
                world.bias.clear();
            }
            Split::Test => {
                world.seed = self.seed.wrapping_add(2);
                world.bias.clear();
            }
        }
        world
    }

    pub fn base_lexicon(&self) -> Result<ConceptLexicon> {
        match &self.lexicon {
            Some(path) => ConceptLexicon::load(path).with_context(|| format!("loading lexicon {}", path.display())),
            None => Ok(experiment::default_lexicon()),
        }
    }
}

fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown config key `{here}`"),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

fn set_path(value: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut slot = value;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    *slot = new;
    Ok(())
}
