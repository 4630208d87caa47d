use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use halva_core::augment::{self, llm, EncodedRecord, EncodedReference, Mix};
use halva_core::autodiff::{grad_check, Var};
use halva_core::eval;
use halva_core::experiment;
use halva_core::lexicon::ConceptLexicon;
use halva_core::losses::{self, CachedReference, KlMode};
use halva_core::model::{BoundLM, ModelConfig, WindowedLM};
use halva_core::textcore::{Span, TokenSeq, Vocab, EOS};
use halva_core::trainer::{self, LossMode, TrainConfig};
use halva_core::world;

mod config;

use config::{RunConfig, Split};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "halva-kit", version, about = "Synthetic world, pair augmentation, alignment finetuning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config, merged over the built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Config override such as `finetune.lr=0.02`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config.resolve())
    }
}

/// Flat overrides of the finetuning section.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    loss: Option<LossMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.loss {
            c.loss = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.beta {
            c.beta = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.batch {
            c.batch = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Samples scenes into a JSONL file
    GenWorld {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Pretraining scenes carry the configured biases; the other splits do not
        #[arg(long, value_enum, default_value = "pretrain")]
        split: Split,
        /// Also writes the lexicon with co-occurrence counts of these scenes
        #[arg(long)]
        lexicon_out: Option<PathBuf>,
    },
    /// Builds correct/hallucinated training pairs and reference records
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Task proportions, `short=0.5,detailed=0.5` or a JSON object
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_ref: PathBuf,
        /// Rewrites descriptions through this endpoint instead of locally
        #[arg(long)]
        llm_endpoint: Option<String>,
    },
    /// MLE-pretrains a base model on ground-truth prompts
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Writes the pretraining corpus, usable as KL reference records
        #[arg(long)]
        out_corpus: Option<PathBuf>,
        /// Per-step loss CSV
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Finetunes a model with the alignment objective or DPO
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Finetunes once per alpha and evaluates each result
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Evaluation scenes
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Comma-separated alphas; the config list when absent
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Captions and questions a model about each scene, writes a JSON report
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss on a small random model
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of random parameter draws
        #[arg(long, default_value_t = 5)]
        draws: u64,
        /// JSON summary
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serves a rule-based rewrite endpoint until killed
    MockLlm {
        #[arg(long, default_value = "127.0.0.1:8089")]
        addr: String,
    },
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld {
            common,
            n,
            out,
            split,
            lexicon_out,
        } => {
            let config = common.load()?;
            ensure!(n > 0, "--n must be at least 1");
            writable(&out)?;
            if let Some(p) = &lexicon_out {
                writable(p)?;
            }
            let base = config.base_lexicon()?;
            let world_config = config.world_for(split);
            let scenes = world::generate_scenes(&world_config, &base, n)?;
            world::write_scenes(&out, &scenes)?;
            if let Some(p) = &lexicon_out {
                let lex = base.build_cooccurrence(&scenes)?;
                std::fs::write(p, lex.to_json() + "\n").with_context(|| format!("writing {}", p.display()))?;
            }
            println!("wrote {} scenes to {} (seed {})", scenes.len(), out.display(), world_config.seed);
        }
        Command::Augment {
            common,
            scenes,
            lexicon,
            mix,
            out_train,
            out_ref,
            llm_endpoint,
        } => {
            let config = common.load()?;
            readable(&scenes)?;
            readable(&lexicon)?;
            writable(&out_train)?;
            writable(&out_ref)?;
            let mut options = config.augment.clone();
            if let Some(m) = mix {
                options.mix = m.parse::<Mix>()?;
            }
            let lex = load_lexicon(&lexicon)?;
            let scene_list = world::read_scenes(&scenes)?;
            for s in &scene_list {
                s.validate(&lex).with_context(|| format!("scene `{}` does not match {}", s.id, lexicon.display()))?;
            }
            let dataset = match &llm_endpoint {
                None => augment::build_dataset(&scene_list, &lex, &options)?,
                Some(url) => {
                    let endpoint = llm::Endpoint::new(url.clone());
                    augment::build_dataset_with(&scene_list, &lex, &options, |scene, prompt, k, rng| {
                        llm::augment_description_llm(&endpoint, scene, prompt, &lex, options.mode, k, rng)
                    })?
                }
            };
            let by_scene: BTreeMap<&str, &world::SceneSpec> = scene_list.iter().map(|s| (s.id.as_str(), s)).collect();
            let mut valid = 0;
            for r in &dataset.train {
                let scene = by_scene
                    .get(r.scene_id.as_str())
                    .with_context(|| format!("record `{}` names unknown scene `{}`", r.id, r.scene_id))?;
                augment::validate_record(r, scene, &lex).with_context(|| format!("record `{}`", r.id))?;
                valid += 1;
            }
            augment::write_training(&out_train, &dataset.train)?;
            augment::write_reference(&out_ref, &dataset.reference)?;
            for (task, count) in dataset.task_counts() {
                println!("{task:<13} {count}");
            }
            println!(
                "validator: {valid}/{} records passed ({:.1}%)",
                dataset.train.len(),
                100.0 * valid as f64 / dataset.train.len().max(1) as f64
            );
            println!("wrote {} and {} reference records", out_train.display(), dataset.reference.len());
        }
        Command::Pretrain {
            common,
            scenes,
            lexicon,
            out,
            out_corpus,
            trace,
        } => {
            let config = common.load()?;
            readable(&scenes)?;
            readable(&lexicon)?;
            writable(&out)?;
            for p in out_corpus.iter().chain(&trace) {
                writable(p)?;
            }
            ensure!(config.pretrain.loss == LossMode::Mle, "pretrain.loss must be `mle`");
            let lex = load_lexicon(&lexicon)?;
            let scene_list = world::read_scenes(&scenes)?;
            let records = experiment::pretraining_corpus(&scene_list, &lex, &config.pretrain_tasks, config.occlusion, config.seed)?;
            let texts: Vec<&str> = records.iter().flat_map(|r| [r.instruction.as_str(), r.response.as_str()]).collect();
            let vocab = experiment::build_vocab(&lex, &texts)?;
            let corpus = experiment::encode_corpus(&records, &vocab);
            let shape = config.model;
            let mut model = WindowedLM::new(
                ModelConfig {
                    vocab: vocab.len(),
                    d: shape.d,
                    h: shape.h,
                    k: shape.k,
                },
                config.seed,
            )?;
            let started = Instant::now();
            let losses = trainer::pretrain_mle(&mut model, &corpus, &config.pretrain)?;
            save_model(&model, &vocab, &out)?;
            if let Some(p) = &out_corpus {
                augment::write_reference(p, &records)?;
            }
            if let Some(p) = &trace {
                let mut text = String::from("step,loss\n");
                for (i, l) in losses.iter().enumerate() {
                    text.push_str(&format!("{i},{l}\n"));
                }
                std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            let tail = &losses[losses.len().saturating_sub(100)..];
            println!(
                "pretrained {} steps on {} examples in {:.1?}; last-100 mean loss {:.4}; wrote {}",
                losses.len(),
                corpus.len(),
                started.elapsed(),
                tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                out.display()
            );
        }
        Command::Finetune {
            common,
            flags,
            model,
            train,
            reference,
            out,
            trace,
        } => {
            let mut config = common.load()?;
            flags.apply(&mut config.finetune);
            readable(&model)?;
            readable(&train)?;
            readable(&reference)?;
            writable(&out)?;
            if let Some(p) = &trace {
                writable(p)?;
            }
            let (base, vocab) = load_model(&model)?;
            let (records, refs) = load_training(&train, &reference, &vocab)?;
            let result = trainer::finetune(&base, &records, &refs, &config.finetune)?;
            save_model(&result.model, &vocab, &out)?;
            if let Some(p) = &trace {
                result.trace.write_csv(p)?;
            }
            println!(
                "{} finetune, {} steps in {:.1?}: L_a {:.4} -> {:.4}, divergence {:.5}; wrote {}",
                config.finetune.loss,
                config.finetune.steps,
                result.trace.wall_time,
                result.initial_l_a,
                result.final_l_a,
                result.final_divergence,
                out.display()
            );
        }
        Command::SweepAlpha {
            common,
            flags,
            model,
            train,
            reference,
            scenes,
            lexicon,
            alphas,
            out,
        } => {
            let mut config = common.load()?;
            flags.apply(&mut config.finetune);
            for p in [&model, &train, &reference, &scenes, &lexicon] {
                readable(p)?;
            }
            writable(&out)?;
            let alphas = if alphas.is_empty() { config.alphas.clone() } else { alphas };
            let (base, vocab) = load_model(&model)?;
            let (records, refs) = load_training(&train, &reference, &vocab)?;
            let lex = load_lexicon(&lexicon)?;
            let scene_list = world::read_scenes(&scenes)?;
            let evaluate = |m: &WindowedLM| eval::evaluate(m, &vocab, &scene_list, &lex, &config.eval);
            let rows = trainer::sweep_alpha(&base, &records, &refs, &alphas, &config.finetune, &evaluate)?;
            trainer::write_sweep_csv(&out, &rows)?;
            println!("{:>8} {:>9} {:>11} {:>8}", "alpha", "L_a", "divergence", "chair_i");
            for r in &rows {
                println!("{:>8} {:>9.4} {:>11.5} {:>8.4}", r.alpha, r.final_l_a, r.final_divergence, r.chair_i);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            model,
            scenes,
            lexicon,
            out,
        } => {
            let config = common.load()?;
            for p in [&model, &scenes, &lexicon] {
                readable(p)?;
            }
            writable(&out)?;
            let (m, vocab) = load_model(&model)?;
            let lex = load_lexicon(&lexicon)?;
            let scene_list = world::read_scenes(&scenes)?;
            let report = eval::evaluate(&m, &vocab, &scene_list, &lex, &config.eval)?;
            eval::write_report(&out, &report, &serde_json::to_value(&config)?, config.seed)?;
            println!(
                "chair_i {:.4} chair_s {:.4} coverage {:.4} f1 {:.4} yes_bias {:+.4} over {} scenes; wrote {}",
                report.chair_i,
                report.chair_s,
                report.coverage,
                report.f1,
                report.yes_bias,
                report.n,
                out.display()
            );
        }
        Command::Gradcheck { common, draws, out } => {
            let config = common.load()?;
            if let Some(p) = &out {
                writable(p)?;
            }
            ensure!(draws > 0, "--draws must be at least 1");
            let worst = gradcheck(config.seed, draws, config.finetune.alpha, config.finetune.beta)?;
            for (name, err) in &worst {
                println!("{name:<5} max relative error {err:.3e}");
            }
            if let Some(p) = &out {
                let summary = serde_json::json!({
                    "seed": config.seed,
                    "draws": draws,
                    "tolerance": GRAD_TOLERANCE,
                    "max_rel_error": worst,
                });
                std::fs::write(p, serde_json::to_string_pretty(&summary)? + "\n")
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            let failed: Vec<&str> = worst.iter().filter(|(_, e)| !(*e < GRAD_TOLERANCE)).map(|(n, _)| *n).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {} (tolerance {GRAD_TOLERANCE:e})", failed.join(", "));
            }
        }
        Command::MockLlm { addr } => {
            let server = llm::MockEndpoint::rule_based(&addr)?;
            println!("{}", server.url());
            server.join();
        }
    }
    Ok(())
}

fn readable(path: &Path) -> Result<()> {
    ensure!(path.is_file(), "input file {} does not exist", path.display());
    Ok(())
}

fn writable(path: &Path) -> Result<()> {
    ensure!(!path.is_dir(), "output path {} is a directory", path.display());
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let meta = std::fs::metadata(parent).with_context(|| format!("output directory {} is not accessible", parent.display()))?;
    ensure!(meta.is_dir(), "{} is not a directory", parent.display());
    ensure!(!meta.permissions().readonly(), "output directory {} is read-only", parent.display());
    Ok(())
}

fn load_lexicon(path: &Path) -> Result<ConceptLexicon> {
    ConceptLexicon::load(path).with_context(|| format!("loading lexicon {}", path.display()))
}

fn vocab_path(model: &Path) -> PathBuf {
    model.with_extension("vocab")
}

fn save_model(model: &WindowedLM, vocab: &Vocab, path: &Path) -> Result<()> {
    model.save(path)?;
    vocab.save(&vocab_path(path))?;
    Ok(())
}

fn load_model(path: &Path) -> Result<(WindowedLM, Vocab)> {
    let model = WindowedLM::load(path).with_context(|| format!("loading model {}", path.display()))?;
    let vp = vocab_path(path);
    let vocab = Vocab::load(&vp).with_context(|| format!("loading vocabulary {}", vp.display()))?;
    ensure!(
        vocab.len() == model.config.vocab,
        "vocabulary {} has {} tokens but the model expects {}",
        vp.display(),
        vocab.len(),
        model.config.vocab
    );
    Ok((model, vocab))
}

fn load_training(train: &Path, reference: &Path, vocab: &Vocab) -> Result<(Vec<EncodedRecord>, Vec<EncodedReference>)> {
    let records = augment::read_training(train)?.iter().map(|r| r.encode(vocab)).collect();
    let refs = augment::read_reference(reference)?.iter().map(|r| r.encode(vocab)).collect();
    Ok((records, refs))
}

fn random_record(rng: &mut ChaCha8Rng, vocab: u32) -> EncodedRecord {
    let len = rng.gen_range(3..7);
    let correct: Vec<u32> = (0..len).map(|_| rng.gen_range(4..vocab)).chain([EOS]).collect();
    let start = rng.gen_range(0..len);
    let end = rng.gen_range(start + 1..=len);
    let mut hallucinated = correct.clone();
    for t in &mut hallucinated[start..end] {
        *t = 4 + (*t - 4 + 1) % (vocab - 4);
    }
    EncodedRecord {
        id: "gradcheck".into(),
        instruction: TokenSeq((0..3).map(|_| rng.gen_range(4..vocab)).collect()),
        correct: TokenSeq(correct),
        hallucinated: TokenSeq(hallucinated),
        pairs: vec![(Span { start, end }, Span { start, end })],
    }
}

/// Worst relative error per loss over `draws` random models and records.
fn gradcheck(seed: u64, draws: u64, alpha: f64, beta: f64) -> Result<Vec<(&'static str, f64)>> {
    let cfg = ModelConfig {
        vocab: 11,
        d: 4,
        h: 5,
        k: 2,
    };
    let mut worst = [("l_a", 0.0f64), ("l_d", 0.0), ("l_dpa", 0.0), ("l_dpo", 0.0)];
    for draw in 0..draws {
        let s = seed.wrapping_add(draw);
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x67c4);
        let params = WindowedLM::new(cfg, s)?.params.to_vec();
        let frozen = WindowedLM::new(cfg, s ^ 0xf0f0)?;
        let rec = random_record(&mut rng, cfg.vocab as u32);
        let reference = EncodedReference {
            id: "ref".into(),
            instruction: rec.instruction.clone(),
            response: rec.correct.clone(),
        };
        let cached = vec![CachedReference::new(&frozen, &reference)?];
        let ref_logps = losses::reference_sequence_logps(&frozen, &rec)?;
        let bind = |v: &[Var]| BoundLM::from_vars(cfg, [v[0], v[1], v[2], v[3], v[4]]);
        let eps = 1e-5;
        let errors = [
            grad_check(|g, v| Ok(losses::alignment_loss_graph(g, &bind(v), &rec)?.0), &params, eps)?,
            grad_check(|g, v| losses::kl_divergence_graph(g, &bind(v), &cached[0], KlMode::FullVocab), &params, eps)?,
            grad_check(
                |g, v| Ok(losses::dpa_loss_graph(g, &bind(v), &rec, &cached, alpha, KlMode::FullVocab)?.0),
                &params,
                eps,
            )?,
            grad_check(|g, v| losses::dpo_loss_graph(g, &bind(v), &rec, ref_logps, beta), &params, eps)?,
        ];
        for (slot, e) in worst.iter_mut().zip(errors) {
            slot.1 = slot.1.max(e.max_rel_error);
        }
    }
    Ok(worst.to_vec())
}
