//! `llrc`: command-line driver for the compression pipeline.
//!
//! Every stage reads and writes checkpoint files, so the pipeline can be run
//! one step at a time:
//!
//! ```text
//! llrc gen-corpus --docs 4000 --out corpus.txt
//! llrc pretrain --config toy.cfg --corpus corpus.txt --steps 500 --out toy.ckpt
//! llrc calibrate --model toy.ckpt --corpus corpus.txt --docs 1000 --out calib.rec
//! llrc factorize --model toy.ckpt --calib calib.rec --out masked.ckpt
//! llrc train --model masked.ckpt --calib calib.rec --target-ratio 0.8 --out trained.ckpt --log train.log
//! llrc convert --model trained.ckpt --out small.ckpt
//! llrc eval --model small.ckpt --corpus heldout.txt --records heldout.rec --out eval.json
//! llrc report --model small.ckpt --out report.txt
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use llrc_core::model::{
    build_and_pretrain, capture_distillation_dataset, factorize_model, load_checkpoint, load_corpus, packed_stream,
    save_checkpoint, synthetic_corpus, ConfigFile, DistillationRecord, DocId, FactorizeOptions, DEFAULT_MIN_WORDS,
};
use llrc_core::pipeline::{
    convert_with, evaluate, fixed_rate_baseline, report, report_masked, sensitivity_search_baseline, Artifact,
    ConvertOptions, LanguageModel, Selection, SensitivityOptions,
};
use llrc_core::training::{train, write_metrics_log, TOY_COMPRESSION_SCALE};
use llrc_core::{LossWeights, MaskedModel, ToyTransformer, TrainConfig};

#[derive(Parser)]
#[command(name = "llrc", version, about = "Learned low-rank compression of a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, one document per line.
    GenCorpus {
        #[arg(long, default_value_t = 4000)]
        docs: usize,
        #[arg(long, env = "LLRC_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a toy transformer from scratch and freeze it.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides `steps` from the config file.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture distillation targets from a frozen model.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 3000)]
        docs: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_WORDS)]
        min_words: usize,
        /// Skip this many eligible documents first (to carve out held-out sets).
        #[arg(long, default_value_t = 0)]
        skip: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Factorize every eligible layer and attach fresh mask logits.
    Factorize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        no_whitening: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mask logits of a factorized model.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        target_ratio: f64,
        #[arg(long, default_value_t = 5000)]
        total_steps: usize,
        #[arg(long, default_value_t = 750)]
        patience: usize,
        #[arg(long, value_parser = parse_bounds, default_value = "0.3,1.0")]
        alpha_bounds: (f64, f64),
        /// Multiplier on the compression term; the default suits the toy
        /// models this tool builds.
        #[arg(long, default_value_t = TOY_COMPRESSION_SCALE)]
        compression_scale: f64,
        #[arg(long, env = "LLRC_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Turn trained masks into a smaller model.
    Convert {
        #[arg(long)]
        model: PathBuf,
        /// Keep the top singular values instead of the learned positions.
        #[arg(long)]
        topk: bool,
        /// Apply masks everywhere, even where factorizing costs parameters.
        #[arg(long)]
        no_heuristic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Uniform-rate or sensitivity-guided truncation of a frozen model.
    Baseline {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target_ratio: f64,
        /// Calibration records, for whitening and sensitivity probes.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out distillation error and perplexity.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer compression report (text plus `<out>.jsonl`).
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Fixed,
    Sensitivity,
}

fn parse_bounds(s: &str) -> std::result::Result<(f64, f64), String> {
    let (b, c) = s.split_once(',').ok_or("expected `b,c`")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(b)?, parse(c)?))
}

fn load_records(path: &Path) -> Result<Vec<DistillationRecord>> {
    load_checkpoint(path).with_context(|| format!("reading records from {}", path.display()))
}

fn calibration(records: &[DistillationRecord]) -> Vec<(DocId, &[usize])> {
    records.iter().map(|r| (r.doc_id, &r.token_ids[..])).collect()
}

fn frozen_model(path: &Path) -> Result<ToyTransformer> {
    load_checkpoint(path).with_context(|| format!("reading a pretrained model from {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { docs, seed, out } => {
            let mut text = synthetic_corpus(docs, seed).join("\n");
            text.push('\n');
            std::fs::write(&out, text)?;
            println!("wrote {docs} documents to {}", out.display());
        }
        Command::Pretrain { config, corpus, steps, out } => {
            let mut cfg = ConfigFile::load(&config)?;
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            let docs = load_corpus(&corpus, 0)?;
            if docs.is_empty() {
                bail!("{} holds no documents", corpus.display());
            }
            let start = Instant::now();
            let (model, rep) = build_and_pretrain(cfg.model, &packed_stream(&docs), &cfg.pretrain)?;
            save_checkpoint(&model, &out)?;
            println!(
                "pretrained {} parameters for {} steps in {:.1}s: loss {:.4} -> {:.4}",
                model.parameter_count(),
                rep.losses.len(),
                start.elapsed().as_secs_f64(),
                rep.initial_loss().unwrap_or(f64::NAN),
                rep.final_loss().unwrap_or(f64::NAN)
            );
        }
        Command::Calibrate { model, corpus, docs, min_words, skip, out } => {
            let model = frozen_model(&model)?;
            let all = load_corpus(&corpus, min_words)?;
            let picked: Vec<_> = all.into_iter().skip(skip).take(docs).collect();
            if picked.len() < docs {
                eprintln!("warning: only {} eligible documents (asked for {docs})", picked.len());
            }
            let records = capture_distillation_dataset(&model, &picked)?;
            save_checkpoint(&records, &out)?;
            println!("captured {} records from {} documents", records.len(), picked.len());
        }
        Command::Factorize { model, calib, no_whitening, out } => {
            let model = frozen_model(&model)?;
            let records = load_records(&calib)?;
            let opts = FactorizeOptions {
                use_whitening: !no_whitening,
                ..FactorizeOptions::default()
            };
            let masked = factorize_model(&model, &calibration(&records), opts)?;
            save_checkpoint(&masked, &out)?;
            println!("factorized {} layers (whitening {})", masked.layers().len(), if no_whitening { "off" } else { "on" });
        }
        Command::Train { model, calib, target_ratio, total_steps, patience, alpha_bounds, compression_scale, seed, out, log } => {
            let mut masked: MaskedModel = load_checkpoint(&model)?;
            let records = load_records(&calib)?;
            let cfg = TrainConfig {
                target_param_ratio: target_ratio,
                total_steps,
                early_stop_patience: patience,
                seed,
                ..TrainConfig::default()
            };
            let weights = LossWeights {
                alpha_bounds,
                compression_scale,
                ..LossWeights::default()
            };
            let start = Instant::now();
            let state = train(&mut masked, &records, &cfg, &weights)?;
            write_metrics_log(&state, &log)?;
            save_checkpoint(&masked, &out)?;
            if state.target_missed {
                eprintln!("warning: target ratio {target_ratio} not reached within {total_steps} steps");
            }
            println!(
                "trained {} steps in {:.1}s; ratio {:.4}; target reached at {}",
                state.step,
                start.elapsed().as_secs_f64(),
                state.current_ratio,
                state.target_reached_at.map_or("never".into(), |s| s.to_string())
            );
        }
        Command::Convert { model, topk, no_heuristic, out } => {
            let masked: MaskedModel = load_checkpoint(&model)?;
            let opts = ConvertOptions {
                selection: if topk { Selection::TopK } else { Selection::AnyK },
                keep_dense: !no_heuristic,
            };
            let compressed = convert_with(&masked, opts)?;
            save_checkpoint(&compressed, &out)?;
            println!(
                "converted with {}: {} parameters, layer ratio {:.4}",
                compressed.provenance.method,
                compressed.parameter_count(),
                compressed.param_ratio()
            );
        }
        Command::Baseline { method, model, target_ratio, calib, out } => {
            let model = frozen_model(&model)?;
            let records = calib.as_deref().map(load_records).transpose()?.unwrap_or_default();
            let seqs = calibration(&records);
            let compressed = match method {
                Method::Fixed => fixed_rate_baseline(&model, target_ratio, &seqs, !seqs.is_empty())?,
                Method::Sensitivity => {
                    if seqs.is_empty() {
                        bail!("the sensitivity baseline needs --calib records");
                    }
                    let outcome = sensitivity_search_baseline(&model, &seqs, target_ratio, &SensitivityOptions::default())?;
                    for l in &outcome.layers {
                        println!("{:<16} sensitivity {:>10.4} rate {}", l.name, l.sensitivity, l.assigned.map_or("full".into(), |r| r.to_string()));
                    }
                    outcome.model
                }
            };
            save_checkpoint(&compressed, &out)?;
            println!("{} baseline: layer ratio {:.4}", compressed.provenance.method, compressed.param_ratio());
        }
        Command::Eval { model, corpus, records, out } => {
            let artifact = Artifact::load(&model)?;
            let lm: &dyn LanguageModel = match &artifact {
                Artifact::Toy(m) => m,
                Artifact::Masked(m) => m,
                Artifact::Compressed(m) => m,
                Artifact::Records(_) => bail!("{} holds records, not a model", model.display()),
            };
            let heldout = load_corpus(&corpus, 0)?;
            let records = load_records(&records)?;
            let result = evaluate(lm, &heldout, &records)?;
            std::fs::write(&out, serde_json::to_string_pretty(&result)? + "\n")?;
            println!(
                "distill MSE {}  perplexity {}  ratio {:.4}",
                result.distill_mse.map_or("-".into(), |v| format!("{v:.6e}")),
                result.perplexity.map_or("-".into(), |v| format!("{v:.4}")),
                result.param_ratio
            );
        }
        Command::Report { model, out } => {
            let rep = match Artifact::load(&model)? {
                Artifact::Masked(m) => report_masked(&m),
                Artifact::Compressed(m) => report(&m),
                other => bail!("cannot report on a {} checkpoint", other.kind()),
            };
            let jsonl = rep.write(&out)?;
            print!("{}", rep.render_text());
            println!("wrote {} and {}", out.display(), jsonl.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
