//! Command-line harness over the verification stack: stage training,
//! trial scoring, attention heatmap emission, and synthetic corpus
//! generation. Everything deterministic in (config, seed).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use avjp_core::checkpoint::Checkpoint;
use avjp_core::config::RunConfig;
use avjp_core::eval::{run_eval, ScoreMode};
use avjp_core::heatmap::emit_heatmap;
use avjp_core::scoring::write_scores;
use avjp_core::synthdata::write_corpus;
use avjp_core::train::run_train;

#[derive(Parser)]
#[command(
    name = "avjp",
    version,
    about = "Desk-scale audio-visual person verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage and write a checkpoint.
    Train {
        /// Run configuration, flat key=value text.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Previous stage's checkpoint to start from instead of fresh
        /// parameters.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a trial list against a checkpoint and report EER and minDCF.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest covering every utterance the trials mention.
        #[arg(long)]
        manifest: PathBuf,
        /// Trial list, `label enroll_id test_id` per line.
        #[arg(long)]
        trials: PathBuf,
        /// Which system to score: audio, visual, fused, or ensemble.
        #[arg(long)]
        modality: String,
        /// Apply adaptive score normalization.
        #[arg(long)]
        snorm: bool,
        /// Score file output path.
        #[arg(long)]
        scores: PathBuf,
    },
    /// Write attention heatmap CSVs for one utterance.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        /// Utterance id to visualize.
        #[arg(long)]
        utt: String,
        /// Output directory for the CSV files.
        #[arg(long)]
        out: PathBuf,
        /// Manifest to resolve the utterance against; defaults to the
        /// training manifest recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate the synthetic corpus described by a configuration.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Corpus output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out, init } => {
            let cfg = RunConfig::load(&config)?;
            let from = match &init {
                Some(p) => Some(Checkpoint::load(p)?),
                None => None,
            };
            let ck = run_train(&cfg, from.as_ref(), |e| {
                println!("stage {} epoch {} loss {:.6}", e.stage, e.epoch, e.loss);
            })?;
            ck.save(&out)?;
            println!("wrote checkpoint {}", out.display());
        }
        Command::Eval {
            ckpt,
            manifest,
            trials,
            modality,
            snorm,
            scores,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mode = ScoreMode::parse(&modality)?;
            let outcome = run_eval(&ck, &manifest, &trials, mode, snorm)?;
            write_scores(&scores, &outcome.scored)?;
            let tag = if outcome.snorm || mode == ScoreMode::Ensemble {
                format!("{}+snorm", mode.name())
            } else {
                mode.name().to_string()
            };
            println!(
                "{tag}: EER {:.2}% minDCF {:.4} threshold {:.4}",
                outcome.eer * 100.0,
                outcome.min_dcf,
                outcome.eer_threshold
            );
            println!("wrote scores {}", scores.display());
        }
        Command::Heatmap {
            ckpt,
            utt,
            out,
            manifest,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let files = emit_heatmap(&ck, &utt, manifest.as_deref(), &out)?;
            for p in [
                &files.audio_temporal,
                &files.visual_temporal,
                &files.audio_weights,
                &files.visual_weights,
            ] {
                println!("wrote {}", p.display());
            }
        }
        Command::Synth { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let paths = write_corpus(&cfg, &out)?;
            println!("wrote manifest {}", paths.train_manifest.display());
            if let Some(p) = &paths.eval_manifest {
                println!("wrote manifest {}", p.display());
            }
            if let Some(p) = &paths.trials {
                println!("wrote trials {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
