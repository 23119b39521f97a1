use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dubbing_core::pipeline::{self, RunConfig, RunLayout};
use dubbing_core::DubError;

#[derive(Parser)]
#[command(name = "dubbing", version, about = "Reasoning-guided multi-condition dubbing toolkit")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Run directory holding every artifact.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic corpus.
    SynthData(Common),
    /// Supervised fine-tuning of the reasoning policy.
    TrainSft(Common),
    /// Mixed preference optimization from the SFT checkpoint.
    TrainMpo(Common),
    /// Pretrain the flow-matching generator trunk.
    TrainCfm(Common),
    /// Tune the condition branches and the duration predictor.
    TrainTune(Common),
    /// Generate features for held-out (or listed) items.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Comma-separated item ids; defaults to the test split.
        #[arg(long, value_delimiter = ',')]
        items: Option<Vec<String>>,
    },
    /// Score generated features.
    Eval(Common),
}

fn run(verb: Verb) -> Result<String, DubError> {
    let (common, items) = match verb {
        Verb::Infer { common, items } => (common, Some(items)),
        Verb::SynthData(c) => {
            let cfg = RunConfig::load(&c.config)?;
            let layout = RunLayout::new(&c.out);
            let recs = pipeline::synth_dataset(&cfg, &layout)?;
            pipeline::io::write_run_record(
                &layout,
                "synth-data",
                &cfg.to_toml()?,
                cfg.seed,
                &[],
                &[layout.manifest(), layout.traces()],
            )?;
            return Ok(format!("wrote {} items to {}", recs.len(), layout.data().display()));
        }
        Verb::TrainSft(c) => {
            let (cfg, layout) = open(&c)?;
            let o = pipeline::run_stage_sft(&cfg, &layout)?;
            return Ok(format!("sft: held-out accuracy {:.4}", o.scores.accuracy));
        }
        Verb::TrainMpo(c) => {
            let (cfg, layout) = open(&c)?;
            let o = pipeline::run_stage_mpo(&cfg, &layout)?;
            return Ok(format!(
                "mpo: held-out accuracy {:.4} (sft {:.4}), format validity {:.4} (sft {:.4})",
                o.scores.accuracy, o.sft_scores.accuracy, o.scores.format_valid, o.sft_scores.format_valid
            ));
        }
        Verb::TrainCfm(c) => {
            let (cfg, layout) = open(&c)?;
            let o = pipeline::run_stage_cfm(&cfg, &layout)?;
            let first = o.curve.first().map(|p| p.1).unwrap_or(f64::NAN);
            let last = o.curve.last().map(|p| p.1).unwrap_or(f64::NAN);
            return Ok(format!("cfm: monitored loss {first:.4} -> {last:.4}"));
        }
        Verb::TrainTune(c) => {
            let (cfg, layout) = open(&c)?;
            let o = pipeline::run_stage_tune(&cfg, &layout)?;
            return Ok(format!(
                "tune: duration MAE {:.4}s (mean baseline {:.4}s)",
                o.duration_mae, o.baseline_mae
            ));
        }
        Verb::Eval(c) => {
            let (cfg, layout) = open(&c)?;
            let t = pipeline::run_eval(&cfg, &layout)?;
            return Ok(t.to_tsv().trim_end().to_string());
        }
    };
    let (cfg, layout) = open(&common)?;
    let rows = pipeline::run_infer(&cfg, &layout, items.flatten().as_deref())?;
    let fallbacks = rows.iter().filter(|r| !r.trace_valid).count();
    Ok(format!("infer: {} outputs, {} invalid-trace fallbacks", rows.len(), fallbacks))
}

fn open(c: &Common) -> Result<(RunConfig, RunLayout), DubError> {
    Ok((RunConfig::load(&c.config)?, RunLayout::new(&c.out)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.verb) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({ "error": e.to_string(), "kind": e.kind() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
