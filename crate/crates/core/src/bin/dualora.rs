use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dualora::pipeline::{self, Cell, ExperimentSpec, Layout};

#[derive(Parser)]
#[command(name = "dualora", version, about = "Dual-domain LoRA fine-tuning experiments on synthetic lyrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment spec (JSON). The built-in default grid is used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory; overrides the spec's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretrain/train/dev/test corpora.
    GenData(Common),
    /// Train the base model on the pretraining corpus.
    Pretrain(Common),
    /// Fine-tune adapters for one strategy.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: String,
        /// Seed of the cell; every seed of the spec when omitted.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Transcribe the test split. Without --strategy every cell is decoded.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Strategy id, or `pretrained` for the unadapted model.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score transcripts and write the reports.
    Eval(Common),
    /// Run every stage.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the default experiment spec.
    ShowSpec,
}

fn load(common: &Common) -> anyhow::Result<(ExperimentSpec, Layout)> {
    let mut spec = match &common.spec {
        Some(path) => ExperimentSpec::from_file(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(out) = &common.out {
        spec.out_dir = out.clone();
    }
    spec.validate()?;
    let layout = Layout::new(spec.out_dir.clone());
    Ok((spec, layout))
}

fn seeds(spec: &ExperimentSpec, seed: Option<u64>) -> anyhow::Result<Vec<u64>> {
    match seed {
        Some(s) if !spec.seeds.contains(&s) => bail!("seed {s} is not in the spec's seeds list"),
        Some(s) => Ok(vec![s]),
        None => Ok(spec.seeds.clone()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::ShowSpec => println!("{}", ExperimentSpec::default().to_json()),
        Command::GenData(common) => {
            let (spec, layout) = load(&common)?;
            pipeline::gen_data(&spec, &layout)?;
            println!("corpora written to {}", layout.root.join("data").display());
        }
        Command::Pretrain(common) => {
            let (spec, layout) = load(&common)?;
            pipeline::pretrain(&spec, &layout)?;
            println!("{}", layout.checkpoint(&Cell::Pretrained).display());
        }
        Command::Finetune { common, strategy, seed } => {
            let (spec, layout) = load(&common)?;
            for s in seeds(&spec, seed)? {
                pipeline::finetune(&spec, &layout, &strategy, s)
                    .with_context(|| format!("fine-tuning {strategy} with seed {s}"))?;
                let cell = Cell::Finetuned { strategy: strategy.clone(), seed: s };
                println!("{}", layout.checkpoint(&cell).display());
            }
        }
        Command::Decode { common, strategy, seed } => {
            let (spec, layout) = load(&common)?;
            let cells = match strategy.as_deref() {
                None => spec.cells(),
                Some("pretrained") => vec![Cell::Pretrained],
                Some(id) => {
                    spec.plan_for(id)?;
                    seeds(&spec, seed)?
                        .into_iter()
                        .map(|s| Cell::Finetuned { strategy: id.to_string(), seed: s })
                        .collect()
                }
            };
            for cell in cells {
                pipeline::decode(&spec, &layout, &cell).with_context(|| format!("decoding {}", cell.id()))?;
                println!("{}", layout.transcripts(&cell).display());
            }
        }
        Command::Eval(common) => {
            let (spec, layout) = load(&common)?;
            pipeline::eval(&spec, &layout)?;
            print!("{}", std::fs::read_to_string(layout.reports().join("table.md"))?);
        }
        Command::Grid { common, jobs } => {
            let (spec, layout) = load(&common)?;
            pipeline::run_grid(&spec, &layout, jobs)?;
            print!("{}", std::fs::read_to_string(layout.reports().join("table.md"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
