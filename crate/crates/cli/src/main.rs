use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use markerprompt_cli::*;
use markerprompt_core::marker::DEFAULT_OVERLAY_ALPHA;
use markerprompt_core::metrics::format_table;
use markerprompt_core::scene::DEFAULT_IMAGE_SIZE;

/// Synthetic driving-scene QA with visual marker prompts.
///
/// Log verbosity follows MARKERPROMPT_LOG (env_logger syntax, default
/// "info").
#[derive(Parser)]
#[command(name = "markerprompt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        views: usize,
        #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
        image_size: usize,
        #[arg(long, default_value_t = 3)]
        min_objects: usize,
        #[arg(long, default_value_t = 6)]
        max_objects: usize,
    },
    /// Render the marker image of one scene plus its index map JSON.
    Render {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_OVERLAY_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        view: usize,
    },
    /// Train on the training split; writes checkpoint and loss CSV.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// TOML config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Evaluate a checkpoint and write a metric report JSON.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
    },
    /// Train and evaluate the four ablation variants.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> markerprompt_core::Result<()> {
    match cmd {
        Command::Gen {
            out,
            scenes,
            seed,
            views,
            image_size,
            min_objects,
            max_objects,
        } => {
            let m = cmd_gen(&GenArgs {
                out,
                scenes,
                seed,
                views,
                image_size,
                min_objects,
                max_objects,
            })?;
            println!("scenes: {}\nqa_records: {}", m.scenes, m.qa_records);
        }
        Command::Render {
            dataset,
            scene,
            out,
            alpha,
            view,
        } => {
            let json = cmd_render(&RenderArgs {
                dataset,
                scene,
                out: out.clone(),
                alpha,
                view,
            })?;
            println!("{}\n{}", out.display(), json.display());
        }
        Command::Train {
            dataset,
            config,
            out,
            split,
        } => {
            let r = cmd_train(&TrainArgs {
                dataset,
                config,
                out,
                split,
            })?;
            if let Some(last) = r.losses.last() {
                println!("iterations: {}\nfinal_loss: {}", r.losses.len(), last.loss);
            }
            println!("checkpoint: {}", r.checkpoint.display());
        }
        Command::Eval {
            dataset,
            ckpt,
            out,
            split,
        } => {
            let report = cmd_eval(&EvalArgs {
                dataset,
                ckpt,
                out,
                split,
            })?;
            print!("{}", format_table(&[("model".to_string(), &report)]));
        }
        Command::Ablate { dataset, grid, out } => {
            let summary = cmd_ablate(&AblateArgs { dataset, grid, out })?;
            print!("{}", summary.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MARKERPROMPT_LOG", "info"))
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
