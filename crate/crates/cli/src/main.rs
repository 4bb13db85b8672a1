use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use cocktail_cli::commands::{self, SampleArgs};
use cocktail_cli::config::RunConfig;
use cocktail_core::ModalityKind;

#[derive(Parser)]
#[command(name = "cocktail", version, about = "Multi-modal controllable diffusion at desk scale")]
struct Cli {
    /// Configuration file of `key = value` lines; defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; configured paths are relative to it.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write dataset manifests and preview scenes.
    Synth,
    /// Train the backbone.
    Pretrain {
        /// Continue from the saved checkpoint and train state.
        #[arg(long)]
        resume: bool,
    },
    /// Train the control branch against the frozen backbone.
    TrainControl {
        #[arg(long)]
        resume: bool,
    },
    /// Sample one image.
    Sample {
        /// Prompt text, e.g. "a red circle on a blue background".
        #[arg(long)]
        prompt: Option<String>,
        /// Take prompt and bundle from this synthetic scene.
        #[arg(long)]
        scene: Option<u64>,
        /// Bundle directory (graymaps plus bundle.txt).
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Comma-separated subset of sketch,seg,kp to keep.
        #[arg(long, value_delimiter = ',')]
        modalities: Option<Vec<String>>,
        /// Region file of `token=<i> polarity=<pos|neg> mask=<file>` lines.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// Comma-separated token slots whose attention comes from the branch.
        #[arg(long, value_delimiter = ',')]
        substitute: Vec<usize>,
        /// Also write every step's attention maps.
        #[arg(long)]
        dump_attn: bool,
        /// Output file stem.
        #[arg(long, default_value = "sample")]
        name: String,
    },
    /// Score matched and shuffled bundles on the eval split.
    Eval,
    /// Render the attention maps of one step of a dump.
    InspectAttn {
        /// Attention dump written by `sample --dump-attn`.
        dump: PathBuf,
        /// Sampling step to render; defaults to the last.
        #[arg(long)]
        step: Option<usize>,
        /// Render only this token slot.
        #[arg(long)]
        token: Option<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = &cli.out;
    match cli.command {
        Command::Synth => {
            let o = commands::cmd_synth(&cfg, out)?;
            println!("train scenes {}", o.train.seeds.len());
            println!("eval scenes {}", o.eval.seeds.len());
            println!("previews {}", o.previews);
        }
        Command::Pretrain { resume } => {
            let o = commands::cmd_pretrain(&cfg, out, resume)?;
            print_train(&o);
        }
        Command::TrainControl { resume } => {
            let o = commands::cmd_train_control(&cfg, out, resume)?;
            print_train(&o.train);
            if let Some((c, b)) = o.step0 {
                println!("step0 loss {c:.6} (backbone alone {b:.6})");
            }
            if let Some((c, u, n)) = o.heldout {
                println!("held-out loss over {n} scenes: bundle {c:.6}, empty bundle {u:.6}");
            }
        }
        Command::Sample {
            prompt,
            scene,
            bundle,
            modalities,
            regions,
            substitute,
            dump_attn,
            name,
        } => {
            let modalities = modalities
                .map(|v| v.iter().map(|s| ModalityKind::parse(s)).collect::<cocktail_core::Result<Vec<_>>>())
                .transpose()?;
            let args = SampleArgs {
                prompt,
                scene,
                bundle,
                modalities,
                regions,
                substitute,
                dump_attn,
                name,
            };
            let r = commands::cmd_sample(&cfg, out, &args)?;
            println!("{}", r.image_path.display());
            if let Some(p) = r.attn_path {
                println!("{}", p.display());
            }
        }
        Command::Eval => {
            let o = commands::cmd_eval(&cfg, out)?;
            print!("{}", o.report);
        }
        Command::InspectAttn { dump, step, token } => {
            print!("{}", commands::cmd_inspect_attn(out, &dump, step, token)?);
        }
    }
    Ok(())
}

fn print_train(o: &commands::TrainOutcome) {
    println!("steps {}", o.steps);
    if let Some((a, b)) = o.smoothed {
        println!("smoothed loss {a:.6} -> {b:.6}");
    }
    println!("seconds {:.1}", o.seconds);
}
