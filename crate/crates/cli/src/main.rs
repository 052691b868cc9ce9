use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semtrans::guidance::Mode;
use semtrans_cli::{eval, replay, translate, EvalOptions, Outcome, Settings};

#[derive(Parser)]
#[command(name = "semtrans", version, about = "Diffusion-based semantic image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Translate an image towards a target text
    TranslateText(TranslateArgs),
    /// Translate an image towards the style of a target image
    TranslateImage(TranslateArgs),
    /// Repeat a run from its manifest
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compute SFID, CSFID and perceptual distance over an evaluation manifest
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        embedder_config: Option<PathBuf>,
        #[arg(long)]
        extractor_config: Option<PathBuf>,
        /// also write the report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TranslateArgs {
    /// flat TOML file with any of the settings below
    #[arg(long)]
    config: Option<PathBuf>,
    /// validate the configuration and inputs without sampling
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    settings: Settings,
}

fn report(outcome: Outcome) -> ExitCode {
    if let Some(m) = &outcome.manifest {
        if let Some(dir) = m.config.as_ref().map(|c| c.out_dir.display().to_string()) {
            eprintln!("run directory: {dir}");
        }
    }
    if let Some(e) = &outcome.error {
        eprintln!("error: {e}");
    }
    ExitCode::from(outcome.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::TranslateText(a) => report(translate(Mode::Text, a.settings, a.config.as_deref(), a.dry_run)),
        Command::TranslateImage(a) => report(translate(Mode::Image, a.settings, a.config.as_deref(), a.dry_run)),
        Command::Replay { manifest, out_dir } => report(replay(&manifest, out_dir)),
        Command::Eval { manifest, backend, embedder_config, extractor_config, out } => {
            let opts = EvalOptions { manifest, backend, embedder_config, extractor_config, out };
            match eval(&opts) {
                Ok(r) => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("report serialises"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
    }
}
