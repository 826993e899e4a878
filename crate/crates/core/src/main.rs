use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egodiff::config::ExperimentConfig;
use egodiff::pipeline::{self, AblationAxis, ModelPaths};
use egodiff::Error;

/// Egocentric wearer-pose generation with a latent diffusion model.
///
/// Any config key can be overridden with `--set key=value` or directly as
/// `--key value` (dashes and underscores are interchangeable).
#[derive(Parser, Debug)]
#[command(name = "egodiff", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    denoiser: PathBuf,
    /// Defaults to `<denoiser>.scene-encoder`.
    #[arg(long)]
    scene_encoder: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective config.
    ShowConfig,
    /// Generate synthetic interaction episodes (train split first, then test).
    GenerateData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the motion VAE.
    TrainVae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the latent denoiser against a frozen VAE.
    TrainDenoiser {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.scene-encoder`.
        #[arg(long)]
        scene_encoder_out: Option<PathBuf>,
    },
    /// Generate wearer motion for every test episode.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated motion against the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Produce one ablation table.
    Ablate {
        /// distance, gaze30, gaze60, future or conditioning.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        /// Needed by the distance and gaze axes.
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        scene_encoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Rewrites `--latent-dim 64` and `--latent_dim=64` into `--set latent_dim=64`.
fn expand_key_flags(args: Vec<String>) -> Vec<String> {
    let keys = ExperimentConfig::keys();
    let mut out = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            out.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.replace('-', "_"), Some(v.to_string())),
            None => (flag.replace('-', "_"), None),
        };
        if !keys.contains(&name.as_str()) {
            out.push(arg);
            continue;
        }
        match inline.or_else(|| it.next()) {
            Some(v) => {
                out.push("--set".into());
                out.push(format!("{name}={v}"));
            }
            None => out.push(arg),
        }
    }
    out
}

fn load_config(cli: &Cli) -> egodiff::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let mut pairs = Vec::new();
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(vec![format!("override '{o}' is not KEY=VALUE")]))?;
        pairs.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn run(cli: Cli) -> egodiff::Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::ShowConfig => {
            print!("# {}\n{}", egodiff::VERSION, cfg.to_text());
        }
        Command::GenerateData { out } => {
            let n = pipeline::cmd_generate_data(&cfg, out)?;
            println!("wrote {n} episodes to {}", out.display());
        }
        Command::TrainVae { data, out } => {
            let log = pipeline::cmd_train_vae(&cfg, data, out)?;
            if let Some(last) = log.last() {
                println!("final loss {:.5} (reconstruction {:.5}, kl {:.5})", last.total, last.reconstruction, last.kl);
            }
            println!("wrote {}", out.display());
        }
        Command::TrainDenoiser { data, vae, out, scene_encoder_out } => {
            let scene_out = cfg
                .flags()
                .scene
                .then(|| scene_encoder_out.clone().unwrap_or_else(|| suffixed(out, ".scene-encoder")));
            let run = pipeline::cmd_train_denoiser(&cfg, data, vae, out, scene_out.as_deref())?;
            if let Some(last) = run.log.last() {
                println!("final loss {:.5}", last.loss);
            }
            println!("wrote {}", out.display());
            if let Some(p) = scene_out {
                println!("wrote {}", p.display());
            }
        }
        Command::Sample { data, models, out } => {
            let scene = scene_path(models.scene_encoder.as_deref(), &models.denoiser);
            let paths = ModelPaths { vae: &models.vae, denoiser: &models.denoiser, scene_encoder: Some(&scene) };
            let n = pipeline::cmd_sample(&cfg, paths, data, out)?;
            println!("wrote {n} sequences to {}", out.display());
        }
        Command::Evaluate { data, models, out_dir } => {
            let scene = scene_path(models.scene_encoder.as_deref(), &models.denoiser);
            let paths = ModelPaths { vae: &models.vae, denoiser: &models.denoiser, scene_encoder: Some(&scene) };
            pipeline::cmd_evaluate(&cfg, paths, data, out_dir)?;
            let table = std::fs::read_to_string(out_dir.join("metrics.txt"))?;
            print!("{}", table.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect::<String>());
        }
        Command::Ablate { axis, data, vae, denoiser, scene_encoder, out } => {
            let axis: AblationAxis = axis.parse()?;
            let scene = denoiser.as_ref().map(|d| scene_path(scene_encoder.as_deref(), d));
            let paths = denoiser.as_ref().map(|d| ModelPaths { vae, denoiser: d, scene_encoder: scene.as_deref() });
            let rows = pipeline::cmd_ablate(&cfg, vae, paths, data, axis, out)?;
            print!("{}", pipeline::ablation_table(&rows));
        }
    }
    Ok(())
}

fn scene_path(given: Option<&Path>, denoiser: &Path) -> PathBuf {
    given.map_or_else(|| suffixed(denoiser, ".scene-encoder"), Path::to_path_buf)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingInput { .. } => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_key_flags(std::env::args().collect())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
