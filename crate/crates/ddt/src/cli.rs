//! Command-line parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::resolve_config;
use crate::error::Result;
use crate::pipeline;

/// Exit status for usage errors such as an unknown subcommand or flag.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ddt", version, about = "Discrete diffusion timestep tokenizer and token language model")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set tokenizer.tokens=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Global seed; takes precedence over the file and DDT_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the encoder, quantizer and diffusion decoder.
    TrainTokenizer {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for checkpoints and loss records.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the token language model on tokenized captioned images.
    TrainLm {
        /// Tokenizer checkpoint file or directory.
        #[arg(long)]
        tokenizer_ckpt: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to the tokenizer checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tokenize every image of a manifest into a token file.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a token file to PNG images.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Source manifest; adds per-image PSNR against the originals.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate an image from a text prompt.
    Generate {
        #[arg(long)]
        prompt: String,
        /// Directory holding `lm.ddtc` and `tokenizer.ddtc`, or the LM file.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        /// Classifier-free guidance scale.
        #[arg(long, default_value_t = 8.0)]
        cfg: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analysis experiments.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write the synthetic shapes dataset as PNGs plus a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Language-model loss under increasing sequence perturbation.
    Perturb {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, default_value = "none,local4,local16,global")]
        degrees: String,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode `a` with a subset of its tokens taken from `b`.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// `all`, `none`, or positions such as `0,2,8-15`.
        #[arg(long)]
        mask: String,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode growing token prefixes of one image.
    PrefixSeries {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "1,2,4,8,16")]
        t: String,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction PSNR over a manifest.
    Recon {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-image table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patch k-means baseline tokens for a manifest.
    PatchVq {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 512)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `argv` and runs the command, returning the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTokenizer { config, out } => {
            let cfg = resolve_config(config.config.as_deref(), &config.overrides, config.seed)?;
            println!("config {} seed {}", cfg.hash, cfg.seed());
            let run = pipeline::train_tokenizer(&cfg, &out)?;
            if let (Some(first), Some(last)) = (run.reports.first(), run.reports.last()) {
                println!("recon {:.6} -> {:.6} over {} steps", first.recon, last.recon, run.reports.len());
            }
            println!("checkpoint {}", run.checkpoint.display());
        }
        Command::TrainLm { tokenizer_ckpt, config, out } => {
            let cfg = resolve_config(config.config.as_deref(), &config.overrides, config.seed)?;
            println!("config {} seed {}", cfg.hash, cfg.seed());
            let out = out.unwrap_or_else(|| if tokenizer_ckpt.is_dir() { tokenizer_ckpt.clone() } else { tokenizer_ckpt.parent().map(PathBuf::from).unwrap_or_default() });
            let run = pipeline::train_lm(&tokenizer_ckpt, &cfg, &out)?;
            if let (Some(first), Some(last)) = (run.reports.first(), run.reports.last()) {
                println!("loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, run.reports.len());
            }
            println!("checkpoint {}", run.checkpoint.display());
        }
        Command::Encode { ckpt, manifest, out } => {
            let file = pipeline::encode_manifest(&ckpt, &manifest, &out)?;
            println!("wrote {} sequences of {} tokens to {}", file.header.count, file.header.tokens, out.display());
        }
        Command::Decode { ckpt, tokens, out, steps, seed, manifest } => {
            let fallback = pipeline::token_meta(&tokens).map_or(0, |m| m.seed);
            let seed = pipeline::command_seed(seed, fallback)?;
            let run = pipeline::decode_tokens(&ckpt, &tokens, &out, steps, seed, manifest.as_deref())?;
            println!("decoded {} images to {}", run.images.len(), out.display());
            if let Some(p) = run.mean_psnr() {
                println!("mean PSNR {p:.3} dB");
            }
        }
        Command::Generate { prompt, ckpt, steps, cfg, seed, out } => {
            let seed = pipeline::command_seed(seed, 0)?;
            let g = pipeline::generate(&ckpt, &prompt, steps, cfg, seed, &out)?;
            println!("tokens {:?}", g.codes);
            println!("wrote {}", out.display());
        }
        Command::Eval(e) => run_eval(e)?,
        Command::Synth { out, count, resolution, seed } => {
            let seed = pipeline::command_seed(seed, 0)?;
            let meta = crate::config::ArtifactMeta { config_hash: "synth".into(), seed };
            let m = crate::dataset::write_synth_dataset(&out, count, resolution, seed, &meta)?;
            println!("wrote {} images and {}", m.entries.len(), out.join(crate::dataset::MANIFEST_FILE).display());
        }
    }
    Ok(())
}

fn run_eval(command: EvalCommand) -> Result<()> {
    match command {
        EvalCommand::Perturb { tokens, degrees, config, out } => {
            let cfg = resolve_config(config.config.as_deref(), &config.overrides, config.seed)?;
            let curves = pipeline::eval_perturb(&tokens, &degrees, &cfg, &out)?;
            for c in &curves {
                println!("{:>8}  final loss {:.4}", c.degree.to_string(), c.final_loss);
            }
        }
        EvalCommand::Interpolate { ckpt, a, b, mask, steps, seed, out } => {
            let seed = pipeline::command_seed(seed, 0)?;
            let ids = pipeline::eval_interpolate(&ckpt, &a, &b, &mask, steps, seed, &out)?;
            println!("tokens {ids:?}");
            println!("wrote {}", out.display());
        }
        EvalCommand::PrefixSeries { ckpt, image, t, steps, seed, out } => {
            let seed = pipeline::command_seed(seed, 0)?;
            let rows = pipeline::eval_prefix_series(&ckpt, &image, &pipeline::parse_t_list(&t)?, steps, seed, &out)?;
            for r in rows {
                println!("t={:<3} PSNR {:.3} dB", r.t, r.psnr);
            }
        }
        EvalCommand::Recon { ckpt, manifest, steps, seed, out } => {
            let seed = pipeline::command_seed(seed, 0)?;
            let r = pipeline::eval_recon(&ckpt, &manifest, steps, seed, out.as_deref())?;
            println!("mean PSNR {:.3} dB over {} images", r.mean_psnr, r.per_image.len());
        }
        EvalCommand::PatchVq { manifest, resolution, patch, k, iterations, seed, out } => {
            let seed = pipeline::command_seed(seed, 0)?;
            let f = pipeline::patch_vq_tokens(&manifest, resolution, patch, k, iterations, seed, &out)?;
            println!("wrote {} sequences of {} tokens to {}", f.header.count, f.header.tokens, out.display());
        }
    }
    Ok(())
}
