//! `muc` — encode, decode, train, and evaluate the ultra low-bitrate music
//! codec. Configuration comes from a key=value file plus a few flag
//! overrides; `muc info` dumps a stream header.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use muc_codec::config::Config;
use muc_codec::dataset::Split;
use muc_codec::pipeline::{self, Stage};
use muc_core::Dtype;

#[derive(Parser)]
#[command(name = "muc", about = "ultra low-bitrate music codec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// key=value config file (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bitrate preset override: low (0.35 kbps) or high (1.33 kbps)
    #[arg(long)]
    preset: Option<String>,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::from_file(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => Config::default(),
        };
        if let Some(p) = &self.preset {
            cfg.apply("preset", p)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compress a WAV file to a .muc stream
    Encode {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Output path (default: input with .muc extension)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a WAV file from a .muc stream
    Decode {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Output path (default: input with .wav extension)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the sampler's Euler step count
        #[arg(long)]
        steps: Option<usize>,
        /// Override the guidance scale
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Train pipeline stages on the (generated-on-demand) synthetic corpus
    Train {
        #[command(flatten)]
        common: Common,
        /// Stages to run: all | muencoder1 | muencoder2 | rvq | vae | flowgen
        #[arg(long, default_value = "all")]
        stages: String,
        /// Retrain stages whose checkpoints already exist
        #[arg(long)]
        overwrite: bool,
    },
    /// Objective metrics over a corpus split, written as line-delimited JSON
    Eval {
        #[command(flatten)]
        common: Common,
        /// Corpus split: train | dev | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Report path (default: stdout)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the header of a .muc stream
    Info { input: PathBuf },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Encode { input, common, out } => {
            let cfg = common.load()?;
            let out = out.unwrap_or_else(|| input.with_extension("muc"));
            let info = match cfg.dtype {
                Dtype::F32 => pipeline::encode_file::<f32>(&input, &out, &cfg)?,
                Dtype::F64 => pipeline::encode_file::<f64>(&input, &out, &cfg)?,
            };
            println!(
                "{} -> {}: {} frames, payload {} bytes, {:.4} kbps",
                input.display(),
                out.display(),
                info.n_frames,
                info.payload_bytes,
                info.kbps
            );
        }
        Command::Decode { input, common, out, steps, guidance } => {
            let mut cfg = common.load()?;
            if let Some(steps) = steps {
                cfg.sampler.n_steps = steps;
                eprintln!("[decode] sampler override: {steps} steps");
            }
            if let Some(g) = guidance {
                cfg.sampler.guidance_scale = g;
                eprintln!("[decode] guidance override: {g}");
            }
            let out = out.unwrap_or_else(|| input.with_extension("wav"));
            match cfg.dtype {
                Dtype::F32 => pipeline::decode_file::<f32>(&input, &out, &cfg, cfg.seed)?,
                Dtype::F64 => pipeline::decode_file::<f64>(&input, &out, &cfg, cfg.seed)?,
            }
            println!("{} -> {}", input.display(), out.display());
        }
        Command::Train { common, stages, overwrite } => {
            let cfg = common.load()?;
            let stages = if stages == "all" {
                Stage::all()
            } else {
                stages
                    .split(',')
                    .map(Stage::parse)
                    .collect::<muc_codec::Result<Vec<_>>>()?
            };
            match cfg.dtype {
                Dtype::F32 => pipeline::train_all::<f32>(&cfg, &stages, overwrite)?,
                Dtype::F64 => pipeline::train_all::<f64>(&cfg, &stages, overwrite)?,
            }
            println!("training complete; checkpoints in {}", cfg.ckpt_dir.display());
        }
        Command::Eval { common, split, out } => {
            let cfg = common.load()?;
            let split = Split::from_tag(&split)
                .ok_or_else(|| anyhow::anyhow!("unknown split `{split}`"))?;
            let report = match cfg.dtype {
                Dtype::F32 => pipeline::eval_split::<f32>(&cfg, split)?,
                Dtype::F64 => pipeline::eval_split::<f64>(&cfg, split)?,
            };
            let text = report.to_jsonl();
            match out {
                Some(path) => {
                    std::fs::write(&path, &text)?;
                    println!("report written to {}", path.display());
                }
                None => print!("{text}"),
            }
        }
        Command::Info { input } => {
            let (header, payload, kbps) = pipeline::stream_info(&input)?;
            println!("magic/version : MUC1 v{}", header.version);
            println!("config        : {} ({}x{})", header.config_id, header.n_codebooks, header.codebook_size);
            println!("sample rate   : {} Hz, {} channel(s)", header.sample_rate, header.channels);
            println!("token rate    : {} Hz", header.token_rate);
            println!("frames        : {}", header.n_frames);
            println!("block length  : {}", header.block_len);
            println!("payload       : {payload} bytes ({kbps:.4} kbps)");
        }
    }
    Ok(())
}
