//! `qgn`: quadtree label codecs, sparsity stats, toy training/inference
//! with selectable propagation schemes, and self-verification.
//!
//! Exit codes: 1 format, 2 shape, 3 structure, 4 config/usage,
//! 5 verification failure. stderr carries diagnostics, stdout data.

mod config;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "qgn", version, about = "Quadtree scene-parsing toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a QMR1 mask into a QTR1 quadtree and print sparsity stats
    Encode {
        /// input mask (QMR1)
        mask: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// quadtree depth (levels)
        #[arg(long)]
        levels: Option<u8>,
        /// output path (default: input with .qtr extension)
        #[arg(long)]
        out: Option<PathBuf>,
        /// pad dims up to a multiple of 2^levels by edge replication
        #[arg(long)]
        pad: bool,
        /// report format
        #[arg(long)]
        report: Option<String>,
    },
    /// Decode a QTR1 quadtree back into a QMR1 mask
    Decode {
        /// input quadtree (QTR1)
        quadtree: PathBuf,
        /// output path (default: input with .qmr extension)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Storage ratio from per-level pixel percentages (coarsest first)
    Stats {
        /// comma-separated percentages, e.g. 66.34,14.21,9.18,5.52,3.02,1.70
        percentages: String,
    },
    /// Train on the seeded synthetic task; writes checkpoint + log
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// propagation scheme: all|gtc (pc is inference-only)
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        levels: Option<u8>,
        /// checkpoint path; the log goes to the same path with .log
        #[arg(long, default_value = "model.qgn")]
        out: PathBuf,
    },
    /// Run a checkpoint on a mask; writes the predicted mask
    Infer {
        /// checkpoint (QGN1)
        checkpoint: PathBuf,
        /// input mask (QMR1), fed to the network one-hot
        input: PathBuf,
        /// ground truth mask (QMR1); required under gtc
        #[arg(long)]
        gt: Option<PathBuf>,
        /// propagation scheme: all|gtc|pc
        #[arg(long, default_value = "all")]
        scheme: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// report format: text|csv
        #[arg(long, default_value = "text")]
        report: String,
    },
    /// Run the codec, sparse-oracle and gradient suites
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// directory for serialized failing cases
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Encode { mask, config, levels, out, pad, report } => {
            let rc = RunConfig::load(config.as_deref(), None, None, levels, report.as_deref());
            rc.and_then(|rc| runs::cmd_encode(&rc, &mask, out, pad))
        }
        Cmd::Decode { quadtree, out } => runs::cmd_decode(&quadtree, out),
        Cmd::Stats { percentages } => runs::cmd_stats(&percentages),
        Cmd::Train { config, seed, scheme, levels, out } => {
            let rc = RunConfig::load(config.as_deref(), seed, scheme.as_deref(), levels, None);
            rc.and_then(|rc| runs::cmd_train(&rc, &out))
        }
        Cmd::Infer { checkpoint, input, gt, scheme, out, report } => {
            runs::cmd_infer(&checkpoint, &input, gt.as_deref(), &scheme, out, &report)
        }
        Cmd::Verify { seed, out } => runs::cmd_verify(seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
