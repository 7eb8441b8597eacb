use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nocspose::io;
use nocspose::pipeline::{
    cmd_estimate, cmd_eval, cmd_refine, cmd_render, cmd_synth, BboxSource, CommandError, Mode,
    PipelineConfig,
};
use nocspose::refine::Sampling;
use nocspose::Pose;

#[derive(Parser)]
#[command(name = "nocspose", version, about = "Dense-correspondence 6 DoF object pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground-truth maps.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate a pose per frame of a scene.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Estimate, then refine poses jointly over groups of views.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Summarize a records file into records.json and summary.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Records file; defaults to records.json in --out.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Render NOCS, mask and depth PNGs of one frame.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        frame: String,
        /// Pose JSON to render instead of the ground truth.
        #[arg(long)]
        pose: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// rgb, rgbd or rgb+d-kabsch.
    #[arg(long)]
    mode: Option<Mode>,
    /// Views per refinement group.
    #[arg(long)]
    views: Option<usize>,
    /// closest, random or furthest.
    #[arg(long)]
    sampling: Option<Sampling>,
    /// gt or jitter.
    #[arg(long)]
    bbox: Option<BboxSource>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, CommandError> {
        let mut cfg = match &self.config {
            Some(p) => io::read_json(p).map_err(CommandError::Config)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(v) = self.views {
            cfg.views = v;
        }
        if let Some(s) = self.sampling {
            cfg.sampling = s;
        }
        if let Some(b) = self.bbox {
            cfg.bbox = b;
        }
        cfg.validate().map_err(CommandError::Config)?;
        Ok(cfg)
    }
}

fn read_pose(path: &Path) -> Result<Pose, CommandError> {
    io::read_json(path).map_err(CommandError::Config)
}

fn run(cli: Cli) -> Result<String, CommandError> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.config()?;
            let manifest = cmd_synth(&cfg, &common.out)?;
            Ok(format!("wrote {}", manifest.display()))
        }
        Command::Estimate { common, manifest } => {
            let cfg = common.config()?;
            let records = cmd_estimate(&manifest, &cfg, &common.out)?;
            let ok = records.iter().filter(|r| r.success).count();
            Ok(format!("{ok}/{} frames estimated", records.len()))
        }
        Command::Refine { common, manifest } => {
            let cfg = common.config()?;
            let out = cmd_refine(&manifest, &cfg, &common.out)?;
            Ok(format!("refined {} groups", out.groups.len()))
        }
        Command::Eval {
            common,
            manifest,
            records,
        } => {
            let cfg = common.config()?;
            let records = records.unwrap_or_else(|| common.out.join("records.json"));
            let rows = cmd_eval(&records, &manifest, &cfg, &common.out)?;
            Ok(rows
                .iter()
                .map(|r| format!("{} {} {}: ADD recall {:.4} over {} frames", r.object_id, r.stage, r.mode, r.add_recall, r.frames))
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::Render {
            common,
            manifest,
            frame,
            pose,
        } => {
            let pose = pose.as_deref().map(read_pose).transpose()?;
            let paths = cmd_render(&manifest, &frame, pose.as_ref(), &common.out)?;
            Ok(paths.iter().map(|p| format!("wrote {}", p.display())).collect::<Vec<_>>().join("\n"))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli).context("nocspose") {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e:#}");
            let code = e.downcast_ref::<CommandError>().map_or(1, CommandError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
