use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hrvvs_cli::ablate::ablate;
use hrvvs_cli::data::{load_split, select, LoadedVideo};
use hrvvs_cli::evaluate::{evaluate, write_report};
use hrvvs_cli::infer::infer;
use hrvvs_cli::train::{pretrain_var, train_with};
use hrvvs_cli::{Checkpoint, RunConfig};
use hrvvs_core::datasets::{load_dataset, split, synth_generate};
use hrvvs_core::params::Adam;
use hrvvs_core::{Error, Model, Result};

#[derive(Parser)]
#[command(name = "hrvvs", version, about = "High-resolution video vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given (desk or paper).
    #[arg(long, default_value = "desk")]
    profile: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_var: bool,
    #[arg(long)]
    no_msim: bool,
    #[arg(long)]
    no_dwfm: bool,
    /// Output directory (or file for `pretrain-var`).
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::profile(&self.profile)?,
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.data.synth.seed = s;
        }
        let cfg = cfg.with_ablation(self.no_var, self.no_msim, self.no_dwfm);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the prior branch alone and save a step-0 checkpoint.
    PretrainVar {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train end to end on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Start from this checkpoint instead of fresh weights.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write per-class probability maps and argmax masks.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Segment a directory of frames as one video.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: PathBuf,
    },
    /// Train and score the five module combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    std::fs::write(path, body).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn train_split(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<LoadedVideo>> {
    let records = load_dataset(data)?;
    let (s, videos) = load_split(&records, cfg.data.split_seed, "train", &cfg.model)?;
    write(&out.join("split.json"), &s.to_json())?;
    Ok(videos)
}

/// Checkpoint flags override the stored config only for the ablation switches.
fn checkpoint_model(common: &Common, path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.config.clone().with_ablation(common.no_var, common.no_msim, common.no_dwfm);
    let model = Model::new(cfg.model)?;
    Ok((ck, model))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = common.run_config()?;
            let records = synth_generate(&cfg.data.synth, &common.out)?;
            let frames: usize = records.iter().map(|r| r.len()).sum();
            println!("wrote {} videos, {frames} frames to {}", records.len(), common.out.display());
        }
        Command::PretrainVar { common, data } => {
            let cfg = common.run_config()?;
            let records = load_dataset(&data)?;
            let (_, videos) = load_split(&records, cfg.data.split_seed, "train", &cfg.model)?;
            let model = Model::new(cfg.model.clone())?;
            let mut params = model.init_params(cfg.train.seed);
            let report = pretrain_var(&cfg, &model, &mut params, &videos)?;
            println!(
                "reconstruction {:.6} -> {:.6}, cross-entropy {:.6} -> {:.6}",
                report.initial.reconstruction, report.last.reconstruction, report.initial.cross_entropy, report.last.cross_entropy
            );
            let ck = Checkpoint { config: cfg, step: 0, params, adam: Adam::default() };
            ck.save(&common.out)?;
        }
        Command::Train { common, data, init } => {
            let cfg = common.run_config()?;
            let out = &common.out;
            let videos = train_split(&cfg, &data, out)?;
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            write(&out.join("config.toml"), &cfg.to_toml())?;
            let mut lines = String::new();
            let outcome = train_with(&cfg, &videos, init, |s| {
                println!("step {:>5}  lr {:.3e}  loss {:.6}", s.step, s.lr, s.loss);
                lines.push_str(&serde_json::to_string(s).expect("log serializes"));
                lines.push('\n');
            })?;
            write(&out.join("train_log.jsonl"), &lines)?;
            outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
            println!("saved {}", out.join("checkpoint.bin").display());
        }
        Command::Eval { common, checkpoint, data, split: name, dump_masks } => {
            let (ck, model) = checkpoint_model(&common, &checkpoint)?;
            let records = load_dataset(&data)?;
            let s = split(&records, ck.config.data.split_seed)?;
            let videos = select(&records, &s, &name)?
                .into_iter()
                .map(|r| LoadedVideo::load(r, model.config()))
                .collect::<Result<Vec<_>>>()?;
            let dump = dump_masks.then(|| common.out.join("predictions"));
            let report = evaluate(&model, &ck.params, &videos, ck.config.data.eval_mode, dump.as_deref())?;
            write_report(&report, &common.out, "metrics")?;
            print!("{}", report.to_csv());
        }
        Command::Infer { common, checkpoint, frames } => {
            let (ck, model) = checkpoint_model(&common, &checkpoint)?;
            let summary = infer(&model, &ck.params, &frames, &common.out)?;
            for (p, reason) in &summary.failed {
                eprintln!("skipped {}: {reason}", p.display());
            }
            println!("wrote {} masks and overlays to {}", summary.written.len(), common.out.display());
        }
        Command::Ablate { common, data, split: name } => {
            let cfg = common.run_config()?;
            let records = load_dataset(&data)?;
            let (s, train_videos) = load_split(&records, cfg.data.split_seed, "train", &cfg.model)?;
            let eval_videos = select(&records, &s, &name)?
                .into_iter()
                .map(|r| LoadedVideo::load(r, &cfg.model))
                .collect::<Result<Vec<_>>>()?;
            let report = ablate(&cfg, &train_videos, &eval_videos, |r| {
                println!("{:<6} Dice {:.4}", r.name, r.scores.dice);
            })?;
            write(&common.out.join("ablation.csv"), &report.to_csv())?;
            write(&common.out.join("ablation.json"), &report.to_json())?;
            write(&common.out.join("ablation.md"), &report.to_markdown())?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
