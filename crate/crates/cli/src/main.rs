//! `talkflow` command-line tool: generate the synthetic corpus, train,
//! sample, evaluate and run ablation rows.
//!
//! Every command writes into a run directory (`--out`) holding a copy of
//! the config, its digest, the metrics log, checkpoints and result records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use talkflow::error::Error;
use talkflow::harness::data::{gen_dataset, latent_to_unit};
use talkflow::harness::experiments::{
    run_ablation, AblationRow, EvalSettings, ResultRecord, Workspace,
};
use talkflow::harness::metrics::metric_sync;
use talkflow::harness::RunConfig;
use talkflow::task_masking::TaskKind;
use talkflow::trainer::{hex, load_checkpoint, save_checkpoint, write_metrics_jsonl, Checkpoint};
use talkflow::trainer::{NoNegatives, Trainer};

const CONFIG_FILE: &str = "config.toml";
const DIGEST_FILE: &str = "config.sha256";
const CHECKPOINT_FILE: &str = "checkpoint.bin";
const METRICS_FILE: &str = "metrics.jsonl";
const RESULTS_FILE: &str = "results.jsonl";

#[derive(Parser)]
#[command(name = "talkflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Replaces every stage's SFT step count.
    #[arg(long)]
    steps_override: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic corpus description to `clips.jsonl`.
    MakeData(Common),
    /// Trains (resuming from the run directory's checkpoint if present).
    Train {
        #[command(flatten)]
        common: Common,
        /// Steps between checkpoints.
        #[arg(long, default_value_t = 200)]
        checkpoint_every: usize,
    },
    /// Samples one training clip with the trained model.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        #[arg(long, default_value = "i2v")]
        task: String,
    },
    /// Scores the trained model and appends records to `results.jsonl`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Clips scored by sampling-based metrics.
        #[arg(long, default_value_t = 4)]
        clips: usize,
    },
    /// Runs one ablation row over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        row: String,
        /// Number of seeds, counting up from `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Clips scored by sampling-based metrics.
        #[arg(long, default_value_t = 8)]
        clips: usize,
    },
}

/// Failure classes with distinct exit codes.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0:#}")]
    Config(anyhow::Error),
    #[error("{0:#}")]
    Digest(anyhow::Error),
    #[error("{0:#}")]
    Io(anyhow::Error),
    #[error("{0:#}")]
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 3,
            Failure::Digest(_) => 4,
            Failure::Io(_) => 5,
            Failure::Other(_) => 1,
        }
    }

    fn classify(e: anyhow::Error) -> Self {
        let core = e.chain().find_map(|c| c.downcast_ref::<Error>());
        let io = e
            .chain()
            .any(|c| c.downcast_ref::<std::io::Error>().is_some());
        match core {
            Some(Error::DigestMismatch { .. }) => Failure::Digest(e),
            Some(Error::Config(_)) => Failure::Config(e),
            Some(Error::Io { .. }) => Failure::Io(e),
            _ if io => Failure::Io(e),
            _ => Failure::Other(e),
        }
    }
}

fn load_config(c: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => match RunConfig::load(p) {
            Ok(cfg) => cfg,
            Err(e @ Error::Io { .. }) => return Err(Failure::Io(e.into())),
            Err(e) => {
                return Err(Failure::Config(
                    anyhow::Error::new(e).context(format!("loading {}", p.display())),
                ))
            }
        },
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.steps_override {
        for st in &mut cfg.train.stages {
            st.sft_steps = n;
        }
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

/// Creates the run directory and records the config and its digest. An
/// existing directory must hold the same digest.
fn prepare_run(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let digest = hex(&cfg.digest());
    let digest_path = dir.join(DIGEST_FILE);
    if let Ok(old) = fs::read_to_string(&digest_path) {
        if old.trim() != digest {
            return Err(Error::DigestMismatch {
                checkpoint: old.trim().to_string(),
                config: digest,
            }
            .into());
        }
    }
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).context("writing config copy")?;
    fs::write(&digest_path, format!("{digest}\n")).context("writing config digest")?;
    Ok(())
}

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

fn trained_params(dir: &Path, cfg: &RunConfig) -> Result<talkflow::nn::ParamStore> {
    let ck = load_checkpoint(&dir.join(CHECKPOINT_FILE), Some(&cfg.digest()))
        .with_context(|| format!("loading checkpoint from {}", dir.display()))?;
    let plan = cfg.plan();
    Ok(match (ck.state.soup, plan.ema) {
        (Some(s), true) => s,
        (_, _) => ck.state.params,
    })
}

#[derive(Serialize)]
struct ClipRecord<'a> {
    index: usize,
    prompt: &'a str,
    identity: usize,
    color: String,
    motion: String,
    start: (usize, usize),
}

fn make_data(c: &Common) -> std::result::Result<(), Failure> {
    let cfg = load_config(c)?;
    prepare_run(&c.out, &cfg).map_err(Failure::classify)?;
    let clips = gen_dataset(&cfg.data, &cfg.backbone, cfg.data.n_clips, cfg.data.seed)
        .map_err(|e| Failure::Other(e.into()))?;
    let records: Vec<ClipRecord<'_>> = clips
        .iter()
        .enumerate()
        .map(|(index, k)| ClipRecord {
            index,
            prompt: &k.prompt,
            identity: k.spec.identity,
            color: k.spec.color.word().to_string(),
            motion: k.spec.motion.word().to_string(),
            start: k.spec.start,
        })
        .collect();
    let path = c.out.join("clips.jsonl");
    let _ = fs::remove_file(&path);
    append_jsonl(&path, &records).map_err(Failure::classify)?;
    println!("wrote {} clips to {}", records.len(), path.display());
    Ok(())
}

fn train(c: &Common, every: usize) -> std::result::Result<(), Failure> {
    let cfg = load_config(c)?;
    let run = || -> Result<()> {
        prepare_run(&c.out, &cfg)?;
        let ws = Workspace::new(cfg.clone())?;
        let ck_path = c.out.join(CHECKPOINT_FILE);
        let digest = cfg.digest();
        let mut tr = if ck_path.exists() {
            let ck = load_checkpoint(&ck_path, Some(&digest))?;
            println!("resuming at step {}", ck.state.progress.global_step);
            Trainer::resume(cfg.plan(), &ws.model, &ws.data, cfg.phda.clone(), ck.state)?
        } else {
            ws.trainer(cfg.plan(), ws.init_params(cfg.seed)?, cfg.phda.clone())?
        };
        let every = every.max(1);
        while !tr.is_done() {
            let target = tr.state.progress.global_step + every;
            tr.run(&NoNegatives, Some(target))?;
            let ck = Checkpoint {
                config_digest: digest,
                state: tr.state.clone(),
            };
            save_checkpoint(&ck, &ck_path)?;
            write_metrics_jsonl(&c.out.join(METRICS_FILE), &tr.state.log)?;
            let loss = tr
                .state
                .series("sft_loss")
                .last()
                .copied()
                .unwrap_or(f64::NAN);
            println!("step {} loss {loss:.5}", tr.state.progress.global_step);
        }
        let loss = ws.training_loss(tr.final_params())?;
        append_jsonl(
            &c.out.join(RESULTS_FILE),
            &[ResultRecord {
                metric: "training_loss".into(),
                arm: "trained".into(),
                seed: cfg.seed,
                value: loss,
            }],
        )?;
        println!("training loss {loss:.5}");
        Ok(())
    };
    run().map_err(Failure::classify)
}

fn infer(c: &Common, clip: usize, task: &str) -> std::result::Result<(), Failure> {
    let cfg = load_config(c)?;
    let task: TaskKind = task.parse().map_err(|e: Error| Failure::Config(e.into()))?;
    let run = || -> Result<()> {
        let ws = Workspace::new(cfg.clone())?;
        if clip >= ws.clips.len() {
            anyhow::bail!("clip {clip} out of range (corpus has {})", ws.clips.len());
        }
        let params = trained_params(&c.out, &cfg)?;
        let out = ws.generate(&params, &cfg.phda, clip, task, &cfg.sampler, cfg.seed)?;
        let x0 = &ws.data.samples[clip].x0;
        let mut records = vec![ResultRecord {
            metric: format!("{task}_psnr"),
            arm: format!("clip{clip}"),
            seed: cfg.seed,
            value: talkflow::harness::metrics::psnr(&out, x0, 2.0)?,
        }];
        if task == TaskKind::LipSync {
            records.push(ResultRecord {
                metric: "sync".into(),
                arm: format!("clip{clip}"),
                seed: cfg.seed,
                value: metric_sync(&latent_to_unit(&out), &ws.clips[clip].waveform)?,
            });
        }
        let sample_path = c.out.join(format!("sample_{task}_{clip}.json"));
        fs::write(
            &sample_path,
            serde_json::to_string(&serde_json::json!({"shape": out.shape(), "data": out.data()}))?,
        )
        .with_context(|| format!("writing {}", sample_path.display()))?;
        append_jsonl(&c.out.join(RESULTS_FILE), &records)?;
        for r in &records {
            println!("{} {:.4}", r.metric, r.value);
        }
        Ok(())
    };
    run().map_err(Failure::classify)
}

fn eval(c: &Common, clips: usize) -> std::result::Result<(), Failure> {
    let cfg = load_config(c)?;
    let run = || -> Result<()> {
        let ws = Workspace::new(cfg.clone())?;
        let params = trained_params(&c.out, &cfg)?;
        let idx: Vec<usize> = (0..clips.min(ws.clips.len())).collect();
        let seed = cfg.seed;
        let psnr = idx
            .iter()
            .map(|&i| ws.i2v_psnr(&params, i, &cfg.sampler, seed))
            .sum::<talkflow::error::Result<f64>>()?
            / idx.len() as f64;
        let case = ws.long_case(EvalSettings::default().long_frames, seed)?;
        let values = [
            ("training_loss", ws.training_loss(&params)?),
            ("loss_spread", ws.loss_spread(&params, 16)?),
            ("i2v_psnr", psnr),
            (
                "sync",
                ws.sync_score(&params, &cfg.phda, &idx, &cfg.sampler, seed)?,
            ),
            (
                "identity",
                ws.identity_score(&params, &idx, &cfg.sampler, seed)?,
            ),
            (
                "seam",
                ws.seam_score(
                    &params,
                    &case,
                    &cfg.sampler,
                    cfg.sampler.long_video_cfg,
                    seed,
                )?,
            ),
        ];
        let records: Vec<ResultRecord> = values
            .iter()
            .map(|&(metric, value)| ResultRecord {
                metric: metric.into(),
                arm: "trained".into(),
                seed,
                value,
            })
            .collect();
        append_jsonl(&c.out.join(RESULTS_FILE), &records)?;
        for r in &records {
            println!("{} {:.4}", r.metric, r.value);
        }
        Ok(())
    };
    run().map_err(Failure::classify)
}

fn ablate(c: &Common, row: &str, seeds: u64, clips: usize) -> std::result::Result<(), Failure> {
    let cfg = load_config(c)?;
    let row: AblationRow = row.parse().map_err(|e: Error| Failure::Config(e.into()))?;
    let run = || -> Result<()> {
        prepare_run(&c.out, &cfg)?;
        let ws = Workspace::new(cfg.clone())?;
        let seed_list: Vec<u64> = (cfg.seed..cfg.seed + seeds).collect();
        let eval = EvalSettings {
            clips,
            ..EvalSettings::default()
        };
        let path = c.out.join(RESULTS_FILE);
        let mut failed = None;
        run_ablation(&ws, row, &seed_list, &eval, None, &mut |r| {
            println!(
                "{row} {} {} seed={} {:.6}",
                r.metric, r.arm, r.seed, r.value
            );
            if let Err(e) = append_jsonl(&path, std::slice::from_ref(r)) {
                failed.get_or_insert(e);
            }
        })?;
        failed.map_or(Ok(()), Err)
    };
    run().map_err(Failure::classify)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    talkflow::exec::configure_from_env();
    let result = match &cli.command {
        Command::MakeData(c) => make_data(c),
        Command::Train {
            common,
            checkpoint_every,
        } => train(common, *checkpoint_every),
        Command::Infer { common, clip, task } => infer(common, *clip, task),
        Command::Eval { common, clips } => eval(common, *clips),
        Command::Ablate {
            common,
            row,
            seeds,
            clips,
        } => ablate(common, row, *seeds, *clips),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
