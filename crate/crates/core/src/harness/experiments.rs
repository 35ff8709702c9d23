//! Experiment drivers shared by the command-line tool and the acceptance
//! suite: training runs, sampling-based scores, the negative-preference
//! cycle and the ablation rows.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::artifacts::{inject_video, LatentOracle};
use super::data::{
    gen_dataset, latent_to_unit, random_spec, render_clip, ArtifactKind, Encoders, IdentityLibrary,
    SyntheticClip,
};
use super::metrics::{metric_identity, metric_seam, metric_sync, psnr};
use super::RunConfig;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::modal_features::FaceMask;
use crate::nn::ParamStore;
use crate::phda::PhdaConfig;
use crate::sampler::{
    euler_sample, sliding_window_generate, window_bundles, window_starts, Guidance, ModelDenoiser,
    NegativePrompts, SamplerConfig,
};
use crate::task_masking::{build_task_mask, TaskKind, TaskMask};
use crate::tensor::Tensor;
use crate::trainer::{
    dominant_tag, mean_flow_loss, mean_probability_proxy, mine_negatives, task_mask_for, Candidate,
    ClipGenerator, Example, FixedNegatives, NegativeSource, NoNegatives, Preference, Stage,
    TaskSchedule, TaskWeight, TrainData, TrainPlan, Trainer, TrainerState,
};

/// Artifact applied to the `i`-th mined clip; colour shifts dominate.
const ARTIFACT_CYCLE: [ArtifactKind; 4] = [
    ArtifactKind::ColorShift,
    ArtifactKind::ColorShift,
    ArtifactKind::ColorShift,
    ArtifactKind::IdentitySwap,
];

/// Generated dataset, frozen encoders and model structure of one config.
pub struct Workspace {
    pub cfg: RunConfig,
    pub clips: Vec<SyntheticClip>,
    pub encoders: Encoders,
    pub data: TrainData,
    pub library: IdentityLibrary,
    pub model: Backbone,
}

/// A clip longer than the model window, prepared for sliding-window
/// generation.
pub struct LongCase {
    pub truth: Tensor,
    pub windows: Vec<Guidance>,
    pub mask: TaskMask,
    pub starts: Vec<usize>,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let clips = gen_dataset(&cfg.data, &cfg.backbone, cfg.data.n_clips, cfg.data.seed)?;
        let encoders = Encoders::new(&cfg.data, &cfg.backbone);
        let data = encoders.train_data(&clips, &cfg.data)?;
        let geom = cfg.data.geometry(&cfg.backbone);
        let library =
            IdentityLibrary::new(cfg.data.identities, geom.height, geom.width, cfg.data.seed);
        let (model, _) = Backbone::new(cfg.backbone.clone(), 0)?;
        Ok(Workspace {
            cfg,
            clips,
            encoders,
            data,
            library,
            model,
        })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        Ok(Backbone::new(self.cfg.backbone.clone(), seed)?.1)
    }

    pub fn trainer(
        &self,
        plan: TrainPlan,
        params: ParamStore,
        phda: PhdaConfig,
    ) -> Result<Trainer<'_>> {
        Trainer::new(plan, &self.model, params, &self.data, phda)
    }

    /// Trains from fresh parameters seeded by the plan seed and returns the
    /// final state.
    pub fn train(
        &self,
        plan: TrainPlan,
        phda: PhdaConfig,
        source: &dyn NegativeSource,
    ) -> Result<TrainerState> {
        let params = self.init_params(plan.seed)?;
        let mut tr = self.trainer(plan, params, phda)?;
        tr.run(source, None)?;
        Ok(tr.state)
    }

    fn mask(&self, index: usize, task: TaskKind) -> Result<TaskMask> {
        task_mask_for(task, &self.cfg.backbone, self.data.samples[index].mouth)
    }

    fn loss_over(&self, params: &ParamStore, items: &[(usize, TaskKind)]) -> Result<f64> {
        let masks: Vec<TaskMask> = items
            .iter()
            .map(|&(i, t)| self.mask(i, t))
            .collect::<Result<_>>()?;
        let examples: Vec<Example<'_>> = items
            .iter()
            .zip(&masks)
            .map(|(&(i, _), mask)| Example {
                x0: &self.data.samples[i].x0,
                bundle: &self.data.samples[i].bundle,
                mask,
            })
            .collect();
        mean_flow_loss(
            &self.model,
            params,
            &examples,
            &self.cfg.train.eval_grid,
            &self.cfg.phda,
        )
    }

    /// Flow loss over every training clip, tasks cycling through all four.
    pub fn training_loss(&self, params: &ParamStore) -> Result<f64> {
        let items: Vec<(usize, TaskKind)> = (0..self.clips.len())
            .map(|i| (i, TaskKind::ALL[i % 4]))
            .collect();
        self.loss_over(params, &items)
    }

    /// Flow loss of `task` over the first `n` clips.
    pub fn task_loss(&self, params: &ParamStore, task: TaskKind, n: usize) -> Result<f64> {
        let items: Vec<(usize, TaskKind)> =
            (0..n.min(self.clips.len())).map(|i| (i, task)).collect();
        self.loss_over(params, &items)
    }

    /// Max minus min of the per-task losses over the first `n` clips.
    pub fn loss_spread(&self, params: &ParamStore, n: usize) -> Result<f64> {
        let l: Vec<f64> = TaskKind::ALL
            .iter()
            .map(|&t| self.task_loss(params, t, n))
            .collect::<Result<_>>()?;
        Ok(l.iter().cloned().fold(f64::MIN, f64::max) - l.iter().cloned().fold(f64::MAX, f64::min))
    }

    pub fn negative_prompts(&self, sampler: &SamplerConfig) -> Result<Option<NegativePrompts>> {
        if !sampler.png.enabled {
            return Ok(None);
        }
        let motion = self
            .encoders
            .text
            .encode_prompt(&sampler.png.motion_prompt)?;
        let detail = self
            .encoders
            .text
            .encode_prompt(&sampler.png.detail_prompt)?;
        if motion.tokens.shape() != detail.tokens.shape() {
            return Err(Error::Config(
                "sampler.png: motion and detail prompts need the same number of tokens".into(),
            ));
        }
        Ok(Some(NegativePrompts { motion, detail }))
    }

    fn noise(&self, shape: &[usize], seed: u64, index: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64 + 1);
        Tensor::randn(shape, 1.0, &mut rng)
    }

    /// Samples training clip `index` under `task`.
    pub fn generate(
        &self,
        params: &ParamStore,
        phda: &PhdaConfig,
        index: usize,
        task: TaskKind,
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<Tensor> {
        let s = &self.data.samples[index];
        let guide = Guidance {
            bundle: s.bundle.clone(),
            null_text: self.data.null_text.clone(),
            negatives: self.negative_prompts(sampler)?,
        };
        let den = ModelDenoiser {
            model: &self.model,
            params,
            phda,
        };
        let init = self.noise(s.x0.shape(), seed, index);
        euler_sample(
            &den,
            &init,
            &guide,
            &self.mask(index, task)?,
            &s.x0,
            sampler,
        )
    }

    /// PSNR (unit range) of an image-to-video sample over its generated
    /// frames.
    pub fn i2v_psnr(
        &self,
        params: &ParamStore,
        index: usize,
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<f64> {
        let out = self.generate(params, &self.cfg.phda, index, TaskKind::I2V, sampler, seed)?;
        let t = out.shape()[0];
        let x0 = &self.data.samples[index].x0;
        psnr(&out.slice_outer(1, t - 1)?, &x0.slice_outer(1, t - 1)?, 2.0)
    }

    /// Mean lip-sync score of mouth-inpainting samples of `indices`.
    pub fn sync_score(
        &self,
        params: &ParamStore,
        phda: &PhdaConfig,
        indices: &[usize],
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<f64> {
        let mut total = 0.0;
        for &i in indices {
            let out = self.generate(params, phda, i, TaskKind::LipSync, sampler, seed)?;
            total += metric_sync(&latent_to_unit(&out), &self.clips[i].waveform)?;
        }
        Ok(total / indices.len() as f64)
    }

    /// Mean identity score of text-to-video samples against the true first
    /// frame.
    pub fn identity_score(
        &self,
        params: &ParamStore,
        indices: &[usize],
        sampler: &SamplerConfig,
        seed: u64,
    ) -> Result<f64> {
        let mut total = 0.0;
        for &i in indices {
            let out = self.generate(params, &self.cfg.phda, i, TaskKind::T2V, sampler, seed)?;
            let x0 = &self.data.samples[i].x0;
            let s = x0.shape();
            let first = latent_to_unit(&x0.slice_outer(0, 1)?.reshape(&s[1..])?);
            total += metric_identity(&latent_to_unit(&out), &first)?;
        }
        Ok(total / indices.len() as f64)
    }

    /// A fresh clip of `frames` latent frames with per-window conditions and
    /// an image-to-video mask over the whole clip.
    pub fn long_case(&self, frames: usize, seed: u64) -> Result<LongCase> {
        let d = &self.cfg.data;
        let b = &self.cfg.backbone;
        let mut geom = d.geometry(b);
        geom.frames = frames * d.temporal_factor;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let spec = random_spec(&mut rng, geom, d.identities);
        let clip = render_clip(&spec, geom, &self.library, d.samples_per_frame())?;
        let truth = super::data::to_latent(&clip.pixels, d.temporal_factor, d.spatial_factor)?;
        let starts = window_starts(frames, self.cfg.sampler.window, self.cfg.sampler.overlap)?;
        let audio = self
            .encoders
            .audio
            .encode(&clip.waveform, d.alpha, geom.frames)?;
        let first = truth.slice_outer(0, 1)?.reshape(&truth.shape()[1..])?;
        let face = FaceMask::from_region(frames, b.height, b.width, self.data.samples[0].mouth)?;
        let bundles = window_bundles(
            &self.encoders.text.encode_prompt(&clip.prompt)?,
            &self.encoders.image.encode(&first)?,
            &audio,
            &face,
            &starts,
            self.cfg.sampler.window,
            d.temporal_factor,
            d.context,
        )?;
        let negatives = self.negative_prompts(&self.cfg.sampler)?;
        let windows = bundles
            .into_iter()
            .map(|bundle| Guidance {
                bundle,
                null_text: self.data.null_text.clone(),
                negatives: negatives.clone(),
            })
            .collect();
        Ok(LongCase {
            mask: build_task_mask(TaskKind::I2V, (frames, b.height, b.width), None)?,
            truth,
            windows,
            starts,
        })
    }

    /// Seam score of a sliding-window sample of `case`.
    pub fn seam_score(
        &self,
        params: &ParamStore,
        case: &LongCase,
        sampler: &SamplerConfig,
        long_video_cfg: bool,
        seed: u64,
    ) -> Result<f64> {
        let den = ModelDenoiser {
            model: &self.model,
            params,
            phda: &self.cfg.phda,
        };
        let cfg = SamplerConfig {
            long_video_cfg,
            ..sampler.clone()
        };
        let init = self.noise(case.truth.shape(), seed, 0);
        let out =
            sliding_window_generate(&den, &init, &case.windows, &case.mask, &case.truth, &cfg)?;
        metric_seam(&out, &case.starts, cfg.window)
    }
}

/// Image-to-video samples of training clips with an injected artifact.
pub struct ArtifactGenerator<'a> {
    pub ws: &'a Workspace,
    pub sampler: SamplerConfig,
    /// First clip used; index `i` samples clip `(clip_offset + i) mod n`.
    pub clip_offset: usize,
    pub seed: u64,
}

impl ClipGenerator for ArtifactGenerator<'_> {
    fn generate(&self, params: &ParamStore, index: usize) -> Result<Candidate> {
        let ws = self.ws;
        let clip = (self.clip_offset + index) % ws.clips.len();
        let out = ws.generate(
            params,
            &ws.cfg.phda,
            clip,
            TaskKind::I2V,
            &self.sampler,
            self.seed.wrapping_add(index as u64),
        )?;
        let kind = ARTIFACT_CYCLE[index % ARTIFACT_CYCLE.len()];
        let bad = inject_video(
            &latent_to_unit(&out),
            kind,
            ws.clips[clip].spec.identity,
            &ws.library,
        )?;
        let s = &ws.data.samples[clip];
        Ok(Candidate {
            latent: bad.map(|v| 2.0 * v - 1.0),
            bundle: s.bundle.clone(),
            mask: ws.mask(clip, TaskKind::I2V)?,
            positive: Some(s.x0.clone()),
        })
    }
}

/// Settings of one negative-preference cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NdpoSettings {
    pub steps: usize,
    pub lambda: f64,
    pub lr: f64,
    pub negatives: usize,
    pub heldout: usize,
    pub batch: usize,
    /// Euler steps used to generate mined clips.
    pub sample_steps: usize,
    pub preference: Preference,
    /// Clips in the positive evaluation set.
    pub positives: usize,
}

impl Default for NdpoSettings {
    fn default() -> Self {
        NdpoSettings {
            steps: 8,
            lambda: 0.05,
            lr: 3e-5,
            negatives: 16,
            heldout: 16,
            batch: 8,
            sample_steps: 10,
            preference: Preference::Negative,
            positives: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdpoOutcome {
    pub pi_before: f64,
    pub pi_after: f64,
    pub positive_before: f64,
    pub positive_after: f64,
    pub aborted: bool,
    pub negatives: usize,
    pub steps: usize,
}

impl NdpoOutcome {
    pub fn pi_reduction(&self) -> f64 {
        1.0 - self.pi_after / self.pi_before
    }

    pub fn positive_increase(&self) -> f64 {
        self.positive_after / self.positive_before - 1.0
    }
}

impl Workspace {
    /// One preference phase on negatives mined from `base`, scored on a
    /// held-out negative set drawn from other clips.
    pub fn ndpo_cycle(
        &self,
        base: &ParamStore,
        s: &NdpoSettings,
        seed: u64,
    ) -> Result<NdpoOutcome> {
        let sampler = SamplerConfig {
            steps: s.sample_steps,
            s_text: 1.0,
            s_audio: 1.0,
            ..self.cfg.sampler.clone()
        };
        let train_gen = ArtifactGenerator {
            ws: self,
            sampler: sampler.clone(),
            clip_offset: 0,
            seed,
        };
        let held_gen = ArtifactGenerator {
            ws: self,
            sampler,
            clip_offset: self.clips.len() / 2,
            seed: seed.wrapping_add(1 << 32),
        };
        let plan = TrainPlan {
            stages: vec![Stage {
                tasks: vec![TaskWeight {
                    kind: TaskKind::I2V,
                    prob: 1.0,
                }],
                sft_steps: 0,
                ndpo_steps: s.steps,
                ema_decay: 0.5,
                lr: s.lr,
            }],
            seed,
            ema: false,
            ndpo_lambda: s.lambda,
            negatives_per_stage: s.negatives,
            ndpo_batch: s.batch,
            preference: s.preference,
            ..self.cfg.train.clone()
        };
        let mined = mine_negatives(base, &train_gen, s.negatives, 0, &LatentOracle)?;
        let tag = dominant_tag(&mined);
        let negatives: Vec<_> = mined
            .into_iter()
            .filter(|n| tag.as_ref().is_none_or(|t| &n.tag == t))
            .collect();
        let mut tr = self.trainer(plan, base.clone(), self.cfg.phda.clone())?;
        tr.run(&FixedNegatives(negatives.clone()), None)?;
        let held: Vec<_> = mine_negatives(base, &held_gen, s.heldout, 0, &LatentOracle)?
            .into_iter()
            .filter(|n| tag.as_ref().is_none_or(|t| &n.tag == t))
            .collect();
        let grid = &self.cfg.train.eval_grid;
        let after = &tr.state.params;
        let pi = |p: &ParamStore| {
            mean_probability_proxy(&self.model, p, &held, grid, s.lambda, &self.cfg.phda)
        };
        let pos = |p: &ParamStore| self.task_loss(p, TaskKind::I2V, s.positives);
        Ok(NdpoOutcome {
            pi_before: pi(base)?,
            pi_after: pi(after)?,
            positive_before: pos(base)?,
            positive_after: pos(after)?,
            aborted: !tr.state.series("guard_abort").is_empty(),
            negatives: negatives.len(),
            steps: tr.state.series("ndpo_loss").len(),
        })
    }
}

/// One line of an experiment's results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub metric: String,
    pub arm: String,
    pub seed: u64,
    pub value: f64,
}

/// Ablation experiments, each comparing two or three arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    TaskSchedule,
    NoEma,
    ModalAllocation,
    ZeroAudio,
    SftOnly,
    SftPairedDpo,
    NoPng,
    NoLongVideoCfg,
}

impl AblationRow {
    pub const ALL: [AblationRow; 8] = [
        AblationRow::TaskSchedule,
        AblationRow::NoEma,
        AblationRow::ModalAllocation,
        AblationRow::ZeroAudio,
        AblationRow::SftOnly,
        AblationRow::SftPairedDpo,
        AblationRow::NoPng,
        AblationRow::NoLongVideoCfg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::TaskSchedule => "task_schedule",
            AblationRow::NoEma => "no_ema",
            AblationRow::ModalAllocation => "modal_allocation",
            AblationRow::ZeroAudio => "zero_audio",
            AblationRow::SftOnly => "sft_only",
            AblationRow::SftPairedDpo => "sft_paired_dpo",
            AblationRow::NoPng => "no_png",
            AblationRow::NoLongVideoCfg => "no_long_video_cfg",
        }
    }

    /// Whether every arm trains its own model per seed.
    pub fn trains_per_arm(self) -> bool {
        matches!(
            self,
            AblationRow::TaskSchedule | AblationRow::NoEma | AblationRow::ModalAllocation
        )
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationRow::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AblationRow::ALL.iter().map(|r| r.name()).collect();
                Error::invalid(format!(
                    "unknown ablation row `{s}`; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Settings of the sampling-based evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    /// Clips scored by sync and identity metrics.
    pub clips: usize,
    /// Clips scored by the per-task loss spread.
    pub spread_clips: usize,
    /// Latent frames of the long-video case.
    pub long_frames: usize,
    pub ndpo: NdpoSettings,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            clips: 8,
            spread_clips: 16,
            long_frames: 10,
            ndpo: NdpoSettings::default(),
        }
    }
}

fn clip_indices(ws: &Workspace, n: usize, seed: u64) -> Vec<usize> {
    let len = ws.clips.len();
    (0..n.min(len))
        .map(|k| (seed as usize * n + k) % len)
        .collect()
}

/// Runs `row` for every seed, reporting each record as it is produced.
/// Rows that compare inference-time or post-training variants start from
/// `base` when given, and otherwise train it with the run config.
pub fn run_ablation(
    ws: &Workspace,
    row: AblationRow,
    seeds: &[u64],
    eval: &EvalSettings,
    base: Option<&ParamStore>,
    report: &mut dyn FnMut(&ResultRecord),
) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    let mut push = |metric: &str, arm: &str, seed: u64, value: f64| {
        let r = ResultRecord {
            metric: metric.into(),
            arm: arm.into(),
            seed,
            value,
        };
        report(&r);
        out.push(r);
    };
    let cfg = &ws.cfg;
    let base = if row.trains_per_arm() {
        None
    } else if let Some(p) = base {
        Some(p.clone())
    } else {
        let st = ws.train(cfg.plan(), cfg.phda.clone(), &NoNegatives)?;
        let plan = cfg.plan();
        Some(match (&st.soup, plan.ema) {
            (Some(s), true) => s.clone(),
            _ => st.params,
        })
    };
    let final_of = |st: TrainerState, ema: bool| match (st.soup, ema) {
        (Some(s), true) => s,
        (_, _) => st.params,
    };
    for &seed in seeds {
        let clips = clip_indices(ws, eval.clips, seed);
        match row {
            AblationRow::TaskSchedule => {
                for (arm, sched) in [
                    ("hard_to_easy", TaskSchedule::HardToEasy),
                    ("easy_to_hard", TaskSchedule::EasyToHard),
                ] {
                    let steps: Vec<usize> = cfg.train.stages.iter().map(|s| s.sft_steps).collect();
                    let lr = cfg.train.stages[0].lr;
                    let plan = TrainPlan {
                        stages: TrainPlan::with_schedule(sched, &steps, lr, seed).stages,
                        seed,
                        ..cfg.train.clone()
                    };
                    let p = final_of(
                        ws.train(plan.clone(), cfg.phda.clone(), &NoNegatives)?,
                        plan.ema,
                    );
                    push("training_loss", arm, seed, ws.training_loss(&p)?);
                    push(
                        "loss_spread",
                        arm,
                        seed,
                        ws.loss_spread(&p, eval.spread_clips)?,
                    );
                }
            }
            AblationRow::NoEma => {
                for (arm, ema) in [("ema", true), ("no_ema", false)] {
                    let plan = TrainPlan {
                        seed,
                        ema,
                        ..cfg.train.clone()
                    };
                    let p = final_of(ws.train(plan, cfg.phda.clone(), &NoNegatives)?, ema);
                    push(
                        "loss_spread",
                        arm,
                        seed,
                        ws.loss_spread(&p, eval.spread_clips)?,
                    );
                    push("training_loss", arm, seed, ws.training_loss(&p)?);
                }
            }
            AblationRow::ModalAllocation => {
                let mut audio_flat = cfg.phda.clone();
                audio_flat.audio = crate::phda::Knots::new(0.0, 0.0);
                for (arm, phda) in [
                    ("phased", cfg.phda.clone()),
                    ("audio_flat", audio_flat),
                    ("flat", PhdaConfig::flat()),
                ] {
                    let plan = TrainPlan {
                        seed,
                        ..cfg.train.clone()
                    };
                    let p = final_of(
                        ws.train(plan.clone(), phda.clone(), &NoNegatives)?,
                        plan.ema,
                    );
                    push(
                        "sync",
                        arm,
                        seed,
                        ws.sync_score(&p, &phda, &clips, &cfg.sampler, seed)?,
                    );
                    push("training_loss", arm, seed, ws.training_loss(&p)?);
                }
            }
            AblationRow::ZeroAudio => {
                let p = base.as_ref().unwrap();
                let mut silent = cfg.phda.clone();
                silent.audio.off = Some([0.0, crate::phda::MAX_TIMESTEP]);
                push(
                    "sync",
                    "full",
                    seed,
                    ws.sync_score(p, &cfg.phda, &clips, &cfg.sampler, seed)?,
                );
                push(
                    "sync",
                    "zero_audio",
                    seed,
                    ws.sync_score(p, &silent, &clips, &cfg.sampler, seed)?,
                );
            }
            AblationRow::SftOnly | AblationRow::SftPairedDpo => {
                let p = base.as_ref().unwrap();
                let mut arms = vec![("sft_ndpo", Preference::Negative)];
                if row == AblationRow::SftPairedDpo {
                    arms.push(("sft_paired_dpo", Preference::Paired { beta: 1.0 }));
                }
                for (arm, preference) in arms {
                    let s = NdpoSettings {
                        preference,
                        ..eval.ndpo.clone()
                    };
                    let o = ws.ndpo_cycle(p, &s, seed)?;
                    if row == AblationRow::SftOnly {
                        push("negative_proxy", "sft_only", seed, o.pi_before);
                        push("positive_loss", "sft_only", seed, o.positive_before);
                    }
                    push("negative_proxy", arm, seed, o.pi_after);
                    push("positive_loss", arm, seed, o.positive_after);
                }
            }
            AblationRow::NoPng => {
                let p = base.as_ref().unwrap();
                for (arm, on) in [("png", true), ("no_png", false)] {
                    let mut s = cfg.sampler.clone();
                    s.png.enabled = on;
                    let psnr: f64 = clips
                        .iter()
                        .map(|&i| ws.i2v_psnr(p, i, &s, seed))
                        .sum::<Result<f64>>()?
                        / clips.len() as f64;
                    push("i2v_psnr", arm, seed, psnr);
                    push(
                        "identity",
                        arm,
                        seed,
                        ws.identity_score(p, &clips, &s, seed)?,
                    );
                    push(
                        "sync",
                        arm,
                        seed,
                        ws.sync_score(p, &cfg.phda, &clips, &s, seed)?,
                    );
                }
            }
            AblationRow::NoLongVideoCfg => {
                let p = base.as_ref().unwrap();
                let case = ws.long_case(eval.long_frames, seed)?;
                for (arm, on) in [("long_video_cfg", true), ("no_long_video_cfg", false)] {
                    push(
                        "seam",
                        arm,
                        seed,
                        ws.seam_score(p, &case, &cfg.sampler, on, seed)?,
                    );
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of seeds on which `better(a, b)` holds for arms `a` and `b` of
/// `metric`, paired by seed.
pub fn sign_test(
    records: &[ResultRecord],
    metric: &str,
    a: &str,
    b: &str,
    better: impl Fn(f64, f64) -> bool,
) -> (usize, usize) {
    let value = |arm: &str, seed: u64| {
        records
            .iter()
            .find(|r| r.metric == metric && r.arm == arm && r.seed == seed)
            .map(|r| r.value)
    };
    let mut seeds: Vec<u64> = records
        .iter()
        .filter(|r| r.metric == metric)
        .map(|r| r.seed)
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut wins = 0;
    let mut total = 0;
    for s in seeds {
        if let (Some(x), Some(y)) = (value(a, s), value(b, s)) {
            total += 1;
            if better(x, y) {
                wins += 1;
            }
        }
    }
    (wins, total)
}

/// One-sided binomial sign-test p-value of `wins` out of `n` under a fair
/// coin.
pub fn sign_test_p_value(wins: usize, n: usize) -> f64 {
    let choose = |n: usize, k: usize| -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    };
    (wins..=n).map(|k| choose(n, k)).sum::<f64>() / 2f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_names_round_trip() {
        for r in AblationRow::ALL {
            assert_eq!(r.name().parse::<AblationRow>().unwrap(), r);
        }
        assert!("bogus".parse::<AblationRow>().is_err());
    }

    #[test]
    fn sign_test_counts_pairs() {
        let rec = |arm: &str, seed: u64, value: f64| ResultRecord {
            metric: "seam".into(),
            arm: arm.into(),
            seed,
            value,
        };
        let r = vec![
            rec("a", 0, 1.0),
            rec("b", 0, 2.0),
            rec("a", 1, 3.0),
            rec("b", 1, 2.0),
            rec("a", 2, 0.5),
        ];
        assert_eq!(sign_test(&r, "seam", "a", "b", |x, y| x < y), (1, 2));
        assert!((sign_test_p_value(5, 5) - 1.0 / 32.0).abs() < 1e-15);
        assert!((sign_test_p_value(4, 5) - 6.0 / 32.0).abs() < 1e-15);
        assert_eq!(sign_test_p_value(0, 3), 1.0);
    }
}
