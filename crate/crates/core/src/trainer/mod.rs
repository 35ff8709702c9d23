//! Staged multi-task training: supervised flow matching interleaved with
//! negative-preference phases, and exponential-moving-average task souping.
//!
//! Each stage runs its supervised steps, mines negatives from a frozen
//! snapshot, runs the negative phase under a positive-loss guard, and then
//! merges the stage's parameters into the soup and restarts from the soup.

mod checkpoint;
mod objective;
mod optim;
mod plan;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, hex, load_checkpoint, read_metrics_jsonl,
    save_checkpoint, write_metrics_jsonl, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use objective::{
    average, example_loss, example_rng, grid_discrepancy, loss_and_grad, mean_flow_loss,
    mean_probability_proxy, ndpo_loss, ndpo_loss_derivative, ndpo_loss_value, paired_dpo_loss,
    probability_proxy, standard_noise, EvalGrid, Example, LossGrad, NegativeSample,
};
pub use optim::{AdamW, AdamWConfig};
pub use plan::{Preference, Stage, TaskSchedule, TaskWeight, TrainPlan};

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{sample_timestep, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::modal_features::{ModalBundle, TextFeatures};
use crate::nn::ParamStore;
use crate::phda::PhdaConfig;
use crate::task_masking::{build_task_mask, Region, TaskKind, TaskMask};
use crate::tensor::Tensor;

/// One clean training clip in latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSample {
    pub x0: Tensor,
    pub bundle: ModalBundle,
    /// Mouth rectangle on the latent grid.
    pub mouth: Region,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub samples: Vec<TrainSample>,
    /// Text features substituted when the prompt is dropped.
    pub null_text: TextFeatures,
}

pub fn task_mask_for(kind: TaskKind, cfg: &BackboneConfig, mouth: Region) -> Result<TaskMask> {
    let region = (kind == TaskKind::LipSync).then_some(mouth);
    build_task_mask(kind, (cfg.frames, cfg.height, cfg.width), region)
}

/// Copy of `bundle` with the text replaced by `null_text` and/or the audio
/// segments zeroed.
pub fn drop_conditions(
    bundle: &ModalBundle,
    null_text: &TextFeatures,
    text: bool,
    audio: bool,
) -> ModalBundle {
    let mut b = bundle.clone();
    if text {
        b.text = null_text.clone();
    }
    if audio {
        b.audio.segments = Tensor::zeros(b.audio.segments.shape());
    }
    b
}

/// Shared, read-only inputs of a supervised step.
#[derive(Clone, Copy, Debug)]
pub struct SftContext<'a> {
    pub model: &'a Backbone,
    pub phda: &'a PhdaConfig,
    pub null_text: &'a TextFeatures,
    pub cond_dropout: f64,
    pub full_region: bool,
}

/// One optimizer step on the flow-matching loss of `task` over `batch`.
/// Returns the batch loss at the pre-step parameters.
#[allow(clippy::too_many_arguments)]
pub fn sft_step(
    ctx: SftContext<'_>,
    params: &mut ParamStore,
    opt: &mut AdamW,
    opt_cfg: &AdamWConfig,
    lr: f64,
    batch: &[&TrainSample],
    task: TaskKind,
    step_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let cfg = ctx.model.config();
    let snapshot: &ParamStore = params;
    let items = exec::try_map_range(batch.len(), |i| {
        let s = batch[i];
        let mut rng = example_rng(step_seed, i);
        let tau = sample_timestep(&mut rng);
        let eps = standard_noise(s.x0.shape(), &mut rng);
        let drop_text = rng.random::<f64>() < ctx.cond_dropout;
        let drop_audio = rng.random::<f64>() < ctx.cond_dropout;
        let bundle = drop_conditions(&s.bundle, ctx.null_text, drop_text, drop_audio);
        let mask = task_mask_for(task, cfg, s.mouth)?;
        let ex = Example {
            x0: &s.x0,
            bundle: &bundle,
            mask: &mask,
        };
        loss_and_grad(snapshot, |g, p| {
            example_loss(g, p, ctx.model, ex, &eps, tau, ctx.phda, ctx.full_region)
        })
    })?;
    let lg = average(items)?;
    if !lg.loss.is_finite() {
        return Err(Error::NonFinite(format!("{task} loss {}", lg.loss)));
    }
    opt.update(params, &lg.grads, opt_cfg, lr)?;
    Ok(lg.loss)
}

/// `beta * soup + (1 - beta) * task`, elementwise.
pub fn ema_soup(soup: &ParamStore, task: &ParamStore, beta: f64) -> Result<ParamStore> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("soup decay {beta} outside [0, 1]")));
    }
    if soup.names() != task.names() {
        return Err(Error::shape(
            "soup and task parameters have different layouts",
        ));
    }
    let mut out = soup.clone();
    for (o, t) in out.values_mut().iter_mut().zip(task.values()) {
        o.check_same_shape(t, "soup")?;
        if beta == 1.0 {
            continue;
        }
        for (a, &b) in o.data_mut().iter_mut().zip(t.data()) {
            *a = beta * *a + (1.0 - beta) * b;
        }
    }
    Ok(out)
}

/// A generated clip awaiting the oracle.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub latent: Tensor,
    pub bundle: ModalBundle,
    pub mask: TaskMask,
    pub positive: Option<Tensor>,
}

/// Produces the `index`-th clip from frozen parameters.
pub trait ClipGenerator: Sync {
    fn generate(&self, params: &ParamStore, index: usize) -> Result<Candidate>;
}

/// Tags a latent clip with an issue label, or passes it.
pub trait IssueOracle: Sync {
    fn tag(&self, latent: &Tensor) -> Option<String>;
}

/// Generates `n` clips from the frozen `params` and keeps those the oracle
/// tags. Indices start at `offset`.
pub fn mine_negatives(
    params: &ParamStore,
    generator: &dyn ClipGenerator,
    n: usize,
    offset: usize,
    oracle: &dyn IssueOracle,
) -> Result<Vec<NegativeSample>> {
    let cands = exec::try_map_range(n, |i| generator.generate(params, offset + i))?;
    Ok(cands
        .into_iter()
        .filter_map(|c| {
            oracle.tag(&c.latent).map(|tag| NegativeSample {
                latent: c.latent,
                bundle: c.bundle,
                mask: c.mask,
                tag,
                positive: c.positive,
            })
        })
        .collect())
}

/// Most frequent tag; ties go to the lexicographically smallest.
pub fn dominant_tag(negatives: &[NegativeSample]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for n in negatives {
        *counts.entry(&n.tag).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map(|(t, _)| t.to_string())
}

/// Supplies the negative set for a stage's preference phase.
pub trait NegativeSource {
    fn negatives(&self, params: &ParamStore, stage: usize, n: usize)
        -> Result<Vec<NegativeSample>>;
}

/// No preference phase data.
pub struct NoNegatives;

impl NegativeSource for NoNegatives {
    fn negatives(&self, _: &ParamStore, _: usize, _: usize) -> Result<Vec<NegativeSample>> {
        Ok(Vec::new())
    }
}

/// Mines with a generator and oracle, then keeps the stage's dominant issue.
pub struct Mining<'a> {
    pub generator: &'a dyn ClipGenerator,
    pub oracle: &'a dyn IssueOracle,
}

impl NegativeSource for Mining<'_> {
    fn negatives(
        &self,
        params: &ParamStore,
        stage: usize,
        n: usize,
    ) -> Result<Vec<NegativeSample>> {
        let all = mine_negatives(params, self.generator, n, stage * n, self.oracle)?;
        Ok(match dominant_tag(&all) {
            Some(t) => all.into_iter().filter(|s| s.tag == t).collect(),
            None => all,
        })
    }
}

/// A fixed, already mined negative set reused for every stage.
pub struct FixedNegatives(pub Vec<NegativeSample>);

impl NegativeSource for FixedNegatives {
    fn negatives(&self, _: &ParamStore, _: usize, n: usize) -> Result<Vec<NegativeSample>> {
        Ok(self.0.iter().take(n).cloned().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sft,
    Ndpo,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: usize,
    pub phase: Phase,
    pub step_in_phase: usize,
    pub global_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdpoPhaseState {
    pub negatives: Vec<NegativeSample>,
    /// Guard baseline: positive flow loss at phase start.
    pub guard_start: f64,
    pub aborted: bool,
    /// Frozen phase-start parameters, kept for the paired baseline only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ParamStore>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub kind: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub params: ParamStore,
    pub opt: AdamW,
    pub soup: Option<ParamStore>,
    pub rng: ChaCha8Rng,
    pub progress: Progress,
    pub ndpo: Option<NdpoPhaseState>,
    pub log: Vec<MetricRecord>,
}

impl TrainerState {
    pub fn new(params: ParamStore, seed: u64) -> Self {
        TrainerState {
            opt: AdamW::new(&params),
            params,
            soup: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            progress: Progress {
                stage: 0,
                phase: Phase::Sft,
                step_in_phase: 0,
                global_step: 0,
            },
            ndpo: None,
            log: Vec::new(),
        }
    }

    /// Values of `kind` records, in order.
    pub fn series(&self, kind: &str) -> Vec<f64> {
        self.log
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.value)
            .collect()
    }
}

/// The staged training loop.
pub struct Trainer<'a> {
    pub plan: TrainPlan,
    pub model: &'a Backbone,
    pub data: &'a TrainData,
    pub phda: PhdaConfig,
    pub state: TrainerState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        plan: TrainPlan,
        model: &'a Backbone,
        params: ParamStore,
        data: &'a TrainData,
        phda: PhdaConfig,
    ) -> Result<Self> {
        plan.validate()?;
        phda.validate()?;
        if data.samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        let state = TrainerState::new(params, plan.seed);
        Ok(Trainer {
            plan,
            model,
            data,
            phda,
            state,
        })
    }

    pub fn resume(
        plan: TrainPlan,
        model: &'a Backbone,
        data: &'a TrainData,
        phda: PhdaConfig,
        state: TrainerState,
    ) -> Result<Self> {
        plan.validate()?;
        Ok(Trainer {
            plan,
            model,
            data,
            phda,
            state,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.progress.phase == Phase::Done
    }

    fn ctx(&self) -> SftContext<'_> {
        SftContext {
            model: self.model,
            phda: &self.phda,
            null_text: &self.data.null_text,
            cond_dropout: self.plan.cond_dropout,
            full_region: self.plan.full_region_loss,
        }
    }

    fn record(&mut self, task: Option<TaskKind>, kind: &str, value: f64) {
        let p = &self.state.progress;
        self.state.log.push(MetricRecord {
            step: p.global_step,
            stage: p.stage,
            task: task.map(|t| t.name().to_string()),
            kind: kind.to_string(),
            value,
        });
    }

    fn pick_task(&mut self) -> TaskKind {
        let stage = &self.plan.stages[self.state.progress.stage];
        let total: f64 = stage.tasks.iter().map(|t| t.prob).sum();
        let mut u = self.state.rng.random::<f64>() * total;
        for t in &stage.tasks {
            if u < t.prob {
                return t.kind;
            }
            u -= t.prob;
        }
        stage.tasks.last().unwrap().kind
    }

    /// Positive examples scored by the guard: the first training clips, with
    /// tasks cycling through the current stage's set.
    pub fn guard_examples(&self) -> Result<Vec<(usize, TaskMask)>> {
        let stage = &self.plan.stages[self.state.progress.stage];
        let n = self.plan.guard_examples.min(self.data.samples.len()).max(1);
        (0..n)
            .map(|i| {
                let kind = stage.tasks[i % stage.tasks.len()].kind;
                Ok((
                    i,
                    task_mask_for(kind, self.model.config(), self.data.samples[i].mouth)?,
                ))
            })
            .collect()
    }

    /// Positive-set flow loss on the fixed evaluation grid.
    pub fn positive_loss(&self, params: &ParamStore) -> Result<f64> {
        let ex = self.guard_examples()?;
        let examples: Vec<Example<'_>> = ex
            .iter()
            .map(|(i, m)| Example {
                x0: &self.data.samples[*i].x0,
                bundle: &self.data.samples[*i].bundle,
                mask: m,
            })
            .collect();
        mean_flow_loss(
            self.model,
            params,
            &examples,
            &self.plan.eval_grid,
            &self.phda,
        )
    }

    fn sft_once(&mut self) -> Result<()> {
        let step_seed = self.state.rng.next_u64();
        let task = self.pick_task();
        let n = self.data.samples.len();
        let idx: Vec<usize> = (0..self.plan.batch_size)
            .map(|_| self.state.rng.random_range(0..n))
            .collect();
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &self.data.samples[i]).collect();
        let lr = self.plan.stages[self.state.progress.stage].lr;
        let ctx = SftContext {
            model: self.model,
            phda: &self.phda,
            null_text: &self.data.null_text,
            cond_dropout: self.plan.cond_dropout,
            full_region: self.plan.full_region_loss,
        };
        let st = &mut self.state;
        let loss = sft_step(
            ctx,
            &mut st.params,
            &mut st.opt,
            &self.plan.optimizer,
            lr,
            &batch,
            task,
            step_seed,
        )?;
        self.record(Some(task), "sft_loss", loss);
        let p = &mut self.state.progress;
        p.step_in_phase += 1;
        p.global_step += 1;
        if self.plan.ema && p.step_in_phase.is_multiple_of(self.plan.ema_every) {
            self.merge_soup(false)?;
        }
        Ok(())
    }

    fn merge_soup(&mut self, restart: bool) -> Result<()> {
        let beta = self.plan.stages[self.state.progress.stage].ema_decay;
        let Some(soup) = &self.state.soup else {
            return Ok(());
        };
        let merged = ema_soup(soup, &self.state.params, beta)?;
        if restart {
            self.state.params = merged.clone();
        }
        self.state.soup = Some(merged);
        self.record(None, "ema_merge", beta);
        Ok(())
    }

    fn begin_ndpo(&mut self, source: &dyn NegativeSource) -> Result<()> {
        let stage = self.state.progress.stage;
        let steps = self.plan.stages[stage].ndpo_steps;
        self.state.progress.phase = Phase::Ndpo;
        self.state.progress.step_in_phase = 0;
        if steps == 0 {
            self.state.ndpo = None;
            return Ok(());
        }
        let negatives =
            source.negatives(&self.state.params, stage, self.plan.negatives_per_stage)?;
        self.record(None, "mined", negatives.len() as f64);
        let guard_start = self.positive_loss(&self.state.params)?;
        self.record(None, "guard_start", guard_start);
        let reference = matches!(self.plan.preference, Preference::Paired { .. })
            .then(|| self.state.params.clone());
        self.state.ndpo = Some(NdpoPhaseState {
            negatives,
            guard_start,
            aborted: false,
            reference,
        });
        Ok(())
    }

    fn ndpo_once(&mut self) -> Result<()> {
        let step_seed = self.state.rng.next_u64();
        let ph = self.state.ndpo.as_ref().expect("negative phase state");
        let n = ph.negatives.len();
        let batch: Vec<NegativeSample> = if n <= self.plan.ndpo_batch {
            ph.negatives.clone()
        } else {
            (0..self.plan.ndpo_batch)
                .map(|_| ph.negatives[self.state.rng.random_range(0..n)].clone())
                .collect()
        };
        let positives_used = match self.plan.preference {
            Preference::Negative => 0,
            Preference::Paired { .. } => batch.len(),
        };
        let lg = match self.plan.preference {
            Preference::Negative => ndpo_loss(
                self.model,
                &self.state.params,
                &batch,
                self.plan.ndpo_lambda,
                &self.phda,
                step_seed,
            )?,
            Preference::Paired { beta } => {
                let reference = ph.reference.as_ref().expect("paired reference");
                paired_dpo_loss(
                    self.model,
                    &self.state.params,
                    reference,
                    &batch,
                    beta,
                    &self.phda,
                    step_seed,
                )?
            }
        };
        let guard_start = ph.guard_start;
        let lr = self.plan.stages[self.state.progress.stage].lr;
        let backup = (self.state.params.clone(), self.state.opt.clone());
        self.state
            .opt
            .update(&mut self.state.params, &lg.grads, &self.plan.optimizer, lr)?;
        self.record(None, "ndpo_loss", lg.loss);
        self.record(None, "ndpo_positive_grad_examples", positives_used as f64);
        let pos = self.positive_loss(&self.state.params)?;
        self.record(None, "guard_positive_loss", pos);
        let p = &mut self.state.progress;
        p.step_in_phase += 1;
        p.global_step += 1;
        if pos > guard_start * (1.0 + self.plan.guard_threshold) {
            // undo the violating step and stop the phase
            (self.state.params, self.state.opt) = backup;
            self.state.ndpo.as_mut().unwrap().aborted = true;
            self.record(None, "guard_abort", pos);
        }
        Ok(())
    }

    fn end_stage(&mut self) -> Result<()> {
        if self.plan.ema {
            if self.state.soup.is_none() {
                self.state.soup = Some(self.state.params.clone());
                self.record(None, "soup_init", 1.0);
            } else {
                self.merge_soup(true)?;
            }
        }
        self.state.ndpo = None;
        let p = &mut self.state.progress;
        p.stage += 1;
        p.step_in_phase = 0;
        p.phase = if p.stage == self.plan.stages.len() {
            Phase::Done
        } else {
            Phase::Sft
        };
        Ok(())
    }

    /// Advances training until done, or until `max_global_steps` optimizer
    /// steps have been taken in total.
    pub fn run(
        &mut self,
        source: &dyn NegativeSource,
        max_global_steps: Option<usize>,
    ) -> Result<()> {
        loop {
            if max_global_steps.is_some_and(|m| self.state.progress.global_step >= m) {
                return Ok(());
            }
            let stage = self.state.progress.stage;
            match self.state.progress.phase {
                Phase::Done => return Ok(()),
                Phase::Sft => {
                    if self.state.progress.step_in_phase < self.plan.stages[stage].sft_steps {
                        self.sft_once()?;
                    } else {
                        self.begin_ndpo(source)?;
                    }
                }
                Phase::Ndpo => {
                    let active = self
                        .state
                        .ndpo
                        .as_ref()
                        .is_some_and(|p| !p.aborted && !p.negatives.is_empty());
                    if active
                        && self.state.progress.step_in_phase < self.plan.stages[stage].ndpo_steps
                    {
                        self.ndpo_once()?;
                    } else {
                        self.end_stage()?;
                    }
                }
            }
        }
    }

    /// Parameters the plan designates as its result.
    pub fn final_params(&self) -> &ParamStore {
        match (&self.state.soup, self.plan.ema) {
            (Some(s), true) => s,
            _ => &self.state.params,
        }
    }

    pub fn context(&self) -> SftContext<'_> {
        self.ctx()
    }
}
