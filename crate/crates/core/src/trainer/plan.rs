//! Staged training plans.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::objective::EvalGrid;
use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::task_masking::TaskKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeight {
    pub kind: TaskKind,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub tasks: Vec<TaskWeight>,
    pub sft_steps: usize,
    #[serde(default)]
    pub ndpo_steps: usize,
    /// Weight kept by the soup at each merge.
    #[serde(default = "default_decay")]
    pub ema_decay: f64,
    pub lr: f64,
}

fn default_decay() -> f64 {
    0.5
}

impl Stage {
    pub fn uniform(kinds: &[TaskKind], sft_steps: usize, lr: f64) -> Self {
        let p = 1.0 / kinds.len() as f64;
        Stage {
            tasks: kinds
                .iter()
                .map(|&kind| TaskWeight { kind, prob: p })
                .collect(),
            sft_steps,
            ndpo_steps: 0,
            ema_decay: default_decay(),
            lr,
        }
    }

    pub fn kinds(&self) -> BTreeSet<TaskKind> {
        self.tasks.iter().map(|t| t.kind).collect()
    }
}

/// How tasks enter the staged plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSchedule {
    /// {I2V, FLF2V}, then T2V, then lip sync.
    HardToEasy,
    /// The reverse introduction order.
    EasyToHard,
    /// Every task in every stage.
    Uniform,
    /// One task per stage in strictly decreasing mask ratio.
    ByMaskRatio,
}

impl TaskSchedule {
    pub fn introductions(self) -> Vec<Vec<TaskKind>> {
        use TaskKind::*;
        match self {
            TaskSchedule::HardToEasy => vec![vec![I2V, Flf2V], vec![T2V], vec![LipSync]],
            TaskSchedule::EasyToHard => vec![vec![LipSync], vec![T2V], vec![I2V, Flf2V]],
            TaskSchedule::Uniform => vec![TaskKind::ALL.to_vec(), vec![], vec![]],
            TaskSchedule::ByMaskRatio => vec![vec![T2V], vec![I2V], vec![Flf2V], vec![LipSync]],
        }
    }
}

/// Preference objective used in the negative phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Preference {
    Negative,
    Paired { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub stages: Vec<Stage>,
    pub seed: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "yes")]
    pub ema: bool,
    #[serde(default = "default_ema_every")]
    pub ema_every: usize,
    #[serde(default = "default_lambda")]
    pub ndpo_lambda: f64,
    #[serde(default = "default_guard")]
    pub guard_threshold: f64,
    /// Positive examples scored by the guard.
    #[serde(default = "default_guard_examples")]
    pub guard_examples: usize,
    #[serde(default = "default_negatives")]
    pub negatives_per_stage: usize,
    #[serde(default = "default_ndpo_batch")]
    pub ndpo_batch: usize,
    /// Probability of replacing text (and, independently, audio) with the
    /// null condition.
    #[serde(default = "default_dropout")]
    pub cond_dropout: f64,
    #[serde(default)]
    pub full_region_loss: bool,
    #[serde(default = "default_preference")]
    pub preference: Preference,
    #[serde(default)]
    pub eval_grid: EvalGrid,
}

fn yes() -> bool {
    true
}
fn default_ema_every() -> usize {
    100
}
fn default_lambda() -> f64 {
    1.0
}
fn default_guard() -> f64 {
    0.1
}
fn default_guard_examples() -> usize {
    8
}
fn default_negatives() -> usize {
    16
}
fn default_ndpo_batch() -> usize {
    8
}
fn default_dropout() -> f64 {
    0.1
}
fn default_preference() -> Preference {
    Preference::Negative
}

/// Per-stage learning rates of the default plan.
pub const DEFAULT_STAGE_LR: [f64; 3] = [2e-3, 2e-3, 4e-4];

impl Default for TrainPlan {
    fn default() -> Self {
        let mut plan = Self::with_schedule(
            TaskSchedule::HardToEasy,
            &[700, 600, 700],
            DEFAULT_STAGE_LR[0],
            0,
        );
        for (stage, lr) in plan.stages.iter_mut().zip(DEFAULT_STAGE_LR) {
            stage.lr = lr;
        }
        plan.batch_size = 16;
        plan
    }
}

impl TrainPlan {
    /// A plan whose stage `i` adds the tasks introduced at `i` and samples
    /// all active tasks uniformly.
    pub fn with_schedule(schedule: TaskSchedule, steps: &[usize], lr: f64, seed: u64) -> Self {
        let intro = schedule.introductions();
        let mut active: Vec<TaskKind> = Vec::new();
        let mut stages = Vec::new();
        for (i, &n) in steps.iter().enumerate() {
            if let Some(new) = intro.get(i) {
                active.extend(new.iter().copied());
            }
            stages.push(Stage::uniform(&active, n, lr));
        }
        TrainPlan {
            stages,
            seed,
            batch_size: 8,
            optimizer: AdamWConfig {
                lr,
                ..Default::default()
            },
            ema: true,
            ema_every: default_ema_every(),
            ndpo_lambda: default_lambda(),
            guard_threshold: default_guard(),
            guard_examples: default_guard_examples(),
            negatives_per_stage: default_negatives(),
            ndpo_batch: default_ndpo_batch(),
            cond_dropout: default_dropout(),
            full_region_loss: false,
            preference: default_preference(),
            eval_grid: EvalGrid::default(),
        }
    }

    pub fn total_sft_steps(&self) -> usize {
        self.stages.iter().map(|s| s.sft_steps).sum()
    }

    pub fn set_ndpo_steps(&mut self, n: usize) {
        self.stages.iter_mut().for_each(|s| s.ndpo_steps = n);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("trainer: {m}")));
        if self.stages.is_empty() {
            return bad("plan has no stages".into());
        }
        if self.batch_size == 0 || self.ndpo_batch == 0 || self.ema_every == 0 {
            return bad("batch sizes and ema_every must be positive".into());
        }
        if self.ndpo_lambda.is_nan() || self.ndpo_lambda <= 0.0 {
            return bad(format!(
                "ndpo_lambda must be positive, got {}",
                self.ndpo_lambda
            ));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!("cond_dropout {} outside [0, 1]", self.cond_dropout));
        }
        let mut prev: BTreeSet<TaskKind> = BTreeSet::new();
        for (i, s) in self.stages.iter().enumerate() {
            if s.tasks.is_empty() || s.tasks.iter().any(|t| t.prob.is_nan() || t.prob <= 0.0) {
                return bad(format!("stage {i} needs tasks with positive probability"));
            }
            if !(0.0..=1.0).contains(&s.ema_decay) {
                return bad(format!(
                    "stage {i}: ema_decay {} outside [0, 1]",
                    s.ema_decay
                ));
            }
            if s.lr.is_nan() || s.lr < 0.0 {
                return bad(format!("stage {i}: negative learning rate"));
            }
            let kinds = s.kinds();
            if !prev.is_subset(&kinds) {
                return bad(format!("stage {i} drops a task from an earlier stage"));
            }
            prev = kinds;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task_masking::{build_task_mask, Region};

    fn ratio(kind: TaskKind) -> f64 {
        let region = (kind == TaskKind::LipSync).then(|| Region::new(10, 4, 4, 8));
        build_task_mask(kind, (4, 16, 16), region).unwrap().ratio()
    }

    #[test]
    fn default_plan_order() {
        let p = TrainPlan::default();
        p.validate().unwrap();
        use TaskKind::*;
        let want = [
            vec![I2V, Flf2V],
            vec![T2V, I2V, Flf2V],
            TaskKind::ALL.to_vec(),
        ];
        for (s, w) in p.stages.iter().zip(want) {
            assert_eq!(s.kinds(), w.into_iter().collect());
        }
        // lip sync, the lowest-ratio task, enters last
        assert!(TaskKind::ALL.iter().all(|&k| ratio(LipSync) <= ratio(k)));
    }

    #[test]
    fn ratio_schedule_is_strictly_decreasing() {
        let intro = TaskSchedule::ByMaskRatio.introductions();
        let r: Vec<f64> = intro.iter().map(|s| ratio(s[0])).collect();
        assert!(r.windows(2).all(|w| w[0] > w[1]), "{r:?}");
    }

    #[test]
    fn alternative_schedules_are_valid() {
        for s in [
            TaskSchedule::EasyToHard,
            TaskSchedule::Uniform,
            TaskSchedule::ByMaskRatio,
        ] {
            TrainPlan::with_schedule(s, &[10, 10, 10, 10], 1e-3, 1)
                .validate()
                .unwrap();
        }
        let u = TrainPlan::with_schedule(TaskSchedule::Uniform, &[5, 5], 1e-3, 1);
        assert!(u.stages.iter().all(|s| s.tasks.len() == 4));
    }

    #[test]
    fn validation_rejects_shrinking_task_sets() {
        let mut p = TrainPlan::default();
        p.stages.swap(0, 2);
        assert!(p.validate().is_err());
        let p = TrainPlan {
            ndpo_lambda: 0.0,
            ..TrainPlan::default()
        };
        assert!(p.validate().is_err());
    }
}
