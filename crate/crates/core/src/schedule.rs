//! Interleaved JAVG / TTS-only step plan, staged curriculum and cosine
//! learning-rate curve.

use std::fmt;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::StepKind;
use crate::params::{GradMap, ParamError, ParamGroup};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("JAVG ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("step {step} is outside a schedule of {total} steps")]
    OutOfRange { step: usize, total: usize },
    #[error("plan needs at least one stage")]
    NoStages,
    #[error("plan needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("invalid stage {stage}: {reason}")]
    InvalidStage { stage: StageName, reason: String },
    #[error("cross-pair stage {cross} is placed before in-pair stage {in_pair}")]
    CurriculumOrder { cross: StageName, in_pair: StageName },
    #[error("invalid optimizer config: {0}")]
    InvalidOptim(String),
    #[error("unknown parameter group in `{0}`")]
    UnknownGroup(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Stage1SingleSubject,
    Stage2MultiSubject,
    Stage3CrossPair,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Stage1SingleSubject => "stage1_single_subject",
            StageName::Stage2MultiSubject => "stage2_multi_subject",
            StageName::Stage3CrossPair => "stage3_cross_pair",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRegime {
    /// References cut from the target clip itself.
    InPair,
    /// References from other clips of the same identity.
    CrossPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: StageName,
    pub steps: usize,
    pub javg_ratio: f64,
    pub javg_batch: usize,
    pub tts_batch: usize,
    pub data_regime: DataRegime,
}

impl StageConfig {
    /// 20K steps at 1:1 interleaving, then 10K joint-only multi-subject
    /// steps, then 10K joint-only cross-pair steps.
    pub fn default_table() -> Vec<StageConfig> {
        vec![
            StageConfig {
                name: StageName::Stage1SingleSubject,
                steps: 20_000,
                javg_ratio: 0.5,
                javg_batch: 64,
                tts_batch: 1024,
                data_regime: DataRegime::InPair,
            },
            StageConfig {
                name: StageName::Stage2MultiSubject,
                steps: 10_000,
                javg_ratio: 1.0,
                javg_batch: 64,
                tts_batch: 1024,
                data_regime: DataRegime::InPair,
            },
            StageConfig {
                name: StageName::Stage3CrossPair,
                steps: 10_000,
                javg_ratio: 1.0,
                javg_batch: 64,
                tts_batch: 1024,
                data_regime: DataRegime::CrossPair,
            },
        ]
    }

    /// Divide the step count by `divisor`, rounding up so no stage vanishes.
    pub fn scaled(&self, divisor: usize) -> StageConfig {
        StageConfig {
            steps: self.steps.div_ceil(divisor.max(1)),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr_init: f64,
    pub lr_final: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Restart the cosine curve at every stage boundary instead of running
    /// one curve over the whole plan.
    #[serde(default)]
    pub reset_per_stage: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            lr_init: 1e-4,
            lr_final: 1e-5,
            schedule: LrSchedule::Cosine,
            reset_per_stage: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: String| Err(ScheduleError::InvalidOptim(m));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name}={b} must lie in (0, 1)"));
            }
        }
        if !(self.lr_final > 0.0 && self.lr_final < self.lr_init && self.lr_init.is_finite()) {
            return bad(format!(
                "need 0 < lr_final ({}) < lr_init ({})",
                self.lr_final, self.lr_init
            ));
        }
        // Written so NaN is rejected too.
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        Ok(())
    }
}

fn ratio_of(r: f64) -> Result<Ratio<i64>, ScheduleError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(ScheduleError::InvalidRatio(r));
    }
    Ratio::approximate_float(r).ok_or(ScheduleError::InvalidRatio(r))
}

/// `ceil(i * p / q)` in exact integer arithmetic.
fn ceil_mul(i: usize, r: &Ratio<i64>) -> i128 {
    let (p, q) = (*r.numer() as i128, *r.denom() as i128);
    (i as i128 * p + q - 1).div_euclid(q)
}

fn kind_for(i: usize, r: &Ratio<i64>) -> StepKind {
    if ceil_mul(i + 1, r) > ceil_mul(i, r) {
        StepKind::Javg
    } else {
        StepKind::TtsOnly
    }
}

/// Deterministic Bresenham interleaving: step `i` is JAVG iff
/// `ceil((i + 1) r) > ceil(i r)`. The first step of any stage with `r > 0`
/// is JAVG, and any window of `n` steps with `n r` integral holds exactly
/// `n r` JAVG steps. `r` is taken as the nearest small rational.
pub fn step_kind(step_index: usize, r: f64) -> Result<StepKind, ScheduleError> {
    Ok(kind_for(step_index, &ratio_of(r)?))
}

/// Cosine decay from `lr_init` at step 0 to `lr_final` at `total - 1`.
pub fn lr_at(step: usize, total: usize, optim: &OptimConfig) -> Result<f64, ScheduleError> {
    if step >= total {
        return Err(ScheduleError::OutOfRange { step, total });
    }
    if total == 1 {
        return Ok(optim.lr_init);
    }
    let progress = step as f64 / (total - 1) as f64;
    let weight = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    // Convex form so both endpoints are reproduced exactly.
    Ok(optim.lr_init * weight + optim.lr_final * (1.0 - weight))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedStep {
    pub step: usize,
    pub stage: StageName,
    /// Index within the stage.
    pub stage_step: usize,
    pub kind: StepKind,
    /// Learning rate of the scheduled (fusion and speech-gate) groups.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub steps: Vec<PlannedStep>,
    pub stages: Vec<StageConfig>,
    pub optim: OptimConfig,
}

impl StepPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn stage_steps(&self, stage: StageName) -> impl Iterator<Item = &PlannedStep> {
        self.steps.iter().filter(move |s| s.stage == stage)
    }

    pub fn stage_config(&self, stage: StageName) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.name == stage)
    }

    /// `step,stage,kind,lr` with one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,stage,kind,lr\n");
        for s in &self.steps {
            let kind = match s.kind {
                StepKind::Javg => "JAVG",
                StepKind::TtsOnly => "TTS_ONLY",
            };
            out.push_str(&format!("{},{},{},{}\n", s.step, s.stage, kind, s.lr));
        }
        out
    }
}

pub fn build_plan(stages: &[StageConfig], optim: &OptimConfig) -> Result<StepPlan, ScheduleError> {
    if stages.is_empty() {
        return Err(ScheduleError::NoStages);
    }
    optim.validate()?;
    let mut last_in_pair_after_cross = None;
    let mut first_cross = None;
    for stage in stages {
        if stage.steps == 0 || stage.javg_batch == 0 || stage.tts_batch == 0 {
            return Err(ScheduleError::InvalidStage {
                stage: stage.name,
                reason: "steps and batch sizes must be positive".into(),
            });
        }
        match stage.data_regime {
            DataRegime::CrossPair => {
                first_cross.get_or_insert(stage.name);
            }
            DataRegime::InPair if first_cross.is_some() => last_in_pair_after_cross = Some(stage.name),
            DataRegime::InPair => {}
        }
    }
    if let (Some(cross), Some(in_pair)) = (first_cross, last_in_pair_after_cross) {
        return Err(ScheduleError::CurriculumOrder { cross, in_pair });
    }
    let total: usize = stages.iter().map(|s| s.steps).sum();
    if total < 2 {
        return Err(ScheduleError::TooFewSteps(total));
    }

    let mut steps = Vec::with_capacity(total);
    for stage in stages {
        let r = ratio_of(stage.javg_ratio)?;
        for i in 0..stage.steps {
            let step = steps.len();
            let lr = if optim.reset_per_stage {
                lr_at(i, stage.steps, optim)?
            } else {
                lr_at(step, total, optim)?
            };
            steps.push(PlannedStep {
                step,
                stage: stage.name,
                stage_step: i,
                kind: kind_for(i, &r),
                lr,
            });
        }
    }
    Ok(StepPlan {
        steps,
        stages: stages.to_vec(),
        optim: optim.clone(),
    })
}

/// Groups frozen during TTS-only steps.
pub const TTS_FROZEN_GROUPS: [ParamGroup; 2] = [ParamGroup::Video, ParamGroup::Cross];

/// Drop gradients of the video tower and the cross-modal coupling on
/// TTS-only steps. JAVG steps pass through unchanged.
pub fn gate_gradients(grads: GradMap, kind: StepKind) -> Result<GradMap, ScheduleError> {
    let mut groups = Vec::with_capacity(grads.len());
    for name in grads.names() {
        match ParamGroup::of(name) {
            Ok(g) => groups.push(g),
            Err(ParamError::UnknownGroup(_)) => return Err(ScheduleError::UnknownGroup(name.to_string())),
            Err(e) => return Err(ScheduleError::Config(e.to_string())),
        }
    }
    if kind == StepKind::Javg {
        return Ok(grads);
    }
    let mut out = grads;
    out.retain(|name, _| ParamGroup::of(name).is_ok_and(|g| !TTS_FROZEN_GROUPS.contains(&g)));
    Ok(out)
}

/// Stage table plus optimizer settings, as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            stages: StageConfig::default_table(),
            optim: OptimConfig::default(),
        }
    }
}

impl ScheduleConfig {
    /// Parse JSON, or TOML when `toml` is set.
    pub fn parse(text: &str, toml: bool) -> Result<Self, ScheduleError> {
        if toml {
            ::toml::from_str(text).map_err(|e| ScheduleError::Config(e.to_string()))
        } else {
            serde_json::from_str(text).map_err(|e| ScheduleError::Config(e.to_string()))
        }
    }

    /// Read a `.json` or `.toml` file.
    pub fn load(path: &Path) -> Result<Self, ScheduleError> {
        let text = std::fs::read_to_string(path)?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        Self::parse(&text, is_toml)
    }

    pub fn scaled(&self, divisor: usize) -> Self {
        Self {
            stages: self.stages.iter().map(|s| s.scaled(divisor)).collect(),
            optim: self.optim.clone(),
        }
    }

    pub fn build(&self) -> Result<StepPlan, ScheduleError> {
        build_plan(&self.stages, &self.optim)
    }
}
