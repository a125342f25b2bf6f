//! Synthetic customization task for desk-scale training runs.
//!
//! Each clip has an identity vector `u` and a clip-specific nuisance `c`.
//! Clean latents are linear in both, and the reference latents expose `u`
//! (and, in-pair, also `c`). Denoising
//! therefore rewards reading the references. Training follows a scaled
//! version of the default curriculum with interleaved steps.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{parse_caption, CaptionError, OmniCaption};
use crate::denoiser::{DenoiserState, StepKind};
use crate::fusion::ConditionBundle;
use crate::pipeline::{ConditionInputs, FlowSample, Model, ModelConfig, PipelineError, Trainer};
use crate::positions::{assign_positions, PositionError};
use crate::schedule::{build_plan, DataRegime, OptimConfig, ScheduleError, StageConfig, StageName};
use crate::speech_gate::build_speech_mask;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Position(#[from] PositionError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid toy config: {0}")]
    Config(String),
}

pub const TOY_CAPTION: &str = "A <sub1> is tall with calm voice . A <sub2> is small , with bright voice . \
    They meet at dusk . <sub1> says <S> hello old friend <E> . <sub2> says <S> hi <E> .";

pub(crate) fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Reference and TTS sizes used to build random conditioning inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub image_grid: (usize, usize),
    pub audio_len: usize,
    pub tts_len: usize,
}

impl Default for InputShape {
    fn default() -> Self {
        Self {
            image_grid: (2, 2),
            audio_len: 2,
            tts_len: 3,
        }
    }
}

/// Gaussian embeddings (scaled by `scale`) for every group of `caption`,
/// with each subject given references of `shape`.
pub fn random_inputs(
    caption: &OmniCaption,
    d: usize,
    shape: &InputShape,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<ConditionInputs, PositionError> {
    let grids: BTreeMap<u32, (usize, usize)> = caption
        .subjects
        .iter()
        .map(|s| (s.subject_id, shape.image_grid))
        .collect();
    let audio: BTreeMap<u32, usize> = caption
        .subjects
        .iter()
        .map(|s| (s.subject_id, shape.audio_len))
        .collect();
    let tts: BTreeMap<usize, usize> = (0..caption.utterances.len()).map(|u| (u, shape.tts_len)).collect();
    let assignment = assign_positions(caption, &grids, &audio, &tts)?;
    let mut draw = |rows| normal(rng, rows, d) * scale;
    let bundle = ConditionBundle {
        c_txt: draw(caption.tokens.len()),
        c_v: draw(assignment.image_len()),
        c_a: draw(assignment.audio_len()),
        c_tts: draw(assignment.tts_len()),
        assignment,
    };
    Ok(ConditionInputs {
        bundle,
        tts_lengths: vec![shape.tts_len; caption.utterances.len()],
        mask: build_speech_mask(caption),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub steps: usize,
    pub d: usize,
    pub d_video: usize,
    pub d_audio: usize,
    pub video_len: usize,
    pub audio_len: usize,
    pub ref_len: usize,
    pub identity_dim: usize,
    pub javg_batch: usize,
    pub tts_batch: usize,
    pub eval_batch: usize,
    pub optim: OptimConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            d: 16,
            d_video: 8,
            d_audio: 8,
            video_len: 8,
            audio_len: 4,
            ref_len: 2,
            identity_dim: 4,
            javg_batch: 8,
            tts_batch: 16,
            eval_batch: 64,
            optim: OptimConfig {
                lr_init: 1e-2,
                lr_final: 1e-3,
                ..OptimConfig::default()
            },
        }
    }
}

impl ToyConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::desk(self.d, self.d_video, self.d_audio)
    }

    /// The default three-stage table with steps split 2:1:1 over `steps`.
    pub fn stages(&self) -> Vec<StageConfig> {
        let first = self.steps / 2;
        let second = self.steps / 4;
        let third = self.steps - first - second;
        StageConfig::default_table()
            .into_iter()
            .zip([first, second, third])
            .filter(|(_, n)| *n > 0)
            .map(|(s, steps)| StageConfig {
                steps,
                javg_batch: self.javg_batch,
                tts_batch: self.tts_batch,
                ..s
            })
            .collect()
    }
}

/// Fixed random maps of the synthetic task.
struct Task {
    id_to_v: Array2<f64>,
    id_to_a: Array2<f64>,
    clip_to_v: Array2<f64>,
    clip_to_a: Array2<f64>,
    ref_id_v: Array2<f64>,
    ref_id_a: Array2<f64>,
    ref_clip_v: Array2<f64>,
    ref_clip_a: Array2<f64>,
    config: ToyConfig,
}

impl Task {
    fn new(config: &ToyConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = config.identity_dim;
        let s = 1.0 / (k as f64).sqrt();
        Self {
            id_to_v: normal(rng, k, config.d_video) * s,
            id_to_a: normal(rng, k, config.d_audio) * s,
            clip_to_v: normal(rng, k, config.d_video) * (0.5 * s),
            clip_to_a: normal(rng, k, config.d_audio) * (0.5 * s),
            ref_id_v: normal(rng, k, config.d_video) * s,
            ref_id_a: normal(rng, k, config.d_audio) * s,
            ref_clip_v: normal(rng, k, config.d_video) * (0.5 * s),
            ref_clip_a: normal(rng, k, config.d_audio) * (0.5 * s),
            config: config.clone(),
        }
    }

    fn sample(&self, regime: DataRegime, rng: &mut ChaCha8Rng) -> FlowSample {
        let c = &self.config;
        let k = c.identity_dim;
        let u = normal(rng, 1, k);
        let clip = normal(rng, 1, k);
        let ref_clip = match regime {
            DataRegime::InPair => clip.clone(),
            DataRegime::CrossPair => normal(rng, 1, k),
        };
        let x0_v = Array2::zeros((c.video_len, c.d_video)) + &(u.dot(&self.id_to_v) + clip.dot(&self.clip_to_v));
        let x0_a = Array2::zeros((c.audio_len, c.d_audio)) + &(u.dot(&self.id_to_a) + clip.dot(&self.clip_to_a));
        let ref_v = normal(rng, c.ref_len, c.d_video) * 0.1 + &(u.dot(&self.ref_id_v) + ref_clip.dot(&self.ref_clip_v));
        let ref_a = normal(rng, c.ref_len, c.d_audio) * 0.1 + &(u.dot(&self.ref_id_a) + ref_clip.dot(&self.ref_clip_a));
        let t: f64 = rng.random_range(0.0..=1.0);
        let eps_v = normal(rng, c.video_len, c.d_video);
        let eps_a = normal(rng, c.audio_len, c.d_audio);
        let z_v = &x0_v * (1.0 - t) + &eps_v * t;
        let z_a = &x0_a * (1.0 - t) + &eps_a * t;
        FlowSample {
            state: DenoiserState {
                z_v,
                z_a,
                t,
                ref_v,
                ref_a,
            },
            target_v: eps_v - x0_v,
            target_a: eps_a - x0_a,
        }
    }

    fn batch(&self, n: usize, regime: DataRegime, rng: &mut ChaCha8Rng) -> Vec<FlowSample> {
        (0..n).map(|_| self.sample(regime, rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStepLog {
    pub step: usize,
    pub stage: StageName,
    pub kind: StepKind,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub seed: u64,
    /// Held-out JAVG loss before the first update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub log: Vec<ToyStepLog>,
}

impl ToyReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_loss / self.initial_loss
    }
}

/// Train the full pipeline on the synthetic task. Returns the report and the
/// trained model.
pub fn train_toy(config: &ToyConfig) -> Result<(ToyReport, Model), ToyError> {
    if config.steps < 2 || config.eval_batch == 0 || config.ref_len == 0 || config.identity_dim == 0 {
        return Err(ToyError::Config(format!("{config:?}")));
    }
    let plan = build_plan(&config.stages(), &config.optim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let caption = parse_caption(TOY_CAPTION)?;
    let inputs = random_inputs(&caption, config.d, &InputShape::default(), 0.5, &mut rng)?;
    let task = Task::new(config, &mut rng);
    let eval = task.batch(config.eval_batch, DataRegime::InPair, &mut rng);

    let model = Model::init(config.model_config(), config.seed)?;
    let initial_loss = model.loss(&inputs, &eval, StepKind::Javg)?;
    let mut trainer = Trainer::new(model, config.optim.clone());
    let mut log = Vec::with_capacity(plan.len());
    for planned in &plan.steps {
        let stage = plan.stage_config(planned.stage).expect("stage of the plan");
        let size = match planned.kind {
            StepKind::Javg => stage.javg_batch,
            StepKind::TtsOnly => stage.tts_batch,
        };
        let batch = task.batch(size, stage.data_regime, &mut rng);
        let (loss, _) = trainer.step(&inputs, &batch, planned.kind, planned.lr)?;
        log.push(ToyStepLog {
            step: planned.step,
            stage: planned.stage,
            kind: planned.kind,
            lr: planned.lr,
            loss,
        });
    }
    let final_loss = trainer.model.loss(&inputs, &eval, StepKind::Javg)?;
    Ok((
        ToyReport {
            seed: config.seed,
            initial_loss,
            final_loss,
            log,
        },
        trainer.model,
    ))
}
