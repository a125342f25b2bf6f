//! End-to-end conditioning and denoising: speech injection, then context
//! fusion, then the dual-stream denoiser, with losses and gradients over one
//! merged parameter store.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::denoiser::{
    denoiser_graph, flow_loss_graph, init_denoiser_params, DenoiserConfig, DenoiserError, DenoiserState, StateVars,
    StepKind,
};
use crate::fusion::{init_ocf_params, ocf_graph, ConditionBundle, FusionError, OcfConfig};
use crate::optim::AdamW;
use crate::params::{Binder, GradMap, ParamError, ParamGroup, ParamStore};
use crate::positions::RopeConfig;
use crate::schedule::{gate_gradients, OptimConfig, ScheduleError};
use crate::speech_gate::{init_mtpca_params, mtpca_graph, GateError, MtpcaConfig, SpeechMask};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("incompatible configs: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ocf: OcfConfig,
    pub mtpca: MtpcaConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    /// Small widths suitable for finite-difference checks and toy runs.
    pub fn desk(d: usize, d_video: usize, d_audio: usize) -> Self {
        Self {
            ocf: OcfConfig { d, layers: 2, heads: 1 },
            mtpca: MtpcaConfig { d, heads: 1 },
            denoiser: DenoiserConfig::desk(d_video, d_audio, d),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.ocf.validate()?;
        if self.mtpca.d != self.ocf.d || self.denoiser.d_context != self.ocf.d {
            return Err(PipelineError::Config(format!(
                "speech gate width {}, fusion width {}, denoiser context width {} must agree",
                self.mtpca.d, self.ocf.d, self.denoiser.d_context
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = self.ocf.layout();
        out.extend(self.mtpca.layout());
        out.extend(self.denoiser.layout());
        out
    }
}

/// Per-caption conditioning inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInputs {
    pub bundle: ConditionBundle,
    /// TTS rows per utterance, summing to `bundle.c_tts.nrows()`.
    pub tts_lengths: Vec<usize>,
    pub mask: SpeechMask,
}

/// One denoising example: noisy state plus velocity targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub state: DenoiserState,
    pub target_v: Array2<f64>,
    pub target_a: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub rope: RopeConfig,
}

impl Model {
    /// Seeded initialization; each component draws from its own stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut store = init_ocf_params(config.ocf, seed)?.store;
        store.merge(init_mtpca_params(config.mtpca, seed.wrapping_add(1))?.store);
        store.merge(init_denoiser_params(config.denoiser, seed.wrapping_add(2))?.store);
        let rope = config.ocf.rope()?;
        Ok(Self { config, store, rope })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self, PipelineError> {
        config.validate()?;
        store.check_layout(&config.layout())?;
        let rope = config.ocf.rope()?;
        Ok(Self { config, store, rope })
    }

    fn context_graph(&self, g: &mut Graph, p: &mut Binder<'_>, inputs: &ConditionInputs) -> Result<Var, PipelineError> {
        let bundle = &inputs.bundle;
        bundle.validate()?;
        if bundle.dim() != self.config.ocf.d {
            return Err(PipelineError::Config(format!(
                "bundle width {} but model width {}",
                bundle.dim(),
                self.config.ocf.d
            )));
        }
        let c_txt = g.constant(bundle.c_txt.clone());
        let c_tts = g.constant(bundle.c_tts.clone());
        let gated = mtpca_graph(
            g,
            p,
            &self.config.mtpca,
            c_txt,
            c_tts,
            &inputs.tts_lengths,
            &inputs.mask,
        )?;
        let context = [g.constant(bundle.c_v.clone()), g.constant(bundle.c_a.clone()), c_tts];
        let coords = bundle.assignment.sequence_coords();
        Ok(ocf_graph(g, p, &self.config.ocf, &self.rope, gated, &context, &coords))
    }

    /// Enriched prompt embedding consumed by the denoiser.
    pub fn condition(&self, inputs: &ConditionInputs) -> Result<Array2<f64>, PipelineError> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store);
        let out = self.context_graph(&mut g, &mut p, inputs)?;
        Ok(g.value(out).clone())
    }

    fn batch_graph(
        &self,
        g: &mut Graph,
        p: &mut Binder<'_>,
        inputs: &ConditionInputs,
        batch: &[FlowSample],
        kind: StepKind,
    ) -> Result<Var, PipelineError> {
        if batch.is_empty() {
            return Err(PipelineError::EmptyBatch);
        }
        let context = self.context_graph(g, p, inputs)?;
        let with_video = kind == StepKind::Javg;
        let mut losses = Vec::with_capacity(batch.len());
        for sample in batch {
            check_sample(sample, &self.config.denoiser, with_video)?;
            let vars = StateVars::constants(g, &sample.state, with_video);
            let (pred_v, pred_a) = denoiser_graph(g, p, &self.config.denoiser, &vars, context);
            let target_v = with_video.then_some(&sample.target_v);
            losses.push(flow_loss_graph(g, pred_v, pred_a, target_v, &sample.target_a));
        }
        let stacked = g.concat_rows(&losses);
        let ones = g.constant(Array2::from_elem((1, batch.len()), 1.0 / batch.len() as f64));
        Ok(g.matmul(ones, stacked))
    }

    /// Mean flow-matching loss over `batch`.
    pub fn loss(&self, inputs: &ConditionInputs, batch: &[FlowSample], kind: StepKind) -> Result<f64, PipelineError> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store);
        let loss = self.batch_graph(&mut g, &mut p, inputs, batch, kind)?;
        Ok(g.scalar(loss))
    }

    /// Mean loss and its gradient. Tensors the step never reads are absent
    /// from the map.
    pub fn loss_and_grads(
        &self,
        inputs: &ConditionInputs,
        batch: &[FlowSample],
        kind: StepKind,
    ) -> Result<(f64, GradMap), PipelineError> {
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store);
        let loss = self.batch_graph(&mut g, &mut p, inputs, batch, kind)?;
        let adjoints = g.backward(loss);
        Ok((g.scalar(loss), p.grads(&adjoints)))
    }
}

fn check_sample(sample: &FlowSample, config: &DenoiserConfig, with_video: bool) -> Result<(), DenoiserError> {
    let s = &sample.state;
    if !(0.0..=1.0).contains(&s.t) {
        return Err(DenoiserError::InvalidTimestep(s.t));
    }
    let mut checks = vec![
        ("z_a", s.z_a.dim(), (s.z_a.nrows().max(1), config.d_audio)),
        ("target_a", sample.target_a.dim(), s.z_a.dim()),
        ("ref_a", s.ref_a.dim(), (s.ref_a.nrows(), config.d_audio)),
    ];
    if with_video {
        checks.push(("z_v", s.z_v.dim(), (s.z_v.nrows().max(1), config.d_video)));
        checks.push(("target_v", sample.target_v.dim(), s.z_v.dim()));
        checks.push(("ref_v", s.ref_v.dim(), (s.ref_v.nrows(), config.d_video)));
    }
    for (name, found, expected) in checks {
        if found != expected {
            return Err(DenoiserError::ShapeMismatch(format!(
                "{name} is {found:?}, expected {expected:?}"
            )));
        }
    }
    Ok(())
}

/// One optimizer step over the full model. The fusion and speech-gate groups
/// follow the scheduled learning rate; the denoiser groups use the flat
/// initial rate. TTS-only steps drop video and coupling gradients before the
/// update.
pub struct Trainer {
    pub model: Model,
    pub optim: AdamW,
}

impl Trainer {
    pub fn new(model: Model, optim: OptimConfig) -> Self {
        Self {
            model,
            optim: AdamW::new(optim),
        }
    }

    /// Returns the pre-update loss and the gated gradients that were applied.
    pub fn step(
        &mut self,
        inputs: &ConditionInputs,
        batch: &[FlowSample],
        kind: StepKind,
        scheduled_lr: f64,
    ) -> Result<(f64, GradMap), PipelineError> {
        let (loss, grads) = self.model.loss_and_grads(inputs, batch, kind)?;
        let grads = gate_gradients(grads, kind)?;
        let flat_lr = self.optim.config.lr_init;
        self.optim
            .step(&mut self.model.store, &grads, |name| match ParamGroup::of(name) {
                Ok(ParamGroup::Ocf | ParamGroup::Mtpca) => scheduled_lr,
                _ => flat_lr,
            });
        Ok((loss, grads))
    }
}
