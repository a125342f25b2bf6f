//! Conditioning machinery for multi-subject joint audio-video generation.
//!
//! * [`caption`]: structured caption grammar with subject anchors and speech spans.
//! * [`positions`]: anchored 3D rotary coordinates for text, references and TTS tokens.
//! * [`fusion`]: the omni-context fusion stack with zero-initialized residual taps.
//! * [`speech_gate`]: masked TTS-to-prompt cross-attention.
//! * [`denoiser`]: a desk-scale dual-stream velocity predictor.
//! * [`schedule`]: interleaved step plan, staged curriculum and learning-rate curve.
//! * [`pipeline`]: the composed model, its losses and a training step.

pub mod autodiff;
pub mod caption;
pub mod denoiser;
pub mod fusion;
pub mod gradcheck;
mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod positions;
pub mod schedule;
pub mod speech_gate;
pub mod toy;

pub use caption::{
    parse_caption, serialize_caption, validate_caption, CaptionDump, CaptionError, OmniCaption, Span, SpeechUtterance,
    SubjectDescriptor, Token, TokenKind,
};
pub use denoiser::{
    audio_only_forward, audio_only_loss_grads, flow_loss, init_denoiser_params, joint_forward, joint_loss_grads,
    DenoiserConfig, DenoiserError, DenoiserParams, DenoiserState, FlowTerms, StepKind,
};
pub use fusion::{init_ocf_params, ocf_forward, ocf_vjp, ConditionBundle, FusionError, OcfConfig, OcfParams};
pub use params::{GradMap, Gradients, ParamError, ParamGroup, ParamStore};
pub use pipeline::{ConditionInputs, FlowSample, Model, ModelConfig, PipelineError, Trainer};
pub use positions::{
    assign_positions, attention_logits, rope_rotate, tts_positions, Coord3D, ImageGrid, PositionError,
    PositionalAssignment, RopeConfig,
};
pub use schedule::{
    build_plan, gate_gradients, lr_at, step_kind, DataRegime, OptimConfig, ScheduleConfig, ScheduleError, StageConfig,
    StageName, StepPlan,
};
pub use speech_gate::{
    build_speech_mask, init_mtpca_params, mtpca_forward, mtpca_vjp, GateError, MtpcaConfig, MtpcaParams, SpeechMask,
};
