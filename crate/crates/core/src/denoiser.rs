//! Desk-scale dual-stream denoiser.
//!
//! Two transformer towers, one per modality, each consume their noisy
//! latents concatenated with their reference latents along the sequence
//! axis. Per block: self-attention with 1-D rotary positions, cross-attention
//! to the enriched prompt, bidirectional video/audio coupling, feed-forward.
//! Predictions are read from the noisy-latent rows only.
//!
//! The coupling weights live in the `cross` parameter group. The audio-only
//! pass never touches them or the `video` group, so their gradients are
//! structurally absent rather than numerically small.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::nn::{feed_forward, linear, rms_norm, Attention, RopeAngles};
use crate::params::{scaled_uniform, Binder, Gradients, ParamError, ParamStore};
use crate::positions::{Coord3D, RopeConfig};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {0} outside [0, 1]")]
    InvalidTimestep(f64),
    #[error("invalid dimensions: {0}")]
    InvalidDim(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    /// Joint audio-video step with the coupling active.
    Javg,
    /// Audio tower alone; the coupling target is null.
    TtsOnly,
}

impl StepKind {
    pub fn code(self) -> char {
        match self {
            StepKind::Javg => 'J',
            StepKind::TtsOnly => 'T',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub d_video: usize,
    pub d_audio: usize,
    pub d_context: usize,
    pub heads_video: usize,
    pub heads_audio: usize,
    pub blocks: usize,
    /// Width of the sinusoidal timestep features (even).
    pub time_features: usize,
}

impl DenoiserConfig {
    pub fn desk(d_video: usize, d_audio: usize, d_context: usize) -> Self {
        Self {
            d_video,
            d_audio,
            d_context,
            heads_video: 1,
            heads_audio: 1,
            blocks: 2,
            time_features: 8,
        }
    }

    fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: String| Err(DenoiserError::InvalidDim(m));
        if self.blocks == 0 || self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return bad(format!("{self:?}: blocks and even time_features required"));
        }
        for (d, h) in [(self.d_video, self.heads_video), (self.d_audio, self.heads_audio)] {
            if h == 0 || d % h != 0 {
                return bad(format!("tower width {d} not divisible by {h} heads"));
            }
            self.tower_rope(d, h)?;
        }
        if self.d_context == 0 {
            return bad("context width must be positive".into());
        }
        Ok(())
    }

    fn tower_rope(&self, d: usize, heads: usize) -> Result<RopeConfig, DenoiserError> {
        RopeConfig::for_head_dim(d / heads).map_err(|e| DenoiserError::InvalidDim(e.to_string()))
    }

    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let towers = [("video", self.d_video), ("audio", self.d_audio)];
        for (tower, d) in towers {
            out.push((format!("{tower}/temb.w"), (self.time_features, d)));
            for b in 0..self.blocks {
                let p = |s: &str| format!("{tower}/block{b}/{s}");
                out.push((p("norm_self"), (1, d)));
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push((p(&format!("self.{w}")), (d, d)));
                }
                out.push((p("norm_ctx"), (1, d)));
                out.push((p("ctx.wq"), (d, d)));
                out.push((p("ctx.wk"), (self.d_context, d)));
                out.push((p("ctx.wv"), (self.d_context, d)));
                out.push((p("ctx.wo"), (d, d)));
                out.push((p("norm_ffn"), (1, d)));
                out.push((p("ffn.w1"), (d, 2 * d)));
                out.push((p("ffn.w2"), (2 * d, d)));
            }
            out.push((format!("{tower}/head"), (d, d)));
        }
        for b in 0..self.blocks {
            let p = |s: &str| format!("cross/block{b}/{s}");
            let (dv, da) = (self.d_video, self.d_audio);
            out.push((p("norm_v"), (1, dv)));
            out.push((p("norm_a"), (1, da)));
            out.push((p("v_from_a.wq"), (dv, dv)));
            out.push((p("v_from_a.wk"), (da, dv)));
            out.push((p("v_from_a.wv"), (da, dv)));
            out.push((p("v_from_a.wo"), (dv, dv)));
            out.push((p("a_from_v.wq"), (da, da)));
            out.push((p("a_from_v.wk"), (dv, da)));
            out.push((p("a_from_v.wv"), (dv, da)));
            out.push((p("a_from_v.wo"), (da, da)));
        }
        out
    }

    pub fn checkpoint_meta(&self) -> BTreeMap<String, u64> {
        [
            ("d_video", self.d_video),
            ("d_audio", self.d_audio),
            ("d_context", self.d_context),
            ("blocks", self.blocks),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v as u64))
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub store: ParamStore,
}

impl DenoiserParams {
    pub fn from_store(config: DenoiserConfig, store: ParamStore) -> Result<Self, DenoiserError> {
        config.validate()?;
        store.check_layout(&config.layout())?;
        Ok(Self { config, store })
    }
}

/// Seeded initialization. Norm gains start at 1 and both output heads at
/// exactly zero, so a fresh model predicts zero velocity.
pub fn init_denoiser_params(config: DenoiserConfig, seed: u64) -> Result<DenoiserParams, DenoiserError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, (rows, cols)) in config.layout() {
        let value = if name.ends_with("/head") {
            Array2::zeros((rows, cols))
        } else if name.contains("norm") {
            Array2::ones((rows, cols))
        } else {
            scaled_uniform(&mut rng, rows, cols)
        };
        store.insert(name, value);
    }
    Ok(DenoiserParams { config, store })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserState {
    pub z_v: Array2<f64>,
    pub z_a: Array2<f64>,
    pub t: f64,
    pub ref_v: Array2<f64>,
    pub ref_a: Array2<f64>,
}

/// Sinusoidal features of the timestep, frequencies spread over `[1, 100]`.
pub fn timestep_features(t: f64, width: usize) -> Array2<f64> {
    let half = width / 2;
    let mut out = Array2::zeros((1, width));
    for k in 0..half {
        let freq = if half > 1 {
            (k as f64 * 100f64.ln() / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out[[0, k]] = (t * freq).sin();
        out[[0, half + k]] = (t * freq).cos();
    }
    out
}

/// Angles for plain 1-D rotary positions `0..len` on the temporal axis.
pub(crate) fn sequence_angles(rope: &RopeConfig, len: usize) -> Array2<f64> {
    let coords: Vec<Coord3D> = (0..len).map(|i| Coord3D::new(i as f64, 0.0, 0.0)).collect();
    rope.angle_table(&coords)
}

fn check_shape(name: &str, m: &Array2<f64>, cols: usize) -> Result<(), DenoiserError> {
    if m.ncols() != cols && m.nrows() > 0 {
        return Err(DenoiserError::ShapeMismatch(format!(
            "{name} has width {}, expected {cols}",
            m.ncols()
        )));
    }
    Ok(())
}

fn check_audio(state: &DenoiserState, context: &Array2<f64>, c: &DenoiserConfig) -> Result<(), DenoiserError> {
    if !(0.0..=1.0).contains(&state.t) {
        return Err(DenoiserError::InvalidTimestep(state.t));
    }
    if state.z_a.nrows() == 0 {
        return Err(DenoiserError::ShapeMismatch("no audio latents".into()));
    }
    check_shape("z_a", &state.z_a, c.d_audio)?;
    check_shape("ref_a", &state.ref_a, c.d_audio)?;
    check_shape("context", context, c.d_context)
}

fn check_video(state: &DenoiserState, c: &DenoiserConfig) -> Result<(), DenoiserError> {
    if state.z_v.nrows() == 0 {
        return Err(DenoiserError::ShapeMismatch("no video latents".into()));
    }
    check_shape("z_v", &state.z_v, c.d_video)?;
    check_shape("ref_v", &state.ref_v, c.d_video)
}

/// Graph handles for one sample.
pub(crate) struct StateVars {
    pub z_v: Option<Var>,
    pub ref_v: Option<Var>,
    pub z_a: Var,
    pub ref_a: Var,
    pub t: f64,
}

impl StateVars {
    pub fn constants(g: &mut Graph, state: &DenoiserState, with_video: bool) -> Self {
        Self::bind(g, state, with_video, Graph::constant)
    }

    fn leaves(g: &mut Graph, state: &DenoiserState, with_video: bool) -> Self {
        Self::bind(g, state, with_video, Graph::leaf)
    }

    fn bind(
        g: &mut Graph,
        state: &DenoiserState,
        with_video: bool,
        mut node: impl FnMut(&mut Graph, Array2<f64>) -> Var,
    ) -> Self {
        let (z_v, ref_v) = if with_video {
            (Some(node(g, state.z_v.clone())), Some(node(g, state.ref_v.clone())))
        } else {
            (None, None)
        };
        Self {
            z_v,
            ref_v,
            z_a: node(g, state.z_a.clone()),
            ref_a: node(g, state.ref_a.clone()),
            t: state.t,
        }
    }

    fn named(&self) -> Vec<(&'static str, Var)> {
        let mut out = vec![("z_a", self.z_a), ("ref_a", self.ref_a)];
        out.extend(self.z_v.map(|v| ("z_v", v)));
        out.extend(self.ref_v.map(|v| ("ref_v", v)));
        out
    }
}

struct Tower<'a> {
    name: &'a str,
    heads: usize,
    angles: Array2<f64>,
}

impl Tower<'_> {
    fn embed(&self, g: &mut Graph, p: &mut Binder<'_>, z: Var, reference: Var, t: f64, features: usize) -> Var {
        let x = g.concat_rows(&[z, reference]);
        let feats = g.constant(timestep_features(t, features));
        let temb = linear(g, p, &format!("{}/temb.w", self.name), feats);
        let temb = g.gelu(temb);
        g.add_row(x, temb)
    }

    fn self_and_context(&self, g: &mut Graph, p: &mut Binder<'_>, b: usize, x: Var, context: Var) -> Var {
        let name = |s: &str| format!("{}/block{b}/{s}", self.name);
        let h = rms_norm(g, p, &name("norm_self"), x);
        let prefix = name("self");
        let attn = Attention {
            prefix: &prefix,
            heads: self.heads,
            rope: Some(RopeAngles {
                q: &self.angles,
                k: &self.angles,
            }),
            mask: None,
        }
        .forward(g, p, h, h);
        let x = g.add(x, attn);
        let h = rms_norm(g, p, &name("norm_ctx"), x);
        let prefix = name("ctx");
        let ctx = Attention {
            prefix: &prefix,
            heads: self.heads,
            rope: None,
            mask: None,
        }
        .forward(g, p, h, context);
        g.add(x, ctx)
    }

    fn feed_forward(&self, g: &mut Graph, p: &mut Binder<'_>, b: usize, x: Var) -> Var {
        let h = rms_norm(g, p, &format!("{}/block{b}/norm_ffn", self.name), x);
        let ff = feed_forward(g, p, &format!("{}/block{b}/ffn", self.name), h);
        g.add(x, ff)
    }

    fn head(&self, g: &mut Graph, p: &mut Binder<'_>, x: Var, rows: usize) -> Var {
        let noisy = g.slice_rows(x, 0, rows);
        linear(g, p, &format!("{}/head", self.name), noisy)
    }
}

/// Forward pass on the graph. With `state.z_v == None` only the audio tower
/// runs and the coupling is skipped entirely.
pub(crate) fn denoiser_graph(
    g: &mut Graph,
    p: &mut Binder<'_>,
    config: &DenoiserConfig,
    state: &StateVars,
    context: Var,
) -> (Option<Var>, Var) {
    let n_a = g.value(state.z_a).nrows();
    let len_a = n_a + g.value(state.ref_a).nrows();
    let rope_a = config
        .tower_rope(config.d_audio, config.heads_audio)
        .expect("validated config");
    let audio = Tower {
        name: "audio",
        heads: config.heads_audio,
        angles: sequence_angles(&rope_a, len_a),
    };
    let mut x_a = audio.embed(g, p, state.z_a, state.ref_a, state.t, config.time_features);

    let mut video = None;
    if let (Some(z_v), Some(ref_v)) = (state.z_v, state.ref_v) {
        let n_v = g.value(z_v).nrows();
        let len_v = n_v + g.value(ref_v).nrows();
        let rope_v = config
            .tower_rope(config.d_video, config.heads_video)
            .expect("validated config");
        let tower = Tower {
            name: "video",
            heads: config.heads_video,
            angles: sequence_angles(&rope_v, len_v),
        };
        let x_v = tower.embed(g, p, z_v, ref_v, state.t, config.time_features);
        video = Some((tower, x_v, n_v));
    }

    for b in 0..config.blocks {
        x_a = audio.self_and_context(g, p, b, x_a, context);
        if let Some((tower, x_v, _)) = video.as_mut() {
            *x_v = tower.self_and_context(g, p, b, *x_v, context);
            let name = |s: &str| format!("cross/block{b}/{s}");
            let hv = rms_norm(g, p, &name("norm_v"), *x_v);
            let ha = rms_norm(g, p, &name("norm_a"), x_a);
            let prefix_v = name("v_from_a");
            let prefix_a = name("a_from_v");
            let to_v = Attention {
                prefix: &prefix_v,
                heads: config.heads_video,
                rope: None,
                mask: None,
            }
            .forward(g, p, hv, ha);
            let to_a = Attention {
                prefix: &prefix_a,
                heads: config.heads_audio,
                rope: None,
                mask: None,
            }
            .forward(g, p, ha, hv);
            *x_v = g.add(*x_v, to_v);
            x_a = g.add(x_a, to_a);
            *x_v = tower.feed_forward(g, p, b, *x_v);
        }
        x_a = audio.feed_forward(g, p, b, x_a);
    }

    let pred_a = audio.head(g, p, x_a, n_a);
    let pred_v = video.map(|(tower, x_v, n_v)| tower.head(g, p, x_v, n_v));
    (pred_v, pred_a)
}

/// Joint prediction for both modalities.
pub fn joint_forward(
    state: &DenoiserState,
    context: &Array2<f64>,
    params: &DenoiserParams,
) -> Result<(Array2<f64>, Array2<f64>), DenoiserError> {
    check_audio(state, context, &params.config)?;
    check_video(state, &params.config)?;
    let mut g = Graph::new();
    let mut p = Binder::new(&params.store);
    let vars = StateVars::constants(&mut g, state, true);
    let ctx = g.constant(context.clone());
    let (pred_v, pred_a) = denoiser_graph(&mut g, &mut p, &params.config, &vars, ctx);
    let pred_v = pred_v.expect("video tower ran");
    Ok((g.value(pred_v).clone(), g.value(pred_a).clone()))
}

/// Audio tower alone. The video fields of `state` are ignored.
pub fn audio_only_forward(
    state: &DenoiserState,
    context: &Array2<f64>,
    params: &DenoiserParams,
) -> Result<Array2<f64>, DenoiserError> {
    check_audio(state, context, &params.config)?;
    let mut g = Graph::new();
    let mut p = Binder::new(&params.store);
    let vars = StateVars::constants(&mut g, state, false);
    let ctx = g.constant(context.clone());
    let (_, pred_a) = denoiser_graph(&mut g, &mut p, &params.config, &vars, ctx);
    Ok(g.value(pred_a).clone())
}

/// Predictions or targets of one step. TTS-only steps carry no video term.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTerms<'a> {
    pub video: Option<&'a Array2<f64>>,
    pub audio: &'a Array2<f64>,
}

fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64, DenoiserError> {
    if pred.dim() != target.dim() {
        return Err(DenoiserError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok((pred - target).mapv(|v| v * v).sum() / pred.len().max(1) as f64)
}

/// Velocity-matching loss. JAVG steps average the video and audio MSE with
/// equal weight; TTS-only steps use the audio MSE alone.
pub fn flow_loss(pred: &FlowTerms<'_>, target: &FlowTerms<'_>, kind: StepKind) -> Result<f64, DenoiserError> {
    let audio = mse(pred.audio, target.audio)?;
    match (kind, pred.video, target.video) {
        (StepKind::Javg, Some(pv), Some(tv)) => Ok(0.5 * (mse(pv, tv)? + audio)),
        (StepKind::TtsOnly, None, None) => Ok(audio),
        (StepKind::Javg, ..) => Err(DenoiserError::ShapeMismatch("JAVG step needs video terms".into())),
        (StepKind::TtsOnly, ..) => Err(DenoiserError::ShapeMismatch(
            "TTS-only step takes no video terms".into(),
        )),
    }
}

/// Graph form of [`flow_loss`].
pub(crate) fn flow_loss_graph(
    g: &mut Graph,
    pred_v: Option<Var>,
    pred_a: Var,
    target_v: Option<&Array2<f64>>,
    target_a: &Array2<f64>,
) -> Var {
    let audio = g.mse(pred_a, target_a);
    match (pred_v, target_v) {
        (Some(pv), Some(tv)) => {
            let video = g.mse(pv, tv);
            let sum = g.add(video, audio);
            g.scale(sum, 0.5)
        }
        _ => audio,
    }
}

fn check_target(name: &str, target: &Array2<f64>, latents: &Array2<f64>) -> Result<(), DenoiserError> {
    if target.dim() != latents.dim() {
        return Err(DenoiserError::ShapeMismatch(format!(
            "{name} is {:?}, latents are {:?}",
            target.dim(),
            latents.dim()
        )));
    }
    Ok(())
}

fn loss_and_gradients(
    state: &DenoiserState,
    context: &Array2<f64>,
    params: &DenoiserParams,
    target_v: Option<&Array2<f64>>,
    target_a: &Array2<f64>,
) -> (f64, Gradients) {
    let mut g = Graph::new();
    let mut p = Binder::new(&params.store);
    let vars = StateVars::leaves(&mut g, state, target_v.is_some());
    let ctx = g.leaf(context.clone());
    let (pred_v, pred_a) = denoiser_graph(&mut g, &mut p, &params.config, &vars, ctx);
    let loss = flow_loss_graph(&mut g, pred_v, pred_a, target_v, target_a);
    let adjoints = g.backward(loss);
    let mut inputs = vars.named();
    inputs.push(("context", ctx));
    (g.scalar(loss), Gradients::collect(&p, &adjoints, &inputs))
}

/// JAVG flow loss of [`joint_forward`] and its gradient with respect to the
/// parameters, the latents, the references and the context.
pub fn joint_loss_grads(
    state: &DenoiserState,
    context: &Array2<f64>,
    params: &DenoiserParams,
    target_v: &Array2<f64>,
    target_a: &Array2<f64>,
) -> Result<(f64, Gradients), DenoiserError> {
    check_audio(state, context, &params.config)?;
    check_video(state, &params.config)?;
    check_target("target_v", target_v, &state.z_v)?;
    check_target("target_a", target_a, &state.z_a)?;
    Ok(loss_and_gradients(state, context, params, Some(target_v), target_a))
}

/// TTS-only flow loss of [`audio_only_forward`] and its gradient. Video and
/// coupling parameters never enter the graph and have no entry.
pub fn audio_only_loss_grads(
    state: &DenoiserState,
    context: &Array2<f64>,
    params: &DenoiserParams,
    target_a: &Array2<f64>,
) -> Result<(f64, Gradients), DenoiserError> {
    check_audio(state, context, &params.config)?;
    check_target("target_a", target_a, &state.z_a)?;
    Ok(loss_and_gradients(state, context, params, None, target_a))
}
