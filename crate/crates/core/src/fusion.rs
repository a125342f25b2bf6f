//! Omni-context fusion.
//!
//! The prompt embeddings, image references, audio references and TTS phoneme
//! embeddings are concatenated into one sequence and run through `L`
//! pre-norm transformer blocks whose attention uses the anchored 3D rotary
//! coordinates. After every block the first `len(c_txt)` rows are projected
//! by a zero-initialized `W_res` and added to the running prompt embedding:
//!
//! ```text
//! out = c_txt + sum_l  block_l(S)[..T_txt] · W_res_l
//! ```

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::nn::{feed_forward, rms_norm, Attention, RopeAngles};
use crate::params::{scaled_uniform, Binder, Gradients, ParamError, ParamStore};
use crate::positions::{Coord3D, PositionError, PositionalAssignment, RopeConfig};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("invalid dimensions: {0}")]
    InvalidDim(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Position(#[from] PositionError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcfConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
}

impl OcfConfig {
    pub const DEFAULT_LAYERS: usize = 2;
    pub const FFN_MULT: usize = 2;

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.d == 0 || self.heads == 0 || self.layers == 0 {
            return Err(FusionError::InvalidDim(format!("{self:?} has a zero dimension")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(FusionError::InvalidDim(format!(
                "d={} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        RopeConfig::for_head_dim(self.head_dim())
            .map_err(|e| FusionError::InvalidDim(format!("head_dim {}: {e}", self.head_dim())))?;
        Ok(())
    }

    /// Default rotary layout for this head width.
    pub fn rope(&self) -> Result<RopeConfig, FusionError> {
        Ok(RopeConfig::for_head_dim(self.head_dim())?)
    }

    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let d = self.d;
        let hidden = d * Self::FFN_MULT;
        let mut out = Vec::new();
        for l in 0..self.layers {
            let p = |s: &str| format!("ocf/block{l}/{s}");
            out.push((p("norm1"), (1, d)));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((p(&format!("attn.{w}")), (d, d)));
            }
            out.push((p("norm2"), (1, d)));
            out.push((p("ffn.w1"), (d, hidden)));
            out.push((p("ffn.w2"), (hidden, d)));
            out.push((p("w_res"), (d, d)));
        }
        out
    }

    pub fn checkpoint_meta(&self) -> BTreeMap<String, u64> {
        [("d", self.d), ("layers", self.layers), ("heads", self.heads)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v as u64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcfParams {
    pub config: OcfConfig,
    pub store: ParamStore,
}

impl OcfParams {
    pub fn w_res(&self, layer: usize) -> &Array2<f64> {
        self.store
            .get(&format!("ocf/block{layer}/w_res"))
            .expect("w_res present for every layer")
    }

    /// Rebuild from a loaded store, checking the tensor layout.
    pub fn from_store(config: OcfConfig, store: ParamStore) -> Result<Self, FusionError> {
        config.validate()?;
        store.check_layout(&config.layout())?;
        Ok(Self { config, store })
    }
}

/// Seeded initialization: norm gains at 1, `W_res` at exactly zero, every
/// other weight uniform in `±1/sqrt(fan_in)`.
pub fn init_ocf_params(config: OcfConfig, seed: u64) -> Result<OcfParams, FusionError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, (rows, cols)) in config.layout() {
        let value = if name.ends_with("w_res") {
            Array2::zeros((rows, cols))
        } else if name.contains("norm") {
            Array2::ones((rows, cols))
        } else {
            scaled_uniform(&mut rng, rows, cols)
        };
        store.insert(name, value);
    }
    Ok(OcfParams { config, store })
}

/// Everything the fusion stack consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub c_txt: Array2<f64>,
    pub c_v: Array2<f64>,
    pub c_a: Array2<f64>,
    pub c_tts: Array2<f64>,
    pub assignment: PositionalAssignment,
}

impl ConditionBundle {
    pub fn dim(&self) -> usize {
        self.c_txt.ncols()
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        let d = self.dim();
        let groups = [
            ("c_txt", &self.c_txt, self.assignment.text_coords.len()),
            ("c_v", &self.c_v, self.assignment.image_len()),
            ("c_a", &self.c_a, self.assignment.audio_len()),
            ("c_tts", &self.c_tts, self.assignment.tts_len()),
        ];
        for (name, seq, expected_rows) in groups {
            if seq.ncols() != d {
                return Err(FusionError::ShapeMismatch(format!(
                    "{name} has dim {}, c_txt has {d}",
                    seq.ncols()
                )));
            }
            if seq.nrows() != expected_rows {
                return Err(FusionError::ShapeMismatch(format!(
                    "{name} has {} rows but the assignment has {expected_rows} coordinates",
                    seq.nrows()
                )));
            }
        }
        Ok(())
    }
}

/// Run the fusion stack on graph values. `context` holds the non-text groups
/// in sequence order; `coords` covers text followed by context rows.
pub(crate) fn ocf_graph(
    g: &mut Graph,
    p: &mut Binder<'_>,
    config: &OcfConfig,
    rope: &RopeConfig,
    c_txt: Var,
    context: &[Var],
    coords: &[Coord3D],
) -> Var {
    let text_len = g.value(c_txt).nrows();
    let mut parts = vec![c_txt];
    parts.extend(context.iter().copied().filter(|v| g.value(*v).nrows() > 0));
    let mut x = g.concat_rows(&parts);
    let angles = rope.angle_table(coords);
    let mut out = c_txt;
    for l in 0..config.layers {
        let name = |s: &str| format!("ocf/block{l}/{s}");
        let h = rms_norm(g, p, &name("norm1"), x);
        let attn_prefix = name("attn");
        let attn = Attention {
            prefix: &attn_prefix,
            heads: config.heads,
            rope: Some(RopeAngles { q: &angles, k: &angles }),
            mask: None,
        }
        .forward(g, p, h, h);
        x = g.add(x, attn);
        let h = rms_norm(g, p, &name("norm2"), x);
        let ff = feed_forward(g, p, &name("ffn"), h);
        x = g.add(x, ff);
        let tap = g.slice_rows(x, 0, text_len);
        let w_res = p.var(g, &name("w_res"));
        let residual = g.matmul(tap, w_res);
        out = g.add(out, residual);
    }
    out
}

/// Enrich `c_txt` with multimodal context. The result has one row per prompt
/// token.
pub fn ocf_forward(
    bundle: &ConditionBundle,
    params: &OcfParams,
    rope: &RopeConfig,
) -> Result<Array2<f64>, FusionError> {
    check_inputs(bundle, params, rope)?;
    let mut g = Graph::new();
    let mut p = Binder::new(&params.store);
    let c_txt = g.constant(bundle.c_txt.clone());
    let context = [
        g.constant(bundle.c_v.clone()),
        g.constant(bundle.c_a.clone()),
        g.constant(bundle.c_tts.clone()),
    ];
    let coords = bundle.assignment.sequence_coords();
    let out = ocf_graph(&mut g, &mut p, &params.config, rope, c_txt, &context, &coords);
    Ok(g.value(out).clone())
}

fn check_inputs(bundle: &ConditionBundle, params: &OcfParams, rope: &RopeConfig) -> Result<(), FusionError> {
    bundle.validate()?;
    if bundle.dim() != params.config.d {
        return Err(FusionError::ShapeMismatch(format!(
            "bundle dim {} but params expect {}",
            bundle.dim(),
            params.config.d
        )));
    }
    if rope.head_dim != params.config.head_dim() {
        return Err(FusionError::ShapeMismatch(format!(
            "rope head_dim {} but per-head dim {}",
            rope.head_dim,
            params.config.head_dim()
        )));
    }
    Ok(())
}

/// Forward pass plus the gradient of `sum(output * cotangent)` with respect
/// to the parameters and to `c_txt`, `c_v`, `c_a`, `c_tts`.
pub fn ocf_vjp(
    bundle: &ConditionBundle,
    params: &OcfParams,
    rope: &RopeConfig,
    cotangent: &Array2<f64>,
) -> Result<(Array2<f64>, Gradients), FusionError> {
    check_inputs(bundle, params, rope)?;
    if cotangent.dim() != bundle.c_txt.dim() {
        return Err(FusionError::ShapeMismatch(format!(
            "cotangent {:?} vs output {:?}",
            cotangent.dim(),
            bundle.c_txt.dim()
        )));
    }
    let mut g = Graph::new();
    let mut p = Binder::new(&params.store);
    let inputs = [
        ("c_txt", g.leaf(bundle.c_txt.clone())),
        ("c_v", g.leaf(bundle.c_v.clone())),
        ("c_a", g.leaf(bundle.c_a.clone())),
        ("c_tts", g.leaf(bundle.c_tts.clone())),
    ];
    let context: Vec<Var> = inputs[1..].iter().map(|(_, v)| *v).collect();
    let coords = bundle.assignment.sequence_coords();
    let out = ocf_graph(&mut g, &mut p, &params.config, rope, inputs[0].1, &context, &coords);
    let adjoints = g.backward_from(out, cotangent.clone());
    Ok((g.value(out).clone(), Gradients::collect(&p, &adjoints, &inputs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::parse_caption;
    use crate::positions::assign_positions;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn bundle(d: usize, seed: u64) -> ConditionBundle {
        let c = parse_caption("A <sub1> is tall with calm . It rains . <sub1> says <S> hi there <E>").unwrap();
        let assignment = assign_positions(
            &c,
            &[(1, (1, 2))].into_iter().collect(),
            &[(1, 2)].into_iter().collect(),
            &[(0, 3)].into_iter().collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConditionBundle {
            c_txt: random(&mut rng, c.tokens.len(), d),
            c_v: random(&mut rng, 2, d),
            c_a: random(&mut rng, 2, d),
            c_tts: random(&mut rng, 3, d),
            assignment,
        }
    }

    fn cfg(d: usize, layers: usize, heads: usize) -> OcfConfig {
        OcfConfig { d, layers, heads }
    }

    #[test]
    fn init_zeroes_residual_projections() {
        let p = init_ocf_params(cfg(16, 2, 2), 7).unwrap();
        for l in 0..2 {
            assert!(p.w_res(l).iter().all(|&v| v == 0.0));
        }
        assert!(p.store.get("ocf/block0/attn.wq").unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_ocf_params(cfg(16, 2, 2), 7).unwrap();
        let b = init_ocf_params(cfg(16, 2, 2), 7).unwrap();
        for ((_, x), (_, y)) in a.store.iter().zip(b.store.iter()) {
            assert!(x.iter().zip(y.iter()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        let c = init_ocf_params(cfg(16, 2, 2), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_dims() {
        assert!(matches!(
            init_ocf_params(cfg(15, 1, 4), 0),
            Err(FusionError::InvalidDim(_))
        ));
        assert!(matches!(
            init_ocf_params(cfg(16, 0, 2), 0),
            Err(FusionError::InvalidDim(_))
        ));
        // head_dim 4 cannot hold three rotary axes
        assert!(matches!(
            init_ocf_params(cfg(16, 1, 4), 0),
            Err(FusionError::InvalidDim(_))
        ));
    }

    #[test]
    fn identity_at_init() {
        let b = bundle(16, 3);
        let p = init_ocf_params(cfg(16, 2, 2), 7).unwrap();
        let out = ocf_forward(&b, &p, &p.config.rope().unwrap()).unwrap();
        assert!(out.iter().zip(b.c_txt.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn unimodal_bundle_keeps_length() {
        let mut b = bundle(8, 4);
        b.c_v = Array2::zeros((0, 8));
        b.c_a = Array2::zeros((0, 8));
        b.c_tts = Array2::zeros((0, 8));
        b.assignment.image_coords.clear();
        b.assignment.audio_coords.clear();
        b.assignment.tts_coords.clear();
        let mut p = init_ocf_params(cfg(8, 2, 1), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in 0..2 {
            *p.store.get_mut(&format!("ocf/block{l}/w_res")).unwrap() = random(&mut rng, 8, 8);
        }
        let out = ocf_forward(&b, &p, &p.config.rope().unwrap()).unwrap();
        assert_eq!(out.dim(), b.c_txt.dim());
        assert!(out.iter().zip(b.c_txt.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn shape_errors() {
        let mut b = bundle(8, 4);
        let p = init_ocf_params(cfg(8, 1, 1), 1).unwrap();
        let rope = p.config.rope().unwrap();
        b.c_v = Array2::zeros((3, 8));
        assert!(matches!(ocf_forward(&b, &p, &rope), Err(FusionError::ShapeMismatch(_))));
        let b = bundle(16, 4);
        assert!(matches!(ocf_forward(&b, &p, &rope), Err(FusionError::ShapeMismatch(_))));
        let b = bundle(8, 4);
        let wrong = RopeConfig::for_head_dim(6).unwrap();
        assert!(matches!(
            ocf_forward(&b, &p, &wrong),
            Err(FusionError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn from_store_checks_layout() {
        let p = init_ocf_params(cfg(8, 2, 1), 1).unwrap();
        assert!(OcfParams::from_store(p.config, p.store.clone()).is_ok());
        assert!(OcfParams::from_store(cfg(8, 3, 1), p.store.clone()).is_err());
        assert!(OcfParams::from_store(cfg(16, 2, 2), p.store).is_err());
    }
}
