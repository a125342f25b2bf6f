//! Masked TTS-to-prompt cross-attention.
//!
//! Phoneme embeddings are injected only into prompt tokens that sit strictly
//! inside a `<S> ... <E>` span. Rows outside every span are never touched:
//! the cross-attention runs on the gathered in-span rows and its output is
//! scattered back, so masked-out rows are copied bit for bit. Each utterance
//! attends only to its own TTS tokens.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::caption::{OmniCaption, Span};
use crate::nn::Attention;
use crate::params::{scaled_uniform, Binder, Gradients, ParamError, ParamStore};

#[derive(Debug, Error)]
pub enum GateError {
    #[error("speech mask is active but utterance {utterance} has no TTS tokens")]
    EmptyTtsWithActiveMask { utterance: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid dimensions: {0}")]
    InvalidDim(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeechMask {
    /// 1 inside an utterance's content span, 0 elsewhere.
    pub values: Vec<u8>,
    /// Content span of every utterance, in caption order.
    pub spans: Vec<Span>,
}

impl SpeechMask {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn active_rows(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&i| self.values[i] == 1).collect()
    }

    fn utterance_of(&self, row: usize) -> Option<usize> {
        self.spans.iter().position(|s| s.contains(row))
    }
}

pub fn build_speech_mask(caption: &OmniCaption) -> SpeechMask {
    let mut values = vec![0u8; caption.tokens.len()];
    let spans: Vec<Span> = caption.utterances.iter().map(|u| u.content).collect();
    for span in &spans {
        for i in span.as_range() {
            values[i] = 1;
        }
    }
    SpeechMask { values, spans }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MtpcaConfig {
    pub d: usize,
    pub heads: usize,
}

impl MtpcaConfig {
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|w| (format!("mtpca/attn.{w}"), (self.d, self.d)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtpcaParams {
    pub config: MtpcaConfig,
    pub store: ParamStore,
}

impl MtpcaParams {
    pub fn w_out(&self) -> &Array2<f64> {
        self.store.get("mtpca/attn.wo").expect("output projection present")
    }

    pub fn from_store(config: MtpcaConfig, store: ParamStore) -> Result<Self, GateError> {
        store.check_layout(&config.layout())?;
        Ok(Self { config, store })
    }
}

/// Query/key/value projections uniform in `±1/sqrt(d)`, output projection
/// exactly zero.
pub fn init_mtpca_params(config: MtpcaConfig, seed: u64) -> Result<MtpcaParams, GateError> {
    if config.d == 0 || config.heads == 0 || !config.d.is_multiple_of(config.heads) {
        return Err(GateError::InvalidDim(format!("{config:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, (rows, cols)) in config.layout() {
        let value = if name.ends_with(".wo") {
            Array2::zeros((rows, cols))
        } else {
            scaled_uniform(&mut rng, rows, cols)
        };
        store.insert(name, value);
    }
    Ok(MtpcaParams { config, store })
}

/// Validated routing of in-span rows to their utterance's TTS rows.
struct Routing {
    rows: Vec<usize>,
    /// `rows x tts_len`, 0 where allowed and `-inf` elsewhere.
    mask: Array2<f64>,
}

fn route(
    text_len: usize,
    tts_rows: usize,
    tts_lengths: &[usize],
    mask: &SpeechMask,
) -> Result<Option<Routing>, GateError> {
    if mask.len() != text_len {
        return Err(GateError::ShapeMismatch(format!(
            "mask has {} entries for {} prompt tokens",
            mask.len(),
            text_len
        )));
    }
    if tts_lengths.len() != mask.spans.len() {
        return Err(GateError::ShapeMismatch(format!(
            "{} TTS segments for {} utterances",
            tts_lengths.len(),
            mask.spans.len()
        )));
    }
    if tts_lengths.iter().sum::<usize>() != tts_rows {
        return Err(GateError::ShapeMismatch(format!(
            "TTS segments cover {} rows but c_tts has {}",
            tts_lengths.iter().sum::<usize>(),
            tts_rows
        )));
    }
    let rows = mask.active_rows();
    if rows.is_empty() {
        return Ok(None);
    }
    let offsets: Vec<usize> = tts_lengths
        .iter()
        .scan(0, |acc, &n| {
            let start = *acc;
            *acc += n;
            Some(start)
        })
        .collect();
    let mut score_mask = Array2::from_elem((rows.len(), tts_rows), f64::NEG_INFINITY);
    for (r, &row) in rows.iter().enumerate() {
        let u = mask.utterance_of(row).ok_or_else(|| {
            GateError::ShapeMismatch(format!("mask is set at token {row} outside every utterance span"))
        })?;
        if tts_lengths[u] == 0 {
            return Err(GateError::EmptyTtsWithActiveMask { utterance: u });
        }
        for c in offsets[u]..offsets[u] + tts_lengths[u] {
            score_mask[[r, c]] = 0.0;
        }
    }
    Ok(Some(Routing { rows, mask: score_mask }))
}

pub(crate) fn mtpca_graph(
    g: &mut Graph,
    p: &mut Binder<'_>,
    config: &MtpcaConfig,
    c_txt: Var,
    c_tts: Var,
    tts_lengths: &[usize],
    mask: &SpeechMask,
) -> Result<Var, GateError> {
    let (text_len, d) = g.value(c_txt).dim();
    let (tts_rows, tts_d) = g.value(c_tts).dim();
    if d != config.d || (tts_rows > 0 && tts_d != config.d) {
        return Err(GateError::ShapeMismatch(format!(
            "c_txt dim {d}, c_tts dim {tts_d}, params expect {}",
            config.d
        )));
    }
    let Some(routing) = route(text_len, tts_rows, tts_lengths, mask)? else {
        return Ok(c_txt);
    };
    let queries = g.gather_rows(c_txt, &routing.rows);
    let delta = Attention {
        prefix: "mtpca/attn",
        heads: config.heads,
        rope: None,
        mask: Some(&routing.mask),
    }
    .forward(g, p, queries, c_tts);
    Ok(g.scatter_add_rows(c_txt, delta, &routing.rows))
}

/// Inject phoneme context into in-span prompt rows. `tts_lengths[u]` is the
/// number of `c_tts` rows belonging to utterance `u`.
pub fn mtpca_forward(
    c_txt: &Array2<f64>,
    c_tts: &Array2<f64>,
    tts_lengths: &[usize],
    mask: &SpeechMask,
    params: &MtpcaParams,
) -> Result<Array2<f64>, GateError> {
    let mut g = Graph::new();
    let mut p = Binder::new(&params.store);
    let txt = g.constant(c_txt.clone());
    let tts = g.constant(c_tts.clone());
    let out = mtpca_graph(&mut g, &mut p, &params.config, txt, tts, tts_lengths, mask)?;
    Ok(g.value(out).clone())
}

/// Forward pass plus the gradient of `sum(output * cotangent)` with respect
/// to the parameters, `c_txt` and `c_tts`.
pub fn mtpca_vjp(
    c_txt: &Array2<f64>,
    c_tts: &Array2<f64>,
    tts_lengths: &[usize],
    mask: &SpeechMask,
    params: &MtpcaParams,
    cotangent: &Array2<f64>,
) -> Result<(Array2<f64>, Gradients), GateError> {
    if cotangent.dim() != c_txt.dim() {
        return Err(GateError::ShapeMismatch(format!(
            "cotangent {:?} vs output {:?}",
            cotangent.dim(),
            c_txt.dim()
        )));
    }
    let mut g = Graph::new();
    let mut p = Binder::new(&params.store);
    let inputs = [("c_txt", g.leaf(c_txt.clone())), ("c_tts", g.leaf(c_tts.clone()))];
    let out = mtpca_graph(
        &mut g,
        &mut p,
        &params.config,
        inputs[0].1,
        inputs[1].1,
        tts_lengths,
        mask,
    )?;
    let adjoints = g.backward_from(out, cotangent.clone());
    Ok((g.value(out).clone(), Gradients::collect(&p, &adjoints, &inputs)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::parse_caption;
    use rand::Rng;

    const ONE_SUBJECT: &str = "A <sub1> is tall with calm voice . <sub1> says <S> hi there <E>";

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn live_params(d: usize, seed: u64) -> MtpcaParams {
        let mut p = init_mtpca_params(MtpcaConfig { d, heads: 1 }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        *p.store.get_mut("mtpca/attn.wo").unwrap() = random(&mut rng, d, d);
        p
    }

    #[test]
    fn mask_of_fixture() {
        let c = parse_caption(ONE_SUBJECT).unwrap();
        let m = build_speech_mask(&c);
        assert_eq!(m.active_rows(), vec![11, 12]);
        assert_eq!(m.len(), c.tokens.len());
    }

    #[test]
    fn mask_without_speech_is_zero() {
        let c = parse_caption("A <sub1> is tall with calm voice . It rains .").unwrap();
        assert!(build_speech_mask(&c).values.iter().all(|&v| v == 0));
    }

    #[test]
    fn two_utterances_two_runs() {
        let c = parse_caption(
            "A <sub1> is x with y . B <sub2> is u with v . <sub1> says <S> a b <E> . <sub2> says <S> c <E> .",
        )
        .unwrap();
        let m = build_speech_mask(&c);
        let runs = m.values.windows(2).filter(|w| w[0] == 0 && w[1] == 1).count();
        assert_eq!(runs, 2);
        assert_eq!(m.active_rows(), vec![17, 18, 24]);
    }

    #[test]
    fn zero_mask_and_zero_init_are_identity() {
        let c = parse_caption(ONE_SUBJECT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let txt = random(&mut rng, c.tokens.len(), 8);
        let tts = random(&mut rng, 4, 8);

        let mut silent = build_speech_mask(&c);
        silent.values.fill(0);
        let out = mtpca_forward(&txt, &tts, &[4], &silent, &live_params(8, 3)).unwrap();
        assert_eq!(out, txt);

        let fresh = init_mtpca_params(MtpcaConfig { d: 8, heads: 1 }, 3).unwrap();
        let out = mtpca_forward(&txt, &tts, &[4], &build_speech_mask(&c), &fresh).unwrap();
        assert!(out.iter().zip(txt.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn only_span_rows_change() {
        let c = parse_caption(ONE_SUBJECT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let txt = random(&mut rng, c.tokens.len(), 8);
        let tts = random(&mut rng, 5, 8);
        let out = mtpca_forward(&txt, &tts, &[5], &build_speech_mask(&c), &live_params(8, 5)).unwrap();
        let changed: Vec<usize> = (0..txt.nrows()).filter(|&i| out.row(i) != txt.row(i)).collect();
        assert_eq!(changed, vec![11, 12]);
    }

    #[test]
    fn utterances_only_see_their_own_phonemes() {
        let c = parse_caption(
            "A <sub1> is x with y . B <sub2> is u with v . <sub1> says <S> a b <E> . <sub2> says <S> c <E> .",
        )
        .unwrap();
        let mask = build_speech_mask(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let txt = random(&mut rng, c.tokens.len(), 8);
        let tts = random(&mut rng, 5, 8);
        let p = live_params(8, 6);
        let base = mtpca_forward(&txt, &tts, &[3, 2], &mask, &p).unwrap();
        // Perturb the second utterance's phonemes: the first utterance's rows
        // must not move.
        let mut tts2 = tts.clone();
        tts2.row_mut(4).fill(3.0);
        let out = mtpca_forward(&txt, &tts2, &[3, 2], &mask, &p).unwrap();
        assert_eq!(out.row(17), base.row(17));
        assert_eq!(out.row(18), base.row(18));
        assert_ne!(out.row(24), base.row(24));
    }

    #[test]
    fn errors() {
        let c = parse_caption(ONE_SUBJECT).unwrap();
        let mask = build_speech_mask(&c);
        let txt = Array2::zeros((c.tokens.len(), 8));
        let p = live_params(8, 1);
        assert!(matches!(
            mtpca_forward(&txt, &Array2::zeros((0, 8)), &[0], &mask, &p),
            Err(GateError::EmptyTtsWithActiveMask { utterance: 0 })
        ));
        assert!(matches!(
            mtpca_forward(&Array2::zeros((3, 8)), &Array2::zeros((2, 8)), &[2], &mask, &p),
            Err(GateError::ShapeMismatch(_))
        ));
        assert!(matches!(
            mtpca_forward(&txt, &Array2::zeros((2, 8)), &[3], &mask, &p),
            Err(GateError::ShapeMismatch(_))
        ));
        assert!(matches!(
            mtpca_forward(&txt, &Array2::zeros((2, 6)), &[2], &mask, &p),
            Err(GateError::ShapeMismatch(_))
        ));
    }
}
