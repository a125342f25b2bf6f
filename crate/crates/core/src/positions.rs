//! Semantic-anchored 3D rotary positions.
//!
//! Every conditioning token gets a coordinate `(t, a2, a3)`:
//!
//! * prompt text: `(t, 0, 0)` with `t` increasing along the stream;
//! * image reference of subject `k`: `(e_k + 1, h, w)`;
//! * audio reference of subject `k`: `(e_k + 2, j, 0)`;
//! * TTS phonemes of an utterance: `(linspace(t_start, t_end, M), 0, 1)`.
//!
//! `e_k` is the temporal coordinate of the last token of subject `k`'s
//! descriptor. Text after a descriptor resumes at `e_k + 3`, so every
//! descriptor pushes the rest of the stream two steps further out and the
//! shifts compose left to right.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::OmniCaption;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PositionError {
    #[error("subject {0} has reference tokens but no descriptor")]
    MissingSubject(u32),
    #[error("utterance {0} does not exist in the caption")]
    MissingUtterance(usize),
    #[error("invalid span: t_start {start} > t_end {end}")]
    InvalidSpan { start: f64, end: f64 },
    #[error("TTS token count must be at least 1")]
    InvalidCount,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid rotary config: {0}")]
    InvalidRopeConfig(String),
}

/// Position along the three rotary axes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Coord3D {
    pub t: f64,
    pub a2: f64,
    pub a3: f64,
}

impl Coord3D {
    pub const fn new(t: f64, a2: f64, a3: f64) -> Self {
        Self { t, a2, a3 }
    }

    pub fn axes(&self) -> [f64; 3] {
        [self.t, self.a2, self.a3]
    }

    pub fn shifted(&self, delta: Coord3D) -> Coord3D {
        Coord3D::new(self.t + delta.t, self.a2 + delta.a2, self.a3 + delta.a3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` entries.
    pub coords: Vec<Coord3D>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PositionalAssignment {
    pub text_coords: Vec<Coord3D>,
    pub image_coords: BTreeMap<u32, ImageGrid>,
    pub audio_coords: BTreeMap<u32, Vec<Coord3D>>,
    /// Keyed by the utterance's position in `OmniCaption::utterances`.
    pub tts_coords: BTreeMap<usize, Vec<Coord3D>>,
}

impl PositionalAssignment {
    pub fn image_len(&self) -> usize {
        self.image_coords.values().map(|g| g.coords.len()).sum()
    }

    pub fn audio_len(&self) -> usize {
        self.audio_coords.values().map(Vec::len).sum()
    }

    pub fn tts_len(&self) -> usize {
        self.tts_coords.values().map(Vec::len).sum()
    }

    /// All coordinates in fused-sequence order: text, image references by
    /// subject, audio references by subject, TTS tokens by utterance.
    pub fn sequence_coords(&self) -> Vec<Coord3D> {
        let mut out = self.text_coords.clone();
        out.extend(self.image_coords.values().flat_map(|g| g.coords.iter().copied()));
        out.extend(self.audio_coords.values().flatten().copied());
        out.extend(self.tts_coords.values().flatten().copied());
        out
    }
}

/// `linspace(t_start, t_end, count)` on the temporal axis with the TTS flag
/// set on the third axis. A single token sits at `t_start`.
pub fn tts_positions(t_start: f64, t_end: f64, count: usize) -> Result<Vec<Coord3D>, PositionError> {
    if t_start > t_end || !t_start.is_finite() || !t_end.is_finite() {
        return Err(PositionError::InvalidSpan {
            start: t_start,
            end: t_end,
        });
    }
    if count == 0 {
        return Err(PositionError::InvalidCount);
    }
    if count == 1 {
        return Ok(vec![Coord3D::new(t_start, 0.0, 1.0)]);
    }
    let last = (count - 1) as f64;
    Ok((0..count)
        .map(|i| {
            let t = if i == count - 1 {
                t_end
            } else {
                t_start + (t_end - t_start) * (i as f64 / last)
            };
            Coord3D::new(t, 0.0, 1.0)
        })
        .collect())
}

/// Assign coordinates to every token group of a caption.
///
/// Every descriptor reserves `e_k + 1` and `e_k + 2` for its references even
/// when the subject has no image grid or audio clip, so the text layout does
/// not depend on which references are present.
pub fn assign_positions(
    caption: &OmniCaption,
    image_grids: &BTreeMap<u32, (usize, usize)>,
    audio_lengths: &BTreeMap<u32, usize>,
    tts_counts: &BTreeMap<usize, usize>,
) -> Result<PositionalAssignment, PositionError> {
    for &id in image_grids.keys().chain(audio_lengths.keys()) {
        if !caption.subjects.iter().any(|s| s.subject_id == id) {
            return Err(PositionError::MissingSubject(id));
        }
    }
    if let Some(&u) = tts_counts.keys().find(|&&u| u >= caption.utterances.len()) {
        return Err(PositionError::MissingUtterance(u));
    }

    let mut text_coords = Vec::with_capacity(caption.tokens.len());
    let mut image_coords = BTreeMap::new();
    let mut audio_coords = BTreeMap::new();
    let mut descriptor_ends = caption.subjects.iter().map(|s| (s.span.end, s.subject_id)).peekable();
    let mut t = 0.0;
    for i in 0..caption.tokens.len() {
        text_coords.push(Coord3D::new(t, 0.0, 0.0));
        t += 1.0;
        if let Some(&(end, id)) = descriptor_ends.peek() {
            if end == i {
                descriptor_ends.next();
                let e = text_coords[i].t;
                if let Some(&(height, width)) = image_grids.get(&id) {
                    let coords = (0..height)
                        .flat_map(|h| (0..width).map(move |w| Coord3D::new(e + 1.0, h as f64, w as f64)))
                        .collect();
                    image_coords.insert(id, ImageGrid { height, width, coords });
                }
                if let Some(&len) = audio_lengths.get(&id) {
                    audio_coords.insert(id, (0..len).map(|j| Coord3D::new(e + 2.0, j as f64, 0.0)).collect());
                }
                t = e + 3.0;
            }
        }
    }

    let mut tts_coords = BTreeMap::new();
    for (&u, &count) in tts_counts {
        let content = caption.utterances[u].content;
        let coords = tts_positions(text_coords[content.start].t, text_coords[content.end].t, count)?;
        tts_coords.insert(u, coords);
    }

    Ok(PositionalAssignment {
        text_coords,
        image_coords,
        audio_coords,
        tts_coords,
    })
}

/// Frequency layout of a rotary head split over three axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub axis_split: [usize; 3],
    pub base_frequency: f64,
}

impl RopeConfig {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(head_dim: usize, axis_split: [usize; 3], base_frequency: f64) -> Result<Self, PositionError> {
        let bad = |msg: String| Err(PositionError::InvalidRopeConfig(msg));
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return bad(format!("head_dim {head_dim} must be even and positive"));
        }
        if axis_split.iter().any(|&n| n < 2 || n % 2 != 0) {
            return bad(format!("axis split {axis_split:?} needs even blocks of at least 2"));
        }
        if axis_split.iter().sum::<usize>() != head_dim {
            return bad(format!("axis split {axis_split:?} does not sum to {head_dim}"));
        }
        if !(base_frequency > 0.0 && base_frequency.is_finite()) {
            return bad(format!("base frequency {base_frequency} must be positive"));
        }
        Ok(Self {
            head_dim,
            axis_split,
            base_frequency,
        })
    }

    /// Half of the head to the temporal axis, a quarter to each of the other
    /// two, with every block rounded down to an even width (minimum 2).
    pub fn for_head_dim(head_dim: usize) -> Result<Self, PositionError> {
        let quarter = ((head_dim / 4) & !1).max(2);
        let temporal = head_dim.saturating_sub(2 * quarter);
        Self::new(head_dim, [temporal, quarter, quarter], Self::DEFAULT_BASE)
    }

    /// Rotation angle of every pair `(2p, 2p + 1)` for one coordinate.
    pub fn angles(&self, coord: &Coord3D) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (&block, position) in self.axis_split.iter().zip(coord.axes()) {
            let pairs = block / 2;
            for p in 0..pairs {
                let freq = self.base_frequency.powf(-2.0 * p as f64 / block as f64);
                out.push(position * freq);
            }
        }
        out
    }

    /// One row of angles per coordinate.
    pub fn angle_table(&self, coords: &[Coord3D]) -> Array2<f64> {
        let half = self.head_dim / 2;
        let mut table = Array2::zeros((coords.len(), half));
        for (mut row, c) in table.axis_iter_mut(Axis(0)).zip(coords) {
            for (slot, a) in row.iter_mut().zip(self.angles(c)) {
                *slot = a;
            }
        }
        table
    }
}

/// Rotate each row's adjacent pairs by the matching angle. `sign = -1.0`
/// applies the inverse rotation.
pub(crate) fn rotate_pairs(x: ArrayView2<f64>, angles: ArrayView2<f64>, sign: f64) -> Array2<f64> {
    let mut out = x.to_owned();
    for (mut row, ang) in out.axis_iter_mut(Axis(0)).zip(angles.axis_iter(Axis(0))) {
        for (p, &theta) in ang.iter().enumerate() {
            let (s, c) = (sign * theta).sin_cos();
            let (a, b) = (row[2 * p], row[2 * p + 1]);
            row[2 * p] = a * c - b * s;
            row[2 * p + 1] = a * s + b * c;
        }
    }
    out
}

/// Apply the 3-axis rotary embedding to a sequence of head vectors.
pub fn rope_rotate(
    embeddings: ArrayView2<f64>,
    coords: &[Coord3D],
    config: &RopeConfig,
) -> Result<Array2<f64>, PositionError> {
    if embeddings.nrows() != coords.len() {
        return Err(PositionError::DimMismatch(format!(
            "{} vectors but {} coordinates",
            embeddings.nrows(),
            coords.len()
        )));
    }
    if embeddings.ncols() != config.head_dim {
        return Err(PositionError::DimMismatch(format!(
            "vector dim {} but head_dim {}",
            embeddings.ncols(),
            config.head_dim
        )));
    }
    Ok(rotate_pairs(embeddings, config.angle_table(coords).view(), 1.0))
}

/// Scaled dot-product logits between rotated queries and keys.
pub fn attention_logits(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    q_coords: &[Coord3D],
    k_coords: &[Coord3D],
    config: &RopeConfig,
) -> Result<Array2<f64>, PositionError> {
    let q = rope_rotate(queries, q_coords, config)?;
    let k = rope_rotate(keys, k_coords, config)?;
    Ok(q.dot(&k.t()) / (config.head_dim as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionsDump {
    pub text: Vec<[f64; 3]>,
    pub image: BTreeMap<String, Vec<[f64; 3]>>,
    pub audio: BTreeMap<String, Vec<[f64; 3]>>,
    pub tts: BTreeMap<String, Vec<[f64; 3]>>,
}

impl From<&PositionalAssignment> for PositionsDump {
    fn from(p: &PositionalAssignment) -> Self {
        let rows = |v: &[Coord3D]| v.iter().map(Coord3D::axes).collect::<Vec<_>>();
        PositionsDump {
            text: rows(&p.text_coords),
            image: p
                .image_coords
                .iter()
                .map(|(k, g)| (k.to_string(), rows(&g.coords)))
                .collect(),
            audio: p.audio_coords.iter().map(|(k, v)| (k.to_string(), rows(v))).collect(),
            tts: p.tts_coords.iter().map(|(k, v)| (k.to_string(), rows(v))).collect(),
        }
    }
}
