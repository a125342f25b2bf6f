//! Deterministic inputs for the benchmarks.

use ndarray::Array2;
use omnicond::{ConditionBundle, DenoiserState};

/// A caption with `subjects` described subjects and `turns` utterances that
/// cycle through the speakers.
pub fn dialogue(subjects: usize, turns: usize) -> String {
    let mut text = String::new();
    for s in 1..=subjects {
        text.push_str(&format!("A person <sub{s}> is tall , with warm voice . "));
    }
    text.push_str("They gather in a bright hall . ");
    for t in 0..turns {
        let speaker = t % subjects + 1;
        text.push_str(&format!("<sub{speaker}> says <S> this is line number {t} <E> . "));
    }
    text
}

/// Smooth pseudo-random fill; cheap and identical across runs.
pub fn wave(rows: usize, cols: usize, phase: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| ((i * cols + j) as f64 * 0.37 + phase).sin())
}

pub fn bundle(assignment: omnicond::PositionalAssignment, text_len: usize, d: usize) -> ConditionBundle {
    ConditionBundle {
        c_txt: wave(text_len, d, 0.1),
        c_v: wave(assignment.image_len(), d, 0.2),
        c_a: wave(assignment.audio_len(), d, 0.3),
        c_tts: wave(assignment.tts_len(), d, 0.4),
        assignment,
    }
}

pub fn state(n_v: usize, n_a: usize, d_video: usize, d_audio: usize) -> DenoiserState {
    DenoiserState {
        z_v: wave(n_v, d_video, 0.5),
        z_a: wave(n_a, d_audio, 0.6),
        t: 0.4,
        ref_v: wave(2, d_video, 0.7),
        ref_a: wave(2, d_audio, 0.8),
    }
}
