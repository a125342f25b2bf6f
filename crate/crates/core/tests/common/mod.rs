#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeMap;

use ndarray::Array2;
use omnicond::{assign_positions, parse_caption, ConditionBundle, OmniCaption, ParamStore, PositionalAssignment};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const LABELS: &[&str] = &["A", "The", "An old", "A young", "Her", "This"];
const VISUAL: &[&str] = &[
    "tall",
    "short",
    "red",
    "smiling",
    "bearded",
    "off-screen",
    "calm",
    "kind",
];
const ACOUSTIC: &[&str] = &["deep", "soft", "raspy", "bright", "voice", "timbre", "low", "warm"];
const WORDS: &[&str] = &[
    "they", "walk", "the", "park", "rain", "falls", "slowly", "light", "fades", "near",
];
const SPEECH: &[&str] = &[
    "hello", "there", "how", "are", "you", "fine", "thanks", "see", "ya", "ok",
];

/// A generated caption together with the structure it was built from.
#[derive(Debug, Clone)]
pub struct GenCaption {
    pub text: String,
    pub subject_ids: Vec<u32>,
    /// Speaker of every utterance, in caption order.
    pub speakers: Vec<u32>,
    /// Words of every utterance, in caption order.
    pub utterances: Vec<Vec<String>>,
    /// Word count of every descriptor's visual and acoustic part.
    pub descriptor_shapes: Vec<(usize, usize, usize)>,
}

fn words(rng: &mut ChaCha8Rng, pool: &[&str], count: std::ops::RangeInclusive<usize>) -> Vec<String> {
    let n = rng.random_range(count);
    (0..n).map(|_| pool.choose(rng).unwrap().to_string()).collect()
}

/// Random valid caption with `subjects` descriptors and `utterances` speech
/// spans. Speakers are drawn at random, so some identities stay silent.
pub fn gen_caption(rng: &mut ChaCha8Rng, subjects: usize, utterances: usize) -> GenCaption {
    let mut parts: Vec<String> = Vec::new();
    let mut ids = Vec::new();
    let mut next = 1u32;
    let mut descriptor_shapes = Vec::new();
    for _ in 0..subjects {
        let id = next + rng.random_range(0..2);
        next = id + 1;
        ids.push(id);
        let label = if rng.random_bool(0.2) {
            Vec::new()
        } else {
            vec![LABELS.choose(rng).unwrap().to_string()]
        };
        let label_len: usize = label.iter().map(|l| l.split(' ').count()).sum();
        let visual = words(rng, VISUAL, 1..=3);
        let acoustic = words(rng, ACOUSTIC, 1..=3);
        descriptor_shapes.push((label_len, visual.len(), acoustic.len()));
        parts.extend(label);
        parts.push(format!("<sub{id}>"));
        parts.push("is".into());
        parts.extend(visual);
        if rng.random_bool(0.3) {
            parts.push(",".into());
        }
        parts.push("with".into());
        parts.extend(acoustic);
        parts.push(".".into());
    }
    let min_global = usize::from(subjects == 0);
    for _ in 0..rng.random_range(min_global..=2) {
        let mut sentence = words(rng, WORDS, 1..=4);
        if !ids.is_empty() && rng.random_bool(0.5) {
            let at = rng.random_range(0..=sentence.len());
            sentence.insert(at, format!("<sub{}>", ids.choose(rng).unwrap()));
        }
        parts.extend(sentence);
        parts.push(".".into());
    }
    let mut speakers = Vec::new();
    let mut spoken = Vec::new();
    let mut remaining = utterances;
    while remaining > 0 {
        let speaker = *ids.choose(rng).expect("speech needs a subject");
        let in_sentence = if remaining > 1 && rng.random_bool(0.3) { 2 } else { 1 };
        parts.push(format!("<sub{speaker}>"));
        parts.push("says".into());
        for k in 0..in_sentence {
            if k > 0 {
                parts.push("then".into());
            }
            let content = words(rng, SPEECH, 1..=4);
            parts.push("<S>".into());
            parts.extend(content.clone());
            parts.push("<E>".into());
            speakers.push(speaker);
            spoken.push(content);
        }
        parts.push(".".into());
        remaining -= in_sentence;
    }
    GenCaption {
        text: parts.join(" "),
        subject_ids: ids,
        speakers,
        utterances: spoken,
        descriptor_shapes,
    }
}

/// Proptest settings without on-disk regression files.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Overwrite every tensor with uniform noise so no zero-initialized path
/// hides a gradient. Norm gains stay near 1.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, bound: f64) {
    for (name, t) in store.iter_mut() {
        let centre = if name.contains("norm") { 1.0 } else { 0.0 };
        t.mapv_inplace(|_| centre + rng.random_range(-bound..bound));
    }
}

/// Reference sizes per subject: image grid, audio length; and TTS length
/// per utterance. Subjects may get no image (off-screen) or no audio.
pub struct RefShapes {
    pub grids: BTreeMap<u32, (usize, usize)>,
    pub audio: BTreeMap<u32, usize>,
    pub tts: BTreeMap<usize, usize>,
}

pub fn random_ref_shapes(rng: &mut ChaCha8Rng, caption: &OmniCaption) -> RefShapes {
    let mut grids = BTreeMap::new();
    let mut audio = BTreeMap::new();
    for s in &caption.subjects {
        if rng.random_bool(0.8) {
            grids.insert(s.subject_id, (rng.random_range(1..=3), rng.random_range(1..=3)));
        }
        if rng.random_bool(0.8) {
            audio.insert(s.subject_id, rng.random_range(1..=3));
        }
    }
    let tts = (0..caption.utterances.len())
        .map(|u| (u, rng.random_range(1..=4)))
        .collect();
    RefShapes { grids, audio, tts }
}

pub fn assignment_for(rng: &mut ChaCha8Rng, caption: &OmniCaption) -> PositionalAssignment {
    let shapes = random_ref_shapes(rng, caption);
    assign_positions(caption, &shapes.grids, &shapes.audio, &shapes.tts).unwrap()
}

pub fn bundle_for(rng: &mut ChaCha8Rng, assignment: PositionalAssignment, d: usize) -> ConditionBundle {
    let t = assignment.text_coords.len();
    let (nv, na, ntts) = (assignment.image_len(), assignment.audio_len(), assignment.tts_len());
    ConditionBundle {
        c_txt: uniform(rng, t, d, 1.0),
        c_v: uniform(rng, nv, d, 1.0),
        c_a: uniform(rng, na, d, 1.0),
        c_tts: uniform(rng, ntts, d, 1.0),
        assignment,
    }
}

pub fn parse(text: &str) -> OmniCaption {
    parse_caption(text).unwrap_or_else(|e| panic!("{text}: {e}"))
}

/// TTS rows per utterance in caption order.
pub fn tts_lengths(assignment: &PositionalAssignment) -> Vec<usize> {
    assignment.tts_coords.values().map(Vec::len).collect()
}
