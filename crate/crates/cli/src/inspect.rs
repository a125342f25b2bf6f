use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context};
use omnicond::{
    assign_positions, build_speech_mask, parse_caption, serialize_caption, validate_caption, CaptionDump, Coord3D,
    OmniCaption, PositionalAssignment,
};
use serde::Serialize;

use crate::output::{to_json, write_file, Output};
use crate::RefArgs;

/// Read, parse and validate a caption file. Parse errors carry
/// `path:line:column`.
pub fn load_caption(path: &Path) -> anyhow::Result<OmniCaption> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let caption = parse_caption(&text).map_err(|e| match e.location() {
        Some(_) => anyhow!("{}:{e}", path.display()),
        None => anyhow!("{}: {e}", path.display()),
    })?;
    let diagnostics = validate_caption(&caption);
    if let Some(d) = diagnostics.first() {
        bail!(
            "{}: {} diagnostics, first {:?} at tokens {:?}: {}",
            path.display(),
            diagnostics.len(),
            d.kind,
            d.range,
            d.message
        );
    }
    let again = parse_caption(&serialize_caption(&caption))?;
    ensure!(
        again == caption,
        "{}: caption does not survive a round trip",
        path.display()
    );
    Ok(caption)
}

pub fn parse(path: &Path, json: Option<&Path>, out: &Output) -> anyhow::Result<()> {
    let caption = load_caption(path)?;
    let dump = CaptionDump::from(&caption);
    match json {
        Some(target) => write_file(target, &to_json(&dump)?),
        None => out.emit_json("caption.json", &dump),
    }
}

pub fn parse_grid(text: &str) -> anyhow::Result<(usize, usize)> {
    let (h, w) = text
        .split_once('x')
        .ok_or_else(|| anyhow!("grid `{text}` is not of the form HxW"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

pub type RefShapes = (
    BTreeMap<u32, (usize, usize)>,
    BTreeMap<u32, usize>,
    BTreeMap<usize, usize>,
);

/// Reference shapes for every subject and TTS lengths for every utterance.
pub fn ref_shapes(caption: &OmniCaption, refs: &RefArgs) -> anyhow::Result<RefShapes> {
    let grid = parse_grid(&refs.grid)?;
    let grids = if grid.0 * grid.1 == 0 {
        BTreeMap::new()
    } else {
        caption.subjects.iter().map(|s| (s.subject_id, grid)).collect()
    };
    let audio = if refs.audio == 0 {
        BTreeMap::new()
    } else {
        caption.subjects.iter().map(|s| (s.subject_id, refs.audio)).collect()
    };
    let tts = caption
        .utterances
        .iter()
        .enumerate()
        .map(|(u, utt)| (u, if refs.tts == 0 { utt.content.len() } else { refs.tts }))
        .collect();
    Ok((grids, audio, tts))
}

#[derive(Serialize)]
struct TokenCoord<'a> {
    i: usize,
    text: &'a str,
    coord: Coord3D,
}

#[derive(Serialize)]
struct PositionsDump<'a> {
    tokens: Vec<TokenCoord<'a>>,
    assignment: &'a PositionalAssignment,
}

/// The anchoring contract: references sit one and two steps after their
/// descriptor, and text resumes three steps after it.
pub fn check_anchoring(caption: &OmniCaption, a: &PositionalAssignment) -> anyhow::Result<()> {
    for s in &caption.subjects {
        let e = a.text_coords[s.span.end].t;
        if let Some(grid) = a.image_coords.get(&s.subject_id) {
            ensure!(
                grid.coords.iter().all(|c| c.t == e + 1.0),
                "sub{} image tokens off anchor",
                s.subject_id
            );
        }
        if let Some(audio) = a.audio_coords.get(&s.subject_id) {
            ensure!(
                audio.iter().all(|c| c.t == e + 2.0),
                "sub{} audio tokens off anchor",
                s.subject_id
            );
        }
        if let Some(next) = a.text_coords.get(s.span.end + 1) {
            ensure!(
                next.t == e + 3.0,
                "text after sub{} resumes at +{}",
                s.subject_id,
                next.t - e
            );
        }
    }
    for (u, coords) in &a.tts_coords {
        ensure!(
            coords.iter().all(|c| c.a3 == 1.0),
            "utterance {u} TTS tokens lack the TTS flag"
        );
    }
    Ok(())
}

pub fn positions(path: &Path, refs: &RefArgs, out: &Output) -> anyhow::Result<()> {
    let caption = load_caption(path)?;
    let (grids, audio, tts) = ref_shapes(&caption, refs)?;
    let assignment = assign_positions(&caption, &grids, &audio, &tts)?;
    check_anchoring(&caption, &assignment)?;
    let dump = PositionsDump {
        tokens: caption
            .tokens
            .iter()
            .zip(&assignment.text_coords)
            .map(|(t, c)| TokenCoord {
                i: t.index,
                text: &t.text,
                coord: *c,
            })
            .collect(),
        assignment: &assignment,
    };
    out.emit_json("positions.json", &dump)
}

#[derive(Serialize)]
struct MaskDump<'a> {
    tokens: Vec<&'a str>,
    mask: Vec<u8>,
    spans: Vec<(usize, usize)>,
}

pub fn mask(path: &Path, out: &Output) -> anyhow::Result<()> {
    let caption = load_caption(path)?;
    let mask = build_speech_mask(&caption);
    let content: usize = caption.utterances.iter().map(|u| u.content.len()).sum();
    ensure!(
        mask.active_rows().len() == content,
        "mask covers {} tokens but utterances hold {content}",
        mask.active_rows().len()
    );
    let dump = MaskDump {
        tokens: caption.tokens.iter().map(|t| t.text.as_str()).collect(),
        mask: mask.values.clone(),
        spans: mask.spans.iter().map(|s| (s.start, s.end)).collect(),
    };
    out.emit_json("mask.json", &dump)
}
