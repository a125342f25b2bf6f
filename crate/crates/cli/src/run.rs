use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Context};
use ndarray::Array2;
use omnicond::toy::{train_toy as train, ToyConfig};
use omnicond::{
    assign_positions, build_speech_mask, init_mtpca_params, init_ocf_params, mtpca_forward, ocf_forward,
    ConditionBundle, MtpcaConfig, OcfConfig, ParamStore, ScheduleConfig, StepKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::inspect::{load_caption, ref_shapes};
use crate::output::Output;
use crate::{DimArgs, RefArgs};

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Add uniform noise of half-width `bound` to every tensor. Zero-initialized
/// outputs become active; norm gains stay near one.
pub fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, bound: f64) {
    for (_, t) in store.iter_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-bound..bound));
    }
}

fn row_norm(m: &Array2<f64>, i: usize) -> f64 {
    m.row(i).dot(&m.row(i)).sqrt()
}

#[derive(Serialize)]
struct TokenEffect<'a> {
    i: usize,
    text: &'a str,
    speech: bool,
    gate_delta: f64,
    fused_delta: f64,
}

#[derive(Serialize)]
struct DemoReport<'a> {
    seed: u64,
    ocf: OcfConfig,
    identity_at_init: bool,
    tokens: Vec<TokenEffect<'a>>,
}

pub fn ocf_demo(path: &Path, dims: &DimArgs, refs: &RefArgs, seed: u64, out: &Output) -> anyhow::Result<()> {
    let caption = load_caption(path)?;
    let (grids, audio, tts) = ref_shapes(&caption, refs)?;
    let assignment = assign_positions(&caption, &grids, &audio, &tts)?;
    let lengths: Vec<usize> = tts.values().copied().collect();
    let mask = build_speech_mask(&caption);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.d;
    let bundle = ConditionBundle {
        c_txt: uniform(&mut rng, caption.tokens.len(), d),
        c_v: uniform(&mut rng, assignment.image_len(), d),
        c_a: uniform(&mut rng, assignment.audio_len(), d),
        c_tts: uniform(&mut rng, assignment.tts_len(), d),
        assignment,
    };
    let config = OcfConfig {
        d,
        layers: dims.layers,
        heads: dims.heads,
    };
    let rope = config.rope()?;
    let mut ocf = init_ocf_params(config, seed)?;
    let mut gate = init_mtpca_params(MtpcaConfig { d, heads: dims.heads }, seed)?;

    let run = |ocf: &omnicond::OcfParams, gate: &omnicond::MtpcaParams| -> anyhow::Result<(Array2<f64>, Array2<f64>)> {
        let gated = mtpca_forward(&bundle.c_txt, &bundle.c_tts, &lengths, &mask, gate)?;
        let mut fused_in = bundle.clone();
        fused_in.c_txt = gated.clone();
        Ok((gated, ocf_forward(&fused_in, ocf, &rope)?))
    };
    let (gated, fused) = run(&ocf, &gate)?;
    let identity = gated == bundle.c_txt && fused == bundle.c_txt;
    ensure!(
        identity,
        "freshly initialized gate and fusion changed the prompt embedding"
    );

    perturb(&mut ocf.store, &mut rng, 0.5);
    perturb(&mut gate.store, &mut rng, 0.5);
    let (gated, fused) = run(&ocf, &gate)?;
    for (i, &m) in mask.values.iter().enumerate() {
        ensure!(
            m == 1 || gated.row(i) == bundle.c_txt.row(i),
            "speech gate touched non-speech token {i}"
        );
    }
    let gate_delta = &gated - &bundle.c_txt;
    let fused_delta = &fused - &gated;
    let report = DemoReport {
        seed,
        ocf: config,
        identity_at_init: identity,
        tokens: caption
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| TokenEffect {
                i,
                text: &t.text,
                speech: mask.values[i] == 1,
                gate_delta: row_norm(&gate_delta, i),
                fused_delta: row_norm(&fused_delta, i),
            })
            .collect(),
    };
    out.emit_json("ocf_demo.json", &report)
}

#[derive(Serialize)]
struct ToySummary {
    seed: u64,
    steps: usize,
    javg_steps: usize,
    tts_only_steps: usize,
    initial_loss: f64,
    final_loss: f64,
    reduction: f64,
}

pub fn train_toy(
    steps: usize,
    scale: usize,
    min_reduction: Option<f64>,
    seed: u64,
    out: &Output,
) -> anyhow::Result<()> {
    let config = ToyConfig {
        seed,
        steps: (steps / scale).max(2),
        ..ToyConfig::default()
    };
    let (report, _) = train(&config)?;
    let mut log = String::from("step,stage,kind,lr,loss\n");
    for s in &report.log {
        let kind = if s.kind == StepKind::Javg { "JAVG" } else { "TTS_ONLY" };
        writeln!(log, "{},{},{},{},{}", s.step, s.stage, kind, s.lr, s.loss)?;
    }
    out.emit_file_only("toy_log.csv", &log)?;
    let javg = report.log.iter().filter(|s| s.kind == StepKind::Javg).count();
    let summary = ToySummary {
        seed,
        steps: report.log.len(),
        javg_steps: javg,
        tts_only_steps: report.log.len() - javg,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        reduction: report.reduction(),
    };
    ensure!(summary.final_loss.is_finite(), "training diverged");
    out.emit_json("toy_summary.json", &summary)?;
    if let Some(min) = min_reduction {
        ensure!(
            summary.reduction >= min,
            "loss fell by {:.1}%, below the required {:.1}%",
            100.0 * summary.reduction,
            100.0 * min
        );
    }
    Ok(())
}

pub fn schedule(stages: &str, scale: usize, out: &Output) -> anyhow::Result<()> {
    let config = if stages == "default" {
        ScheduleConfig::default()
    } else {
        ScheduleConfig::load(Path::new(stages)).with_context(|| format!("loading {stages}"))?
    };
    let plan = config.scaled(scale).build()?;
    out.emit("schedule.csv", &plan.to_csv())
}
