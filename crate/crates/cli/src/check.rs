use std::path::PathBuf;

use anyhow::ensure;
use clap::Args;
use omnicond::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use omnicond::toy::{random_inputs, InputShape, TOY_CAPTION};
use omnicond::{
    build_speech_mask, init_denoiser_params, joint_loss_grads, mtpca_forward, mtpca_vjp, ocf_forward, ocf_vjp,
    parse_caption, ConditionInputs, DenoiserConfig, DenoiserParams, DenoiserState, FlowSample, Model, ModelConfig,
    MtpcaParams, OcfParams, OmniCaption, OptimConfig, ParamGroup, ParamStore, ScheduleConfig, StageName, StepKind,
    Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::inspect::{check_anchoring, load_caption};
use crate::output::Output;
use crate::run::{perturb, uniform};

/// Relative finite-difference error every analytic gradient must beat.
const TOLERANCE: f64 = 1e-4;
const D: usize = 8;

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Analytic gradients against central finite differences.
    #[arg(long)]
    grads: bool,
    /// TTS-only steps leave the video tower and coupling untouched.
    #[arg(long)]
    severance: bool,
    /// The speech gate only writes speech tokens.
    #[arg(long)]
    isolation: bool,
    /// Fresh gate and fusion parameters are an exact identity.
    #[arg(long)]
    identity: bool,
    /// Reference tokens sit next to their descriptors.
    #[arg(long)]
    anchoring: bool,
    /// The default plan alternates and decays as configured.
    #[arg(long)]
    schedule: bool,
    /// Caption to check against. Defaults to a built-in two-subject dialogue.
    #[arg(long)]
    caption: Option<PathBuf>,
}

struct Setup {
    caption: OmniCaption,
    inputs: ConditionInputs,
    rng: ChaCha8Rng,
}

impl Setup {
    fn new(args: &CheckArgs, seed: u64) -> anyhow::Result<Self> {
        let caption = match &args.caption {
            Some(path) => load_caption(path)?,
            None => parse_caption(TOY_CAPTION)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = random_inputs(&caption, D, &InputShape::default(), 1.0, &mut rng)?;
        Ok(Self { caption, inputs, rng })
    }

    fn model(&mut self, seed: u64, perturbed: bool) -> anyhow::Result<Model> {
        let mut model = Model::init(ModelConfig::desk(D, D, D), seed)?;
        if perturbed {
            perturb(&mut model.store, &mut self.rng, 0.3);
        }
        Ok(model)
    }

    fn sample(&mut self) -> FlowSample {
        let (n_v, n_a) = (self.rng.random_range(1..=4), self.rng.random_range(1..=3));
        let rng = &mut self.rng;
        FlowSample {
            state: DenoiserState {
                z_v: uniform(rng, n_v, D),
                z_a: uniform(rng, n_a, D),
                t: rng.random_range(0.0..1.0),
                ref_v: uniform(rng, 1, D),
                ref_a: uniform(rng, 1, D),
            },
            target_v: uniform(rng, n_v, D),
            target_a: uniform(rng, n_a, D),
        }
    }
}

fn subset(store: &ParamStore, group: ParamGroup) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| ParamGroup::of(n).ok() == Some(group)) {
        out.insert(name, t.clone());
    }
    out
}

#[derive(Serialize)]
struct GradSummary {
    name: &'static str,
    entries: usize,
    max_rel_error: f64,
    worst_tensor: String,
}

fn summarize(name: &'static str, report: &GradCheckReport) -> anyhow::Result<GradSummary> {
    let worst = report.worst().map(|t| t.name.clone()).unwrap_or_default();
    ensure!(
        report.max_rel_error() < TOLERANCE,
        "{name}: {worst} has relative error {:.3e}",
        report.max_rel_error()
    );
    Ok(GradSummary {
        name,
        entries: report.entries(),
        max_rel_error: report.max_rel_error(),
        worst_tensor: worst,
    })
}

fn grads(s: &mut Setup, seed: u64, out: &Output) -> anyhow::Result<String> {
    let fd = GradCheckConfig {
        max_entries: 16,
        seed,
        ..GradCheckConfig::default()
    };
    let mut summaries = Vec::new();
    let model = s.model(seed, true)?;
    let bundle = s.inputs.bundle.clone();
    let cot = uniform(&mut s.rng, bundle.c_txt.nrows(), D);

    let ocf = OcfParams::from_store(model.config.ocf, subset(&model.store, ParamGroup::Ocf))?;
    let (_, g) = ocf_vjp(&bundle, &ocf, &model.rope, &cot)?;
    let report = check_gradients(
        &ocf.store,
        &g.params,
        |store| {
            let p = OcfParams::from_store(ocf.config, store.clone()).unwrap();
            (ocf_forward(&bundle, &p, &model.rope).unwrap() * &cot).sum()
        },
        &fd,
    );
    summaries.push(summarize("fusion", &report)?);

    let gate = MtpcaParams::from_store(model.config.mtpca, subset(&model.store, ParamGroup::Mtpca))?;
    let (lengths, mask) = (&s.inputs.tts_lengths, &s.inputs.mask);
    let (_, g) = mtpca_vjp(&bundle.c_txt, &bundle.c_tts, lengths, mask, &gate, &cot)?;
    let report = check_gradients(
        &gate.store,
        &g.params,
        |store| {
            let p = MtpcaParams::from_store(gate.config, store.clone()).unwrap();
            (mtpca_forward(&bundle.c_txt, &bundle.c_tts, lengths, mask, &p).unwrap() * &cot).sum()
        },
        &fd,
    );
    summaries.push(summarize("speech gate", &report)?);

    let config = DenoiserConfig::desk(D, D, D);
    let mut den = init_denoiser_params(config, seed)?;
    perturb(&mut den.store, &mut s.rng, 0.3);
    let sample = s.sample();
    let context = uniform(&mut s.rng, 4, D);
    let (_, g) = joint_loss_grads(&sample.state, &context, &den, &sample.target_v, &sample.target_a)?;
    let report = check_gradients(
        &den.store,
        &g.params,
        |store| {
            let p = DenoiserParams {
                config,
                store: store.clone(),
            };
            joint_loss_grads(&sample.state, &context, &p, &sample.target_v, &sample.target_a)
                .unwrap()
                .0
        },
        &fd,
    );
    summaries.push(summarize("denoiser", &report)?);

    let batch = [s.sample(), s.sample()];
    for (name, kind) in [
        ("pipeline joint", StepKind::Javg),
        ("pipeline tts-only", StepKind::TtsOnly),
    ] {
        let (_, g) = model.loss_and_grads(&s.inputs, &batch, kind)?;
        let report = check_gradients(
            &model.store,
            &g,
            |store| {
                let m = Model {
                    store: store.clone(),
                    ..model.clone()
                };
                m.loss(&s.inputs, &batch, kind).unwrap()
            },
            &GradCheckConfig { max_entries: 6, ..fd },
        );
        summaries.push(summarize(name, &report)?);
    }
    out.emit_file_only("grad_check.json", &crate::output::to_json(&summaries)?)?;
    let worst = summaries.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let entries: usize = summaries.iter().map(|g| g.entries).sum();
    Ok(format!(
        "{entries} entries, worst relative error {worst:.2e} (< {TOLERANCE:e})"
    ))
}

fn severance(s: &mut Setup, seed: u64) -> anyhow::Result<String> {
    let frozen = |n: &str| matches!(ParamGroup::of(n), Ok(ParamGroup::Video | ParamGroup::Cross));
    let model = s.model(seed, true)?;
    let batch = [s.sample(), s.sample()];
    let (_, g) = model.loss_and_grads(&s.inputs, &batch, StepKind::TtsOnly)?;
    if let Some(name) = g.names().find(|n| frozen(n)) {
        anyhow::bail!("TTS-only step produced a gradient for {name}");
    }
    let snapshot = |m: &Model| -> Vec<_> {
        m.store
            .iter()
            .filter(|(n, _)| frozen(n))
            .map(|(_, t)| t.clone())
            .collect()
    };
    let mut trainer = Trainer::new(model, OptimConfig::default());
    trainer.step(&s.inputs, &batch, StepKind::Javg, 1e-4)?;
    let before = snapshot(&trainer.model);
    trainer.step(&s.inputs, &batch, StepKind::TtsOnly, 1e-4)?;
    ensure!(
        snapshot(&trainer.model) == before,
        "TTS-only update moved video or coupling weights"
    );
    Ok(format!(
        "{} frozen tensors untouched by a TTS-only update",
        before.len()
    ))
}

fn isolation(s: &mut Setup, seed: u64) -> anyhow::Result<String> {
    let model = s.model(seed, true)?;
    let gate = MtpcaParams::from_store(model.config.mtpca, subset(&model.store, ParamGroup::Mtpca))?;
    let b = &s.inputs.bundle;
    let out = mtpca_forward(&b.c_txt, &b.c_tts, &s.inputs.tts_lengths, &s.inputs.mask, &gate)?;
    let mask = build_speech_mask(&s.caption);
    for (i, &m) in mask.values.iter().enumerate() {
        let same = out
            .row(i)
            .iter()
            .zip(b.c_txt.row(i))
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure!(
            (m == 0) == same,
            "token {i} (mask {m}) {}",
            if same { "unchanged" } else { "changed" }
        );
    }
    Ok(format!(
        "{} speech tokens updated, the rest bitwise unchanged",
        mask.active_rows().len()
    ))
}

fn identity(s: &mut Setup, seed: u64) -> anyhow::Result<String> {
    let model = s.model(seed, false)?;
    let out = model.condition(&s.inputs)?;
    ensure!(
        out == s.inputs.bundle.c_txt,
        "fresh conditioning stack altered the prompt embedding"
    );
    Ok(format!("{} tokens pass through unchanged", out.nrows()))
}

fn anchoring(s: &mut Setup) -> anyhow::Result<String> {
    check_anchoring(&s.caption, &s.inputs.bundle.assignment)?;
    Ok(format!("{} subjects anchored", s.caption.subjects.len()))
}

fn schedule() -> anyhow::Result<String> {
    let plan = ScheduleConfig::default().build()?;
    for (i, step) in plan.stage_steps(StageName::Stage1SingleSubject).enumerate() {
        let expected = if i % 2 == 0 { StepKind::Javg } else { StepKind::TtsOnly };
        ensure!(step.kind == expected, "stage 1 step {i} is {:?}", step.kind);
    }
    ensure!(
        plan.stage_steps(StageName::Stage2MultiSubject)
            .all(|s| s.kind == StepKind::Javg),
        "stage 2 has TTS-only steps"
    );
    let (first, last) = (plan.steps[0].lr, plan.steps[plan.len() - 1].lr);
    ensure!(
        first == plan.optim.lr_init && last == plan.optim.lr_final,
        "lr runs {first} to {last}"
    );
    Ok(format!("{} steps, lr {first} to {last}", plan.len()))
}

pub fn run(args: &CheckArgs, seed: u64, out: &Output) -> anyhow::Result<()> {
    let all = !(args.grads || args.severance || args.isolation || args.identity || args.anchoring || args.schedule);
    let mut setup = Setup::new(args, seed)?;
    let mut failures = 0;
    let mut report = |name: &str, result: anyhow::Result<String>| match result {
        Ok(detail) => println!("ok   {name}: {detail}"),
        Err(e) => {
            failures += 1;
            println!("FAIL {name}: {e:#}");
        }
    };
    if all || args.identity {
        report("identity", identity(&mut setup, seed));
    }
    if all || args.isolation {
        report("isolation", isolation(&mut setup, seed));
    }
    if all || args.anchoring {
        report("anchoring", anchoring(&mut setup));
    }
    if all || args.severance {
        report("severance", severance(&mut setup, seed));
    }
    if all || args.schedule {
        report("schedule", schedule());
    }
    if all || args.grads {
        report("grads", grads(&mut setup, seed, out));
    }
    ensure!(failures == 0, "{failures} checks failed");
    Ok(())
}
