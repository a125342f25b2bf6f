//! Seeded finite-difference trials shared by the gradient tests and the
//! acceptance suite.

use ndarray::Array2;
use omnicond::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use omnicond::{
    init_denoiser_params, init_mtpca_params, init_ocf_params, joint_loss_grads, mtpca_forward, mtpca_vjp, ocf_forward,
    ocf_vjp, DenoiserConfig, DenoiserState, GradMap, Gradients, MtpcaConfig, OcfConfig, ParamStore, Span, SpeechMask,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{assignment_for, bundle_for, parse, randomize, uniform};

pub const TOLERANCE: f64 = 1e-4;

pub fn fd_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    }
}

pub fn input_store(inputs: &[(&str, &Array2<f64>)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, value) in inputs {
        store.insert(*name, (*value).clone());
    }
    store
}

pub fn input_grads(grads: &Gradients) -> GradMap {
    grads.inputs.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

pub fn weighted_sum(out: &Array2<f64>, cot: &Array2<f64>) -> f64 {
    (out * cot).sum()
}

pub fn assert_report(what: &str, report: &GradCheckReport) {
    let worst = report.worst().expect("tensors checked");
    assert!(
        report.max_rel_error() < TOLERANCE,
        "{what}: {} has relative error {:.3e}",
        worst.name,
        worst.max_rel_error
    );
}

const SHORT_CAPTIONS: &[&str] = &[
    "<sub1> is tall with calm .",
    "A <sub1> is red with low .",
    "It rains all day .",
    "<sub2> is kind with soft .",
];

pub fn ocf_trial(seed: u64) -> (GradCheckReport, GradCheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let caption = parse(SHORT_CAPTIONS[seed as usize % SHORT_CAPTIONS.len()]);
    let (d, heads) = [(8, 1), (16, 2), (12, 1)][rng.random_range(0..3)];
    let config = OcfConfig { d, layers: 2, heads };
    let assignment = assignment_for(&mut rng, &caption);
    let bundle = bundle_for(&mut rng, assignment, d);
    let mut params = init_ocf_params(config, seed).unwrap();
    randomize(&mut params.store, &mut rng, 0.5);
    let rope = config.rope().unwrap();
    let cot = uniform(&mut rng, bundle.c_txt.nrows(), d, 1.0);
    let (out, grads) = ocf_vjp(&bundle, &params, &rope, &cot).unwrap();
    assert_eq!(out, ocf_forward(&bundle, &params, &rope).unwrap());

    let param_report = check_gradients(
        &params.store,
        &grads.params,
        |store| {
            let p = omnicond::OcfParams {
                config,
                store: store.clone(),
            };
            weighted_sum(&ocf_forward(&bundle, &p, &rope).unwrap(), &cot)
        },
        &fd_config(seed),
    );
    let inputs = input_store(&[
        ("c_txt", &bundle.c_txt),
        ("c_v", &bundle.c_v),
        ("c_a", &bundle.c_a),
        ("c_tts", &bundle.c_tts),
    ]);
    let input_report = check_gradients(
        &inputs,
        &input_grads(&grads),
        |store| {
            let mut b = bundle.clone();
            b.c_txt = store.get("c_txt").unwrap().clone();
            b.c_v = store.get("c_v").unwrap().clone();
            b.c_a = store.get("c_a").unwrap().clone();
            b.c_tts = store.get("c_tts").unwrap().clone();
            weighted_sum(&ocf_forward(&b, &params, &rope).unwrap(), &cot)
        },
        &fd_config(seed),
    );
    (param_report, input_report)
}

/// Random speech spans over `t` prompt tokens with random TTS lengths.
fn random_mask(rng: &mut ChaCha8Rng, t: usize) -> (SpeechMask, Vec<usize>) {
    let mut values = vec![0u8; t];
    let mut spans = Vec::new();
    let mut i = rng.random_range(0..2);
    while i < t {
        let len = rng.random_range(1..=2).min(t - i);
        spans.push(Span::new(i, i + len - 1));
        for v in &mut values[i..i + len] {
            *v = 1;
        }
        i += len + rng.random_range(1..3);
    }
    let lengths = spans.iter().map(|_| rng.random_range(1..=3)).collect();
    (SpeechMask { values, spans }, lengths)
}

pub fn mtpca_trial(seed: u64) -> (GradCheckReport, GradCheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(2..=6);
    let (d, heads) = [(8, 1), (16, 2), (16, 4)][rng.random_range(0..3)];
    let config = MtpcaConfig { d, heads };
    let (mask, lengths) = random_mask(&mut rng, t);
    let c_txt = uniform(&mut rng, t, d, 1.0);
    let c_tts = uniform(&mut rng, lengths.iter().sum(), d, 1.0);
    let mut params = init_mtpca_params(config, seed).unwrap();
    randomize(&mut params.store, &mut rng, 0.5);
    let cot = uniform(&mut rng, t, d, 1.0);
    let (out, grads) = mtpca_vjp(&c_txt, &c_tts, &lengths, &mask, &params, &cot).unwrap();
    assert_eq!(out, mtpca_forward(&c_txt, &c_tts, &lengths, &mask, &params).unwrap());

    let param_report = check_gradients(
        &params.store,
        &grads.params,
        |store| {
            let p = omnicond::MtpcaParams {
                config,
                store: store.clone(),
            };
            weighted_sum(&mtpca_forward(&c_txt, &c_tts, &lengths, &mask, &p).unwrap(), &cot)
        },
        &fd_config(seed),
    );
    let inputs = input_store(&[("c_txt", &c_txt), ("c_tts", &c_tts)]);
    let input_report = check_gradients(
        &inputs,
        &input_grads(&grads),
        |store| {
            let out = mtpca_forward(
                store.get("c_txt").unwrap(),
                store.get("c_tts").unwrap(),
                &lengths,
                &mask,
                &params,
            )
            .unwrap();
            weighted_sum(&out, &cot)
        },
        &fd_config(seed),
    );
    (param_report, input_report)
}

pub struct JointCase {
    pub config: DenoiserConfig,
    pub state: DenoiserState,
    pub context: Array2<f64>,
    pub target_v: Array2<f64>,
    pub target_a: Array2<f64>,
}

pub fn joint_case(rng: &mut ChaCha8Rng) -> JointCase {
    let (dv, da) = [(8, 8), (8, 6), (12, 8)][rng.random_range(0..3)];
    let dc = [8, 12, 16][rng.random_range(0..3)];
    let config = DenoiserConfig::desk(dv, da, dc);
    let n_v = rng.random_range(1..=8);
    let n_a = rng.random_range(1..=4);
    let (r_v, r_a, n_ctx) = (
        rng.random_range(0..=2),
        rng.random_range(0..=2),
        rng.random_range(1..=6),
    );
    let state = DenoiserState {
        z_v: uniform(rng, n_v, dv, 1.0),
        z_a: uniform(rng, n_a, da, 1.0),
        t: rng.random_range(0.0..1.0),
        ref_v: uniform(rng, r_v, dv, 1.0),
        ref_a: uniform(rng, r_a, da, 1.0),
    };
    let context = uniform(rng, n_ctx, dc, 1.0);
    JointCase {
        config,
        target_v: uniform(rng, n_v, dv, 1.0),
        target_a: uniform(rng, n_a, da, 1.0),
        state,
        context,
    }
}

pub fn joint_trial(seed: u64) -> (GradCheckReport, GradCheckReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = joint_case(&mut rng);
    let mut params = init_denoiser_params(case.config, seed).unwrap();
    randomize(&mut params.store, &mut rng, 0.5);
    let (_, grads) = joint_loss_grads(&case.state, &case.context, &params, &case.target_v, &case.target_a).unwrap();
    let loss_with = |store: &ParamStore, state: &DenoiserState, context: &Array2<f64>| {
        let p = omnicond::DenoiserParams {
            config: case.config,
            store: store.clone(),
        };
        joint_loss_grads(state, context, &p, &case.target_v, &case.target_a)
            .unwrap()
            .0
    };
    let param_report = check_gradients(
        &params.store,
        &grads.params,
        |store| loss_with(store, &case.state, &case.context),
        &fd_config(seed),
    );
    let inputs = input_store(&[
        ("z_v", &case.state.z_v),
        ("z_a", &case.state.z_a),
        ("ref_v", &case.state.ref_v),
        ("ref_a", &case.state.ref_a),
        ("context", &case.context),
    ]);
    let input_report = check_gradients(
        &inputs,
        &input_grads(&grads),
        |store| {
            let state = DenoiserState {
                z_v: store.get("z_v").unwrap().clone(),
                z_a: store.get("z_a").unwrap().clone(),
                ref_v: store.get("ref_v").unwrap().clone(),
                ref_a: store.get("ref_a").unwrap().clone(),
                t: case.state.t,
            };
            loss_with(&params.store, &state, store.get("context").unwrap())
        },
        &fd_config(seed),
    );
    (param_report, input_report)
}
