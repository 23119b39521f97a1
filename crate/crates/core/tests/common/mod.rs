#![allow(dead_code)]

use std::path::Path;

use dubbing_core::conditions::{
    ConclusionConditions, ConditionEncoder, DubbingConditions, EncoderSpec, SpeechPrompt, TokenSeq, VisualFeatureSeq,
};
use dubbing_core::cot_trace::{AgeBand, Conclusion, Emotion, Gender, SceneType};
use dubbing_core::flow::{FeatureSeq, TrainableVelocity};
use dubbing_core::pipeline::{self, RunConfig, RunLayout};
use dubbing_core::velocity::ConditionalVelocity;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

pub const VIS_CH: usize = 3;
pub const DIM: usize = 2;
pub const VOCAB: usize = 5;

pub fn small_spec(seed: u64) -> EncoderSpec {
    EncoderSpec {
        visual_channels: VIS_CH,
        visual_dim: 2,
        label_dim: 2,
        vocab_size: VOCAB,
        token_dim: 3,
        feature_dim: DIM,
        seed,
    }
}

pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Small conditional model with every parameter drawn from N(0, scale²).
pub fn random_model<R: Rng + ?Sized>(knots: usize, scale: f64, rng: &mut R) -> ConditionalVelocity {
    let enc = ConditionEncoder::new(small_spec(rng.gen()));
    let mut m = ConditionalVelocity::new(DIM, knots, enc).expect("valid model");
    for p in m.params_mut() {
        *p = scale * rng.sample::<f64, _>(StandardNormal);
    }
    m
}

pub fn random_conclusion<R: Rng + ?Sized>(rng: &mut R) -> Conclusion {
    Conclusion::new(
        SceneType::ALL[rng.gen_range(0..SceneType::ALL.len())],
        Gender::ALL[rng.gen_range(0..Gender::ALL.len())],
        AgeBand::ALL[rng.gen_range(0..AgeBand::ALL.len())],
        Emotion::ALL[rng.gen_range(0..Emotion::ALL.len())],
    )
}

pub fn random_tokens<R: Rng + ?Sized>(rng: &mut R) -> TokenSeq {
    let n = rng.gen_range(1..5);
    let toks: Vec<u32> = (0..n).map(|_| rng.gen_range(0..VOCAB as u32)).collect();
    TokenSeq::new(toks, "t").expect("non-empty")
}

/// Full conditions with random contents; `present` chooses which slots are
/// filled (prompt included).
pub fn random_conds<R: Rng + ?Sized>(present: [bool; 4], rng: &mut R) -> DubbingConditions {
    let t = rng.gen_range(2..6);
    DubbingConditions {
        visual: present[0].then(|| VisualFeatureSeq::new(normal_matrix(t, VIS_CH, rng), 10.0).unwrap()),
        conclusion: present[1].then(|| ConclusionConditions(random_conclusion(rng))),
        transcript: present[2].then(|| random_tokens(rng)),
        prompt: present[3].then(|| SpeechPrompt {
            features: FeatureSeq::new(normal_matrix(rng.gen_range(2..6), DIM, rng), 0.05).unwrap(),
            transcript: random_tokens(rng),
        }),
    }
}

pub fn random_slots<R: Rng + ?Sized>(rng: &mut R) -> DubbingConditions {
    let present = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
    random_conds(present, rng)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[i];
    x[i] = x0 + h;
    let up = f(x);
    x[i] = x0 - h;
    let down = f(x);
    x[i] = x0;
    (up - down) / (2.0 * h)
}

/// Denominator floor of [`rel_err`]; below it the check is absolute.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub const STAGES: [&str; 5] = ["synth", "sft", "mpo", "cfm", "tune"];

/// Runs the named training stages in order into `root`.
pub fn train(cfg: &RunConfig, root: &Path, stages: &[&str]) -> RunLayout {
    let layout = RunLayout::new(root);
    for s in stages {
        match *s {
            "synth" => {
                pipeline::synth_dataset(cfg, &layout).expect("synth");
            }
            "sft" => {
                pipeline::run_stage_sft(cfg, &layout).expect("sft");
            }
            "mpo" => {
                pipeline::run_stage_mpo(cfg, &layout).expect("mpo");
            }
            "cfm" => {
                pipeline::run_stage_cfm(cfg, &layout).expect("cfm");
            }
            "tune" => {
                pipeline::run_stage_tune(cfg, &layout).expect("tune");
            }
            other => panic!("unknown stage {other}"),
        }
    }
    layout
}

/// Reduced-size configuration for pipeline tests.
pub fn quick_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.data.n_items = 60;
    cfg.data.n_speakers = 6;
    cfg.sft.steps = 60;
    cfg.mpo.steps = 40;
    cfg.cfm.steps = 300;
    cfg.tune.steps = 300;
    cfg.model.knots = 9;
    cfg.infer.steps = 8;
    cfg
}

pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            std::fs::copy(entry.path(), dest).unwrap();
        }
    }
}
