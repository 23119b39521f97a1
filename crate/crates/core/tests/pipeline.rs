mod common;

use std::collections::BTreeMap;
use std::sync::OnceLock;

use common::*;
use dubbing_core::cot_trace::SceneType;
use dubbing_core::flow::VelocityModel;
use dubbing_core::guidance::{predict_duration, GuidanceScales, SamplerConfig};
use dubbing_core::pipeline::eval::{score_pair, EvalContext, EVAL_HEADER};
use dubbing_core::pipeline::infer::{generate, guidance_sweep, SETTINGS};
use dubbing_core::pipeline::io::{read_features, read_manifest, Split, Table};
use dubbing_core::pipeline::stage1::{load_policy, MPO_CHECKPOINT, POLICY_REPORT_HEADER, SFT_CHECKPOINT};
use dubbing_core::pipeline::stage2::{
    full_conds, load_duration, load_generator, PRETRAIN_CHECKPOINT, TUNE_CHECKPOINT,
};
use dubbing_core::pipeline::synth::Dataset;
use dubbing_core::pipeline::{self, RunConfig, RunLayout};
use dubbing_core::preference::MpoWeights;

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    layout: RunLayout,
}

// Default-size run, trained once and shared.
fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let layout = train(&cfg, dir.path(), &STAGES);
        pipeline::run_infer(&cfg, &layout, None).unwrap();
        pipeline::run_eval(&cfg, &layout).unwrap();
        Fixture { _dir: dir, cfg, layout }
    })
}

#[test]
fn thirty_items_are_balanced_across_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.n_items = 30;
    let recs = pipeline::synth_dataset(&cfg, &RunLayout::new(dir.path())).unwrap();
    assert_eq!(recs.len(), 30);
    let mut per: BTreeMap<SceneType, usize> = BTreeMap::new();
    for r in &recs {
        *per.entry(r.scene).or_default() += 1;
    }
    assert_eq!(per.values().copied().collect::<Vec<_>>(), vec![10, 10, 10]);
}

fn tree_bytes(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthesis_is_byte_deterministic() {
    let cfg = quick_config(7);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline::synth_dataset(&cfg, &RunLayout::new(a.path())).unwrap();
    pipeline::synth_dataset(&cfg, &RunLayout::new(b.path())).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);

    let c = tempfile::tempdir().unwrap();
    pipeline::synth_dataset(&quick_config(8), &RunLayout::new(c.path())).unwrap();
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn manifest_records_are_consistent_with_their_files() {
    let f = fixture();
    let recs = read_manifest(&f.layout).unwrap();
    assert_eq!(recs.len(), f.cfg.data.n_items);
    for r in &recs {
        let feats = read_features(&f.layout.resolve(&r.features_path)).unwrap();
        assert!(f.layout.resolve(&r.video_features_path).exists());
        let implied = feats.num_frames() as f64 * f.cfg.data.frame_hop;
        assert!((implied - r.duration_s).abs() <= f.cfg.data.frame_hop + 1e-12, "{}", r.id);
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        assert!(recs.iter().any(|r| r.split == split), "{split:?} is empty");
    }
}

// Multinomial logistic regression on pooled visual features, trained by
// full-batch gradient descent on the training split.
fn probe_accuracy(ds: &Dataset) -> f64 {
    let feats = |i: usize| {
        let mut x = vec![1.0];
        x.extend(ds.items[i].visual.pooled());
        x
    };
    let train = ds.indices(Split::Train);
    let test = ds.indices(Split::Test);
    let d = feats(train[0]).len();
    let mut w = vec![vec![0.0; d]; 3];
    for _ in 0..500 {
        let mut g = vec![vec![0.0; d]; 3];
        for &i in &train {
            let x = feats(i);
            let logits: Vec<f64> = w.iter().map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let y = ds.items[i].record.scene.index();
            for k in 0..3 {
                let p = (logits[k] - m).exp() / z - f64::from(u8::from(k == y));
                for j in 0..d {
                    g[k][j] += p * x[j] / train.len() as f64;
                }
            }
        }
        for k in 0..3 {
            for j in 0..d {
                w[k][j] -= 0.5 * g[k][j];
            }
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let x = feats(i);
            let scores: Vec<f64> = w.iter().map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            let best = (0..3).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == ds.items[i].record.scene.index()
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn logistic_probe_recovers_scene() {
    let ds = Dataset::load(&fixture().layout).unwrap();
    let acc = probe_accuracy(&ds);
    assert!(acc >= 0.95, "probe accuracy {acc}");
}

#[test]
fn untrained_policy_sits_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.sft.steps = 0;
    let layout = train(&cfg, dir.path(), &["synth"]);
    let out = pipeline::run_stage_sft(&cfg, &layout).unwrap();
    assert!((out.scores.accuracy - 1.0 / 3.0).abs() <= 0.05, "{}", out.scores.accuracy);
}

#[test]
fn sft_beats_chance_and_reports_table_layout() {
    let f = fixture();
    let t = Table::read(&f.layout.report("mpo")).unwrap();
    assert_eq!(t.header, POLICY_REPORT_HEADER.to_vec());
    let acc: Vec<f64> = t.column("Ave.Acc").unwrap().iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(acc.len(), 2);
    assert!(acc[0] > 1.0 / 3.0);
    for name in ["Ave.Recall", "A.Recall", "B.Recall", "C.Recall"] {
        assert!(t.column(name).is_some(), "{name}");
    }
}

#[test]
fn zero_mpo_weights_leave_the_policy_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(7);
    cfg.mpo.weights = MpoWeights::zero();
    let layout = train(&cfg, dir.path(), &["synth", "sft", "mpo"]);
    assert_eq!(
        load_policy(&layout, SFT_CHECKPOINT).unwrap(),
        load_policy(&layout, MPO_CHECKPOINT).unwrap()
    );
}

#[test]
fn cfm_training_lowers_the_monitored_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.cfm.steps = 1000;
    let layout = train(&cfg, dir.path(), &["synth"]);
    let out = pipeline::run_stage_cfm(&cfg, &layout).unwrap();
    let (first, last) = (out.curve[0].1, out.curve.last().unwrap().1);
    assert_eq!(out.curve.last().unwrap().0, 1000);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn tuning_starts_from_the_pretrained_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(7);
    cfg.tune.steps = 0;
    let layout = train(&cfg, dir.path(), &["synth", "cfm", "tune"]);
    let pre = load_generator(&layout, PRETRAIN_CHECKPOINT).unwrap();
    let tuned = load_generator(&layout, TUNE_CHECKPOINT).unwrap();
    let ds = Dataset::load(&layout).unwrap();
    for &i in ds.indices(Split::Test).iter().take(5) {
        let c = full_conds(&ds, i, i);
        let x = ds.items[i].target.frames.clone();
        for tau in [0.0, 0.3, 0.9] {
            assert_eq!(pre.evaluate(&x, tau, &c).unwrap(), tuned.evaluate(&x, tau, &c).unwrap());
        }
    }
}

#[test]
fn full_dropout_makes_condition_branches_inert() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(7);
    cfg.tune.dropout_p = 1.0;
    let layout = train(&cfg, dir.path(), &["synth", "cfm", "tune"]);
    let tuned = load_generator(&layout, TUNE_CHECKPOINT).unwrap();
    let ds = Dataset::load(&layout).unwrap();
    for &i in ds.indices(Split::Test).iter().take(5) {
        let c = full_conds(&ds, i, i);
        let x = ds.items[i].target.frames.clone();
        let full = tuned.evaluate(&x, 0.5, &c).unwrap();
        let uncond = tuned.evaluate(&x, 0.5, &c.masked(false, false, true)).unwrap();
        let gap = (&full - &uncond).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gap < 1e-12, "item {i}: branch outputs differ by {gap}");
    }
}

#[test]
fn duration_predictor_beats_the_mean_baseline() {
    let t = Table::read(&fixture().layout.report("tune")).unwrap();
    let mae: f64 = t.column("duration_mae_s").unwrap()[0].parse().unwrap();
    let base: f64 = t.column("mean_baseline_mae_s").unwrap()[0].parse().unwrap();
    assert!(mae < base, "{mae} vs {base}");
}

#[test]
fn inference_is_deterministic_and_matches_predicted_duration() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&f.layout.data(), &RunLayout::new(dir.path()).data());
    copy_dir(&f.layout.checkpoints(), &RunLayout::new(dir.path()).checkpoints());
    let again = RunLayout::new(dir.path());
    let rows = pipeline::run_infer(&f.cfg, &again, None).unwrap();
    assert_eq!(
        std::fs::read(f.layout.report("infer")).unwrap(),
        std::fs::read(again.report("infer")).unwrap()
    );

    let ds = Dataset::load(&again).unwrap();
    let predictor = load_duration(&again).unwrap();
    for r in rows.iter().filter(|r| r.setting == SETTINGS[0]) {
        let item = &ds.items[ds.find(&r.id).unwrap()];
        let cc = r.conclusion.map(dubbing_core::conditions::ConclusionConditions);
        let expected = predict_duration(&predictor, &item.visual, cc.as_ref(), f.cfg.data.frame_hop).unwrap();
        assert_eq!(r.frames, expected, "{}", r.id);
        let out = read_features(&again.generated(&r.setting).join(format!("{}.tsv", r.id))).unwrap();
        assert_eq!(out.num_frames(), expected);
    }
}

#[test]
fn conclusion_guidance_moves_toward_the_gold_cluster() {
    let f = fixture();
    let sweep = guidance_sweep(&f.cfg, &f.layout, &[0.0, 2.0], 11).unwrap();
    assert!(sweep[1].distance < sweep[0].distance, "{sweep:?}");
    assert!(sweep[1].projection > 0.0);
}

#[test]
fn guidance_sweep_is_reproducible() {
    let f = fixture();
    let a = guidance_sweep(&f.cfg, &f.layout, &[0.0, 1.0], 3).unwrap();
    let b = guidance_sweep(&f.cfg, &f.layout, &[0.0, 1.0], 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].projection, 0.0);
}

#[test]
fn ground_truth_scores_perfectly_against_itself() {
    let f = fixture();
    let ds = Dataset::load(&f.layout).unwrap();
    let ctx = EvalContext::from_dataset(&ds, f.cfg.eval.cepstral_order).unwrap();
    for &i in ds.indices(Split::Test).iter().take(10) {
        let item = &ds.items[i];
        let s = score_pair(&ctx, &item.target, &item.target, &item.record.transcript).unwrap();
        assert_eq!(s.mcd, 0.0);
        assert_eq!(s.mcd_sl, 0.0);
        assert_eq!(s.wer, 0.0);
        assert!((s.spk_sim - 1.0).abs() < 1e-12);
        assert!((s.emo_sim - 1.0).abs() < 1e-12);
    }
}

#[test]
fn eval_report_has_both_settings_and_the_expected_direction() {
    let t = Table::read(&fixture().layout.report("eval")).unwrap();
    assert_eq!(t.header, EVAL_HEADER.to_vec());
    assert_eq!(t.column("setting").unwrap(), SETTINGS.to_vec());
    for metric in ["SPK-SIM(%)", "EMO-SIM(%)"] {
        let v: Vec<f64> = t.column(metric).unwrap().iter().map(|s| s.parse().unwrap()).collect();
        assert!(v[1] <= v[0], "{metric}: dub2 {} > dub1 {}", v[1], v[0]);
    }
}

#[test]
fn generation_runs_with_a_null_conclusion() {
    let f = fixture();
    let ds = Dataset::load(&f.layout).unwrap();
    let model = load_generator(&f.layout, TUNE_CHECKPOINT).unwrap();
    let predictor = load_duration(&f.layout).unwrap();
    let i = ds.indices(Split::Test)[0];
    let sampler = SamplerConfig {
        steps: 4,
        ..SamplerConfig::default()
    };
    let out = generate(&model, &predictor, &ds, i, None, i, &GuidanceScales::default(), &sampler, None).unwrap();
    assert!(out.num_frames() >= 1);
    assert!(out.frames.iter().all(|v| v.is_finite()));
}

#[test]
fn missing_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let layout = RunLayout::new(dir.path());
    let cfg = quick_config(7);
    let kind = |e: dubbing_core::DubError| e.kind();
    assert_eq!(kind(pipeline::run_stage_sft(&cfg, &layout).unwrap_err()), "missing");
    pipeline::synth_dataset(&cfg, &layout).unwrap();
    assert_eq!(kind(pipeline::run_stage_mpo(&cfg, &layout).unwrap_err()), "missing");
    assert_eq!(kind(pipeline::run_stage_tune(&cfg, &layout).unwrap_err()), "missing");
    assert_eq!(kind(pipeline::run_infer(&cfg, &layout, None).unwrap_err()), "missing");
    assert_eq!(kind(pipeline::run_eval(&cfg, &layout).unwrap_err()), "missing");
}

#[test]
fn every_verb_leaves_a_run_record() {
    let f = fixture();
    let _ = &f.cfg;
    for verb in ["train-sft", "train-mpo", "train-cfm", "train-tune", "infer", "eval"] {
        let rec = f.layout.runs().join(format!("{verb}.json"));
        let cfg = f.layout.runs().join(format!("{verb}.config.toml"));
        assert!(rec.exists() && cfg.exists(), "{verb}");
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&rec).unwrap()).unwrap();
        assert_eq!(v["seed"], 7);
        assert_eq!(RunConfig::load(&cfg).unwrap(), f.cfg);
    }
}
