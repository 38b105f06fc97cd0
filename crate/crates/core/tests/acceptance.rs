//! End-to-end acceptance criteria. Each test prints one `ACCEPTANCE` line;
//! run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use elnet_core::gradsuite::{gradcheck_suite, SUITE_TOL};
use elnet_core::lqe::{evaluate, pixel_rmse, quality_score, LqeConfig, PredictionEnsemble, Verdict};
use elnet_core::maskio::{
    accuracy, confusion, dice, iou, load_image, load_mask, miou, DatasetManifest, GrayImage, ManifestRecord, Mask,
    Provenance, Split,
};
use elnet_core::model::{ElNet, ModelConfig};
use elnet_core::pipeline::{self, Mode, PipelineConfig, PipelineOptions, PipelineResult};
use elnet_core::synth::{
    annotate_manifest, eam_ablation, eval_protocol, gen_dataset, DatasetSpec, ProtocolReport,
    RefNetConfig, SynthDataset,
};
use elnet_core::train::{
    finetune, load_samples, pretrain_backbone, Checkpoint, LossConfig, Sample, TrainConfig, TrainState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    say(&format!("ACCEPTANCE C{id:02} {verdict} {name}: {detail}"));
}

/// Written to the handle directly so the line survives output capture.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

/// Timed criteria share one core, so the tests take turns.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------------------
// Criteria 1-3: metric and evaluator oracles.

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let p = rng.random_range(0.0..1.0);
    Mask::from_fn(h, w, |_, _| rng.random_bool(p)).unwrap()
}

fn naive_counts(a: &Mask, b: &Mask) -> [u64; 4] {
    let mut n = [0u64; 4];
    for r in 0..a.height() {
        for c in 0..a.width() {
            n[(a.get(r, c) as usize) * 2 + b.get(r, c) as usize] += 1;
        }
    }
    n
}

#[test]
fn c01_metric_oracle_equivalence() {
    let _serial = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = 0;
    let n = 2000;
    for _ in 0..n {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let [tn, fn_, fp, tp] = naive_counts(&a, &b);
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let want_iou = ratio(tp, tp + fp + fn_);
        let want_dice = ratio(2 * tp, 2 * tp + fp + fn_);
        let want_acc = (tp + tn) as f64 / (h * w) as f64;
        let want_miou = 0.5 * (ratio(tp, tp + fp + fn_) + ratio(tn, tn + fp + fn_));
        let got = (
            iou(&a, &b).unwrap(),
            dice(&a, &b).unwrap(),
            accuracy(&confusion(&a, &b).unwrap()).unwrap(),
            miou(&a, &b).unwrap(),
        );
        if got != (want_iou, want_dice, want_acc, want_miou) {
            mismatches += 1;
        }
    }
    let el = t.elapsed();
    let pass = mismatches == 0 && el < Duration::from_secs(5);
    report(1, "metric oracle", pass, &format!("{n} pairs, {mismatches} mismatches, {:.2} s", secs(el)));
    assert!(pass);
}

#[test]
fn c02_pixel_rmse_closed_form() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let k = 2f64.sqrt() / 3.0;
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let preds = [0, 1, 2].map(|_| random_mask(&mut rng, h, w));
        let split = (0..h * w)
            .filter(|&i| {
                let s: u8 = preds.iter().map(|m| m.bits()[i]).sum();
                s == 1 || s == 2
            })
            .count() as f64
            / (h * w) as f64;
        let e = PredictionEnsemble::new(preds).unwrap();
        let want = k * split;
        let got = pixel_rmse(&e);
        let rel = if want == 0.0 { got.abs() } else { (got - want).abs() / want };
        worst = worst.max(rel);
    }
    let one = Mask::ones(1, 1).unwrap();
    let zero = Mask::zeros(1, 1).unwrap();
    let hand = pixel_rmse(&PredictionEnsemble::new([one, zero.clone(), zero]).unwrap());
    let pass = worst < 1e-12 && (hand - 0.4714).abs() <= 1e-4;
    report(2, "pixel rmse closed form", pass, &format!("max rel err {worst:.2e}, hand case {hand:.6}"));
    assert!(pass);
}

#[test]
fn c03_quality_range_and_monotonicity() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let cfg = LqeConfig::default();
    let (mut out_of_range, mut decreases) = (0, 0);
    for _ in 0..10_000 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let e = PredictionEnsemble::new([0, 1, 2].map(|_| random_mask(&mut rng, h, w))).unwrap();
        let r = evaluate(&e, &cfg).unwrap();
        if !(0.0..=1.0).contains(&r.q) {
            out_of_range += 1;
        }
        let bumped = rng.random_range(r.iou_avg..=1.0);
        let q2 = quality_score(r.r_mean, bumped, r.dice_avg, &cfg).unwrap();
        if q2 < r.q {
            decreases += 1;
        }
    }
    let pass = out_of_range == 0 && decreases == 0;
    report(
        3,
        "quality range and monotonicity",
        pass,
        &format!("10000 ensembles, {out_of_range} out of [0, 1], {decreases} decreases"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 4: gradient checks.

#[test]
fn c04_gradient_checks() {
    let _serial = serial();
    let t = Instant::now();
    let suite = gradcheck_suite(SEED).unwrap();
    let el = t.elapsed();
    let worst = suite.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = suite.iter().filter(|e| !e.report.pass).map(|e| e.name.as_str()).collect();
    let names: Vec<&str> = suite.iter().map(|e| e.name.as_str()).collect();
    let pass = failed.is_empty() && worst < SUITE_TOL && el < Duration::from_secs(120);
    report(
        4,
        "gradient checks",
        pass,
        &format!("{names:?}, max rel err {worst:.2e}, failed {failed:?}, {:.1} s", secs(el)),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Shared benchmark runs for criteria 5-8 and 12.

fn model_config() -> ModelConfig {
    ModelConfig::default()
}

fn pretrain_config() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        seed: SEED,
        ..TrainConfig::default()
    }
}

/// 25 epochs of two batches (12 + 8) over 20 images: 50 steps.
fn smoke_config() -> TrainConfig {
    TrainConfig {
        epochs: 25,
        seed: SEED,
        ..TrainConfig::default()
    }
}

fn pipeline_config(mode: Mode, loop_count: usize, epochs: usize) -> PipelineConfig {
    PipelineConfig {
        pipeline: PipelineOptions {
            mode,
            loop_count,
            seed: SEED,
            ..PipelineOptions::default()
        },
        train: TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
        model: model_config(),
        ..PipelineConfig::default()
    }
}

fn refnet_config() -> RefNetConfig {
    RefNetConfig {
        seed: SEED,
        ..RefNetConfig::default()
    }
}

struct Data {
    _dir: tempfile::TempDir,
    golden: SynthDataset,
    smoke: SynthDataset,
}

fn data() -> &'static Data {
    static DATA: OnceLock<Data> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let golden = gen_dataset(
            &DatasetSpec {
                n: 50,
                seed: SEED,
                ..DatasetSpec::default()
            },
            &dir.path().join("golden"),
        )
        .unwrap();
        let smoke = gen_dataset(
            &DatasetSpec {
                n: 20,
                test_fraction: 0.0,
                seed: SEED,
                ..DatasetSpec::default()
            },
            &dir.path().join("smoke"),
        )
        .unwrap();
        Data {
            _dir: dir,
            golden,
            smoke,
        }
    })
}

fn split(m: &DatasetManifest, s: Split) -> DatasetManifest {
    DatasetManifest::new(m.records.iter().filter(|r| r.split == s).cloned().collect()).unwrap()
}

fn golden_train_images(d: &SynthDataset) -> Vec<GrayImage> {
    split(&d.coarse, Split::Train)
        .records
        .iter()
        .map(|r| load_image(d.dir.join(&r.image_path)).unwrap())
        .collect()
}

/// Label a result currently holds for `rec`: generated if retained, the
/// original file otherwise.
fn current_label(res: &PipelineResult, rec: &ManifestRecord) -> Option<Mask> {
    let p = rec.label_path.as_ref()?;
    Some(match res.label_for(p) {
        Some(m) => m.clone(),
        None => load_mask(p).unwrap(),
    })
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

struct SmokeRun {
    initial: f64,
    last: f64,
    steps: usize,
    elapsed: Duration,
    frozen_identical: bool,
    frozen_count: usize,
}

struct GoldenRun {
    protocol: ProtocolReport,
    stats_len: usize,
    retained_test: usize,
    elapsed: Duration,
}

struct AnnotateRun {
    auto: ProtocolReport,
    gt: ProtocolReport,
    train_auto: usize,
    elapsed: Duration,
}

struct Chain {
    pretrain: Duration,
    smoke: SmokeRun,
    golden: GoldenRun,
    annotate: AnnotateRun,
}

/// Pretraining, the 50-step smoke run, the enhancement benchmark and the
/// annotation benchmark, with every artifact written under `out`.
fn run_chain(out: &Path) -> Chain {
    let d = data();
    let t = Instant::now();
    let backbone = pretrain_backbone(&golden_train_images(&d.golden), &model_config(), &pretrain_config(), 0.1)
        .unwrap()
        .checkpoint;
    backbone.save(&out.join("backbone.eln")).unwrap();
    let pretrain = t.elapsed();

    // Criteria 5 and 6.
    let t = Instant::now();
    let samples = load_samples(&d.smoke.coarse, &d.smoke.dir).unwrap();
    assert_eq!(samples.len(), 20);
    let tcfg = smoke_config();
    let mut net = ElNet::from_backbone(model_config(), &backbone.store, SEED).unwrap();
    let mut state = TrainState::new(&tcfg);
    let rep = finetune(&mut net, &samples, &tcfg, &LossConfig::default(), &mut state).unwrap();
    let elapsed = t.elapsed();
    state.snapshot(&net).save(&out.join("smoke/finetuned.eln")).unwrap();
    let mut log = Vec::new();
    rep.write_log(&mut log).unwrap();
    std::fs::write(out.join("smoke/log.jsonl"), log).unwrap();
    let frozen: Vec<&str> = net.store.frozen_names().collect();
    let frozen_identical = !frozen.is_empty()
        && frozen
            .iter()
            .all(|n| net.store.get(n).unwrap().bit_eq(backbone.store.get(n).unwrap()));
    let smoke = SmokeRun {
        initial: rep.step_losses[0],
        last: *rep.step_losses.last().unwrap(),
        steps: rep.step_losses.len(),
        elapsed,
        frozen_identical,
        frozen_count: frozen.len(),
    };

    // Criterion 7.
    let t = Instant::now();
    let cfg = pipeline_config(Mode::Enhance, 3, 40);
    let res = pipeline::run(&cfg, &d.golden.coarse, &d.golden.dir, Some(&backbone), Some(&out.join("enhance"))).unwrap();
    let train = load_samples(&split(&d.golden.coarse, Split::Train), &d.golden.dir).unwrap();
    let test_gt = split(&d.golden.gt, Split::Test);
    let test_images: Vec<GrayImage> = test_gt
        .records
        .iter()
        .map(|r| load_image(d.golden.dir.join(&r.image_path)).unwrap())
        .collect();
    let hq: Vec<Mask> = load_samples(&test_gt, &d.golden.dir).unwrap().into_iter().map(|s| s.label).collect();
    let orig: Vec<Mask> = load_samples(&split(&d.golden.coarse, Split::Test), &d.golden.dir)
        .unwrap()
        .into_iter()
        .map(|s| s.label)
        .collect();
    let test_records: Vec<&ManifestRecord> = res.manifest.records.iter().filter(|r| r.split == Split::Test).collect();
    let enh: Vec<Mask> = test_records.iter().map(|r| current_label(&res, r).unwrap()).collect();
    let retained_test = test_records.iter().filter(|r| r.provenance == Provenance::Enhanced).count();
    let sets = vec![
        ("Test-HQ".to_string(), hq.clone()),
        ("Test-Orig".to_string(), orig),
        ("Test-Enh".to_string(), enh),
    ];
    let protocol = eval_protocol(&train, &test_images, &sets, &refnet_config()).unwrap();
    write_json(&out.join("enhance/protocol.json"), &protocol);
    let golden = GoldenRun {
        protocol,
        stats_len: res.stats.len(),
        retained_test,
        elapsed: t.elapsed(),
    };

    // Criterion 8.
    let t = Instant::now();
    let few = annotate_manifest(&d.golden.gt, 0.3).unwrap();
    let cfg = pipeline_config(Mode::Annotate, 3, 40);
    let res = pipeline::run(&cfg, &few, &d.golden.dir, Some(&backbone), Some(&out.join("annotate"))).unwrap();
    let auto_train: Vec<Sample> = res
        .manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .filter_map(|r| {
            Some(Sample {
                image: load_image(&r.image_path).unwrap(),
                label: current_label(&res, r)?,
            })
        })
        .collect();
    let gt_train = load_samples(&split(&d.golden.gt, Split::Train), &d.golden.dir).unwrap();
    let hq_only = vec![("Test-HQ".to_string(), hq)];
    let auto = eval_protocol(&auto_train, &test_images, &hq_only, &refnet_config()).unwrap();
    let gt = eval_protocol(&gt_train, &test_images, &hq_only, &refnet_config()).unwrap();
    write_json(&out.join("annotate/protocol_auto.json"), &auto);
    write_json(&out.join("annotate/protocol_gt.json"), &gt);
    let annotate = AnnotateRun {
        auto,
        gt,
        train_auto: auto_train.len(),
        elapsed: t.elapsed(),
    };

    Chain {
        pretrain,
        smoke,
        golden,
        annotate,
    }
}

struct FirstRun {
    dir: tempfile::TempDir,
    chain: Chain,
}

fn first_run() -> &'static FirstRun {
    static RUN: OnceLock<FirstRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let chain = run_chain(dir.path());
        FirstRun { dir, chain }
    })
}

#[test]
fn c05_frozen_backbone_is_untouched() {
    let _serial = serial();
    let s = &first_run().chain.smoke;
    let pass = s.frozen_identical;
    report(
        5,
        "frozen backbone",
        pass,
        &format!("{} frozen tensors bit-identical after {} steps: {}", s.frozen_count, s.steps, s.frozen_identical),
    );
    assert!(pass);
}

#[test]
fn c06_training_smoke() {
    let _serial = serial();
    let run = first_run();
    let s = &run.chain.smoke;
    let ratio = s.last / s.initial;
    let pass = s.steps == 50 && ratio < 0.5 && s.elapsed < Duration::from_secs(120);
    report(
        6,
        "training smoke",
        pass,
        &format!(
            "{} steps, loss {:.4} -> {:.4} (ratio {ratio:.3}), {:.1} s; backbone pretraining {:.1} s",
            s.steps,
            s.initial,
            s.last,
            secs(s.elapsed),
            secs(run.chain.pretrain)
        ),
    );
    assert!(pass);
}

#[test]
fn c07_enhancement_benchmark() {
    let _serial = serial();
    let g = &first_run().chain.golden;
    let p = &g.protocol;
    let orig = p.row("Test-Orig").unwrap().delta_miou.abs();
    let enh = p.row("Test-Enh").unwrap().delta_miou.abs();
    let pass = enh < orig && g.stats_len == 4 && g.elapsed < Duration::from_secs(600);
    report(
        7,
        "enhancement benchmark",
        pass,
        &format!(
            "|dmIoU| enh {enh:.4} vs orig {orig:.4}; HQ mIoU {:.4}; {} of {} test labels enhanced; {:.1} s",
            p.rows[0].miou,
            g.retained_test,
            p.test_size,
            secs(g.elapsed)
        ),
    );
    for r in &p.rows {
        say(&format!("    {:<10} miou {:.4} d {:+.4}  acc {:.4} d {:+.4}", r.test_set, r.miou, r.delta_miou, r.acc, r.delta_acc));
    }
    assert!(pass);
}

#[test]
fn c08_annotation_utility() {
    let _serial = serial();
    let a = &first_run().chain.annotate;
    let (auto, gt) = (a.auto.rows[0].miou, a.gt.rows[0].miou);
    let pass = auto >= 0.9 * gt && a.elapsed < Duration::from_secs(600);
    report(
        8,
        "annotation utility",
        pass,
        &format!(
            "mIoU auto {auto:.4} ({} train labels) vs gt {gt:.4}, ratio {:.3}; {:.1} s",
            a.train_auto,
            auto / gt,
            secs(a.elapsed)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 9: fault injection.

#[test]
fn c09_fault_injection() {
    let _serial = serial();
    let d = data();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let cfg = LqeConfig::default();
    let (mut injected, mut caught, mut clean, mut false_flags) = (0, 0, 0, 0);
    for rec in &d.golden.gt.records {
        let gt = load_mask(d.golden.dir.join(rec.label_path.as_ref().unwrap())).unwrap();
        for _ in 0..20 {
            let inject = rng.random_bool(0.1);
            let preds = if inject {
                [0, 1, 2].map(|_| Mask::from_fn(gt.height(), gt.width(), |_, _| rng.random_bool(0.5)).unwrap())
            } else {
                [gt.clone(), gt.clone(), gt.clone()]
            };
            let flagged = evaluate(&PredictionEnsemble::new(preds).unwrap(), &cfg).unwrap().verdict == Verdict::Flag;
            if inject {
                injected += 1;
                caught += flagged as usize;
            } else {
                clean += 1;
                false_flags += flagged as usize;
            }
        }
    }
    let caught_rate = caught as f64 / injected as f64;
    let false_rate = false_flags as f64 / clean as f64;
    let pass = caught_rate >= 0.95 && false_rate <= 0.05;
    report(
        9,
        "fault injection",
        pass,
        &format!("flagged {caught}/{injected} injected ({caught_rate:.3}), {false_flags}/{clean} unanimous ({false_rate:.3})"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 10: loop sweep.

#[test]
fn c10_loop_sweep() {
    let _serial = serial();
    let d = data();
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut longest: Option<Vec<pipeline::IterationStats>> = None;
    for loops in 0..=4 {
        let mut cfg = pipeline_config(Mode::Enhance, loops, 8);
        cfg.pipeline.refine_epochs = Some(2);
        let res = pipeline::run(&cfg, &d.golden.coarse, &d.golden.dir, None, None).unwrap();
        let cum: Vec<usize> = res.stats.iter().map(|s| s.cumulative_retained).collect();
        let monotone = cum.windows(2).all(|w| w[0] <= w[1]);
        let ok = res.stats.len() == loops + 1 && monotone;
        pass &= ok;
        lines.push(format!("loops {loops}: cumulative {cum:?}"));
        longest = Some(res.stats);
    }
    let el = t.elapsed();
    report(10, "loop sweep", pass, &format!("{}; {:.1} s", lines.join("; "), secs(el)));
    assert!(longest.is_some_and(|s| s.len() == 5));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 11: edge-attention ablation.

#[test]
fn c11_eam_ablation() {
    let _serial = serial();
    let d = data();
    let t = Instant::now();
    let test = split(&d.golden.coarse, Split::Test);
    let test_images: Vec<GrayImage> = test
        .records
        .iter()
        .map(|r| load_image(d.golden.dir.join(&r.image_path)).unwrap())
        .collect();
    let mut labels = Vec::new();
    let mut checkpoints = Vec::new();
    for eam in [false, true] {
        let mut cfg = pipeline_config(Mode::Enhance, 0, 20);
        cfg.model.eam_enabled = eam;
        let prepared = pipeline::stage1_prepare(&cfg, &d.golden.coarse, &d.golden.dir).unwrap();
        let state = pipeline::stage2_finetune(&cfg, prepared, None).unwrap();
        let ck = state.checkpoints.last().unwrap().clone();
        let net = ck.to_model().unwrap();
        labels.push(
            test_images
                .iter()
                .map(|img| net.predict(img, pipeline::PREDICT_THRESHOLD).unwrap())
                .collect::<Vec<_>>(),
        );
        checkpoints.push(ck);
    }
    let train = load_samples(&split(&d.golden.coarse, Split::Train), &d.golden.dir).unwrap();
    let hq: Vec<Mask> = load_samples(&split(&d.golden.gt, Split::Test), &d.golden.dir)
        .unwrap()
        .into_iter()
        .map(|s| s.label)
        .collect();
    let rep = eam_ablation(&train, &test_images, &hq, &labels[0], &labels[1], &refnet_config()).unwrap();
    let has_eam = |c: &Checkpoint<f32>| c.store.params().keys().any(|k| k.contains("eam"));
    let pass = rep.predictions_differ
        && rep.protocol.rows.len() == 3
        && !has_eam(&checkpoints[0])
        && has_eam(&checkpoints[1]);
    report(
        11,
        "eam ablation",
        pass,
        &format!(
            "{} differing pixels; |dmIoU| without {:.4}, with {:.4}; eam closer to HQ: {} (reported, not gated); {:.1} s",
            rep.differing_pixels,
            rep.protocol.rows[1].delta_miou.abs(),
            rep.protocol.rows[2].delta_miou.abs(),
            rep.eam_closer_to_hq,
            secs(t.elapsed())
        ),
    );
    for r in &rep.protocol.rows {
        say(&format!("    {:<10} miou {:.4} d {:+.4}  acc {:.4} d {:+.4}", r.test_set, r.miou, r.delta_miou, r.acc, r.delta_acc));
    }
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 12: determinism.

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn c12_determinism() {
    let _serial = serial();
    let first = first_run();
    let again = tempfile::tempdir().unwrap();
    run_chain(again.path());
    let (a, b) = (tree(first.dir.path()), tree(again.path()));
    let differing: Vec<&PathBuf> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let kinds = |ext: &str| a.keys().filter(|k| k.to_string_lossy().ends_with(ext)).count();
    let pass = a.len() == b.len() && differing.is_empty();
    report(
        12,
        "determinism",
        pass,
        &format!(
            "{} files compared ({} manifests, {} reports, {} checkpoints, {} masks); differing: {differing:?}",
            a.len(),
            kinds(".jsonl"),
            kinds(".json"),
            kinds(".eln"),
            kinds(".png")
        ),
    );
    assert!(pass);
}
