use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use elnet_core::gradsuite::gradcheck_suite;
use elnet_core::lqe::filter_dataset;
use elnet_core::maskio::{
    evaluate_pairs, load_image, load_mask, read_manifest, write_manifest, DatasetManifest, GrayImage, Mask, Split,
};
use elnet_core::model::ElNet;
use elnet_core::pipeline::{self, predict_ensemble, Mode};
use elnet_core::synth::{annotate_manifest, eval_protocol, gen_dataset, DatasetSpec, SceneSpec, COARSE_MANIFEST};
use elnet_core::train::{finetune, load_samples, pretrain_backbone, Checkpoint, CheckpointKind, TrainState};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::*;

pub fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(SynthCommand::Gen(a)) => synth_gen(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Annotate(a) => pipeline_cmd(a, Some(Mode::Annotate)),
        Command::Enhance(a) => pipeline_cmd(a, Some(Mode::Enhance)),
        Command::Pipeline(PipelineCommand::Run(a)) => pipeline_cmd(a, None),
        Command::Lqe(a) => lqe(a),
        Command::Metrics(a) => metrics(a),
        Command::Evalprotocol(a) => evalprotocol(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Resolve the configuration and print it on stderr. `None` on a dry run,
/// after printing it on stdout as well.
fn resolve(args: &ConfigArgs, seed: u64, mode: Option<Mode>) -> anyhow::Result<Option<Config>> {
    let mut cfg = args.resolve(Some(seed))?;
    if let Some(m) = mode {
        cfg.pipeline.mode = m;
    }
    let text = serde_json::to_string(&cfg)?;
    eprintln!("effective config: {text}");
    if args.dry_run {
        println!("{text}");
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn emit(value: &impl Serialize, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn base_of(manifest: &Path, base: Option<&Path>) -> PathBuf {
    base.map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn load(manifest: &Path, base: Option<&Path>) -> anyhow::Result<(DatasetManifest, PathBuf)> {
    Ok((read_manifest(manifest)?, base_of(manifest, base)))
}

fn labeled_train(m: &DatasetManifest) -> anyhow::Result<DatasetManifest> {
    let records = m
        .records
        .iter()
        .filter(|r| r.split == Split::Train && r.label_path.is_some())
        .cloned()
        .collect();
    Ok(DatasetManifest::new(records)?)
}

fn synth_gen(a: SynthGenArgs) -> anyhow::Result<()> {
    let spec = DatasetSpec {
        n: a.n,
        test_fraction: a.test_fraction,
        seed: a.seed.seed,
        scene: SceneSpec {
            size: a.size,
            ..SceneSpec::default()
        },
        ..DatasetSpec::default()
    };
    eprintln!("effective config: {}", serde_json::to_string(&spec)?);
    let ds = gen_dataset(&spec, &a.out)?;
    if let Some(f) = a.labeled_fraction {
        write_manifest(&annotate_manifest(&ds.gt, f)?, a.out.join("annotate.jsonl"))?;
    }
    let train = ds.coarse.records.iter().filter(|r| r.split == Split::Train).count();
    emit(
        &serde_json::json!({
            "dir": a.out,
            "records": ds.coarse.len(),
            "train": train,
            "test": ds.coarse.len() - train,
            "manifest": COARSE_MANIFEST,
        }),
        None,
    )
}

fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let Some(cfg) = resolve(&a.config, a.seed.seed, None)? else {
        return Ok(());
    };
    let (m, base) = load(&a.manifest, a.base.as_deref())?;
    let images = m
        .resolve(&base)
        .records
        .par_iter()
        .map(|r| load_image(&r.image_path))
        .collect::<elnet_core::Result<Vec<GrayImage>>>()?;
    let rep = pretrain_backbone(&images, &cfg.model, &cfg.train, a.noise_sigma)?;
    rep.checkpoint.save(&a.out)?;
    if let Some(p) = &a.log {
        write_log(p, &rep.epochs)?;
    }
    emit(&rep.epochs.last(), None)
}

fn write_log<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut text = String::new();
    for r in rows {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn finetune_cmd(a: FinetuneArgs) -> anyhow::Result<()> {
    let Some(cfg) = resolve(&a.config, a.seed.seed, None)? else {
        return Ok(());
    };
    let (m, base) = load(&a.manifest, a.base.as_deref())?;
    let samples = load_samples(&labeled_train(&m)?, &base)?;
    let (mut net, mut state) = match (&a.resume, &a.backbone) {
        (Some(p), _) => {
            let ck = Checkpoint::<f32>::load(p)?;
            if ck.kind != CheckpointKind::Full {
                bail!("{} is not a full checkpoint", p.display());
            }
            (ck.to_model()?, TrainState::from_checkpoint(&ck, &cfg.train)?)
        }
        (None, Some(p)) => {
            let ck = Checkpoint::<f32>::load(p)?;
            let net = ElNet::from_backbone(cfg.model.clone(), &ck.store, cfg.train.seed)?;
            (net, TrainState::new(&cfg.train))
        }
        (None, None) => (ElNet::new(cfg.model.clone(), cfg.train.seed)?, TrainState::new(&cfg.train)),
    };
    let rep = finetune(&mut net, &samples, &cfg.train, &cfg.loss, &mut state)?;
    state.snapshot(&net).save(&a.out)?;
    for (e, ck) in cfg.train.checkpoint_epochs.iter().zip(&rep.snapshots) {
        let p = a.out.with_extension(format!("epoch{e}.eln"));
        ck.save(&p)?;
    }
    if let Some(p) = &a.log {
        write_log(p, &rep.epochs)?;
    }
    emit(&rep.epochs.last(), None)
}

fn pipeline_cmd(a: PipelineArgs, mode: Option<Mode>) -> anyhow::Result<()> {
    let Some(cfg) = resolve(&a.config, a.seed.seed, mode)? else {
        return Ok(());
    };
    let (m, base) = load(&a.manifest, a.base.as_deref())?;
    let backbone = a.backbone.as_deref().map(Checkpoint::<f32>::load).transpose()?;
    let res = pipeline::run(&cfg.pipeline_config(), &m, &base, backbone.as_ref(), Some(&a.out))?;
    emit(&res.stats, None)
}

fn record_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn lqe(a: LqeArgs) -> anyhow::Result<()> {
    let Some(cfg) = resolve(&a.config, a.seed.seed, None)? else {
        return Ok(());
    };
    if !matches!(a.checkpoints.len(), 1 | 3) {
        return Err(crate::ConfigError(anyhow!("pass one or three checkpoints, got {}", a.checkpoints.len())).into());
    }
    let nets = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::<f32>::load(p)?.to_model())
        .collect::<elnet_core::Result<Vec<_>>>()?;
    let names: Vec<String> = a
        .checkpoints
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let (m, base) = load(&a.manifest, a.base.as_deref())?;
    let seed = a.seed.seed;
    let ensembles = m
        .records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let img = load_image(base.join(&r.image_path))?;
            Ok((r.image_path.clone(), predict_ensemble(&nets, &names, &img, record_seed(seed, i))?))
        })
        .collect::<elnet_core::Result<HashMap<_, _>>>()?;
    let outcome = filter_dataset(&m, &ensembles, &cfg.lqe)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_manifest(&outcome.retained, a.out.join("retained.jsonl"))?;
    write_manifest(&outcome.flagged, a.out.join("flagged.jsonl"))?;
    write_log(&a.out.join("lqe_reports.jsonl"), &outcome.reports)?;
    emit(
        &serde_json::json!({"retained": outcome.retained.len(), "flagged": outcome.flagged.len()}),
        None,
    )
}

fn mask_files(dir: &Path) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn metrics(a: MetricsArgs) -> anyhow::Result<()> {
    let names = mask_files(&a.gt)?;
    if names.is_empty() {
        bail!("no masks in {}", a.gt.display());
    }
    let pairs = names
        .par_iter()
        .map(|n| {
            let pred = a.pred.join(n);
            if !pred.exists() {
                return Err(anyhow!("{} has no prediction in {}", n, a.pred.display()));
            }
            Ok((n.clone(), load_mask(&pred)?, load_mask(a.gt.join(n))?))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let report = evaluate_pairs(&pairs)?;
    emit(&report, a.out.as_deref())
}

fn key(p: &Path) -> PathBuf {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

/// Labels of `path`'s records, by canonical image path.
fn label_index(path: &Path) -> anyhow::Result<HashMap<PathBuf, Option<PathBuf>>> {
    let base = base_of(path, None);
    let m = read_manifest(path)?.resolve(&base);
    Ok(m.records.into_iter().map(|r| (key(&r.image_path), r.label_path)).collect())
}

fn evalprotocol(a: EvalProtocolArgs) -> anyhow::Result<()> {
    let Some(cfg) = resolve(&a.config, a.seed.seed, None)? else {
        return Ok(());
    };
    let (train_m, train_base) = load(&a.train, None)?;
    let train = load_samples(&labeled_train(&train_m)?, &train_base)?;

    let hq = read_manifest(&a.test_hq)?.resolve(&base_of(&a.test_hq, None));
    let tests: Vec<_> = hq.records.iter().filter(|r| r.split == Split::Test).collect();
    if tests.is_empty() {
        bail!("{} has no test records", a.test_hq.display());
    }
    let images = tests
        .iter()
        .map(|r| load_image(&r.image_path))
        .collect::<elnet_core::Result<Vec<_>>>()?;
    let mut sets: Vec<(String, Vec<Mask>)> = Vec::new();
    for (name, path) in [("Test-HQ", &a.test_hq), ("Test-Orig", &a.test_orig), ("Test-Enh", &a.test_enh)] {
        let index = label_index(path)?;
        let masks = tests
            .iter()
            .map(|r| {
                let label = index
                    .get(&key(&r.image_path))
                    .and_then(Option::as_ref)
                    .ok_or_else(|| anyhow!("{name}: no label for {}", r.image_path.display()))?;
                Ok(load_mask(label)?)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        sets.push((name.to_string(), masks));
    }
    let report = eval_protocol(&train, &images, &sets, &cfg.refnet)?;
    emit(&report, a.out.as_deref())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let suite = gradcheck_suite(a.seed)?;
    let mut failed = Vec::new();
    for e in &suite {
        println!("{}", serde_json::to_string(e)?);
        if !e.report.pass {
            failed.push(e.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        bail!("gradient check failed for {}", failed.join(", "))
    }
}
