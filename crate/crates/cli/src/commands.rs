use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use plumeseg_core::data::{
    crop, rng_for, write_synthetic_corpus, CropMode, DatasetManifest, Label,
};
use plumeseg_core::engine::Tensor;
use plumeseg_core::mbmp::{mbmp_mask, mbmp_retrieval, PassPair};
use plumeseg_core::metrics::{connected_components, scene_label, MetricsReport, Thresholds};
use plumeseg_core::model::{gradcam, Checkpoint};
use plumeseg_core::spectral::{stack_ndmi, MultispectralPatch, Plane, PlumeMask};
use plumeseg_core::train::{evaluate, history_csv, train, use_ndmi};
use plumeseg_core::{data::model_input, Error, Result};
use serde::Serialize;

use crate::args::{
    Command, EvalArgs, GradcamArgs, MbmpArgs, NdmiArgs, PredictArgs, SynthArgs, TrainArgs,
};
use crate::config::{apply_synth, apply_thresholds, apply_train, CliConfig};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Ndmi(a) => ndmi(a),
        Command::Mbmp(a) => mbmp(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcam(a) => gradcam_cmd(a),
    }
}

/// `dir/x.json` → `x`.
fn stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "patch".into());
    name.strip_suffix(".json").unwrap_or(&name).to_string()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn verdict(plume: bool, largest: usize) -> String {
    format!("plume: {plume} (largest region {largest} px)")
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    apply_synth(&mut cfg.synth, &a);
    let manifest = write_synthetic_corpus(&a.out, &cfg.synth)?;
    cfg.write_resolved(&a.out)?;
    let plumes = manifest
        .entries
        .iter()
        .filter(|e| e.label == Label::Plume)
        .count();
    println!(
        "wrote {} scenes ({plumes} with plumes) to {}",
        manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn ndmi(a: NdmiArgs) -> Result<()> {
    let patch = MultispectralPatch::load(&a.input)?;
    let stacked = stack_ndmi(&patch)?;
    let out = a.out.unwrap_or_else(|| {
        a.input
            .with_file_name(format!("{}.ndmi.json", stem(&a.input)))
    });
    stacked.save(&out)?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct MbmpVerdict {
    id: String,
    plume: bool,
    largest_region: usize,
}

fn mbmp_one(
    pair: &PassPair,
    threshold: f64,
    thresholds: &Thresholds,
    out: &Path,
    name: &str,
) -> Result<(PlumeMask, MbmpVerdict)> {
    let retrieval = mbmp_retrieval(pair)?;
    let mut mask = mbmp_mask(&retrieval.plane, threshold)?;
    mask.patch_id = Some(name.to_string());
    retrieval.plane.save(
        &out.join(format!("{name}.mbmp.json")),
        "MBMP",
        pair.plume_pass.resolution_m,
    )?;
    mask.save(&out.join(format!("{name}.mbmp.mask.json")))?;
    let largest = connected_components(&mask, thresholds.connectivity).largest();
    let plume = scene_label(&mask, thresholds.min_region_pixels, thresholds.connectivity);
    Ok((
        mask,
        MbmpVerdict {
            id: name.to_string(),
            plume,
            largest_region: largest,
        },
    ))
}

fn mbmp(a: MbmpArgs) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(t) = a.threshold {
        cfg.mbmp.threshold = t;
    }
    if a.split.is_some() {
        cfg.mbmp.split = a.split;
    }
    let mut thresholds = cfg.eval.thresholds;
    if let Some(m) = a.min_region {
        thresholds.min_region_pixels = m;
    }
    if let Some(c) = a.connectivity {
        thresholds.connectivity = c;
    }
    cfg.eval.thresholds = thresholds;
    create_dir(&a.out)?;

    if let (Some(plume), Some(reference)) = (&a.plume, &a.reference) {
        let pair = PassPair::new(
            MultispectralPatch::load(plume)?.spectral_only(),
            MultispectralPatch::load(reference)?.spectral_only(),
        )?;
        let (_, v) = mbmp_one(&pair, cfg.mbmp.threshold, &thresholds, &a.out, &stem(plume))?;
        println!("{}", verdict(v.plume, v.largest_region));
        write_jsonl(&a.out.join("verdicts.jsonl"), &[v])?;
        return cfg.write_resolved(&a.out);
    }

    let data = a.data.as_ref().expect("clap requires a source");
    let manifest = DatasetManifest::load(data)?;
    let mut verdicts = Vec::new();
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for (i, e) in manifest.entries.iter().enumerate() {
        if cfg.mbmp.split.is_some_and(|s| s != e.split) {
            continue;
        }
        let Some(reference) = manifest.load_ref(i)? else {
            skipped += 1;
            continue;
        };
        let patch = manifest.load_patch(i)?.spectral_only();
        let truth = manifest.load_mask(i, patch.height(), patch.width())?;
        let pair = PassPair::new(patch, reference.spectral_only())?;
        let (mask, v) = mbmp_one(&pair, cfg.mbmp.threshold, &thresholds, &a.out, &e.id)?;
        println!("{} {}", e.id, verdict(v.plume, v.largest_region));
        verdicts.push(v);
        preds.push(mask);
        truths.push(truth);
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} entries without a reference pass");
    }
    if preds.is_empty() {
        return Err(Error::invalid("mbmp", "no entries with a reference pass"));
    }
    let report = MetricsReport::from_masks(&preds, &truths, &thresholds)?;
    write_jsonl(&a.out.join("verdicts.jsonl"), &verdicts)?;
    write_text(&a.out.join("metrics.json"), &(report.to_json() + "\n"))?;
    print!("{report}");
    cfg.write_resolved(&a.out)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    apply_train(&mut cfg.train, &a);
    cfg.train.validate()?;
    let manifest = DatasetManifest::load(&a.data)?;
    create_dir(&a.out)?;
    cfg.write_resolved(&a.out)?;
    let outcome = train(&cfg.train, &manifest, |r| {
        let f1 = r.val_f1.map_or_else(|| "undefined".into(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {:>4}  train {:.6}  val {:.6}  lr {:e}  val_f1 {f1}{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr,
            if r.sampled_with_replacement {
                "  (negatives drawn with replacement)"
            } else {
                ""
            }
        );
    })?;
    outcome.save(&a.out)?;
    let best = outcome
        .history
        .get(outcome.best_epoch.wrapping_sub(1))
        .map(|r| format!(" (val loss {:.6})", r.val_loss))
        .unwrap_or_default();
    println!(
        "trained {} epochs; best epoch {}{best}; checkpoints in {}",
        outcome.history.len(),
        outcome.best_epoch,
        a.out.display()
    );
    debug_assert_eq!(
        fs::read_to_string(a.out.join("history.csv")).ok(),
        Some(history_csv(&outcome.history))
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    if let Some(s) = a.split {
        cfg.eval.split = s;
    }
    apply_thresholds(&mut cfg.eval.thresholds, &a.thresholds);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.data)?;
    let (report, preds) = evaluate(&ckpt, &manifest, cfg.eval.split, &cfg.eval.thresholds)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("metrics.json"), &(report.to_json() + "\n"))?;
    write_jsonl(&a.out.join("scenes.jsonl"), &preds)?;
    cfg.write_resolved(&a.out)?;
    print!("{report}");
    Ok(())
}

/// Centre-crop a patch to the model extent and build its input tensor.
fn prepare(ckpt: &Checkpoint, patch: &MultispectralPatch) -> Result<(Tensor, MultispectralPatch)> {
    let cfg = ckpt.model.config();
    let ndmi = use_ndmi(cfg)?;
    let norm = ckpt.normalization.as_ref().ok_or_else(|| {
        Error::invalid("predict", "checkpoint carries no normalization statistics")
    })?;
    let size = cfg.input_size;
    let empty = PlumeMask::empty(patch.height(), patch.width());
    let (cropped, _) = crop(patch, &empty, CropMode::Center, size, &mut rng_for(&[0]))?;
    let x = model_input(&cropped, ndmi, norm)?;
    Ok((Tensor::new(&[1, cfg.in_channels, size, size], x)?, cropped))
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut cfg = CliConfig::load(a.config.as_deref())?;
    apply_thresholds(&mut cfg.eval.thresholds, &a.thresholds);
    let t = cfg.eval.thresholds;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let patch = MultispectralPatch::load(&a.input)?;
    let (x, cropped) = prepare(&ckpt, &patch)?;
    let prob = ckpt.model.predict(&x)?;
    let size = ckpt.model.config().input_size;
    let name = stem(&a.input);
    let mut mask = PlumeMask::from_threshold(size, size, prob.data(), t.probability);
    mask.patch_id = Some(name.clone());
    create_dir(&a.out)?;
    mask.save(&a.out.join(format!("{name}.mask.json")))?;
    Plane {
        height: size,
        width: size,
        data: prob.into_data(),
    }
    .save(
        &a.out.join(format!("{name}.prob.json")),
        "PROBABILITY",
        cropped.resolution_m,
    )?;
    cfg.write_resolved(&a.out)?;
    let largest = connected_components(&mask, t.connectivity).largest();
    let plume = scene_label(&mask, t.min_region_pixels, t.connectivity);
    let line = verdict(plume, largest);
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{line}").map_err(|e| Error::io(PathBuf::from("<stdout>"), e))?;
    Ok(())
}

fn gradcam_cmd(a: GradcamArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let patch = MultispectralPatch::load(&a.input)?;
    let (x, cropped) = prepare(&ckpt, &patch)?;
    let cam = gradcam(&ckpt.model, &x, &a.layer)?;
    create_dir(&a.out)?;
    let path = a
        .out
        .join(format!("{}.gradcam.{}.json", stem(&a.input), a.layer));
    cam.heatmap
        .save(&path, "GRADCAM", cropped.resolution_m)?;
    if cam.fallback {
        eprintln!("no pixel predicted as plume; target is the sum of all logits");
    }
    println!("{}", path.display());
    Ok(())
}
