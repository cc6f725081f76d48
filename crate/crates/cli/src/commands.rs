use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pgr_core::htk::ConfidenceRecord;
use pgr_core::labelio::{read_pgm, write_atomic, Gray8, LabelGrid, Region};
use pgr_core::metrics::{evaluate as score, EvalCase};
use pgr_core::network::{labels_from_logits, prepare_image, Dataset, Mode, PgrNet, Settings};
use pgr_core::numerics::checkpoint::{read_checkpoint, write_checkpoint};
use pgr_core::prior::{extract_priors as mine, PriorConfig, PriorTemplateSet, RoiPrior};
use pgr_core::synth::{generate, write_dataset, SynthConfig};
use pgr_core::wings::{aggregate_guidance, decayed_template, RoiInstance, GUIDANCE_EPS};
use pgr_core::Exec;
use serde::{Deserialize, Serialize};

use crate::{EvaluateArgs, ExtractPriorsArgs, GenGuidanceArgs, GenSynthArgs, InferArgs, InputError, TrainArgs};

fn bad(msg: impl Display) -> anyhow::Error {
    InputError(msg.to_string()).into()
}

/// Reading or validating something the caller supplied.
fn input<T, E: Display>(r: std::result::Result<T, E>, what: impl Display) -> Result<T> {
    r.map_err(|e| bad(format!("{what}: {e}")))
}

/// `path` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `dir/sub` when it exists, else `dir`.
fn prefer_sub(dir: &Path, sub: &str) -> PathBuf {
    let p = dir.join(sub);
    if p.is_dir() {
        p
    } else {
        dir.to_path_buf()
    }
}

/// Sorted `.pgm` files directly inside `dir`.
fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(bad(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = input(fs::read_dir(dir), dir.display())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

// ------------------------------------------------------------------ priors

pub fn extract_priors(a: ExtractPriorsArgs) -> Result<()> {
    let dir = prefer_sub(&a.masks, "masks");
    let files = pgm_files(&dir)?;
    if files.is_empty() {
        return Err(bad(format!("no .pgm masks in {}", dir.display())));
    }
    let masks = files
        .iter()
        .map(|f| input(LabelGrid::read(f), f.display()))
        .collect::<Result<Vec<_>>>()?;
    let cfg = PriorConfig {
        s_min: a.s_min,
        s_valid: a.s_valid,
        d_min: a.d_min,
        neighbor_radius: a.radius,
        n: a.n,
        foreground: a.labels,
        ..PriorConfig::default()
    };
    let set = input(mine(&masks, &cfg, Exec::Parallel), "extraction")?;
    set.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} masks, {} priors ({:?})", masks.len(), set.len(), set.status);
    println!("{:>3}  {:>9}  {:>8}  {:>8}  {:>8}  {:>7}", "#", "peak_size", "r", "cx", "cy", "support");
    for (i, p) in set.priors.iter().enumerate() {
        println!(
            "{i:>3}  {:>9}  {:>8.4}  {:>8.4}  {:>8.4}  {:>7}",
            p.peak_size, p.r, p.cx, p.cy, p.support
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- guidance

/// `round(255·v / max)`; an all-zero map stays zero.
fn quantize(values: &[f64], max: f64, size: usize) -> Result<Gray8> {
    let px = values
        .iter()
        .map(|&v| if max > 0.0 { (255.0 * v / max).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    Ok(Gray8::new(size, size, px)?)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

#[derive(Serialize)]
struct MapEntry {
    file: String,
    max: f64,
}

#[derive(Serialize)]
struct GuidanceSidecar {
    layer_size: usize,
    sigma_ratio: f64,
    tau_ratio: f64,
    eps: f64,
    maps: Vec<MapEntry>,
}

pub fn gen_guidance(a: GenGuidanceArgs) -> Result<()> {
    let set = input(PriorTemplateSet::read(&a.priors), a.priors.display())?;
    if set.is_empty() {
        return Err(bad(format!("{} holds no priors", a.priors.display())));
    }
    if a.layer_size == 0 || !(a.sigma_ratio > 0.0) || !(a.tau_ratio > 0.0) {
        return Err(bad("layer size, sigma ratio and tau ratio must be positive"));
    }
    let s = a.layer_size;
    let image = match &a.image {
        Some(p) => {
            let g = input(read_pgm(p), p.display())?;
            if (g.width, g.height) != (s, s) {
                return Err(bad(format!("{} is {}×{}, expected {s}×{s}", p.display(), g.width, g.height)));
            }
            Some(g)
        }
        None => None,
    };
    create_dir(&a.out)?;
    // Prior centres are pixel-index means, so shift by half a source pixel
    // to place them in pixel-centre coordinates.
    let (ph, pw) = (set.params.height.max(1) as f64, set.params.width.max(1) as f64);
    let rois: Vec<RoiInstance> = set
        .priors
        .iter()
        .map(|p| RoiInstance::with_fractions(p.cx + 0.5 / pw, p.cy + 0.5 / ph, p.r, 1.0, s, a.sigma_ratio, a.tau_ratio))
        .collect();
    let mut maps = Vec::new();
    for (i, roi) in rois.iter().enumerate() {
        let t = decayed_template(roi, s, s)?;
        let max = max_of(t.data());
        let file = format!("prior_{i}.pgm");
        write_atomic(&a.out.join(&file), &quantize(t.data(), max, s)?.encode())?;
        maps.push(MapEntry { file, max });
    }
    let m = aggregate_guidance(&rois, s, s, GUIDANCE_EPS, 0)?;
    let max = max_of(m.values.data());
    write_atomic(&a.out.join("aggregate.pgm"), &quantize(m.values.data(), max, s)?.encode())?;
    maps.push(MapEntry { file: "aggregate.pgm".into(), max });
    if let Some(g) = image {
        let out: Vec<f64> = g
            .pixels
            .iter()
            .zip(m.values.data())
            .map(|(&p, &mv)| f64::from(p) / 255.0 * (1.0 + a.lambda * mv))
            .collect();
        let max = max_of(&out);
        write_atomic(&a.out.join("modulated.pgm"), &quantize(&out, max, s)?.encode())?;
        maps.push(MapEntry { file: "modulated.pgm".into(), max });
    }
    write_json(
        &a.out.join("guidance.json"),
        &GuidanceSidecar {
            layer_size: s,
            sigma_ratio: a.sigma_ratio,
            tau_ratio: a.tau_ratio,
            eps: GUIDANCE_EPS,
            maps,
        },
    )?;
    println!("{} prior maps and the aggregate written to {}", rois.len(), a.out.display());
    Ok(())
}

// ------------------------------------------------------------------- synth

pub fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        distractors: a.distractors,
        ..SynthConfig::new(a.cases, a.size, a.seed)
    };
    let cases = input(generate(&cfg, Exec::Parallel), "synthetic settings")?;
    write_dataset(&a.out, &cfg, &cases).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} cases of {}×{} written to {}", cases.len(), a.size, a.size, a.out.display());
    Ok(())
}

// ------------------------------------------------------------------- train

/// Everything besides the weights needed to rebuild a trained network.
#[derive(Serialize, Deserialize)]
struct Sidecar {
    settings: Settings,
    priors: Vec<RoiPrior>,
    best_epoch: usize,
    best_val_dice: f64,
    stopped_early: bool,
}

fn load_settings(a: &TrainArgs) -> Result<Settings> {
    let mut s = match &a.config {
        Some(p) => {
            let text = input(fs::read_to_string(p), p.display())?;
            input(Settings::parse(&text), p.display())?
        }
        None => Settings::default(),
    };
    let mut errs = Vec::new();
    let mut pairs: Vec<(String, String)> = Vec::new();
    for kv in &a.set {
        match kv.split_once('=') {
            Some((k, v)) => pairs.push((k.into(), v.into())),
            None => errs.push(format!("--set {kv}: expected KEY=VALUE")),
        }
    }
    let flags = [
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    pairs.extend(flags.into_iter().filter_map(|(k, v)| Some((k.to_string(), v?))));
    for (k, v) in pairs {
        if let Err(e) = s.set(&k, &v) {
            errs.push(format!("{k}: {e}"));
        }
    }
    if !errs.is_empty() {
        return Err(bad(format!("invalid settings: {}", errs.join("; "))));
    }
    input(s.validate(), "settings")?;
    Ok(s)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let settings = load_settings(&a)?;
    let set = input(PriorTemplateSet::read(&a.priors), a.priors.display())?;
    if set.is_empty() {
        return Err(bad(format!("{} holds no priors", a.priors.display())));
    }
    let data = input(Dataset::from_dir(&a.data, settings.net.classes), a.data.display())?;
    if data.len() < 2 {
        return Err(bad(format!("{} has {} cases, training needs two", a.data.display(), data.len())));
    }
    let channels = data.samples[0].image.shape()[0];
    if channels != settings.net.in_channels {
        return Err(bad(format!(
            "dataset has {channels} modalities but in_channels = {}",
            settings.net.in_channels
        )));
    }
    let net = input(PgrNet::new(settings.net.clone(), set.priors.clone()), "network settings")?;
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let out = pgr_core::network::train(net, &data, &settings.train, exec, &mut |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val dice {:.4}  val hd95 {:.3}  fallback {:.3}",
            r.epoch, r.train_loss, r.val_dice, r.val_hd95, r.fallback_rate
        )
    })?;

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, out.net.store.entries())?;
    write_atomic(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    write_json(
        &sibling(&a.out, ".json"),
        &Sidecar {
            settings,
            priors: out.net.priors.clone(),
            best_epoch: out.best_epoch,
            best_val_dice: out.best_val_dice,
            stopped_early: out.stopped_early,
        },
    )?;
    write_atomic(&sibling(&a.out, ".csv"), out.history_csv().as_bytes())?;
    println!(
        "{} epochs{}; best validation Dice {:.4} at epoch {}",
        out.history.len(),
        if out.stopped_early { " (stopped early)" } else { "" },
        out.best_val_dice,
        out.best_epoch
    );
    Ok(())
}

// ------------------------------------------------------------------- infer

fn load_net(ckpt: &Path) -> Result<(PgrNet, Settings)> {
    let side_path = sibling(ckpt, ".json");
    let text = input(fs::read_to_string(&side_path), side_path.display())?;
    let side: Sidecar = input(serde_json::from_str(&text), side_path.display())?;
    let file = input(fs::File::open(ckpt), ckpt.display())?;
    let entries = input(read_checkpoint(std::io::BufReader::new(file)), ckpt.display())?;
    let mut net = input(PgrNet::new(side.settings.net.clone(), side.priors), side_path.display())?;
    input(net.store.load(entries), ckpt.display())?;
    Ok((net, side.settings))
}

/// Modality files per case id under `images/`, ordered by modality index.
fn dataset_cases(dir: &Path) -> Result<BTreeMap<String, Vec<(usize, PathBuf)>>> {
    let mut cases: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();
    for f in pgm_files(&dir.join("images"))? {
        let name = stem(&f);
        let Some((id, m)) = name.rsplit_once("_m") else { continue };
        if let Ok(m) = m.parse::<usize>() {
            cases.entry(id.to_string()).or_default().push((m, f));
        }
    }
    for v in cases.values_mut() {
        v.sort();
    }
    if cases.is_empty() {
        return Err(bad(format!("no <id>_m<k>.pgm images under {}", dir.join("images").display())));
    }
    Ok(cases)
}

fn infer_one(net: &PgrNet, mode: Mode, inputs: &[PathBuf], out: &Path, emit: bool) -> Result<bool> {
    let grays = inputs
        .iter()
        .map(|p| input(read_pgm(p), p.display()))
        .collect::<Result<Vec<_>>>()?;
    let image = input(prepare_image(&grays), "input images")?;
    if image.shape()[0] != net.config.in_channels {
        return Err(bad(format!(
            "{} modalities given, the network expects {}",
            image.shape()[0],
            net.config.in_channels
        )));
    }
    let p = input(net.predict(&image, mode), "input image")?;
    let labels = labels_from_logits(&p.logits)?;
    labels.write(out).with_context(|| format!("writing {}", out.display()))?;
    if emit {
        let json = match &p.record {
            Some(r) => r.to_json()?,
            None => "null\n".to_string(),
        };
        write_atomic(&out.with_extension("decision.json"), json.as_bytes())?;
    }
    Ok(p.record.as_ref().is_none_or(|r| r.fallback))
}

pub fn infer(a: InferArgs) -> Result<()> {
    let (net, settings) = load_net(&a.ckpt)?;
    let mode = match &a.mode {
        Some(m) => input(m.parse::<Mode>(), "--mode")?,
        None => settings.train.eval_mode,
    };
    if let [dir] = &a.input[..] {
        if dir.is_dir() {
            let cases = dataset_cases(dir)?;
            create_dir(&a.out)?;
            let mut fallbacks = 0;
            for (id, files) in &cases {
                let paths: Vec<PathBuf> = files.iter().map(|(_, p)| p.clone()).collect();
                let out = a.out.join(format!("{id}.pgm"));
                fallbacks += usize::from(infer_one(&net, mode, &paths, &out, a.emit_decision)?);
            }
            println!(
                "{} cases segmented ({} mode), decision fell back on {fallbacks}",
                cases.len(),
                mode.name()
            );
            return Ok(());
        }
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let fb = infer_one(&net, mode, &a.input, &a.out, a.emit_decision)?;
    println!("{} written ({} mode, fallback {fb})", a.out.display(), mode.name());
    Ok(())
}

// ---------------------------------------------------------------- evaluate

/// The decision's fallback verdict stored next to a predicted mask, if any.
fn stored_fallback(pred: &Path) -> Result<Option<bool>> {
    let p = pred.with_extension("decision.json");
    if !p.is_file() {
        return Ok(None);
    }
    let text = input(fs::read_to_string(&p), p.display())?;
    let rec: Option<ConfidenceRecord> = input(serde_json::from_str(&text), p.display())?;
    Ok(Some(rec.is_none_or(|r| r.fallback)))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let gt_dir = prefer_sub(&a.gt, "masks");
    let gt_files = pgm_files(&gt_dir)?;
    if gt_files.is_empty() {
        return Err(bad(format!("no .pgm masks in {}", gt_dir.display())));
    }
    if !a.pred.is_dir() {
        return Err(bad(format!("{} is not a directory", a.pred.display())));
    }
    let mut cases = Vec::with_capacity(gt_files.len());
    for g in &gt_files {
        let name = g.file_name().expect("listed file");
        let p = a.pred.join(name);
        if !p.is_file() {
            return Err(bad(format!("no prediction {} for {}", p.display(), g.display())));
        }
        let gt = input(LabelGrid::read(g), g.display())?;
        let pred = input(LabelGrid::read(&p), p.display())?;
        if (gt.height, gt.width) != (pred.height, pred.width) {
            return Err(bad(format!("{} and {} differ in size", p.display(), g.display())));
        }
        cases.push(EvalCase {
            id: stem(g),
            fallback: stored_fallback(&p)?,
            pred,
            gt,
        });
    }
    let regions: &[Region] = match a.regions.as_deref() {
        Some("wt") => &[Region::WT],
        Some("all") => &Region::ALL,
        Some(other) => return Err(bad(format!("--regions {other}: expected wt or all"))),
        None if cases.iter().all(|c| c.gt.is_binary()) => &[Region::WT],
        None => &Region::ALL,
    };
    let report = input(score(&cases, regions, Exec::Parallel), "evaluation")?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(&a.out, report.to_csv().as_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{} cases", cases.len());
    for (r, (d, h)) in &report.means {
        println!("{:<3} mean dice {d:.4}  mean hd95 {h:.3}", r.name());
    }
    if let Some(f) = report.fallback_rate {
        println!("fallback rate {f:.4}");
    }
    Ok(())
}
