//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use xfr_core::attribution::layerwise_ebp;
use xfr_core::dise::{Fill, WeightOrientation};
use xfr_core::game::{
    self, calibrate_verification_threshold, embed_images, genuine_scores, impostor_scores, roc_auc,
    Galleries, OperatingRow,
};
use xfr_core::io::{save_rgb_image, write_atomic};
use xfr_core::manifest::MANIFEST_FILE;
use xfr_core::netcore::{load_weights, save_weights, train_matcher, TrainConfig};
use xfr_core::saliency;
use xfr_core::subtree::{subtree_ebp, GradientOrientation};
use xfr_core::synth::{generate_dataset, RenderConfig};
use xfr_core::{DatasetManifest, NetworkGraph, Region, SaliencyMap, Split};

use crate::methods::{saliency_for_triplet, Method, MethodParams};
use crate::record::RunRecord;
use crate::{
    CalibrateArgs, Cli, Command, EvalArgs, FillArg, FilterArgs, GradientArg, MontageArgs,
    SaliencyArgs, SynthArgs, TrainArgs, WeightArg,
};

pub const WEIGHTS_FILE: &str = "weights.xfrw";
pub const THRESHOLD_FILE: &str = "threshold.json";
pub const MAPS_DIR: &str = "maps";
pub const CURVE_CSV: &str = "curve.csv";
pub const OPERATING_CSV: &str = "operating_points.csv";

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    pool.build()?.install(|| match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Train(a) => train(a, cli.seed),
        Command::Calibrate(a) => calibrate(a, cli.seed),
        Command::Filter(a) => filter(a, cli.seed),
        Command::Saliency(a) => saliency_cmd(a, cli.seed),
        Command::Eval(a) => eval(a, cli.seed),
        Command::Montage(a) => montage(a, cli.seed),
    })
}

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    require(path, "dataset")?;
    DatasetManifest::load(path).with_context(|| format!("loading manifest from {}", path.display()))
}

fn load_net(path: &Path) -> anyhow::Result<NetworkGraph<f32>> {
    require(path, "weights file")?;
    let path = if path.is_dir() { path.join(WEIGHTS_FILE) } else { path.to_path_buf() };
    load_weights(&path).with_context(|| format!("loading weights from {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn synth(a: &SynthArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            require(p, "config")?;
            RenderConfig::from_toml(&fs::read_to_string(p)?)?
        }
        None => RenderConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(n) = a.evaluation_identities {
        config.evaluation_identities = n;
    }
    config.validate()?;
    let manifest = generate_dataset(&config, &a.out)?;
    DatasetManifest::load(&a.out).context("re-reading the written manifest")?;
    println!(
        "{} images, {} candidate triplets in {}",
        manifest.images.len(),
        manifest.triplets.len(),
        a.out.display()
    );
    let mut rec = RunRecord::new("synth", Some(config.seed), serde_json::to_value(&config)?);
    rec.outputs = vec![MANIFEST_FILE.into(), xfr_core::synth::dataset::CONFIG_FILE.into()];
    rec.write(&a.out)
}

fn train(a: &TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let seed = seed.ok_or_else(|| anyhow!("train needs an explicit --seed"))?;
    let manifest = load_manifest(&a.dataset)?;
    let mut config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        config.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    let (net, report) = train_matcher(&manifest, &config)?;
    let weights = a.out.join(WEIGHTS_FILE);
    save_weights(&net, &weights)?;
    load_weights(&weights).context("re-reading the written weights")?;
    write_json(&a.out.join("train_report.json"), &report)?;
    if let Some(last) = report.epochs.last() {
        println!(
            "trained on {} images of {} identities: final loss {:.4}, accuracy {:.3}",
            report.images, report.identities, last.mean_loss, last.train_accuracy
        );
    }
    let mut rec = RunRecord::new(
        "train",
        Some(seed),
        serde_json::json!({ "dataset": a.dataset, "train": config }),
    );
    rec.outputs = vec![WEIGHTS_FILE.into(), "train_report.json".into()];
    rec.write(&a.out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutCheck {
    pub impostor_pairs: usize,
    pub false_accepts: usize,
    pub far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub threshold: f64,
    pub target_far: f64,
    pub identities: usize,
    pub impostor_pairs: usize,
    pub genuine_pairs: usize,
    /// Genuine-vs-impostor AUC over the whole calibration split.
    pub auc: f64,
    pub holdout: Option<HoldoutCheck>,
}

impl ThresholdRecord {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let path = if path.is_dir() { path.join(THRESHOLD_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `(identity, embedding)` for every calibration face, in image-id order.
pub fn calibration_samples(
    manifest: &DatasetManifest,
    net: &NetworkGraph<f32>,
) -> anyhow::Result<Vec<(String, Vec<f32>)>> {
    let faces: Vec<_> = manifest.face_images(Split::Calibration).collect();
    let emb = embed_images(manifest, net, faces.iter().map(|r| &r.id))?;
    Ok(faces.iter().map(|r| (r.identity.clone(), emb[&r.id].clone())).collect())
}

/// Fits the threshold, optionally on even-indexed identities only, and
/// checks it against the odd-indexed ones.
pub fn calibrate_samples(samples: &[(String, Vec<f32>)], far: f64, holdout: bool) -> anyhow::Result<ThresholdRecord> {
    let identities: BTreeSet<&str> = samples.iter().map(|s| s.0.as_str()).collect();
    let auc = roc_auc(&genuine_scores(samples), &impostor_scores(samples));
    let (fit, held): (Vec<_>, Vec<_>) = if holdout {
        let rank: BTreeMap<&str, usize> = identities.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        samples.iter().cloned().partition(|s| rank[s.0.as_str()] % 2 == 0)
    } else {
        (samples.to_vec(), Vec::new())
    };
    let fit_impostors = impostor_scores(&fit);
    let threshold = calibrate_verification_threshold(&fit_impostors, far)?;
    let holdout = holdout.then(|| {
        let scores = impostor_scores(&held);
        let false_accepts = scores.iter().filter(|&&s| s >= threshold).count();
        HoldoutCheck {
            impostor_pairs: scores.len(),
            false_accepts,
            far: false_accepts as f64 / scores.len().max(1) as f64,
        }
    });
    Ok(ThresholdRecord {
        threshold,
        target_far: far,
        identities: identities.len(),
        impostor_pairs: fit_impostors.len(),
        genuine_pairs: genuine_scores(&fit).len(),
        auc,
        holdout,
    })
}

fn calibrate(a: &CalibrateArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let manifest = load_manifest(&a.dataset)?;
    let net = load_net(&a.weights)?;
    let samples = calibration_samples(&manifest, &net)?;
    let rec = calibrate_samples(&samples, a.far, a.holdout)?;
    write_json(&a.out.join(THRESHOLD_FILE), &rec)?;
    ThresholdRecord::load(&a.out)?;
    println!(
        "threshold {:.6} at FAR {} from {} impostor pairs (AUC {:.4})",
        rec.threshold, rec.target_far, rec.impostor_pairs, rec.auc
    );
    if let Some(h) = &rec.holdout {
        println!(
            "held-out: {} false accepts in {} impostor pairs (FAR {:.2e})",
            h.false_accepts, h.impostor_pairs, h.far
        );
    }
    let mut run = RunRecord::new("calibrate", seed, serde_json::to_value(a)?);
    run.outputs = vec![THRESHOLD_FILE.into()];
    run.write(&a.out)
}

/// A literal value or a threshold record on disk.
pub fn parse_threshold(s: &str) -> anyhow::Result<f64> {
    if let Ok(v) = s.parse::<f64>() {
        return Ok(v);
    }
    Ok(ThresholdRecord::load(Path::new(s))?.threshold)
}

fn filter(a: &FilterArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let threshold = parse_threshold(&a.threshold)?;
    let manifest = load_manifest(&a.dataset)?;
    let net = load_net(&a.weights)?;
    let outcome = game::filter_triplets(&manifest, &net, threshold)?;
    outcome.manifest.save(a.out.join(MANIFEST_FILE))?;
    DatasetManifest::load(&a.out).context("re-reading the filtered manifest")?;
    let mut lines = String::new();
    for c in &outcome.checks {
        lines.push_str(&serde_json::to_string(c)?);
        lines.push('\n');
    }
    write_atomic(&a.out.join("checks.jsonl"), lines.as_bytes())?;

    let summary = outcome.manifest.filter.as_ref().expect("filter sets a summary");
    println!("{:<12} {:>6} {:>8}", "region", "kept", "dropped");
    for r in Region::ALL {
        println!(
            "{:<12} {:>6} {:>8}",
            r.as_str(),
            summary.kept.get(&r).copied().unwrap_or(0),
            summary.dropped.get(&r).copied().unwrap_or(0)
        );
    }
    let subjects: BTreeSet<&str> = outcome.manifest.triplets.iter().map(|t| t.subject.as_str()).collect();
    println!(
        "kept {} identities and {} of {} triplets",
        subjects.len(),
        outcome.manifest.triplets.len(),
        manifest.triplets.len()
    );
    let mut run = RunRecord::new(
        "filter",
        seed,
        serde_json::json!({ "args": a, "threshold": threshold }),
    );
    run.outputs = vec![MANIFEST_FILE.into(), "checks.jsonl".into()];
    run.write(&a.out)
}

impl SaliencyArgs {
    pub fn params(&self, seed: Option<u64>) -> anyhow::Result<MethodParams> {
        if self.method.needs_seed() && seed.is_none() {
            bail!("method {} needs an explicit --seed", self.method);
        }
        let p = MethodParams {
            alpha: self.alpha,
            k: self.k,
            truncation: self.truncation,
            gradient: match self.gradient {
                GradientArg::Descent => GradientOrientation::Descent,
                GradientArg::Verbatim => GradientOrientation::Verbatim,
            },
            samples: self.samples,
            prior_percentile: self.prior_percentile,
            weight: match self.weight {
                WeightArg::Verbatim => WeightOrientation::Verbatim,
                WeightArg::Reversed => WeightOrientation::Reversed,
            },
            fill: match self.fill {
                FillArg::Blur => Fill::Blur,
                FillArg::Gray => Fill::Gray,
            },
            cell_size: self.cell_size,
            seed: seed.unwrap_or(0),
        };
        p.validate(self.method)?;
        Ok(p)
    }
}

/// Where a triplet's map lives inside a saliency run directory.
pub fn map_path(dir: &Path, triplet: &str) -> PathBuf {
    dir.join(MAPS_DIR).join(format!("{triplet}.png"))
}

/// Embeddings of every gallery image of the manifest's triplets.
pub fn gallery_embeddings(
    manifest: &DatasetManifest,
    net: &NetworkGraph<f32>,
) -> xfr_core::Result<BTreeMap<String, Vec<f32>>> {
    embed_images(
        manifest,
        net,
        manifest.triplets.iter().flat_map(|t| t.mates.iter().chain(&t.nonmates)),
    )
}

/// Computes and writes maps and sidecars for every triplet; returns the
/// number of maps carrying warnings.
pub fn write_saliency(
    method: Method,
    params: &MethodParams,
    net: &NetworkGraph<f32>,
    manifest: &DatasetManifest,
    out: &Path,
    limit: Option<usize>,
) -> anyhow::Result<usize> {
    let triplets = &manifest.triplets[..limit.unwrap_or(usize::MAX).min(manifest.triplets.len())];
    let emb = gallery_embeddings(manifest, net)?;
    let warned = triplets
        .par_iter()
        .map(|t| -> anyhow::Result<bool> {
            let (map, meta) = saliency_for_triplet(method, params, net, manifest, t, &emb)?;
            let path = map_path(out, &t.id);
            map.save_png(&path)?;
            write_json(&path.with_extension("json"), &meta)?;
            let back = SaliencyMap::load_png(&path)?;
            if (back.width(), back.height()) != (map.width(), map.height()) {
                bail!("{} did not round-trip", path.display());
            }
            Ok(!meta.warnings.is_empty())
        })
        .collect::<anyhow::Result<Vec<bool>>>()?;
    Ok(warned.into_iter().filter(|&w| w).count())
}

fn saliency_cmd(a: &SaliencyArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let params = a.params(seed)?;
    let manifest = load_manifest(&a.dataset)?;
    let net = load_net(&a.weights)?;
    let warned = write_saliency(a.method, &params, &net, &manifest, &a.out, a.limit)?;
    let count = a.limit.unwrap_or(usize::MAX).min(manifest.triplets.len());
    println!("{count} {} maps written to {}", a.method, a.out.join(MAPS_DIR).display());
    if warned > 0 {
        println!("{warned} maps carry warnings (see their sidecars)");
    }
    let mut run = RunRecord::new(
        "saliency",
        seed,
        serde_json::json!({ "args": a, "parameters": params.relevant(a.method) }),
    );
    run.outputs = vec![MAPS_DIR.into()];
    run.write(&a.out)
}

/// Loads whatever maps exist for the manifest's triplets.
pub fn load_maps(dir: &Path, manifest: &DatasetManifest) -> anyhow::Result<BTreeMap<String, SaliencyMap>> {
    let mut maps = BTreeMap::new();
    for t in &manifest.triplets {
        let p = map_path(dir, &t.id);
        if p.exists() {
            maps.insert(t.id.clone(), SaliencyMap::load_png(&p)?);
        }
    }
    Ok(maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: String,
    pub triplets: usize,
    pub region_counts: BTreeMap<Region, usize>,
    pub operating_points: Vec<OperatingRow>,
}

/// Evaluates maps and writes the curve and operating-point CSVs and plot.
pub fn write_eval(
    name: &str,
    maps: &BTreeMap<String, SaliencyMap>,
    manifest: &DatasetManifest,
    net: &NetworkGraph<f32>,
    fprs: &[f64],
    out: &Path,
) -> anyhow::Result<(game::EvalCurve, EvalSummary)> {
    let curve = game::evaluate(maps, manifest, net, &game::default_thresholds())?;
    game::write_curve_csv(&curve, &out.join(CURVE_CSV))?;
    let rows = game::operating_rows(name, &curve, fprs)?;
    game::write_operating_csv(&rows, &out.join(OPERATING_CSV))?;
    save_rgb_image(&game::plot_curves(&[(name, &curve)]), &out.join("curve.png"))?;
    let summary = EvalSummary {
        method: name.to_string(),
        triplets: curve.triplets(),
        region_counts: curve.region_counts.clone(),
        operating_points: rows,
    };
    write_json(&out.join("summary.json"), &summary)?;
    // The CSVs must parse back with the expected row counts.
    let count = |p: &Path| -> anyhow::Result<usize> {
        Ok(csv::Reader::from_path(p)?.records().collect::<Result<Vec<_>, _>>()?.len())
    };
    if count(&out.join(CURVE_CSV))? != curve.points.len()
        || count(&out.join(OPERATING_CSV))? != summary.operating_points.len()
    {
        bail!("written CSVs do not match the evaluation");
    }
    Ok((curve, summary))
}

fn eval(a: &EvalArgs, seed: Option<u64>) -> anyhow::Result<()> {
    require(&a.saliency, "saliency directory")?;
    let manifest = load_manifest(&a.dataset)?;
    let net = load_net(&a.weights)?;
    let name = match &a.name {
        Some(n) => n.clone(),
        None => RunRecord::load(&a.saliency)
            .ok()
            .and_then(|r| r.config["args"]["method"].as_str().map(str::to_string))
            .unwrap_or_else(|| "saliency".into()),
    };
    let maps = load_maps(&a.saliency, &manifest)?;
    let (_, summary) = write_eval(&name, &maps, &manifest, &net, &a.fprs, &a.out)?;
    print_table(&summary, &a.fprs);
    let mut run = RunRecord::new("eval", seed, serde_json::to_value(a)?);
    run.outputs = vec![CURVE_CSV.into(), OPERATING_CSV.into(), "curve.png".into(), "summary.json".into()];
    run.write(&a.out)
}

fn print_table(s: &EvalSummary, fprs: &[f64]) {
    print!("{:<12}", s.method);
    for f in fprs {
        print!(" {:>10}", format!("@{f:e}"));
    }
    println!();
    let mut subs: Vec<&str> = Vec::new();
    for r in &s.operating_points {
        if !subs.contains(&r.subprotocol.as_str()) {
            subs.push(&r.subprotocol);
        }
    }
    for sub in subs {
        print!("{sub:<12}");
        for f in fprs {
            let row = s.operating_points.iter().find(|r| r.subprotocol == sub && r.fpr == *f);
            print!(" {:>10.3}", row.map(|r| r.rate).unwrap_or(f64::NAN));
        }
        println!();
    }
    println!("{} triplets", s.triplets);
}

/// Lays out equally sized tiles row by row, each enlarged `scale` times.
pub fn tile(rows: &[Vec<RgbImage>], scale: u32) -> RgbImage {
    let (tw, th) = rows
        .iter()
        .flatten()
        .next()
        .map(|i| (i.width() * scale, i.height() * scale))
        .unwrap_or((1, 1));
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1).max(1) as u32;
    let gap = 2;
    let mut out = RgbImage::from_pixel(
        cols * (tw + gap) + gap,
        rows.len().max(1) as u32 * (th + gap) + gap,
        image::Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let big = image::imageops::resize(img, tw, th, image::imageops::FilterType::Nearest);
            image::imageops::replace(
                &mut out,
                &big,
                (gap + c as u32 * (tw + gap)) as i64,
                (gap + r as u32 * (th + gap)) as i64,
            );
        }
    }
    out
}

fn montage(a: &MontageArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let manifest = load_manifest(&a.dataset)?;
    let region = a.region.as_deref().map(str::parse::<Region>).transpose()?;
    let runs = a
        .saliency
        .iter()
        .map(|s| {
            let (name, dir) = s.split_once('=').unwrap_or((s.as_str(), s.as_str()));
            require(Path::new(dir), "saliency directory")?;
            Ok((name.to_string(), PathBuf::from(dir)))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let chosen: Vec<_> = manifest
        .triplets
        .iter()
        .filter(|t| region.is_none_or(|r| t.region == r))
        .take(a.rows)
        .collect();
    if chosen.is_empty() {
        bail!("no triplets to show");
    }
    let net = if a.layerwise || a.subtree_nodes {
        let w = a.weights.as_ref().ok_or_else(|| anyhow!("--layerwise and --subtree-nodes need --weights"))?;
        Some(load_net(w)?)
    } else {
        None
    };
    let rgb = |id: &str| -> anyhow::Result<RgbImage> { Ok(xfr_core::io::tensor_to_rgb(&manifest.load_image(id)?)?) };
    let mut outputs = Vec::new();
    let mut grid = Vec::new();
    for t in &chosen {
        let probe = manifest.load_image(&t.probe)?;
        let mut row = vec![rgb(&t.probe)?, rgb(&t.mates[0])?, rgb(&t.nonmates[0])?];
        for (_, dir) in &runs {
            let map = SaliencyMap::load_png(&map_path(dir, &t.id))?;
            row.push(saliency::overlay(&probe, &map)?);
        }
        grid.push(row);
    }
    let name = match region {
        Some(r) => format!("montage-{r}.png"),
        None => "montage.png".to_string(),
    };
    save_rgb_image(&tile(&grid, 2), &a.out.join(&name))?;
    outputs.push(name);

    if let Some(net) = &net {
        let emb = gallery_embeddings(&manifest, net)?;
        for t in &chosen {
            let (_, trace) = net.forward(&manifest.load_image(&t.probe)?)?;
            let slug = t.id.replace('/', "-");
            if a.layerwise {
                let maps: Vec<SaliencyMap> = layerwise_ebp(net, &trace)?.into_iter().map(|l| l.map).collect();
                let file = format!("layerwise/{slug}.png");
                save_rgb_image(&saliency::montage(&maps, 4, 2), &a.out.join(&file))?;
                outputs.push(file);
            }
            if a.subtree_nodes {
                let g = Galleries::for_triplet(t, &emb)?;
                let params = MethodParams::default();
                match subtree_ebp(net, &trace, &g.mate, &g.nonmate, params.alpha, params.k, params.gradient) {
                    Ok(r) => {
                        let file = format!("subtree/{slug}.png");
                        save_rgb_image(&saliency::montage(&r.node_maps, 9, 2), &a.out.join(&file))?;
                        outputs.push(file);
                    }
                    Err(e) => log::warn!("{}: no subtree montage: {e}", t.id),
                }
            }
        }
    }
    println!("wrote {} images to {}", outputs.len(), a.out.display());
    let mut run = RunRecord::new("montage", seed, serde_json::to_value(a)?);
    run.outputs = outputs;
    run.write(&a.out)
}
