//! The inpainting game: verification-threshold calibration, triplet
//! filtering, the saliency-threshold sweep with probe blending, and curve
//! and operating-point metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfrError};
use crate::io::{self, BinaryMask};
use crate::manifest::{DatasetManifest, FilterSummary, Region, TripletRecord};
use crate::netcore::NetworkGraph;
use crate::rng::derive_rng;
use crate::saliency::{Normalization, SaliencyMap};
use crate::tensor::{squared_distance, Tensor};

/// Target false accept rate of the verification threshold.
pub const DEFAULT_FAR: f64 = 1e-4;
/// Default operating points on the pixel false-positive axis.
pub const DEFAULT_OPERATING_FPRS: [f64; 2] = [1e-2, 5e-2];
/// Threshold past the top of a max-normalized map: selects nothing.
pub const EMPTY_MASK_THRESHOLD: f64 = 256.0 / 255.0;

/// Verification similarity: negative squared distance.
pub fn similarity(a: &[f32], b: &[f32]) -> f64 {
    -(squared_distance(a, b) as f64)
}

/// Smallest threshold `t` with at most a `far` fraction of scores `>= t`.
pub fn calibrate_verification_threshold(impostor_scores: &[f64], far: f64) -> Result<f64> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(XfrError::InvalidArgument(format!(
            "false accept rate {far} outside (0, 1]"
        )));
    }
    let required = (1.0 / far).ceil() as usize;
    if impostor_scores.len() < required {
        return Err(XfrError::InsufficientPairs {
            required,
            actual: impostor_scores.len(),
        });
    }
    if impostor_scores.iter().any(|s| !s.is_finite()) {
        return Err(XfrError::InvalidArgument("non-finite impostor score".into()));
    }
    let mut sorted = impostor_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // Tolerate representation error in far * n (e.g. 0.01 * 100).
    let allowed = (far * n as f64 + 1e-9).floor() as usize;
    if allowed >= n {
        return Ok(sorted[n - 1]);
    }
    Ok(sorted[allowed].next_up())
}

/// Similarities of all cross-identity pairs, in input order.
pub fn impostor_scores(samples: &[(String, Vec<f32>)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, (id_a, a)) in samples.iter().enumerate() {
        for (id_b, b) in &samples[i + 1..] {
            if id_a != id_b {
                out.push(similarity(a, b));
            }
        }
    }
    out
}

/// Similarities of all same-identity pairs, in input order.
pub fn genuine_scores(samples: &[(String, Vec<f32>)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, (id_a, a)) in samples.iter().enumerate() {
        for (id_b, b) in &samples[i + 1..] {
            if id_a == id_b {
                out.push(similarity(a, b));
            }
        }
    }
    out
}

/// Area under the ROC curve of genuine vs impostor scores (ties count half).
pub fn roc_auc(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut imp = impostor.to_vec();
    imp.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &g in genuine {
        let below = imp.partition_point(|&s| s < g);
        let upto = imp.partition_point(|&s| s <= g);
        wins += below as f64 + 0.5 * (upto - below) as f64;
    }
    wins / (genuine.len() as f64 * imp.len() as f64)
}

/// Renormalized mean of reference embeddings.
pub fn gallery(embeddings: &[&[f32]]) -> Result<Vec<f32>> {
    let first = embeddings
        .first()
        .ok_or_else(|| XfrError::InvalidArgument("empty gallery".into()))?;
    let mut mean = vec![0.0f64; first.len()];
    for e in embeddings {
        if e.len() != mean.len() {
            return Err(XfrError::LengthMismatch(mean.len(), e.len()));
        }
        for (m, &v) in mean.iter_mut().zip(*e) {
            *m += v as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(XfrError::InvalidArgument("gallery mean is the zero vector".into()));
    }
    Ok(mean.iter().map(|v| (v / norm) as f32).collect())
}

/// Embeds the given manifest images in parallel.
pub fn embed_images<'a>(
    manifest: &DatasetManifest,
    net: &NetworkGraph<f32>,
    ids: impl IntoIterator<Item = &'a String>,
) -> Result<BTreeMap<String, Vec<f32>>> {
    let ids: BTreeSet<&String> = ids.into_iter().collect();
    ids.into_par_iter()
        .map(|id| {
            let img = manifest.load_image(id)?;
            Ok((id.clone(), net.embed(&img)?.into_data()))
        })
        .collect()
}

/// Mate and nonmate galleries of one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Galleries {
    pub mate: Vec<f32>,
    pub nonmate: Vec<f32>,
}

impl Galleries {
    pub fn for_triplet(t: &TripletRecord, emb: &BTreeMap<String, Vec<f32>>) -> Result<Self> {
        let pick = |ids: &[String]| -> Result<Vec<f32>> {
            let refs = ids
                .iter()
                .map(|id| {
                    emb.get(id).map(Vec::as_slice).ok_or_else(|| {
                        XfrError::Manifest(format!("no embedding for image {id}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            gallery(&refs)
        };
        Ok(Galleries {
            mate: pick(&t.mates)?,
            nonmate: pick(&t.nonmates)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Mate,
    Nonmate,
}

/// Nearer gallery centroid; an exact tie goes to the mate.
pub fn classify_embedding(e: &[f32], g: &Galleries) -> Side {
    if squared_distance(e, &g.nonmate) < squared_distance(e, &g.mate) {
        Side::Nonmate
    } else {
        Side::Mate
    }
}

pub fn classify_blended(net: &NetworkGraph<f32>, blended: &Tensor<f32>, g: &Galleries) -> Result<Side> {
    Ok(classify_embedding(net.embed(blended)?.data(), g))
}

/// Both filtering criteria for one triplet, from raw embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletCheck {
    pub id: String,
    pub region: Region,
    pub probe_mate: f64,
    pub probe_nonmate: f64,
    pub inpainted_mate: f64,
    pub inpainted_nonmate: f64,
    /// Probe is nearer the mates and verifies against them.
    pub probe_ok: bool,
    /// Inpainted probe is nearer the nonmates and verifies against them.
    pub inpainted_ok: bool,
}

impl TripletCheck {
    pub fn evaluate(
        t: &TripletRecord,
        probe: &[f32],
        inpainted: &[f32],
        g: &Galleries,
        threshold: f64,
    ) -> Self {
        let probe_mate = similarity(probe, &g.mate);
        let probe_nonmate = similarity(probe, &g.nonmate);
        let inpainted_mate = similarity(inpainted, &g.mate);
        let inpainted_nonmate = similarity(inpainted, &g.nonmate);
        TripletCheck {
            id: t.id.clone(),
            region: t.region,
            probe_mate,
            probe_nonmate,
            inpainted_mate,
            inpainted_nonmate,
            probe_ok: probe_mate > probe_nonmate && probe_mate >= threshold,
            inpainted_ok: inpainted_nonmate > inpainted_mate && inpainted_nonmate >= threshold,
        }
    }

    pub fn kept(&self) -> bool {
        self.probe_ok && self.inpainted_ok
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    /// Input manifest restricted to kept triplets, with a filter summary.
    pub manifest: DatasetManifest,
    pub checks: Vec<TripletCheck>,
}

/// Keeps triplets that satisfy both criteria at `threshold`.
pub fn filter_triplets(
    manifest: &DatasetManifest,
    net: &NetworkGraph<f32>,
    threshold: f64,
) -> Result<FilterOutcome> {
    let ids = manifest.triplets.iter().flat_map(|t| {
        [&t.probe, &t.inpainted_probe]
            .into_iter()
            .chain(&t.mates)
            .chain(&t.nonmates)
    });
    let emb = embed_images(manifest, net, ids)?;
    let mut checks = Vec::with_capacity(manifest.triplets.len());
    let mut summary = FilterSummary {
        threshold,
        ..FilterSummary::default()
    };
    let mut kept = Vec::new();
    for t in &manifest.triplets {
        let g = Galleries::for_triplet(t, &emb)?;
        let check = TripletCheck::evaluate(t, &emb[&t.probe], &emb[&t.inpainted_probe], &g, threshold);
        let bucket = if check.kept() {
            kept.push(t.clone());
            &mut summary.kept
        } else {
            &mut summary.dropped
        };
        *bucket.entry(t.region).or_insert(0) += 1;
        checks.push(check);
    }
    if kept.is_empty() {
        log::warn!("filtering kept no triplets at threshold {threshold}");
    }
    let mut out = manifest.clone();
    out.triplets = kept;
    out.filter = Some(summary);
    Ok(FilterOutcome {
        manifest: out,
        checks,
    })
}

/// Pixels with saliency at or above `t`.
pub fn binarize_saliency(map: &SaliencyMap, t: f64) -> BinaryMask {
    BinaryMask::new(
        map.width(),
        map.height(),
        map.values().iter().map(|&v| v as f64 >= t).collect(),
    )
}

/// Probe with masked pixels taken from the inpainted probe.
pub fn blend_probe(probe: &Tensor<f32>, inpainted: &Tensor<f32>, mask: &BinaryMask) -> Result<Tensor<f32>> {
    if probe.shape() != inpainted.shape() {
        return Err(XfrError::ShapeMismatch {
            expected: probe.shape().to_vec(),
            actual: inpainted.shape().to_vec(),
        });
    }
    let (_, h, w) = probe.chw().ok_or_else(|| XfrError::ShapeMismatch {
        expected: vec![3, mask.height, mask.width],
        actual: probe.shape().to_vec(),
    })?;
    if (h, w) != (mask.height, mask.width) {
        return Err(XfrError::ShapeMismatch {
            expected: vec![h, w],
            actual: vec![mask.height, mask.width],
        });
    }
    let data = probe
        .data()
        .chunks(h * w)
        .zip(inpainted.data().chunks(h * w))
        .flat_map(|(p, q)| {
            p.iter()
                .zip(q)
                .zip(&mask.data)
                .map(|((&a, &b), &m)| if m { b } else { a })
        })
        .collect();
    Tensor::from_vec(probe.shape(), data)
}

/// Default sweep: 256 uniform thresholds on `[0, 1]` plus one past the top.
pub fn default_thresholds() -> Vec<f64> {
    let mut t: Vec<f64> = (0..256).map(|i| i as f64 / 255.0).collect();
    t.push(EMPTY_MASK_THRESHOLD);
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Unweighted mean of per-region rates.
    Macro,
    /// Pooled over all triplets.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    pub fpr: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    /// Pixel false-positive rate pooled over all triplets.
    pub fpr: f64,
    pub macro_rate: f64,
    pub micro_rate: f64,
    pub regions: BTreeMap<Region, RegionPoint>,
}

/// Sweep result, ordered from the empty-mask end (highest threshold) so
/// that FPR is non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub region_counts: BTreeMap<Region, usize>,
}

impl EvalCurve {
    pub fn triplets(&self) -> usize {
        self.region_counts.values().sum()
    }

    /// `(fpr, rate)` pairs for the given averaging, or for one region.
    pub fn series(&self, averaging: Averaging, region: Option<Region>) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter_map(|p| match region {
                Some(r) => p.regions.get(&r).map(|rp| (rp.fpr, rp.rate)),
                None => Some((
                    p.fpr,
                    match averaging {
                        Averaging::Macro => p.macro_rate,
                        Averaging::Micro => p.micro_rate,
                    },
                )),
            })
            .collect()
    }
}

/// Per-threshold tallies for one triplet.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    false_pos: u64,
    negatives: u64,
    flipped: bool,
}

fn sweep_triplet(
    net: &NetworkGraph<f32>,
    manifest: &DatasetManifest,
    t: &TripletRecord,
    map: &SaliencyMap,
    g: &Galleries,
    thresholds: &[f64],
) -> Result<Vec<Tally>> {
    let probe = manifest.load_image(&t.probe)?;
    let inpainted = manifest.load_image(&t.inpainted_probe)?;
    let gt = manifest.load_mask(&t.mask)?;
    if (gt.width, gt.height) != (map.width(), map.height()) {
        return Err(XfrError::ShapeMismatch {
            expected: vec![gt.height, gt.width],
            actual: vec![map.height(), map.width()],
        });
    }
    let negatives = gt.data.iter().filter(|&&m| !m).count() as u64;
    // Probe and inpainted probe agree outside the ground truth, so the
    // blend depends only on the salient pixels inside it.
    let mut seen: HashMap<Vec<bool>, bool> = HashMap::new();
    thresholds
        .iter()
        .map(|&th| {
            let salient = binarize_saliency(map, th);
            let false_pos = salient
                .data
                .iter()
                .zip(&gt.data)
                .filter(|(&s, &g)| s && !g)
                .count() as u64;
            let inside: Vec<bool> = salient.data.iter().zip(&gt.data).map(|(&s, &g)| s && g).collect();
            let flipped = match seen.get(&inside) {
                Some(&f) => f,
                None => {
                    let blended = blend_probe(&probe, &inpainted, &BinaryMask::new(gt.width, gt.height, inside.clone()))?;
                    let f = classify_blended(net, &blended, g)? == Side::Nonmate;
                    seen.insert(inside, f);
                    f
                }
            };
            Ok(Tally {
                false_pos,
                negatives,
                flipped,
            })
        })
        .collect()
}

/// Runs the threshold sweep over every triplet of the (filtered) manifest.
pub fn evaluate(
    maps: &BTreeMap<String, SaliencyMap>,
    manifest: &DatasetManifest,
    net: &NetworkGraph<f32>,
    thresholds: &[f64],
) -> Result<EvalCurve> {
    let missing: Vec<String> = manifest
        .triplets
        .iter()
        .filter(|t| !maps.contains_key(&t.id))
        .map(|t| t.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(XfrError::MissingMaps(missing));
    }
    if thresholds.is_empty() {
        return Err(XfrError::InvalidArgument("empty threshold schedule".into()));
    }
    let mut order: Vec<usize> = (0..thresholds.len()).collect();
    order.sort_by(|&a, &b| thresholds[b].total_cmp(&thresholds[a]));
    let sorted: Vec<f64> = order.iter().map(|&i| thresholds[i]).collect();

    let ids = manifest.triplets.iter().flat_map(|t| t.mates.iter().chain(&t.nonmates));
    let emb = embed_images(manifest, net, ids)?;
    let tallies = manifest
        .triplets
        .par_iter()
        .map(|t| {
            let g = Galleries::for_triplet(t, &emb)?;
            sweep_triplet(net, manifest, t, &maps[&t.id], &g, &sorted)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut region_counts: BTreeMap<Region, usize> = BTreeMap::new();
    for t in &manifest.triplets {
        *region_counts.entry(t.region).or_insert(0) += 1;
    }
    let points = sorted
        .iter()
        .enumerate()
        .map(|(k, &threshold)| {
            let mut fp = 0u64;
            let mut neg = 0u64;
            let mut flips = 0usize;
            let mut per: BTreeMap<Region, (u64, u64, usize)> = BTreeMap::new();
            for (t, tally) in manifest.triplets.iter().zip(&tallies) {
                let x = tally[k];
                fp += x.false_pos;
                neg += x.negatives;
                flips += x.flipped as usize;
                let e = per.entry(t.region).or_insert((0, 0, 0));
                e.0 += x.false_pos;
                e.1 += x.negatives;
                e.2 += x.flipped as usize;
            }
            let regions: BTreeMap<Region, RegionPoint> = per
                .iter()
                .map(|(&r, &(f, n, fl))| {
                    (
                        r,
                        RegionPoint {
                            fpr: ratio(f as f64, n as f64),
                            rate: fl as f64 / region_counts[&r] as f64,
                        },
                    )
                })
                .collect();
            let macro_rate = if regions.is_empty() {
                0.0
            } else {
                regions.values().map(|p| p.rate).sum::<f64>() / regions.len() as f64
            };
            CurvePoint {
                threshold,
                fpr: ratio(fp as f64, neg as f64),
                macro_rate,
                micro_rate: ratio(flips as f64, manifest.triplets.len() as f64),
                regions,
            }
        })
        .collect();
    Ok(EvalCurve {
        points,
        region_counts,
    })
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fpr: f64,
    pub rate: f64,
    /// The requested FPR was outside the curve and was clamped.
    pub clamped: bool,
}

/// Linear interpolation of `rate` at `fpr` on a series sorted by FPR.
/// An exact hit on several points takes the largest rate among them.
pub fn interpolate(series: &[(f64, f64)], fpr: f64) -> Result<OperatingPoint> {
    if series.is_empty() {
        return Err(XfrError::InvalidArgument("empty curve".into()));
    }
    let lo = series.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = series.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let clamped = fpr < lo || fpr > hi;
    if clamped {
        log::warn!("operating point {fpr} outside curve range [{lo}, {hi}]; clamped");
    }
    let x = fpr.clamp(lo, hi);
    let exact = series
        .iter()
        .filter(|p| p.0 == x)
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    if exact.is_finite() {
        return Ok(OperatingPoint {
            fpr,
            rate: exact,
            clamped,
        });
    }
    let left = series.iter().rev().find(|p| p.0 < x).expect("x above minimum");
    let right = series.iter().find(|p| p.0 > x).expect("x below maximum");
    let f = (x - left.0) / (right.0 - left.0);
    Ok(OperatingPoint {
        fpr,
        rate: left.1 + f * (right.1 - left.1),
        clamped,
    })
}

pub fn operating_points(
    curve: &EvalCurve,
    fprs: &[f64],
    averaging: Averaging,
    region: Option<Region>,
) -> Result<Vec<OperatingPoint>> {
    let series = curve.series(averaging, region);
    fprs.iter().map(|&f| interpolate(&series, f)).collect()
}

/// Map with i.i.d. uniform pixel values; the chance-level baseline.
pub fn uniform_random_saliency(width: usize, height: usize, seed: u64, tags: &[u64]) -> SaliencyMap {
    use rand::Rng;
    let mut rng = derive_rng(seed, tags);
    let values = (0..width * height).map(|_| rng.random::<f32>()).collect();
    SaliencyMap::new(width, height, values, Normalization::RawProbability)
        .expect("uniform values are valid")
        .max_normalized()
}

/// Map equal to 1 on the ground-truth mask and 0 elsewhere.
pub fn oracle_saliency(mask: &BinaryMask) -> SaliencyMap {
    let values = mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    SaliencyMap::new(mask.width, mask.height, values, Normalization::MaxNormalized)
        .expect("binary values are valid")
}

/// Curve CSV: threshold, fpr, macro and micro rates, then a rate and an
/// FPR column per region present.
pub fn write_curve_csv(curve: &EvalCurve, path: &Path) -> Result<()> {
    let regions: Vec<Region> = curve.region_counts.keys().copied().collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "threshold".to_string(),
        "fpr".into(),
        "macro_rate".into(),
        "micro_rate".into(),
    ];
    for r in &regions {
        header.push(format!("rate_{r}"));
    }
    for r in &regions {
        header.push(format!("fpr_{r}"));
    }
    w.write_record(&header).map_err(csv_err)?;
    for p in &curve.points {
        let mut row = vec![
            p.threshold.to_string(),
            p.fpr.to_string(),
            p.macro_rate.to_string(),
            p.micro_rate.to_string(),
        ];
        row.extend(regions.iter().map(|r| p.regions[r].rate.to_string()));
        row.extend(regions.iter().map(|r| p.regions[r].fpr.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    io::write_atomic(path, &w.into_inner().map_err(|e| csv_err(e.into_error().into()))?)
}

/// One row of the operating-point table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingRow {
    pub method: String,
    /// `all` for the headline average, otherwise a region label.
    pub subprotocol: String,
    pub fpr: f64,
    pub rate: f64,
    pub clamped: bool,
}

/// Operating-point rows for one method: the macro average, the micro
/// average, then each region.
pub fn operating_rows(method: &str, curve: &EvalCurve, fprs: &[f64]) -> Result<Vec<OperatingRow>> {
    let mut rows = Vec::new();
    let mut push = |sub: String, pts: Vec<OperatingPoint>| {
        rows.extend(pts.into_iter().map(|p| OperatingRow {
            method: method.to_string(),
            subprotocol: sub.clone(),
            fpr: p.fpr,
            rate: p.rate,
            clamped: p.clamped,
        }))
    };
    push("macro".into(), operating_points(curve, fprs, Averaging::Macro, None)?);
    push("micro".into(), operating_points(curve, fprs, Averaging::Micro, None)?);
    for &r in curve.region_counts.keys() {
        push(r.to_string(), operating_points(curve, fprs, Averaging::Macro, Some(r))?);
    }
    Ok(rows)
}

pub fn write_operating_csv(rows: &[OperatingRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "subprotocol", "fpr", "rate", "clamped"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.subprotocol.clone(),
            r.fpr.to_string(),
            r.rate.to_string(),
            r.clamped.to_string(),
        ])
        .map_err(csv_err)?;
    }
    io::write_atomic(path, &w.into_inner().map_err(|e| csv_err(e.into_error().into()))?)
}

fn csv_err(e: csv::Error) -> XfrError {
    XfrError::Format(format!("csv: {e}"))
}

/// Raster plot of macro curves on a log FPR axis from 1e-3 to 1.
pub fn plot_curves(curves: &[(&str, &EvalCurve)]) -> image::RgbImage {
    const W: u32 = 320;
    const H: u32 = 240;
    const PAD: u32 = 24;
    let palette = [
        [220, 50, 47],
        [38, 139, 210],
        [133, 153, 0],
        [211, 54, 130],
        [181, 137, 0],
        [42, 161, 152],
        [88, 88, 88],
    ];
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let (pw, ph) = ((W - 2 * PAD) as f64, (H - 2 * PAD) as f64);
    let to_px = |fpr: f64, rate: f64| {
        let lx = (fpr.max(1e-3).log10() + 3.0) / 3.0;
        (
            PAD as f64 + lx.clamp(0.0, 1.0) * pw,
            (H - PAD) as f64 - rate.clamp(0.0, 1.0) * ph,
        )
    };
    let line = |img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), c: [u8; 3]| {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
            if x >= 0.0 && y >= 0.0 && (x as u32) < W && (y as u32) < H {
                img.put_pixel(x as u32, y as u32, image::Rgb(c));
            }
        }
    };
    let axis = [0, 0, 0];
    line(&mut img, to_px(1e-3, 0.0), to_px(1.0, 0.0), axis);
    line(&mut img, to_px(1e-3, 0.0), to_px(1e-3, 1.0), axis);
    for decade in [1e-2, 1e-1] {
        let (x, y) = to_px(decade, 0.0);
        line(&mut img, (x, y), (x, y + 4.0), axis);
    }
    for (i, (_, curve)) in curves.iter().enumerate() {
        let color = palette[i % palette.len()];
        let series = curve.series(Averaging::Macro, None);
        for pair in series.windows(2) {
            line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), color);
        }
        // legend swatch
        let y = PAD as f64 + 8.0 * i as f64;
        line(&mut img, ((W - PAD - 30) as f64, y), ((W - PAD - 10) as f64, y), color);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_examples() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let t = calibrate_verification_threshold(&scores, 0.01).unwrap();
        assert!(t > 0.98 && t <= 0.99);
        assert_eq!(scores.iter().filter(|&&s| s >= t).count(), 1);
        assert_eq!(calibrate_verification_threshold(&scores, 1.0).unwrap(), 0.0);
        assert!(matches!(
            calibrate_verification_threshold(&scores[..10], 1e-4),
            Err(XfrError::InsufficientPairs { required: 10000, actual: 10 })
        ));
    }

    #[test]
    fn calibration_with_ties_stays_under_rate() {
        let scores = [0.5; 200];
        let t = calibrate_verification_threshold(&scores, 0.01).unwrap();
        assert_eq!(scores.iter().filter(|&&s| s >= t).count(), 0);
    }

    #[test]
    fn interpolation_examples() {
        let s = [(0.0, 0.0), (1.0, 1.0)];
        assert!((interpolate(&s, 0.5).unwrap().rate - 0.5).abs() < 1e-12);
        assert_eq!(interpolate(&s, 1.0).unwrap().rate, 1.0);
        let s = [(0.0, 0.0), (0.1, 0.2), (0.1, 0.6), (0.5, 1.0)];
        assert_eq!(interpolate(&s, 0.1).unwrap().rate, 0.6);
        assert!((interpolate(&s, 0.3).unwrap().rate - 0.8).abs() < 1e-12);
        let p = interpolate(&[(0.01, 0.3), (1.0, 1.0)], 1e-3).unwrap();
        assert!(p.clamped);
        assert_eq!(p.rate, 0.3);
    }

    #[test]
    fn binarize_endpoints() {
        let m = SaliencyMap::new(2, 2, vec![0.0, 0.25, 0.5, 1.0], Normalization::MaxNormalized).unwrap();
        assert_eq!(binarize_saliency(&m, 0.0).count(), 4);
        assert_eq!(binarize_saliency(&m, EMPTY_MASK_THRESHOLD).count(), 0);
        assert_eq!(binarize_saliency(&m, 0.5).data, vec![false, false, true, true]);
    }

    #[test]
    fn blend_selects_per_pixel() {
        let p = Tensor::filled(&[3, 1, 2], 0.0);
        let q = Tensor::filled(&[3, 1, 2], 1.0);
        let b = blend_probe(&p, &q, &BinaryMask::new(2, 1, vec![false, true])).unwrap();
        assert_eq!(b.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(blend_probe(&p, &Tensor::zeros(&[3, 2, 2]), &BinaryMask::filled(2, 1, true)).is_err());
    }

    #[test]
    fn tie_goes_to_mate() {
        let g = Galleries {
            mate: vec![1.0, 0.0],
            nonmate: vec![0.0, 1.0],
        };
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert_eq!(classify_embedding(&[s, s], &g), Side::Mate);
        assert_eq!(classify_embedding(&[0.0, 1.0], &g), Side::Nonmate);
    }

    #[test]
    fn auc_of_separated_scores() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]), 0.5);
    }

    #[test]
    fn gallery_is_unit_mean() {
        let g = gallery(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert!((g[0] - g[1]).abs() < 1e-7);
        assert!((g[0] * g[0] + g[1] * g[1] - 1.0).abs() < 1e-6);
    }
}
