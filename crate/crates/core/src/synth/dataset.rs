//! Whole-dataset generation: train, calibration and evaluation splits plus
//! doppelganger triplets with ground-truth region masks.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geometry::RegionGeometry;
use super::render::{make_doppelganger, render_face, sample_identity, IdentityParams, Nuisance};
use crate::error::{Result, XfrError};
use crate::io::{self, BinaryMask};
use crate::manifest::{
    DatasetManifest, ImageRecord, ImageRole, Provenance, Region, Split, TripletRecord,
    MANIFEST_FILE,
};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "synth.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub version: u32,
    pub seed: u64,
    /// Maximum absolute translation in pixels.
    pub translate_px: f32,
    /// Maximum absolute rotation in degrees.
    pub rotate_deg: f32,
    /// Maximum relative brightness change.
    pub brightness: f32,
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f32,
    pub background_min: f32,
    pub background_max: f32,
    pub train_identities: usize,
    pub train_images: usize,
    pub calibration_identities: usize,
    pub calibration_images: usize,
    pub evaluation_identities: usize,
    /// Mate references per evaluation subject (the probe is extra).
    pub evaluation_mates: usize,
    /// Minimum parameter distance of a doppelganger's resampled region.
    pub doppelganger_distance: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            version: CONFIG_VERSION,
            seed: 0,
            translate_px: 3.0,
            rotate_deg: 5.0,
            brightness: 0.1,
            noise_sigma: 0.02,
            background_min: 0.25,
            background_max: 0.75,
            train_identities: 200,
            train_images: 6,
            calibration_identities: 200,
            calibration_images: 3,
            evaluation_identities: 24,
            evaluation_mates: 3,
            doppelganger_distance: 0.7,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(XfrError::InvalidArgument(m.to_string()));
        if self.version != CONFIG_VERSION {
            return bad(&format!("unsupported config version {}", self.version));
        }
        for (name, v) in [
            ("translate_px", self.translate_px),
            ("rotate_deg", self.rotate_deg),
            ("brightness", self.brightness),
            ("noise_sigma", self.noise_sigma),
            ("doppelganger_distance", self.doppelganger_distance),
        ] {
            if !(v >= 0.0) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.background_min)
            || !(self.background_min..=1.0).contains(&self.background_max)
        {
            return bad("background range must satisfy 0 <= min <= max <= 1");
        }
        for (name, v) in [
            ("train_identities", self.train_identities),
            ("train_images", self.train_images),
            ("calibration_identities", self.calibration_identities),
            ("calibration_images", self.calibration_images),
            ("evaluation_identities", self.evaluation_identities),
            ("evaluation_mates", self.evaluation_mates),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RenderConfig =
            toml::from_str(text).map_err(|e| XfrError::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of candidate triplets the evaluation split yields.
    pub fn candidate_triplets(&self) -> usize {
        self.evaluation_identities * Region::ALL.len()
    }

    pub fn sample_nuisance<R: Rng + ?Sized>(&self, rng: &mut R) -> Nuisance {
        let sym = |rng: &mut R, m: f32| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        Nuisance {
            dx: sym(rng, self.translate_px),
            dy: sym(rng, self.translate_px),
            rotation_deg: sym(rng, self.rotate_deg),
            brightness: sym(rng, self.brightness),
            background: if self.background_max > self.background_min {
                rng.random_range(self.background_min..=self.background_max)
            } else {
                self.background_min
            },
            noise_sigma: self.noise_sigma,
            noise_seed: rng.random(),
        }
    }
}

// Stream tags.
const TAG_IDENTITY: u64 = 1;
const TAG_NUISANCE: u64 = 2;
const TAG_DOPPEL: u64 = 3;

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 10,
        Split::Calibration => 11,
        Split::Evaluation => 12,
    }
}

fn split_dir(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Calibration => "calibration",
        Split::Evaluation => "evaluation",
    }
}

pub fn subject_name(split: Split, index: usize) -> String {
    format!("{}-{index:04}", split_dir(split))
}

pub fn subject_identity(config: &RenderConfig, split: Split, index: usize) -> IdentityParams {
    sample_identity(&mut derive_rng(
        config.seed,
        &[TAG_IDENTITY, split_tag(split), index as u64],
    ))
}

fn nuisance(config: &RenderConfig, split: Split, index: usize, image: usize) -> Nuisance {
    config.sample_nuisance(&mut derive_rng(
        config.seed,
        &[TAG_NUISANCE, split_tag(split), index as u64, image as u64],
    ))
}

/// Doppelganger of evaluation subject `index` in `region`.
pub fn doppelganger(config: &RenderConfig, index: usize, region: Region) -> Result<IdentityParams> {
    let id = subject_identity(config, Split::Evaluation, index);
    let mut rng = derive_rng(config.seed, &[TAG_DOPPEL, index as u64, region.index() as u64]);
    let d = make_doppelganger(&id, region, config.doppelganger_distance, &mut rng)?;
    if d.degenerate {
        log::warn!(
            "degenerate doppelganger for {} / {region}",
            subject_name(Split::Evaluation, index)
        );
    }
    Ok(d.params)
}

enum Output {
    Face(Tensor<f32>),
    Mask(BinaryMask),
}

struct Planned {
    record: ImageRecord,
    output: Output,
}

fn face(split: Split, subject: &str, identity: &str, rel: String, image: Tensor<f32>) -> Planned {
    Planned {
        record: ImageRecord {
            id: rel.trim_end_matches(".png").to_string(),
            path: rel,
            split,
            role: ImageRole::Face,
            subject: subject.to_string(),
            identity: identity.to_string(),
        },
        output: Output::Face(image),
    }
}

fn plain_subject(config: &RenderConfig, split: Split, index: usize, images: usize) -> Vec<Planned> {
    let id = subject_identity(config, split, index);
    let name = subject_name(split, index);
    (0..images)
        .map(|k| {
            let img = render_face(&id, &nuisance(config, split, index, k)).image;
            face(split, &name, &name, format!("{}/{name}/{k}.png", split_dir(split)), img)
        })
        .collect()
}

fn evaluation_subject(
    config: &RenderConfig,
    index: usize,
) -> Result<(Vec<Planned>, Vec<TripletRecord>)> {
    let split = Split::Evaluation;
    let id = subject_identity(config, split, index);
    let name = subject_name(split, index);
    let dir = format!("{}/{name}", split_dir(split));
    // Image 0 is the probe, 1..=mates the mate references.
    let nuisances: Vec<Nuisance> = (0..=config.evaluation_mates)
        .map(|k| nuisance(config, split, index, k))
        .collect();
    let probe = render_face(&id, &nuisances[0]);
    let mut planned = vec![face(split, &name, &name, format!("{dir}/probe.png"), probe.image.clone())];
    let mut mates = Vec::new();
    for (k, n) in nuisances.iter().enumerate().skip(1) {
        let rel = format!("{dir}/mate-{k}.png");
        planned.push(face(split, &name, &name, rel, render_face(&id, n).image));
        mates.push(planned.last().expect("pushed").record.id.clone());
    }
    let mut triplets = Vec::new();
    for region in Region::ALL {
        let dop = doppelganger(config, index, region)?;
        let dop_name = format!("{name}-{region}");
        let rdir = format!("{dir}/{region}");
        let inpainted = render_face(&dop, &nuisances[0]);
        planned.push(face(
            split,
            &name,
            &dop_name,
            format!("{rdir}/inpainted-probe.png"),
            inpainted.image,
        ));
        let inpainted_id = planned.last().expect("pushed").record.id.clone();
        let mut nonmates = Vec::new();
        for (k, n) in nuisances.iter().enumerate().skip(1) {
            let rel = format!("{rdir}/nonmate-{k}.png");
            planned.push(face(split, &name, &dop_name, rel, render_face(&dop, n).image));
            nonmates.push(planned.last().expect("pushed").record.id.clone());
        }
        let mask_rel = format!("{rdir}/mask.png");
        let mask_id = mask_rel.trim_end_matches(".png").to_string();
        planned.push(Planned {
            record: ImageRecord {
                id: mask_id.clone(),
                path: mask_rel,
                split,
                role: ImageRole::Mask,
                subject: name.clone(),
                identity: dop_name.clone(),
            },
            output: Output::Mask(probe.mask(region).clone()),
        });
        triplets.push(TripletRecord {
            id: format!("{name}/{region}"),
            probe: planned[0].record.id.clone(),
            mates: mates.clone(),
            nonmates,
            inpainted_probe: inpainted_id,
            mask: mask_id,
            region,
            subject: name.clone(),
            doppelganger: dop_name,
        });
    }
    Ok((planned, triplets))
}

/// Renders the whole dataset under `out_dir` and writes its manifest,
/// config copy and canonical region masks.
pub fn generate_dataset(config: &RenderConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let mut jobs: Vec<(Split, usize)> = Vec::new();
    jobs.extend((0..config.train_identities).map(|i| (Split::Train, i)));
    jobs.extend((0..config.calibration_identities).map(|i| (Split::Calibration, i)));
    jobs.extend((0..config.evaluation_identities).map(|i| (Split::Evaluation, i)));

    let rendered: Vec<(Vec<Planned>, Vec<TripletRecord>)> = jobs
        .par_iter()
        .map(|&(split, i)| match split {
            Split::Train => Ok((plain_subject(config, split, i, config.train_images), vec![])),
            Split::Calibration => {
                Ok((plain_subject(config, split, i, config.calibration_images), vec![]))
            }
            Split::Evaluation => evaluation_subject(config, i),
        })
        .collect::<Result<_>>()?;

    let mut manifest = DatasetManifest::new(
        out_dir,
        Provenance {
            generator: concat!("xfr-synth ", env!("CARGO_PKG_VERSION")).to_string(),
            seed: config.seed,
            config: serde_json::to_value(config).expect("config serializes"),
        },
    );
    rendered
        .par_iter()
        .flat_map(|(planned, _)| planned.par_iter())
        .try_for_each(|p| {
            let path = out_dir.join(&p.record.path);
            match &p.output {
                Output::Face(t) => io::save_rgb(t, &path),
                Output::Mask(m) => io::save_mask(m, &path),
            }
        })?;
    for (planned, triplets) in rendered {
        for p in planned {
            manifest.images.insert(p.record.id.clone(), p.record);
        }
        manifest.triplets.extend(triplets);
    }
    let geometry = RegionGeometry::canonical();
    for r in Region::ALL {
        io::save_mask(geometry.mask(r), &out_dir.join(format!("geometry/{r}.png")))?;
    }
    io::write_atomic(&out_dir.join(CONFIG_FILE), config.to_toml().as_bytes())?;
    manifest.validate()?;
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
