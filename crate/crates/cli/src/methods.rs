//! Saliency method dispatch for one triplet.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use xfr_core::attribution::{contrastive_ebp, ebp, ebp_prior_triplet, truncated_contrastive_ebp};
use xfr_core::dise::{dise, DiseParams, Fill, MaskSpec, WeightOrientation};
use xfr_core::game::{oracle_saliency, uniform_random_saliency, Galleries};
use xfr_core::netcore::IMAGE_SIZE;
use xfr_core::rng::derive_seed;
use xfr_core::saliency::SaliencyMetadata;
use xfr_core::subtree::{subtree_ebp, GradientOrientation};
use xfr_core::{DatasetManifest, NetworkGraph, Result, SaliencyMap, TripletRecord, XfrError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ebp,
    Cebp,
    Tcebp,
    Subtree,
    Dise,
    /// Chance baseline: i.i.d. uniform pixels.
    Random,
    /// Upper bound: the ground-truth mask itself.
    Oracle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ebp => "ebp",
            Method::Cebp => "cebp",
            Method::Tcebp => "tcebp",
            Method::Subtree => "subtree",
            Method::Dise => "dise",
            Method::Random => "random",
            Method::Oracle => "oracle",
        }
    }

    pub fn needs_seed(self) -> bool {
        matches!(self, Method::Dise | Method::Random)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = XfrError;

    fn from_str(s: &str) -> Result<Self> {
        <Method as clap::ValueEnum>::from_str(s, true)
            .map_err(|_| XfrError::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Every knob any method reads. Only the ones relevant to the chosen
/// method end up in the sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub alpha: f32,
    pub k: usize,
    pub truncation: f64,
    pub gradient: GradientOrientation,
    pub samples: usize,
    pub prior_percentile: f64,
    pub weight: WeightOrientation,
    pub fill: Fill,
    pub cell_size: usize,
    pub seed: u64,
}

impl Default for MethodParams {
    fn default() -> Self {
        let d = DiseParams::default();
        MethodParams {
            alpha: 0.2,
            k: xfr_core::subtree::DEFAULT_K,
            truncation: xfr_core::attribution::DEFAULT_TRUNCATION_PERCENTILE,
            gradient: GradientOrientation::default(),
            samples: d.samples,
            prior_percentile: d.prior_percentile,
            weight: d.orientation,
            fill: d.spec.fill,
            cell_size: d.spec.cell_size,
            seed: 0,
        }
    }
}

impl MethodParams {
    pub fn validate(&self, method: Method) -> Result<()> {
        let bad = |m: String| Err(XfrError::InvalidArgument(m));
        match method {
            Method::Subtree | Method::Dise if !(self.alpha >= 0.0 && self.alpha.is_finite()) => {
                bad(format!("alpha {} must be a finite non-negative margin", self.alpha))
            }
            Method::Subtree if self.k == 0 => bad("k must be at least 1".into()),
            Method::Tcebp if !(self.truncation > 0.0 && self.truncation <= 100.0) => {
                bad(format!("truncation percentile {} outside (0, 100]", self.truncation))
            }
            Method::Dise if self.cell_size == 0 => bad("cell size must be positive".into()),
            Method::Dise if !(self.prior_percentile > 0.0 && self.prior_percentile <= 100.0) => {
                bad(format!("prior percentile {} outside (0, 100]", self.prior_percentile))
            }
            _ => Ok(()),
        }
    }

    /// The parameters `method` actually uses.
    pub fn relevant(&self, method: Method) -> serde_json::Value {
        use serde_json::json;
        match method {
            Method::Ebp | Method::Cebp | Method::Oracle => json!({}),
            Method::Tcebp => json!({ "truncation": self.truncation }),
            Method::Subtree => json!({ "alpha": self.alpha, "k": self.k, "gradient": self.gradient }),
            Method::Dise => json!({
                "alpha": self.alpha,
                "spec": self.dise().spec,
                "samples": self.samples,
                "prior_percentile": self.prior_percentile,
                "weight": self.weight,
                "seed": self.seed,
            }),
            Method::Random => json!({ "seed": self.seed }),
        }
    }

    pub fn dise(&self) -> DiseParams {
        let side = IMAGE_SIZE.div_ceil(self.cell_size.max(1));
        DiseParams {
            spec: MaskSpec {
                fill: self.fill,
                cell_size: self.cell_size,
                rows: side,
                cols: side,
                ..MaskSpec::default()
            },
            samples: self.samples,
            seed: self.seed,
            orientation: self.weight,
            prior_percentile: self.prior_percentile,
        }
    }
}

/// A stable 64-bit tag for a triplet id (FNV-1a), so per-triplet random
/// streams do not depend on manifest order.
pub fn id_tag(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Computes one triplet's map. Methods that find no explanation signal
/// (inactive hinge, empty prior) yield an all-zero map and a warning.
pub fn saliency_for_triplet(
    method: Method,
    params: &MethodParams,
    net: &NetworkGraph<f32>,
    manifest: &DatasetManifest,
    t: &TripletRecord,
    emb: &BTreeMap<String, Vec<f32>>,
) -> Result<(SaliencyMap, SaliencyMetadata)> {
    let probe = manifest.load_image(&t.probe)?;
    let (_, h, w) = probe.chw().expect("faces are 3-channel");
    let g = Galleries::for_triplet(t, emb)?;
    let (m, n) = (g.mate.as_slice(), g.nonmate.as_slice());
    let mut meta = SaliencyMetadata {
        triplet: t.id.clone(),
        method: method.to_string(),
        parameters: params.relevant(method),
        raw_sum: None,
        dropped_mass: None,
        warnings: Vec::new(),
    };
    let computed: Result<SaliencyMap> = (|| match method {
        Method::Ebp => {
            let (_, trace) = net.forward(&probe)?;
            let r = ebp(net, &trace, &ebp_prior_triplet(m, n)?, 0)?;
            meta.raw_sum = Some(r.raw_sum);
            meta.dropped_mass = Some(r.dropped_mass);
            Ok(r.map)
        }
        Method::Cebp => {
            let (_, trace) = net.forward(&probe)?;
            let c = contrastive_ebp(net, &trace, m, n)?;
            meta.raw_sum = c.toward_mate.as_ref().map(|r| r.raw_sum);
            meta.dropped_mass = c.toward_mate.as_ref().map(|r| r.dropped_mass);
            Ok(c.map)
        }
        Method::Tcebp => {
            let (_, trace) = net.forward(&probe)?;
            truncated_contrastive_ebp(net, &trace, m, n, params.truncation)
        }
        Method::Subtree => {
            let (_, trace) = net.forward(&probe)?;
            let r = subtree_ebp(net, &trace, m, n, params.alpha, params.k, params.gradient)?;
            if r.nodes.len() < params.k {
                meta.warnings.push(format!("only {} nodes had a positive score", r.nodes.len()));
            }
            Ok(r.map)
        }
        Method::Dise => {
            let mut d = params.dise();
            d.seed = derive_seed(params.seed, &[id_tag(&t.id)]);
            let r = dise(net, &probe, m, n, params.alpha, &d)?;
            meta.warnings.extend(r.warnings);
            meta.parameters["zero_weight_fraction"] = r.zero_weight_fraction.into();
            meta.parameters["unique_masks"] = r.unique_masks.into();
            Ok(r.map)
        }
        Method::Random => Ok(uniform_random_saliency(w, h, params.seed, &[id_tag(&t.id)])),
        Method::Oracle => Ok(oracle_saliency(&manifest.load_mask(&t.mask)?)),
    })();
    let map = match computed {
        Ok(map) => map,
        Err(
            e @ (XfrError::InactiveHinge
            | XfrError::NoScoredNodes
            | XfrError::DegeneratePrior
            | XfrError::DegenerateSamplingPrior),
        ) => {
            log::warn!("{}: {e}; writing an empty map", t.id);
            meta.warnings.push(e.to_string());
            SaliencyMap::zeros(w, h)
        }
        Err(e) => return Err(e),
    };
    Ok((map, meta))
}
