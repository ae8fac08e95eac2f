//! Explainable face matching.
//!
//! A small convolutional matcher ([`netcore`]), five triplet-based
//! attribution methods ([`attribution`], [`subtree`], [`dise`]), the
//! inpainting-game benchmark ([`game`]) and a procedural synthetic-identity
//! generator with exact region masks ([`synth`]).

pub mod attribution;
pub mod dise;
pub mod error;
pub mod game;
pub mod io;
pub mod manifest;
pub mod netcore;
pub mod rng;
pub mod saliency;
pub mod subtree;
pub mod synth;
pub mod tensor;

pub use error::{Result, XfrError};
pub use attribution::{EbpPrior, EbpResult};
pub use manifest::{DatasetManifest, ImageRecord, Region, Split, TripletRecord};
pub use netcore::{ActivationTrace, GradientTrace, Layer, LayerKind, NetworkGraph};
pub use saliency::SaliencyMap;
pub use tensor::{Real, Tensor};
