//! Procedural synthetic identities with exact region ground truth.

pub mod dataset;
pub mod geometry;
pub mod render;

pub use dataset::{generate_dataset, RenderConfig};
pub use geometry::RegionGeometry;
pub use render::{
    make_doppelganger, render_face, sample_identity, Doppelganger, IdentityParams, Nuisance,
    RegionParams, RenderedFace,
};
