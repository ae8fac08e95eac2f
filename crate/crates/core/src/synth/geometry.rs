//! Canonical facial layout on the 64x64 grid. Regions are predicates over
//! continuous canonical coordinates so that any image-space transform can be
//! applied to masks and pixels with the same sampling.

use crate::io::BinaryMask;
use crate::manifest::Region;
use crate::netcore::IMAGE_SIZE;

/// Centre of the face ellipse.
pub const FACE_CENTER: (f32, f32) = (32.0, 33.0);
/// Semi-axes of the face ellipse.
pub const FACE_AXES: (f32, f32) = (23.0, 28.0);

pub const LEFT_EYE: (f32, f32) = (22.0, 26.0);
pub const RIGHT_EYE: (f32, f32) = (42.0, 26.0);
pub const EYE_AXES: (f32, f32) = (8.0, 4.5);
pub const NOSE_CENTER: (f32, f32) = (32.0, 36.5);
pub const NOSE_AXES: (f32, f32) = (6.5, 8.0);
pub const MOUTH_CENTER: (f32, f32) = (32.0, 50.0);
pub const MOUTH_AXES: (f32, f32) = (10.0, 5.0);
/// Eyebrow boxes `(u0, u1, v0, v1)`, half-open.
pub const BROW_BOXES: [(f32, f32, f32, f32); 2] = [(13.0, 31.0, 13.5, 21.0), (33.0, 51.0, 13.5, 21.0)];
/// Cheek-and-jaw band starts at this row.
pub const CHEEK_TOP: f32 = 40.0;

fn in_ellipse(u: f32, v: f32, c: (f32, f32), axes: (f32, f32)) -> bool {
    let du = (u - c.0) / axes.0;
    let dv = (v - c.1) / axes.1;
    du * du + dv * dv <= 1.0
}

pub fn in_face(u: f32, v: f32) -> bool {
    in_ellipse(u, v, FACE_CENTER, FACE_AXES)
}

fn in_brows(u: f32, v: f32) -> bool {
    BROW_BOXES
        .iter()
        .any(|&(u0, u1, v0, v1)| u >= u0 && u < u1 && v >= v0 && v < v1)
}

fn in_feature(u: f32, v: f32) -> bool {
    in_ellipse(u, v, LEFT_EYE, EYE_AXES)
        || in_ellipse(u, v, RIGHT_EYE, EYE_AXES)
        || in_ellipse(u, v, NOSE_CENTER, NOSE_AXES)
        || in_ellipse(u, v, MOUTH_CENTER, MOUTH_AXES)
        || in_brows(u, v)
}

/// Whether canonical point `(u, v)` lies in `region`. "Left" is image-left.
pub fn contains(region: Region, u: f32, v: f32) -> bool {
    match region {
        Region::LeftEye => in_ellipse(u, v, LEFT_EYE, EYE_AXES),
        Region::RightEye => in_ellipse(u, v, RIGHT_EYE, EYE_AXES),
        Region::Nose => in_ellipse(u, v, NOSE_CENTER, NOSE_AXES),
        Region::Mouth => in_ellipse(u, v, MOUTH_CENTER, MOUTH_AXES),
        Region::Eyebrows => in_brows(u, v),
        Region::CheeksJaw => {
            in_face(u, v)
                && v >= CHEEK_TOP
                && !in_ellipse(u, v, NOSE_CENTER, NOSE_AXES)
                && !in_ellipse(u, v, MOUTH_CENTER, MOUTH_AXES)
        }
        Region::LeftFace => in_face(u, v) && u < FACE_CENTER.0 && !in_feature(u, v),
        Region::RightFace => in_face(u, v) && u >= FACE_CENTER.0 && !in_feature(u, v),
    }
}

/// The eight region masks of the untransformed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGeometry {
    pub masks: [BinaryMask; 8],
}

impl RegionGeometry {
    pub fn canonical() -> Self {
        let n = IMAGE_SIZE;
        let masks = Region::ALL.map(|r| {
            let data = (0..n * n)
                .map(|i| contains(r, (i % n) as f32 + 0.5, (i / n) as f32 + 0.5))
                .collect();
            BinaryMask::new(n, n, data)
        });
        RegionGeometry { masks }
    }

    pub fn mask(&self, region: Region) -> &BinaryMask {
        &self.masks[region.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_are_non_empty() {
        let g = RegionGeometry::canonical();
        for r in Region::ALL {
            assert!(g.mask(r).count() > 20, "{r} too small");
        }
    }

    #[test]
    fn eyes_and_brows_avoid_nose_and_mouth() {
        let g = RegionGeometry::canonical();
        for a in [Region::LeftEye, Region::RightEye, Region::Eyebrows] {
            for b in [Region::Nose, Region::Mouth] {
                let overlap = g
                    .mask(a)
                    .data
                    .iter()
                    .zip(&g.mask(b).data)
                    .filter(|(x, y)| **x && **y)
                    .count();
                assert_eq!(overlap, 0, "{a} overlaps {b}");
            }
        }
    }
}
