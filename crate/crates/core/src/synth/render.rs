//! Procedural face renderer.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::geometry::{self, contains, in_face};
use crate::error::{Result, XfrError};
use crate::io::BinaryMask;
use crate::manifest::Region;
use crate::netcore::IMAGE_SIZE;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Appearance of one region. Every field lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub scale: f32,
    pub hue: f32,
    pub shade: f32,
    pub texture: f32,
}

impl RegionParams {
    pub fn as_array(&self) -> [f32; 4] {
        [self.scale, self.hue, self.shade, self.texture]
    }

    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        RegionParams {
            scale: rng.random(),
            hue: rng.random(),
            shade: rng.random(),
            texture: rng.random(),
        }
    }

    pub fn distance(&self, other: &RegionParams) -> f32 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt()
    }
}

/// A synthetic subject: global skin parameters plus one parameter block per
/// region (indexed like [`Region::ALL`]). All values lie in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub skin_tone: f32,
    pub skin_warmth: f32,
    pub regions: [RegionParams; 8],
}

impl IdentityParams {
    pub fn region(&self, r: Region) -> &RegionParams {
        &self.regions[r.index()]
    }

    /// Flat parameter vector: skin tone, warmth, then four values per region.
    pub fn as_vector(&self) -> Vec<f32> {
        let mut v = vec![self.skin_tone, self.skin_warmth];
        for r in &self.regions {
            v.extend_from_slice(&r.as_array());
        }
        v
    }
}

/// Draws every parameter uniformly from `[0, 1)`.
pub fn sample_identity<R: Rng + ?Sized>(rng: &mut R) -> IdentityParams {
    IdentityParams {
        skin_tone: rng.random(),
        skin_warmth: rng.random(),
        regions: std::array::from_fn(|_| RegionParams::sample(rng)),
    }
}

/// A doppelganger and whether it is degenerate (identical to the source).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Doppelganger {
    pub params: IdentityParams,
    pub degenerate: bool,
}

/// Largest distance between two points of the unit 4-cube.
pub const MAX_REGION_DISTANCE: f32 = 2.0;

/// Copies `identity` and resamples only `region`'s block at Euclidean
/// distance at least `distance` from the original block.
pub fn make_doppelganger<R: Rng + ?Sized>(
    identity: &IdentityParams,
    region: Region,
    distance: f32,
    rng: &mut R,
) -> Result<Doppelganger> {
    if !(0.0..=MAX_REGION_DISTANCE).contains(&distance) {
        return Err(XfrError::InvalidArgument(format!(
            "doppelganger distance {distance} outside [0, {MAX_REGION_DISTANCE}]"
        )));
    }
    let mut params = *identity;
    if distance == 0.0 {
        return Ok(Doppelganger {
            params,
            degenerate: true,
        });
    }
    let original = *identity.region(region);
    let mut best = RegionParams::sample(rng);
    for _ in 0..10_000 {
        if best.distance(&original) >= distance {
            break;
        }
        let cand = RegionParams::sample(rng);
        if cand.distance(&original) > best.distance(&original) {
            best = cand;
        }
    }
    if best.distance(&original) < distance {
        // Push along the current direction onto the requested sphere, then
        // clamp into the cube (reachable because distance <= cube diagonal
        // only from corners; this fallback is practically never hit).
        let o = original.as_array();
        let b = best.as_array();
        let d = best.distance(&original).max(1e-6);
        let p: Vec<f32> = o
            .iter()
            .zip(b)
            .map(|(o, b)| (o + (b - o) * distance / d).clamp(0.0, 1.0))
            .collect();
        best = RegionParams {
            scale: p[0],
            hue: p[1],
            shade: p[2],
            texture: p[3],
        };
    }
    params.regions[region.index()] = best;
    Ok(Doppelganger {
        degenerate: params == *identity,
        params,
    })
}

/// Per-image nuisance: a rigid motion about the image centre, a brightness
/// factor, background level and additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub dx: f32,
    pub dy: f32,
    pub rotation_deg: f32,
    /// Relative brightness change, e.g. `0.1` for +10%.
    pub brightness: f32,
    pub background: f32,
    pub noise_sigma: f32,
    pub noise_seed: u64,
}

impl Nuisance {
    pub fn none() -> Self {
        Nuisance {
            dx: 0.0,
            dy: 0.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            background: 0.5,
            noise_sigma: 0.0,
            noise_seed: 0,
        }
    }

    /// Maps an output pixel centre back to canonical coordinates.
    fn to_canonical(&self, x: f32, y: f32) -> (f32, f32) {
        let c = IMAGE_SIZE as f32 / 2.0;
        let (s, co) = (-self.rotation_deg.to_radians()).sin_cos();
        let (px, py) = (x - c - self.dx, y - c - self.dy);
        (co * px - s * py + c, s * px + co * py + c)
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn add(a: [f32; 3], d: [f32; 3], k: f32) -> [f32; 3] {
    [a[0] + d[0] * k, a[1] + d[1] * k, a[2] + d[2] * k]
}

fn scaled(a: [f32; 3], k: f32) -> [f32; 3] {
    [a[0] * k, a[1] * k, a[2] * k]
}

fn ellipse_r2(u: f32, v: f32, c: (f32, f32), a: f32, b: f32) -> f32 {
    let du = (u - c.0) / a;
    let dv = (v - c.1) / b;
    du * du + dv * dv
}

fn skin(id: &IdentityParams) -> [f32; 3] {
    let l = 0.4 + 0.45 * id.skin_tone;
    let w = id.skin_warmth;
    [l * (1.0 + 0.2 * w), l * 0.85, l * (0.8 - 0.25 * w)]
}

/// Lateral face texture: tint, brightness and oriented stripes.
fn paint_side(c: [f32; 3], p: &RegionParams, u: f32, v: f32) -> [f32; 3] {
    let tint = add(hsv(p.hue, 0.8, 1.0), [-0.5; 3], 1.0);
    let theta = std::f32::consts::PI * p.texture;
    let freq = 2.0 + 5.0 * p.scale;
    let stripe = (std::f32::consts::TAU * freq * (u * theta.cos() + v * theta.sin()) / 32.0).sin();
    let c = add(c, tint, 0.22);
    let c = add(c, [1.0; 3], 0.3 * (p.shade - 0.5));
    add(c, [1.0; 3], 0.09 * stripe)
}

fn paint_cheeks(c: [f32; 3], p: &RegionParams, u: f32, v: f32) -> [f32; 3] {
    let radius = 4.0 + 5.0 * p.scale;
    let blush = hsv(p.hue, 0.75, 0.95);
    let d = ((u - 19.0).powi(2) + (v - 45.0).powi(2))
        .min((u - 45.0).powi(2) + (v - 45.0).powi(2))
        .sqrt();
    let alpha = (1.0 - d / radius).clamp(0.0, 1.0) * (0.35 + 0.55 * p.shade);
    let c = mix(c, blush, alpha);
    // Jaw shading and a beard-like texture towards the chin.
    let depth = ((v - geometry::CHEEK_TOP) / 20.0).clamp(0.0, 1.0);
    let grain = (u * (0.6 + 1.6 * p.texture)).sin() * (v * (0.9 + 0.8 * p.texture)).cos();
    add(scaled(c, 1.0 - 0.35 * depth * p.texture), [1.0; 3], 0.07 * grain)
}

fn paint_brows(c: [f32; 3], p: &RegionParams, u: f32, v: f32) -> [f32; 3] {
    let color = hsv(p.hue, 0.55, 0.1 + 0.45 * p.shade);
    let thickness = 1.0 + 2.4 * p.scale;
    let tilt = (p.texture - 0.5) * 0.6;
    let (cu, sign) = if u < 32.0 { (22.0, 1.0) } else { (42.0, -1.0) };
    let centre_v = 17.5 + sign * tilt * (u - cu);
    let along = (u - cu).abs() / 8.0;
    let dv = (v - centre_v).abs();
    if along <= 1.0 && dv <= thickness * (1.0 - 0.4 * along) {
        color
    } else {
        c
    }
}

fn paint_eye(c: [f32; 3], p: &RegionParams, centre: (f32, f32), u: f32, v: f32) -> [f32; 3] {
    let lid = scaled(c, 0.55 + 0.35 * p.shade);
    let opening = 2.0 + 2.2 * p.texture;
    if ellipse_r2(u, v, centre, 6.5, opening) > 1.0 {
        return lid;
    }
    let iris_r = 1.4 + 2.2 * p.scale;
    let d = ((u - centre.0).powi(2) + (v - centre.1).powi(2)).sqrt();
    if d < 0.45 * iris_r {
        [0.03, 0.03, 0.03]
    } else if d < iris_r {
        hsv(p.hue, 0.8, 0.35 + 0.5 * p.shade)
    } else {
        [0.95, 0.95, 0.92]
    }
}

fn paint_nose(c: [f32; 3], p: &RegionParams, u: f32, v: f32) -> [f32; 3] {
    let tint = add(hsv(p.hue, 0.9, 1.0), [-0.5; 3], 1.0);
    let c = add(scaled(c, 0.7 + 0.45 * p.shade), tint, 0.25);
    let width = 1.0 + 2.5 * p.scale;
    let ridge = (-((u - 32.0) / width).powi(2)).exp() * ((v - 28.0) / 12.0).clamp(0.0, 1.0);
    let c = add(c, [1.0; 3], 0.22 * ridge);
    let spread = 2.0 + 2.6 * p.scale;
    let nostril_r = 1.0 + 1.4 * p.texture;
    let nv = 41.0;
    let dl = ((u - (32.0 - spread)).powi(2) + ((v - nv) * 1.6).powi(2)).sqrt();
    let dr = ((u - (32.0 + spread)).powi(2) + ((v - nv) * 1.6).powi(2)).sqrt();
    if dl.min(dr) < nostril_r {
        scaled(c, 0.25)
    } else {
        c
    }
}

fn paint_mouth(c: [f32; 3], p: &RegionParams, u: f32, v: f32) -> [f32; 3] {
    let half_w = 4.5 + 5.0 * p.scale;
    let half_h = 1.2 + 2.6 * p.texture;
    let r2 = ellipse_r2(u, v, geometry::MOUTH_CENTER, half_w, half_h);
    if r2 > 1.0 {
        return scaled(c, 0.9 + 0.2 * p.shade);
    }
    if (v - geometry::MOUTH_CENTER.1).abs() < 0.6 {
        return [0.12, 0.05, 0.05];
    }
    hsv(p.hue, 0.65, 0.35 + 0.5 * p.shade)
}

/// Colour of canonical point `(u, v)`, before nuisance photometry.
fn canonical_color(id: &IdentityParams, u: f32, v: f32, background: [f32; 3]) -> [f32; 3] {
    if !in_face(u, v) {
        return background;
    }
    let base = skin(id);
    // Soft shading towards the face border.
    let r2 = ellipse_r2(u, v, geometry::FACE_CENTER, geometry::FACE_AXES.0, geometry::FACE_AXES.1);
    let mut c = scaled(base, 1.0 - 0.25 * r2 * r2);
    for region in [Region::LeftFace, Region::RightFace, Region::CheeksJaw] {
        if contains(region, u, v) {
            let p = id.region(region);
            c = match region {
                Region::CheeksJaw => paint_cheeks(c, p, u, v),
                _ => paint_side(c, p, u, v),
            };
        }
    }
    if contains(Region::Eyebrows, u, v) {
        c = paint_brows(c, id.region(Region::Eyebrows), u, v);
    }
    if contains(Region::LeftEye, u, v) {
        c = paint_eye(c, id.region(Region::LeftEye), geometry::LEFT_EYE, u, v);
    }
    if contains(Region::RightEye, u, v) {
        c = paint_eye(c, id.region(Region::RightEye), geometry::RIGHT_EYE, u, v);
    }
    if contains(Region::Nose, u, v) {
        c = paint_nose(c, id.region(Region::Nose), u, v);
    }
    if contains(Region::Mouth, u, v) {
        c = paint_mouth(c, id.region(Region::Mouth), u, v);
    }
    c
}

/// A rendered face and the eight region masks under the same transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFace {
    pub image: Tensor<f32>,
    pub masks: [BinaryMask; 8],
}

impl RenderedFace {
    pub fn mask(&self, r: Region) -> &BinaryMask {
        &self.masks[r.index()]
    }
}

/// Renders `identity` under `nuisance`. Every output pixel samples the
/// canonical layout at one point, and the region masks are evaluated at the
/// same point, so a change confined to one region's parameters changes only
/// pixels inside that region's transformed mask.
pub fn render_face(identity: &IdentityParams, nuisance: &Nuisance) -> RenderedFace {
    let n = IMAGE_SIZE;
    let hw = n * n;
    let mut data = vec![0.0f32; 3 * hw];
    let mut masks: [Vec<bool>; 8] = std::array::from_fn(|_| vec![false; hw]);
    let bg = [nuisance.background, nuisance.background * 0.97, nuisance.background * 1.03];
    let gain = 1.0 + nuisance.brightness;
    let mut noise_rng = derive_rng(nuisance.noise_seed, &[0x6e6f697365]);
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (u, v) = nuisance.to_canonical(x as f32 + 0.5, y as f32 + 0.5);
            let c = canonical_color(identity, u, v, bg);
            for (k, r) in Region::ALL.iter().enumerate() {
                masks[k][i] = contains(*r, u, v);
            }
            for ch in 0..3 {
                let noise = if nuisance.noise_sigma > 0.0 {
                    nuisance.noise_sigma * noise_rng.sample::<f32, _>(StandardNormal)
                } else {
                    0.0
                };
                data[ch * hw + i] = (c[ch] * gain + noise).clamp(0.0, 1.0);
            }
        }
    }
    RenderedFace {
        image: Tensor::from_vec(&[3, n, n], data).expect("sized"),
        masks: masks.map(|m| BinaryMask::new(n, n, m)),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synth::geometry::RegionGeometry;

    #[test]
    fn same_seed_same_identity() {
        let a = sample_identity(&mut ChaCha8Rng::seed_from_u64(4));
        let b = sample_identity(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn identities_rarely_collide_and_stay_in_range() {
        let mut seen = std::collections::HashSet::new();
        for s in 0..1000u64 {
            let id = sample_identity(&mut ChaCha8Rng::seed_from_u64(s));
            let bits: Vec<u32> = id.as_vector().iter().map(|v| v.to_bits()).collect();
            assert!(seen.insert(bits), "collision at seed {s}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let id = sample_identity(&mut rng);
            assert!(id.as_vector().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_nuisance_gives_canonical_masks() {
        let id = sample_identity(&mut ChaCha8Rng::seed_from_u64(1));
        let face = render_face(&id, &Nuisance::none());
        assert_eq!(face.masks, RegionGeometry::canonical().masks);
    }

    #[test]
    fn translation_shifts_masks() {
        let id = sample_identity(&mut ChaCha8Rng::seed_from_u64(1));
        let base = render_face(&id, &Nuisance::none());
        let moved = render_face(
            &id,
            &Nuisance {
                dx: 3.0,
                dy: -2.0,
                ..Nuisance::none()
            },
        );
        for k in 0..8 {
            for y in 2..62 {
                for x in 0..61 {
                    assert_eq!(
                        moved.masks[k].get(x + 3, y - 2),
                        base.masks[k].get(x, y),
                        "region {k} at ({x}, {y})"
                    );
                }
            }
        }
    }

    #[test]
    fn doppelganger_differs_only_in_its_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let id = sample_identity(&mut rng);
        for r in Region::ALL {
            let d = make_doppelganger(&id, r, 0.6, &mut rng).unwrap();
            assert!(!d.degenerate);
            let (a, b) = (id.as_vector(), d.params.as_vector());
            let block = 2 + 4 * r.index()..2 + 4 * (r.index() + 1);
            for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                if !block.contains(&i) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            assert!(d.params.region(r).distance(id.region(r)) >= 0.6);
        }
    }

    #[test]
    fn zero_distance_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let id = sample_identity(&mut rng);
        let d = make_doppelganger(&id, Region::Nose, 0.0, &mut rng).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.params, id);
    }

    #[test]
    fn doppelganger_render_changes_only_inside_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let id = sample_identity(&mut rng);
        let nuisance = Nuisance {
            dx: 1.7,
            dy: -2.2,
            rotation_deg: 4.0,
            brightness: 0.05,
            background: 0.4,
            noise_sigma: 0.02,
            noise_seed: 77,
        };
        let a = render_face(&id, &nuisance);
        for r in Region::ALL {
            let d = make_doppelganger(&id, r, 0.8, &mut rng).unwrap();
            let b = render_face(&d.params, &nuisance);
            let mask = a.mask(r);
            let hw = 64 * 64;
            let mut changed = 0;
            for i in 0..hw {
                let differs = (0..3).any(|c| a.image.data()[c * hw + i] != b.image.data()[c * hw + i]);
                if differs {
                    changed += 1;
                    assert!(mask.data[i], "{r}: pixel {i} changed outside mask");
                }
            }
            assert!(changed > 0, "{r}: doppelganger identical");
        }
    }
}
