//! Procedural paired RGB/IR stick-figure identities.

use std::ops::Range;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::keypoints::KeypointLayout;
use super::{Dataset, Keypoint, Modality, Sample};
use crate::error::{Error, Result};
use crate::substrate::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub identities: Range<usize>,
    pub images_per_modality: usize,
    pub input_hw: (usize, usize),
    pub keypoint_count: usize,
    pub seed: u64,
}

/// Persistent appearance of one identity.
#[derive(Clone, Debug)]
struct Identity {
    height: f32,
    head: f32,
    shoulder: f32,
    hip: f32,
    torso: f32,
    thigh: f32,
    shin: f32,
    upper_arm: f32,
    forearm: f32,
    limb: f32,
    shirt: [f32; 3],
    pants: [f32; 3],
    skin: [f32; 3],
    stripe: [f32; 3],
    stripes: usize,
    bag: bool,
    /// Per-region thermal emission.
    heat: [f32; 3],
}

impl Identity {
    /// `spread` places the shirt and pants brightness of consecutive
    /// identities on a low-discrepancy sequence, so no two identities in a
    /// small range are near-duplicates once colour is gone.
    fn draw(identity: usize, spread: (f32, f32), rng: &mut ChaCha8Rng) -> Self {
        // muted colours: identity shows mostly as brightness, which the IR
        // rendering keeps
        let colour = |level: f32, rng: &mut ChaCha8Rng| [0; 3].map(|_| level + rng.random_range(-0.1..0.1f32));
        let u = |offset: f32, step: f64| (offset as f64 + identity as f64 * step).fract() as f32;
        let shirt = colour(0.1 + 0.8 * u(spread.0, 0.754_877_666_2), rng);
        let pants = colour(0.1 + 0.8 * u(spread.1, 0.569_840_291_0), rng);
        let level = rng.random_range(0.1..0.9f32);
        let stripe = colour(level, rng);
        let tone = rng.random_range(0.35..0.95f32);
        Identity {
            height: rng.random_range(0.74..0.92),
            head: rng.random_range(0.055..0.08),
            shoulder: rng.random_range(0.16..0.30),
            hip: rng.random_range(0.10..0.2),
            torso: rng.random_range(0.26..0.34),
            thigh: rng.random_range(0.22..0.28),
            shin: rng.random_range(0.2..0.26),
            upper_arm: rng.random_range(0.15..0.2),
            forearm: rng.random_range(0.13..0.18),
            limb: rng.random_range(0.035..0.06),
            shirt,
            pants,
            skin: [tone, tone * 0.8, tone * 0.65],
            stripe,
            stripes: rng.random_range(0..=2),
            bag: rng.random_bool(0.4),
            heat: [rng.random_range(0.0..0.02), rng.random_range(0.0..0.02), rng.random_range(0.8..0.95)],
        }
    }
}

/// 16 joints in the full-body ordering, pixel-index coordinates.
fn skeleton(id: &Identity, rng: &mut ChaCha8Rng, h: f32, w: f32) -> [(f32, f32); 16] {
    let scale = id.height * h * rng.random_range(0.88..1.05);
    let cx = w * 0.5 + rng.random_range(-0.08..0.08) * w;
    let top = (h - scale) * rng.random_range(0.25..0.75);
    let head_top = (cx, top);
    let neck = (cx, top + 2.0 * id.head * scale);
    let thorax = (cx, neck.1 + 0.05 * scale);
    let pelvis = (cx, thorax.1 + id.torso * scale);
    let half_s = 0.5 * id.shoulder * scale;
    let half_h = 0.5 * id.hip * scale;
    // the person faces the camera: their right side is on the image left
    let r_sh = (cx - half_s, thorax.1);
    let l_sh = (cx + half_s, thorax.1);
    let r_hip = (cx - half_h, pelvis.1);
    let l_hip = (cx + half_h, pelvis.1);
    let limb = |from: (f32, f32), len: f32, angle: f32| (from.0 + len * angle.sin(), from.1 + len * angle.cos());
    let deg = |d: f32| d.to_radians();
    let arm = |shoulder: (f32, f32), side: f32, rng: &mut ChaCha8Rng| {
        let a = deg(rng.random_range(5.0..50.0)) * side;
        let e = limb(shoulder, id.upper_arm * scale, a);
        let bend = a + deg(rng.random_range(-50.0..50.0));
        (e, limb(e, id.forearm * scale, bend))
    };
    let (r_el, r_wr) = arm(r_sh, -1.0, rng);
    let (l_el, l_wr) = arm(l_sh, 1.0, rng);
    let leg = |hip: (f32, f32), rng: &mut ChaCha8Rng| {
        let a = deg(rng.random_range(-18.0..18.0));
        let k = limb(hip, id.thigh * scale, a);
        (k, limb(k, id.shin * scale, a + deg(rng.random_range(-15.0..15.0))))
    };
    let (r_kn, r_an) = leg(r_hip, rng);
    let (l_kn, l_an) = leg(l_hip, rng);
    let snap = |p: (f32, f32)| {
        let q = |v: f32| ((v * 16.0).round() / 16.0).clamp(0.0, f32::MAX);
        (q(p.0).min(w - 1.0), q(p.1).min(h - 1.0))
    };
    [
        r_an, r_kn, r_hip, l_hip, l_kn, l_an, pelvis, thorax, neck, head_top, r_wr, r_el, r_sh, l_sh, l_el, l_wr,
    ]
    .map(snap)
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Body regions in painting order: 0 = clothing top, 1 = clothing bottom,
/// 2 = skin, 3 = stripe, 4 = bag.
fn region_at(id: &Identity, j: &[(f32, f32); 16], p: (f32, f32), h: f32) -> Option<usize> {
    let t = id.limb * id.height * h;
    let mut region = None;
    let seg = |a: usize, b: usize, r: f32| segment_distance(p, j[a], j[b]) <= r;
    if seg(2, 1, t) || seg(1, 0, t * 0.9) || seg(3, 4, t) || seg(4, 5, t * 0.9) {
        region = Some(1);
    }
    let (top, bottom) = (j[7].1, j[6].1 + 0.5 * t);
    let half = 0.5 * (j[13].0 - j[12].0).abs() * 0.8 + 0.5 * t;
    if p.1 >= top && p.1 <= bottom && (p.0 - j[7].0).abs() <= half {
        region = Some(0);
        let band = (bottom - top) / 7.0;
        for s in 0..id.stripes {
            let y0 = top + band * (2 * s + 2) as f32;
            if p.1 >= y0 && p.1 < y0 + band {
                region = Some(3);
            }
        }
    }
    if seg(12, 11, t * 0.8) || seg(13, 14, t * 0.8) {
        region = Some(0);
    }
    if seg(11, 10, t * 0.7) || seg(14, 15, t * 0.7) || seg(8, 7, t * 0.7) {
        region = Some(2);
    }
    let head_c = (j[9].0, 0.5 * (j[9].1 + j[8].1));
    let head_r = 0.5 * (j[8].1 - j[9].1);
    if ((p.0 - head_c.0).powi(2) + (p.1 - head_c.1).powi(2)).sqrt() <= head_r {
        region = Some(2);
    }
    if id.bag {
        let bx = j[13].0 + 0.6 * t;
        let by = j[6].1 - 0.15 * (j[6].1 - j[7].1);
        if (p.0 - bx).abs() <= 0.9 * t && (p.1 - by).abs() <= 1.3 * t {
            region = Some(4);
        }
    }
    region
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(
    id: &Identity,
    joints: &[(f32, f32); 16],
    modality: Modality,
    camera: usize,
    hw: (usize, usize),
    scene: &mut ChaCha8Rng,
    rng: &mut ChaCha8Rng,
) -> Tensor<f32> {
    let (h, w) = hw;
    let noise = Normal::new(0.0f32, if modality == Modality::Ir { 0.035 } else { 0.02 }).unwrap();
    let tint = [0.55 + 0.1 * camera as f32, 0.5, 0.6 - 0.08 * camera as f32];
    let bg_level = scene.random_range(0.08..0.22f32);
    let bg_slope = scene.random_range(-0.15..0.15f32);
    // background clutter: boxes of random brightness behind the person, fixed
    // per scene up to a small shift
    let (dx, dy) = (rng.random_range(-0.05..0.05f32) * w as f32, rng.random_range(-0.05..0.05f32) * h as f32);
    let clutter: Vec<([f32; 4], f32)> = (0..scene.random_range(2..=5))
        .map(|_| {
            let (bw, bh) = (scene.random_range(0.15..0.5f32) * w as f32, scene.random_range(0.1..0.4f32) * h as f32);
            let (x0, y0) = (scene.random_range(0.0..w as f32 - bw) + dx, scene.random_range(0.0..h as f32 - bh) + dy);
            ([x0, y0, x0 + bw, y0 + bh], scene.random_range(0.1..0.9f32))
        })
        .collect();
    let clutter_at = |p: (f32, f32)| {
        clutter
            .iter()
            .rev()
            .find(|(r, _)| p.0 >= r[0] && p.0 < r[2] && p.1 >= r[1] && p.1 < r[3])
            .map(|&(_, v)| v)
    };
    let mut img = Tensor::zeros(vec![3, h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = (x as f32, y as f32);
            let region = region_at(id, joints, p, h as f32);
            let grad = bg_slope * (y as f32 / h as f32 - 0.5);
            let px: [f32; 3] = match modality {
                Modality::Rgb => {
                    let base = match region {
                        Some(0) => id.shirt,
                        Some(1) => id.pants,
                        Some(2) => id.skin,
                        Some(3) => id.stripe,
                        Some(_) => [0.3, 0.2, 0.1],
                        None => match clutter_at(p) {
                            Some(v) => [v, v * 0.9, v * 0.8],
                            None => tint.map(|t| t * (0.6 + grad)),
                        },
                    };
                    base.map(|c| c + noise.sample(rng))
                }
                Modality::Ir => {
                    let lum = |c: [f32; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
                    let v = match region {
                        Some(0) => 0.05 + 0.9 * lum(id.shirt) + id.heat[0],
                        Some(1) => 0.04 + 0.9 * lum(id.pants) + id.heat[1],
                        Some(2) => id.heat[2],
                        Some(3) => 0.05 + 0.9 * lum(id.stripe) + id.heat[0],
                        Some(_) => 0.25,
                        None => clutter_at(p).map_or(bg_level + grad * 0.5, |v| 0.1 + 0.6 * v),
                    };
                    let v = v + noise.sample(rng);
                    [v, v, v]
                }
            };
            for c in 0..3 {
                img.data_mut()[c * plane + y * w + x] = quantize(px[c]);
            }
        }
    }
    img
}

/// Generates `images_per_modality` RGB and as many IR images per identity.
/// The `j`-th RGB and `j`-th IR image of an identity share one pose, so their
/// keypoints coincide. Identity appearance depends only on `(seed, identity)`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.identities.len() < 2 {
        return Err(Error::InvalidConfig("synthetic data needs at least two identities".into()));
    }
    let layout = KeypointLayout::for_count(spec.keypoint_count)?;
    let (h, w) = spec.input_hw;
    let spread = {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        (rng.random::<f32>(), rng.random::<f32>())
    };
    let mut samples = Vec::new();
    for identity in spec.identities.clone() {
        let person_seed = spec.seed ^ (identity as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha8Rng::seed_from_u64(person_seed);
        let person = Identity::draw(identity, spread, &mut rng);
        let mut rendered = [Vec::new(), Vec::new()];
        for j in 0..spec.images_per_modality {
            let joints = skeleton(&person, &mut rng, h as f32, w as f32);
            let keypoints: Vec<Keypoint> = layout
                .select(&joints)
                .into_iter()
                .map(|(x, y)| Keypoint { x, y, visible: true })
                .collect();
            for m in Modality::BOTH {
                let camera = 2 * m.index() + j % 2;
                // every image of one identity under one camera shares a scene
                let mut scene = ChaCha8Rng::seed_from_u64(person_seed ^ (camera as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03));
                let image = render(&person, &joints, m, camera, (h, w), &mut scene, &mut rng);
                rendered[m.index()].push(Sample {
                    image,
                    identity,
                    modality: m,
                    camera,
                    keypoints: Some(keypoints.clone()),
                    path: PathBuf::from(format!("{m}/{identity:04}/{j:03}.png")),
                });
            }
        }
        for part in rendered {
            samples.extend(part);
        }
    }
    Dataset::new(samples, spec.keypoint_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(ids: Range<usize>, n: usize) -> SynthSpec {
        SynthSpec {
            identities: ids,
            images_per_modality: n,
            input_hw: (96, 48),
            keypoint_count: 8,
            seed: 5,
        }
    }

    #[test]
    fn counts_and_determinism() {
        let a = synth_generate(&spec(0..20, 10)).unwrap();
        assert_eq!(a.len(), 400);
        let b = synth_generate(&spec(0..20, 10)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn identity_appearance_is_independent_of_the_range() {
        let a = synth_generate(&spec(0..4, 2)).unwrap();
        let b = synth_generate(&spec(3..5, 2)).unwrap();
        let pick = |d: &Dataset| d.samples.iter().filter(|s| s.identity == 3).cloned().collect::<Vec<_>>();
        assert_eq!(pick(&a), pick(&b));
    }

    #[test]
    fn paired_renders_share_keypoints() {
        let d = synth_generate(&spec(0..3, 4)).unwrap();
        for id in 0..3 {
            let rgb: Vec<_> = d.samples.iter().filter(|s| s.identity == id && s.modality == Modality::Rgb).collect();
            let ir: Vec<_> = d.samples.iter().filter(|s| s.identity == id && s.modality == Modality::Ir).collect();
            for (r, i) in rgb.iter().zip(&ir) {
                assert_eq!(r.keypoints, i.keypoints);
                let kps = r.keypoints.as_ref().unwrap();
                assert!(kps.iter().all(|k| k.x >= 0.0 && k.x <= 47.0 && k.y >= 0.0 && k.y <= 95.0));
            }
            let ir0 = &ir[0].image;
            let plane = 96 * 48;
            assert_eq!(ir0.data()[..plane], ir0.data()[plane..2 * plane]);
        }
    }

    #[test]
    fn cameras_round_robin_per_modality() {
        let d = synth_generate(&spec(0..2, 4)).unwrap();
        for s in &d.samples {
            let cams = match s.modality {
                Modality::Rgb => [0, 1],
                Modality::Ir => [2, 3],
            };
            assert!(cams.contains(&s.camera));
        }
    }
}
