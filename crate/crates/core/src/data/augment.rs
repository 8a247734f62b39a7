use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::keypoints::KeypointLayout;
use super::{Keypoint, Modality, Sample, Standardization};
use crate::substrate::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub input_hw: (usize, usize),
    pub pad: usize,
    pub flip_prob: f64,
    pub erase_prob: f64,
    /// Erased fraction of the image area.
    pub erase_area: (f32, f32),
    pub erase_aspect: (f32, f32),
}

impl AugmentConfig {
    /// 10 px of padding at 288 rows, scaled with the input height.
    pub fn for_input(input_hw: (usize, usize)) -> Self {
        AugmentConfig {
            input_hw,
            pad: ((10 * input_hw.0) as f32 / 288.0).round().max(1.0) as usize,
            flip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.3),
            erase_aspect: (0.3, 3.3),
        }
    }
}

/// An image ready for the network plus keypoints in its pixel frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub image: Tensor<f32>,
    pub keypoints: Option<Vec<Keypoint>>,
}

fn hw(image: &Tensor<f32>) -> (usize, usize) {
    (image.dim(1), image.dim(2))
}

/// Bilinear resize; keypoints follow the pixel-centre mapping.
pub fn resize(image: &Tensor<f32>, keypoints: Option<&[Keypoint]>, out_hw: (usize, usize)) -> Prepared {
    let (h, w) = hw(image);
    if (h, w) == out_hw {
        return Prepared {
            image: image.clone(),
            keypoints: keypoints.map(<[Keypoint]>::to_vec),
        };
    }
    let plane = h * w;
    let d = image.data();
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([d[i], d[plane + i], d[2 * plane + i]])
    });
    let (oh, ow) = out_hw;
    let out = imageops::resize(&buf, ow as u32, oh as u32, FilterType::Triangle);
    let oplane = oh * ow;
    let mut t = Tensor::zeros(vec![3, oh, ow]);
    for (x, y, p) in out.enumerate_pixels() {
        let i = y as usize * ow + x as usize;
        for c in 0..3 {
            t.data_mut()[c * oplane + i] = p.0[c];
        }
    }
    let (sy, sx) = (oh as f32 / h as f32, ow as f32 / w as f32);
    let kps = keypoints.map(|k| {
        k.iter()
            .map(|p| Keypoint {
                x: (p.x + 0.5) * sx - 0.5,
                y: (p.y + 0.5) * sy - 0.5,
                visible: p.visible,
            })
            .collect()
    });
    Prepared { image: t, keypoints: kps }
}

/// Zero-pads by `pad` on every side and crops the original size at offset
/// `(oy, ox)` of the padded image. Keypoints leaving the frame become
/// invisible.
pub fn pad_crop(p: &Prepared, pad: usize, oy: usize, ox: usize) -> Prepared {
    let (h, w) = hw(&p.image);
    let plane = h * w;
    let src = p.image.data();
    let mut out = Tensor::zeros(vec![3, h, w]);
    for c in 0..3 {
        for y in 0..h {
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out.data_mut()[c * plane + y * w + x] = src[c * plane + sy as usize * w + sx as usize];
                }
            }
        }
    }
    let (dy, dx) = (oy as f32 - pad as f32, ox as f32 - pad as f32);
    let kps = p.keypoints.as_ref().map(|k| {
        k.iter()
            .map(|q| {
                let (x, y) = (q.x - dx, q.y - dy);
                let inside = x >= 0.0 && y >= 0.0 && x <= (w - 1) as f32 && y <= (h - 1) as f32;
                Keypoint { x, y, visible: q.visible && inside }
            })
            .collect()
    });
    Prepared { image: out, keypoints: kps }
}

/// Mirrors the image; keypoint `k` moves to the mirrored joint's slot.
pub fn hflip(p: &Prepared, layout: &KeypointLayout) -> Prepared {
    let (h, w) = hw(&p.image);
    let src = p.image.data();
    let image = Tensor::from_fn(vec![3, h, w], |i| {
        let (row, x) = (i / w, i % w);
        src[row * w + (w - 1 - x)]
    });
    let kps = p.keypoints.as_ref().map(|k| {
        let mut out = k.clone();
        for (j, q) in k.iter().enumerate() {
            out[layout.mirror(j)] = Keypoint {
                x: (w - 1) as f32 - q.x,
                y: q.y,
                visible: q.visible,
            };
        }
        out
    });
    Prepared { image, keypoints: kps }
}

/// Overwrites one random rectangle with `fill` (per channel).
pub fn random_erase<R: Rng>(image: &mut Tensor<f32>, cfg: &AugmentConfig, fill: [f32; 3], rng: &mut R) {
    let (h, w) = hw(image);
    let area = (h * w) as f32;
    for _ in 0..10 {
        let target = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1) * area;
        let aspect = rng.random_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        let plane = h * w;
        for (c, &v) in fill.iter().enumerate() {
            for y in y0..y0 + eh {
                image.data_mut()[c * plane + y * w + x0..c * plane + y * w + x0 + ew].fill(v);
            }
        }
        return;
    }
}

pub fn standardize(image: &mut Tensor<f32>, modality: Modality, stats: &Standardization) {
    let plane = image.len() / 3;
    let (mean, std) = (stats.mean[modality.index()], stats.std[modality.index()]);
    for (c, chunk) in image.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - mean[c]) / std[c];
        }
    }
}

/// Train mode: resize, pad and random crop, random flip, random erase;
/// eval mode: resize only. Both end with standardization.
pub fn augment<R: Rng>(
    sample: &Sample,
    train: bool,
    cfg: &AugmentConfig,
    layout: &KeypointLayout,
    stats: &Standardization,
    rng: &mut R,
) -> Prepared {
    let mut p = resize(&sample.image, sample.keypoints.as_deref(), cfg.input_hw);
    if train {
        let oy = rng.random_range(0..=2 * cfg.pad);
        let ox = rng.random_range(0..=2 * cfg.pad);
        p = pad_crop(&p, cfg.pad, oy, ox);
        if rng.random_bool(cfg.flip_prob) {
            p = hflip(&p, layout);
        }
        if rng.random_bool(cfg.erase_prob) {
            random_erase(&mut p.image, cfg, stats.mean[sample.modality.index()], rng);
        }
    }
    standardize(&mut p.image, sample.modality, stats);
    p
}
