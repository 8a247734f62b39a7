use super::Keypoint;
use crate::substrate::Tensor;

/// Default Gaussian width in heatmap pixels: 2 px at a 72-row heatmap,
/// scaled with resolution and never below 1.5 px (narrower peaks alias
/// badly on coarse grids).
pub fn default_sigma(heatmap_h: usize) -> f32 {
    (2.0 * heatmap_h as f32 / 72.0).max(1.5)
}

/// Maps image pixel coordinates onto a grid `stride` times coarser, keeping
/// pixel centres aligned.
pub fn to_heatmap_coords(keypoints: &[Keypoint], stride: usize) -> Vec<Keypoint> {
    let s = stride as f32;
    keypoints
        .iter()
        .map(|k| Keypoint {
            x: (k.x + 0.5) / s - 0.5,
            y: (k.y + 0.5) / s - 0.5,
            visible: k.visible,
        })
        .collect()
}

/// `count x h x w` maps; channel `k` is `exp(-d^2 / (2 sigma^2))` around
/// keypoint `k` (grid coordinates) and all zero when the keypoint is
/// invisible or no keypoints are known.
pub fn make_heatmaps(keypoints: Option<&[Keypoint]>, count: usize, out_hw: (usize, usize), sigma: f32) -> Tensor<f32> {
    let (h, w) = out_hw;
    let mut maps = Tensor::zeros(vec![count, h, w]);
    let Some(kps) = keypoints else {
        return maps;
    };
    let denom = 2.0 * sigma * sigma;
    for (k, kp) in kps.iter().enumerate().take(count) {
        if !kp.visible {
            continue;
        }
        let channel = &mut maps.data_mut()[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            let dy = y as f32 - kp.y;
            for x in 0..w {
                let dx = x as f32 - kp.x;
                channel[y * w + x] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    maps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_mapping_keeps_centres() {
        let k = [Keypoint { x: 1.5, y: 5.5, visible: true }];
        let m = to_heatmap_coords(&k, 4);
        assert_eq!((m[0].x, m[0].y), (0.0, 1.0));
    }

    #[test]
    fn scaled_sigma() {
        assert_eq!(default_sigma(72), 2.0);
        assert_eq!(default_sigma(24), 1.5);
    }
}
