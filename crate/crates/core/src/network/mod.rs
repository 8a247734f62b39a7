//! Two-stream re-identification network with a pose estimation branch.
//!
//! The `describe` table lists every intermediate of a forward pass with three
//! columns: `name`, `shape` (per batch of `n` images, written `n x C x H x W`)
//! and `stride` (input pixels per feature cell, `-` for vectors).

mod config;
mod layers;
mod model;
mod pose;

pub use config::{stripe_bounds, InitSchemeName, Preset, ScaleConfig};
pub use layers::{apply_bn_updates, BatchNorm, Bottleneck, Builder, Conv, ConvBn, Linear, ResStage, HEAD_INIT_STD};
pub use model::{mask_integrate, ArchFlags, BundleVars, FeatureBundle, HeadBank, Model, PcbBank, TeacherHead};
pub use pose::{PoseBranch, RefineBlock, UBlock, UTrace, HEATMAP_HEAD_PREFIX};

/// One row of the shape table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub stride: Option<usize>,
}

/// Closed-form shapes of every bundle field for a batch of `n` images.
pub fn shape_table(cfg: &ScaleConfig, arch: ArchFlags, n: usize) -> Vec<ShapeRow> {
    let (h, w) = cfg.input_hw;
    let c = cfg.channels;
    let map = |name, ch, s: usize| {
        let (fh, fw) = match s {
            1 => (h, w),
            4 => cfg.heatmap_hw(),
            8 => cfg.shared_hw(),
            _ => cfg.reid_hw(),
        };
        ShapeRow {
            name,
            shape: vec![n, ch, fh, fw],
            stride: Some(s),
        }
    };
    let vec_row = |name, d| ShapeRow {
        name,
        shape: vec![n, d],
        stride: None,
    };
    let mut rows = vec![map("input", 3, 1), map("F_S", c[2], 8)];
    if arch.pose_branch {
        rows.push(map("F_p1", cfg.pose_channels, 8));
        rows.push(map("F_p2", cfg.pose_channels, 4));
        rows.push(map("F_R", cfg.pose_channels, 4));
        rows.push(map("H_hat", cfg.keypoint_count, 4));
        rows.push(map("F_Rp", cfg.pose_channels, 8));
        rows.push(map("F_P", c[4], 16));
        rows.push(map("M", c[4], 16));
    }
    rows.push(map("F_id2", c[4], 16));
    rows.push(map("F_ID", c[4], 16));
    let p = cfg.stripe_count;
    let stripes = |name| ShapeRow {
        name,
        shape: vec![p, n, cfg.fc_dim],
        stride: None,
    };
    let logits = |name| ShapeRow {
        name,
        shape: vec![p, n, cfg.num_identities],
        stride: None,
    };
    rows.push(stripes("stripe_feats_ID"));
    rows.push(logits("logits_ID"));
    if arch.pose_branch {
        rows.push(stripes("stripe_feats_P"));
        rows.push(logits("logits_P"));
    }
    if arch.teacher {
        rows.push(vec_row("teacher_feat", cfg.fc_dim));
        rows.push(vec_row("teacher_logits", cfg.num_identities));
    }
    // retrieval descriptors: stripe features concatenated
    rows.push(vec_row("f_ID", p * cfg.fc_dim));
    if arch.pose_branch {
        rows.push(vec_row("f_P", p * cfg.fc_dim));
        rows.push(vec_row("f_ALL", 2 * p * cfg.fc_dim));
    }
    rows
}

/// Renders the shape table as aligned text.
pub fn describe(cfg: &ScaleConfig, arch: ArchFlags, n: usize) -> String {
    let rows = shape_table(cfg, arch, n);
    let shape_str = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" x ");
    let mut out = format!("{:<16} {:<24} {}\n", "name", "shape", "stride");
    for r in rows {
        let stride = r.stride.map_or("-".to_string(), |s| s.to_string());
        out.push_str(&format!("{:<16} {:<24} {}\n", r.name, shape_str(&r.shape), stride));
    }
    out
}

impl<F: crate::Scalar> FeatureBundle<F> {
    /// Observed shapes in the same order and naming as [`shape_table`].
    pub fn shape_rows(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        let mut rows = vec![("input", input.to_vec()), ("F_S", self.f_s.shape().to_vec())];
        let opt = [
            ("F_p1", &self.f_p1),
            ("F_p2", &self.f_p2),
            ("F_R", &self.f_r),
            ("H_hat", &self.h_hat),
            ("F_Rp", &self.f_rp),
            ("F_P", &self.f_p),
            ("M", &self.mask),
        ];
        for (name, t) in opt {
            if let Some(t) = t {
                rows.push((name, t.shape().to_vec()));
            }
        }
        rows.push(("F_id2", self.f_id2.shape().to_vec()));
        rows.push(("F_ID", self.f_id.shape().to_vec()));
        let stack = |v: &[crate::Tensor<F>]| {
            let mut s = vec![v.len()];
            s.extend_from_slice(v[0].shape());
            s
        };
        rows.push(("stripe_feats_ID", stack(&self.stripe_feats_id)));
        rows.push(("logits_ID", stack(&self.logits_id)));
        if !self.stripe_feats_p.is_empty() {
            rows.push(("stripe_feats_P", stack(&self.stripe_feats_p)));
            rows.push(("logits_P", stack(&self.logits_p)));
        }
        if let (Some(f), Some(l)) = (&self.teacher_feat, &self.teacher_logits) {
            rows.push(("teacher_feat", f.shape().to_vec()));
            rows.push(("teacher_logits", l.shape().to_vec()));
        }
        let n = input[0];
        let width = |v: &[crate::Tensor<F>]| v.iter().map(|t| t.dim(1)).sum::<usize>();
        let (w_id, w_p) = (width(&self.stripe_feats_id), width(&self.stripe_feats_p));
        rows.push(("f_ID", vec![n, w_id]));
        if w_p > 0 {
            rows.push(("f_P", vec![n, w_p]));
            rows.push(("f_ALL", vec![n, w_id + w_p]));
        }
        rows
    }
}
