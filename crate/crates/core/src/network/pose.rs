//! Pose Estimation branch: feature stem, refinement module, heatmap head and
//! the transfer path that turns refined keypoint features into masks.

use rand::Rng;

use super::layers::{Builder, Conv, ConvBn, HEAD_INIT_STD};
use crate::error::Result;
use crate::substrate::{Graph, InitScheme, ParamStore, Scalar, Var};

/// Two-level encoder-decoder; each decoder level adds the encoder output of
/// the same spatial size.
#[derive(Clone, Debug)]
pub struct UBlock {
    enc0: ConvBn,
    down: ConvBn,
    bottom: ConvBn,
    up: ConvBn,
    out: ConvBn,
}

/// Outputs of a [`UBlock`] pass together with its skip connections as
/// `(encoder, decoder)` pairs, finest level last.
pub struct UTrace {
    pub out: Var,
    pub skips: Vec<(Var, Var)>,
}

impl UBlock {
    fn new<F: Scalar, R: Rng>(b: &mut Builder<'_, F, R>, name: &str, c: usize, eps: f64) -> Self {
        UBlock {
            enc0: ConvBn::new(b, &format!("{name}.enc0"), c, c, 3, 1, 1, eps),
            down: ConvBn::new(b, &format!("{name}.down"), c, c, 3, 2, 1, eps),
            bottom: ConvBn::new(b, &format!("{name}.bottom"), c, c, 3, 1, 1, eps),
            up: ConvBn::transposed(b, &format!("{name}.up"), c, c, 4, 2, 1, eps),
            out: ConvBn::new(b, &format!("{name}.out"), c, c, 3, 1, 1, eps),
        }
    }

    pub fn forward_traced<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<UTrace> {
        let e0 = self.enc0.forward_relu(g, s, x)?;
        let e1 = self.down.forward_relu(g, s, e0)?;
        let d1 = self.bottom.forward_relu(g, s, e1)?;
        let m1 = g.add(d1, e1)?;
        let d0 = self.up.forward_relu(g, s, m1)?;
        let m0 = g.add(d0, e0)?;
        let out = self.out.forward_relu(g, s, m0)?;
        Ok(UTrace {
            out,
            skips: vec![(e1, d1), (e0, d0)],
        })
    }
}

/// Two 3x3 convolutions with a residual add.
#[derive(Clone, Debug)]
pub struct RefineBlock {
    a: ConvBn,
    b: ConvBn,
}

impl RefineBlock {
    fn new<F: Scalar, R: Rng>(b: &mut Builder<'_, F, R>, name: &str, c: usize, eps: f64) -> Self {
        RefineBlock {
            a: ConvBn::new(b, &format!("{name}.a"), c, c, 3, 1, 1, eps),
            b: ConvBn::new(b, &format!("{name}.b"), c, c, 3, 1, 1, eps),
        }
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let y = self.a.forward_relu(g, s, x)?;
        let y = self.b.forward(g, s, y)?;
        let sum = g.add(x, y)?;
        Ok(g.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct PoseBranch {
    pub conv1: ConvBn,
    pub dconv2: ConvBn,
    pub ublock: UBlock,
    pub refine: Vec<RefineBlock>,
    pub head_conv: ConvBn,
    pub head_out: Conv,
    pub conv3: ConvBn,
    pub convb6_a: ConvBn,
    pub convb6_b: ConvBn,
}

/// Parameter-name prefix of the heatmap head (frozen when the pose loss is off).
pub const HEATMAP_HEAD_PREFIX: &str = "pose.rm_h.";

impl PoseBranch {
    pub fn new<F: Scalar, R: Rng>(
        b: &mut Builder<'_, F, R>,
        shared_channels: usize,
        pose_channels: usize,
        convb6_width: usize,
        reid_channels: usize,
        keypoints: usize,
        eps: f64,
    ) -> Self {
        let c = pose_channels;
        PoseBranch {
            conv1: ConvBn::new(b, "pose.conv1", shared_channels, c, 3, 1, 1, eps),
            dconv2: ConvBn::transposed(b, "pose.dconv2", c, c, 4, 2, 1, eps),
            ublock: UBlock::new(b, "pose.rm_f.ublock", c, eps),
            refine: (0..3)
                .map(|i| RefineBlock::new(b, &format!("pose.rm_f.refine{i}"), c, eps))
                .collect(),
            head_conv: ConvBn::new(b, "pose.rm_h.conv", c, c, 3, 1, 1, eps),
            head_out: b.with_init(InitScheme::Normal(HEAD_INIT_STD), |b| {
                Conv::new(b, "pose.rm_h.out", c, keypoints, 1, 1, 0, true)
            }),
            conv3: ConvBn::new(b, "pose.conv3", c, c, 3, 2, 1, eps),
            convb6_a: ConvBn::new(b, "pose.convb6.a", c, convb6_width, 3, 2, 1, eps),
            convb6_b: ConvBn::new(b, "pose.convb6.b", convb6_width, reid_channels, 1, 1, 0, eps),
        }
    }

    /// `(F_p1, F_p2)`: same-resolution 3x3 conv, then a x2 transposed conv.
    pub fn stem<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, f_s: Var) -> Result<(Var, Var)> {
        let f_p1 = self.conv1.forward_relu(g, s, f_s)?;
        let f_p2 = self.dconv2.forward_relu(g, s, f_p1)?;
        Ok((f_p1, f_p2))
    }

    /// Refined keypoint features `F_R` (same shape as `F_p2`).
    pub fn refine_features<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, f_p2: Var) -> Result<Var> {
        let mut x = self.ublock.forward_traced(g, s, f_p2)?.out;
        for r in &self.refine {
            x = r.forward(g, s, x)?;
        }
        Ok(x)
    }

    /// Predicted heatmaps. The 1x1 output reads zero-mean normalized
    /// features (no ReLU), which keeps the curvature of the summed pixel loss
    /// low enough for a useful pose-loss weight.
    pub fn heatmaps<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, f_r: Var) -> Result<Var> {
        let y = self.head_conv.forward(g, s, f_r)?;
        self.head_out.forward(g, s, y)
    }

    /// `(F_R', F_P)`: downsample `F_R` to the `F_p1` grid, add, then ConvB6.
    pub fn transfer<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, f_r: Var, f_p1: Var) -> Result<(Var, Var)> {
        let f_rp = self.conv3.forward_relu(g, s, f_r)?;
        let sum = g.add(f_rp, f_p1)?;
        let y = self.convb6_a.forward_relu(g, s, sum)?;
        let f_p = self.convb6_b.forward_relu(g, s, y)?;
        Ok((f_rp, f_p))
    }
}
