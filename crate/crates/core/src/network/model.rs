use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ScaleConfig;
use super::layers::{apply_bn_updates, BatchNorm, Builder, Conv, Linear, ResStage, HEAD_INIT_STD};
use super::pose::PoseBranch;
use crate::error::{ensure_shape, Error, Result};
use crate::substrate::{Graph, InitScheme, Mode, ParamStore, Scalar, Tensor, Var};

/// Which optional subnetworks exist in a model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchFlags {
    /// Pose Estimation branch, mask gating and pose-bank PCB heads.
    pub pose_branch: bool,
    /// Global teacher head over concatenated pose and identity features.
    pub teacher: bool,
}

impl ArchFlags {
    pub const FULL: ArchFlags = ArchFlags {
        pose_branch: true,
        teacher: true,
    };
    pub const BASELINE: ArchFlags = ArchFlags {
        pose_branch: false,
        teacher: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadBank {
    Id,
    Pose,
}

/// ConvB1: strided 7x7 conv and a strided 3x3 reduction, each with BN + ReLU.
#[derive(Clone, Debug)]
struct StemBlock {
    conv: Conv,
    bn: BatchNorm,
    reduce: Conv,
    reduce_bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct ModalityStem {
    block1: StemBlock,
    block2: ResStage,
}

impl ModalityStem {
    fn forward<F: Scalar>(&self, g: &mut Graph<F>, s: &ParamStore<F>, x: Var) -> Result<Var> {
        let b = &self.block1;
        let y = b.conv.forward(g, s, x)?;
        let y = b.bn.forward(g, s, y)?;
        let y = g.relu(y);
        let y = b.reduce.forward(g, s, y)?;
        let y = b.reduce_bn.forward(g, s, y)?;
        let y = g.relu(y);
        self.block2.forward(g, s, y)
    }
}

/// One PCB model per stripe: FC (+ReLU) to the embedding, then a bias-free classifier.
#[derive(Clone, Debug)]
pub struct PcbBank {
    pub fcs: Vec<Linear>,
    pub bns: Vec<BatchNorm>,
    pub classifiers: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct TeacherHead {
    pub fc: Linear,
    pub bn: BatchNorm,
    pub classifier: Linear,
}

/// Graph handles for every named intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct BundleVars {
    pub f_s: Var,
    pub f_p1: Option<Var>,
    pub f_p2: Option<Var>,
    pub f_r: Option<Var>,
    pub h_hat: Option<Var>,
    pub f_rp: Option<Var>,
    pub f_p: Option<Var>,
    pub mask: Option<Var>,
    pub f_id2: Var,
    pub f_id: Var,
    pub stripe_id: Vec<Var>,
    pub stripe_p: Vec<Var>,
    pub logits_id: Vec<Var>,
    pub logits_p: Vec<Var>,
    pub teacher_feat: Option<Var>,
    pub teacher_logits: Option<Var>,
}

/// Materialised values of a forward pass; pose-only entries are `None` when
/// the model has no pose branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<F: Scalar> {
    pub f_s: Tensor<F>,
    pub f_p1: Option<Tensor<F>>,
    pub f_p2: Option<Tensor<F>>,
    pub f_r: Option<Tensor<F>>,
    pub h_hat: Option<Tensor<F>>,
    pub f_rp: Option<Tensor<F>>,
    pub f_p: Option<Tensor<F>>,
    pub mask: Option<Tensor<F>>,
    pub f_id2: Tensor<F>,
    pub f_id: Tensor<F>,
    pub stripe_feats_id: Vec<Tensor<F>>,
    pub stripe_feats_p: Vec<Tensor<F>>,
    pub logits_id: Vec<Tensor<F>>,
    pub logits_p: Vec<Tensor<F>>,
    pub teacher_feat: Option<Tensor<F>>,
    pub teacher_logits: Option<Tensor<F>>,
}

impl BundleVars {
    pub fn materialize<F: Scalar>(&self, g: &Graph<F>) -> FeatureBundle<F> {
        let v = |x: Var| g.value(x).clone();
        let o = |x: Option<Var>| x.map(v);
        FeatureBundle {
            f_s: v(self.f_s),
            f_p1: o(self.f_p1),
            f_p2: o(self.f_p2),
            f_r: o(self.f_r),
            h_hat: o(self.h_hat),
            f_rp: o(self.f_rp),
            f_p: o(self.f_p),
            mask: o(self.mask),
            f_id2: v(self.f_id2),
            f_id: v(self.f_id),
            stripe_feats_id: self.stripe_id.iter().map(|&x| v(x)).collect(),
            stripe_feats_p: self.stripe_p.iter().map(|&x| v(x)).collect(),
            logits_id: self.logits_id.iter().map(|&x| v(x)).collect(),
            logits_p: self.logits_p.iter().map(|&x| v(x)).collect(),
            teacher_feat: o(self.teacher_feat),
            teacher_logits: o(self.teacher_logits),
        }
    }
}

/// The two-stream network with optional pose branch and teacher head.
#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub cfg: ScaleConfig,
    pub arch: ArchFlags,
    pub store: ParamStore<F>,
    stem_rgb: ModalityStem,
    stem_ir: ModalityStem,
    shared: ResStage,
    reid4: ResStage,
    reid5: ResStage,
    pose: Option<PoseBranch>,
    pcb_id: PcbBank,
    pcb_pose: Option<PcbBank>,
    teacher: Option<TeacherHead>,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ScaleConfig, arch: ArchFlags, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if arch.teacher && !arch.pose_branch {
            return Err(Error::InvalidConfig(
                "the teacher head consumes pose features and needs the pose branch".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            init: cfg.init.into(),
        };
        let c = cfg.channels;
        let eps = cfg.bn_eps;
        let stem = |b: &mut Builder<'_, F, ChaCha8Rng>, name: &str| ModalityStem {
            block1: StemBlock {
                conv: Conv::new(b, &format!("{name}.convb1.conv"), 3, c[0], 7, 2, 3, false),
                bn: BatchNorm::new(b, &format!("{name}.convb1.bn"), c[0], eps),
                reduce: Conv::new(b, &format!("{name}.convb1.reduce"), c[0], c[0], 3, 2, 1, false),
                reduce_bn: BatchNorm::new(b, &format!("{name}.convb1.reduce_bn"), c[0], eps),
            },
            block2: ResStage::new(b, &format!("{name}.convb2"), c[0], c[1], cfg.blocks[0], 1, eps),
        };
        let stem_rgb = stem(&mut b, "stem_rgb");
        let stem_ir = stem(&mut b, "stem_ir");
        let shared = ResStage::new(&mut b, "shared.convb3", c[1], c[2], cfg.blocks[1], 2, eps);
        let reid4 = ResStage::new(&mut b, "reid.convb4", c[2], c[3], cfg.blocks[2], 2, eps);
        let reid5 = ResStage::new(&mut b, "reid.convb5", c[3], c[4], cfg.blocks[3], 1, eps);
        let pose = arch.pose_branch.then(|| {
            PoseBranch::new(
                &mut b,
                c[2],
                cfg.pose_channels,
                cfg.convb6_width,
                c[4],
                cfg.keypoint_count,
                eps,
            )
        });
        let bank = |b: &mut Builder<'_, F, ChaCha8Rng>, name: &str| PcbBank {
            fcs: (0..cfg.stripe_count)
                .map(|i| Linear::new(b, &format!("{name}.{i}.fc"), c[4], cfg.fc_dim, false))
                .collect(),
            bns: (0..cfg.stripe_count)
                .map(|i| BatchNorm::new(b, &format!("{name}.{i}.bn"), cfg.fc_dim, eps))
                .collect(),
            classifiers: (0..cfg.stripe_count)
                .map(|i| {
                    b.with_init(InitScheme::Normal(HEAD_INIT_STD), |b| {
                        Linear::new(b, &format!("{name}.{i}.classifier"), cfg.fc_dim, cfg.num_identities, false)
                    })
                })
                .collect(),
        };
        let pcb_id = bank(&mut b, "pcb_id");
        let pcb_pose = arch.pose_branch.then(|| bank(&mut b, "pcb_pose"));
        let teacher = arch.teacher.then(|| TeacherHead {
            fc: Linear::new(&mut b, "teacher.fc", 2 * c[4], cfg.fc_dim, false),
            bn: BatchNorm::new(&mut b, "teacher.bn", cfg.fc_dim, eps),
            classifier: b.with_init(InitScheme::Normal(HEAD_INIT_STD), |b| {
                Linear::new(b, "teacher.classifier", cfg.fc_dim, cfg.num_identities, false)
            }),
        });
        Ok(Model {
            cfg,
            arch,
            store,
            stem_rgb,
            stem_ir,
            shared,
            reid4,
            reid5,
            pose,
            pcb_id,
            pcb_pose,
            teacher,
        })
    }

    pub fn pose_branch(&self) -> Option<&PoseBranch> {
        self.pose.as_ref()
    }

    fn check_images(&self, x: &Tensor<F>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        ensure_shape!(
            c == 3 && (h, w) == self.cfg.input_hw,
            "expected images N x 3 x {} x {}, got {:?}",
            self.cfg.input_hw.0,
            self.cfg.input_hw.1,
            x.shape()
        );
        Ok(())
    }

    /// Modality-specific stems (own parameters per modality) followed by the
    /// shared ConvB3 over the batch-concatenated features.
    pub fn modality_forward(&self, g: &mut Graph<F>, rgb: Var, ir: Var) -> Result<Var> {
        let (nr, ni) = (g.shape(rgb)[0], g.shape(ir)[0]);
        if nr != ni {
            return Err(Error::InvalidBatch(format!(
                "{nr} RGB images but {ni} IR images"
            )));
        }
        self.shared_features(g, Some(rgb), Some(ir))
    }

    /// Like [`Self::modality_forward`] but either modality may be absent
    /// (feature extraction over single-modality sets).
    pub fn shared_features(&self, g: &mut Graph<F>, rgb: Option<Var>, ir: Option<Var>) -> Result<Var> {
        let mut parts = Vec::new();
        if let Some(x) = rgb {
            parts.push(self.stem_rgb.forward(g, &self.store, x)?);
        }
        if let Some(x) = ir {
            parts.push(self.stem_ir.forward(g, &self.store, x)?);
        }
        if parts.is_empty() {
            return Err(Error::InvalidBatch("no images".into()));
        }
        let f = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };
        self.shared.forward(g, &self.store, f)
    }

    /// ConvB4 (stride 2) and ConvB5 (stride 1) over the shared features.
    pub fn reid_forward(&self, g: &mut Graph<F>, f_s: Var) -> Result<Var> {
        let y = self.reid4.forward(g, &self.store, f_s)?;
        self.reid5.forward(g, &self.store, y)
    }

    fn require_pose(&self) -> Result<&PoseBranch> {
        self.pose
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model was built without the pose branch".into()))
    }

    pub fn pose_stem(&self, g: &mut Graph<F>, f_s: Var) -> Result<(Var, Var)> {
        self.require_pose()?.stem(g, &self.store, f_s)
    }

    /// `(F_R, H_hat)`.
    pub fn refinement_forward(&self, g: &mut Graph<F>, f_p2: Var) -> Result<(Var, Var)> {
        let pose = self.require_pose()?;
        let f_r = pose.refine_features(g, &self.store, f_p2)?;
        let h_hat = pose.heatmaps(g, &self.store, f_r)?;
        Ok((f_r, h_hat))
    }

    /// `(F_R', F_P)`.
    pub fn keypoint_transfer(&self, g: &mut Graph<F>, f_r: Var, f_p1: Var) -> Result<(Var, Var)> {
        self.require_pose()?.transfer(g, &self.store, f_r, f_p1)
    }

    /// Stripe features and logits of one PCB bank.
    pub fn pcb_heads(&self, g: &mut Graph<F>, f: Var, bank: HeadBank) -> Result<(Vec<Var>, Vec<Var>)> {
        let heads = match bank {
            HeadBank::Id => &self.pcb_id,
            HeadBank::Pose => self
                .pcb_pose
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("model has no pose-bank heads".into()))?,
        };
        let (_, _, h, _) = g.value(f).dims4()?;
        let p = heads.fcs.len();
        if p > h {
            return Err(Error::InvalidConfig(format!("{p} stripes exceed feature height {h}")));
        }
        let mut feats = Vec::with_capacity(p);
        let mut logits = Vec::with_capacity(p);
        for (i, (start, end)) in super::config::stripe_bounds(h, p).into_iter().enumerate() {
            let band = g.slice_rows(f, start, end)?;
            let pooled = g.gap(band)?;
            let z = heads.fcs[i].forward(g, &self.store, pooled)?;
            let z = heads.bns[i].forward(g, &self.store, z)?;
            logits.push(heads.classifiers[i].forward(g, &self.store, z)?);
            feats.push(z);
        }
        Ok((feats, logits))
    }

    /// `(teacher_feat, teacher_logits)` from the globally pooled channel
    /// concatenation `[F_P, F_ID]`.
    pub fn hfc_teacher(&self, g: &mut Graph<F>, f_p: Var, f_id: Var) -> Result<(Var, Var)> {
        let t = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("model has no teacher head".into()))?;
        ensure_shape!(
            g.shape(f_p) == g.shape(f_id),
            "teacher inputs differ: {:?} vs {:?}",
            g.shape(f_p),
            g.shape(f_id)
        );
        let cat = g.concat(&[f_p, f_id], 1)?;
        let pooled = g.gap(cat)?;
        let z = t.fc.forward(g, &self.store, pooled)?;
        let z = t.bn.forward(g, &self.store, z)?;
        let z = g.relu(z);
        let logits = t.classifier.forward(g, &self.store, z)?;
        Ok((z, logits))
    }

    /// Composes every stage. Rows are ordered `[rgb | ir]`.
    pub fn forward(&self, g: &mut Graph<F>, rgb: Option<&Tensor<F>>, ir: Option<&Tensor<F>>) -> Result<BundleVars> {
        if let Some(x) = rgb {
            self.check_images(x)?;
        }
        if let Some(x) = ir {
            self.check_images(x)?;
        }
        let rgb = rgb.map(|x| g.constant(x.clone()));
        let ir = ir.map(|x| g.constant(x.clone()));
        let f_s = match (rgb, ir) {
            (Some(r), Some(i)) if g.mode() == Mode::Train => self.modality_forward(g, r, i)?,
            _ => self.shared_features(g, rgb, ir)?,
        };
        let f_id2 = self.reid_forward(g, f_s)?;
        let (stripe_id, logits_id) = if self.pose.is_none() {
            self.pcb_heads(g, f_id2, HeadBank::Id)?
        } else {
            (Vec::new(), Vec::new())
        };
        if self.pose.is_none() {
            return Ok(BundleVars {
                f_s,
                f_p1: None,
                f_p2: None,
                f_r: None,
                h_hat: None,
                f_rp: None,
                f_p: None,
                mask: None,
                f_id2,
                f_id: f_id2,
                stripe_id,
                stripe_p: Vec::new(),
                logits_id,
                logits_p: Vec::new(),
                teacher_feat: None,
                teacher_logits: None,
            });
        }
        let (f_p1, f_p2) = self.pose_stem(g, f_s)?;
        let (f_r, h_hat) = self.refinement_forward(g, f_p2)?;
        let (f_rp, f_p) = self.keypoint_transfer(g, f_r, f_p1)?;
        let (mask, f_id) = mask_integrate(g, f_id2, f_p)?;
        let (stripe_id, logits_id) = self.pcb_heads(g, f_id, HeadBank::Id)?;
        let (stripe_p, logits_p) = self.pcb_heads(g, f_p, HeadBank::Pose)?;
        let (teacher_feat, teacher_logits) = if self.teacher.is_some() {
            let (f, l) = self.hfc_teacher(g, f_p, f_id)?;
            (Some(f), Some(l))
        } else {
            (None, None)
        };
        Ok(BundleVars {
            f_s,
            f_p1: Some(f_p1),
            f_p2: Some(f_p2),
            f_r: Some(f_r),
            h_hat: Some(h_hat),
            f_rp: Some(f_rp),
            f_p: Some(f_p),
            mask: Some(mask),
            f_id2,
            f_id,
            stripe_id,
            stripe_p,
            logits_id,
            logits_p,
            teacher_feat,
            teacher_logits,
        })
    }

    /// Forward pass on a paired batch, materialised. In training mode the
    /// batch-norm running statistics are refreshed.
    pub fn full_forward(&mut self, rgb: &Tensor<F>, ir: &Tensor<F>, mode: Mode) -> Result<FeatureBundle<F>> {
        let mut g = match mode {
            Mode::Train => Graph::new(Mode::Train),
            Mode::Eval => Graph::inference(),
        };
        let vars = self.forward(&mut g, Some(rgb), Some(ir))?;
        if mode == Mode::Train {
            apply_bn_updates(&g, &mut self.store, self.cfg.bn_momentum);
        }
        Ok(vars.materialize(&g))
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn infer(&self, rgb: Option<&Tensor<F>>, ir: Option<&Tensor<F>>) -> Result<FeatureBundle<F>> {
        let mut g = Graph::inference();
        let vars = self.forward(&mut g, rgb, ir)?;
        Ok(vars.materialize(&g))
    }

    pub fn residual_stages(&self) -> [&ResStage; 3] {
        [&self.shared, &self.reid4, &self.reid5]
    }
}

/// `M = sigmoid(F_P)`, `F_ID = F_id2 * M`.
pub fn mask_integrate<F: Scalar>(g: &mut Graph<F>, f_id2: Var, f_p: Var) -> Result<(Var, Var)> {
    ensure_shape!(
        g.shape(f_id2) == g.shape(f_p),
        "mask integration needs equal shapes, got {:?} and {:?}",
        g.shape(f_id2),
        g.shape(f_p)
    );
    let m = g.sigmoid(f_p);
    let f_id = g.mul(f_id2, m)?;
    Ok((m, f_id))
}
