//! The matting network: a shared five-stage encoder feeding a semantic head,
//! a foreground-probability decoder, a boundary detail branch, and a fusion
//! branch that emits the final alpha matte.
//!
//! Two switches select the published ablation rows: `use_fpm` gates the
//! probability-map decoder (off substitutes a constant 0.5 map), and
//! `feed_sp_to_detail` routes the deepest semantic feature into the detail
//! decoder. The default (fpm on, feed off) is the best-reported variant.

use crate::nn::ParamStore;
use crate::nn::{conv_block, conv_layer, down_stage, se_block, up_stage, Binder};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Shape4, Tensor4, UpsampleMode};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Squeeze-excite bottleneck ratio used by the semantic branch.
pub const SE_REDUCTION: usize = 4;

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Widths of the five encoder stages (strides 2, 4, 8, 16, 16).
    pub encoder_channels: [usize; 5],
    /// Width of the probability-map decoder.
    pub fpm_channels: usize,
    /// Predict the foreground probability map (off: constant 0.5 substitute).
    pub use_fpm: bool,
    /// Concatenate the deepest semantic feature into the detail decoder.
    pub feed_sp_to_detail: bool,
    /// Nominal training resolution; must be divisible by 32.
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_channels: [16, 32, 64, 128, 128],
            fpm_channels: 32,
            use_fpm: true,
            feed_sp_to_detail: false,
            input_size: 64,
        }
    }
}

/// The three studied configurations of the two module switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Probability map off, semantic feed on.
    I,
    /// Both on.
    II,
    /// Probability map on, semantic feed off (default, best).
    III,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(Ablation::I),
            "ii" | "2" => Ok(Ablation::II),
            "iii" | "3" => Ok(Ablation::III),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation row {other:?}, expected i, ii, or iii"
            ))),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.contains(&0) {
            return Err(Error::InvalidArgument(
                "encoder channel widths must all be >= 1".into(),
            ));
        }
        if !self.encoder_channels[4].is_multiple_of(SE_REDUCTION) {
            return Err(Error::NotDivisible {
                context: "deepest encoder width vs squeeze-excite reduction".into(),
                dim: self.encoder_channels[4],
                by: SE_REDUCTION,
            });
        }
        if self.fpm_channels == 0 {
            return Err(Error::InvalidArgument("fpm_channels must be >= 1".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::NotDivisible {
                context: "input_size".into(),
                dim: self.input_size,
                by: 32,
            });
        }
        Ok(())
    }

    pub fn with_ablation(mut self, row: Ablation) -> Self {
        match row {
            Ablation::I => {
                self.use_fpm = false;
                self.feed_sp_to_detail = true;
            }
            Ablation::II => {
                self.use_fpm = true;
                self.feed_sp_to_detail = true;
            }
            Ablation::III => {
                self.use_fpm = true;
                self.feed_sp_to_detail = false;
            }
        }
        self
    }
}

/// Tape handles for everything the forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Coarse semantic map, [n,1,H/16,W/16], in (0,1).
    pub s_po: ValueId,
    /// Foreground probability map, [n,1,H,W], in [0,1].
    pub f_p: ValueId,
    /// Boundary detail map, [n,1,H,W], in (0,1).
    pub d_p: ValueId,
    /// Final alpha matte, [n,1,H,W], in (0,1).
    pub alpha_p: ValueId,
    /// Encoder features at strides 2, 4, 8, 16, 16 (deepest is SE-reweighted).
    pub feats: Vec<ValueId>,
}

fn check_input(tape: &Tape, image: ValueId) -> Result<()> {
    let s = tape.shape(image);
    if s.c != 3 {
        return Err(Error::ShapeMismatch {
            context: "model input".into(),
            expected: "n x 3 x H x W".into(),
            found: s.to_string(),
        });
    }
    for (dim, label) in [(s.h, "input height"), (s.w, "input width")] {
        if dim == 0 || dim % 32 != 0 {
            return Err(Error::NotDivisible {
                context: label.into(),
                dim,
                by: 32,
            });
        }
    }
    Ok(())
}

/// Encoder plus semantic head: five features (strides 2,4,8,16,16, the last
/// SE-reweighted) and the coarse foreground map s_po at 1/16 resolution.
pub fn semantic_branch(
    b: &mut Binder,
    image: ValueId,
    cfg: &ModelConfig,
) -> Result<(Vec<ValueId>, ValueId)> {
    check_input(b.tape(), image)?;
    let w = &cfg.encoder_channels;
    let f1 = down_stage(b, "enc.stage1", image, w[0], 3)?;
    let f2 = down_stage(b, "enc.stage2", f1, w[1], 3)?;
    let f3 = down_stage(b, "enc.stage3", f2, w[2], 3)?;
    let f4 = down_stage(b, "enc.stage4", f3, w[3], 3)?;
    let f5 = conv_block(b, "enc.stage5", f4, w[4], 3, 1)?;
    let deep = se_block(b, "sem.se", f5, SE_REDUCTION)?;
    let logits = conv_layer(b, "sem.head", deep, 1, 1, 1)?;
    let s_po = b.tape().sigmoid(logits);
    Ok((vec![f1, f2, f3, f4, deep], s_po))
}

/// Probability-map decoder: project every scale to a common width, fuse
/// coarse to fine, upsample to input resolution, and take the foreground
/// channel of a two-way softmax.
///
/// Returns (foreground map, both softmax channels).
pub fn fpm_module(
    b: &mut Binder,
    feats: &[ValueId],
    cfg: &ModelConfig,
) -> Result<(ValueId, ValueId)> {
    if !cfg.use_fpm {
        return Err(Error::InvalidArgument(
            "fpm_module called with use_fpm disabled; substitute a constant map instead".into(),
        ));
    }
    if feats.len() != 5 {
        return Err(Error::InvalidArgument(format!(
            "fpm_module expects 5 scale features, got {}",
            feats.len()
        )));
    }
    let fc = cfg.fpm_channels;
    let mut proj = Vec::with_capacity(5);
    for (i, &f) in feats.iter().enumerate() {
        proj.push(conv_layer(b, &format!("fpm.proj{}", i + 1), f, fc, 1, 1)?);
    }
    // stages 4 and 5 share the 1/16 scale: fuse without upsampling
    let cat = b.tape().concat_channels(&[proj[4], proj[3]])?;
    let mut d = conv_block(b, "fpm.fuse1", cat, fc, 3, 1)?;
    d = up_stage(b, "fpm.fuse2", d, &[proj[2]], fc, 3, UpsampleMode::Bilinear)?;
    d = up_stage(b, "fpm.fuse3", d, &[proj[1]], fc, 3, UpsampleMode::Bilinear)?;
    d = up_stage(b, "fpm.fuse4", d, &[proj[0]], fc, 3, UpsampleMode::Bilinear)?;
    let full = b.tape().upsample(d, 2, UpsampleMode::Bilinear)?;
    let logits = conv_layer(b, "fpm.head", full, 2, 1, 1)?;
    let probs = b.tape().channel_softmax(logits)?;
    let f_p = b.tape().slice_channels(probs, 0, 1)?;
    Ok((f_p, probs))
}

/// Detail branch: runs on the 6-channel stack of the image and the replicated
/// probability map, reuses the stride-2 low-level feature, and descends once
/// more before decoding back with a skip link.
pub fn detail_branch(
    b: &mut Binder,
    image: ValueId,
    f_p: ValueId,
    low_level: ValueId,
    sp_deep: Option<ValueId>,
    cfg: &ModelConfig,
) -> Result<ValueId> {
    let fs = b.tape().shape(f_p);
    if fs.c != 1 {
        return Err(Error::ShapeMismatch {
            context: "detail branch probability map".into(),
            expected: "single channel".into(),
            found: fs.to_string(),
        });
    }
    let dw = cfg.encoder_channels[0];
    let f_p3 = b.tape().replicate3(f_p)?;
    let i_t = b.tape().concat_channels(&[image, f_p3])?;
    let t0 = down_stage(b, "det.down1", i_t, dw, 3)?;
    let cat = b.tape().concat_channels(&[t0, low_level])?;
    let t1 = conv_block(b, "det.fuse_low", cat, dw, 3, 1)?;
    let t2 = down_stage(b, "det.down2", t1, 2 * dw, 3)?;

    let mut skips = vec![t1];
    if let Some(sp) = sp_deep {
        // deepest feature sits at 1/16; the decoder works at 1/2
        let sp_up = b.tape().upsample(sp, 8, UpsampleMode::Bilinear)?;
        skips.push(sp_up);
    }
    let u1 = up_stage(b, "det.up1", t2, &skips, dw, 3, UpsampleMode::Bilinear)?;
    let full = b.tape().upsample(u1, 2, UpsampleMode::Bilinear)?;
    let logits = conv_layer(b, "det.head", full, 1, 3, 1)?;
    Ok(b.tape().sigmoid(logits))
}

/// Fusion branch: upsample the deepest semantic feature to full resolution,
/// concatenate the detail map, refine, and squash to the final matte.
pub fn fusion_branch(
    b: &mut Binder,
    sp_deep: ValueId,
    d_p: ValueId,
    cfg: &ModelConfig,
) -> Result<ValueId> {
    let ss = b.tape().shape(sp_deep);
    let ds = b.tape().shape(d_p);
    if ss.h == 0
        || !ds.h.is_multiple_of(ss.h)
        || !ds.w.is_multiple_of(ss.w)
        || ds.h / ss.h != ds.w / ss.w
    {
        return Err(Error::ShapeMismatch {
            context: "fusion branch upsample".into(),
            expected: format!("semantic feature dividing {}x{}", ds.h, ds.w),
            found: format!("{}x{}", ss.h, ss.w),
        });
    }
    let factor = ds.h / ss.h;
    let s_up = b.tape().upsample(sp_deep, factor, UpsampleMode::Bilinear)?;
    let cat = b.tape().concat_channels(&[s_up, d_p])?;
    let width = cfg.encoder_channels[0];
    let c1 = conv_block(b, "fus.conv1", cat, width, 1, 1)?;
    let c2 = conv_block(b, "fus.conv2", c1, width, 3, 1)?;
    let logits = conv_layer(b, "fus.head", c2, 1, 1, 1)?;
    Ok(b.tape().sigmoid(logits))
}

/// Full forward pass. With `use_fpm` off the detail branch receives a
/// constant 0.5 probability map in place of the decoder output.
pub fn forward(b: &mut Binder, image: ValueId, cfg: &ModelConfig) -> Result<ForwardOutputs> {
    cfg.validate()?;
    let (feats, s_po) = semantic_branch(b, image, cfg)?;
    let f_p = if cfg.use_fpm {
        fpm_module(b, &feats, cfg)?.0
    } else {
        let s = b.tape().shape(image);
        b.tape()
            .leaf(Tensor4::filled(Shape4::new(s.n, 1, s.h, s.w), 0.5))
    };
    let sp_feed = cfg.feed_sp_to_detail.then_some(feats[4]);
    let d_p = detail_branch(b, image, f_p, feats[0], sp_feed, cfg)?;
    let alpha_p = fusion_branch(b, feats[4], d_p, cfg)?;
    Ok(ForwardOutputs {
        s_po,
        f_p,
        d_p,
        alpha_p,
        feats,
    })
}

/// One inference pass outside any training loop: image in, matte out.
pub fn infer(store: &mut ParamStore, image: &Tensor4, cfg: &ModelConfig) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let mut b = Binder::new(store, &mut tape);
    let x = b.tape().leaf(image.clone());
    let out = forward(&mut b, x, cfg)?;
    Ok(tape.value(out.alpha_p).clone())
}
