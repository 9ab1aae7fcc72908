//! Corruption-aware Feature Completion.
//!
//! The completion stack runs after detection: the input is split into
//! intact and corrupted content by the (predicted or oracle) mask, encoded
//! into a corruption pyramid, hierarchically augmented against the
//! detector's foundational embeddings (mask-gated scale-wise
//! cross-attention with a learnable residual blend), completed by a
//! self-attention block into a preliminary feature, refined by a gated
//! mixture of residual experts prompted by shared corruption tokens,
//! channel-re-weighted against the adapted global corruption embedding,
//! and finally decoded into pixels which are composited into the intact
//! content. Unmasked pixels always pass through untouched.

mod blocks;

pub use blocks::{
    blend_residual, more_forward, resize_mask_bilinear, BlendParams, ChannelEnhance,
    CompletionBlock, Expert, GlobalAdapter, HierAugment, ScaBlock, VotingGate,
};

use ndarray::{Array2, Array3, Array4};

use crate::dac::DacModel;
use crate::encoders::{hwc_to_chw, EncoderConfig, GlobalEncode, GlobalEncoder};
use crate::error::{Error, Result};
use crate::nn::{chw_to_tokens, Conv2d, ParamBuilder, ParamId, ParamStore};
use crate::sideinfo::SideInfo;
use crate::tensor::{Tape, TensorRef};
use crate::videodata::{MaskSequence, VideoSequence};

/// Split a frame into intact and corrupted content: `x*(1-m)` and `x*m`.
/// For binary masks the two parts sum back to the input exactly.
pub fn split_by_mask(
    frame: &Array3<f64>,
    mask: &Array2<f64>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let fs = frame.shape();
    let ms = mask.shape();
    if fs[0] != ms[0] || fs[1] != ms[1] {
        return Err(Error::ShapeMismatch(format!(
            "split_by_mask: frame {:?} vs mask {:?}",
            fs, ms
        )));
    }
    let mut intact = frame.clone();
    let mut corrupted = frame.clone();
    for y in 0..fs[0] {
        for x in 0..fs[1] {
            let m = mask[[y, x]];
            for c in 0..3 {
                intact[[y, x, c]] = frame[[y, x, c]] * (1.0 - m);
                corrupted[[y, x, c]] = frame[[y, x, c]] * m;
            }
        }
    }
    Ok((intact, corrupted))
}

/// Structural configuration of the completion stack.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CfcConfig {
    /// Content-encoder pyramid (same ladder depth as the detector's).
    pub content_channels: Vec<usize>,
    /// Token width inside the completion/expert blocks.
    pub d_model: usize,
    /// Residual expert count N_e.
    pub n_experts: usize,
    /// Shared corruption prompt count.
    pub n_prompts: usize,
    /// Adapted global embedding width D_a.
    pub adapt_dim: usize,
    /// Attention width of the channel re-weighting block.
    pub enhance_dim: usize,
}

impl Default for CfcConfig {
    fn default() -> Self {
        CfcConfig {
            content_channels: vec![32, 64, 128],
            d_model: 64,
            n_experts: 2,
            n_prompts: 8,
            adapt_dim: 32,
            enhance_dim: 32,
        }
    }
}

/// Content encoder over the 6-channel [intact; corrupted] stack, mirroring
/// the detector's pyramid ladder.
pub struct ContentEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    refines: Vec<Conv2d>,
    s_levels: usize,
}

impl ContentEncoder {
    fn new(pb: &mut ParamBuilder, channels: &[usize], stride0: usize) -> Self {
        pb.scoped("content_enc", |pb| {
            let stem = Conv2d::new(pb, "stem", 6, channels[0], stride0, stride0, 0);
            let mut downs = Vec::new();
            let mut refines = vec![Conv2d::new(pb, "refine0", channels[0], channels[0], 3, 1, 1)];
            for j in 1..channels.len() {
                downs.push(Conv2d::new(
                    pb,
                    &format!("down{j}"),
                    channels[j - 1],
                    channels[j],
                    3,
                    2,
                    1,
                ));
                refines.push(Conv2d::new(
                    pb,
                    &format!("refine{j}"),
                    channels[j],
                    channels[j],
                    3,
                    1,
                    1,
                ));
            }
            ContentEncoder {
                stem,
                downs,
                refines,
                s_levels: channels.len(),
            }
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, stack6: TensorRef) -> Vec<TensorRef> {
        let mut levels = Vec::with_capacity(self.s_levels);
        let mut x = self.stem.forward(tape, store, stack6);
        x = tape.gelu(x);
        x = self.refines[0].forward(tape, store, x);
        levels.push(x);
        for j in 1..self.s_levels {
            let mut y = self.downs[j - 1].forward(tape, store, levels[j - 1]);
            y = tape.gelu(y);
            y = self.refines[j].forward(tape, store, y);
            levels.push(y);
        }
        levels
    }
}

/// Convolutional recovery head: upsample the refined feature back to pixel
/// resolution, fuse a full-resolution skip of the [intact; corrupted]
/// stack (the residual information surviving inside corrupted regions is
/// pixel-level evidence), and squash to `(0,1)` with a sigmoid.
pub struct RecoveryHead {
    convs: Vec<Conv2d>,
    skip: Conv2d,
    out: Conv2d,
    up_steps: usize,
}

impl RecoveryHead {
    fn new(pb: &mut ParamBuilder, c1: usize, stride0: usize) -> Self {
        let up_steps = stride0.trailing_zeros() as usize;
        pb.scoped("recovery", |pb| {
            let mut convs = Vec::new();
            let mut ch = c1;
            for i in 0..up_steps {
                let next = (ch / 2).max(8);
                let conv = Conv2d::new(pb, &format!("up{i}"), ch, next, 3, 1, 1);
                if i == up_steps - 1 {
                    // zero-init: recovery starts from the pixel-level
                    // residual skip, the completion path fades in
                    pb.store_mut().value_mut(conv.w).fill(0.0);
                }
                convs.push(conv);
                ch = next;
            }
            RecoveryHead {
                convs,
                skip: Conv2d::new(pb, "skip", 6, ch, 3, 1, 1),
                out: Conv2d::new(pb, "out", ch, 3, 1, 1, 0),
                up_steps,
            }
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feat: TensorRef,
        stack6: TensorRef,
    ) -> TensorRef {
        let mut x = feat;
        for conv in &self.convs {
            x = tape.upsample_nearest2(x);
            x = conv.forward(tape, store, x);
            x = tape.gelu(x);
        }
        let skip = self.skip.forward(tape, store, stack6);
        let skip = tape.gelu(skip);
        x = tape.add(x, skip);
        let raw = self.out.forward(tape, store, x);
        tape.sigmoid(raw)
    }

    pub fn up_steps(&self) -> usize {
        self.up_steps
    }
}

/// The full completion model.
pub struct CfcModel {
    pub config: CfcConfig,
    pub content_enc: ContentEncoder,
    pub ha: HierAugment,
    pub completion: CompletionBlock,
    pub experts: Vec<Expert>,
    pub prompts: ParamId,
    pub global_enc: Box<dyn GlobalEncode>,
    pub adapter: GlobalAdapter,
    pub gate: VotingGate,
    pub enhance: ChannelEnhance,
    pub recovery: RecoveryHead,
    stride0: usize,
    grid: usize,
}

impl CfcModel {
    /// `found_channels` is the detector pyramid ladder this model consumes;
    /// `encoder_cfg` supplies the shared structural dims.
    pub fn new(
        pb: &mut ParamBuilder,
        config: &CfcConfig,
        encoder_cfg: &EncoderConfig,
        found_channels: &[usize],
        input_h: usize,
        input_w: usize,
    ) -> Self {
        assert_eq!(
            config.content_channels.len(),
            found_channels.len(),
            "content pyramid depth must match detector pyramid"
        );
        let global_enc = Box::new(GlobalEncoder::new(pb, encoder_cfg));
        Self::with_global_encoder(
            pb,
            config,
            encoder_cfg,
            found_channels,
            input_h,
            input_w,
            global_enc,
        )
    }

    pub fn with_global_encoder(
        pb: &mut ParamBuilder,
        config: &CfcConfig,
        encoder_cfg: &EncoderConfig,
        found_channels: &[usize],
        input_h: usize,
        input_w: usize,
        global_enc: Box<dyn GlobalEncode>,
    ) -> Self {
        let c1 = config.content_channels[0];
        let stride0 = encoder_cfg.stride0;
        let grid = (input_h / stride0) * (input_w / stride0);
        let content_enc = ContentEncoder::new(pb, &config.content_channels, stride0);
        let ha = HierAugment::new(pb, "ha", &config.content_channels, found_channels);
        let completion = CompletionBlock::new(pb, "completion", c1, config.d_model, grid);
        let experts = (0..config.n_experts)
            .map(|i| Expert::new(pb, &format!("expert{i}"), c1, config.d_model))
            .collect();
        let prompts = pb.scoped("prompts", |pb| {
            pb.small_normal("shared", &[config.n_prompts, config.d_model], 0.5)
        });
        let adapter = GlobalAdapter::new(pb, "adapter", global_enc.dim(), config.adapt_dim);
        let gate = VotingGate::new(pb, "gate", config.adapt_dim, config.n_experts);
        let enhance = ChannelEnhance::new(pb, "enhance", c1, config.enhance_dim);
        let recovery = RecoveryHead::new(pb, c1, stride0);
        enhance.init_pass_through(pb.store_mut());
        CfcModel {
            config: config.clone(),
            content_enc,
            ha,
            completion,
            experts,
            prompts,
            global_enc,
            adapter,
            gate,
            enhance,
            recovery,
            stride0,
            grid,
        }
    }

    /// Encode one frame's intact/corrupted split into the content pyramid.
    /// Also returns the 6-channel input stack for downstream skips.
    fn encode_content(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &Array3<f64>,
        mask: &Array2<f64>,
    ) -> Result<(Vec<TensorRef>, TensorRef)> {
        let (intact, corrupted) = split_by_mask(frame, mask)?;
        let ic = hwc_to_chw(&intact);
        let cc = hwc_to_chw(&corrupted);
        let sh = ic.shape().to_vec();
        let mut stack = Array3::<f64>::zeros((6, sh[1], sh[2]));
        stack.slice_mut(ndarray::s![0..3, .., ..]).assign(&ic);
        stack.slice_mut(ndarray::s![3..6, .., ..]).assign(&cc);
        let t = tape.leaf(stack.into_dyn());
        Ok((self.content_enc.forward(tape, store, t), t))
    }

    /// Pooled 2x2 context tokens of one frame's finest content level.
    fn context_tokens(&self, tape: &mut Tape, level1: TensorRef) -> TensorRef {
        let sh = tape.shape(level1).to_vec();
        let pool = (sh[1] / 2).max(1);
        let pooled = tape.avg_pool2(level1, pool);
        chw_to_tokens(tape, pooled)
    }

    /// Adapted global corruption embedding and gate weights for a clip.
    /// `composite` is the corrupted-content composite of the middle local
    /// frame (`x * m`).
    pub fn clip_gate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        composite: &Array3<f64>,
    ) -> (TensorRef, TensorRef) {
        let g_in = tape.leaf(hwc_to_chw(composite).into_dyn());
        let raw = self.global_enc.encode_t(tape, store, g_in);
        let adapted = self.adapter.forward(tape, store, raw);
        let gate = self.gate.forward(tape, store, adapted);
        (adapted, gate)
    }

    /// Full completion forward for one local frame. `found_pyramid` holds
    /// the detector's refined levels (as constants when the detector is
    /// frozen), `context` the pooled clip tokens, `adapted`/`gate` the
    /// clip-level conditioning. Returns the recovered pixels `[3, H, W]`
    /// in (0,1).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_frame(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &Array3<f64>,
        mask: &Array2<f64>,
        found_pyramid: &[TensorRef],
        context: TensorRef,
        adapted: TensorRef,
        gate: TensorRef,
    ) -> Result<TensorRef> {
        let (corr_pyramid, stack6) = self.encode_content(tape, store, frame, mask)?;
        let fused = self
            .ha
            .forward(tape, store, &corr_pyramid, found_pyramid, mask);
        let f_b = self.completion.forward(tape, store, fused, context);
        let prompts = tape.param(store, self.prompts);
        let refined = more_forward(tape, &self.experts, store, f_b, prompts, gate);
        let enhanced = self.enhance.forward(tape, store, refined, adapted);
        Ok(self.recovery.forward(tape, store, enhanced, stack6))
    }

    /// Pooled context tokens over every frame of the clip (locals with
    /// their masks, non-locals as fully intact), in frame order.
    pub fn clip_context(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        locals: &VideoSequence,
        masks: &MaskSequence,
        nonlocals: &VideoSequence,
    ) -> Result<TensorRef> {
        let mut parts = Vec::new();
        for fi in 0..locals.len() {
            let frame = locals.frame(fi);
            let mask = masks.frame(fi);
            let (pyr, _) = self.encode_content(tape, store, &frame, &mask)?;
            parts.push(self.context_tokens(tape, pyr[0]));
        }
        let zero_mask = Array2::<f64>::zeros((nonlocals.height(), nonlocals.width()));
        for fi in 0..nonlocals.len() {
            let frame = nonlocals.frame(fi);
            let (pyr, _) = self.encode_content(tape, store, &frame, &zero_mask)?;
            parts.push(self.context_tokens(tape, pyr[0]));
        }
        Ok(tape.concat0(&parts))
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn stride0(&self) -> usize {
        self.stride0
    }
}

/// Trained model bundle used by recovery and evaluation.
pub struct Models<'a> {
    pub dac: &'a DacModel,
    pub dac_store: &'a ParamStore,
    pub cfc: &'a CfcModel,
    pub cfc_store: &'a ParamStore,
}

/// Recover a clip: detect (or take oracle) masks, complete features, and
/// composite recovered content into corrupted regions only. Pixels where
/// the mask is 0 equal the input exactly; all outputs lie in `[0, 1]`.
/// Returns the recovered sequence and the binary mask that drove it.
pub fn recover(
    frames: &VideoSequence,
    masks: Option<&MaskSequence>,
    sideinfo: &[SideInfo],
    nonlocals: &VideoSequence,
    models: &Models,
) -> Result<(VideoSequence, MaskSequence)> {
    let binary = match masks {
        Some(m) => {
            if !m.matches(frames) {
                return Err(Error::ShapeMismatch(
                    "recover: oracle masks do not match frames".into(),
                ));
            }
            if m.binary {
                m.clone()
            } else {
                m.threshold(models.dac.config.mask_threshold)
            }
        }
        None => models
            .dac
            .predict_binary_masks(models.dac_store, frames, sideinfo)?,
    };

    let (h, w) = (frames.height(), frames.width());
    let mut out = Array4::<f64>::zeros((frames.len(), h, w, 3));

    // clip-level conditioning from the middle local frame
    let mid = frames.len() / 2;
    let mid_frame = frames.frame(mid);
    let mid_mask = binary.frame(mid);
    let (_, composite) = split_by_mask(&mid_frame, &mid_mask)?;

    let mut tape = Tape::new();
    let (adapted, gate) = models.cfc.clip_gate(&mut tape, models.cfc_store, &composite);
    let context =
        models
            .cfc
            .clip_context(&mut tape, models.cfc_store, frames, &binary, nonlocals)?;

    for fi in 0..frames.len() {
        let frame = frames.frame(fi);
        let mask = binary.frame(fi);
        // detector pyramid enters the completion stack as constants
        let found: Vec<TensorRef> = {
            let mut inner = Tape::new();
            let o = models.dac.forward_frame(
                &mut inner,
                models.dac_store,
                &frame,
                &sideinfo[fi],
                None,
            )?;
            o.refined_levels
                .iter()
                .map(|&l| tape.leaf(inner.value(l).clone()))
                .collect()
        };
        let recovered = models.cfc.forward_frame(
            &mut tape,
            models.cfc_store,
            &frame,
            &mask,
            &found,
            context,
            adapted,
            gate,
        )?;
        let y_hat = tape.value(recovered);
        for y in 0..h {
            for x in 0..w {
                let m = mask[[y, x]];
                for c in 0..3 {
                    out[[fi, y, x, c]] = if m == 1.0 {
                        y_hat[[c, y, x]].clamp(0.0, 1.0)
                    } else {
                        frame[[y, x, c]]
                    };
                }
            }
        }
    }
    Ok((
        VideoSequence {
            frames: out,
            fps: frames.fps,
        },
        binary,
    ))
}

#[cfg(test)]
mod tests;
