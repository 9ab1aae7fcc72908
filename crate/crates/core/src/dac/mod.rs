//! Detect Any Corruption: the blind corruption detector.
//!
//! An encoder-prompting-neck-decoder stack. Frame features from the
//! multi-scale image encoder are enhanced in the neck by token-dictionary
//! cross-attention against a multi-domain prompt pool (motion-vector
//! tokens, a prediction-mode token, and learned corruption prompts), fused
//! through one self-attention block, and decoded into per-frame corruption
//! masks. The refined pyramid doubles as the corruption embedding consumed
//! by the completion stack.

mod loss;
mod metrics;
mod tdca;

pub use loss::{dac_loss, threshold_iou, DacLossWeights};
pub use metrics::{detection_metrics, DetectionReport};
pub use tdca::{l2_normalize_rows, TdcaBlock, TAU_MIN};

use ndarray::{Array3, ArrayD, IxDyn};

use crate::encoders::{
    hwc_to_chw, EncoderConfig, ImageEncode, ImageEncoder, TokenEncode, TokenEncoder,
};
use crate::error::{Error, Result};
use crate::nn::{
    chw_to_tokens, tokens_to_chw, Conv2d, CrossAttentionBlock, Linear, Mlp, ParamBuilder, ParamId,
    ParamStore, Proj, SelfAttentionBlock,
};
use crate::sideinfo::{encode_pred_mode, render_mv_map, SideInfo};
use crate::tensor::{Tape, TensorRef};
use crate::videodata::MaskSequence;

/// Weight of the decoder's block-pooled logit term relative to the
/// per-pixel term.
const CELL_SCALE: f64 = 3.0;

/// Provenance of a prompt-pool token group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenGroup {
    MotionVector,
    PredictionMode,
    Learned,
}

/// Multi-domain prompt pool on the tape: concatenated token groups with
/// provenance tags, in the fixed order (mv, pm, learned).
pub struct PromptPool {
    pub tokens: TensorRef,
    pub groups: Vec<(TokenGroup, usize)>,
}

impl PromptPool {
    pub fn size(&self) -> usize {
        self.groups.iter().map(|(_, n)| n).sum()
    }
}

/// Structural configuration of the detector.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DacConfig {
    pub encoder: EncoderConfig,
    /// Number of self-updated corruption prompts N_p.
    pub n_prompts: usize,
    /// Mask decoder width.
    pub decoder_dim: usize,
    /// Input resolution the model is built for (positional tables).
    pub input_h: usize,
    pub input_w: usize,
    /// Motion-vector map blend ratio.
    pub eta: f64,
    /// Motion magnitude normalization (pixels); `inf` renders direction only.
    pub v_max: f64,
    pub loss: DacLossWeights,
    /// Sigmoid threshold for binary masks.
    pub mask_threshold: f64,
    /// Expected corrupted-area fraction; initializes the decoder's output
    /// bias at the matching logit.
    pub mask_prior: f64,
    /// Macroblock cell size for the decoder's block-pooled logit term
    /// (bitstream corruption aligns to the coding grid). Power of two,
    /// dividing the input dims.
    pub cell_pool: usize,
    /// EMA coefficient of the previous frame's finest-level features;
    /// 0 disables the temporal hook.
    pub temporal_ema: f64,
    /// Include motion-vector tokens in the prompt pool.
    pub use_mv_prompts: bool,
}

impl Default for DacConfig {
    fn default() -> Self {
        DacConfig {
            encoder: EncoderConfig::default(),
            n_prompts: 8,
            decoder_dim: 64,
            input_h: 64,
            input_w: 64,
            eta: 0.5,
            v_max: 16.0,
            loss: DacLossWeights::default(),
            mask_threshold: 0.5,
            mask_prior: 0.25,
            cell_pool: 16,
            temporal_ema: 0.0,
            use_mv_prompts: true,
        }
    }
}

impl DacConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_prompts < 1 {
            return Err(Error::Config("n_prompts must be >= 1".into()));
        }
        if !self.encoder.stride0.is_power_of_two() {
            return Err(Error::Config("stride0 must be a power of two".into()));
        }
        let div = self.encoder.required_divisor();
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by {div}",
                self.input_h, self.input_w
            )));
        }
        if !(0.0..=1.0).contains(&self.temporal_ema) {
            return Err(Error::Config("temporal_ema must be in [0,1]".into()));
        }
        if !self.cell_pool.is_power_of_two()
            || self.input_h % self.cell_pool != 0
            || self.input_w % self.cell_pool != 0
        {
            return Err(Error::Config(format!(
                "cell_pool {} must be a power of two dividing {}x{}",
                self.cell_pool, self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    fn grid_hw(&self) -> (usize, usize) {
        (
            self.input_h / self.encoder.stride0,
            self.input_w / self.encoder.stride0,
        )
    }
}

/// Cross-domain prompting neck: TDCA enhancement of the finest level, one
/// fused self-attention over [original; enhanced] tokens, residual
/// back-projection into every pyramid level.
pub struct DacNeck {
    pub tdca: TdcaBlock,
    in_proj: Proj,
    pos: ParamId,
    fuse: SelfAttentionBlock,
    back: Vec<Linear>,
    dim: usize,
}

impl DacNeck {
    fn new(pb: &mut ParamBuilder, config: &DacConfig, ladder: &[crate::encoders::LevelSpec]) -> Self {
        let d = config.encoder.token_dim;
        let (gh, gw) = config.grid_hw();
        pb.scoped("neck", |pb| DacNeck {
            tdca: TdcaBlock::new(pb, "tdca", d),
            in_proj: Proj::new(pb, "in_proj", ladder[0].channels, d),
            pos: pb.small_normal("pos", &[gh * gw, d], 0.02),
            fuse: SelfAttentionBlock::new(pb, "fuse", d),
            back: ladder
                .iter()
                .enumerate()
                .map(|(j, spec)| {
                    // zero-init: the neck starts as identity, the prompt
                    // delta grows in as it earns gradient
                    let lin = Linear::new(pb, &format!("back{j}"), d, spec.channels);
                    pb.store_mut().value_mut(lin.w).fill(0.0);
                    lin
                })
                .collect(),
            dim: d,
        })
    }

    /// Enhance a feature pyramid with the prompt pool. Output shapes equal
    /// input shapes level by level.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        levels: &[TensorRef],
        pool: &PromptPool,
    ) -> Vec<TensorRef> {
        let sh1 = tape.shape(levels[0]).to_vec();
        let (h1, w1) = (sh1[1], sh1[2]);
        let tokens = chw_to_tokens(tape, levels[0]); // [M, C1]
        let mut projected = self.in_proj.forward(tape, store, tokens); // [M, D]
        let pos = tape.param(store, self.pos);
        projected = tape.add(projected, pos);

        let enhanced = self.tdca.forward(tape, store, projected, pool.tokens);
        let stacked = tape.concat0(&[projected, enhanced]);
        let fused_all = self.fuse.forward(tape, store, stacked);
        let m = h1 * w1;
        let fused = tape.narrow0(fused_all, 0, m); // [M, D]

        let mut out = Vec::with_capacity(levels.len());
        for (j, &level) in levels.iter().enumerate() {
            let delta_tok = if j == 0 {
                fused
            } else {
                // strided pooling alignment down to level j's grid
                let map = tokens_to_chw(tape, fused, h1, w1); // [D, H1, W1]
                let pooled = tape.avg_pool2(map, 1 << j);
                chw_to_tokens(tape, pooled)
            };
            let delta = self.back[j].forward(tape, store, delta_tok); // [Mj, Cj]
            let shj = tape.shape(level).to_vec();
            let delta_map = tokens_to_chw(tape, delta, shj[1], shj[2]);
            out.push(tape.add(level, delta_map));
        }
        out
    }

    pub fn embed_dim(&self) -> usize {
        self.dim
    }

    /// Zero the residual back-projections, making the neck a no-op. Used by
    /// identity-wiring tests.
    pub fn zero_back_projections(&self, store: &mut ParamStore) {
        for lin in &self.back {
            store.value_mut(lin.w).fill(0.0);
            store.value_mut(lin.b).fill(0.0);
        }
    }
}

/// Mask decoder: learned mask/IoU tokens run two rounds of two-way
/// cross-attention against the finest-level features, then an upsampling
/// head — fed a full-resolution evidence skip from the input frame —
/// produces logits modulated by the mask token.
pub struct MaskDecoder {
    feat_proj: Proj,
    pos: ParamId,
    tokens: ParamId,
    t2f: Vec<CrossAttentionBlock>,
    f2t: Vec<CrossAttentionBlock>,
    up_convs: Vec<Conv2d>,
    skip: Conv2d,
    readout: Conv2d,
    iou_head: Mlp,
    up_steps: usize,
    cell_pool: usize,
}

impl MaskDecoder {
    fn new(pb: &mut ParamBuilder, config: &DacConfig, c1: usize) -> Self {
        let d = config.decoder_dim;
        let (gh, gw) = config.grid_hw();
        let up_steps = config.encoder.stride0.trailing_zeros() as usize;
        // start logits at the corruption prior instead of 0.5; the bias
        // reaches the logits once directly and once through the cell-mean
        // term, hence the (1 + cell_scale) division
        let p = config.mask_prior.clamp(1e-3, 1.0 - 1e-3);
        let prior_logit = (p / (1.0 - p)).ln() / (1.0 + CELL_SCALE);
        pb.scoped("decoder", |pb| {
            let mut up_convs = Vec::new();
            let mut ch = d;
            for i in 0..up_steps {
                let next = (ch / 2).max(4);
                let conv = Conv2d::new(pb, &format!("up{i}"), ch, next, 3, 1, 1);
                if i == up_steps - 1 {
                    // zero-init: early logits come from the evidence skip,
                    // the pyramid path fades in
                    pb.store_mut().value_mut(conv.w).fill(0.0);
                }
                up_convs.push(conv);
                ch = next;
            }
            MaskDecoder {
                feat_proj: Proj::new(pb, "feat_proj", c1, d),
                pos: pb.small_normal("pos", &[gh * gw, d], 0.02),
                tokens: pb.small_normal("tokens", &[2, d], 0.5),
                t2f: (0..2)
                    .map(|i| CrossAttentionBlock::new(pb, &format!("t2f{i}"), d, d, d))
                    .collect(),
                f2t: (0..2)
                    .map(|i| CrossAttentionBlock::new(pb, &format!("f2t{i}"), d, d, d))
                    .collect(),
                up_convs,
                skip: Conv2d::new(pb, "skip", 6, ch, 3, 1, 1),
                readout: {
                    let conv = Conv2d::new(pb, "readout", ch, 1, 1, 1, 0);
                    // start logits at the corruption prior
                    pb.store_mut().value_mut(conv.b).fill(prior_logit);
                    conv
                },
                iou_head: Mlp::new(pb, "iou", d, d, 1),
                up_steps,
                cell_pool: config.cell_pool,
            }
        })
    }

    /// Returns `(logits [H, W], iou_pred [1] in (0,1))`. `evidence` is the
    /// `[6, H, W]` stack of the input frame and its rendered motion-vector
    /// map, the full-resolution skip into the upsampling head.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        finest: TensorRef,
        evidence: TensorRef,
    ) -> (TensorRef, TensorRef) {
        let sh = tape.shape(finest).to_vec();
        let (h1, w1) = (sh[1], sh[2]);
        let feat_tokens = chw_to_tokens(tape, finest);
        let mut feats = self.feat_proj.forward(tape, store, feat_tokens);
        let pos = tape.param(store, self.pos);
        feats = tape.add(feats, pos);
        let mut toks = tape.param(store, self.tokens);
        for i in 0..2 {
            toks = self.t2f[i].forward(tape, store, toks, feats);
            feats = self.f2t[i].forward(tape, store, feats, toks);
        }
        // upsampling head back to input resolution
        let mut map = tokens_to_chw(tape, feats, h1, w1);
        for conv in &self.up_convs {
            map = tape.upsample_nearest2(map);
            map = conv.forward(tape, store, map);
            map = tape.gelu(map);
        }
        // full-resolution evidence: textural corruption cues live above the
        // pyramid's finest grid, and aberrant motion-vector colors mark
        // damaged macroblocks directly
        let skip = self.skip.forward(tape, store, evidence);
        let skip = tape.gelu(skip);
        map = tape.add(map, skip);
        // per-pixel readout; the mask token has already steered the
        // feature map through the two-way blocks
        let raw = self.readout.forward(tape, store, map); // [1, H, W]
        // block-pooled term: corruption decodes along the macroblock grid,
        // so cell-mean evidence sharpens region boundaries
        let cell = tape.avg_pool2(raw, self.cell_pool);
        let mut cell_up = cell;
        for _ in 0..self.cell_pool.trailing_zeros() {
            cell_up = tape.upsample_nearest2(cell_up);
        }
        // the cell term dominates so threshold crossings are block-level
        // decisions; the pixel term refines within blocks
        let cell_scaled = tape.scale(cell_up, CELL_SCALE);
        let combined = tape.add(raw, cell_scaled);
        let (h, w) = (h1 << self.up_steps, w1 << self.up_steps);
        let logits = tape.reshape(combined, &[h, w]);

        let iou_tok = tape.narrow0(toks, 1, 1);
        let iou_raw = self.iou_head.forward(tape, store, iou_tok); // [1,1]
        let iou_flat = tape.reshape(iou_raw, &[1]);
        let iou = tape.sigmoid(iou_flat);
        (logits, iou)
    }
}

/// Full detector output for one frame.
pub struct DacFrameOutput {
    pub refined_levels: Vec<TensorRef>,
    pub logits: TensorRef,
    pub iou_pred: TensorRef,
}

/// The Detect Any Corruption model.
pub struct DacModel {
    pub config: DacConfig,
    pub image_enc: Box<dyn ImageEncode>,
    pub token_enc: Box<dyn TokenEncode>,
    pub pm_tokenizer: Linear,
    pub learned_prompts: ParamId,
    pub neck: DacNeck,
    pub decoder: MaskDecoder,
}

impl DacModel {
    /// Build with the reference encoders.
    pub fn new(pb: &mut ParamBuilder, config: &DacConfig) -> Self {
        config.validate().expect("invalid dac config");
        let image_enc = Box::new(ImageEncoder::new(pb, &config.encoder));
        let token_enc = Box::new(TokenEncoder::new(pb, &config.encoder));
        Self::with_encoders(pb, config, image_enc, token_enc)
    }

    /// Build around externally supplied encoders (foundation-model adapters
    /// or mocks); only the shape contracts matter.
    pub fn with_encoders(
        pb: &mut ParamBuilder,
        config: &DacConfig,
        image_enc: Box<dyn ImageEncode>,
        token_enc: Box<dyn TokenEncode>,
    ) -> Self {
        config.validate().expect("invalid dac config");
        let ladder = image_enc.ladder();
        let d = config.encoder.token_dim;
        assert_eq!(token_enc.token_dim(), d, "token encoder width must match neck width");
        let pm_tokenizer = Linear::new(pb, "pm_tokenizer", 3, d);
        let learned_prompts =
            pb.scoped("prompts", |pb| pb.small_normal("learned", &[config.n_prompts, d], 0.5));
        let neck = DacNeck::new(pb, config, &ladder);
        let decoder = MaskDecoder::new(pb, config, ladder[0].channels);
        DacModel {
            config: config.clone(),
            image_enc,
            token_enc,
            pm_tokenizer,
            learned_prompts,
            neck,
            decoder,
        }
    }

    /// Assemble the prompt pool in the fixed order (mv, pm, learned).
    pub fn build_prompt_pool(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mv_tokens: Option<TensorRef>,
        pm_one_hot: &[f64; 3],
    ) -> PromptPool {
        let mut parts = Vec::new();
        let mut groups = Vec::new();
        if let Some(mv) = mv_tokens {
            assert_eq!(
                tape.shape(mv)[1],
                self.neck.embed_dim(),
                "mv token width mismatch"
            );
            groups.push((TokenGroup::MotionVector, tape.shape(mv)[0]));
            parts.push(mv);
        }
        let pm_leaf =
            tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 3]), pm_one_hot.to_vec()).unwrap());
        let pm_token = self.pm_tokenizer.forward(tape, store, pm_leaf);
        groups.push((TokenGroup::PredictionMode, 1));
        parts.push(pm_token);
        let learned = tape.param(store, self.learned_prompts);
        groups.push((TokenGroup::Learned, self.config.n_prompts));
        parts.push(learned);
        PromptPool {
            tokens: tape.concat0(&parts),
            groups,
        }
    }

    /// Full forward for one frame. `frame` is `[H, W, 3]`; `prev_finest`
    /// carries the EMA state of the temporal hook when enabled.
    pub fn forward_frame(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &Array3<f64>,
        sideinfo: &SideInfo,
        prev_finest: Option<TensorRef>,
    ) -> Result<DacFrameOutput> {
        let sh = frame.shape();
        if sh[0] != self.config.input_h || sh[1] != self.config.input_w {
            return Err(Error::ShapeMismatch(format!(
                "frame {}x{} does not match model resolution {}x{}",
                sh[0], sh[1], self.config.input_h, self.config.input_w
            )));
        }
        let x = tape.leaf(hwc_to_chw(frame).into_dyn());
        let mut levels = self.image_enc.encode_t(tape, store, x);

        // optional temporal feature average across consecutive frames
        let c = self.config.temporal_ema;
        if c > 0.0 {
            if let Some(prev) = prev_finest {
                let scaled_prev = tape.scale(prev, c);
                let scaled_cur = tape.scale(levels[0], 1.0 - c);
                levels[0] = tape.add(scaled_cur, scaled_prev);
            }
        }

        let (mv_tokens, mv_chw) = if self.config.use_mv_prompts {
            let map = render_mv_map(sideinfo, frame, self.config.eta, self.config.v_max)?;
            let map_t = tape.leaf(hwc_to_chw(&map.image).into_dyn());
            // decoder evidence gets the pure direction/magnitude rendering
            // (eta = 1): aberrant vectors paint saturated cells, missing
            // ones paint black
            let pure = render_mv_map(sideinfo, frame, 1.0, self.config.v_max)?;
            (
                Some(self.token_enc.encode_t(tape, store, map_t)),
                hwc_to_chw(&pure.image),
            )
        } else {
            (None, Array3::zeros((3, sh[0], sh[1])))
        };
        let pm = encode_pred_mode(sideinfo.pred_mode);
        let pool = self.build_prompt_pool(tape, store, mv_tokens, &pm);
        let refined = self.neck.forward(tape, store, &levels, &pool);
        let evidence = {
            let frame_chw = hwc_to_chw(frame);
            let mut stack = Array3::<f64>::zeros((6, sh[0], sh[1]));
            stack.slice_mut(ndarray::s![0..3, .., ..]).assign(&frame_chw);
            stack.slice_mut(ndarray::s![3..6, .., ..]).assign(&mv_chw);
            tape.leaf(stack.into_dyn())
        };
        let (logits, iou_pred) = self.decoder.forward(tape, store, refined[0], evidence);
        Ok(DacFrameOutput {
            refined_levels: refined,
            logits,
            iou_pred,
        })
    }

    /// Inference: predict a soft mask sequence (values in `[0,1]`). Frames
    /// are processed independently in index order.
    pub fn predict_masks(
        &self,
        store: &ParamStore,
        frames: &crate::videodata::VideoSequence,
        sideinfo: &[SideInfo],
    ) -> Result<MaskSequence> {
        if sideinfo.len() != frames.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} sideinfo records for {} frames",
                sideinfo.len(),
                frames.len()
            )));
        }
        let (h, w) = (frames.height(), frames.width());
        let mut out = ndarray::Array3::<f64>::zeros((frames.len(), h, w));
        let mut prev: Option<ArrayD<f64>> = None;
        for fi in 0..frames.len() {
            let mut tape = Tape::new();
            let prev_ref = prev.as_ref().map(|p| tape.leaf(p.clone()));
            let frame = frames.frame(fi);
            let o = self.forward_frame(&mut tape, store, &frame, &sideinfo[fi], prev_ref)?;
            if self.config.temporal_ema > 0.0 {
                prev = Some(tape.value(o.refined_levels[0]).clone());
            }
            let logits = tape.value(o.logits);
            for y in 0..h {
                for x in 0..w {
                    out[[fi, y, x]] = crate::tensor::sigmoid_scalar(logits[[y, x]]);
                }
            }
        }
        MaskSequence::new_soft(out)
    }

    /// Binary masks at the configured threshold.
    pub fn predict_binary_masks(
        &self,
        store: &ParamStore,
        frames: &crate::videodata::VideoSequence,
        sideinfo: &[SideInfo],
    ) -> Result<MaskSequence> {
        Ok(self
            .predict_masks(store, frames, sideinfo)?
            .threshold(self.config.mask_threshold))
    }
}
