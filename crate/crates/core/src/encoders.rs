//! Pluggable visual encoders.
//!
//! Three encoder roles feed the detection and completion stacks: a
//! multi-scale image encoder (hierarchical pyramid), a token encoder for
//! motion-vector maps, and a global encoder producing one corruption
//! embedding per clip. Each role is a trait, so external foundation-model
//! adapters can slot in behind the same shape contracts; the reference
//! implementations here are small trainable networks that keep the whole
//! repo self-contained and CPU-testable.

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, Mlp, ParamBuilder, ParamStore};
use crate::sideinfo::MotionVectorMap;
use crate::tensor::{Tape, TensorRef};

/// Hierarchical feature pyramid: `S` maps, each level half the resolution
/// of the previous.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures {
    /// Level `j` is `[C_j, H_j, W_j]` with `H_{j+1} = H_j / 2`.
    pub levels: Vec<Array3<f64>>,
}

impl MultiScaleFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "pyramid needs S >= 2 levels, got {}",
                self.levels.len()
            )));
        }
        for w in self.levels.windows(2) {
            let (a, b) = (w[0].shape(), w[1].shape());
            if a[1] != 2 * b[1] || a[2] != 2 * b[2] {
                return Err(Error::ShapeMismatch(format!(
                    "pyramid ladder broken: {:?} then {:?}",
                    a, b
                )));
            }
        }
        if self.levels.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("pyramid contains non-finite values".into()));
        }
        Ok(())
    }
}

/// `[T, D]` token matrix.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
}

/// `[D_g]` global embedding vector.
#[derive(Clone, Debug)]
pub struct GlobalEmbedding {
    pub vector: Array1<f64>,
}

/// Channel count and total downsampling factor of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    pub channels: usize,
    pub down: usize,
}

/// Multi-scale image encoder interface.
pub trait ImageEncode: Send + Sync {
    fn ladder(&self) -> Vec<LevelSpec>;
    /// Encode a `[3, H, W]` tape tensor into pyramid levels.
    fn encode_t(&self, tape: &mut Tape, store: &ParamStore, frame: TensorRef) -> Vec<TensorRef>;
}

/// Token encoder interface for motion-vector maps.
pub trait TokenEncode: Send + Sync {
    fn token_dim(&self) -> usize;
    fn encode_t(&self, tape: &mut Tape, store: &ParamStore, map: TensorRef) -> TensorRef;
}

/// Global (clip-level) encoder interface.
pub trait GlobalEncode: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_t(&self, tape: &mut Tape, store: &ParamStore, frame: TensorRef) -> TensorRef;
}

/// Structural configuration shared by the reference encoders.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Pyramid depth S.
    pub s_levels: usize,
    /// Channels per level; length must equal `s_levels`.
    pub channels: Vec<usize>,
    /// Stride of the stem convolution (downsampling of level 1).
    pub stride0: usize,
    /// Patch size of the token encoder.
    pub patch: usize,
    /// Token/prompt embedding width D.
    pub token_dim: usize,
    /// Global embedding width D_g.
    pub global_dim: usize,
    /// Learned additive positional embeddings in the token encoder.
    pub positional: bool,
    /// Token count the positional table is built for (H/patch * W/patch).
    pub token_grid: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            s_levels: 3,
            channels: vec![32, 64, 128],
            stride0: 4,
            patch: 16,
            token_dim: 128,
            global_dim: 64,
            positional: true,
            token_grid: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_levels < 2 {
            return Err(Error::Config("s_levels must be >= 2".into()));
        }
        if self.channels.len() != self.s_levels {
            return Err(Error::Config(format!(
                "channels has {} entries for {} levels",
                self.channels.len(),
                self.s_levels
            )));
        }
        Ok(())
    }

    /// Input dims must be divisible by this for the pyramid to close.
    pub fn required_divisor(&self) -> usize {
        self.stride0 * (1 << (self.s_levels - 1))
    }
}

/// Reference multi-scale encoder: strided stem plus one refine conv per
/// level, GELU activations throughout.
pub struct ImageEncoder {
    pub config: EncoderConfig,
    stem: Conv2d,
    downs: Vec<Conv2d>,
    refines: Vec<Conv2d>,
}

impl ImageEncoder {
    pub fn new(pb: &mut ParamBuilder, config: &EncoderConfig) -> Self {
        config.validate().expect("invalid encoder config");
        pb.scoped("image_enc", |pb| {
            let stem = Conv2d::new(pb, "stem", 3, config.channels[0], config.stride0, config.stride0, 0);
            let mut downs = Vec::new();
            let mut refines = vec![Conv2d::new(
                pb,
                "refine0",
                config.channels[0],
                config.channels[0],
                3,
                1,
                1,
            )];
            for j in 1..config.s_levels {
                downs.push(Conv2d::new(
                    pb,
                    &format!("down{j}"),
                    config.channels[j - 1],
                    config.channels[j],
                    3,
                    2,
                    1,
                ));
                refines.push(Conv2d::new(
                    pb,
                    &format!("refine{j}"),
                    config.channels[j],
                    config.channels[j],
                    3,
                    1,
                    1,
                ));
            }
            ImageEncoder {
                config: config.clone(),
                stem,
                downs,
                refines,
            }
        })
    }

    /// Validate and encode a concrete `[H, W, 3]` frame.
    pub fn encode_image(&self, store: &ParamStore, frame: &Array3<f64>) -> Result<MultiScaleFeatures> {
        let sh = frame.shape();
        if sh.len() != 3 || sh[2] != 3 {
            return Err(Error::ShapeMismatch(format!("frame must be [H,W,3], got {sh:?}")));
        }
        let div = self.config.required_divisor();
        if sh[0] % div != 0 || sh[1] % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "frame dims {}x{} not divisible by {div}",
                sh[0], sh[1]
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(hwc_to_chw(frame).into_dyn());
        let levels = self.encode_t(&mut tape, store, x);
        let out = MultiScaleFeatures {
            levels: levels
                .iter()
                .map(|&l| {
                    tape.value(l)
                        .clone()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                })
                .collect(),
        };
        out.validate()?;
        Ok(out)
    }
}

impl ImageEncode for ImageEncoder {
    fn ladder(&self) -> Vec<LevelSpec> {
        (0..self.config.s_levels)
            .map(|j| LevelSpec {
                channels: self.config.channels[j],
                down: self.config.stride0 * (1 << j),
            })
            .collect()
    }

    fn encode_t(&self, tape: &mut Tape, store: &ParamStore, frame: TensorRef) -> Vec<TensorRef> {
        let mut levels = Vec::with_capacity(self.config.s_levels);
        let mut x = self.stem.forward(tape, store, frame);
        x = tape.gelu(x);
        x = self.refines[0].forward(tape, store, x);
        levels.push(x);
        for j in 1..self.config.s_levels {
            let mut y = self.downs[j - 1].forward(tape, store, levels[j - 1]);
            y = tape.gelu(y);
            y = self.refines[j].forward(tape, store, y);
            levels.push(y);
        }
        levels
    }
}

/// Reference token encoder: patchify, linear projection, optional learned
/// positional embedding, two-layer adaptation MLP with residual.
pub struct TokenEncoder {
    pub config: EncoderConfig,
    proj: Linear,
    pos: Option<crate::nn::ParamId>,
    adapt: Mlp,
}

impl TokenEncoder {
    pub fn new(pb: &mut ParamBuilder, config: &EncoderConfig) -> Self {
        pb.scoped("token_enc", |pb| {
            let patch_dim = 3 * config.patch * config.patch;
            let proj = Linear::new(pb, "proj", patch_dim, config.token_dim);
            let pos = if config.positional {
                Some(pb.small_normal("pos", &[config.token_grid, config.token_dim], 0.02))
            } else {
                None
            };
            let adapt = Mlp::new(pb, "adapt", config.token_dim, 2 * config.token_dim, config.token_dim);
            TokenEncoder {
                config: config.clone(),
                proj,
                pos,
                adapt,
            }
        })
    }

    /// Validate and encode a concrete motion-vector map.
    pub fn encode_tokens(&self, store: &ParamStore, map: &MotionVectorMap) -> Result<TokenSequence> {
        let sh = map.image.shape();
        if sh[0] % self.config.patch != 0 || sh[1] % self.config.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "map dims {}x{} not divisible by patch {}",
                sh[0], sh[1], self.config.patch
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(hwc_to_chw(&map.image).into_dyn());
        let tokens = self.encode_t(&mut tape, store, x);
        Ok(TokenSequence {
            tokens: tape
                .value(tokens)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap(),
        })
    }
}

impl TokenEncode for TokenEncoder {
    fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    fn encode_t(&self, tape: &mut Tape, store: &ParamStore, map: TensorRef) -> TensorRef {
        let p = self.config.patch;
        let cols = tape.im2col(map, p, p, p, 0); // [3*p*p, T]
        let patches = tape.transpose2(cols); // [T, 3*p*p]
        let mut tokens = self.proj.forward(tape, store, patches);
        if let Some(pos) = self.pos {
            let pe = tape.param(store, pos);
            let t_count = tape.shape(tokens)[0];
            assert_eq!(
                t_count,
                self.config.token_grid,
                "token count {} does not match positional table {}",
                t_count,
                self.config.token_grid
            );
            tokens = tape.add(tokens, pe);
        }
        let adapted = self.adapt.forward(tape, store, tokens);
        tape.add(tokens, adapted)
    }
}

/// Reference global encoder: small conv stack plus global average pooling.
pub struct GlobalEncoder {
    pub config: EncoderConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
}

impl GlobalEncoder {
    pub fn new(pb: &mut ParamBuilder, config: &EncoderConfig) -> Self {
        pb.scoped("global_enc", |pb| GlobalEncoder {
            config: config.clone(),
            conv1: Conv2d::new(pb, "conv1", 3, 16, 4, 4, 0),
            conv2: Conv2d::new(pb, "conv2", 16, 32, 3, 2, 1),
            head: Linear::new(pb, "head", 32, config.global_dim),
        })
    }

    pub fn encode_global(&self, store: &ParamStore, frame: &Array3<f64>) -> Result<GlobalEmbedding> {
        let sh = frame.shape();
        if sh.len() != 3 || sh[2] != 3 {
            return Err(Error::ShapeMismatch(format!("frame must be [H,W,3], got {sh:?}")));
        }
        if sh[0] % 8 != 0 || sh[1] % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "global encoder input {}x{} must be divisible by 8",
                sh[0], sh[1]
            )));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(hwc_to_chw(frame).into_dyn());
        let v = self.encode_t(&mut tape, store, x);
        Ok(GlobalEmbedding {
            vector: tape
                .value(v)
                .clone()
                .into_shape_with_order(IxDyn(&[self.config.global_dim]))
                .unwrap()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
        })
    }
}

impl GlobalEncode for GlobalEncoder {
    fn dim(&self) -> usize {
        self.config.global_dim
    }

    fn encode_t(&self, tape: &mut Tape, store: &ParamStore, frame: TensorRef) -> TensorRef {
        let mut x = self.conv1.forward(tape, store, frame);
        x = tape.gelu(x);
        x = self.conv2.forward(tape, store, x);
        x = tape.gelu(x);
        // global average pool: [C,H,W] -> [1,C]
        let sh = tape.shape(x).to_vec();
        let flat = tape.reshape(x, &[sh[0], sh[1] * sh[2]]);
        let sums = tape.sum_cols(flat);
        let pooled = tape.scale(sums, 1.0 / (sh[1] * sh[2]) as f64);
        let row = tape.transpose2(pooled); // [1, C]
        self.head.forward(tape, store, row)
    }
}

/// Constant-output encoder used to prove interface substitutability: any
/// consumer that honors the shape contracts must run with it unmodified.
pub struct MockConstantEncoder {
    pub ladder_spec: Vec<LevelSpec>,
    pub fill: f64,
}

impl ImageEncode for MockConstantEncoder {
    fn ladder(&self) -> Vec<LevelSpec> {
        self.ladder_spec.clone()
    }

    fn encode_t(&self, tape: &mut Tape, _store: &ParamStore, frame: TensorRef) -> Vec<TensorRef> {
        let sh = tape.shape(frame).to_vec();
        self.ladder_spec
            .iter()
            .map(|spec| {
                tape.leaf(ArrayD::from_elem(
                    IxDyn(&[spec.channels, sh[1] / spec.down, sh[2] / spec.down]),
                    self.fill,
                ))
            })
            .collect()
    }
}

/// `[H, W, 3]` to `[3, H, W]`.
pub fn hwc_to_chw(frame: &Array3<f64>) -> Array3<f64> {
    let sh = frame.shape();
    let mut out = Array3::<f64>::zeros((sh[2], sh[0], sh[1]));
    for y in 0..sh[0] {
        for x in 0..sh[1] {
            for c in 0..sh[2] {
                out[[c, y, x]] = frame[[y, x, c]];
            }
        }
    }
    out
}

/// `[3, H, W]` to `[H, W, 3]`.
pub fn chw_to_hwc(frame: &Array3<f64>) -> Array3<f64> {
    let sh = frame.shape();
    let mut out = Array3::<f64>::zeros((sh[1], sh[2], sh[0]));
    for c in 0..sh[0] {
        for y in 0..sh[1] {
            for x in 0..sh[2] {
                out[[y, x, c]] = frame[[c, y, x]];
            }
        }
    }
    out
}
