//! The separation network: a strided 1-D conv encoder producing a learned
//! filterbank representation, a stack of dilated depthwise-separable conv
//! blocks that estimates one multiplicative mask per source, and a
//! transposed-conv decoder that overlap-adds masked representations back to
//! waveforms.

mod forward;
mod pinv;

pub use forward::{decode, encode, forward, forward_padded, separate_masks};
pub(crate) use forward::NORM_EPS;
pub use pinv::pinv_encoder_kernel;

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the encoder maps each waveform frame to filterbank coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Plain learned linear filterbank.
    Linear,
    /// Linear filterbank with coefficients clamped at zero.
    Relu,
    /// Pseudo-inverse of the decoder basis; the encoder then has no weights
    /// of its own and frame-wise decode(encode(x)) is the identity.
    Pinv,
}

/// Nonlinearity applied to the mask head output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Sigmoid,
    /// Softmax across sources; masks sum to one at every position.
    Softmax,
}

/// Normalization used throughout the mask estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// Statistics over all channels and frames. Non-causal.
    #[serde(rename = "gln")]
    Global,
    /// Prefix statistics per frame. Required for the causal variant.
    #[serde(rename = "cln")]
    Cumulative,
}

/// Architecture hyperparameters. Field names double as the JSON config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Filterbank size N: basis signals per frame.
    pub n_filters: usize,
    /// Frame length L in samples; frames advance by L/2 (50% overlap).
    pub filter_len: usize,
    /// Residual channel width B between blocks.
    pub bottleneck: usize,
    /// Channel width H inside each conv block.
    pub block_channels: usize,
    /// Skip-path width Sc; skip outputs of all blocks are summed.
    pub skip_channels: usize,
    /// Depthwise kernel length P.
    pub kernel: usize,
    /// Blocks per repeat X; block x uses dilation 2^x.
    pub blocks_per_repeat: usize,
    /// Repeat count R; the full stack has R*X blocks.
    pub repeats: usize,
    /// Number of sources C to separate.
    pub sources: usize,
    /// Causal variant: left-only conv padding and cumulative norm.
    pub causal: bool,
    pub encoder: EncoderKind,
    pub mask: MaskKind,
    pub norm: NormKind,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    /// The best-performing published configuration.
    fn default() -> Self {
        ModelConfig {
            n_filters: 512,
            filter_len: 16,
            bottleneck: 128,
            block_channels: 512,
            skip_channels: 128,
            kernel: 3,
            blocks_per_repeat: 8,
            repeats: 3,
            sources: 2,
            causal: false,
            encoder: EncoderKind::Linear,
            mask: MaskKind::Sigmoid,
            norm: NormKind::Global,
            sample_rate: 8000,
        }
    }
}

impl ModelConfig {
    /// Frame advance in samples.
    pub fn hop(&self) -> usize {
        self.filter_len / 2
    }

    pub fn num_blocks(&self) -> usize {
        self.repeats * self.blocks_per_repeat
    }

    /// Dilation of block `i` in the flat stack: 2^(i mod X).
    pub fn dilation(&self, i: usize) -> usize {
        1 << (i % self.blocks_per_repeat)
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("n_filters", self.n_filters),
            ("filter_len", self.filter_len),
            ("bottleneck", self.bottleneck),
            ("block_channels", self.block_channels),
            ("skip_channels", self.skip_channels),
            ("kernel", self.kernel),
            ("blocks_per_repeat", self.blocks_per_repeat),
            ("repeats", self.repeats),
            ("sources", self.sources),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if self.sample_rate == 0 {
            return Err(Error::Invalid("sample_rate must be positive".into()));
        }
        if self.filter_len % 2 != 0 {
            return Err(Error::Invalid(format!(
                "filter_len must be even for the half-frame hop, got {}",
                self.filter_len
            )));
        }
        if self.causal && self.norm != NormKind::Cumulative {
            return Err(Error::Invalid(
                "causal model requires norm = \"cln\"; global statistics look ahead".into(),
            ));
        }
        if !self.causal && self.norm != NormKind::Global {
            return Err(Error::Invalid(
                "non-causal model requires norm = \"gln\"".into(),
            ));
        }
        if self.encoder == EncoderKind::Pinv && self.mask != MaskKind::Softmax {
            return Err(Error::Invalid(
                "pinv encoder requires mask = \"softmax\"".into(),
            ));
        }
        // Blocks shorter than the dilated span would be all padding; no
        // config in use comes close, so only guard the arithmetic overflow.
        if self.blocks_per_repeat >= usize::BITS as usize {
            return Err(Error::Invalid(format!(
                "blocks_per_repeat {} overflows the dilation schedule",
                self.blocks_per_repeat
            )));
        }
        Ok(())
    }
}

/// Per-channel gain and shift of one normalization site.
#[derive(Clone, Debug)]
pub struct NormParams<E: Element = f32> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

/// Kernel and bias of a width-1 convolution (a per-frame linear map).
#[derive(Clone, Debug)]
pub struct PointwiseParams<E: Element = f32> {
    /// `[C_out, C_in, 1]`
    pub kernel: Tensor<E>,
    /// `[C_out]`
    pub bias: Tensor<E>,
}

/// One dilated conv block: pointwise in, depthwise, then pointwise residual
/// and skip projections, with a PReLU + norm after each of the first two.
#[derive(Clone, Debug)]
pub struct BlockParams<E: Element = f32> {
    pub pw_in: PointwiseParams<E>,
    pub alpha_in: Tensor<E>,
    pub norm_in: NormParams<E>,
    /// `[H, P]`, one P-tap filter per channel.
    pub depthwise: Tensor<E>,
    pub alpha_dw: Tensor<E>,
    pub norm_dw: NormParams<E>,
    pub pw_res: PointwiseParams<E>,
    pub pw_skip: PointwiseParams<E>,
}

/// All trainable tensors plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct ModelParams<E: Element = f32> {
    pub config: ModelConfig,
    /// `[N, L]` analysis filterbank. Absent for the pinv encoder, which
    /// derives its frame map from the decoder instead.
    pub encoder: Option<Tensor<E>>,
    /// Normalization of the encoder output, ahead of the bottleneck.
    pub input_norm: NormParams<E>,
    /// `[B, N, 1]` bottleneck projection.
    pub bottleneck: PointwiseParams<E>,
    pub blocks: Vec<BlockParams<E>>,
    /// PReLU ahead of the mask head.
    pub mask_alpha: Tensor<E>,
    /// `[C*N, Sc, 1]` mask head.
    pub mask_head: PointwiseParams<E>,
    /// `[N, L]` synthesis filterbank.
    pub decoder: Tensor<E>,
}

/// Exact trainable scalar count for a configuration; the checkpoint format
/// serializes precisely this many values.
pub fn param_count(config: &ModelConfig) -> usize {
    let (n, l) = (config.n_filters, config.filter_len);
    let (b, h, sc, p) = (
        config.bottleneck,
        config.block_channels,
        config.skip_channels,
        config.kernel,
    );
    let c = config.sources;
    let pw = |cout: usize, cin: usize| cout * cin + cout;
    let block = pw(h, b) + 1 + 2 * h + h * p + 1 + 2 * h + pw(b, h) + pw(sc, h);
    let encoder = if config.encoder == EncoderKind::Pinv { 0 } else { n * l };
    encoder
        + 2 * n
        + pw(b, n)
        + config.num_blocks() * block
        + 1
        + pw(c * n, sc)
        + n * l
}

/// Input span influencing one output frame, in seconds:
/// `1 + R*(P-1)*(2^X - 1)` frames, frames converted at hop L/2.
pub fn receptive_field(config: &ModelConfig) -> f64 {
    let frames = 1 + config.repeats * (config.kernel - 1) * ((1 << config.blocks_per_repeat) - 1);
    let samples = (frames - 1) * config.hop() + config.filter_len;
    samples as f64 / config.sample_rate as f64
}

fn uniform<E: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<E> {
    let a = (1.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| E::from_f64(rng.random_range(-a..a))).collect();
    Tensor::param(shape, data).expect("init shapes are valid")
}

fn fill<E: Element>(shape: Vec<usize>, v: f64) -> Tensor<E> {
    let numel = shape.iter().product();
    Tensor::param(shape, vec![E::from_f64(v); numel]).expect("init shapes are valid")
}

fn norm_init<E: Element>(channels: usize) -> NormParams<E> {
    NormParams { gamma: fill(vec![channels], 1.0), beta: fill(vec![channels], 0.0) }
}

fn pointwise_init<E: Element>(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
) -> PointwiseParams<E> {
    PointwiseParams {
        kernel: uniform(rng, vec![cout, cin, 1], cin),
        bias: fill(vec![cout], 0.0),
    }
}

/// Initialize all parameters. Kernels draw from uniform(-a, a) with
/// a = sqrt(1/fan_in), biases start at zero, norms at identity, PReLU slopes
/// at 0.25. Deterministic for a fixed seed.
pub fn build<E: Element>(config: &ModelConfig, seed: u64) -> Result<ModelParams<E>> {
    config.validate()?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let (n, l) = (config.n_filters, config.filter_len);
    let (b, h, sc, p) = (
        config.bottleneck,
        config.block_channels,
        config.skip_channels,
        config.kernel,
    );

    let encoder = match config.encoder {
        EncoderKind::Pinv => None,
        _ => Some(uniform(rng, vec![n, l], l)),
    };
    let input_norm = norm_init(n);
    let bottleneck = pointwise_init(rng, b, n);
    let blocks = (0..config.num_blocks())
        .map(|_| BlockParams {
            pw_in: pointwise_init(rng, h, b),
            alpha_in: fill(vec![1], 0.25),
            norm_in: norm_init(h),
            depthwise: uniform(rng, vec![h, p], p),
            alpha_dw: fill(vec![1], 0.25),
            norm_dw: norm_init(h),
            pw_res: pointwise_init(rng, b, h),
            pw_skip: pointwise_init(rng, sc, h),
        })
        .collect();
    let mask_alpha = fill(vec![1], 0.25);
    let mask_head = pointwise_init(rng, config.sources * n, sc);
    let decoder = uniform(rng, vec![n, l], n);

    Ok(ModelParams {
        config: config.clone(),
        encoder,
        input_norm,
        bottleneck,
        blocks,
        mask_alpha,
        mask_head,
        decoder,
    })
}

impl<E: Element> ModelParams<E> {
    /// All trainable tensors in canonical order. The checkpoint format, the
    /// optimizer state, and gradient traversal all follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        if let Some(e) = &self.encoder {
            out.push(("encoder.weight".to_string(), e));
        }
        out.push(("input_norm.gamma".to_string(), &self.input_norm.gamma));
        out.push(("input_norm.beta".to_string(), &self.input_norm.beta));
        out.push(("bottleneck.weight".to_string(), &self.bottleneck.kernel));
        out.push(("bottleneck.bias".to_string(), &self.bottleneck.bias));
        for (i, blk) in self.blocks.iter().enumerate() {
            let parts: [(&str, &Tensor<E>); 13] = [
                ("pw_in.weight", &blk.pw_in.kernel),
                ("pw_in.bias", &blk.pw_in.bias),
                ("prelu_in.alpha", &blk.alpha_in),
                ("norm_in.gamma", &blk.norm_in.gamma),
                ("norm_in.beta", &blk.norm_in.beta),
                ("depthwise.weight", &blk.depthwise),
                ("prelu_dw.alpha", &blk.alpha_dw),
                ("norm_dw.gamma", &blk.norm_dw.gamma),
                ("norm_dw.beta", &blk.norm_dw.beta),
                ("pw_res.weight", &blk.pw_res.kernel),
                ("pw_res.bias", &blk.pw_res.bias),
                ("pw_skip.weight", &blk.pw_skip.kernel),
                ("pw_skip.bias", &blk.pw_skip.bias),
            ];
            for (suffix, t) in parts {
                out.push((format!("block.{i}.{suffix}"), t));
            }
        }
        out.push(("mask.prelu.alpha".to_string(), &self.mask_alpha));
        out.push(("mask.head.weight".to_string(), &self.mask_head.kernel));
        out.push(("mask.head.bias".to_string(), &self.mask_head.bias));
        out.push(("decoder.weight".to_string(), &self.decoder));
        out
    }

    /// Mutable view in the same canonical order, for checkpoint loading and
    /// optimizer updates.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = Vec::new();
        if let Some(e) = &mut self.encoder {
            out.push(("encoder.weight".to_string(), e));
        }
        out.push(("input_norm.gamma".to_string(), &mut self.input_norm.gamma));
        out.push(("input_norm.beta".to_string(), &mut self.input_norm.beta));
        out.push(("bottleneck.weight".to_string(), &mut self.bottleneck.kernel));
        out.push(("bottleneck.bias".to_string(), &mut self.bottleneck.bias));
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let parts: [(&str, &mut Tensor<E>); 13] = [
                ("pw_in.weight", &mut blk.pw_in.kernel),
                ("pw_in.bias", &mut blk.pw_in.bias),
                ("prelu_in.alpha", &mut blk.alpha_in),
                ("norm_in.gamma", &mut blk.norm_in.gamma),
                ("norm_in.beta", &mut blk.norm_in.beta),
                ("depthwise.weight", &mut blk.depthwise),
                ("prelu_dw.alpha", &mut blk.alpha_dw),
                ("norm_dw.gamma", &mut blk.norm_dw.gamma),
                ("norm_dw.beta", &mut blk.norm_dw.beta),
                ("pw_res.weight", &mut blk.pw_res.kernel),
                ("pw_res.bias", &mut blk.pw_res.bias),
                ("pw_skip.weight", &mut blk.pw_skip.kernel),
                ("pw_skip.bias", &mut blk.pw_skip.bias),
            ];
            for (suffix, t) in parts {
                out.push((format!("block.{i}.{suffix}"), t));
            }
        }
        out.push(("mask.prelu.alpha".to_string(), &mut self.mask_alpha));
        out.push(("mask.head.weight".to_string(), &mut self.mask_head.kernel));
        out.push(("mask.head.bias".to_string(), &mut self.mask_head.bias));
        out.push(("decoder.weight".to_string(), &mut self.decoder));
        out
    }

    /// True if any parameter holds a non-finite value.
    pub fn any_non_finite(&self) -> Option<String> {
        for (name, t) in self.named_tensors() {
            if t.data().iter().any(|v| !v.to_f64().is_finite()) {
                return Some(name);
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            n_filters: 8,
            filter_len: 4,
            bottleneck: 4,
            block_channels: 8,
            skip_channels: 4,
            kernel: 3,
            blocks_per_repeat: 2,
            repeats: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn best_config_builds() {
        let p = build::<f32>(&ModelConfig::default(), 7).unwrap();
        assert_eq!(p.blocks.len(), 24);
        assert_eq!(p.decoder.shape(), &[512, 16]);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build::<f32>(&micro(), 42).unwrap();
        let b = build::<f32>(&micro(), 42).unwrap();
        for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(x.data(), y.data());
        }
        let c = build::<f32>(&micro(), 43).unwrap();
        assert_ne!(a.encoder.as_ref().unwrap().data(), c.encoder.as_ref().unwrap().data());
    }

    #[test]
    fn odd_filter_len_rejected() {
        let cfg = ModelConfig { filter_len: 15, ..micro() };
        let err = build::<f32>(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("filter_len"), "{err}");
    }

    #[test]
    fn causal_norm_consistency_enforced() {
        let cfg = ModelConfig { causal: true, ..micro() };
        assert!(build::<f32>(&cfg, 0).is_err());
        let cfg = ModelConfig { causal: true, norm: NormKind::Cumulative, ..micro() };
        assert!(build::<f32>(&cfg, 0).is_ok());
        let cfg = ModelConfig { norm: NormKind::Cumulative, ..micro() };
        assert!(build::<f32>(&cfg, 0).is_err());
    }

    #[test]
    fn pinv_forces_softmax_and_drops_encoder() {
        let cfg = ModelConfig { encoder: EncoderKind::Pinv, ..micro() };
        assert!(build::<f32>(&cfg, 0).is_err());
        let cfg = ModelConfig { encoder: EncoderKind::Pinv, mask: MaskKind::Softmax, ..micro() };
        let p = build::<f32>(&cfg, 0).unwrap();
        assert!(p.encoder.is_none());
        assert_eq!(param_count(&cfg) + 8 * 4, param_count(&micro()));
    }

    #[test]
    fn named_tensor_numels_sum_to_param_count() {
        for cfg in [micro(), ModelConfig::default()] {
            let p = build::<f32>(&cfg, 1).unwrap();
            let total: usize = p.named_tensors().iter().map(|(_, t)| t.numel()).sum();
            assert_eq!(total, param_count(&cfg));
            assert!(p.named_tensors().iter().all(|(_, t)| t.requires_grad()));
        }
    }

    #[test]
    fn param_count_hand_check_micro() {
        // encoder 32 + input norm 16 + bottleneck 4*8+4 = 36
        // per block: 8*4+8=40, +1, +16, 8*3=24, +1, +16, 4*8+4=36, 4*8+4=36 -> 170
        // 2 blocks = 340; mask 1 + (2*8)*4+16 = 81; decoder 32. Total 537.
        assert_eq!(param_count(&micro()), 537);
    }

    #[test]
    fn config_json_round_trip_and_unknown_key() {
        let cfg = ModelConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        let bad = r#"{"n_filters": 16, "filter_length": 8}"#;
        assert!(serde_json::from_str::<ModelConfig>(bad).is_err());
    }
}
