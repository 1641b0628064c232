//! The inference/training graph: encode, estimate masks, apply, decode.

use super::{EncoderKind, MaskKind, ModelParams, NormKind, NormParams, pinv_encoder_kernel};
use crate::signal::AudioClip;
use crate::tensor::{
    Conv1dSpec, Element, Tape, Tensor, conv1d, cumulative_layer_norm, global_layer_norm, mul,
    narrow, prelu, relu, reshape, sigmoid, softmax_sources, transposed_conv1d,
};
use crate::{Error, Result};

pub(crate) const NORM_EPS: f64 = 1e-8;

fn norm_op<E: Element>(
    tape: Option<&Tape<E>>,
    kind: NormKind,
    x: &Tensor<E>,
    np: &NormParams<E>,
) -> Result<Tensor<E>> {
    match kind {
        NormKind::Global => global_layer_norm(tape, x, &np.gamma, &np.beta, NORM_EPS),
        NormKind::Cumulative => cumulative_layer_norm(tape, x, &np.gamma, &np.beta, NORM_EPS),
    }
}

/// Frame the waveform `[1, T]` into the filterbank representation `[N, F]`,
/// F = (T - L)/(L/2) + 1 frames at 50% overlap.
pub fn encode<E: Element>(
    tape: Option<&Tape<E>>,
    params: &ModelParams<E>,
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    encode_padded(tape, params, x, 0)
}

/// `encode` with `pad_right` zeros appended inside the framing convolution,
/// so the padding participates in gradients without an explicit concat op.
pub(crate) fn encode_padded<E: Element>(
    tape: Option<&Tape<E>>,
    params: &ModelParams<E>,
    x: &Tensor<E>,
    pad_right: usize,
) -> Result<Tensor<E>> {
    let cfg = &params.config;
    if x.shape().len() != 2 || x.shape()[0] != 1 {
        return Err(Error::Shape(format!(
            "encode expects a [1, T] waveform, got {:?}",
            x.shape()
        )));
    }
    let l = cfg.filter_len;
    let t = x.shape()[1] + pad_right;
    if t < l {
        return Err(Error::Invalid(format!(
            "input of {} samples is shorter than one frame ({l} samples)",
            x.shape()[1]
        )));
    }
    let spec = Conv1dSpec { stride: cfg.hop(), pad_right, ..Conv1dSpec::default() };
    match cfg.encoder {
        EncoderKind::Linear | EncoderKind::Relu => {
            let u = params
                .encoder
                .as_ref()
                .expect("non-pinv params carry an encoder");
            let kernel = reshape(tape, u, vec![cfg.n_filters, 1, l])?;
            let w = conv1d(tape, x, &kernel, None, spec)?;
            if cfg.encoder == EncoderKind::Relu { relu(tape, &w) } else { Ok(w) }
        }
        EncoderKind::Pinv => {
            // Constant least-squares framing; gradients reach the decoder
            // matrix through the synthesis path only.
            let kernel = pinv_encoder_kernel(&params.decoder)?;
            conv1d(tape, x, &kernel, None, spec)
        }
    }
}

/// Estimate one mask per source from the filterbank representation:
/// `[N, F]` in, `[C, N, F]` out, every entry in [0, 1].
pub fn separate_masks<E: Element>(
    tape: Option<&Tape<E>>,
    params: &ModelParams<E>,
    w: &Tensor<E>,
) -> Result<Tensor<E>> {
    let cfg = &params.config;
    if w.shape().len() != 2 || w.shape()[0] != cfg.n_filters {
        return Err(Error::Shape(format!(
            "separate_masks expects [{}, F], got {:?}",
            cfg.n_filters,
            w.shape()
        )));
    }
    let frames = w.shape()[1];
    let pw = Conv1dSpec::default();

    let normed = norm_op(tape, cfg.norm, w, &params.input_norm)?;
    let mut y = conv1d(tape, &normed, &params.bottleneck.kernel, Some(&params.bottleneck.bias), pw)?;

    let mut skip_sum: Option<Tensor<E>> = None;
    for (i, blk) in params.blocks.iter().enumerate() {
        let d = cfg.dilation(i);
        let u = conv1d(tape, &y, &blk.pw_in.kernel, Some(&blk.pw_in.bias), pw)?;
        let u = prelu(tape, &u, &blk.alpha_in)?;
        let u = norm_op(tape, cfg.norm, &u, &blk.norm_in)?;

        // Dilated per-channel filtering at constant frame count. The causal
        // variant takes all its context from the left; otherwise the span
        // splits evenly (right side takes the odd sample if P-1 is odd).
        let span = (cfg.kernel - 1) * d;
        let spec = Conv1dSpec {
            dilation: d,
            groups: cfg.block_channels,
            pad_left: if cfg.causal { span } else { span / 2 },
            pad_right: if cfg.causal { 0 } else { span - span / 2 },
            ..Conv1dSpec::default()
        };
        let dw = reshape(tape, &blk.depthwise, vec![cfg.block_channels, 1, cfg.kernel])?;
        let v = conv1d(tape, &u, &dw, None, spec)?;
        let v = prelu(tape, &v, &blk.alpha_dw)?;
        let v = norm_op(tape, cfg.norm, &v, &blk.norm_dw)?;

        let res = conv1d(tape, &v, &blk.pw_res.kernel, Some(&blk.pw_res.bias), pw)?;
        y = crate::tensor::add(tape, &y, &res)?;
        let skip = conv1d(tape, &v, &blk.pw_skip.kernel, Some(&blk.pw_skip.bias), pw)?;
        skip_sum = Some(match skip_sum {
            None => skip,
            Some(acc) => crate::tensor::add(tape, &acc, &skip)?,
        });
    }

    let m = prelu(tape, &skip_sum.expect("at least one block"), &params.mask_alpha)?;
    let m = conv1d(tape, &m, &params.mask_head.kernel, Some(&params.mask_head.bias), pw)?;
    let m = reshape(tape, &m, vec![cfg.sources, cfg.n_filters, frames])?;
    match cfg.mask {
        MaskKind::Sigmoid => sigmoid(tape, &m),
        MaskKind::Softmax => softmax_sources(tape, &m),
    }
}

/// Synthesize a waveform from one masked representation `[N, F]`: transposed
/// convolution at stride L/2, then the overlapped halves are averaged (the
/// first and last L/2 samples are covered by a single window, everything
/// between by two). Output is `[1, (F-1)*L/2 + L]`.
pub fn decode<E: Element>(
    tape: Option<&Tape<E>>,
    params: &ModelParams<E>,
    d: &Tensor<E>,
) -> Result<Tensor<E>> {
    let cfg = &params.config;
    if d.shape().len() != 2 || d.shape()[0] != cfg.n_filters {
        return Err(Error::Shape(format!(
            "decode expects [{}, F], got {:?}",
            cfg.n_filters,
            d.shape()
        )));
    }
    let (l, h) = (cfg.filter_len, cfg.hop());
    let frames = d.shape()[1];
    let kernel = reshape(tape, &params.decoder, vec![cfg.n_filters, 1, l])?;
    let y = transposed_conv1d(tape, d, &kernel, h)?;

    let t_out = (frames - 1) * h + l;
    let mut cov = vec![E::from_f64(0.5); t_out];
    for v in &mut cov[..h] {
        *v = E::from_f64(1.0);
    }
    for v in &mut cov[frames * h..] {
        *v = E::from_f64(1.0);
    }
    let covinv = Tensor::from_vec(vec![1, t_out], cov)?;
    mul(tape, &y, &covinv)
}

/// Full separation graph on tensors: pad the waveform `[1, T]` to whole
/// hops (at least one frame), encode, mask, decode each source, and strip
/// the padding again. Returns C tensors of shape `[1, T]`.
pub fn forward_padded<E: Element>(
    tape: Option<&Tape<E>>,
    params: &ModelParams<E>,
    x: &Tensor<E>,
) -> Result<Vec<Tensor<E>>> {
    let cfg = &params.config;
    if x.shape().len() != 2 || x.shape()[0] != 1 {
        return Err(Error::Shape(format!(
            "forward expects a [1, T] waveform, got {:?}",
            x.shape()
        )));
    }
    let t = x.shape()[1];
    let t_pad = (t.div_ceil(cfg.hop()) * cfg.hop()).max(cfg.filter_len);

    let w = encode_padded(tape, params, x, t_pad - t)?;
    let frames = w.shape()[1];
    let masks = separate_masks(tape, params, &w)?;

    let mut outs = Vec::with_capacity(cfg.sources);
    for i in 0..cfg.sources {
        let mi = narrow(tape, &masks, 0, i, 1)?;
        let mi = reshape(tape, &mi, vec![cfg.n_filters, frames])?;
        let di = mul(tape, &w, &mi)?;
        let yi = decode(tape, params, &di)?;
        outs.push(narrow(tape, &yi, 1, 0, t)?);
    }
    Ok(outs)
}

/// Separate a mixture clip into C source estimates of equal length.
pub fn forward<E: Element>(params: &ModelParams<E>, mixture: &AudioClip) -> Result<Vec<AudioClip>> {
    let cfg = &params.config;
    if mixture.sample_rate != cfg.sample_rate {
        return Err(Error::Invalid(format!(
            "input sample rate {} does not match the model's {}",
            mixture.sample_rate, cfg.sample_rate
        )));
    }
    if mixture.is_empty() {
        return Err(Error::Invalid("cannot separate an empty clip".into()));
    }
    let data = mixture.samples.iter().map(|&v| E::from_f64(v as f64)).collect();
    let x = Tensor::from_vec(vec![1, mixture.len()], data)?;
    forward_padded(None, params, &x)?
        .into_iter()
        .map(|t| AudioClip::new(t.data().iter().map(|v| v.to_f64() as f32).collect(), cfg.sample_rate))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, build};

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

    fn ramp(t: usize) -> Tensor<f32> {
        let data: Vec<f32> = (0..t).map(|i| ((i * 29 % 23) as f32 - 11.0) * 0.05).collect();
        Tensor::from_vec(vec![1, t], data).unwrap()
    }

    #[test]
    fn frame_count_boundaries() {
        let p = build::<f32>(&micro(), 3).unwrap();
        // T = L gives exactly one frame, T = 2L gives three at hop L/2.
        assert_eq!(encode(None, &p, &ramp(4)).unwrap().shape(), &[8, 1]);
        assert_eq!(encode(None, &p, &ramp(8)).unwrap().shape(), &[8, 3]);
        assert!(encode(None, &p, &ramp(3)).is_err());
    }

    #[test]
    fn linear_encoder_matches_per_frame_matmul() {
        let p = build::<f32>(&micro(), 5).unwrap();
        let x = ramp(10);
        let w = encode(None, &p, &x).unwrap();
        let u = p.encoder.as_ref().unwrap().data();
        // 4 frames: starts 0, 2, 4, 6.
        assert_eq!(w.shape(), &[8, 4]);
        for n in 0..8 {
            for f in 0..4 {
                let mut acc = 0.0f64;
                for li in 0..4 {
                    acc += u[n * 4 + li] as f64 * x.data()[f * 2 + li] as f64;
                }
                let got = w.data()[n * 4 + f] as f64;
                assert!((got - acc).abs() < 1e-6, "w[{n},{f}] {got} vs {acc}");
            }
        }
    }

    #[test]
    fn relu_encoder_clamps() {
        let cfg = ModelConfig { encoder: EncoderKind::Relu, ..micro() };
        let p = build::<f32>(&cfg, 5).unwrap();
        let w = encode(None, &p, &ramp(16)).unwrap();
        assert!(w.data().iter().all(|&v| v >= 0.0));
        assert!(w.data().iter().any(|&v| v == 0.0), "some coefficient should clamp");
    }

    #[test]
    fn sigmoid_masks_in_unit_interval() {
        let p = build::<f32>(&micro(), 11).unwrap();
        let w = encode(None, &p, &ramp(20)).unwrap();
        let m = separate_masks(None, &p, &w).unwrap();
        assert_eq!(m.shape(), &[2, 8, 9]);
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_masks_sum_to_one_per_position() {
        let cfg = ModelConfig { mask: MaskKind::Softmax, ..micro() };
        let p = build::<f32>(&cfg, 11).unwrap();
        let w = encode(None, &p, &ramp(20)).unwrap();
        let m = separate_masks(None, &p, &w).unwrap();
        let (n, f) = (8, 9);
        for pos in 0..n * f {
            let s: f64 = (0..2).map(|c| m.data()[c * n * f + pos] as f64).sum();
            assert!((s - 1.0).abs() < 1e-6, "position {pos} sums to {s}");
        }
    }

    #[test]
    fn zero_mask_decodes_to_silence() {
        let p = build::<f32>(&micro(), 2).unwrap();
        let d = Tensor::from_vec(vec![8, 5], vec![0.0f32; 40]).unwrap();
        let y = decode(None, &p, &d).unwrap();
        assert_eq!(y.shape(), &[1, 12]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_matches_naive_overlap_add() {
        let p = build::<f32>(&micro(), 9).unwrap();
        let frames = 5;
        let d_data: Vec<f32> = (0..8 * frames).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
        let d = Tensor::from_vec(vec![8, frames], d_data.clone()).unwrap();
        let y = decode(None, &p, &d).unwrap();

        let v = p.decoder.data();
        let (l, h) = (4, 2);
        let t_out = (frames - 1) * h + l;
        let mut acc = vec![0.0f64; t_out];
        let mut cover = vec![0u32; t_out];
        for f in 0..frames {
            for li in 0..l {
                let mut s = 0.0f64;
                for n in 0..8 {
                    s += d_data[n * frames + f] as f64 * v[n * l + li] as f64;
                }
                acc[f * h + li] += s;
                cover[f * h + li] += 1;
            }
        }
        for i in 0..t_out {
            let expect = acc[i] / cover[i] as f64;
            let got = y.data()[i] as f64;
            assert!((got - expect).abs() < 1e-6, "sample {i}: {got} vs {expect}");
        }
    }

    #[test]
    fn pinv_autoencoder_reconstructs() {
        let cfg = ModelConfig {
            encoder: EncoderKind::Pinv,
            mask: MaskKind::Softmax,
            sources: 1,
            ..micro()
        };
        let p = build::<f32>(&cfg, 17).unwrap();
        let x = ramp(24);
        let w = encode(None, &p, &x).unwrap();
        let y = decode(None, &p, &w).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (i, (a, b)) in y.data().iter().zip(x.data()).enumerate() {
            assert!((a - b).abs() < 1e-4, "sample {i}: {a} vs {b}");
        }
    }

    #[test]
    fn forward_shapes_and_sanity() {
        let p = build::<f32>(&micro(), 23).unwrap();
        let clip = AudioClip::new((0..101).map(|i| (i as f32 * 0.7).sin() * 0.3).collect(), 8000).unwrap();
        let outs = forward::<f32>(&p, &clip).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(o.len(), 101);
            assert!(o.samples.iter().all(|v| v.is_finite()));
        }
        let wrong_rate = AudioClip::new(vec![0.1; 50], 16000).unwrap();
        assert!(forward::<f32>(&p, &wrong_rate).is_err());
    }

    #[test]
    fn causal_masks_ignore_future_frames() {
        let cfg = ModelConfig { causal: true, norm: NormKind::Cumulative, ..micro() };
        let p = build::<f32>(&cfg, 31).unwrap();
        let w = encode(None, &p, &ramp(40)).unwrap();
        let frames = w.shape()[1];
        let m = separate_masks(None, &p, &w).unwrap();

        // Perturb one frame of w; mask frames before it must be bit-equal.
        let f0 = 9;
        let mut wd = w.data().to_vec();
        for n in 0..8 {
            wd[n * frames + f0] += 0.5;
        }
        let w2 = Tensor::from_vec(vec![8, frames], wd).unwrap();
        let m2 = separate_masks(None, &p, &w2).unwrap();
        for c in 0..2 {
            for n in 0..8 {
                for f in 0..f0 {
                    let idx = (c * 8 + n) * frames + f;
                    assert_eq!(m.data()[idx].to_bits(), m2.data()[idx].to_bits());
                }
            }
        }
        // And the perturbation must actually reach later frames.
        assert_ne!(m.data(), m2.data());
    }
}
