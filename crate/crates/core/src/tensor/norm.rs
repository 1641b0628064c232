//! Global and cumulative layer normalization over `[N, T]` feature maps.
//!
//! Both normalize with a scalar mean/variance pair and then apply
//! per-channel gain `gamma` and shift `beta` (each of `N` elements). The
//! global variant pools statistics over all `N*T` entries; the cumulative
//! variant normalizes frame `k` with statistics over frames `0..=k` only,
//! which is what makes it usable in the causal/streaming configuration.
//! Statistics accumulate in f64 in frame-major order; the streaming engine
//! reproduces the same order, so offline and streamed outputs agree.

use super::{Element, Tape, Tensor};
use crate::{Error, Result};

fn check_norm_args<E: Element>(
    op: &str,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<(usize, usize)> {
    if x.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "{op}: input must be [N,T], got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    if gamma.numel() != n || beta.numel() != n {
        return Err(Error::Shape(format!(
            "{op}: gamma/beta need {n} elements, got {} and {}",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok((n, x.shape()[1]))
}

/// Layer norm with mean/variance over all `N*T` entries. A constant input
/// returns `beta` exactly.
pub fn global_layer_norm<E: Element>(
    tape: Option<&Tape<E>>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let (n, t) = check_norm_args("global_layer_norm", x, gamma, beta)?;
    let m = (n * t) as f64;

    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x.data() {
        let v = v.to_f64();
        sum += v;
        sumsq += v * v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    // Exact-equality check forces the zero-variance branch so a constant
    // input maps to beta exactly instead of beta plus rounding noise.
    let (mu, var) = if lo == hi {
        (lo, 0.0)
    } else {
        let mu = sum / m;
        (mu, (sumsq / m - mu * mu).max(0.0))
    };
    let s = (var + eps).sqrt();

    let mut data = Vec::with_capacity(n * t);
    for c in 0..n {
        let g = gamma.data()[c].to_f64();
        let b = beta.data()[c].to_f64();
        for i in 0..t {
            let xv = x.data()[c * t + i].to_f64();
            let xh = if var == 0.0 { 0.0 } else { (xv - mu) / s };
            data.push(E::from_f64(g * xh + b));
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;

    if let Some(plan) = Tape::plan(tape, [x, gamma, beta]) {
        let [ix, ig, ib] = plan.ids;
        let [nx, ng, nb] = plan.need;
        let (xc, gc) = (x.clone(), gamma.clone());
        plan.finish(&out, move |g, grads| {
            // xh recomputed from captured stats; G = g * gamma per entry.
            let xhat = |c: usize, i: usize| {
                if var == 0.0 {
                    0.0
                } else {
                    (xc.data()[c * t + i].to_f64() - mu) / s
                }
            };
            if nb {
                let buf = grads.buf(ib, n);
                for c in 0..n {
                    buf[c] += g[c * t..(c + 1) * t].iter().sum::<f64>();
                }
            }
            if ng {
                let buf = grads.buf(ig, n);
                for c in 0..n {
                    let mut acc = 0.0;
                    for i in 0..t {
                        acc += g[c * t + i] * xhat(c, i);
                    }
                    buf[c] += acc;
                }
            }
            if nx {
                // dx = (G - mean(G) - xh * mean(G .* xh)) / s
                let mut mean_g = 0.0f64;
                let mut mean_gxh = 0.0f64;
                for c in 0..n {
                    let gam = gc.data()[c].to_f64();
                    for i in 0..t {
                        let gv = g[c * t + i] * gam;
                        mean_g += gv;
                        mean_gxh += gv * xhat(c, i);
                    }
                }
                mean_g /= m;
                mean_gxh /= m;
                let buf = grads.buf(ix, n * t);
                for c in 0..n {
                    let gam = gc.data()[c].to_f64();
                    for i in 0..t {
                        let gv = g[c * t + i] * gam;
                        buf[c * t + i] += (gv - mean_g - xhat(c, i) * mean_gxh) / s;
                    }
                }
            }
        });
    }
    Ok(out)
}

/// Causal layer norm: frame `k` is normalized by the mean/variance of the
/// `N*(k+1)` entries of frames `0..=k`, so each output frame depends only on
/// the past. Running sums are f64 and accumulate channel-major within each
/// frame, matching the streaming engine's update order exactly.
pub fn cumulative_layer_norm<E: Element>(
    tape: Option<&Tape<E>>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let (n, t) = check_norm_args("cumulative_layer_norm", x, gamma, beta)?;

    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut mu_k = vec![0.0f64; t];
    let mut s_k = vec![0.0f64; t];
    let mut var_zero = vec![false; t];
    for k in 0..t {
        for c in 0..n {
            let v = x.data()[c * t + k].to_f64();
            sum += v;
            sumsq += v * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let cnt = (n * (k + 1)) as f64;
        let (mu, var) = if lo == hi {
            (lo, 0.0)
        } else {
            let mu = sum / cnt;
            (mu, (sumsq / cnt - mu * mu).max(0.0))
        };
        mu_k[k] = mu;
        s_k[k] = (var + eps).sqrt();
        var_zero[k] = var == 0.0;
    }

    let mut data = vec![E::from_f64(0.0); n * t];
    for c in 0..n {
        let g = gamma.data()[c].to_f64();
        let b = beta.data()[c].to_f64();
        for k in 0..t {
            let xv = x.data()[c * t + k].to_f64();
            let xh = if var_zero[k] { 0.0 } else { (xv - mu_k[k]) / s_k[k] };
            data[c * t + k] = E::from_f64(g * xh + b);
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;

    if let Some(plan) = Tape::plan(tape, [x, gamma, beta]) {
        let [ix, ig, ib] = plan.ids;
        let [nx, ng, nb] = plan.need;
        let (xc, gc) = (x.clone(), gamma.clone());
        plan.finish(&out, move |g, grads| {
            let xhat = |c: usize, k: usize| {
                if var_zero[k] {
                    0.0
                } else {
                    (xc.data()[c * t + k].to_f64() - mu_k[k]) / s_k[k]
                }
            };
            if nb {
                let buf = grads.buf(ib, n);
                for c in 0..n {
                    buf[c] += g[c * t..(c + 1) * t].iter().sum::<f64>();
                }
            }
            if ng {
                let buf = grads.buf(ig, n);
                for c in 0..n {
                    let mut acc = 0.0;
                    for k in 0..t {
                        acc += g[c * t + k] * xhat(c, k);
                    }
                    buf[c] += acc;
                }
            }
            if nx {
                // Frame k's statistics see frames j <= k, so grad at frame j
                // collects suffix sums over k >= j:
                //   dx[m,j] = G[m,j]/s_j - S1_j - x[m,j]*S2_j + S3_j
                // with per-frame a_k = sum_n G[n,k], b_k = sum_n G[n,k]*(x-mu_k),
                //   S1_j = sum_{k>=j} a_k/(cnt_k s_k),
                //   S2_j = sum_{k>=j} b_k/(cnt_k s_k^3),
                //   S3_j = sum_{k>=j} mu_k b_k/(cnt_k s_k^3).
                let mut a = vec![0.0f64; t];
                let mut b = vec![0.0f64; t];
                for k in 0..t {
                    let mut ak = 0.0;
                    let mut bk = 0.0;
                    for c in 0..n {
                        let gv = g[c * t + k] * gc.data()[c].to_f64();
                        ak += gv;
                        bk += gv * (xc.data()[c * t + k].to_f64() - mu_k[k]);
                    }
                    a[k] = ak;
                    b[k] = bk;
                }
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                let mut s3 = 0.0f64;
                let mut s1_j = vec![0.0f64; t];
                let mut s2_j = vec![0.0f64; t];
                let mut s3_j = vec![0.0f64; t];
                for k in (0..t).rev() {
                    let cnt = (n * (k + 1)) as f64;
                    let sk = s_k[k];
                    s1 += a[k] / (cnt * sk);
                    let w = b[k] / (cnt * sk * sk * sk);
                    s2 += w;
                    s3 += mu_k[k] * w;
                    s1_j[k] = s1;
                    s2_j[k] = s2;
                    s3_j[k] = s3;
                }
                let buf = grads.buf(ix, n * t);
                for c in 0..n {
                    let gam = gc.data()[c].to_f64();
                    for k in 0..t {
                        let gv = g[c * t + k] * gam;
                        buf[c * t + k] += gv / s_k[k] - s1_j[k]
                            - xc.data()[c * t + k].to_f64() * s2_j[k]
                            + s3_j[k];
                    }
                }
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-8;

    fn ones(n: usize) -> Tensor<f32> {
        Tensor::from_vec(vec![n], vec![1.0; n]).unwrap()
    }

    fn zeros(n: usize) -> Tensor<f32> {
        Tensor::from_vec(vec![n], vec![0.0; n]).unwrap()
    }

    #[test]
    fn already_normalized_input_is_fixed_point() {
        // [[1,-1],[-1,1]] has mean 0 and population variance 1.
        let x = Tensor::from_vec(vec![2, 2], vec![1.0f32, -1.0, -1.0, 1.0]).unwrap();
        let y = global_layer_norm(None, &x, &ones(2), &zeros(2), EPS).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_input_returns_beta_exactly() {
        let x = Tensor::from_vec(vec![2, 3], vec![4.25f32; 6]).unwrap();
        let beta = Tensor::from_vec(vec![2], vec![5.0f32, -1.5]).unwrap();
        let y = global_layer_norm(None, &x, &ones(2), &beta, EPS).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0, -1.5, -1.5, -1.5]);
        let yc = cumulative_layer_norm(None, &x, &ones(2), &beta, EPS).unwrap();
        assert_eq!(yc.data(), &[5.0, 5.0, 5.0, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn output_moments_are_standardized() {
        let mut v = Vec::new();
        for i in 0..8 * 16 {
            v.push(((i * 2654435761usize % 1000) as f32 / 500.0) - 1.0 + (i as f32 * 0.01).sin());
        }
        let x = Tensor::from_vec(vec![8, 16], v).unwrap();
        let y = global_layer_norm(None, &x, &ones(8), &zeros(8), EPS).unwrap();
        let m = y.data().iter().map(|&v| v as f64).sum::<f64>() / 128.0;
        let var = y.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 128.0;
        assert!(m.abs() < 1e-5, "mean {m}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }

    #[test]
    fn cumulative_single_frame_equals_global() {
        let x = Tensor::from_vec(vec![3, 1], vec![0.3f32, -1.2, 2.0]).unwrap();
        let g = Tensor::from_vec(vec![3], vec![1.1f32, 0.9, 1.3]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![0.1f32, -0.2, 0.0]).unwrap();
        let yg = global_layer_norm(None, &x, &g, &b, EPS).unwrap();
        let yc = cumulative_layer_norm(None, &x, &g, &b, EPS).unwrap();
        assert_eq!(yg.data(), yc.data());
    }

    #[test]
    fn cumulative_ignores_future_frames() {
        let data: Vec<f32> = (0..4 * 10).map(|i| ((i * 31 % 17) as f32 - 8.0) * 0.21).collect();
        let x = Tensor::from_vec(vec![4, 10], data.clone()).unwrap();
        let y = cumulative_layer_norm(None, &x, &ones(4), &zeros(4), EPS).unwrap();

        // Zero out frames 6.. and re-run; frames 0..6 must be bit-identical.
        let mut data2 = data;
        for c in 0..4 {
            for k in 6..10 {
                data2[c * 10 + k] = 0.0;
            }
        }
        let x2 = Tensor::from_vec(vec![4, 10], data2).unwrap();
        let y2 = cumulative_layer_norm(None, &x2, &ones(4), &zeros(4), EPS).unwrap();
        for c in 0..4 {
            for k in 0..6 {
                assert_eq!(y.data()[c * 10 + k].to_bits(), y2.data()[c * 10 + k].to_bits());
            }
        }
    }

    #[test]
    fn cumulative_matches_truncated_global_per_frame() {
        // Frame k of cLN equals the last frame of gLN applied to x[:, ..=k].
        let data: Vec<f32> = (0..4 * 10)
            .map(|i| ((i * 131 % 97) as f32 / 48.5 - 1.0) * 1.7)
            .collect();
        let x = Tensor::from_vec(vec![4, 10], data.clone()).unwrap();
        let g = Tensor::from_vec(vec![4], vec![1.2f32, 0.8, 1.0, -0.5]).unwrap();
        let b = Tensor::from_vec(vec![4], vec![0.0f32, 0.3, -0.1, 0.2]).unwrap();
        let y = cumulative_layer_norm(None, &x, &g, &b, EPS).unwrap();
        for k in 0..10 {
            let mut trunc = Vec::new();
            for c in 0..4 {
                trunc.extend_from_slice(&data[c * 10..c * 10 + k + 1]);
            }
            let xt = Tensor::from_vec(vec![4, k + 1], trunc).unwrap();
            let yt = global_layer_norm(None, &xt, &g, &b, EPS).unwrap();
            for c in 0..4 {
                let a = y.data()[c * 10 + k];
                let e = yt.data()[c * (k + 1) + k];
                assert!((a - e).abs() < 1e-6, "frame {k} channel {c}: {a} vs {e}");
            }
        }
    }
}
