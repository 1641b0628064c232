//! Elementwise ops, activations, reductions, and shape ops.

use super::{Element, Grads, Tape, Tensor};
use crate::{Error, Result};

fn same_shape<E: Element>(op: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: operands differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise `a + b` over equal shapes.
pub fn add<E: Element>(tape: Option<&Tape<E>>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("add", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| E::from_f64(x.to_f64() + y.to_f64()))
        .collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [a, b]) {
        let [ia, ib] = plan.ids;
        let [na, nb] = plan.need;
        let n = out.numel();
        plan.finish(&out, move |g, grads: &mut Grads| {
            if na {
                let buf = grads.buf(ia, n);
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if nb {
                let buf = grads.buf(ib, n);
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        });
    }
    Ok(out)
}

/// Elementwise `a - b` over equal shapes.
pub fn sub<E: Element>(tape: Option<&Tape<E>>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("sub", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| E::from_f64(x.to_f64() - y.to_f64()))
        .collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [a, b]) {
        let [ia, ib] = plan.ids;
        let [na, nb] = plan.need;
        let n = out.numel();
        plan.finish(&out, move |g, grads| {
            if na {
                let buf = grads.buf(ia, n);
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if nb {
                let buf = grads.buf(ib, n);
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
        });
    }
    Ok(out)
}

/// Hadamard product over equal shapes.
pub fn mul<E: Element>(tape: Option<&Tape<E>>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("mul", a, b)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| E::from_f64(x.to_f64() * y.to_f64()))
        .collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [a, b]) {
        let [ia, ib] = plan.ids;
        let [na, nb] = plan.need;
        let (ac, bc) = (a.clone(), b.clone());
        let n = out.numel();
        plan.finish(&out, move |g, grads| {
            if na {
                let buf = grads.buf(ia, n);
                for i in 0..n {
                    buf[i] += g[i] * bc.data()[i].to_f64();
                }
            }
            if nb {
                let buf = grads.buf(ib, n);
                for i in 0..n {
                    buf[i] += g[i] * ac.data()[i].to_f64();
                }
            }
        });
    }
    Ok(out)
}

/// Elementwise `a / b`; rejects zero divisors.
pub fn divide<E: Element>(
    tape: Option<&Tape<E>>,
    a: &Tensor<E>,
    b: &Tensor<E>,
) -> Result<Tensor<E>> {
    same_shape("divide", a, b)?;
    if b.data().iter().any(|&v| v.to_f64() == 0.0) {
        return Err(Error::Numeric("divide: zero divisor".into()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| E::from_f64(x.to_f64() / y.to_f64()))
        .collect();
    let out = Tensor::from_vec(a.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [a, b]) {
        let [ia, ib] = plan.ids;
        let [na, nb] = plan.need;
        let (ac, bc) = (a.clone(), b.clone());
        let n = out.numel();
        plan.finish(&out, move |g, grads| {
            if na {
                let buf = grads.buf(ia, n);
                for i in 0..n {
                    buf[i] += g[i] / bc.data()[i].to_f64();
                }
            }
            if nb {
                let buf = grads.buf(ib, n);
                for i in 0..n {
                    let bv = bc.data()[i].to_f64();
                    buf[i] -= g[i] * ac.data()[i].to_f64() / (bv * bv);
                }
            }
        });
    }
    Ok(out)
}

/// `-x`.
pub fn neg<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>) -> Result<Tensor<E>> {
    mul_const(tape, x, -1.0)
}

/// `x * c` for a fixed constant.
pub fn mul_const<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>, c: f64) -> Result<Tensor<E>> {
    let data = x.data().iter().map(|&v| E::from_f64(v.to_f64() * c)).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let n = out.numel();
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for i in 0..n {
                buf[i] += g[i] * c;
            }
        });
    }
    Ok(out)
}

/// `x + c` for a fixed constant.
pub fn add_const<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>, c: f64) -> Result<Tensor<E>> {
    let data = x.data().iter().map(|&v| E::from_f64(v.to_f64() + c)).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let n = out.numel();
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for i in 0..n {
                buf[i] += g[i];
            }
        });
    }
    Ok(out)
}

/// `x * s` where `s` is a one-element tensor (broadcast scalar).
pub fn scale<E: Element>(
    tape: Option<&Tape<E>>,
    x: &Tensor<E>,
    s: &Tensor<E>,
) -> Result<Tensor<E>> {
    if s.numel() != 1 {
        return Err(Error::Shape(format!(
            "scale: scalar operand has shape {:?}",
            s.shape()
        )));
    }
    let sv = s.data()[0].to_f64();
    let data = x.data().iter().map(|&v| E::from_f64(v.to_f64() * sv)).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x, s]) {
        let [ix, is] = plan.ids;
        let [nx, ns] = plan.need;
        let xc = x.clone();
        let n = out.numel();
        plan.finish(&out, move |g, grads| {
            if nx {
                let buf = grads.buf(ix, n);
                for i in 0..n {
                    buf[i] += g[i] * sv;
                }
            }
            if ns {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += g[i] * xc.data()[i].to_f64();
                }
                grads.buf(is, 1)[0] += acc;
            }
        });
    }
    Ok(out)
}

/// Inner product of equal-shape tensors, as a one-element tensor.
pub fn dot<E: Element>(tape: Option<&Tape<E>>, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("dot", a, b)?;
    let v = super::dot_acc(a.data(), b.data());
    let out = Tensor::scalar(E::from_f64(v));
    if let Some(plan) = Tape::plan(tape, [a, b]) {
        let [ia, ib] = plan.ids;
        let [na, nb] = plan.need;
        let (ac, bc) = (a.clone(), b.clone());
        let n = a.numel();
        plan.finish(&out, move |g, grads| {
            let g0 = g[0];
            if na {
                let buf = grads.buf(ia, n);
                for i in 0..n {
                    buf[i] += g0 * bc.data()[i].to_f64();
                }
            }
            if nb {
                let buf = grads.buf(ib, n);
                for i in 0..n {
                    buf[i] += g0 * ac.data()[i].to_f64();
                }
            }
        });
    }
    Ok(out)
}

/// Sum of all elements, as a one-element tensor.
pub fn sum<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut acc = 0.0f64;
    for &v in x.data() {
        acc += v.to_f64();
    }
    let out = Tensor::scalar(E::from_f64(acc));
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let n = x.numel();
        plan.finish(&out, move |g, grads| {
            let g0 = g[0];
            let buf = grads.buf(ix, n);
            for d in buf.iter_mut() {
                *d += g0;
            }
        });
    }
    Ok(out)
}

/// Subtracts the mean over all elements: `y = x - mean(x)`.
pub fn zero_mean<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = x.numel();
    let mut acc = 0.0f64;
    for &v in x.data() {
        acc += v.to_f64();
    }
    let mean = acc / n as f64;
    let data = x.data().iter().map(|&v| E::from_f64(v.to_f64() - mean)).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        plan.finish(&out, move |g, grads| {
            let gm: f64 = g.iter().sum::<f64>() / n as f64;
            let buf = grads.buf(ix, n);
            for i in 0..n {
                buf[i] += g[i] - gm;
            }
        });
    }
    Ok(out)
}

/// Elementwise base-10 logarithm; the domain is strictly positive.
pub fn log10<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.data().iter().any(|&v| !(v.to_f64() > 0.0)) {
        return Err(Error::Numeric("log10 of a non-positive value".into()));
    }
    let data = x.data().iter().map(|&v| E::from_f64(v.to_f64().log10())).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let xc = x.clone();
        let n = x.numel();
        let ln10 = std::f64::consts::LN_10;
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for i in 0..n {
                buf[i] += g[i] / (xc.data()[i].to_f64() * ln10);
            }
        });
    }
    Ok(out)
}

/// Elementwise `min(x, cmax)`. The gradient passes wherever the input was
/// not clamped (boundary included).
pub fn clamp_max<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>, cmax: f64) -> Result<Tensor<E>> {
    let data = x
        .data()
        .iter()
        .map(|&v| E::from_f64(v.to_f64().min(cmax)))
        .collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let xc = x.clone();
        let n = x.numel();
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for i in 0..n {
                if xc.data()[i].to_f64() <= cmax {
                    buf[i] += g[i];
                }
            }
        });
    }
    Ok(out)
}

/// Rectified linear unit.
pub fn relu<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let data = x
        .data()
        .iter()
        .map(|&v| E::from_f64(v.to_f64().max(0.0)))
        .collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let xc = x.clone();
        let n = x.numel();
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for i in 0..n {
                if xc.data()[i].to_f64() > 0.0 {
                    buf[i] += g[i];
                }
            }
        });
    }
    Ok(out)
}

/// Logistic sigmoid.
pub fn sigmoid<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|&v| E::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
        .collect();
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let yc = out.clone();
        let n = x.numel();
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for i in 0..n {
                let y = yc.data()[i].to_f64();
                buf[i] += g[i] * y * (1.0 - y);
            }
        });
    }
    Ok(out)
}

/// Parametric ReLU: identity for `x >= 0`, slope `alpha` below zero.
/// `alpha` is either a single shared scalar or one value per leading-axis
/// channel of `x`.
pub fn prelu<E: Element>(
    tape: Option<&Tape<E>>,
    x: &Tensor<E>,
    alpha: &Tensor<E>,
) -> Result<Tensor<E>> {
    let channels = x.shape()[0];
    let per_channel = match alpha.numel() {
        1 => false,
        n if n == channels => true,
        _ => {
            return Err(Error::Shape(format!(
                "prelu: alpha has {} elements, expected 1 or {channels}",
                alpha.numel()
            )));
        }
    };
    let row = x.numel() / channels;
    let mut data = Vec::with_capacity(x.numel());
    for c in 0..channels {
        let a = if per_channel {
            alpha.data()[c].to_f64()
        } else {
            alpha.data()[0].to_f64()
        };
        for i in 0..row {
            let v = x.data()[c * row + i].to_f64();
            data.push(E::from_f64(if v >= 0.0 { v } else { a * v }));
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x, alpha]) {
        let [ix, ia] = plan.ids;
        let [nx, na] = plan.need;
        let (xc, ac) = (x.clone(), alpha.clone());
        let n = x.numel();
        let an = alpha.numel();
        plan.finish(&out, move |g, grads| {
            if nx {
                let buf = grads.buf(ix, n);
                for c in 0..channels {
                    let a = if per_channel {
                        ac.data()[c].to_f64()
                    } else {
                        ac.data()[0].to_f64()
                    };
                    for i in 0..row {
                        let idx = c * row + i;
                        let v = xc.data()[idx].to_f64();
                        buf[idx] += g[idx] * if v >= 0.0 { 1.0 } else { a };
                    }
                }
            }
            if na {
                let mut acc = vec![0.0f64; an];
                for c in 0..channels {
                    let slot = if per_channel { c } else { 0 };
                    for i in 0..row {
                        let idx = c * row + i;
                        let v = xc.data()[idx].to_f64();
                        if v < 0.0 {
                            acc[slot] += g[idx] * v;
                        }
                    }
                }
                let buf = grads.buf(ia, an);
                for (d, a) in buf.iter_mut().zip(acc) {
                    *d += a;
                }
            }
        });
    }
    Ok(out)
}

/// Softmax across the leading axis (the source axis): for every position of
/// the remaining axes, the values at axis-0 indices are normalized to a
/// simplex. Requires rank >= 2 so the source axis is explicit.
pub fn softmax_sources<E: Element>(tape: Option<&Tape<E>>, x: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape().len() < 2 {
        return Err(Error::Shape(format!(
            "softmax_sources: needs an explicit source axis, shape is {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[0];
    let inner = x.numel() / c;
    let mut data = vec![E::from_f64(0.0); x.numel()];
    for j in 0..inner {
        let mut m = f64::NEG_INFINITY;
        for i in 0..c {
            m = m.max(x.data()[i * inner + j].to_f64());
        }
        let mut z = 0.0f64;
        for i in 0..c {
            z += (x.data()[i * inner + j].to_f64() - m).exp();
        }
        for i in 0..c {
            let e = (x.data()[i * inner + j].to_f64() - m).exp();
            data[i * inner + j] = E::from_f64(e / z);
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let yc = out.clone();
        let n = x.numel();
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for j in 0..inner {
                let mut dotgy = 0.0f64;
                for i in 0..c {
                    let idx = i * inner + j;
                    dotgy += g[idx] * yc.data()[idx].to_f64();
                }
                for i in 0..c {
                    let idx = i * inner + j;
                    let y = yc.data()[idx].to_f64();
                    buf[idx] += y * (g[idx] - dotgy);
                }
            }
        });
    }
    Ok(out)
}

/// Reinterpret `x` with a new shape of equal element count.
pub fn reshape<E: Element>(
    tape: Option<&Tape<E>>,
    x: &Tensor<E>,
    shape: impl Into<Vec<usize>>,
) -> Result<Tensor<E>> {
    let shape = shape.into();
    let out = Tensor::from_vec(shape, x.data().to_vec())?;
    if out.numel() != x.numel() {
        return Err(Error::Shape(format!(
            "reshape: {:?} has {} elements, target {:?} has {}",
            x.shape(),
            x.numel(),
            out.shape(),
            out.numel()
        )));
    }
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let n = x.numel();
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for i in 0..n {
                buf[i] += g[i];
            }
        });
    }
    Ok(out)
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn narrow<E: Element>(
    tape: Option<&Tape<E>>,
    x: &Tensor<E>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<E>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "narrow: axis {axis} out of range for shape {shape:?}"
        )));
    }
    if len == 0 || start + len > shape[axis] {
        return Err(Error::Shape(format!(
            "narrow: range {start}..{} exceeds extent {} on axis {axis}",
            start + len,
            shape[axis]
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * mid * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let out = Tensor::from_vec(out_shape, data)?;
    if let Some(plan) = Tape::plan(tape, [x]) {
        let [ix] = plan.ids;
        let n = x.numel();
        plan.finish(&out, move |g, grads| {
            let buf = grads.buf(ix, n);
            for o in 0..outer {
                let src = o * len * inner;
                let dst = o * mid * inner + start * inner;
                for i in 0..len * inner {
                    buf[dst + i] += g[src + i];
                }
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let y = sigmoid(None, &t(&[0.0])).unwrap();
        assert_eq!(y.data()[0], 0.5);
    }

    #[test]
    fn relu_clips_negatives() {
        let y = relu(None, &t(&[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn prelu_matches_hand_values() {
        // alpha 0.25: [-2, 0, 3] -> [-0.5, 0, 3]
        let x = t(&[-2.0, 0.0, 3.0]);
        let a = Tensor::scalar(0.25f32);
        let y = prelu(None, &x, &a).unwrap();
        assert_eq!(y.data(), &[-0.5, 0.0, 3.0]);
    }

    #[test]
    fn prelu_per_channel_alpha() {
        // Two channels of two samples; alpha = [0.5, 2.0].
        let x = Tensor::from_vec(vec![2, 2], vec![-1.0f32, 1.0, -1.0, 1.0]).unwrap();
        let a = t(&[0.5, 2.0]);
        let y = prelu(None, &x, &a).unwrap();
        assert_eq!(y.data(), &[-0.5, 1.0, -2.0, 1.0]);
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let x = Tensor::from_vec(vec![4, 1], vec![0.7f32; 4]).unwrap();
        let y = softmax_sources(None, &x).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let x = Tensor::from_vec(vec![3, 4], (0..12).map(|i| (i as f32).sin()).collect()).unwrap();
        let y = softmax_sources(None, &x).unwrap();
        for j in 0..4 {
            let s: f32 = (0..3).map(|i| y.data()[i * 4 + j]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sum_backward_is_ones() {
        let tape = Tape::new();
        let x = Tensor::param(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let s = sum(Some(&tape), &x).unwrap();
        backward(&tape, &s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_mean_removes_mean_and_backprops() {
        let tape = Tape::new();
        let x = Tensor::param(vec![4], vec![1.0f32, 2.0, 3.0, 6.0]).unwrap();
        let y = zero_mean(Some(&tape), &x).unwrap();
        assert_eq!(y.data(), &[-2.0, -1.0, 0.0, 3.0]);
        // seed = dot(y, w). dL/dx = w - mean(w).
        let w = t(&[1.0, 0.0, 0.0, 0.0]);
        let s = dot(Some(&tape), &y, &w).unwrap();
        backward(&tape, &s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.75, -0.25, -0.25, -0.25]);
    }

    #[test]
    fn log10_rejects_non_positive() {
        assert!(matches!(
            log10(None, &t(&[1.0, 0.0])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn clamp_max_caps_and_blocks_gradient() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2], vec![1.0f32, 100.0]).unwrap();
        let y = clamp_max(Some(&tape), &x, 60.0).unwrap();
        assert_eq!(y.data(), &[1.0, 60.0]);
        let s = sum(Some(&tape), &y).unwrap();
        backward(&tape, &s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn narrow_slices_and_scatters() {
        let tape = Tape::new();
        // [[0,1,2],[3,4,5]] narrow axis 1, start 1, len 2 -> [[1,2],[4,5]]
        let x = Tensor::param(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        let y = narrow(Some(&tape), &x, 1, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 4.0, 5.0]);
        let s = sum(Some(&tape), &y).unwrap();
        backward(&tape, &s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn narrow_rejects_out_of_range() {
        let x = t(&[1.0, 2.0]);
        assert!(narrow(None, &x, 0, 1, 2).is_err());
        assert!(narrow(None, &x, 1, 0, 1).is_err());
    }

    #[test]
    fn reshape_roundtrip_gradient() {
        let tape = Tape::new();
        let x = Tensor::param(vec![2, 3], vec![1.0f32; 6]).unwrap();
        let y = reshape(Some(&tape), &x, vec![3, 2]).unwrap();
        let s = sum(Some(&tape), &y).unwrap();
        backward(&tape, &s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn divide_rejects_zero() {
        assert!(matches!(
            divide(None, &t(&[1.0]), &t(&[0.0])),
            Err(Error::Numeric(_))
        ));
    }
}
