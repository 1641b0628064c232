//! 1-D convolution and transposed convolution.
//!
//! Layouts: inputs are `[channels, time]`, conv kernels are
//! `[out_channels, in_channels/groups, taps]`, transposed-conv kernels are
//! `[in_channels, out_channels, taps]`. All accumulation is f64; outputs are
//! rounded to the storage type once per element. Specialized paths cover the
//! two hot shapes (pointwise and depthwise); a reference path covers the
//! general case. Row-parallel splits keep each output row's accumulation
//! order fixed, so results do not depend on the thread cap.

use super::{Element, Tape, Tensor, axpy_acc};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl Default for Conv1dSpec {
    fn default() -> Self {
        Conv1dSpec {
            stride: 1,
            dilation: 1,
            pad_left: 0,
            pad_right: 0,
            groups: 1,
        }
    }
}

/// Output length of [`conv1d`] for an input of length `t_in` and `p` taps;
/// `None` when the padded input is shorter than the dilated kernel span.
pub fn conv1d_out_len(t_in: usize, p: usize, spec: &Conv1dSpec) -> Option<usize> {
    let tp = t_in + spec.pad_left + spec.pad_right;
    let span = (p - 1) * spec.dilation + 1;
    if tp < span {
        None
    } else {
        Some((tp - span) / spec.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Dims {
    cin: usize,
    t: usize,
    tp: usize,
    pl: usize,
    cout: usize,
    cing: usize,
    p: usize,
    s: usize,
    d: usize,
    groups: usize,
    t_out: usize,
}

/// Run `f(row, out_row)` over every output row, splitting rows across the
/// configured thread cap. Each row is written by exactly one thread.
fn for_rows<E: Element>(
    out: &mut [E],
    rows: usize,
    row_len: usize,
    f: impl Fn(usize, &mut [E]) + Sync,
) {
    let nt = crate::threads().min(rows);
    if nt <= 1 {
        for (r, row) in out.chunks_mut(row_len).enumerate() {
            f(r, row);
        }
        return;
    }
    let chunk = rows.div_ceil(nt);
    std::thread::scope(|scope| {
        for (ti, block) in out.chunks_mut(chunk * row_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, row) in block.chunks_mut(row_len).enumerate() {
                    f(ti * chunk + j, row);
                }
            });
        }
    });
}

fn padded_input<E: Element>(input: &Tensor<E>, dims: &Dims) -> Vec<E> {
    let zero = E::from_f64(0.0);
    let mut xp = vec![zero; dims.cin * dims.tp];
    for c in 0..dims.cin {
        let src = &input.data()[c * dims.t..(c + 1) * dims.t];
        xp[c * dims.tp + dims.pl..c * dims.tp + dims.pl + dims.t].copy_from_slice(src);
    }
    xp
}

fn conv_forward<E: Element>(xp: &[E], k: &[E], bias: Option<&[E]>, dims: &Dims) -> Vec<E> {
    let Dims {
        cin,
        tp,
        cout,
        cing,
        p,
        s,
        d,
        groups,
        t_out,
        ..
    } = *dims;
    let mut out = vec![E::from_f64(0.0); cout * t_out];
    let cpg = cout / groups;

    if p == 1 && s == 1 && d == 1 && groups == 1 {
        // Pointwise: out[co] = sum_ci k[co,ci] * x[ci] (+ bias), an axpy per
        // input row so time stays contiguous.
        for_rows(&mut out, cout, t_out, |co, row| {
            let mut acc = vec![bias.map_or(0.0, |b| b[co].to_f64()); t_out];
            for ci in 0..cin {
                axpy_acc(&mut acc, k[co * cin + ci].to_f64(), &xp[ci * tp..ci * tp + tp]);
            }
            for (o, a) in row.iter_mut().zip(acc) {
                *o = E::from_f64(a);
            }
        });
    } else if groups == cin && cout == cin && cing == 1 {
        // Depthwise: each channel convolved with its own taps.
        for_rows(&mut out, cout, t_out, |c, row| {
            let xrow = &xp[c * tp..(c + 1) * tp];
            let krow = &k[c * p..(c + 1) * p];
            let b = bias.map_or(0.0, |b| b[c].to_f64());
            for (t, o) in row.iter_mut().enumerate() {
                let base = t * s;
                let mut acc = b;
                for (pp, kv) in krow.iter().enumerate() {
                    acc += kv.to_f64() * xrow[base + pp * d].to_f64();
                }
                *o = E::from_f64(acc);
            }
        });
    } else {
        // Reference path: explicit loops over group, taps, and input rows.
        for_rows(&mut out, cout, t_out, |co, row| {
            let g = co / cpg;
            let ci0 = g * cing;
            let b = bias.map_or(0.0, |b| b[co].to_f64());
            for (t, o) in row.iter_mut().enumerate() {
                let base = t * s;
                let mut acc = b;
                for cil in 0..cing {
                    let xrow = &xp[(ci0 + cil) * tp..(ci0 + cil + 1) * tp];
                    let krow = &k[(co * cing + cil) * p..(co * cing + cil + 1) * p];
                    for (pp, kv) in krow.iter().enumerate() {
                        acc += kv.to_f64() * xrow[base + pp * d].to_f64();
                    }
                }
                *o = E::from_f64(acc);
            }
        });
    }
    out
}

/// 1-D convolution of `input` `[Cin, T]` with `kernel`
/// `[Cout, Cin/groups, P]` and optional per-output-channel `bias`.
pub fn conv1d<E: Element>(
    tape: Option<&Tape<E>>,
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: Conv1dSpec,
) -> Result<Tensor<E>> {
    if input.shape().len() != 2 || kernel.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "conv1d: input must be [C,T] and kernel [Cout,Cin/groups,P], got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
        return Err(Error::Invalid(
            "conv1d: stride, dilation, and groups must be positive".into(),
        ));
    }
    let (cin, t) = (input.shape()[0], input.shape()[1]);
    let (cout, cing, p) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::Shape(format!(
            "conv1d: channels ({cin} in, {cout} out) not divisible by groups {}",
            spec.groups
        )));
    }
    if cing != cin / spec.groups {
        return Err(Error::Shape(format!(
            "conv1d: kernel expects {cing} input channels per group, input has {}",
            cin / spec.groups
        )));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::Shape(format!(
                "conv1d: bias has {} elements for {cout} output channels",
                b.numel()
            )));
        }
    }
    let t_out = conv1d_out_len(t, p, &spec).ok_or_else(|| {
        Err::<usize, _>(Error::Shape(format!(
            "conv1d: padded input ({} samples) shorter than dilated kernel span ({})",
            t + spec.pad_left + spec.pad_right,
            (p - 1) * spec.dilation + 1
        )))
        .unwrap_err()
    })?;

    let dims = Dims {
        cin,
        t,
        tp: t + spec.pad_left + spec.pad_right,
        pl: spec.pad_left,
        cout,
        cing,
        p,
        s: spec.stride,
        d: spec.dilation,
        groups: spec.groups,
        t_out,
    };
    let xp = padded_input(input, &dims);
    let data = conv_forward(&xp, kernel.data(), bias.map(|b| b.data()), &dims);
    let out = Tensor::from_vec(vec![cout, t_out], data)?;

    // Recording: with a bias the op has three differentiable inputs,
    // without it two; both paths share the same backward computation.
    match bias {
        Some(b) => {
            if let Some(plan) = Tape::plan(tape, [input, kernel, b]) {
                let [ii, ik, ib] = plan.ids;
                let [ni, nk, nb] = plan.need;
                let kc = kernel.clone();
                plan.finish(&out, move |g, grads| {
                    conv_backward(g, &xp, kc.data(), &dims, grads, (ii, ni), (ik, nk), Some((ib, nb)));
                });
            }
        }
        None => {
            if let Some(plan) = Tape::plan(tape, [input, kernel]) {
                let [ii, ik] = plan.ids;
                let [ni, nk] = plan.need;
                let kc = kernel.clone();
                plan.finish(&out, move |g, grads| {
                    conv_backward(g, &xp, kc.data(), &dims, grads, (ii, ni), (ik, nk), None);
                });
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<E: Element>(
    g: &[f64],
    xp: &[E],
    k: &[E],
    dims: &Dims,
    grads: &mut super::Grads,
    (ii, ni): (super::NodeId, bool),
    (ik, nk): (super::NodeId, bool),
    bias: Option<(super::NodeId, bool)>,
) {
    let Dims {
        cin,
        t,
        tp,
        pl,
        cout,
        cing,
        p,
        s,
        d,
        groups,
        t_out,
    } = *dims;
    let cpg = cout / groups;
    let pointwise = p == 1 && s == 1 && d == 1 && groups == 1;

    if let Some((ib, nb)) = bias {
        if nb {
            let buf = grads.buf(ib, cout);
            for co in 0..cout {
                buf[co] += g[co * t_out..(co + 1) * t_out].iter().sum::<f64>();
            }
        }
    }

    if nk {
        let buf = grads.buf(ik, cout * cing * p);
        if pointwise {
            // dk[co,ci] = <g row co, x row ci>
            for co in 0..cout {
                let grow = &g[co * t_out..(co + 1) * t_out];
                for ci in 0..cin {
                    let mut acc = 0.0;
                    for (gv, xv) in grow.iter().zip(&xp[ci * tp..ci * tp + tp]) {
                        acc += gv * xv.to_f64();
                    }
                    buf[co * cin + ci] += acc;
                }
            }
        } else {
            for co in 0..cout {
                let grow = &g[co * t_out..(co + 1) * t_out];
                let ci0 = (co / cpg) * cing;
                for cil in 0..cing {
                    let xrow = &xp[(ci0 + cil) * tp..(ci0 + cil + 1) * tp];
                    for pp in 0..p {
                        let mut acc = 0.0;
                        for (tt, gv) in grow.iter().enumerate() {
                            acc += gv * xrow[tt * s + pp * d].to_f64();
                        }
                        buf[(co * cing + cil) * p + pp] += acc;
                    }
                }
            }
        }
    }

    if ni {
        // Gradients flow to the padded buffer first; the pad margins are
        // then dropped.
        let mut dxp = vec![0.0f64; cin * tp];
        if pointwise {
            for ci in 0..cin {
                let row = &mut dxp[ci * tp..(ci + 1) * tp];
                for co in 0..cout {
                    let kv = k[co * cin + ci].to_f64();
                    for (dst, gv) in row.iter_mut().zip(&g[co * t_out..(co + 1) * t_out]) {
                        *dst += kv * gv;
                    }
                }
            }
        } else {
            for co in 0..cout {
                let grow = &g[co * t_out..(co + 1) * t_out];
                let ci0 = (co / cpg) * cing;
                for cil in 0..cing {
                    let row = &mut dxp[(ci0 + cil) * tp..(ci0 + cil + 1) * tp];
                    let krow = &k[(co * cing + cil) * p..(co * cing + cil + 1) * p];
                    for (pp, kv) in krow.iter().enumerate() {
                        let kv = kv.to_f64();
                        for (tt, gv) in grow.iter().enumerate() {
                            row[tt * s + pp * d] += kv * gv;
                        }
                    }
                }
            }
        }
        let buf = grads.buf(ii, cin * t);
        for ci in 0..cin {
            for tt in 0..t {
                buf[ci * t + tt] += dxp[ci * tp + pl + tt];
            }
        }
    }
}

/// Transposed 1-D convolution (fractionally-strided): input `[Cin, T]`,
/// kernel `[Cin, Cout, P]`, output `[Cout, (T-1)*stride + P]`. This is the
/// adjoint of [`conv1d`] with the same kernel data, which is what makes a
/// conv analysis bank and transposed-conv synthesis bank a matched pair.
pub fn transposed_conv1d<E: Element>(
    tape: Option<&Tape<E>>,
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
) -> Result<Tensor<E>> {
    if input.shape().len() != 2 || kernel.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "transposed_conv1d: input must be [C,T] and kernel [Cin,Cout,P], got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Invalid("transposed_conv1d: stride must be positive".into()));
    }
    let (cin, t) = (input.shape()[0], input.shape()[1]);
    let (kcin, cout, p) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if kcin != cin {
        return Err(Error::Shape(format!(
            "transposed_conv1d: kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    let t_out = (t - 1) * stride + p;

    let x = input.data();
    let k = kernel.data();
    let mut out = vec![E::from_f64(0.0); cout * t_out];
    for_rows(&mut out, cout, t_out, |co, row| {
        let mut acc = vec![0.0f64; t_out];
        for ci in 0..cin {
            let krow = &k[(ci * cout + co) * p..(ci * cout + co + 1) * p];
            for tt in 0..t {
                let xv = x[ci * t + tt].to_f64();
                let base = tt * stride;
                for (pp, kv) in krow.iter().enumerate() {
                    acc[base + pp] += xv * kv.to_f64();
                }
            }
        }
        for (o, a) in row.iter_mut().zip(acc) {
            *o = E::from_f64(a);
        }
    });
    let out = Tensor::from_vec(vec![cout, t_out], out)?;

    if let Some(plan) = Tape::plan(tape, [input, kernel]) {
        let [ii, ik] = plan.ids;
        let [ni, nk] = plan.need;
        let (xc, kc) = (input.clone(), kernel.clone());
        plan.finish(&out, move |g, grads| {
            let x = xc.data();
            let k = kc.data();
            if ni {
                // dx[ci,t] = sum_co sum_p k[ci,co,p] * g[co, t*s+p]
                let buf = grads.buf(ii, cin * t);
                for ci in 0..cin {
                    for tt in 0..t {
                        let base = tt * stride;
                        let mut acc = 0.0;
                        for co in 0..cout {
                            let krow = &k[(ci * cout + co) * p..(ci * cout + co + 1) * p];
                            let grow = &g[co * t_out + base..co * t_out + base + p];
                            for (kv, gv) in krow.iter().zip(grow) {
                                acc += kv.to_f64() * gv;
                            }
                        }
                        buf[ci * t + tt] += acc;
                    }
                }
            }
            if nk {
                // dk[ci,co,p] = sum_t x[ci,t] * g[co, t*s+p]
                let buf = grads.buf(ik, cin * cout * p);
                for ci in 0..cin {
                    for co in 0..cout {
                        let grow = &g[co * t_out..(co + 1) * t_out];
                        for pp in 0..p {
                            let mut acc = 0.0;
                            for tt in 0..t {
                                acc += x[ci * t + tt].to_f64() * grow[tt * stride + pp];
                            }
                            buf[(ci * cout + co) * p + pp] += acc;
                        }
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

    fn t2(shape: [usize; 2], v: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape.to_vec(), v).unwrap()
    }

    fn t3(shape: [usize; 3], v: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn pointwise_identity_kernel_passes_input_through() {
        let x = t2([1, 5], vec![1.0, -2.0, 3.0, 0.5, 4.0]);
        let k = t3([1, 1, 1], vec![1.0]);
        let y = conv1d(None, &x, &k, None, Conv1dSpec::default()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilated_taps_skip_samples() {
        // kernel [1,0,1] at dilation 2 spans 5 samples: y[t] = x[t] + x[t+4].
        let x = t2([1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = t3([1, 1, 3], vec![1.0, 0.0, 1.0]);
        let spec = Conv1dSpec {
            dilation: 2,
            ..Conv1dSpec::default()
        };
        let y = conv1d(None, &x, &k, None, spec).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0]);
    }

    #[test]
    fn stride_subsamples_output() {
        // Moving-sum kernel of width 2 at stride 2.
        let x = t2([1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = t3([1, 1, 2], vec![1.0, 1.0]);
        let spec = Conv1dSpec {
            stride: 2,
            ..Conv1dSpec::default()
        };
        let y = conv1d(None, &x, &k, None, spec).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0, 11.0]);
    }

    #[test]
    fn padding_extends_with_zeros() {
        let x = t2([1, 3], vec![1.0, 2.0, 3.0]);
        let k = t3([1, 1, 3], vec![1.0, 1.0, 1.0]);
        let spec = Conv1dSpec {
            pad_left: 1,
            pad_right: 1,
            ..Conv1dSpec::default()
        };
        let y = conv1d(None, &x, &k, None, spec).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn bias_adds_per_output_channel() {
        let x = t2([1, 2], vec![1.0, 1.0]);
        let k = t3([2, 1, 1], vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![2], vec![10.0f32, 20.0]).unwrap();
        let y = conv1d(None, &x, &k, Some(&b), Conv1dSpec::default()).unwrap();
        assert_eq!(y.data(), &[11.0, 11.0, 22.0, 22.0]);
    }

    #[test]
    fn groups_keep_channels_separate() {
        // Depthwise: 2 channels, each with its own single tap.
        let x = t2([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = t3([2, 1, 1], vec![2.0, 10.0]);
        let spec = Conv1dSpec {
            groups: 2,
            ..Conv1dSpec::default()
        };
        let y = conv1d(None, &x, &k, None, spec).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 40.0, 50.0, 60.0]);
    }

    #[test]
    fn too_short_input_is_rejected_with_dims() {
        let x = t2([1, 3], vec![1.0, 2.0, 3.0]);
        let k = t3([1, 1, 3], vec![1.0, 1.0, 1.0]);
        let spec = Conv1dSpec {
            dilation: 2,
            ..Conv1dSpec::default()
        };
        let e = conv1d(None, &x, &k, None, spec).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("3 samples") && msg.contains("span (5)"), "{msg}");
    }

    #[test]
    fn transposed_single_frame_is_kernel_copy() {
        let x = t2([1, 1], vec![2.0]);
        let k = t3([1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = transposed_conv1d(None, &x, &k, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn transposed_overlap_adds_boxes() {
        // Two unit frames, box kernel of width 4, stride 2: the middle two
        // samples overlap once.
        let x = t2([1, 2], vec![1.0, 1.0]);
        let k = t3([1, 1, 4], vec![1.0, 1.0, 1.0, 1.0]);
        let y = transposed_conv1d(None, &x, &k, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn threaded_rows_match_single_thread_bitwise() {
        let x = t2([3, 40], (0..120).map(|i| (i as f32 * 0.37).sin()).collect());
        let k = t3(
            [4, 3, 3],
            (0..36).map(|i| ((i * 7 % 13) as f32 - 6.0) * 0.1).collect(),
        );
        let spec = Conv1dSpec {
            pad_left: 1,
            pad_right: 1,
            ..Conv1dSpec::default()
        };
        let y1 = conv1d(None, &x, &k, None, spec).unwrap();
        crate::set_threads(3);
        let y2 = conv1d(None, &x, &k, None, spec).unwrap();
        crate::set_threads(1);
        let b1: Vec<u32> = y1.data().iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u32> = y2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }
}
