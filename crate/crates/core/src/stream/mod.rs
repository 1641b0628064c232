//! Stateful frame-by-frame causal inference.
//!
//! A [`StreamState`] consumes mixture samples in arbitrary chunks and emits
//! separated samples as soon as they are fully determined: the first hop
//! after one whole window arrives, one hop per frame after that, and the
//! final hop at [`StreamState::flush`]. Per frame it runs the same arithmetic
//! as the batch forward pass, with running prefix statistics in place of
//! whole-utterance normalization passes and ring buffers in place of left
//! padding, so the emitted stream matches the batch output to within
//! rounding. Sums that the batch path evaluates strictly left to right are
//! blocked here for speed; that reassociation and the per-hop rounding of
//! the overlap-add are the only arithmetic differences.
//!
//! Emitted samples never change once returned: a frame's first hop overlaps
//! the previous frame, so its raw synthesis sums wait in a 64-bit tail
//! buffer until the overlapping frame has contributed.

mod bench;

pub use bench::{TpfReport, bench_tpf};

use crate::model::{EncoderKind, MaskKind, ModelConfig, ModelParams, NORM_EPS, pinv_encoder_kernel};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One output row of [`matvec`]: sixteen fixed f32 lanes folded pairwise,
/// then the remainder and the bias in f64. The order never varies, so
/// results are identical from run to run and independent of row blocking.
#[inline(always)]
fn dot_row(row: &[f32], x: &[f32], bias: f64, lane: &mut [f32; 16]) -> f32 {
    let full = x.len() - x.len() % 16;
    let mut acc = {
        for step in [8usize, 4, 2, 1] {
            for l in 0..step {
                lane[l] += lane[l + step];
            }
        }
        lane[0] as f64
    };
    for (&rv, &xv) in row[full..].iter().zip(&x[full..]) {
        acc += rv as f64 * xv as f64;
    }
    (acc + bias) as f32
}

/// Hint the four cache lines at `w[at]`, `w[at + n]`, `w[at + 2n]` and
/// `w[at + 3n]` toward cache. No-op off x86-64 or when the span would leave
/// the slice.
#[inline(always)]
fn prefetch_rows(w: &[f32], at: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if at + 3 * n + 16 <= w.len() {
        // SAFETY: a prefetch only hints; the addresses stay inside `w`.
        unsafe {
            use std::arch::x86_64::{_MM_HINT_T0, _mm_prefetch};
            let p = w.as_ptr().add(at);
            _mm_prefetch(p.cast(), _MM_HINT_T0);
            _mm_prefetch(p.add(n).cast(), _MM_HINT_T0);
            _mm_prefetch(p.add(2 * n).cast(), _MM_HINT_T0);
            _mm_prefetch(p.add(3 * n).cast(), _MM_HINT_T0);
        }
    }
    #[cfg(not(target_arch = "x86_64"))]
    let _ = (w, at, n);
}

/// Dense row-major matrix-vector product, four output rows per pass so the
/// loads of `x` and the lane fold amortize, prefetching the next four rows
/// while these multiply: the weight sweep outruns the hardware prefetcher
/// alone. The batch path accumulates the same products in sequential f64;
/// single precision here trades ~1e-7 relative noise per dot product for
/// the whole frame fitting the memory-bandwidth budget of real-time
/// streaming, far inside the 1e-4 equivalence bound.
fn matvec(w: &[f32], bias: Option<&[f32]>, x: &[f32], out: &mut [f32]) {
    let n = x.len();
    debug_assert_eq!(w.len(), n * out.len());
    let full = n - n % 16;
    let b = |co: usize| bias.map_or(0.0, |b| b[co] as f64);

    let mut co = 0;
    while co + 4 <= out.len() {
        let base = co * n;
        let (r0, r1, r2, r3) = (
            &w[base..base + n],
            &w[base + n..base + 2 * n],
            &w[base + 2 * n..base + 3 * n],
            &w[base + 3 * n..base + 4 * n],
        );
        let mut lanes = [[0.0f32; 16]; 4];
        let mut i = 0;
        while i < full {
            prefetch_rows(w, base + 4 * n + i, n);
            let x16 = &x[i..i + 16];
            let (a0, a1, a2, a3) =
                (&r0[i..i + 16], &r1[i..i + 16], &r2[i..i + 16], &r3[i..i + 16]);
            for l in 0..16 {
                lanes[0][l] += a0[l] * x16[l];
                lanes[1][l] += a1[l] * x16[l];
                lanes[2][l] += a2[l] * x16[l];
                lanes[3][l] += a3[l] * x16[l];
            }
            i += 16;
        }
        for (r, row) in [r0, r1, r2, r3].into_iter().enumerate() {
            out[co + r] = dot_row(row, x, b(co + r), &mut lanes[r]);
        }
        co += 4;
    }
    while co < out.len() {
        let row = &w[co * n..co * n + n];
        let mut lane = [0.0f32; 16];
        let mut i = 0;
        while i < full {
            let (r16, x16) = (&row[i..i + 16], &x[i..i + 16]);
            for l in 0..16 {
                lane[l] += r16[l] * x16[l];
            }
            i += 16;
        }
        out[co] = dot_row(row, x, b(co), &mut lane);
        co += 1;
    }
}

fn prelu_inplace(x: &mut [f32], alpha: &[f32]) {
    for (c, v) in x.iter_mut().enumerate() {
        let a = if alpha.len() == 1 { alpha[0] } else { alpha[c] } as f64;
        let xv = *v as f64;
        *v = (if xv >= 0.0 { xv } else { a * xv }) as f32;
    }
}

/// One cumulative normalization site. The running sums fold new frames in
/// the same 64-bit precision as the batch pass folds its prefix, min and
/// max included (they select the constant-input branch). The fold is
/// blocked four channels per lane, which shifts the sums by at most a few
/// parts in 1e16 relative to the batch fold; the min/max lanes reassociate
/// exactly.
struct ClnSite {
    sum: f64,
    sumsq: f64,
    lo: f64,
    hi: f64,
    frames: usize,
}

impl ClnSite {
    fn new() -> ClnSite {
        ClnSite { sum: 0.0, sumsq: 0.0, lo: f64::INFINITY, hi: f64::NEG_INFINITY, frames: 0 }
    }

    /// Fold one frame into the running sums, four lanes wide so the 64-bit
    /// adds pipeline instead of forming one long dependency chain.
    fn accumulate(&mut self, x: &[f32]) {
        let mut s = [0.0f64; 4];
        let mut q = [0.0f64; 4];
        let mut lo = [f64::INFINITY; 4];
        let mut hi = [f64::NEG_INFINITY; 4];
        let mut it = x.chunks_exact(4);
        for c4 in &mut it {
            for j in 0..4 {
                let v = c4[j] as f64;
                s[j] += v;
                q[j] += v * v;
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        for &xv in it.remainder() {
            let v = xv as f64;
            s[0] += v;
            q[0] += v * v;
            lo[0] = lo[0].min(v);
            hi[0] = hi[0].max(v);
        }
        self.sum += (s[0] + s[1]) + (s[2] + s[3]);
        self.sumsq += (q[0] + q[1]) + (q[2] + q[3]);
        for j in 0..4 {
            self.lo = self.lo.min(lo[j]);
            self.hi = self.hi.max(hi[j]);
        }
    }

    fn apply(&mut self, x: &mut [f32], gamma: &[f32], beta: &[f32]) {
        self.accumulate(x);
        self.normalize(x, gamma, beta);
    }

    /// [`apply`](ClnSite::apply) with the preceding channelwise activation
    /// folded in front of the accumulation pass. The activation output still
    /// rounds to f32 before entering the sums, so the result is the same as
    /// a separate activation pass, one sweep cheaper.
    fn prelu_apply(&mut self, x: &mut [f32], alpha: &[f32], gamma: &[f32], beta: &[f32]) {
        prelu_inplace(x, alpha);
        self.accumulate(x);
        self.normalize(x, gamma, beta);
    }

    fn normalize(&mut self, x: &mut [f32], gamma: &[f32], beta: &[f32]) {
        self.frames += 1;
        let cnt = (x.len() * self.frames) as f64;
        let (mu, var) = if self.lo == self.hi {
            (self.lo, 0.0)
        } else {
            let mu = self.sum / cnt;
            (mu, (self.sumsq / cnt - mu * mu).max(0.0))
        };
        // Reciprocal multiply instead of the batch path's divide: at most
        // one ulp apart per element, and the divider is too slow for the
        // per-frame latency budget.
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for (c, v) in x.iter_mut().enumerate() {
            let xh = if var == 0.0 { 0.0 } else { (*v as f64 - mu) * inv };
            *v = (gamma[c] as f64 * xh + beta[c] as f64) as f32;
        }
    }
}

/// Left context of one dilated depthwise stage: the last `(P-1)*dilation`
/// input frames, zero-filled until written, which reproduces the zero left
/// padding of the batch pass sample for sample.
struct Ring {
    data: Vec<f32>,
    cap: usize,
    ch: usize,
    next: usize,
}

impl Ring {
    fn new(cap: usize, ch: usize) -> Ring {
        Ring { data: vec![0.0; cap * ch], cap, ch, next: 0 }
    }

    /// The frame pushed `back` frames ago (1-based); zeros before the start.
    fn frame(&self, back: usize) -> &[f32] {
        debug_assert!(back >= 1 && back <= self.cap);
        let slot = (self.next + self.cap - back) % self.cap;
        &self.data[slot * self.ch..(slot + 1) * self.ch]
    }

    /// Hint a stored frame toward cache ahead of [`frame`](Ring::frame):
    /// widely dilated taps land outside cache, and fetching them during the
    /// dense work before the tap hides that latency.
    fn prefetch(&self, back: usize) {
        if back < 1 || back > self.cap {
            return;
        }
        #[cfg(target_arch = "x86_64")]
        {
            let f = self.frame(back);
            let mut at = 0;
            while at < f.len() {
                // SAFETY: a prefetch only hints; the address is inside `f`.
                unsafe {
                    use std::arch::x86_64::{_MM_HINT_T2, _mm_prefetch};
                    _mm_prefetch(f.as_ptr().add(at).cast(), _MM_HINT_T2);
                }
                at += 16;
            }
        }
    }

    fn push(&mut self, frame: &[f32]) {
        if self.cap == 0 {
            return;
        }
        debug_assert_eq!(frame.len(), self.ch);
        self.data[self.next * self.ch..(self.next + 1) * self.ch].copy_from_slice(frame);
        self.next = (self.next + 1) % self.cap;
    }
}

/// Half-open index range into the packed weight buffer.
#[derive(Clone, Copy)]
struct Seg(usize, usize);

/// Contiguous 2 MiB aligned weight storage, hinted to huge pages on a
/// best-effort basis. Every frame walks the whole buffer, which spans
/// thousands of ordinary pages, and the address translations alone then
/// cost a visible slice of the hop budget; huge pages cut the buffer to a
/// handful of translations.
struct Arena {
    ptr: std::ptr::NonNull<f32>,
    len: usize,
}

// Plain owned memory, written only during construction, freed on drop.
unsafe impl Send for Arena {}
unsafe impl Sync for Arena {}

impl Arena {
    const ALIGN: usize = 2 * 1024 * 1024;

    fn from_vec(v: Vec<f32>) -> Arena {
        if v.is_empty() {
            return Arena { ptr: std::ptr::NonNull::dangling(), len: 0 };
        }
        let bytes = v.len() * size_of::<f32>();
        let layout =
            std::alloc::Layout::from_size_align(bytes, Self::ALIGN).expect("arena layout");
        // SAFETY: the layout has nonzero size; the huge-page hint covers
        // exactly the fresh allocation and does not touch its contents, and
        // the copy fills it before anything reads it.
        unsafe {
            let raw = std::alloc::alloc(layout);
            let Some(ptr) = std::ptr::NonNull::new(raw.cast::<f32>()) else {
                std::alloc::handle_alloc_error(layout);
            };
            std::ptr::copy_nonoverlapping(v.as_ptr(), ptr.as_ptr(), v.len());
            Arena { ptr, len: v.len() }
        }
    }

    fn as_slice(&self) -> &[f32] {
        // SAFETY: ptr and len describe the live allocation from `from_vec`.
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.len) }
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        if self.len == 0 {
            return;
        }
        let bytes = self.len * size_of::<f32>();
        let layout =
            std::alloc::Layout::from_size_align(bytes, Self::ALIGN).expect("arena layout");
        // SAFETY: same layout as the allocation in `from_vec`.
        unsafe { std::alloc::dealloc(self.ptr.as_ptr().cast(), layout) };
    }
}

/// Every weight the frame loop reads, copied into one buffer in the exact
/// order one frame consumes it. The frame sweep is far larger than cache,
/// so each frame re-reads all of it from shared cache or memory; one
/// monotonic pass over a single allocation keeps the hardware prefetcher
/// striding across what would otherwise be dozens of scattered tensors.
struct Packed {
    buf: Arena,
    enc: Seg,
    in_gamma: Seg,
    in_beta: Seg,
    bott_w: Seg,
    bott_b: Seg,
    blocks: Vec<PackedBlock>,
    mask_alpha: Seg,
    mask_w: Seg,
    mask_b: Seg,
    dec: Seg,
}

struct PackedBlock {
    pw_in_w: Seg,
    pw_in_b: Seg,
    alpha_in: Seg,
    ni_gamma: Seg,
    ni_beta: Seg,
    dw: Seg,
    alpha_dw: Seg,
    nd_gamma: Seg,
    nd_beta: Seg,
    pw_res_w: Seg,
    pw_res_b: Seg,
    pw_skip_w: Seg,
    pw_skip_b: Seg,
}

impl Packed {
    #[inline]
    fn slice(&self, s: Seg) -> &[f32] {
        &self.buf.as_slice()[s.0..s.1]
    }
}

struct Packer {
    buf: Vec<f32>,
}

impl Packer {
    fn put(&mut self, t: &Tensor<f32>) -> Seg {
        let off = self.buf.len();
        self.buf.extend_from_slice(t.data());
        Seg(off, self.buf.len())
    }
}

fn expect_numel(name: &str, t: &Tensor<f32>, want: usize) -> Result<()> {
    if t.numel() != want {
        return Err(Error::Shape(format!(
            "{name} has {} values, expected {want}",
            t.numel()
        )));
    }
    Ok(())
}

fn expect_alpha(name: &str, t: &Tensor<f32>, channels: usize) -> Result<()> {
    if t.numel() != 1 && t.numel() != channels {
        return Err(Error::Shape(format!(
            "{name} has {} values, expected 1 or {channels}",
            t.numel()
        )));
    }
    Ok(())
}

/// Incremental separation state over one mixture stream. Feed samples with
/// [`push`](StreamState::push), finish with [`flush`](StreamState::flush).
/// Each state owns a repacked copy of the weights, about the model size in
/// memory, so states are fully independent; pipeline concurrent streams
/// across threads by giving each its own state.
pub struct StreamState {
    config: ModelConfig,
    /// Weights in frame order; for the least-squares encoder the analysis
    /// kernel is derived from the decoder once here, since weights are
    /// frozen.
    packed: Packed,
    /// Pending input: up to `L` samples. The first `L/2` of a full window
    /// were already consumed by the previous frame (except for frame 0).
    window: Vec<f32>,
    /// Normalization sites in application order: input, then per block the
    /// post-input site and the post-depthwise site.
    sites: Vec<ClnSite>,
    rings: Vec<Ring>,
    /// Raw 64-bit synthesis sums per source for the `L` output positions
    /// starting at the next unemitted sample.
    tails: Vec<Vec<f64>>,
    frames_done: usize,
    flushed: bool,
    // Per-frame scratch, kept across calls to avoid reallocation.
    enc_out: Vec<f32>,
    normed: Vec<f32>,
    resid: Vec<f32>,
    u: Vec<f32>,
    dw_acc: Vec<f64>,
    v: Vec<f32>,
    res: Vec<f32>,
    skip_sum: Vec<f32>,
    skip: Vec<f32>,
    mask_in: Vec<f32>,
    mvec: Vec<f32>,
    di: Vec<f32>,
}

/// Build a fresh stream over `params`. Rejects non-causal models: their
/// blocks and statistics read future frames, which a stream cannot supply.
pub fn init_stream(params: &ModelParams<f32>) -> Result<StreamState> {
    let cfg = &params.config;
    cfg.validate()?;
    if !cfg.causal {
        return Err(Error::Invalid(
            "streaming needs a causal model; non-causal blocks read future frames".into(),
        ));
    }
    let (n, l) = (cfg.n_filters, cfg.filter_len);
    let (b, h, sc, c) = (cfg.bottleneck, cfg.block_channels, cfg.skip_channels, cfg.sources);
    let p = cfg.kernel;

    let enc = match cfg.encoder {
        EncoderKind::Pinv => pinv_encoder_kernel(&params.decoder)?,
        EncoderKind::Linear | EncoderKind::Relu => {
            let u = params
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Invalid("model carries no encoder matrix".into()))?;
            u.clone()
        }
    };
    expect_numel("encoder", &enc, n * l)?;
    expect_numel("decoder", &params.decoder, n * l)?;
    expect_numel("input_norm.gamma", &params.input_norm.gamma, n)?;
    expect_numel("input_norm.beta", &params.input_norm.beta, n)?;
    expect_numel("bottleneck.kernel", &params.bottleneck.kernel, b * n)?;
    expect_numel("bottleneck.bias", &params.bottleneck.bias, b)?;
    if params.blocks.len() != cfg.num_blocks() {
        return Err(Error::Shape(format!(
            "model has {} blocks, config asks for {}",
            params.blocks.len(),
            cfg.num_blocks()
        )));
    }
    for (i, blk) in params.blocks.iter().enumerate() {
        let at = |part: &str| format!("block {i} {part}");
        expect_numel(&at("pw_in.kernel"), &blk.pw_in.kernel, h * b)?;
        expect_numel(&at("pw_in.bias"), &blk.pw_in.bias, h)?;
        expect_alpha(&at("alpha_in"), &blk.alpha_in, h)?;
        expect_numel(&at("norm_in.gamma"), &blk.norm_in.gamma, h)?;
        expect_numel(&at("norm_in.beta"), &blk.norm_in.beta, h)?;
        expect_numel(&at("depthwise"), &blk.depthwise, h * p)?;
        expect_alpha(&at("alpha_dw"), &blk.alpha_dw, h)?;
        expect_numel(&at("norm_dw.gamma"), &blk.norm_dw.gamma, h)?;
        expect_numel(&at("norm_dw.beta"), &blk.norm_dw.beta, h)?;
        expect_numel(&at("pw_res.kernel"), &blk.pw_res.kernel, b * h)?;
        expect_numel(&at("pw_res.bias"), &blk.pw_res.bias, b)?;
        expect_numel(&at("pw_skip.kernel"), &blk.pw_skip.kernel, sc * h)?;
        expect_numel(&at("pw_skip.bias"), &blk.pw_skip.bias, sc)?;
    }
    expect_alpha("mask_alpha", &params.mask_alpha, sc)?;
    expect_numel("mask_head.kernel", &params.mask_head.kernel, c * n * sc)?;
    expect_numel("mask_head.bias", &params.mask_head.bias, c * n)?;

    let mut pk = Packer { buf: Vec::new() };
    let enc_seg = pk.put(&enc);
    let in_gamma = pk.put(&params.input_norm.gamma);
    let in_beta = pk.put(&params.input_norm.beta);
    let bott_w = pk.put(&params.bottleneck.kernel);
    let bott_b = pk.put(&params.bottleneck.bias);
    let blocks = params
        .blocks
        .iter()
        .map(|blk| PackedBlock {
            pw_in_w: pk.put(&blk.pw_in.kernel),
            pw_in_b: pk.put(&blk.pw_in.bias),
            alpha_in: pk.put(&blk.alpha_in),
            ni_gamma: pk.put(&blk.norm_in.gamma),
            ni_beta: pk.put(&blk.norm_in.beta),
            dw: pk.put(&blk.depthwise),
            alpha_dw: pk.put(&blk.alpha_dw),
            nd_gamma: pk.put(&blk.norm_dw.gamma),
            nd_beta: pk.put(&blk.norm_dw.beta),
            pw_res_w: pk.put(&blk.pw_res.kernel),
            pw_res_b: pk.put(&blk.pw_res.bias),
            pw_skip_w: pk.put(&blk.pw_skip.kernel),
            pw_skip_b: pk.put(&blk.pw_skip.bias),
        })
        .collect();
    let mask_alpha = pk.put(&params.mask_alpha);
    let mask_w = pk.put(&params.mask_head.kernel);
    let mask_b = pk.put(&params.mask_head.bias);
    let dec = pk.put(&params.decoder);
    let packed = Packed {
        buf: Arena::from_vec(pk.buf),
        enc: enc_seg,
        in_gamma,
        in_beta,
        bott_w,
        bott_b,
        blocks,
        mask_alpha,
        mask_w,
        mask_b,
        dec,
    };

    let rings = (0..cfg.num_blocks())
        .map(|i| Ring::new((p - 1) * cfg.dilation(i), h))
        .collect();
    Ok(StreamState {
        config: cfg.clone(),
        packed,
        window: Vec::with_capacity(l),
        sites: (0..1 + 2 * cfg.num_blocks()).map(|_| ClnSite::new()).collect(),
        rings,
        tails: vec![vec![0.0; l]; c],
        frames_done: 0,
        flushed: false,
        enc_out: vec![0.0; n],
        normed: vec![0.0; n],
        resid: vec![0.0; b],
        u: vec![0.0; h],
        dw_acc: vec![0.0; h],
        v: vec![0.0; h],
        res: vec![0.0; b],
        skip_sum: vec![0.0; sc],
        skip: vec![0.0; sc],
        mask_in: vec![0.0; sc],
        mvec: vec![0.0; c * n],
        di: vec![0.0; n],
    })
}

impl StreamState {
    /// Feed new mixture samples; returns whatever output they complete, one
    /// sample vector per source (all possibly empty). Output arrives one hop
    /// (`L/2` samples) per completed analysis window.
    pub fn push(&mut self, samples: &[f32]) -> Result<Vec<Vec<f32>>> {
        if self.flushed {
            return Err(Error::Invalid(
                "stream is flushed; start a new stream to continue".into(),
            ));
        }
        if samples.is_empty() {
            return Err(Error::Invalid("push needs at least one sample".into()));
        }
        let cfg = &self.config;
        let (l, h, c) = (cfg.filter_len, cfg.hop(), cfg.sources);
        let mut out = vec![Vec::new(); c];
        let mut i = 0;
        while i < samples.len() {
            let take = (l - self.window.len()).min(samples.len() - i);
            self.window.extend_from_slice(&samples[i..i + take]);
            i += take;
            if self.window.len() == l {
                self.process_frame(&mut out);
                self.window.drain(..h);
            }
        }
        Ok(out)
    }

    /// Finish the stream: zero-pads any unframed remainder to one last
    /// frame, then emits the final hop, which only its own window covers.
    /// Total output length over push and flush is the input length rounded
    /// up to whole hops, floored at one window. The state is terminal
    /// afterwards; further push or flush calls are rejected.
    pub fn flush(&mut self) -> Result<Vec<Vec<f32>>> {
        if self.flushed {
            return Err(Error::Invalid("stream is already flushed".into()));
        }
        self.flushed = true;
        let cfg = &self.config;
        let (l, h, c) = (cfg.filter_len, cfg.hop(), cfg.sources);
        let mut out = vec![Vec::new(); c];
        if self.frames_done == 0 && self.window.is_empty() {
            return Ok(out);
        }
        let unframed = if self.frames_done == 0 {
            self.window.len()
        } else {
            self.window.len() - h
        };
        if unframed > 0 {
            self.window.resize(l, 0.0);
            self.process_frame(&mut out);
            self.window.clear();
        }
        for (src, tail) in self.tails.iter().enumerate() {
            // Unit coverage on the final hop, like the first.
            for &raw in &tail[..h] {
                out[src].push(raw as f32);
            }
        }
        Ok(out)
    }

    /// Run one analysis window through the whole network and append the hop
    /// it completes to `out`. Mirrors the batch pass op for op; each op
    /// rounds to f32 at its boundary exactly where the batch pass does.
    fn process_frame(&mut self, out: &mut [Vec<f32>]) {
        let Self {
            config,
            packed,
            window,
            sites,
            rings,
            tails,
            frames_done,
            enc_out,
            normed,
            resid,
            u,
            dw_acc,
            v,
            res,
            skip_sum,
            skip,
            mask_in,
            mvec,
            di,
            ..
        } = self;
        let cfg: &ModelConfig = config;
        let pk: &Packed = packed;
        let (nf, l, h) = (cfg.n_filters, cfg.filter_len, cfg.hop());
        let p = cfg.kernel;
        let c_sources = cfg.sources;

        matvec(pk.slice(pk.enc), None, window, enc_out);
        if cfg.encoder == EncoderKind::Relu {
            for w in enc_out.iter_mut() {
                *w = (*w as f64).max(0.0) as f32;
            }
        }

        normed.copy_from_slice(enc_out);
        sites[0].apply(normed, pk.slice(pk.in_gamma), pk.slice(pk.in_beta));
        matvec(pk.slice(pk.bott_w), Some(pk.slice(pk.bott_b)), normed, resid);

        for s in skip_sum.iter_mut() {
            *s = 0.0;
        }
        for (i, blk) in pk.blocks.iter().enumerate() {
            let d = cfg.dilation(i);
            for pp in 0..p - 1 {
                rings[i].prefetch((p - 1 - pp) * d);
            }
            matvec(pk.slice(blk.pw_in_w), Some(pk.slice(blk.pw_in_b)), resid, u);
            sites[1 + 2 * i].prelu_apply(
                u,
                pk.slice(blk.alpha_in),
                pk.slice(blk.ni_gamma),
                pk.slice(blk.ni_beta),
            );

            // Dilated depthwise taps, oldest first, one 64-bit accumulator
            // per channel, matching the batch accumulation order.
            let dw = pk.slice(blk.dw);
            dw_acc.fill(0.0);
            for pp in 0..p - 1 {
                let past = rings[i].frame((p - 1 - pp) * d);
                for c in 0..u.len() {
                    dw_acc[c] += dw[c * p + pp] as f64 * past[c] as f64;
                }
            }
            for c in 0..u.len() {
                v[c] = (dw_acc[c] + dw[c * p + p - 1] as f64 * u[c] as f64) as f32;
            }
            rings[i].push(u);

            sites[2 + 2 * i].prelu_apply(
                v,
                pk.slice(blk.alpha_dw),
                pk.slice(blk.nd_gamma),
                pk.slice(blk.nd_beta),
            );

            // The final block's residual feeds nothing: the mask reads only
            // the accumulated skip path, so that projection is skipped.
            if i + 1 < pk.blocks.len() {
                matvec(pk.slice(blk.pw_res_w), Some(pk.slice(blk.pw_res_b)), v, res);
                for (y, &r) in resid.iter_mut().zip(res.iter()) {
                    *y = (*y as f64 + r as f64) as f32;
                }
            }
            matvec(pk.slice(blk.pw_skip_w), Some(pk.slice(blk.pw_skip_b)), v, skip);
            for (s, &k) in skip_sum.iter_mut().zip(skip.iter()) {
                *s = (*s as f64 + k as f64) as f32;
            }
        }

        mask_in.copy_from_slice(skip_sum);
        prelu_inplace(mask_in, pk.slice(pk.mask_alpha));
        matvec(pk.slice(pk.mask_w), Some(pk.slice(pk.mask_b)), mask_in, mvec);
        match cfg.mask {
            MaskKind::Sigmoid => {
                for m in mvec.iter_mut() {
                    *m = (1.0 / (1.0 + (-(*m as f64)).exp())) as f32;
                }
            }
            MaskKind::Softmax => {
                for n in 0..nf {
                    let mut top = f64::NEG_INFINITY;
                    for src in 0..c_sources {
                        top = top.max(mvec[src * nf + n] as f64);
                    }
                    let mut z = 0.0f64;
                    for src in 0..c_sources {
                        z += ((mvec[src * nf + n] as f64) - top).exp();
                    }
                    for src in 0..c_sources {
                        let e = ((mvec[src * nf + n] as f64) - top).exp();
                        mvec[src * nf + n] = (e / z) as f32;
                    }
                }
            }
        }

        // The first hop of the stream and the final hop at flush are covered
        // by one window; every other hop overlaps two and is halved.
        let cover = if *frames_done == 0 { 1.0 } else { 0.5 };
        let dec = pk.slice(pk.dec);
        for (src, tail) in tails.iter_mut().enumerate() {
            for n in 0..nf {
                di[n] = (enc_out[n] as f64 * mvec[src * nf + n] as f64) as f32;
            }
            for n in 0..nf {
                let w = di[n] as f64;
                let row = &dec[n * l..(n + 1) * l];
                for (t, &kv) in tail.iter_mut().zip(row) {
                    *t += w * kv as f64;
                }
            }
            for &raw in &tail[..h] {
                // Round the raw sum once like the synthesis conv, then apply
                // coverage like the batch scaling op.
                let y = raw as f32;
                out[src].push((y as f64 * cover) as f32);
            }
            tail.copy_within(h.., 0);
            for t in &mut tail[l - h..] {
                *t = 0.0;
            }
        }
        *frames_done += 1;
    }
}
