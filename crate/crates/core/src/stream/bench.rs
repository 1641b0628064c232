//! Wall-clock time per frame of the streaming engine.

use super::init_stream;
use crate::model::ModelParams;
use crate::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Timing summary of [`bench_tpf`]. The stream keeps up with real time when
/// a frame is processed faster than the hop it advances.
#[derive(Clone, Debug)]
pub struct TpfReport {
    /// Frames timed in the reported trial, warmup excluded.
    pub frames: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    /// Wall-clock time one hop spans: `L/2 / sample_rate`, in ms.
    pub hop_ms: f64,
    /// `mean_ms < hop_ms`.
    pub real_time: bool,
    /// Mean of every trial in run order; `mean_ms` is the smallest.
    pub trial_means_ms: Vec<f64>,
}

/// Measure time per frame: feed `seconds` of synthetic audio hop by hop
/// through a fresh stream, timing each push once the stream is primed so
/// every push completes exactly one frame. The first tenth of each trial is
/// warmup and not counted. Each trial repeats the whole measurement, and
/// the trial with the lowest mean is reported: contention from outside the
/// process only ever adds time, so the least-disturbed trial is the best
/// estimate of what the engine itself costs.
pub fn bench_tpf(params: &ModelParams<f32>, seconds: f64, trials: usize) -> Result<TpfReport> {
    if !seconds.is_finite() || seconds <= 0.0 {
        return Err(Error::Invalid(format!(
            "bench duration must be positive, got {seconds}"
        )));
    }
    if trials == 0 {
        return Err(Error::Invalid("bench needs at least one trial".into()));
    }
    let cfg = &params.config;
    let (l, h) = (cfg.filter_len, cfg.hop());
    let frames = (seconds * cfg.sample_rate as f64 / h as f64).ceil() as usize;
    if frames < 2 {
        return Err(Error::Invalid(format!(
            "{seconds} s is under two frames of audio; nothing to measure"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x7f5);
    let audio: Vec<f32> = (0..l - h + frames * h)
        .map(|_| rng.random_range(-0.5f32..0.5))
        .collect();
    let warmup = (frames / 10).max(1).min(frames - 1);

    let mut trial_means_ms = Vec::with_capacity(trials);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..trials {
        let mut times_ms = Vec::with_capacity(frames - warmup);
        let mut stream = init_stream(params)?;
        stream.push(&audio[..l - h])?;
        for (f, hop) in audio[l - h..].chunks(h).enumerate() {
            let t0 = Instant::now();
            let out = stream.push(hop)?;
            let dt = t0.elapsed().as_secs_f64() * 1e3;
            debug_assert!(out.iter().all(|o| o.len() == h));
            if f >= warmup {
                times_ms.push(dt);
            }
        }
        let mean_ms = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
        trial_means_ms.push(mean_ms);
        if best.as_ref().is_none_or(|(m, _)| mean_ms < *m) {
            best = Some((mean_ms, times_ms));
        }
    }

    let (mean_ms, mut times_ms) = best.expect("at least one trial ran");
    times_ms.sort_by(f64::total_cmp);
    let p95_ms =
        times_ms[((0.95 * times_ms.len() as f64).ceil() as usize).clamp(1, times_ms.len()) - 1];
    let hop_ms = h as f64 / cfg.sample_rate as f64 * 1e3;
    Ok(TpfReport {
        frames: times_ms.len(),
        mean_ms,
        p95_ms,
        hop_ms,
        real_time: mean_ms < hop_ms,
        trial_means_ms,
    })
}
