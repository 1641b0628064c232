//! Short-time Fourier analysis used by the mask oracles: 256-sample Hann
//! window (32 ms at 8 kHz), 64-sample hop, one-sided 129-bin frames.
//! Synthesis divides the windowed overlap-add by the accumulated squared
//! window, so any sample with nonzero window coverage reconstructs exactly.

use super::AudioClip;
use crate::{Error, Result};
use rustfft::FftPlanner;
use rustfft::num_complex::Complex;

pub const STFT_WINDOW: usize = 256;
pub const STFT_HOP: usize = 64;
pub const STFT_BINS: usize = STFT_WINDOW / 2 + 1;

/// One-sided complex spectrogram, row-major `[frame][bin]`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub sample_rate: u32,
    /// Analyzed waveform length; synthesis restores exactly this many
    /// samples (trailing samples past the last whole window come back as
    /// zeros).
    pub len: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn bin(&self, frame: usize, bin: usize) -> Complex<f64> {
        self.data[frame * STFT_BINS + bin]
    }
}

/// Periodic Hann window: w[n] = 0.5(1 - cos(2*pi*n/N)).
fn hann() -> Vec<f64> {
    (0..STFT_WINDOW)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / STFT_WINDOW as f64).cos()))
        .collect()
}

pub fn stft(clip: &AudioClip) -> Result<Spectrogram> {
    let t = clip.len();
    if t < STFT_WINDOW {
        return Err(Error::Invalid(format!(
            "analysis needs at least {STFT_WINDOW} samples, got {t}"
        )));
    }
    let frames = (t - STFT_WINDOW) / STFT_HOP + 1;
    let w = hann();
    let fft = FftPlanner::new().plan_fft_forward(STFT_WINDOW);
    let mut data = Vec::with_capacity(frames * STFT_BINS);
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_WINDOW];
    for f in 0..frames {
        let s = f * STFT_HOP;
        for n in 0..STFT_WINDOW {
            buf[n] = Complex::new(clip.samples[s + n] as f64 * w[n], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..STFT_BINS]);
    }
    Ok(Spectrogram { frames, sample_rate: clip.sample_rate, len: t, data })
}

pub fn istft(spec: &Spectrogram) -> Result<AudioClip> {
    if spec.frames == 0 || spec.data.len() != spec.frames * STFT_BINS {
        return Err(Error::Shape(format!(
            "spectrogram holds {} values for {} frames of {STFT_BINS} bins",
            spec.data.len(),
            spec.frames
        )));
    }
    let w = hann();
    let ifft = FftPlanner::new().plan_fft_inverse(STFT_WINDOW);
    let mut num = vec![0.0f64; spec.len];
    let mut den = vec![0.0f64; spec.len];
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_WINDOW];
    for f in 0..spec.frames {
        let s = f * STFT_HOP;
        buf[..STFT_BINS].copy_from_slice(&spec.data[f * STFT_BINS..(f + 1) * STFT_BINS]);
        for k in STFT_BINS..STFT_WINDOW {
            buf[k] = buf[STFT_WINDOW - k].conj();
        }
        ifft.process(&mut buf);
        for n in 0..STFT_WINDOW {
            if s + n >= spec.len {
                break;
            }
            let y = buf[n].re / STFT_WINDOW as f64;
            num[s + n] += w[n] * y;
            den[s + n] += w[n] * w[n];
        }
    }
    let samples = num
        .iter()
        .zip(&den)
        .map(|(&n, &d)| if d > 1e-12 { (n / d) as f32 } else { 0.0 })
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_signal(len: usize) -> AudioClip {
        // Mixed tones plus a drifting component so no bin is degenerate.
        let samples = (0..len)
            .map(|i| {
                let t = i as f32;
                (t * 0.21).sin() * 0.4 + (t * 0.83).cos() * 0.3 + (t * 0.031).sin() * 0.2
            })
            .collect();
        AudioClip::new(samples, 8000).unwrap()
    }

    #[test]
    fn bin_count_and_frame_count() {
        let spec = stft(&test_signal(1056)).unwrap();
        // (1056 - 256)/64 + 1 = 13 whole windows.
        assert_eq!(spec.frames, 13);
        assert_eq!(spec.data.len(), 13 * 129);
        assert_eq!(STFT_BINS, 129);
    }

    #[test]
    fn roundtrip_reconstructs_interior() {
        let x = test_signal(1056);
        let back = istft(&stft(&x).unwrap()).unwrap();
        assert_eq!(back.len(), x.len());
        // Interior: one window in from each edge of the framed span.
        let framed_end = 12 * STFT_HOP + STFT_WINDOW;
        let mut worst = 0.0f32;
        for t in STFT_WINDOW..framed_end - STFT_WINDOW {
            worst = worst.max((back.samples[t] - x.samples[t]).abs());
        }
        assert!(worst < 1e-6, "max interior error {worst}");
    }

    #[test]
    fn coverage_normalization_reconstructs_partial_edges_too() {
        let x = test_signal(512);
        let back = istft(&stft(&x).unwrap()).unwrap();
        // Every sample with nonzero window coverage comes back; only t = 0
        // (where the Hann window is exactly zero) and the unframed tail are
        // not representable.
        for t in 1..(4 * STFT_HOP + STFT_WINDOW).min(512) {
            assert!(
                (back.samples[t] - x.samples[t]).abs() < 1e-5,
                "sample {t}: {} vs {}",
                back.samples[t],
                x.samples[t]
            );
        }
    }

    #[test]
    fn tone_lands_on_its_bin() {
        // 1 kHz at 8 kHz with a 256-point transform: bin 1000/(8000/256) = 32.
        let samples: Vec<f32> = (0..2048)
            .map(|i| (2.0 * std::f32::consts::PI * 1000.0 * i as f32 / 8000.0).sin() * 0.5)
            .collect();
        let spec = stft(&AudioClip::new(samples, 8000).unwrap()).unwrap();
        let mut energy = vec![0.0f64; STFT_BINS];
        for f in 0..spec.frames {
            for k in 0..STFT_BINS {
                energy[k] += spec.bin(f, k).norm_sqr();
            }
        }
        let peak = (0..STFT_BINS).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
        assert_eq!(peak, 32);
        let total: f64 = energy.iter().sum();
        let near: f64 = energy[31..=33].iter().sum();
        assert!(near / total > 0.99, "leakage: {}", near / total);
    }

    #[test]
    fn parseval_per_frame() {
        let x = test_signal(640);
        let spec = stft(&x).unwrap();
        let w = hann();
        for f in 0..spec.frames {
            // One-sided energy: double every bin except DC and Nyquist.
            let mut freq = 0.0f64;
            for k in 0..STFT_BINS {
                let e = spec.bin(f, k).norm_sqr();
                freq += if k == 0 || k == STFT_BINS - 1 { e } else { 2.0 * e };
            }
            let mut time = 0.0f64;
            for n in 0..STFT_WINDOW {
                let v = x.samples[f * STFT_HOP + n] as f64 * w[n];
                time += v * v;
            }
            let rel = (freq - STFT_WINDOW as f64 * time).abs() / (STFT_WINDOW as f64 * time);
            assert!(rel < 1e-5, "frame {f}: relative error {rel}");
        }
    }

    #[test]
    fn short_input_rejected() {
        assert!(stft(&AudioClip::new(vec![0.1; 255], 8000).unwrap()).is_err());
    }
}
