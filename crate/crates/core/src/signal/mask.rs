//! Ideal time-frequency masks computed from clean sources, used as oracle
//! upper bounds: binary (winner-take-all per bin), ratio (magnitude share),
//! and Wiener (power share). Separation applies the mask to the source
//! sum's spectrogram, keeping its phase.

use super::stft::{STFT_BINS, Spectrogram, istft, stft};
use super::AudioClip;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMask {
    /// One-hot per bin: the source with the largest magnitude wins, ties
    /// go to the lower index.
    Binary,
    /// Magnitude share |S_i| / sum_j |S_j|.
    Ratio,
    /// Power share |S_i|^2 / sum_j |S_j|^2.
    Wiener,
}

impl OracleMask {
    /// Parse the conventional short names.
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ibm" => Ok(OracleMask::Binary),
            "irm" => Ok(OracleMask::Ratio),
            "wfm" => Ok(OracleMask::Wiener),
            other => Err(Error::Invalid(format!(
                "unknown mask kind {other:?}; expected ibm, irm, or wfm"
            ))),
        }
    }
}

impl std::fmt::Display for OracleMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OracleMask::Binary => "ibm",
            OracleMask::Ratio => "irm",
            OracleMask::Wiener => "wfm",
        })
    }
}

/// Real-valued mask over a spectrogram grid, row-major `[frame][bin]`.
#[derive(Clone, Debug)]
pub struct TfMask {
    pub frames: usize,
    pub data: Vec<f64>,
}

/// Compute per-source masks from the clean sources and separate their sum
/// with them. Returns (masks, separated clips); separated clips have the
/// sources' length.
pub fn ideal_masks(
    kind: OracleMask,
    sources: &[AudioClip],
) -> Result<(Vec<TfMask>, Vec<AudioClip>)> {
    let c = sources.len();
    if c < 2 {
        return Err(Error::Invalid(format!("need at least two sources, got {c}")));
    }
    let len = sources[0].len();
    let rate = sources[0].sample_rate;
    for (i, s) in sources.iter().enumerate() {
        if s.len() != len || s.sample_rate != rate {
            return Err(Error::Shape(format!(
                "source {i} is {} samples at {} Hz, source 0 is {len} at {rate}",
                s.len(),
                s.sample_rate
            )));
        }
        if s.samples.iter().all(|&v| v == 0.0) {
            return Err(Error::Invalid(format!("source {i} is identically zero")));
        }
    }

    let mut mix = vec![0.0f32; len];
    for s in sources {
        for (m, &v) in mix.iter_mut().zip(&s.samples) {
            *m += v;
        }
    }
    let mix_spec = stft(&AudioClip::new(mix, rate)?)?;
    let mags: Vec<Vec<f64>> = sources
        .iter()
        .map(|s| Ok(stft(s)?.data.iter().map(|z| z.norm()).collect()))
        .collect::<Result<_>>()?;

    let bins = mix_spec.frames * STFT_BINS;
    let mut masks = vec![
        TfMask { frames: mix_spec.frames, data: vec![0.0; bins] };
        c
    ];
    for b in 0..bins {
        match kind {
            OracleMask::Binary => {
                let mut winner = 0;
                for i in 1..c {
                    if mags[i][b] > mags[winner][b] {
                        winner = i;
                    }
                }
                masks[winner].data[b] = 1.0;
            }
            OracleMask::Ratio => {
                let denom: f64 = mags.iter().map(|m| m[b]).sum();
                for i in 0..c {
                    masks[i].data[b] = if denom > 0.0 { mags[i][b] / denom } else { 1.0 / c as f64 };
                }
            }
            OracleMask::Wiener => {
                let denom: f64 = mags.iter().map(|m| m[b] * m[b]).sum();
                for i in 0..c {
                    masks[i].data[b] =
                        if denom > 0.0 { mags[i][b] * mags[i][b] / denom } else { 1.0 / c as f64 };
                }
            }
        }
    }

    let mut separated = Vec::with_capacity(c);
    for mask in &masks {
        let data = mix_spec.data.iter().zip(&mask.data).map(|(z, &m)| z * m).collect();
        let spec = Spectrogram { data, ..mix_spec.clone() };
        separated.push(istft(&spec)?);
    }
    Ok((masks, separated))
}
