use crate::{Error, Result};

/// A mono waveform with its sample rate. Nominal range is [-1, 1]; values
/// are required finite but not clamped, since intermediate estimates may
/// overshoot slightly. PCM writing clamps at the file boundary instead.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Invalid("sample_rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_zero_rate() {
        assert!(AudioClip::new(vec![0.0, f32::NAN], 8000).is_err());
        assert!(AudioClip::new(vec![0.0], 0).is_err());
        let c = AudioClip::new(vec![0.0; 4000], 8000).unwrap();
        assert!((c.duration_seconds() - 0.5).abs() < 1e-12);
    }
}
