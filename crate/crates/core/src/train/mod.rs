//! End-to-end optimization: permutation-invariant SI-SNR loss, Adam with
//! gradient clipping, segment batching, and validation-driven learning-rate
//! halving.

mod loss;
mod optim;

pub use loss::{SI_SNR_CAP_DB, permutations, si_snr, si_snr_value, upit_loss};
pub use optim::{AdamState, LrSchedule, adam_step, clip_gradients};

use crate::model::{self, ModelParams};
use crate::signal::AudioClip;
use crate::tensor::{Element, Tape, Tensor, add, backward, mul_const};
use crate::{Error, Result};
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Utterances as (mixture, references) pairs, all at the model sample rate.
pub type Dataset = Vec<(AudioClip, Vec<AudioClip>)>;

/// Optimization schedule. Field names double as the JSON config keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Training window length; file tails shorter than this are dropped.
    pub segment_seconds: f64,
    pub lr_initial: f64,
    /// Epochs without validation improvement before the rate halves.
    pub lr_halve_patience: usize,
    /// Global gradient L2 bound.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Optional early stop: end training once mean SI-SNR improvement on
    /// the training set reaches this many dB (checked at epoch ends).
    pub target_train_si_snri: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            segment_seconds: 4.0,
            lr_initial: 1e-3,
            lr_halve_patience: 3,
            clip_norm: 5.0,
            batch_size: 4,
            seed: 0,
            max_steps: None,
            target_train_si_snri: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be positive".into()));
        }
        if self.lr_halve_patience == 0 {
            return Err(Error::Invalid("lr_halve_patience must be at least 1".into()));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Invalid("segment_seconds must be positive".into()));
        }
        if !(self.lr_initial > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Invalid("lr_initial and clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss (negated mean SI-SNR over winning assignments).
    pub train_loss: f64,
    /// Mean SI-SNR improvement over the validation set, dB.
    pub valid_si_snri: f64,
    /// Learning rate in effect during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: usize,
    pub wall_seconds: f64,
    pub best_epoch: usize,
    pub best_valid_si_snri: f64,
}

fn check_dataset<E: Element>(
    params: &ModelParams<E>,
    set: &Dataset,
    label: &str,
) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data(format!("{label} dataset is empty")));
    }
    let cfg = &params.config;
    for (i, (mix, refs)) in set.iter().enumerate() {
        if refs.len() != cfg.sources {
            return Err(Error::Data(format!(
                "{label} utterance {i}: {} references, model separates {}",
                refs.len(),
                cfg.sources
            )));
        }
        if mix.sample_rate != cfg.sample_rate
            || refs.iter().any(|r| r.sample_rate != cfg.sample_rate)
        {
            return Err(Error::Data(format!(
                "{label} utterance {i}: sample rate differs from the model's {}",
                cfg.sample_rate
            )));
        }
        if refs.iter().any(|r| r.len() != mix.len()) {
            return Err(Error::Data(format!(
                "{label} utterance {i}: reference length differs from the mixture"
            )));
        }
    }
    Ok(())
}

/// Mean SI-SNR improvement of the model over a dataset: per utterance, the
/// best-assignment mean SI-SNR of the estimates minus the mixture baseline.
pub fn mean_si_snri<E: Element>(params: &ModelParams<E>, set: &Dataset) -> Result<f64> {
    let mut total = 0.0f64;
    for (mix, refs) in set {
        let estimates = model::forward(params, mix)?;
        let c = refs.len();
        let mut scores = vec![vec![0.0f64; c]; c];
        for (i, est) in estimates.iter().enumerate() {
            for (j, r) in refs.iter().enumerate() {
                scores[i][j] = si_snr_value(&est.samples, &r.samples)?;
            }
        }
        let best = permutations(c)
            .into_iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| scores[i][j]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
            / c as f64;
        let mut base = 0.0f64;
        for r in refs {
            base += si_snr_value(&mix.samples, &r.samples)?;
        }
        total += best - base / c as f64;
    }
    Ok(total / set.len() as f64)
}

/// Optimize `params` and return the epoch-by-epoch report together with a
/// snapshot of the parameters at the best validation score. Deterministic
/// for fixed seeds: shuffling, batching, and all arithmetic run in a fixed
/// order.
pub fn fit<E: Element>(
    params: &mut ModelParams<E>,
    train: &Dataset,
    valid: &Dataset,
    tc: &TrainConfig,
) -> Result<(TrainReport, ModelParams<E>)> {
    tc.validate()?;
    check_dataset(params, train, "train")?;
    check_dataset(params, valid, "valid")?;
    let cfg = params.config.clone();
    let seg = (tc.segment_seconds * cfg.sample_rate as f64).round() as usize;
    if seg < cfg.filter_len {
        return Err(Error::Invalid(format!(
            "segment of {seg} samples is shorter than one frame ({})",
            cfg.filter_len
        )));
    }

    // (utterance, start) for every whole segment; short tails are dropped.
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for (u, (mix, _)) in train.iter().enumerate() {
        let mut start = 0;
        while start + seg <= mix.len() {
            segments.push((u, start));
            start += seg;
        }
    }
    if segments.is_empty() {
        return Err(Error::Data(format!(
            "no training utterance is as long as one segment ({seg} samples)"
        )));
    }

    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = AdamState::new(params);
    let mut sched = LrSchedule::new(tc.lr_initial, tc.lr_halve_patience);
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        wall_seconds: 0.0,
        best_epoch: 0,
        best_valid_si_snri: f64::NEG_INFINITY,
    };
    let mut best: Option<ModelParams<E>> = None;

    'epochs: for epoch in 1..=tc.epochs {
        let lr = sched.lr;
        let mut order = segments.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|cap| report.steps >= cap) {
                break;
            }
            let tape = Tape::new();
            let mut batch_loss: Option<Tensor<E>> = None;
            for &(u, start) in batch {
                let (mix, refs) = &train[u];
                let x = segment_tensor::<E>(mix, start, seg)?;
                let estimates = model::forward_padded(Some(&tape), params, &x)?;
                let references = refs
                    .iter()
                    .map(|r| segment_tensor::<E>(r, start, seg))
                    .collect::<Result<Vec<_>>>()?;
                let (item, _) = upit_loss(Some(&tape), &estimates, &references)?;
                batch_loss = Some(match batch_loss {
                    None => item,
                    Some(acc) => add(Some(&tape), &acc, &item)?,
                });
            }
            let loss = mul_const(
                Some(&tape),
                &batch_loss.expect("non-empty batch"),
                1.0 / batch.len() as f64,
            )?;
            backward(&tape, &loss)?;
            clip_gradients(params, tc.clip_norm)?;
            adam_step(params, &mut adam, lr)?;
            if let Some(name) = params.any_non_finite() {
                return Err(Error::Numeric(format!(
                    "parameter {name} became non-finite at step {}",
                    report.steps + 1
                )));
            }
            loss_sum += loss.item()?.to_f64();
            batches += 1;
            report.steps += 1;
        }
        if batches == 0 {
            break 'epochs;
        }

        let valid_si_snri = mean_si_snri(params, valid)?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            valid_si_snri,
            lr,
        });
        if valid_si_snri > report.best_valid_si_snri {
            report.best_valid_si_snri = valid_si_snri;
            report.best_epoch = epoch;
            best = Some(params.clone());
        }
        sched.observe(valid_si_snri);

        if tc.max_steps.is_some_and(|cap| report.steps >= cap) {
            break;
        }
        if let Some(target) = tc.target_train_si_snri
            && mean_si_snri(params, train)? >= target
        {
            break;
        }
    }

    report.wall_seconds = t0.elapsed().as_secs_f64();
    let best = best.unwrap_or_else(|| params.clone());
    Ok((report, best))
}

fn segment_tensor<E: Element>(clip: &AudioClip, start: usize, seg: usize) -> Result<Tensor<E>> {
    let data: Vec<E> = clip.samples[start..start + seg]
        .iter()
        .map(|&v| E::from_f64(v as f64))
        .collect();
    Tensor::from_vec(vec![1, seg], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            n_filters: 8,
            filter_len: 4,
            bottleneck: 4,
            block_channels: 8,
            skip_channels: 4,
            kernel: 3,
            blocks_per_repeat: 2,
            repeats: 1,
            sources: 2,
            sample_rate: 80,
            ..ModelConfig::default()
        }
    }

    fn toy_dataset() -> Dataset {
        // Two utterances of 80 samples; sources are distinct tones.
        (0..2)
            .map(|u| {
                let f0 = 0.2 + 0.1 * u as f32;
                let f1 = 0.9 + 0.2 * u as f32;
                let s0: Vec<f32> = (0..80).map(|i| (i as f32 * f0).sin() * 0.5).collect();
                let s1: Vec<f32> = (0..80).map(|i| (i as f32 * f1).cos() * 0.5).collect();
                let mix: Vec<f32> = s0.iter().zip(&s1).map(|(a, b)| a + b).collect();
                (
                    AudioClip::new(mix, 80).unwrap(),
                    vec![AudioClip::new(s0, 80).unwrap(), AudioClip::new(s1, 80).unwrap()],
                )
            })
            .collect()
    }

    fn toy_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            segment_seconds: 0.5,
            batch_size: 2,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn fit_runs_and_replays_deterministically() {
        let data = toy_dataset();
        let tc = toy_train_config();
        let mut p1 = crate::model::build::<f32>(&micro_config(), 3).unwrap();
        let mut p2 = p1.clone();
        let (r1, best) = fit(&mut p1, &data, &data, &tc).unwrap();
        let (r2, _) = fit(&mut p2, &data, &data, &tc).unwrap();

        assert_eq!(r1.epochs.len(), 2);
        // 2 utterances x 2 segments / batch of 2 = 2 steps per epoch.
        assert_eq!(r1.steps, 4);
        assert!((r1.epochs[0].train_loss - r2.epochs[0].train_loss).abs() < 1e-6);
        assert_eq!(r1.best_epoch >= 1, true);
        assert!(r1.best_valid_si_snri.is_finite());
        assert!(best.any_non_finite().is_none());
        // The learning rate never rises and the report tracks it.
        assert!(r1.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    }

    #[test]
    fn fit_respects_step_cap() {
        let data = toy_dataset();
        let tc = TrainConfig { epochs: 10, max_steps: Some(3), ..toy_train_config() };
        let mut p = crate::model::build::<f32>(&micro_config(), 3).unwrap();
        let (report, _) = fit(&mut p, &data, &data, &tc).unwrap();
        assert_eq!(report.steps, 3);
    }

    #[test]
    fn fit_rejects_malformed_datasets() {
        let tc = toy_train_config();
        let mut p = crate::model::build::<f32>(&micro_config(), 3).unwrap();
        let empty: Dataset = Vec::new();
        assert!(fit(&mut p, &empty, &empty, &tc).is_err());

        let data = toy_dataset();
        let mut wrong_refs = data.clone();
        wrong_refs[0].1.pop();
        let err = fit(&mut p, &wrong_refs, &data, &tc).unwrap_err();
        assert!(err.to_string().contains("utterance 0"), "{err}");

        let mut wrong_rate = data.clone();
        wrong_rate[1].0 = AudioClip::new(wrong_rate[1].0.samples.clone(), 44100).unwrap();
        assert!(fit(&mut p, &wrong_rate, &data, &tc).is_err());

        let mut short_ref = data.clone();
        short_ref[0].1[0] = AudioClip::new(vec![0.1; 40], 80).unwrap();
        assert!(fit(&mut p, &short_ref, &data, &tc).is_err());
    }

    #[test]
    fn config_defaults_follow_recipe() {
        let tc = TrainConfig::default();
        assert_eq!(tc.epochs, 100);
        assert_eq!(tc.segment_seconds, 4.0);
        assert_eq!(tc.lr_initial, 1e-3);
        assert_eq!(tc.lr_halve_patience, 3);
        assert_eq!(tc.clip_norm, 5.0);
        assert!(tc.validate().is_ok());
        assert!(TrainConfig { lr_halve_patience: 0, ..tc }.validate().is_err());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(ok.epochs, 3);
        assert_eq!(ok.batch_size, 4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }
}
