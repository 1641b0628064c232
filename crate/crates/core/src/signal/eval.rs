//! Separation scoring: per-utterance and mean SI-SNR / SDR improvements
//! over the mixture, with one reference assignment chosen per utterance by
//! SI-SNR and reused for both metrics.

use super::mask::{OracleMask, ideal_masks};
use super::AudioClip;
use crate::model::{self, ModelParams};
use crate::train::{permutations, si_snr_value};
use crate::{Error, Result};

/// Guard for the zero-distortion case, mirroring the SI-SNR cap.
const SDR_CAP_DB: f64 = 60.0;

/// Plain SDR in dB on zero-meaned signals: 10*log10(|s|^2 / |shat - s|^2),
/// capped at +60. No allowed-distortion filtering, so values are not
/// comparable to toolkit SDR figures; improvements over the mixture on the
/// same definition are.
pub fn sdr_value(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "signal lengths differ: {} vs {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.len() < 2 {
        return Err(Error::Invalid("sdr needs at least 2 samples".into()));
    }
    let n = estimate.len() as f64;
    let me = estimate.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mr = reference.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut sig = 0.0f64;
    let mut err = 0.0f64;
    for (&e, &r) in estimate.iter().zip(reference) {
        let (e, r) = (e as f64 - me, r as f64 - mr);
        sig += r * r;
        err += (e - r) * (e - r);
    }
    if sig == 0.0 {
        return Err(Error::Invalid("reference has zero power after mean removal".into()));
    }
    Ok((10.0 * (sig / (err + 1e-10)).log10()).min(SDR_CAP_DB))
}

/// What produces the estimates: a trained model or an ideal-mask oracle
/// (which reads the clean references).
pub enum Separator<'a> {
    Model(&'a ModelParams<f32>),
    Oracle(OracleMask),
}

/// Run the separator on one utterance. The oracle masks the sum of the
/// references (the mixture, for synthesized data) and ignores `mixture`.
pub fn separate(
    separator: &Separator<'_>,
    mixture: &AudioClip,
    references: &[AudioClip],
) -> Result<Vec<AudioClip>> {
    match separator {
        Separator::Model(params) => model::forward(params, mixture),
        Separator::Oracle(kind) => Ok(ideal_masks(*kind, references)?.1),
    }
}

#[derive(Clone, Debug)]
pub struct UtteranceScore {
    pub name: String,
    pub si_snri: f64,
    pub sdri: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub scores: Vec<UtteranceScore>,
    pub mean_si_snri: f64,
    pub mean_sdri: f64,
    /// One message per skipped utterance (length mismatches).
    pub skipped: Vec<String>,
}

/// Improvement scores for one utterance: the assignment of estimates to
/// references with the highest mean SI-SNR decides both metrics.
fn score_utterance(
    estimates: &[AudioClip],
    mixture: &AudioClip,
    references: &[AudioClip],
) -> Result<(f64, f64)> {
    let c = references.len();
    let mut si = vec![vec![0.0f64; c]; c];
    for (i, est) in estimates.iter().enumerate() {
        for (j, r) in references.iter().enumerate() {
            si[i][j] = si_snr_value(&est.samples, &r.samples)?;
        }
    }
    let best = permutations(c)
        .into_iter()
        .max_by(|a, b| {
            let sa: f64 = a.iter().enumerate().map(|(i, &j)| si[i][j]).sum();
            let sb: f64 = b.iter().enumerate().map(|(i, &j)| si[i][j]).sum();
            sa.total_cmp(&sb)
        })
        .expect("at least one permutation");
    let mut si_snri = 0.0f64;
    let mut sdri = 0.0f64;
    for (i, &j) in best.iter().enumerate() {
        let r = &references[j].samples;
        si_snri += si[i][j] - si_snr_value(&mixture.samples, r)?;
        sdri += sdr_value(&estimates[i].samples, r)? - sdr_value(&mixture.samples, r)?;
    }
    Ok((si_snri / c as f64, sdri / c as f64))
}

/// Score every utterance; length-mismatched ones are skipped and reported,
/// any other failure aborts. Means are over the scored utterances.
pub fn evaluate(
    entries: &[(String, AudioClip, Vec<AudioClip>)],
    separator: &Separator<'_>,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::Data("no utterances to evaluate".into()));
    }
    let mut report = EvalReport::default();
    for (name, mixture, references) in entries {
        if references.is_empty() {
            return Err(Error::Data(format!("utterance {name}: no references")));
        }
        if references.iter().any(|r| r.len() != mixture.len()) {
            report
                .skipped
                .push(format!("utterance {name}: reference length differs from mixture; skipped"));
            continue;
        }
        let estimates = separate(separator, mixture, references)?;
        let (si_snri, sdri) = score_utterance(&estimates, mixture, references)?;
        report.scores.push(UtteranceScore { name: name.clone(), si_snri, sdri });
    }
    if report.scores.is_empty() {
        return Err(Error::Data("every utterance was skipped".into()));
    }
    let n = report.scores.len() as f64;
    report.mean_si_snri = report.scores.iter().map(|s| s.si_snri).sum::<f64>() / n;
    report.mean_sdri = report.scores.iter().map(|s| s.sdri).sum::<f64>() / n;
    Ok(report)
}

/// Fixed-header CSV rendering of a report: one row per utterance plus a
/// trailing mean row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("utterance,si_snri_db,sdri_db\n");
    for s in &report.scores {
        out.push_str(&format!("{},{:.6},{:.6}\n", s.name, s.si_snri, s.sdri));
    }
    out.push_str(&format!("mean,{:.6},{:.6}\n", report.mean_si_snri, report.mean_sdri));
    out
}

#[derive(Clone, Debug)]
pub struct ShiftReport {
    /// (shift in samples, mean SDR improvement) per evaluated shift.
    pub trace: Vec<(usize, f64)>,
    /// Population standard deviation of the SDRi trace.
    pub std_dev: f64,
}

/// Separate the same utterance at input offsets 0, step, ..., max_shift
/// and report how the score moves. A shift-robust separator shows a small
/// standard deviation.
pub fn shift_experiment(
    separator: &Separator<'_>,
    mixture: &AudioClip,
    references: &[AudioClip],
    max_shift: usize,
    step: usize,
) -> Result<ShiftReport> {
    if step == 0 {
        return Err(Error::Invalid("step must be positive".into()));
    }
    if max_shift >= mixture.len() {
        return Err(Error::Invalid(format!(
            "max_shift {max_shift} must be below the clip length {}",
            mixture.len()
        )));
    }
    if references.is_empty() || references.iter().any(|r| r.len() != mixture.len()) {
        return Err(Error::Data("references must match the mixture length".into()));
    }
    let mut trace = Vec::new();
    let mut shift = 0usize;
    while shift <= max_shift {
        let mix = AudioClip::new(mixture.samples[shift..].to_vec(), mixture.sample_rate)?;
        let refs: Vec<AudioClip> = references
            .iter()
            .map(|r| AudioClip::new(r.samples[shift..].to_vec(), r.sample_rate))
            .collect::<Result<_>>()?;
        let estimates = separate(separator, &mix, &refs)?;
        let (_, sdri) = score_utterance(&estimates, &mix, &refs)?;
        trace.push((shift, sdri));
        shift += step;
    }
    let n = trace.len() as f64;
    let mean = trace.iter().map(|&(_, v)| v).sum::<f64>() / n;
    let var = trace.iter().map(|&(_, v)| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(ShiftReport { trace, std_dev: var.sqrt() })
}
