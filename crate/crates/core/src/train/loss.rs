//! Scale-invariant SNR and its permutation-invariant batch form.

use crate::tensor::{
    Element, Tape, Tensor, add, add_const, clamp_max, divide, dot, log10, mul_const, scale, sub,
    zero_mean,
};
use crate::{Error, Result};

/// Guard on the noise energy: keeps the ratio finite at perfect
/// reconstruction, where the noise term vanishes.
const TINY: f64 = 1e-10;

/// Upper cap in dB; the ratio is unbounded as the noise term vanishes.
pub const SI_SNR_CAP_DB: f64 = 60.0;

fn si_snr_f64(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "signal lengths differ: {} vs {}",
            estimate.len(),
            reference.len()
        )));
    }
    if estimate.len() < 2 {
        return Err(Error::Invalid("si_snr needs at least 2 samples".into()));
    }
    let n = estimate.len() as f64;
    let mean_e = estimate.iter().sum::<f64>() / n;
    let mean_r = reference.iter().sum::<f64>() / n;

    let mut dot_er = 0.0f64;
    let mut power_r = 0.0f64;
    for (&e, &r) in estimate.iter().zip(reference) {
        dot_er += (e - mean_e) * (r - mean_r);
        power_r += (r - mean_r) * (r - mean_r);
    }
    if power_r == 0.0 {
        return Err(Error::Invalid(
            "reference has zero power after mean removal; projection undefined".into(),
        ));
    }

    // s_target = (<e,r>/|r|^2) r; target and noise energies expand to
    // closed forms in the two inner products.
    let coef = dot_er / power_r;
    let target_energy = coef * dot_er;
    let mut noise_energy = 0.0f64;
    for (&e, &r) in estimate.iter().zip(reference) {
        let d = (e - mean_e) - coef * (r - mean_r);
        noise_energy += d * d;
    }
    let db = 10.0 * (target_energy / (noise_energy + TINY)).log10();
    Ok(db.min(SI_SNR_CAP_DB))
}

/// Scale-invariant SNR in dB of an estimate against a reference, both
/// zero-meaned first, capped at +60 dB. Errors on a zero-power reference.
pub fn si_snr_value(estimate: &[f32], reference: &[f32]) -> Result<f64> {
    let e: Vec<f64> = estimate.iter().map(|&v| v as f64).collect();
    let r: Vec<f64> = reference.iter().map(|&v| v as f64).collect();
    si_snr_f64(&e, &r)
}

/// Differentiable SI-SNR: same formula as [`si_snr_value`] built from tape
/// operations, returning a scalar tensor.
pub fn si_snr<E: Element>(
    tape: Option<&Tape<E>>,
    estimate: &Tensor<E>,
    reference: &Tensor<E>,
) -> Result<Tensor<E>> {
    if estimate.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "signal shapes differ: {:?} vs {:?}",
            estimate.shape(),
            reference.shape()
        )));
    }
    if estimate.numel() < 2 {
        return Err(Error::Invalid("si_snr needs at least 2 samples".into()));
    }
    let s = zero_mean(tape, reference)?;
    if s.data().iter().all(|v| v.to_f64() == 0.0) {
        return Err(Error::Invalid(
            "reference has zero power after mean removal; projection undefined".into(),
        ));
    }
    let e = zero_mean(tape, estimate)?;
    let coef = divide(tape, &dot(tape, &e, &s)?, &dot(tape, &s, &s)?)?;
    let target = scale(tape, &s, &coef)?;
    let noise = sub(tape, &e, &target)?;
    let num = dot(tape, &target, &target)?;
    let den = add_const(tape, &dot(tape, &noise, &noise)?, TINY)?;
    let db = mul_const(tape, &log10(tape, &divide(tape, &num, &den)?)?, 10.0)?;
    clamp_max(tape, &db, SI_SNR_CAP_DB)
}

/// All permutations of `0..c` in lexicographic order.
pub fn permutations(c: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let v = rest.remove(i);
            prefix.push(v);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..c).collect(), &mut out);
    out
}

/// Permutation-invariant loss: `-max` over source assignments of the mean
/// SI-SNR. Returns the loss as a scalar tensor plus the winning assignment
/// (`perm[i]` = reference index for estimate `i`); ties go to the
/// lexicographically smallest permutation. The gradient flows through the
/// winning assignment only.
pub fn upit_loss<E: Element>(
    tape: Option<&Tape<E>>,
    estimates: &[Tensor<E>],
    references: &[Tensor<E>],
) -> Result<(Tensor<E>, Vec<usize>)> {
    let c = estimates.len();
    if c == 0 || c != references.len() {
        return Err(Error::Shape(format!(
            "need equal nonzero source counts, got {} estimates and {} references",
            c,
            references.len()
        )));
    }
    if c > 4 {
        return Err(Error::Invalid(format!(
            "permutation search supports at most 4 sources, got {c}"
        )));
    }

    // Assignment selection runs on plain values; only the winner's graph is
    // recorded.
    let as_f64 =
        |t: &Tensor<E>| -> Vec<f64> { t.data().iter().map(|v| v.to_f64()).collect() };
    let mut scores = vec![vec![0.0f64; c]; c];
    for (i, est) in estimates.iter().enumerate() {
        for (j, rf) in references.iter().enumerate() {
            if est.shape() != rf.shape() {
                return Err(Error::Shape(format!(
                    "estimate {i} and reference {j} shapes differ: {:?} vs {:?}",
                    est.shape(),
                    rf.shape()
                )));
            }
            scores[i][j] = si_snr_f64(&as_f64(est), &as_f64(rf))?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(c) {
        let mean = perm.iter().enumerate().map(|(i, &j)| scores[i][j]).sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|(b, _)| mean > *b) {
            best = Some((mean, perm));
        }
    }
    let (_, perm) = best.expect("at least one permutation");

    let mut sum: Option<Tensor<E>> = None;
    for (i, &j) in perm.iter().enumerate() {
        let term = si_snr(tape, &estimates[i], &references[j])?;
        sum = Some(match sum {
            None => term,
            Some(acc) => add(tape, &acc, &term)?,
        });
    }
    let loss = mul_const(tape, &sum.expect("c >= 1"), -1.0 / c as f64)?;
    Ok((loss, perm))
}
