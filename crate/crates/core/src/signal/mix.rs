//! Synthetic mixture construction: draw one source per pool, scale the
//! later sources against the first to a random SNR, sum, and write a
//! tab-separated manifest of mixture + reference paths.

use super::wav::{read_wav, write_wav_f32};
use super::AudioClip;
use crate::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One manifest row: a mixture file and its reference files, absolute or
/// manifest-relative paths already resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub mixture: PathBuf,
    pub references: Vec<PathBuf>,
}

fn power(samples: &[f32]) -> f64 {
    samples.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / samples.len() as f64
}

fn sorted_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("source pool {} has no .wav files", dir.display())));
    }
    Ok(files)
}

/// Build `count` mixtures, one source drawn from each pool directory, and
/// write them plus their scaled references and a manifest into `out_dir`.
/// Returns the manifest path. Deterministic for a fixed seed: pool listings
/// are sorted and all draws come from one seeded generator.
pub fn synthesize_mixtures(
    source_dirs: &[PathBuf],
    out_dir: &Path,
    count: usize,
    snr_min_db: f64,
    snr_max_db: f64,
    seed: u64,
) -> Result<PathBuf> {
    let c = source_dirs.len();
    if !(2..=4).contains(&c) {
        return Err(Error::Invalid(format!("need 2 to 4 source pools, got {c}")));
    }
    if count == 0 {
        return Err(Error::Invalid("count must be positive".into()));
    }
    if !snr_min_db.is_finite() || !snr_max_db.is_finite() || snr_min_db > snr_max_db {
        return Err(Error::Invalid(format!(
            "SNR range [{snr_min_db}, {snr_max_db}] dB is not a valid interval"
        )));
    }
    let pools: Vec<Vec<PathBuf>> = source_dirs.iter().map(|d| sorted_wavs(d)).collect::<Result<_>>()?;
    std::fs::create_dir_all(out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    manifest.push_str("# synthetic mixtures\n");
    manifest.push_str("# columns: mixture, then one reference per source; tab-separated, relative to this file\n");
    manifest.push_str(
        "# sources after the first are scaled so that 10*log10(P_first/P_i) equals the drawn SNR\n",
    );

    for m in 0..count {
        let mut clips: Vec<AudioClip> = Vec::with_capacity(c);
        for pool in &pools {
            let pick = &pool[rng.random_range(0..pool.len())];
            clips.push(read_wav(pick)?);
        }
        let rate = clips[0].sample_rate;
        if let Some(bad) = clips.iter().position(|s| s.sample_rate != rate) {
            return Err(Error::Data(format!(
                "mixture {m}: source {bad} is at {} Hz, source 0 at {rate} Hz",
                clips[bad].sample_rate
            )));
        }
        let len = clips.iter().map(|s| s.len()).min().unwrap();
        for s in &mut clips {
            s.samples.truncate(len);
        }
        let p0 = power(&clips[0].samples);
        if p0 == 0.0 {
            return Err(Error::Data(format!("mixture {m}: first source is silent")));
        }
        for i in 1..c {
            let snr = if snr_min_db == snr_max_db {
                snr_min_db
            } else {
                rng.random_range(snr_min_db..snr_max_db)
            };
            let pi = power(&clips[i].samples);
            if pi == 0.0 {
                return Err(Error::Data(format!("mixture {m}: source {i} is silent")));
            }
            let scale = (p0 / (pi * 10f64.powf(snr / 10.0))).sqrt() as f32;
            for v in &mut clips[i].samples {
                *v *= scale;
            }
        }

        let mut mix = vec![0.0f32; len];
        for s in &clips {
            for (acc, &v) in mix.iter_mut().zip(&s.samples) {
                *acc += v;
            }
        }

        let mix_name = format!("mix_{m:04}.wav");
        write_wav_f32(out_dir.join(&mix_name), &AudioClip::new(mix, rate)?)?;
        manifest.push_str(&mix_name);
        for (i, s) in clips.iter().enumerate() {
            let ref_name = format!("mix_{m:04}_src{i}.wav");
            write_wav_f32(out_dir.join(&ref_name), s)?;
            manifest.push('\t');
            manifest.push_str(&ref_name);
        }
        manifest.push('\n');
    }

    let path = out_dir.join("manifest.tsv");
    let mut tmp = tempfile::NamedTempFile::new_in(out_dir)?;
    tmp.write_all(manifest.as_bytes())?;
    tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
    Ok(path)
}

/// Parse a manifest written by [`synthesize_mixtures`] (or by hand): one
/// mixture path plus one or more reference paths per line, tab-separated;
/// `#` lines and blank lines are ignored. Paths resolve relative to the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::Data(format!(
                "{}:{}: need a mixture and at least one reference, got {} field(s)",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let resolve = |f: &str| {
            let p = Path::new(f);
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
        };
        let mixture = resolve(fields[0]);
        let name = mixture
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| fields[0].to_string());
        entries.push(ManifestEntry {
            name,
            mixture,
            references: fields[1..].iter().map(|f| resolve(f)).collect(),
        });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: no usable lines", path.display())));
    }
    Ok(entries)
}
