//! Basis-function export: orders the analysis and synthesis filters by
//! average-linkage agglomerative clustering (UPGMA) on Euclidean distance,
//! then writes each as CSV rows of taps plus 256-point transform
//! magnitudes so the filters can be plotted side by side.

use super::stft::STFT_BINS;
use crate::model::{ModelParams, pinv_encoder_kernel};
use crate::tensor::Element;
use crate::{Error, Result};
use rustfft::FftPlanner;
use rustfft::num_complex::Complex;
use std::io::Write;
use std::path::Path;

/// Leaf order after average-linkage clustering. Every merge joins the pair
/// of clusters with the smallest mean pairwise point distance; ties go to
/// the lexicographically smallest slot pair, and a merged cluster keeps the
/// lower slot with the right cluster's leaves appended.
pub fn upgma_order(rows: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Invalid("no rows to order".into()));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("rows have differing lengths".into()));
    }
    if n == 1 {
        return Ok(vec![0]);
    }

    // dist[i][j], i < j, over cluster slots; merged clusters stay in the
    // lower slot, emptied slots go inactive.
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active: Vec<bool> = vec![true; n];

    for _ in 0..n - 1 {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                if best.is_none_or(|(bi, bj)| dist[i][j] < dist[bi][bj]) {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("two active clusters remain");
        // Average-linkage update: the mean pairwise distance to the union
        // is the size-weighted mean of the parts' distances.
        let (si, sj) = (members[i].len() as f64, members[j].len() as f64);
        for k in 0..n {
            if k == i || k == j || !active[k] {
                continue;
            }
            let d = (si * dist[i][k] + sj * dist[j][k]) / (si + sj);
            dist[i][k] = d;
            dist[k][i] = d;
        }
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        active[j] = false;
    }

    let order = members.into_iter().find(|m| !m.is_empty()).expect("one cluster left");
    Ok(order)
}

/// 129 magnitude bins of a 256-point transform of `row`, zero-padded.
fn transform_magnitudes(row: &[f64]) -> Vec<f64> {
    const SIZE: usize = 256;
    let fft = FftPlanner::new().plan_fft_forward(SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); SIZE];
    for (b, &v) in buf.iter_mut().zip(row) {
        *b = Complex::new(v, 0.0);
    }
    fft.process(&mut buf);
    buf[..STFT_BINS].iter().map(|z| z.norm()).collect()
}

fn write_matrix_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let order = upgma_order(rows)?;
    let taps = rows[0].len();
    let mut out = String::new();
    for t in 0..taps {
        out.push_str(&format!("tap{t},"));
    }
    for k in 0..STFT_BINS {
        out.push_str(&format!("mag{k}"));
        out.push(if k + 1 == STFT_BINS { '\n' } else { ',' });
    }
    for &r in &order {
        let mags = transform_magnitudes(&rows[r]);
        let line: Vec<String> =
            rows[r].iter().chain(&mags).map(|v| format!("{v:.8}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(out.as_bytes())?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Write `encoder.csv` and `decoder.csv` into `out_dir`: N rows each, in
/// clustering order, with L tap columns and 129 magnitude columns. A
/// pseudo-inverse analysis front end is materialized from the synthesis
/// basis first.
pub fn export_basis<E: Element>(params: &ModelParams<E>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = &params.config;
    let (n, l) = (cfg.n_filters, cfg.filter_len);
    let to_rows = |data: &[E]| -> Vec<Vec<f64>> {
        (0..n).map(|r| data[r * l..(r + 1) * l].iter().map(|v| v.to_f64()).collect()).collect()
    };
    let encoder_rows = match &params.encoder {
        Some(t) => to_rows(t.data()),
        None => to_rows(pinv_encoder_kernel(&params.decoder)?.data()),
    };
    write_matrix_csv(&out_dir.join("encoder.csv"), &encoder_rows)?;
    write_matrix_csv(&out_dir.join("decoder.csv"), &to_rows(params.decoder.data()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closest_pair_merges_first() {
        // d(A,C) = 4, d(A,B) = 1, d(C,B) = 4: A and B join first even
        // though C sits between them in the input, so the leaf order pulls
        // B forward.
        let a = vec![0.0, 0.0];
        let b = vec![1.0, 0.0];
        let c = vec![0.5, (16.0f64 - 0.25).sqrt()];
        assert_eq!(upgma_order(&[a, c, b]).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn single_row_and_bad_shapes() {
        assert_eq!(upgma_order(&[vec![1.0, 2.0]]).unwrap(), vec![0]);
        assert!(upgma_order(&[]).is_err());
        assert!(upgma_order(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    /// Direct mean-pairwise-distance clustering, no incremental update.
    fn naive_order(rows: &[Vec<f64>]) -> Vec<usize> {
        let point = |i: usize, j: usize| -> f64 {
            rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut clusters: Vec<Vec<usize>> = (0..rows.len()).map(|i| vec![i]).collect();
        while clusters.len() > 1 {
            let mut best = (0usize, 1usize, f64::INFINITY);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let mut sum = 0.0;
                    for &a in &clusters[i] {
                        for &b in &clusters[j] {
                            sum += point(a, b);
                        }
                    }
                    let d = sum / (clusters[i].len() * clusters[j].len()) as f64;
                    if d < best.2 {
                        best = (i, j, d);
                    }
                }
            }
            let right = clusters.remove(best.1);
            clusters[best.0].extend(right);
        }
        clusters.pop().unwrap()
    }

    #[test]
    fn matches_naive_average_linkage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let rows: Vec<Vec<f64>> =
                (0..8).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            assert_eq!(upgma_order(&rows).unwrap(), naive_order(&rows));
        }
    }

    #[test]
    fn export_writes_full_matrices() {
        use crate::model::ModelConfig;
        let cfg = ModelConfig {
            n_filters: 8,
            filter_len: 4,
            bottleneck: 4,
            block_channels: 8,
            skip_channels: 4,
            kernel: 3,
            blocks_per_repeat: 2,
            repeats: 1,
            ..ModelConfig::default()
        };
        let params = crate::model::build::<f32>(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_basis(&params, dir.path()).unwrap();
        for name in ["encoder.csv", "decoder.csv"] {
            let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), 1 + 8, "{name}: header plus one row per filter");
            assert!(lines[0].starts_with("tap0,"));
            for row in &lines[1..] {
                assert_eq!(row.split(',').count(), 4 + 129, "{name}");
            }
        }
    }
}
