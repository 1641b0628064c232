//! Least-squares frame encoder derived from the decoder basis.

use crate::tensor::{Element, Tensor};
use crate::{Error, Result};

/// Build the conv kernel of the pseudo-inverse encoder from the decoder
/// matrix `V [N, L]`: per frame, `w = x (VᵀV)⁻¹ Vᵀ` is the minimum-norm
/// coefficient vector with `w V = x` exactly, so the frame-wise autoencoder
/// path is the identity. Returned as a `[N, 1, L]` constant kernel; it is
/// recomputed from the current decoder and carries no gradient of its own.
pub fn pinv_encoder_kernel<E: Element>(decoder: &Tensor<E>) -> Result<Tensor<E>> {
    if decoder.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "pinv encoder needs a [N, L] decoder, got {:?}",
            decoder.shape()
        )));
    }
    let (n, l) = (decoder.shape()[0], decoder.shape()[1]);
    let v = decoder.data();
    let at = |row: usize, col: usize| v[row * l + col].to_f64();

    // Augmented system [VᵀV | Vᵀ] solved in place: L equations, N right-hand
    // sides. VᵀV is L x L and positive definite when V has full column rank.
    let width = l + n;
    let mut aug = vec![0.0f64; l * width];
    for i in 0..l {
        for j in 0..l {
            let mut acc = 0.0;
            for row in 0..n {
                acc += at(row, i) * at(row, j);
            }
            aug[i * width + j] = acc;
        }
        for row in 0..n {
            aug[i * width + l + row] = at(row, i);
        }
    }

    for col in 0..l {
        let pivot_row = (col..l)
            .max_by(|&a, &b| {
                aug[a * width + col]
                    .abs()
                    .total_cmp(&aug[b * width + col].abs())
            })
            .unwrap();
        if aug[pivot_row * width + col].abs() < 1e-12 {
            return Err(Error::Numeric(
                "decoder basis is rank-deficient; pseudo-inverse encoder undefined".into(),
            ));
        }
        if pivot_row != col {
            for k in 0..width {
                aug.swap(col * width + k, pivot_row * width + k);
            }
        }
        let pivot = aug[col * width + col];
        for k in col..width {
            aug[col * width + k] /= pivot;
        }
        for row in 0..l {
            if row == col {
                continue;
            }
            let factor = aug[row * width + col];
            if factor == 0.0 {
                continue;
            }
            for k in col..width {
                aug[row * width + k] -= factor * aug[col * width + k];
            }
        }
    }

    // Solution W = (VᵀV)⁻¹Vᵀ sits in the right block, W[l_idx][n_idx].
    // Kernel entry [n_idx, 0, l_idx] applies it as a strided convolution.
    let mut data = Vec::with_capacity(n * l);
    for row in 0..n {
        for li in 0..l {
            data.push(E::from_f64(aug[li * width + l + row]));
        }
    }
    Tensor::from_vec(vec![n, 1, l], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_is_identity() {
        // Random-ish full-rank 6x4 basis; w V must return the input frame.
        // (A sine plus a quadratic residue term avoids the low-rank ramps a
        // plain linear-congruential pattern produces.)
        let v: Vec<f64> = (0..24)
            .map(|i| (i as f64 * 0.9).sin() + (i * i % 11) as f64 * 0.05)
            .collect();
        let dec = Tensor::<f64>::from_vec(vec![6, 4], v.clone()).unwrap();
        let k = pinv_encoder_kernel(&dec).unwrap();
        assert_eq!(k.shape(), &[6, 1, 4]);

        let x = [0.4, -0.9, 0.2, 0.7];
        let mut w = vec![0.0f64; 6];
        for (row, wn) in w.iter_mut().enumerate() {
            for (li, &xv) in x.iter().enumerate() {
                *wn += k.data()[row * 4 + li] * xv;
            }
        }
        for li in 0..4 {
            let recon: f64 = (0..6).map(|row| w[row] * v[row * 4 + li]).sum();
            assert!((recon - x[li]).abs() < 1e-9, "sample {li}: {recon} vs {}", x[li]);
        }
    }

    #[test]
    fn rank_deficient_basis_rejected() {
        // Two identical columns make VᵀV singular.
        let mut v = vec![0.0f64; 12];
        for row in 0..6 {
            v[row * 2] = row as f64 + 1.0;
            v[row * 2 + 1] = row as f64 + 1.0;
        }
        let dec = Tensor::<f64>::from_vec(vec![6, 2], v).unwrap();
        assert!(pinv_encoder_kernel(&dec).is_err());
    }
}
