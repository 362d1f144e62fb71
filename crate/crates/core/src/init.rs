//! Parameter initialization: orthogonal square recurrent matrices,
//! uniform(-0.08, 0.08) everywhere else, zero biases.

use rand::Rng;

use crate::tensor::Tensor;

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-0.08..0.08)).collect();
    Tensor { shape: shape.to_vec(), data, grad: None }
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}

/// Random d×d orthogonal matrix: draw random entries, orthonormalize the
/// rows with modified Gram-Schmidt.
pub fn orthogonal<R: Rng>(rng: &mut R, d: usize) -> Tensor {
    let mut m: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for i in 0..d {
        for j in 0..i {
            let mut dot = 0.0;
            for k in 0..d {
                dot += m[i * d + k] * m[j * d + k];
            }
            for k in 0..d {
                m[i * d + k] -= dot * m[j * d + k];
            }
        }
        let norm: f64 = m[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "degenerate random draw in orthogonal init");
        for k in 0..d {
            m[i * d + k] /= norm;
        }
    }
    Tensor { shape: vec![d, d], data: m, grad: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d = 6;
        let q = orthogonal(&mut rng, d);
        for i in 0..d {
            for j in 0..d {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += q.data[i * d + k] * q.data[j * d + k];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "({i},{j}): {dot}");
            }
        }
    }
}
