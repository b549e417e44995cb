use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Semi-orthogonal `[rows × cols]` matrix via Gram-Schmidt on Gaussian draws.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // `short` orthonormal vectors of length `long`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = gain * if rows >= cols { basis[c][r] } else { basis[r][c] };
        }
    }
    Tensor::new(&[rows, cols], data).expect("shape")
}

pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (r, c) in [(8, 4), (4, 8), (6, 6)] {
            let m = orthogonal(r, c, 1.0, &mut rng);
            let d = m.data();
            if r >= c {
                for i in 0..c {
                    for j in 0..c {
                        let dot: f64 = (0..r).map(|k| d[k * c + i] * d[k * c + j]).sum();
                        let e = if i == j { 1.0 } else { 0.0 };
                        assert!((dot - e).abs() < 1e-10);
                    }
                }
            } else {
                for i in 0..r {
                    for j in 0..r {
                        let dot: f64 = (0..c).map(|k| d[i * c + k] * d[j * c + k]).sum();
                        let e = if i == j { 1.0 } else { 0.0 };
                        assert!((dot - e).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
