use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Row-orthonormal (or column-orthonormal when `rows > cols`) matrix scaled by `gain`,
/// returned row-major.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f32, rng: &mut R) -> Vec<f32> {
    let normal = Normal::new(0.0f64, 1.0).expect("valid normal");
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::from_fn(tall, short, |_, _| normal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix makes the distribution uniform over orthogonal matrices
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.push(v as f32 * gain);
        }
    }
    out
}

pub fn normal<R: Rng + ?Sized>(len: usize, mean: f32, std: f32, rng: &mut R) -> Vec<f32> {
    let dist = Normal::new(mean, std).expect("valid normal");
    (0..len).map(|_| dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check_orthonormal(rows: usize, cols: usize) {
        let w = orthogonal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let m = DMatrix::from_row_slice(rows, cols, &w.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let gram = if rows <= cols { &m * m.transpose() } else { m.transpose() * &m };
        let eye = DMatrix::<f64>::identity(gram.nrows(), gram.ncols());
        assert!((gram - eye).abs().max() < 1e-5);
    }

    #[test]
    fn orthogonal_in_both_orientations() {
        check_orthonormal(4, 27);
        check_orthonormal(27, 4);
        check_orthonormal(9, 9);
    }
}
