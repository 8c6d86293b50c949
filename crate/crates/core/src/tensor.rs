//! Dense row-major tensors over 64-bit floats, plus the handful of raw
//! kernels (matmul variants, order-canonical reductions) shared by the
//! forward and backward passes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense multi-dimensional array. Shape is fixed at construction; a scalar is
/// represented by the empty shape `[]` with exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                why: format!("data length {} does not match", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArg {
                op: "from_rows",
                why: "rows must be non-empty and equally sized".into(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self::from_vec(vec![r, c], data)
    }

    /// Elementwise uniform draw from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Elementwise standard normal draw.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                why: "expected exactly one element".into(),
            })
        }
    }

    /// Number of rows when the tensor is viewed as 2-D (all leading axes
    /// folded together, last axis as columns).
    pub fn rows_folded(&self) -> usize {
        match self.shape.last() {
            Some(&last) => self.data.len() / last,
            None => 1,
        }
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Row `i` of a tensor viewed as 2-D.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                why: format!("tensor has {} elements", self.data.len()),
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// 2-D transpose.
    pub fn transposed(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape.clone(),
                why: "expected rank 2".into(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fails with a contextual error when any element is non-finite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }
}

/// Permutation-invariant sum: addends are put into a canonical (sorted)
/// order before folding, so any reordering of the inputs produces the
/// bit-identical result. Used by every reduction that crosses the agent/token
/// axis, which is what makes permutation equivariance exact rather than
/// approximate under floating-point addition.
pub fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

/// `C = A · B` for row-major `A: [m,k]`, `B: [k,n]`.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            let bp = &b[p * n..(p + 1) * n];
            for (cj, &bj) in ci.iter_mut().zip(bp) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// `C = A · Bᵀ` for `A: [m,k]`, `B: [n,k]`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let bj = &b[j * k..(j + 1) * k];
            c[i * n + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `C = Aᵀ · B` for `A: [m,k]`, `B: [m,n]`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let bi = &b[i * n..(i + 1) * n];
        for (p, &aip) in ai.iter().enumerate() {
            let cp = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in cp.iter_mut().zip(bi) {
                *cj += aip * bj;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(vec![2, 3], vec![1.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(4.5);
        assert!(s.is_scalar());
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item().unwrap(), 4.5);
    }

    #[test]
    fn transpose_round_trips() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let tt = t.transposed().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.transposed().unwrap(), t);
    }

    #[test]
    fn matmul_kernels_agree_on_small_case() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3,2]
        let c = mm_nn(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);

        // A·Bᵀ with B stored transposed must match mm_nn.
        let bt = Tensor::from_vec(vec![3, 2], b.clone())
            .unwrap()
            .transposed()
            .unwrap();
        let c2 = mm_nt(&a, bt.data(), 2, 3, 2);
        assert_eq!(c, c2);

        // Aᵀ·B with A stored transposed must match mm_nn.
        let at = Tensor::from_vec(vec![2, 3], a.clone())
            .unwrap()
            .transposed()
            .unwrap();
        let c3 = mm_tn(at.data(), &b, 3, 2, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn ordered_sum_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base: Vec<f64> = (0..64).map(|_| rng.random_range(-1e3..1e3)).collect();
        let mut a = base.clone();
        let reference = ordered_sum(&mut a);
        for rot in 1..base.len() {
            let mut b: Vec<f64> = base[rot..].iter().chain(&base[..rot]).copied().collect();
            assert_eq!(ordered_sum(&mut b).to_bits(), reference.to_bits());
        }
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            Tensor::randn(&[4, 4], &mut r1),
            Tensor::randn(&[4, 4], &mut r2)
        );
    }
}
