use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape must be non-empty with positive extents, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from parts already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                acc * d + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `c = a·b + beta·c`, with `c` row-major `m×n` and arbitrary strides on
/// `a` (`m×k`) and `b` (`k×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the callers pass slices covering the strided extents, and `c`
    // is a dense row-major m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, computed after subtracting the slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::invalid(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let (outer, len, inner) = axis_split(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x.data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out))
}

/// Indices of the `k` largest entries in rank order; ties go to the lower index.
pub fn top_k(x: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > x.len() {
        return Err(Error::invalid(format!(
            "top_k needs 1 <= k <= {}, got k = {k}",
            x.len()
        )));
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at(&[i, t]) * b.at(&[t, j]);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_hand_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &x).unwrap(), x);
        let ones = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&x, &ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::rng::stream(1, "test");
        let a = Tensor::new(vec![5, 7], (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![7, 3], (0..21).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        let big = softmax(&Tensor::new(vec![2], vec![1000.0, 1001.0]).unwrap(), 0).unwrap();
        let shifted = softmax(&Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), 0).unwrap();
        assert!(big.is_finite());
        assert!(big.max_abs_diff(&shifted) < 1e-15);
        assert!(softmax(&big, 1).is_err());
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5, 0.7], 2).unwrap(), vec![1, 3]);
        assert_eq!(top_k(&[5.0, 5.0], 1).unwrap(), vec![0]);
        assert!(top_k(&[1.0], 2).is_err());
    }

    proptest! {
        #[test]
        fn softmax_slices_sum_to_one(
            vals in prop::collection::vec(-50.0f64..50.0, 12),
            axis in 0usize..3,
        ) {
            let x = Tensor::new(vec![2, 3, 2], vals).unwrap();
            let s = softmax(&x, axis).unwrap();
            let (outer, len, inner) = axis_split(s.shape(), axis);
            for o in 0..outer {
                for i in 0..inner {
                    let sum: f64 = (0..len).map(|j| s.data()[(o * len + j) * inner + i]).sum();
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn top_k_matches_sort_oracle(
            vals in prop::collection::vec(-3i32..3, 1..20),
            k in 1usize..20,
        ) {
            let x: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let k = k.min(x.len());
            let got = top_k(&x, k).unwrap();
            let mut order: Vec<(f64, usize)> = x.iter().copied().zip(0..).collect();
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = order.iter().take(k).map(|p| p.1).collect();
            prop_assert_eq!(&got, &want);
            let min_kept = got.iter().map(|&i| x[i]).fold(f64::INFINITY, f64::min);
            for (i, &v) in x.iter().enumerate() {
                if !got.contains(&i) {
                    prop_assert!(v <= min_kept);
                }
            }
        }
    }
}
