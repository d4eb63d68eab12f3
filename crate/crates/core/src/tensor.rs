//! Dense row-major `f64` tensors and the raw kernels shared by the forward
//! and adjoint passes of the tape.

use crate::error::{Error, Result};

/// Dense N-dimensional array of `f64` in row-major order.
///
/// A rank-0 tensor (empty shape) holds exactly one element. `grad` is only
/// ever filled in by gradient accumulation, never by forward operations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor_new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(&self.shape, index);
        self.data[i] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let shape = permuted_shape(&self.shape, perm)?;
        Tensor::new(&shape, permute_data(&self.data, &self.shape, perm))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        self.permute(&last_two_swapped(self.rank())?)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let dims = MatmulDims::infer(&self.shape, &other.shape)?;
        let mut out = vec![0.0; dims.out_numel()];
        dims.forward(&self.data, &other.data, &mut out);
        Tensor::new(&dims.out_shape, out)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, len, inner) = axis_split(&self.shape, axis, "softmax")?;
        let mut out = self.data.clone();
        softmax_in_place(&mut out, outer, len, inner);
        Tensor::new(&self.shape, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Tensor::new(
            &self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Rows of a `[rows, ...]` tensor selected by `index` along axis 0.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Tensor> {
        let width = row_width(&self.shape)?;
        let rows = self.shape[0];
        let mut data = Vec::with_capacity(index.len() * width);
        for &r in index {
            if r >= rows {
                return Err(Error::Contract(format!("gather_rows index {r} >= {rows}")));
            }
            data.extend_from_slice(&self.data[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = index.len();
        Tensor::new(&shape, data)
    }
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index.iter().zip(shape).fold(0, |acc, (&i, &d)| {
        assert!(i < d, "index {i} out of bounds for dim {d}");
        acc * d + i
    })
}

pub(crate) fn row_width(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Contract("row operation on a rank-0 tensor".into()));
    }
    Ok(shape[1..].iter().product())
}

pub(crate) fn last_two_swapped(rank: usize) -> Result<Vec<usize>> {
    if rank < 2 {
        return Err(Error::Contract(format!("transpose needs rank >= 2, got {rank}")));
    }
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    Ok(perm)
}

pub(crate) fn permuted_shape(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::shape("permute", shape, perm));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::shape("permute", shape, perm));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output element `o` at multi-index `j` reads input at index `i` where
/// `i[perm[k]] = j[k]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    if rank == 0 || perm.iter().enumerate().all(|(i, &p)| i == p) {
        return data.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * shape[k + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        let base: usize = idx[..rank - 1]
            .iter()
            .zip(&strides[..rank - 1])
            .map(|(i, s)| i * s)
            .sum();
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        let mut k = rank - 1;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Decompose a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, shape, &[axis]));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn softmax_in_place(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(data[base + l * inner]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let e = (data[base + l * inner] - max).exp();
                data[base + l * inner] = e;
                sum += e;
            }
            for l in 0..len {
                data[base + l * inner] /= sum;
            }
        }
    }
}

/// Geometry of a batched matrix product `[.., m, k] x [.., k, n]`.
///
/// Leading batch dimensions must either agree exactly or one side must be a
/// plain matrix, which is then shared across the other side's batch.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulDims {
    pub fn infer(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let lead = match (a_lead.is_empty(), b_lead.is_empty()) {
            (true, true) => Vec::new(),
            (false, true) => a_lead.to_vec(),
            (true, false) => b_lead.to_vec(),
            (false, false) if a_lead == b_lead => a_lead.to_vec(),
            _ => return Err(Error::shape("matmul", a, b)),
        };
        let batch = lead.iter().product();
        let mut out_shape = lead;
        out_shape.extend([m, n]);
        Ok(MatmulDims {
            batch,
            m,
            k,
            n,
            a_batched: !a_lead.is_empty(),
            b_batched: !b_lead.is_empty(),
            out_shape,
        })
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched && self.a_batched {
            // Fold the batch into the row dimension of one large product.
            gemm(self.batch * m, k, n, a, (k, 1), b, (n, 1), out, (n, 1), 0.0);
            return;
        }
        for bi in 0..self.batch {
            let a_off = if self.a_batched { bi * m * k } else { 0 };
            let b_off = if self.b_batched { bi * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &a[a_off..a_off + m * k],
                (k, 1),
                &b[b_off..b_off + k * n],
                (n, 1),
                &mut out[bi * m * n..(bi + 1) * m * n],
                (n, 1),
                0.0,
            );
        }
    }

    /// Accumulate `dA += dC · Bᵀ` and `dB += Aᵀ · dC`.
    pub fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        d_out: &[f64],
        d_a: Option<&mut [f64]>,
        d_b: Option<&mut [f64]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(d_a) = d_a {
            if !self.b_batched && self.a_batched {
                gemm(self.batch * m, n, k, d_out, (n, 1), b, (1, n), d_a, (k, 1), 1.0);
            } else {
                for bi in 0..self.batch {
                    let a_off = if self.a_batched { bi * m * k } else { 0 };
                    let b_off = if self.b_batched { bi * k * n } else { 0 };
                    gemm(
                        m,
                        n,
                        k,
                        &d_out[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        &b[b_off..b_off + k * n],
                        (1, n),
                        &mut d_a[a_off..a_off + m * k],
                        (k, 1),
                        1.0,
                    );
                }
            }
        }
        if let Some(d_b) = d_b {
            if !self.b_batched && self.a_batched {
                gemm(k, self.batch * m, n, a, (1, k), d_out, (n, 1), d_b, (n, 1), 1.0);
            } else {
                for bi in 0..self.batch {
                    let a_off = if self.a_batched { bi * m * k } else { 0 };
                    let b_off = if self.b_batched { bi * k * n } else { 0 };
                    gemm(
                        k,
                        m,
                        n,
                        &a[a_off..a_off + m * k],
                        (1, k),
                        &d_out[bi * m * n..(bi + 1) * m * n],
                        (n, 1),
                        &mut d_b[b_off..b_off + k * n],
                        (n, 1),
                        1.0,
                    );
                }
            }
        }
    }
}

/// `c = a · b + beta · c` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are at least as long as the strided extents implied by
    // (m, k, n) and the row-major strides passed by the callers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn projector_selects_first_row() {
        let p = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let x = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(p.matmul(&x).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64 * 1.3).cos());
        let fast = a.matmul(&b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        // Large enough for the blocked kernel.
        let a = Tensor::from_fn(&[40, 30], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[30, 20], |i| (i as f64 * 1.3).cos());
        assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1);
        let w = Tensor::from_fn(&[4, 5], |i| 1.0 - i as f64 * 0.05);
        let out = a.matmul(&w).unwrap();
        assert_eq!(out.shape(), &[2, 3, 5]);
        for bi in 0..2 {
            let slice = Tensor::new(&[3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec()).unwrap();
            let want = naive_matmul(&slice, &w);
            let got = Tensor::new(&[3, 5], out.data()[bi * 15..(bi + 1) * 15].to_vec()).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::new(&[2], vec![1000.0, 0.0]).unwrap();
        let s = x.softmax(0).unwrap();
        assert!((s.data()[0] - 1.0).abs() <= 1e-12 && s.data()[1].abs() <= 1e-12);
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = p.permute(&inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
