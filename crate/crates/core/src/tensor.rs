//! Dense row-major 2-D tensors of `f64`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from equal-length rows. Panics on ragged input; meant
    /// for literals in tests and fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row_vector(&[value])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "item() on a {}x{} tensor",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Plain matrix product `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        gemm(self.view(), rhs.view(), &mut out, 0.0);
        Ok(out)
    }

    pub(crate) fn view(&self) -> MatView<'_> {
        MatView {
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
            data: &self.data,
        }
    }

    pub(crate) fn view_t(&self) -> MatView<'_> {
        MatView {
            rows: self.cols,
            cols: self.rows,
            rs: 1,
            cs: self.cols as isize,
            data: &self.data,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Strided read-only matrix view, used to express transposes without copies.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
    pub data: &'a [f64],
}

/// `out = a · b + beta · out`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, out: &mut Tensor2, beta: f64) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_assign(beta);
        return;
    }
    if m <= SMALL_ROWS && b.cs == 1 {
        small_gemm(a, b, out, beta);
        return;
    }
    // SAFETY: the views describe in-bounds strided layouts over their slices
    // (checked by construction in `view`/`view_t`), and `out` is a distinct,
    // exclusively borrowed m x n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many output rows, packing dominates dgemm; rows of `b` are
/// streamed instead.
const SMALL_ROWS: usize = 8;

/// `out = a · b + beta · out` for contiguous rows of `b`.
fn small_gemm(a: MatView<'_>, b: MatView<'_>, out: &mut Tensor2, beta: f64) {
    #[cfg(target_arch = "x86_64")]
    if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { small_gemm_fma(a, b, out, beta) };
        return;
    }
    small_gemm_generic(a, b, out, beta);
}

/// Output columns per register block.
const STRIP: usize = 16;

#[inline(always)]
fn small_gemm_body(a: MatView<'_>, b: MatView<'_>, out: &mut Tensor2, beta: f64) {
    let mut i = 0;
    while i < a.rows {
        match a.rows - i {
            1 => strip_rows::<1>(a, b, out, beta, i),
            2 => strip_rows::<2>(a, b, out, beta, i),
            _ => strip_rows::<3>(a, b, out, beta, i),
        }
        i += 3;
    }
}

/// Rows `i0 .. i0+R` of the product, accumulated in registers one column
/// strip at a time.
#[inline(always)]
fn strip_rows<const R: usize>(a: MatView<'_>, b: MatView<'_>, out: &mut Tensor2, beta: f64, i0: usize) {
    let (k, n) = (a.cols, b.cols);
    // offsets are in bounds by construction of the views
    let at = |r: usize, p: usize| {
        a.data[((i0 + r) as isize).wrapping_mul(a.rs).wrapping_add((p as isize).wrapping_mul(a.cs)) as usize]
    };
    let brow = |p: usize| (p as isize).wrapping_mul(b.rs) as usize;
    let mut j = 0;
    while j + STRIP <= n {
        let mut acc = [[0.0f64; STRIP]; R];
        for p in 0..k {
            let bs: &[f64; STRIP] = b.data[brow(p) + j..brow(p) + j + STRIP].try_into().expect("strip width");
            for (r, row) in acc.iter_mut().enumerate() {
                let av = at(r, p);
                for c in 0..STRIP {
                    row[c] = av.mul_add(bs[c], row[c]);
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            let o = &mut out.data[(i0 + r) * n + j..(i0 + r) * n + j + STRIP];
            for c in 0..STRIP {
                o[c] = if beta == 0.0 { row[c] } else { beta.mul_add(o[c], row[c]) };
            }
        }
        j += STRIP;
    }
    for r in 0..R {
        for c in j..n {
            let mut sum = 0.0;
            for p in 0..k {
                sum = at(r, p).mul_add(b.data[brow(p) + c], sum);
            }
            let o = &mut out.data[(i0 + r) * n + c];
            *o = if beta == 0.0 { sum } else { beta.mul_add(*o, sum) };
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn small_gemm_fma(a: MatView<'_>, b: MatView<'_>, out: &mut Tensor2, beta: f64) {
    small_gemm_body(a, b, out, beta);
}

fn small_gemm_generic(a: MatView<'_>, b: MatView<'_>, out: &mut Tensor2, beta: f64) {
    // without hardware FMA, mul_add is a slow library call
    let (k, n) = (a.cols, b.cols);
    for i in 0..a.rows {
        let row = &mut out.data[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|x| *x *= beta);
        }
        for p in 0..k {
            let av = a.data[(i as isize * a.rs + p as isize * a.cs) as usize];
            let start = (p as isize * b.rs) as usize;
            for (o, &bv) in row.iter_mut().zip(&b.data[start..start + n]) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor2::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor2::from_vec(2, 2, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let a = Tensor2::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Tensor2::from_rows(&[[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Tensor2::from_rows(&[[58.0, 64.0], [139.0, 154.0]]));
    }

    #[test]
    fn transposed_view_multiplies_like_transpose() {
        let a = Tensor2::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let mut out = Tensor2::zeros(3, 3);
        gemm(a.view_t(), a.view(), &mut out, 0.0);
        assert_eq!(out, a.transpose().matmul(&a).unwrap());
    }

    #[test]
    fn short_products_match_dgemm() {
        let a = Tensor2::from_vec(12, 7, (0..84).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Tensor2::from_vec(7, 5, (0..35).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let full = a.matmul(&b).unwrap();
        for rows in 1..=SMALL_ROWS {
            let top = Tensor2::from_vec(rows, 7, a.data[..rows * 7].to_vec()).unwrap();
            let mut out = Tensor2::filled(rows, 5, 2.0);
            gemm(top.view(), b.view(), &mut out, 0.5);
            for i in 0..rows {
                for j in 0..5 {
                    assert!((out.get(i, j) - full.get(i, j) - 1.0).abs() <= 1e-13);
                }
            }
        }
        let t = Tensor2::from_vec(7, 3, (0..21).map(|i| i as f64 - 10.0).collect()).unwrap();
        let mut out = Tensor2::zeros(3, 5);
        gemm(t.view_t(), b.view(), &mut out, 0.0);
        assert!(out.max_abs_diff(&t.transpose().matmul(&b).unwrap()) <= 1e-12);
    }

    #[test]
    fn matmul_with_empty_inner_dimension_is_zero() {
        let a = Tensor2::zeros(2, 0);
        let b = Tensor2::zeros(0, 3);
        assert_eq!(a.matmul(&b).unwrap(), Tensor2::zeros(2, 3));
    }
}
