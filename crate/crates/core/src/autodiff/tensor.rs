use crate::{Error, Result, C64};

/// Dense row-major complex array in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl CTensor {
    pub fn new(shape: &[usize], data: Vec<C64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<C64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![C64::new(0.0, 0.0); n])
    }

    pub fn full(shape: &[usize], value: C64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// Embeds real values with zero imaginary part.
    pub fn from_real(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn scalar(value: C64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = C64::new(1.0, 0.0);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn re(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.re).collect()
    }

    /// Size of the trailing axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&z| f(z)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Views the tensor as (rows, last_dim).
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let c = self.last_dim();
        if c == 0 {
            (0, 0)
        } else {
            (self.data.len() / c, c)
        }
    }

    /// Views a 2-D or 3-D tensor as (batch, rows, cols).
    pub(crate) fn as_batched(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((1, *r, *c)),
            [b, r, c] => Ok((*b, *r, *c)),
            s => Err(Error::Shape(format!("expected a 2-D or 3-D tensor, got {s:?}"))),
        }
    }

    /// Swaps the last two axes without conjugation.
    pub fn transposed(&self) -> Result<Self> {
        let (b, r, c) = self.as_batched()?;
        let mut out = vec![C64::new(0.0, 0.0); self.data.len()];
        for bi in 0..b {
            let base = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = self.data[base + i * c + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(Self::from_parts(shape, out))
    }

    pub fn conj(&self) -> Self {
        self.map(|z| z.conj())
    }
}

/// Splits a shape around `axis` into (outer, axis_len, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Complex GEMM over batched row-major operands: `c[b] = op(a[b]) * op(b[b])`.
///
/// `conj_a`/`conj_b` select the conjugate-transpose of the respective operand,
/// whose stored shape is then (k, m) or (n, k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[C64],
    adj_a: bool,
    b: &[C64],
    adj_b: bool,
    c: &mut [C64],
) {
    use matrixmultiply::{zgemm, CGemmOption};
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    debug_assert_eq!(c.len(), batch * m * n);
    if m == 0 || n == 0 {
        return;
    }
    let conj_copy = |x: &[C64]| -> Vec<C64> { x.iter().map(|z| z.conj()).collect() };
    let a_buf;
    let a = if adj_a {
        a_buf = conj_copy(a);
        &a_buf[..]
    } else {
        a
    };
    let b_buf;
    let b = if adj_b {
        b_buf = conj_copy(b);
        &b_buf[..]
    } else {
        b
    };
    let (rsa, csa) = if adj_a { (1isize, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if adj_b { (1isize, k as isize) } else { (n as isize, 1) };
    let (fa, fb) = (CGemmOption::Standard, CGemmOption::Standard);
    for bi in 0..batch {
        let ap = a[bi * m * k..].as_ptr() as *const [f64; 2];
        let bp = b[bi * k * n..].as_ptr() as *const [f64; 2];
        let cp = c[bi * m * n..].as_mut_ptr() as *mut [f64; 2];
        // SAFETY: Complex64 is repr(C) with layout [re, im]; slices are sized
        // per the assertions above, strides stay within each batch block.
        unsafe {
            zgemm(
                fa,
                fb,
                m,
                k,
                n,
                [1.0, 0.0],
                ap,
                rsa,
                csa,
                bp,
                rsb,
                csb,
                [0.0, 0.0],
                cp,
                n as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(CTensor::new(&[2, 2], vec![c(0.0, 0.0); 3]).is_err());
    }

    #[test]
    fn gemm_matches_naive_with_adjoints() {
        let a: Vec<C64> = (0..6).map(|i| c(i as f64, 1.0 - i as f64)).collect();
        let b: Vec<C64> = (0..6).map(|i| c(0.5 * i as f64, 2.0)).collect();
        // a as (2,3), b as (3,2)
        let mut out = vec![c(0.0, 0.0); 4];
        gemm(1, 2, 3, 2, &a, false, &b, false, &mut out);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = c(0.0, 0.0);
                for l in 0..3 {
                    s += a[i * 3 + l] * b[l * 2 + j];
                }
                assert!((s - out[i * 2 + j]).norm() < 1e-12);
            }
        }
        // a stored (3,2) used as a^H (2,3)
        let mut out = vec![c(0.0, 0.0); 4];
        gemm(1, 2, 3, 2, &a, true, &b, false, &mut out);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = c(0.0, 0.0);
                for l in 0..3 {
                    s += a[l * 2 + i].conj() * b[l * 2 + j];
                }
                assert!((s - out[i * 2 + j]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let t = CTensor::new(&[2, 2, 3], (0..12).map(|i| c(i as f64, 0.0)).collect()).unwrap();
        let tt = t.transposed().unwrap();
        assert_eq!(tt.shape(), &[2, 3, 2]);
        assert_eq!(tt.data()[1], c(3.0, 0.0));
        assert_eq!(tt.transposed().unwrap(), t);
    }
}
