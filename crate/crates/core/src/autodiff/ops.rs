//! Differentiable operations on [`Var`].
//!
//! Every rule below propagates `G = dL/dRe + i dL/dIm`. For a holomorphic map
//! `y = f(z)` that is `G_z = G_y * conj(f'(z))`; non-holomorphic maps (modulus,
//! real part, conjugation, split activations) combine both Wirtinger terms
//! as `G_z = conj(G_y) dy/dz̄ + G_y conj(dy/dz)`.

use super::tensor::{gemm, split_axis};
use super::{CTensor, Var};
use crate::{Error, Result, C64};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
}

fn same_shape(op: &str, a: &CTensor, b: &CTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn non_empty(op: &str, a: &CTensor) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Shape(format!("{op}: empty tensor")));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'t> Var<'t> {
    fn unary(
        self,
        value: CTensor,
        bw: impl Fn(&CTensor, &CTensor, &CTensor) -> CTensor + 'static,
    ) -> Var<'t> {
        self.tape.custom(
            &[self],
            value,
            Box::new(move |g, ins, out| vec![Some(bw(g, ins[0], out))]),
        )
    }

    fn binary(
        self,
        other: Var<'t>,
        value: CTensor,
        bw: impl Fn(&CTensor, &CTensor, &CTensor, &CTensor) -> (CTensor, CTensor) + 'static,
    ) -> Var<'t> {
        self.tape.custom(
            &[self, other],
            value,
            Box::new(move |g, ins, out| {
                let (ga, gb) = bw(g, ins[0], ins[1], out);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    // ----- elementwise arithmetic -----

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let v = a.zip_map(&b, |x, y| x + y);
        Ok(self.binary(other, v, |g, _, _, _| (g.clone(), g.clone())))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let v = a.zip_map(&b, |x, y| x - y);
        Ok(self.binary(other, v, |g, _, _, _| (g.clone(), g.map(|z| -z))))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let v = a.zip_map(&b, |x, y| x * y);
        Ok(self.binary(other, v, |g, a, b, _| {
            (g.zip_map(b, |g, b| g * b.conj()), g.zip_map(a, |g, a| g * a.conj()))
        }))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().map(|z| -z);
        self.unary(v, |g, _, _| g.map(|z| -z))
    }

    pub fn scale(self, c: C64) -> Var<'t> {
        let v = self.value().map(|z| z * c);
        self.unary(v, move |g, _, _| g.map(|z| z * c.conj()))
    }

    pub fn scale_re(self, c: f64) -> Var<'t> {
        self.scale(real(c))
    }

    pub fn add_scalar(self, c: C64) -> Var<'t> {
        let v = self.value().map(|z| z + c);
        self.unary(v, |g, _, _| g.clone())
    }

    pub fn conj(self) -> Var<'t> {
        let v = self.value().conj();
        self.unary(v, |g, _, _| g.conj())
    }

    // ----- broadcasting along rows / columns -----

    /// `x[.., c] * v[c]` with `v` holding `last_dim` entries.
    pub fn mul_rowvec(self, v: Var<'t>) -> Result<Var<'t>> {
        let (x, vv) = (self.value(), v.value());
        let (rows, cols) = x.rows_cols();
        if vv.len() != cols {
            return Err(Error::Shape(format!(
                "mul_rowvec: {:?} by vector of {}",
                x.shape(),
                vv.len()
            )));
        }
        let mut out = x.as_ref().clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] *= vv.data()[c];
            }
        }
        Ok(self.binary(v, out, move |g, x, v, _| {
            let mut gx = g.clone();
            let mut gv = CTensor::zeros(v.shape());
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    gx.data_mut()[i] = g.data()[i] * v.data()[c].conj();
                    gv.data_mut()[c] += g.data()[i] * x.data()[i].conj();
                }
            }
            (gx, gv)
        }))
    }

    /// `x[.., c] + v[c]` (bias broadcast over rows).
    pub fn add_rowvec(self, v: Var<'t>) -> Result<Var<'t>> {
        let (x, vv) = (self.value(), v.value());
        let (rows, cols) = x.rows_cols();
        if vv.len() != cols {
            return Err(Error::Shape(format!(
                "add_rowvec: {:?} by vector of {}",
                x.shape(),
                vv.len()
            )));
        }
        let mut out = x.as_ref().clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] += vv.data()[c];
            }
        }
        Ok(self.binary(v, out, move |g, _, v, _| {
            let mut gv = CTensor::zeros(v.shape());
            for r in 0..rows {
                for c in 0..cols {
                    gv.data_mut()[c] += g.data()[r * cols + c];
                }
            }
            (g.clone(), gv)
        }))
    }

    /// Scales each of the `v.len()` equal row blocks of `x` by `v[r]`.
    pub fn mul_colvec(self, v: Var<'t>) -> Result<Var<'t>> {
        let (x, vv) = (self.value(), v.value());
        let rows = vv.len();
        if rows == 0 || x.len() % rows != 0 {
            return Err(Error::Shape(format!(
                "mul_colvec: {:?} by vector of {}",
                x.shape(),
                rows
            )));
        }
        let cols = x.len() / rows;
        let mut out = x.as_ref().clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] *= vv.data()[r];
            }
        }
        Ok(self.binary(v, out, move |g, x, v, _| {
            let mut gx = g.clone();
            let mut gv = CTensor::zeros(v.shape());
            for r in 0..rows {
                let vc = v.data()[r].conj();
                for c in 0..cols {
                    let i = r * cols + c;
                    gx.data_mut()[i] = g.data()[i] * vc;
                    gv.data_mut()[r] += g.data()[i] * x.data()[i].conj();
                }
            }
            (gx, gv)
        }))
    }

    /// `out[b, i, j] = s[b, i] + t[b, j]` for `s: (batch, m)`, `t: (batch, n)`.
    pub fn pair_add(self, t: Var<'t>) -> Result<Var<'t>> {
        let (s, tv) = (self.value(), t.value());
        let (bs, m) = match s.shape() {
            [b, m] => (*b, *m),
            sh => return Err(Error::Shape(format!("pair_add: lhs {sh:?}"))),
        };
        let (bt, n) = match tv.shape() {
            [b, n] => (*b, *n),
            sh => return Err(Error::Shape(format!("pair_add: rhs {sh:?}"))),
        };
        if bs != bt {
            return Err(Error::Shape(format!("pair_add: batch {bs} vs {bt}")));
        }
        let mut out = CTensor::zeros(&[bs, m, n]);
        for b in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    out.data_mut()[(b * m + i) * n + j] = s.data()[b * m + i] + tv.data()[b * n + j];
                }
            }
        }
        Ok(self.binary(t, out, move |g, s, t, _| {
            let mut gs = CTensor::zeros(s.shape());
            let mut gt = CTensor::zeros(t.shape());
            for b in 0..bs {
                for i in 0..m {
                    for j in 0..n {
                        let gg = g.data()[(b * m + i) * n + j];
                        gs.data_mut()[b * m + i] += gg;
                        gt.data_mut()[b * n + j] += gg;
                    }
                }
            }
            (gs, gt)
        }))
    }

    // ----- linear algebra -----

    /// Matrix product of 2-D tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = match a.shape() {
            [m, k] => (*m, *k),
            s => return Err(Error::Shape(format!("matmul: lhs {s:?}"))),
        };
        let n = match b.shape() {
            [k2, n] if *k2 == k => *n,
            s => return Err(Error::Shape(format!("matmul: {:?} x {s:?}", a.shape()))),
        };
        self.batched_product(other, 1, m, k, n, vec![m, n])
    }

    /// Batched matrix product of 3-D tensors `(b, m, k) x (b, k, n)`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ba, m, k) = match a.shape() {
            [b, m, k] => (*b, *m, *k),
            s => return Err(Error::Shape(format!("bmm: lhs {s:?}"))),
        };
        let n = match b.shape() {
            [b2, k2, n] if *b2 == ba && *k2 == k => *n,
            s => return Err(Error::Shape(format!("bmm: {:?} x {s:?}", a.shape()))),
        };
        self.batched_product(other, ba, m, k, n, vec![ba, m, n])
    }

    fn batched_product(
        self,
        other: Var<'t>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shape: Vec<usize>,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let mut out = vec![ZERO; batch * m * n];
        if k > 0 {
            gemm(batch, m, k, n, a.data(), false, b.data(), false, &mut out);
        }
        let value = CTensor::from_parts(shape, out);
        Ok(self.binary(other, value, move |g, a, b, _| {
            // dA = G B^H, dB = A^H G
            let mut ga = vec![ZERO; batch * m * k];
            let mut gb = vec![ZERO; batch * k * n];
            if k > 0 {
                gemm(batch, m, n, k, g.data(), false, b.data(), true, &mut ga);
                gemm(batch, k, m, n, a.data(), true, g.data(), false, &mut gb);
            }
            (
                CTensor::from_parts(a.shape().to_vec(), ga),
                CTensor::from_parts(b.shape().to_vec(), gb),
            )
        }))
    }

    /// Swaps the last two axes (no conjugation).
    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transposed()?;
        Ok(self.unary(v, |g, _, _| g.transposed().expect("shape checked in forward")))
    }

    /// Conjugate transpose of the last two axes.
    pub fn adjoint(self) -> Result<Var<'t>> {
        Ok(self.transpose()?.conj())
    }

    /// Batched diagonal: `(b, n, n) -> (b, n)`.
    pub fn diag(self) -> Result<Var<'t>> {
        let x = self.value();
        let (b, n) = match x.shape() {
            [b, r, c] if r == c => (*b, *r),
            s => return Err(Error::Shape(format!("diag: {s:?}"))),
        };
        let mut out = CTensor::zeros(&[b, n]);
        for bi in 0..b {
            for i in 0..n {
                out.data_mut()[bi * n + i] = x.data()[(bi * n + i) * n + i];
            }
        }
        Ok(self.unary(out, move |g, x, _| {
            let mut gx = CTensor::zeros(x.shape());
            for bi in 0..b {
                for i in 0..n {
                    gx.data_mut()[(bi * n + i) * n + i] = g.data()[bi * n + i];
                }
            }
            gx
        }))
    }

    /// Batched inverse of square matrices `(b, n, n)` by Gauss-Jordan
    /// elimination with partial pivoting.
    pub fn inverse(self) -> Result<Var<'t>> {
        let x = self.value();
        let (b, n) = match x.shape() {
            [b, r, c] if r == c => (*b, *r),
            s => return Err(Error::Shape(format!("inverse: {s:?}"))),
        };
        let mut out = vec![ZERO; b * n * n];
        for bi in 0..b {
            let block = &x.data()[bi * n * n..(bi + 1) * n * n];
            let inv = invert(block, n).ok_or_else(|| {
                Error::Numeric(format!("inverse: singular matrix in batch entry {bi}"))
            })?;
            out[bi * n * n..(bi + 1) * n * n].copy_from_slice(&inv);
        }
        let value = CTensor::from_parts(x.shape().to_vec(), out);
        Ok(self.unary(value, move |g, _, y| {
            // dA = -Y^H G Y^H
            let mut tmp = vec![ZERO; b * n * n];
            gemm(b, n, n, n, y.data(), true, g.data(), false, &mut tmp);
            let mut ga = vec![ZERO; b * n * n];
            gemm(b, n, n, n, &tmp, false, y.data(), true, &mut ga);
            for z in ga.iter_mut() {
                *z = -*z;
            }
            CTensor::from_parts(y.shape().to_vec(), ga)
        }))
    }

    // ----- shape manipulation -----

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().as_ref().clone().reshaped(shape)?;
        Ok(self.unary(v, |g, x, _| {
            g.clone().reshaped(x.shape()).expect("same element count")
        }))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        if start + len > cols {
            return Err(Error::Shape(format!(
                "slice_last: [{start}, {}) out of {cols}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rows_cols implies ndim >= 1") = len;
        let value = CTensor::from_parts(shape, data);
        Ok(self.unary(value, move |g, x, _| {
            let mut gx = CTensor::zeros(x.shape());
            for r in 0..rows {
                gx.data_mut()[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            gx
        }))
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_last: no inputs".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].shape().len() - 1];
        let rows = values[0].rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for v in &values {
            if &v.shape()[..v.shape().len() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat_last: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = CTensor::from_parts(shape, data);
        Ok(first.tape.custom(
            parts,
            value,
            Box::new(move |g, ins, _| {
                let mut grads: Vec<CTensor> = ins.iter().map(|x| CTensor::zeros(x.shape())).collect();
                for r in 0..rows {
                    let mut off = 0;
                    for (gi, &w) in grads.iter_mut().zip(&widths) {
                        gi.data_mut()[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Stacks 2-D row blocks along the first axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows: no inputs".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].last_dim();
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for v in &values {
            if v.shape().len() != 2 || v.last_dim() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
            lens.push(v.len());
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let value = CTensor::from_parts(vec![rows, cols], data);
        Ok(first.tape.custom(
            parts,
            value,
            Box::new(move |g, ins, _| {
                let mut off = 0;
                ins.iter()
                    .zip(&lens)
                    .map(|(x, &n)| {
                        let gx = CTensor::from_parts(
                            x.shape().to_vec(),
                            g.data()[off..off + n].to_vec(),
                        );
                        off += n;
                        Some(gx)
                    })
                    .collect()
            }),
        ))
    }

    // ----- reductions -----

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        non_empty("sum", &x)?;
        let s = x.data().iter().sum::<C64>();
        Ok(self.unary(CTensor::scalar(s), |g, x, _| CTensor::full(x.shape(), g.data()[0])))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        non_empty("mean", &self.value())?;
        Ok(self.sum()?.scale_re(1.0 / n as f64))
    }

    /// Sums out one axis.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, mid, inner) = split_axis(x.shape(), axis)?;
        let mut out = vec![ZERO; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * mid + m) * inner + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = CTensor::from_parts(shape, out);
        Ok(self.unary(value, move |g, x, _| {
            let mut gx = CTensor::zeros(x.shape());
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        gx.data_mut()[(o * mid + m) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            gx
        }))
    }

    /// Running sum along the last axis.
    pub fn cumsum_last(self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let mut out = x.as_ref().clone();
        for r in 0..rows {
            for c in 1..cols {
                let prev = out.data()[r * cols + c - 1];
                out.data_mut()[r * cols + c] += prev;
            }
        }
        Ok(self.unary(out, move |g, _, _| {
            let mut gx = g.clone();
            for r in 0..rows {
                for c in (0..cols.saturating_sub(1)).rev() {
                    let next = gx.data()[r * cols + c + 1];
                    gx.data_mut()[r * cols + c] += next;
                }
            }
            gx
        }))
    }

    /// Euclidean norm of each row over the last axis: `(.., c) -> (.., 1)`.
    pub fn row_norm(self) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        let norms: Vec<C64> = (0..rows)
            .map(|r| {
                real(
                    x.data()[r * cols..(r + 1) * cols]
                        .iter()
                        .map(|z| z.norm_sqr())
                        .sum::<f64>()
                        .sqrt(),
                )
            })
            .collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("ndim >= 1") = 1;
        let value = CTensor::from_parts(shape, norms);
        Ok(self.unary(value, move |g, x, y| {
            let mut gx = CTensor::zeros(x.shape());
            for r in 0..rows {
                let n = y.data()[r].re;
                if n > 0.0 {
                    let s = g.data()[r].re / n;
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] = x.data()[r * cols + c] * s;
                    }
                }
            }
            gx
        }))
    }

    // ----- nonlinear elementwise maps -----

    /// Modulus `|z|` (real output).
    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(|z| real(z.norm()));
        self.unary(v, |g, x, y| {
            let mut gx = CTensor::zeros(x.shape());
            for ((o, &z), (&gy, &m)) in gx
                .data_mut()
                .iter_mut()
                .zip(x.data())
                .zip(g.data().iter().zip(y.data()))
            {
                if m.re > 0.0 {
                    *o = z * (gy.re / m.re);
                }
            }
            gx
        })
    }

    /// Squared modulus `|z|^2` (real output).
    pub fn abs2(self) -> Var<'t> {
        let v = self.value().map(|z| real(z.norm_sqr()));
        self.unary(v, |g, x, _| g.zip_map(x, |g, z| z * (2.0 * g.re)))
    }

    /// Real part (real output).
    pub fn re(self) -> Var<'t> {
        let v = self.value().map(|z| real(z.re));
        self.unary(v, |g, _, _| g.map(|g| real(g.re)))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(|z| z.exp());
        self.unary(v, |g, _, y| g.zip_map(y, |g, y| g * y.conj()))
    }

    pub fn recip(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|z| z.norm_sqr() == 0.0) {
            return Err(Error::Numeric("recip: division by zero".into()));
        }
        let v = x.map(|z| ONE / z);
        Ok(self.unary(v, |g, _, y| g.zip_map(y, |g, y| g * (-(y * y)).conj())))
    }

    /// Principal complex square root.
    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().map(|z| z.sqrt());
        self.unary(v, |g, _, y| {
            g.zip_map(y, |g, y| {
                if y.norm_sqr() == 0.0 {
                    ZERO
                } else {
                    g * (ONE / (2.0 * y)).conj()
                }
            })
        })
    }

    /// Natural log of the real part (real output).
    pub fn ln_re(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|z| z.re <= 0.0) {
            return Err(Error::Numeric("ln_re: non-positive argument".into()));
        }
        let v = x.map(|z| real(z.re.ln()));
        Ok(self.unary(v, |g, x, _| g.zip_map(x, |g, z| real(g.re / z.re))))
    }

    /// `sigmoid(Re z)` (real output).
    pub fn sigmoid_re(self) -> Var<'t> {
        let v = self.value().map(|z| real(sigmoid(z.re)));
        self.unary(v, |g, _, y| g.zip_map(y, |g, y| real(g.re * y.re * (1.0 - y.re))))
    }

    /// `tanh(Re z)` (real output).
    pub fn tanh_re(self) -> Var<'t> {
        let v = self.value().map(|z| real(z.re.tanh()));
        self.unary(v, |g, _, y| g.zip_map(y, |g, y| real(g.re * (1.0 - y.re * y.re))))
    }

    /// `LeakyReLU(Re z)` (real output).
    pub fn leaky_relu_re(self, slope: f64) -> Var<'t> {
        self.tape.note_branches(self.value().data().iter().map(|z| u8::from(z.re > 0.0)));
        let v = self
            .value()
            .map(|z| real(if z.re > 0.0 { z.re } else { slope * z.re }));
        self.unary(v, move |g, x, _| {
            g.zip_map(x, |g, z| real(if z.re > 0.0 { g.re } else { slope * g.re }))
        })
    }

    /// Split complex ReLU: ReLU on real and imaginary parts independently.
    pub fn crelu(self) -> Var<'t> {
        self.tape.note_branches(self.value().data().iter().map(|z| u8::from(z.re > 0.0) | u8::from(z.im > 0.0) << 1));
        let v = self.value().map(|z| C64::new(z.re.max(0.0), z.im.max(0.0)));
        self.unary(v, |g, x, _| {
            g.zip_map(x, |g, z| {
                C64::new(
                    if z.re > 0.0 { g.re } else { 0.0 },
                    if z.im > 0.0 { g.im } else { 0.0 },
                )
            })
        })
    }

    /// `max(Re z, floor)` (real output).
    pub fn max_re(self, floor: f64) -> Var<'t> {
        self.tape.note_branches(self.value().data().iter().map(|z| u8::from(z.re > floor)));
        let v = self.value().map(|z| real(z.re.max(floor)));
        self.unary(v, move |g, x, _| {
            g.zip_map(x, |g, z| real(if z.re > floor { g.re } else { 0.0 }))
        })
    }

    /// `clamp(Re z, lo, hi)` (real output).
    pub fn clamp_re(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.note_branches(self.value().data().iter().map(|z| u8::from(z.re > lo) + u8::from(z.re >= hi)));
        let v = self.value().map(|z| real(z.re.clamp(lo, hi)));
        self.unary(v, move |g, x, _| {
            g.zip_map(x, |g, z| real(if z.re > lo && z.re < hi { g.re } else { 0.0 }))
        })
    }

    /// `z / |z|`; entries with `|z| < floor` map to `1 + 0j` with zero gradient.
    pub fn unit_phase(self, floor: f64) -> Var<'t> {
        self.tape.note_branches(self.value().data().iter().map(|z| u8::from(z.norm() < floor)));
        let v = self.value().map(|z| {
            let m = z.norm();
            if m < floor {
                ONE
            } else {
                z / m
            }
        });
        self.unary(v, move |g, x, _| {
            g.zip_map(x, |g, z| {
                let m = z.norm();
                if m < floor {
                    ZERO
                } else {
                    g / (2.0 * m) - g.conj() * z * z / (2.0 * m * m * m)
                }
            })
        })
    }

    /// Softmax of the real part along `axis` (real output).
    pub fn softmax_re(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (outer, mid, inner) = split_axis(x.shape(), axis)?;
        let mut out = CTensor::zeros(x.shape());
        for o in 0..outer {
            for i in 0..inner {
                let idx = |m: usize| (o * mid + m) * inner + i;
                let mx = (0..mid).map(|m| x.data()[idx(m)].re).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for m in 0..mid {
                    let e = (x.data()[idx(m)].re - mx).exp();
                    out.data_mut()[idx(m)] = real(e);
                    s += e;
                }
                for m in 0..mid {
                    out.data_mut()[idx(m)] /= s;
                }
            }
        }
        Ok(self.unary(out, move |g, _, y| softmax_backward(g, y, outer, mid, inner)))
    }

    /// Softmax of the real part along the last axis restricted to entries
    /// where `mask[i % (rows * cols)]` holds; a row with no admissible entry
    /// yields all zeros. The mask is shared across the leading batch axis.
    pub fn masked_softmax_last(self, mask: std::rc::Rc<Vec<bool>>) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, cols) = x.rows_cols();
        if mask.is_empty() || x.len() % mask.len() != 0 || mask.len() % cols.max(1) != 0 {
            return Err(Error::Shape(format!(
                "masked_softmax_last: mask of {} for {:?}",
                mask.len(),
                x.shape()
            )));
        }
        let mut out = CTensor::zeros(x.shape());
        let period = mask.len();
        for r in 0..rows {
            let base = r * cols;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                if mask[(base + c) % period] {
                    mx = mx.max(x.data()[base + c].re);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for c in 0..cols {
                if mask[(base + c) % period] {
                    let e = (x.data()[base + c].re - mx).exp();
                    out.data_mut()[base + c] = real(e);
                    s += e;
                }
            }
            for c in 0..cols {
                out.data_mut()[base + c] /= s;
            }
        }
        Ok(self.unary(out, move |g, _, y| softmax_backward(g, y, rows, cols, 1)))
    }
}

/// Softmax adjoint over the `mid` axis; masked entries have `y = 0` and
/// therefore receive zero gradient automatically.
fn softmax_backward(
    g: &CTensor,
    y: &CTensor,
    outer: usize,
    mid: usize,
    inner: usize,
) -> CTensor {
    let mut gx = CTensor::zeros(y.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |m: usize| (o * mid + m) * inner + i;
            let dot: f64 = (0..mid).map(|m| y.data()[idx(m)].re * g.data()[idx(m)].re).sum();
            for m in 0..mid {
                let yy = y.data()[idx(m)].re;
                gx.data_mut()[idx(m)] = real(yy * (g.data()[idx(m)].re - dot));
            }
        }
    }
    gx
}

/// Gauss-Jordan inverse of a row-major `n x n` block; `None` if singular.
fn invert(a: &[C64], n: usize) -> Option<Vec<C64>> {
    let mut m = a.to_vec();
    let mut inv = vec![ZERO; n * n];
    for i in 0..n {
        inv[i * n + i] = ONE;
    }
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| {
            m[i * n + col]
                .norm()
                .partial_cmp(&m[j * n + col].norm())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[piv * n + col].norm() <= scale * 1e-300 || m[piv * n + col].norm() == 0.0 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
        }
        let p = ONE / m[col * n + col];
        for j in 0..n {
            m[col * n + j] *= p;
            inv[col * n + j] *= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[i * n + col];
                if f != ZERO {
                    for j in 0..n {
                        let (mc, ic) = (m[col * n + j], inv[col * n + j]);
                        m[i * n + j] -= f * mc;
                        inv[i * n + j] -= f * ic;
                    }
                }
            }
        }
    }
    Some(inv)
}
