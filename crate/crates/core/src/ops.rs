//! Differentiable primitives: elementwise arithmetic, activations, softmax,
//! reductions, affine maps, row-wise cosine similarity, and class gathering.
//!
//! Convolution, pooling, and batch normalization live in [`crate::conv`] and
//! [`crate::batchnorm`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{degenerate, shape_err, Result};
use crate::real::{real, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols;
    (rows, cols)
}

impl<'t, T: Real> Var<'t, T> {
    fn check_same_shape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        debug_assert!(self.same_tape(other), "vars from different tapes");
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, alloc::format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_shape(&rhs, "add")?;
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_map(&b, |x, y| x + y)?;
        let (ia, ib) = (self.id, rhs.id);
        Ok(self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, g.clone());
                sink(ib, g.clone());
            })),
        ))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_shape(&rhs, "sub")?;
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_map(&b, |x, y| x - y)?;
        let (ia, ib) = (self.id, rhs.id);
        Ok(self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, g.clone());
                sink(ib, g.map(|v| -v));
            })),
        ))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_shape(&rhs, "mul")?;
        let (a, b) = (self.value(), rhs.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        let (ia, ib) = (self.id, rhs.id);
        Ok(self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, g.zip_map(&b, |gv, bv| gv * bv).expect("shape"));
                sink(ib, g.zip_map(&a, |gv, av| gv * av).expect("shape"));
            })),
        ))
    }

    pub fn neg(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.map(|x| -x);
        let ia = self.id;
        self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| sink(ia, g.map(|v| -v)))),
        )
    }

    /// `c * x`.
    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| c * x);
        let ia = self.id;
        self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| sink(ia, g.map(|v| c * v)))),
        )
    }

    /// `x + c`.
    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x + c);
        let ia = self.id;
        self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| sink(ia, g.clone()))),
        )
    }

    /// `c - x`; `one_minus` is the common case for mask complements.
    pub fn rsub_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| c - x);
        let ia = self.id;
        self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| sink(ia, g.map(|v| -v)))),
        )
    }

    pub fn one_minus(self) -> Var<'t, T> {
        self.rsub_scalar(T::one())
    }

    pub fn relu(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.map(|x| if x > T::zero() { x } else { T::zero() });
        let ia = self.id;
        self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, g.zip_map(&a, |gv, av| if av > T::zero() { gv } else { T::zero() }).expect("shape"));
            })),
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.map(sigmoid_scalar);
        let s = out.clone();
        let ia = self.id;
        self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, g.zip_map(&s, |gv, sv| gv * sv * (T::one() - sv)).expect("shape"));
            })),
        )
    }

    /// Clamp into `[lo, hi]`; gradient passes through inside the interval and
    /// is zero where the value was clamped.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        let a = self.value();
        let out = a.map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        let ia = self.id;
        self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(
                    ia,
                    g.zip_map(&a, |gv, av| if av < lo || av > hi { T::zero() } else { gv })
                        .expect("shape"),
                );
            })),
        )
    }

    /// Natural logarithm; rejects non-positive inputs.
    pub fn ln(self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.iter().any(|&x| x <= T::zero()) {
            return Err(degenerate("ln", "non-positive input"));
        }
        let out = a.map(|x| x.ln());
        let ia = self.id;
        Ok(self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, g.zip_map(&a, |gv, av| gv / av).expect("shape"));
            })),
        ))
    }

    pub fn exp(self) -> Var<'t, T> {
        let out = self.value().map(|x| x.exp());
        let e = out.clone();
        let ia = self.id;
        self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, g.zip_map(&e, |gv, ev| gv * ev).expect("shape"));
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t, T> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        let mut out = vec![T::zero(); a.len()];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            softmax_row(row, &mut out[r * cols..(r + 1) * cols]);
        }
        let y = Tensor::from_raw(a.shape().to_vec(), out);
        let y_saved = y.clone();
        let ia = self.id;
        self.tape.push(
            y,
            Some(alloc::boxed::Box::new(move |g, sink| {
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let yr = &y_saved.data()[r * cols..(r + 1) * cols];
                    let dot = gr.iter().zip(yr).fold(T::zero(), |acc, (&gv, &yv)| acc + gv * yv);
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                sink(ia, Tensor::from_raw(g.shape().to_vec(), dx));
            })),
        )
    }

    /// Numerically stable `log(softmax(x))` over the last axis.
    pub fn log_softmax(self) -> Var<'t, T> {
        let a = self.value();
        let (rows, cols) = rows_cols(a.shape());
        let mut out = vec![T::zero(); a.len()];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            let logsum = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            for c in 0..cols {
                out[r * cols + c] = row[c] - logsum;
            }
        }
        let y = Tensor::from_raw(a.shape().to_vec(), out);
        let y_saved = y.clone();
        let ia = self.id;
        self.tape.push(
            y,
            Some(alloc::boxed::Box::new(move |g, sink| {
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let yr = &y_saved.data()[r * cols..(r + 1) * cols];
                    let gsum = gr.iter().fold(T::zero(), |acc, &v| acc + v);
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                sink(ia, Tensor::from_raw(g.shape().to_vec(), dx));
            })),
        )
    }

    /// Picks `x[b, labels[b]]` out of a `(B, C)` tensor.
    pub fn gather_classes(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let shape = a.shape();
        if shape.len() != 2 {
            return Err(shape_err("gather_classes", alloc::format!("want (B, C), got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(shape_err("gather_classes", alloc::format!("{b} rows, {} labels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(degenerate("gather_classes", alloc::format!("label {bad} out of {c} classes")));
        }
        let picks: Vec<T> = labels.iter().enumerate().map(|(r, &y)| a.data()[r * c + y]).collect();
        let labels: Vec<usize> = labels.to_vec();
        let ia = self.id;
        Ok(self.tape.push(
            Tensor::from_raw(vec![b], picks),
            Some(alloc::boxed::Box::new(move |g, sink| {
                let mut dx = vec![T::zero(); b * c];
                for (r, &y) in labels.iter().enumerate() {
                    dx[r * c + y] = g.data()[r];
                }
                sink(ia, Tensor::from_raw(vec![b, c], dx));
            })),
        ))
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let total = a.iter().fold(T::zero(), |acc, &v| acc + v);
        let shape = a.shape().to_vec();
        let ia = self.id;
        Ok(self.tape.push(
            Tensor::scalar(total),
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, Tensor::full(shape.clone(), g.item()));
            })),
        ))
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let n = real::<T>(a.len() as f64);
        let total = a.iter().fold(T::zero(), |acc, &v| acc + v);
        let shape = a.shape().to_vec();
        let ia = self.id;
        Ok(self.tape.push(
            Tensor::scalar(total / n),
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, Tensor::full(shape.clone(), g.item() / n));
            })),
        ))
    }

    /// `(B, ...)` to `(B, prod(rest))`.
    pub fn flatten(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let shape = a.shape();
        if shape.is_empty() {
            return Err(shape_err("flatten", "scalar input"));
        }
        let b = shape[0];
        let rest: usize = shape[1..].iter().product();
        let orig = shape.to_vec();
        let out = a.reshaped(vec![b, rest])?;
        let ia = self.id;
        Ok(self.tape.push(
            out,
            Some(alloc::boxed::Box::new(move |g, sink| {
                sink(ia, g.reshaped(orig.clone()).expect("numel"));
            })),
        ))
    }

    /// Affine map: `x (B, in) @ w (out, in)^T + b (out)`.
    pub fn linear(self, weight: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let bv = bias.value();
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bv.shape() != [ws[0]] {
            return Err(shape_err(
                "linear",
                alloc::format!("x {xs:?}, w {ws:?}, b {:?}", bv.shape()),
            ));
        }
        let (batch, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); batch * dout];
        for r in 0..batch {
            let xr = &x.data()[r * din..(r + 1) * din];
            for o in 0..dout {
                let wr = &w.data()[o * din..(o + 1) * din];
                let mut acc = bv.data()[o];
                for i in 0..din {
                    acc = acc + xr[i] * wr[i];
                }
                out[r * dout + o] = acc;
            }
        }
        let (ix, iw, ib) = (self.id, weight.id, bias.id);
        Ok(self.tape.push(
            Tensor::from_raw(vec![batch, dout], out),
            Some(alloc::boxed::Box::new(move |g, sink| {
                let gd = g.data();
                let mut dx = vec![T::zero(); batch * din];
                let mut dw = vec![T::zero(); dout * din];
                let mut db = vec![T::zero(); dout];
                for r in 0..batch {
                    let xr = &x.data()[r * din..(r + 1) * din];
                    for o in 0..dout {
                        let gv = gd[r * dout + o];
                        db[o] = db[o] + gv;
                        let wr = &w.data()[o * din..(o + 1) * din];
                        for i in 0..din {
                            dx[r * din + i] = dx[r * din + i] + gv * wr[i];
                            dw[o * din + i] = dw[o * din + i] + gv * xr[i];
                        }
                    }
                }
                sink(ix, Tensor::from_raw(vec![batch, din], dx));
                sink(iw, Tensor::from_raw(vec![dout, din], dw));
                sink(ib, Tensor::from_raw(vec![dout], db));
            })),
        ))
    }

    /// Row-wise cosine similarity of two `(B, d)` tensors, returning `(B,)`.
    /// Every row of both inputs must have a nonzero norm.
    pub fn cosine_rows(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_shape(&rhs, "cosine")?;
        let u = self.value();
        let v = rhs.value();
        let shape = u.shape();
        if shape.len() != 2 {
            return Err(shape_err("cosine", alloc::format!("want (B, d), got {shape:?}")));
        }
        let (b, d) = (shape[0], shape[1]);
        let mut sims = vec![T::zero(); b];
        let mut unorms = vec![T::zero(); b];
        let mut vnorms = vec![T::zero(); b];
        for r in 0..b {
            let ur = &u.data()[r * d..(r + 1) * d];
            let vr = &v.data()[r * d..(r + 1) * d];
            let (mut uu, mut vv, mut uv) = (T::zero(), T::zero(), T::zero());
            for i in 0..d {
                uu = uu + ur[i] * ur[i];
                vv = vv + vr[i] * vr[i];
                uv = uv + ur[i] * vr[i];
            }
            if uu == T::zero() || vv == T::zero() {
                return Err(degenerate("cosine", alloc::format!("zero-norm vector in row {r}")));
            }
            unorms[r] = uu.sqrt();
            vnorms[r] = vv.sqrt();
            sims[r] = uv / (unorms[r] * vnorms[r]);
        }
        let sims_saved = sims.clone();
        let (iu, iv) = (self.id, rhs.id);
        Ok(self.tape.push(
            Tensor::from_raw(vec![b], sims),
            Some(alloc::boxed::Box::new(move |g, sink| {
                let mut du = vec![T::zero(); b * d];
                let mut dv = vec![T::zero(); b * d];
                for r in 0..b {
                    let gr = g.data()[r];
                    let s = sims_saved[r];
                    let (un, vn) = (unorms[r], vnorms[r]);
                    let ur = &u.data()[r * d..(r + 1) * d];
                    let vr = &v.data()[r * d..(r + 1) * d];
                    for i in 0..d {
                        du[r * d + i] = gr * (vr[i] / (un * vn) - s * ur[i] / (un * un));
                        dv[r * d + i] = gr * (ur[i] / (un * vn) - s * vr[i] / (vn * vn));
                    }
                }
                sink(iu, Tensor::from_raw(vec![b, d], du));
                sink(iv, Tensor::from_raw(vec![b, d], dv));
            })),
        ))
    }
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Evaluate from the side that avoids overflow in exp.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Plain (non-tape) softmax over the last axis; used by evaluation paths.
pub fn softmax_value<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = rows_cols(x.shape());
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        softmax_row(&x.data()[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

/// Row-wise argmax over the last axis; ties take the lowest index.
pub fn argmax_rows<T: Real>(x: &Tensor<T>) -> Vec<usize> {
    let (rows, cols) = rows_cols(x.shape());
    (0..rows)
        .map(|r| {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
