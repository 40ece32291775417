//! 2-D convolution and pooling. Direct loop implementations; the shapes in
//! this project are small enough that algorithmic convolution tricks would
//! only add risk.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::{real, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Output spatial extent for one axis.
fn out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1)
}

fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Vec<T>, [usize; 4]) {
    let (bs, cin, h, wd) = dims4(x.shape());
    let (cout, _, kh, kw) = dims4(w.shape());
    let oh = out_extent(h, kh, stride, padding).unwrap();
    let ow = out_extent(wd, kw, stride, padding).unwrap();
    let mut out = vec![T::zero(); bs * cout * oh * ow];
    let xd = x.data();
    let wdat = w.data();
    let bd = b.data();
    for n in 0..bs {
        for co in 0..cout {
            let bias = bd[co];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ci in 0..cin {
                        let x_base = ((n * cin + ci) * h) * wd;
                        let w_base = ((co * cin + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * wd;
                            let w_row = w_base + ky * kw;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc + xd[x_row + ix as usize] * wdat[w_row + kx];
                            }
                        }
                    }
                    out[((n * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [bs, cout, oh, ow])
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

impl<'t, T: Real> Var<'t, T> {
    /// 2-D convolution of `x (B, Cin, H, W)` with `weight (Cout, Cin, kh, kw)`
    /// and per-output-channel `bias (Cout,)`.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        if x.shape().len() != 4 || w.shape().len() != 4 {
            return Err(shape_err(
                "conv2d",
                alloc::format!("x {:?}, w {:?}", x.shape(), w.shape()),
            ));
        }
        let (_, cin, h, wd) = dims4(x.shape());
        let (cout, wcin, kh, kw) = dims4(w.shape());
        if cin != wcin || b.shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                alloc::format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if out_extent(h, kh, stride, padding).is_none() || out_extent(wd, kw, stride, padding).is_none() {
            return Err(shape_err(
                "conv2d",
                alloc::format!("kernel {kh}x{kw} exceeds padded input {h}x{wd}"),
            ));
        }

        let (out, oshape) = conv_forward(&x, &w, &b, stride, padding);
        let (ix, iw, ib) = (self.id, weight.id, bias.id);
        Ok(self.tape.push(
            Tensor::from_raw(oshape.to_vec(), out),
            Some(Box::new(move |g, sink| {
                let (bs, cout, oh, ow) = dims4(g.shape());
                let (_, cin, h, wdim) = dims4(x.shape());
                let (_, _, kh, kw) = dims4(w.shape());
                let gd = g.data();
                let xd = x.data();
                let wdat = w.data();
                let mut dx = vec![T::zero(); x.len()];
                let mut dw = vec![T::zero(); w.len()];
                let mut db = vec![T::zero(); cout];
                for n in 0..bs {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gd[((n * cout + co) * oh + oy) * ow + ox];
                                db[co] = db[co] + gv;
                                for ci in 0..cin {
                                    let x_base = ((n * cin + ci) * h) * wdim;
                                    let w_base = ((co * cin + ci) * kh) * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let x_row = x_base + iy as usize * wdim;
                                        let w_row = w_base + ky * kw;
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= wdim as isize {
                                                continue;
                                            }
                                            dx[x_row + ix as usize] =
                                                dx[x_row + ix as usize] + gv * wdat[w_row + kx];
                                            dw[w_row + kx] =
                                                dw[w_row + kx] + gv * xd[x_row + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                sink(ix, Tensor::from_raw(x.shape().to_vec(), dx));
                sink(iw, Tensor::from_raw(w.shape().to_vec(), dw));
                sink(ib, Tensor::from_raw(vec![cout], db));
            })),
        ))
    }

    /// Non-overlapping average pooling with a `k`x`k` window (stride `k`).
    /// Spatial extents must be divisible by `k`.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape().len() != 4 {
            return Err(shape_err("avg_pool2d", alloc::format!("want 4-d, got {:?}", x.shape())));
        }
        let (bs, c, h, w) = dims4(x.shape());
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("avg_pool2d", alloc::format!("window {k} on {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let inv = T::one() / real::<T>((k * k) as f64);
        let mut out = vec![T::zero(); bs * c * oh * ow];
        let xd = x.data();
        for n in 0..bs {
            for ci in 0..c {
                let base = (n * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        for ky in 0..k {
                            let row = base + (oy * k + ky) * w + ox * k;
                            for kx in 0..k {
                                acc = acc + xd[row + kx];
                            }
                        }
                        out[((n * c + ci) * oh + oy) * ow + ox] = acc * inv;
                    }
                }
            }
        }
        let ia = self.id;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::from_raw(vec![bs, c, oh, ow], out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut dx = vec![T::zero(); in_shape.iter().product()];
                for n in 0..bs {
                    for ci in 0..c {
                        let base = (n * c + ci) * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gd[((n * c + ci) * oh + oy) * ow + ox] * inv;
                                for ky in 0..k {
                                    let row = base + (oy * k + ky) * w + ox * k;
                                    for kx in 0..k {
                                        dx[row + kx] = dx[row + kx] + gv;
                                    }
                                }
                            }
                        }
                    }
                }
                sink(ia, Tensor::from_raw(in_shape.clone(), dx));
            })),
        ))
    }

    /// Global average pooling plus flatten: `(B, C, H, W)` to `(B, C)`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape().len() != 4 {
            return Err(shape_err("global_avg_pool", alloc::format!("want 4-d, got {:?}", x.shape())));
        }
        let (bs, c, h, w) = dims4(x.shape());
        let inv = T::one() / real::<T>((h * w) as f64);
        let xd = x.data();
        let mut out = vec![T::zero(); bs * c];
        for n in 0..bs {
            for ci in 0..c {
                let base = (n * c + ci) * h * w;
                let mut acc = T::zero();
                for i in 0..h * w {
                    acc = acc + xd[base + i];
                }
                out[n * c + ci] = acc * inv;
            }
        }
        let ia = self.id;
        Ok(self.tape.push(
            Tensor::from_raw(vec![bs, c], out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let mut dx = vec![T::zero(); bs * c * h * w];
                for n in 0..bs {
                    for ci in 0..c {
                        let gv = gd[n * c + ci] * inv;
                        let base = (n * c + ci) * h * w;
                        for i in 0..h * w {
                            dx[base + i] = gv;
                        }
                    }
                }
                sink(ia, Tensor::from_raw(vec![bs, c, h, w], dx));
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn conv2d_matches_hand_computed_case() {
        // 1x1x3x3 input, identity-ish 1x1x2x2 kernel, stride 1, no padding.
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap(),
        );
        let w = tape.leaf(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![1], vec![0.5]).unwrap());
        let y = x.conv2d(w, b, 1, 0).unwrap();
        // windows: (1+5, 2+6, 4+8, 5+9) + 0.5
        assert_eq!(y.value().data(), &[6.5, 8.5, 12.5, 14.5]);
    }

    #[test]
    fn conv2d_padding_grows_output() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let y = x.conv2d(w, b, 1, 1).unwrap();
        assert_eq!(y.value().shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn avg_pool_halves_extents() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap(),
        );
        let y = x.avg_pool2d(2).unwrap();
        assert_eq!(y.value().shape(), &[1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[4.0]);
    }

    #[test]
    fn gap_of_constant_map_is_the_constant() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::full(vec![2, 3, 4, 4], 0.7f64));
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.value().shape(), &[2, 3]);
        for &v in y.value().data() {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn gap_of_single_spike_averages_to_one() {
        // one unit holding H*W in channel 1, rest zero -> embedding 1 at channel 1
        let mut data = vec![0.0f64; 2 * 4 * 4];
        data[16] = 16.0; // channel 1, first spatial cell
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2, 4, 4], data).unwrap());
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.value().data(), &[0.0, 1.0]);
    }
}
