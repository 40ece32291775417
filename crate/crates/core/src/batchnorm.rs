//! Batch normalization over `(B, C, H, W)` maps, normalizing each channel
//! across batch and spatial positions.
//!
//! Training mode normalizes by batch statistics (biased variance) and reports
//! them so the owning layer can refresh its running estimates. Inference mode
//! normalizes by the running statistics, making outputs independent of batch
//! composition.

use alloc::boxed::Box;
use alloc::vec;

use crate::error::{shape_err, Result};
use crate::real::{real, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Batch statistics produced by one training-mode forward.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Biased (1/m) variance, matching what the forward normalized by.
    pub var: Tensor<T>,
}

fn check_bn_shapes<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err("batchnorm", alloc::format!("want 4-d input, got {s:?}")));
    }
    let c = s[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "batchnorm",
            alloc::format!("gamma {:?}, beta {:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok((s[0], c, s[2], s[3]))
}

impl<'t, T: Real> Var<'t, T> {
    /// Training-mode batch normalization. Returns the normalized map and the
    /// batch statistics for the running-average update.
    pub fn batchnorm_train(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let (bs, c, h, w) = check_bn_shapes(&x, &gv, &bv)?;
        let m = bs * h * w;
        let inv_m = T::one() / real::<T>(m as f64);
        let xd = x.data();

        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for n in 0..bs {
                let base = (n * c + ci) * h * w;
                for i in 0..h * w {
                    acc = acc + xd[base + i];
                }
            }
            let mu = acc * inv_m;
            let mut vacc = T::zero();
            for n in 0..bs {
                let base = (n * c + ci) * h * w;
                for i in 0..h * w {
                    let d = xd[base + i] - mu;
                    vacc = vacc + d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = vacc * inv_m;
        }

        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ci in 0..c {
            inv_std[ci] = T::one() / (var[ci] + eps).sqrt();
        }
        for n in 0..bs {
            for ci in 0..c {
                let base = (n * c + ci) * h * w;
                for i in 0..h * w {
                    let xh = (xd[base + i] - mean[ci]) * inv_std[ci];
                    xhat[base + i] = xh;
                    out[base + i] = gv.data()[ci] * xh + bv.data()[ci];
                }
            }
        }

        let stats = BatchStats {
            mean: Tensor::from_raw(vec![c], mean),
            var: Tensor::from_raw(vec![c], var.clone()),
        };
        let xhat_saved = Tensor::from_raw(x.shape().to_vec(), xhat);
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        let out_var = self.tape.push(
            Tensor::from_raw(x.shape().to_vec(), out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let xh = xhat_saved.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for n in 0..bs {
                    for ci in 0..c {
                        let base = (n * c + ci) * h * w;
                        for i in 0..h * w {
                            dgamma[ci] = dgamma[ci] + gd[base + i] * xh[base + i];
                            dbeta[ci] = dbeta[ci] + gd[base + i];
                        }
                    }
                }
                // dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
                let mut dx = vec![T::zero(); gd.len()];
                for ci in 0..c {
                    let g_mean = dbeta[ci] * inv_m;
                    let gx_mean = dgamma[ci] * inv_m;
                    let scale = gv.data()[ci] * inv_std[ci];
                    for n in 0..bs {
                        let base = (n * c + ci) * h * w;
                        for i in 0..h * w {
                            dx[base + i] =
                                scale * (gd[base + i] - g_mean - xh[base + i] * gx_mean);
                        }
                    }
                }
                sink(ix, Tensor::from_raw(g.shape().to_vec(), dx));
                sink(ig, Tensor::from_raw(vec![c], dgamma));
                sink(ib, Tensor::from_raw(vec![c], dbeta));
            })),
        );
        Ok((out_var, stats))
    }

    /// Inference-mode batch normalization against fixed running statistics.
    pub fn batchnorm_eval(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let (bs, c, h, w) = check_bn_shapes(&x, &gv, &bv)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(shape_err("batchnorm", "running stats do not match channel count"));
        }
        let xd = x.data();
        let mut inv_std = vec![T::zero(); c];
        for ci in 0..c {
            inv_std[ci] = T::one() / (running_var.data()[ci] + eps).sqrt();
        }
        let mut out = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        for n in 0..bs {
            for ci in 0..c {
                let base = (n * c + ci) * h * w;
                for i in 0..h * w {
                    let xh = (xd[base + i] - running_mean.data()[ci]) * inv_std[ci];
                    xhat[base + i] = xh;
                    out[base + i] = gv.data()[ci] * xh + bv.data()[ci];
                }
            }
        }
        let xhat_saved = Tensor::from_raw(x.shape().to_vec(), xhat);
        let (ix, ig, ib) = (self.id, gamma.id, beta.id);
        Ok(self.tape.push(
            Tensor::from_raw(x.shape().to_vec(), out),
            Some(Box::new(move |g, sink| {
                let gd = g.data();
                let xh = xhat_saved.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); gd.len()];
                for n in 0..bs {
                    for ci in 0..c {
                        let base = (n * c + ci) * h * w;
                        let scale = gv.data()[ci] * inv_std[ci];
                        for i in 0..h * w {
                            dgamma[ci] = dgamma[ci] + gd[base + i] * xh[base + i];
                            dbeta[ci] = dbeta[ci] + gd[base + i];
                            dx[base + i] = gd[base + i] * scale;
                        }
                    }
                }
                sink(ix, Tensor::from_raw(g.shape().to_vec(), dx));
                sink(ig, Tensor::from_raw(vec![c], dgamma));
                sink(ib, Tensor::from_raw(vec![c], dbeta));
            })),
        ))
    }
}

/// In-place running-average update: `running <- (1 - momentum) * running +
/// momentum * batch`.
pub fn update_running<T: Real>(running: &mut Tensor<T>, batch: &Tensor<T>, momentum: T) {
    debug_assert_eq!(running.shape(), batch.shape());
    let keep = T::one() - momentum;
    for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = keep * *r + momentum * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn train_mode_normalizes_to_zero_mean_unit_var() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let gamma = tape.leaf(Tensor::from_vec(vec![1], vec![1.0]).unwrap());
        let beta = tape.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let (y, stats) = x.batchnorm_train(gamma, beta, 1e-5).unwrap();
        let yv = y.value();
        let mean: f64 = yv.data().iter().sum::<f64>() / 4.0;
        let var: f64 = yv.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4); // eps slightly shrinks the variance
        assert!((stats.mean.data()[0] - 2.5).abs() < 1e-12);
        assert!((stats.var.data()[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn zero_input_stays_finite_in_train_mode() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3, 4, 4]));
        let gamma = tape.leaf(Tensor::full(vec![3], 1.0f64));
        let beta = tape.leaf(Tensor::zeros(vec![3]));
        let (y, _) = x.batchnorm_train(gamma, beta, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..4 * 2 * 2 * 2).map(|i| (i as f64 * 0.37).sin()).collect();
        let x4 = tape.leaf(Tensor::from_vec(vec![4, 2, 2, 2], data.clone()).unwrap());
        let x1 = tape.leaf(Tensor::from_vec(vec![1, 2, 2, 2], data[..8].to_vec()).unwrap());
        let gamma = tape.leaf(Tensor::from_vec(vec![2], vec![1.3, 0.8]).unwrap());
        let beta = tape.leaf(Tensor::from_vec(vec![2], vec![0.1, -0.2]).unwrap());
        let rm = Tensor::from_vec(vec![2], vec![0.05, -0.1]).unwrap();
        let rv = Tensor::from_vec(vec![2], vec![0.9, 1.1]).unwrap();
        let y4 = x4.batchnorm_eval(gamma, beta, &rm, &rv, 1e-5).unwrap();
        let y1 = x1.batchnorm_eval(gamma, beta, &rm, &rv, 1e-5).unwrap();
        assert_eq!(&y4.value().data()[..8], y1.value().data());
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut running = Tensor::from_vec(vec![2], vec![1.0f64, 0.0]).unwrap();
        let batch = Tensor::from_vec(vec![2], vec![0.0f64, 1.0]).unwrap();
        update_running(&mut running, &batch, 0.1);
        assert!((running.data()[0] - 0.9).abs() < 1e-15);
        assert!((running.data()[1] - 0.1).abs() < 1e-15);
    }
}
