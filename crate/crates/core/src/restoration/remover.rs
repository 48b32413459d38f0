//! Pixel-wise blur remover.
//!
//! A stack of 1x1 layers, so every output pixel depends only on the feature
//! values at that pixel: widths [in, hidden, hidden, channels] with
//! conv -> ReLU -> batch norm on both hidden layers and a final sigmoid.
//! Normalization uses the statistics of the current input during
//! optimization; running averages are tracked so they can be frozen after
//! training.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::linalg::matmul;
use crate::error::{CqcdError, Result};
use crate::imaging::Image;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Whether normalization reads batch statistics or the frozen running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Frozen,
}

#[derive(Debug, Clone)]
pub struct BlurRemover {
    pub in_planes: usize,
    pub hidden: usize,
    pub out_channels: usize,
    w1: Array2<f64>,
    b1: Array1<f64>,
    gamma1: Array1<f64>,
    beta1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    gamma2: Array1<f64>,
    beta2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
    run_mean1: Array1<f64>,
    run_var1: Array1<f64>,
    run_mean2: Array1<f64>,
    run_var2: Array1<f64>,
}

/// Forward activations kept for the backward pass.
pub struct RemoverCache {
    pub x: Array2<f64>,
    z1: Array2<f64>,
    bn1: BnCache,
    z2: Array2<f64>,
    bn2: BnCache,
    out: Array2<f64>,
}

impl RemoverCache {
    /// ReLU input signs; finite-difference checks compare these to detect
    /// kink crossings.
    pub fn relu_signs(&self) -> Vec<bool> {
        self.z1
            .iter()
            .chain(self.z2.iter())
            .map(|&z| z > 0.0)
            .collect()
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.out
    }
}

struct BnCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Gradients in the canonical block order of [`BlurRemover::blocks`].
pub struct RemoverGrads {
    pub blocks: Vec<Vec<f64>>,
}

impl RemoverGrads {
    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flatten().copied().collect()
    }
}

fn glorot_uniform(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    let k = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-k..k))
}

impl BlurRemover {
    /// Seeded initialization: Glorot-uniform weights, zero biases, identity
    /// normalization.
    pub fn new(in_planes: usize, hidden: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Self {
            in_planes,
            hidden,
            out_channels,
            w1: glorot_uniform(&mut rng, in_planes, hidden),
            b1: Array1::zeros(hidden),
            gamma1: Array1::ones(hidden),
            beta1: Array1::zeros(hidden),
            w2: glorot_uniform(&mut rng, hidden, hidden),
            b2: Array1::zeros(hidden),
            gamma2: Array1::ones(hidden),
            beta2: Array1::zeros(hidden),
            w3: glorot_uniform(&mut rng, hidden, out_channels),
            b3: Array1::zeros(out_channels),
            run_mean1: Array1::zeros(hidden),
            run_var1: Array1::ones(hidden),
            run_mean2: Array1::zeros(hidden),
            run_var2: Array1::ones(hidden),
        }
    }

    fn bn_forward(
        input: Array2<f64>,
        gamma: &Array1<f64>,
        beta: &Array1<f64>,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
    ) -> (Array2<f64>, BnCache) {
        let n = input.nrows() as f64;
        let (mean, var) = match running {
            Some((m, v)) => (m.clone(), v.clone()),
            None => {
                let mean = input.sum_axis(ndarray::Axis(0)) / n;
                let centered = &input - &mean;
                let var = centered.mapv(|v| v * v).sum_axis(ndarray::Axis(0)) / n;
                (mean, var)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let xhat = (&input - &mean) * &inv_std;
        let out = &xhat * gamma + beta;
        (
            out,
            BnCache {
                input,
                xhat,
                inv_std,
            },
        )
    }

    /// dL/d(input), dL/dgamma, dL/dbeta for batch-statistics normalization.
    fn bn_backward(
        cache: &BnCache,
        gamma: &Array1<f64>,
        dout: &Array2<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let n = cache.input.nrows() as f64;
        let dgamma = (dout * &cache.xhat).sum_axis(ndarray::Axis(0));
        let dbeta = dout.sum_axis(ndarray::Axis(0));
        let dxhat = dout * gamma;
        // dX = inv_std/n * (n dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
        let sum_dxhat = dxhat.sum_axis(ndarray::Axis(0));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(ndarray::Axis(0));
        let mut dx = dxhat * n;
        dx = dx - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
        dx = dx * &cache.inv_std / n;
        (dx, dgamma, dbeta)
    }

    /// Per-pixel forward pass over a (pixels, in_planes) matrix.
    pub fn forward(&self, x: &Array2<f64>, mode: NormMode) -> Result<(Array2<f64>, RemoverCache)> {
        if x.ncols() != self.in_planes {
            return Err(CqcdError::DimensionMismatch(format!(
                "remover expects {} input planes, got {}",
                self.in_planes,
                x.ncols()
            )));
        }
        let z1 = matmul(x, &self.w1) + &self.b1;
        let a1 = z1.mapv(|v| v.max(0.0));
        let running1 = match mode {
            NormMode::Batch => None,
            NormMode::Frozen => Some((&self.run_mean1, &self.run_var1)),
        };
        let (y1, bn1) = Self::bn_forward(a1, &self.gamma1, &self.beta1, running1);
        let z2 = matmul(&y1, &self.w2) + &self.b2;
        let a2 = z2.mapv(|v| v.max(0.0));
        let running2 = match mode {
            NormMode::Batch => None,
            NormMode::Frozen => Some((&self.run_mean2, &self.run_var2)),
        };
        let (y2, bn2) = Self::bn_forward(a2, &self.gamma2, &self.beta2, running2);
        let z3 = matmul(&y2, &self.w3) + &self.b3;
        let out = z3.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        Ok((
            out.clone(),
            RemoverCache {
                x: x.clone(),
                z1,
                bn1,
                z2,
                bn2,
                out,
            },
        ))
    }

    /// Backward pass for batch-mode forwards. Returns the input cotangent
    /// and/or parameter gradients.
    pub fn backward(
        &self,
        cache: &RemoverCache,
        dout: &Array2<f64>,
        need_input: bool,
        need_weights: bool,
    ) -> (Option<Array2<f64>>, Option<RemoverGrads>) {
        // sigmoid
        let dz3 = dout * &cache.out.mapv(|o| o * (1.0 - o));
        let y2 = &cache.bn2.xhat * &self.gamma2 + &self.beta2;
        let dw3 = matmul(&y2.t().to_owned(), &dz3);
        let db3 = dz3.sum_axis(ndarray::Axis(0));
        let dy2 = matmul(&dz3, &self.w3.t().to_owned());
        let (da2, dgamma2, dbeta2) = Self::bn_backward(&cache.bn2, &self.gamma2, &dy2);
        let dz2 = da2 * &cache.z2.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
        let y1 = &cache.bn1.xhat * &self.gamma1 + &self.beta1;
        let dw2 = matmul(&y1.t().to_owned(), &dz2);
        let db2 = dz2.sum_axis(ndarray::Axis(0));
        let dy1 = matmul(&dz2, &self.w2.t().to_owned());
        let (da1, dgamma1, dbeta1) = Self::bn_backward(&cache.bn1, &self.gamma1, &dy1);
        let dz1 = da1 * &cache.z1.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });

        let dx = if need_input {
            Some(matmul(&dz1, &self.w1.t().to_owned()))
        } else {
            None
        };
        let grads = if need_weights {
            let dw1 = matmul(&cache.x.t().to_owned(), &dz1);
            let db1 = dz1.sum_axis(ndarray::Axis(0));
            Some(RemoverGrads {
                blocks: vec![
                    dw1.into_raw_vec_and_offset().0,
                    db1.to_vec(),
                    dgamma1.to_vec(),
                    dbeta1.to_vec(),
                    dw2.into_raw_vec_and_offset().0,
                    db2.to_vec(),
                    dgamma2.to_vec(),
                    dbeta2.to_vec(),
                    dw3.into_raw_vec_and_offset().0,
                    db3.to_vec(),
                ],
            })
        } else {
            None
        };
        (dx, grads)
    }

    /// Folds the cache's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, cache: &RemoverCache) {
        let n = cache.bn1.input.nrows() as f64;
        let unbias = if n > 1.5 { n / (n - 1.0) } else { 1.0 };
        for (bn, (rm, rv)) in [
            (&cache.bn1, (&mut self.run_mean1, &mut self.run_var1)),
            (&cache.bn2, (&mut self.run_mean2, &mut self.run_var2)),
        ] {
            let mean = bn.input.sum_axis(ndarray::Axis(0)) / n;
            let centered = &bn.input - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(ndarray::Axis(0)) / n * unbias;
            rm.zip_mut_with(&mean, |r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            rv.zip_mut_with(&var, |r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
        }
    }

    /// Parameter blocks in canonical order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.gamma1.as_slice().unwrap(),
            self.beta1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.gamma2.as_slice().unwrap(),
            self.beta2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.gamma1.as_slice_mut().unwrap(),
            self.beta1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.gamma2.as_slice_mut().unwrap(),
            self.beta2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Running normalization statistics, exposed for checkpoints.
    pub fn running_stats(&self) -> Vec<&Array1<f64>> {
        vec![&self.run_mean1, &self.run_var1, &self.run_mean2, &self.run_var2]
    }

    pub fn set_running_stats(&mut self, stats: Vec<Array1<f64>>) -> Result<()> {
        if stats.len() != 4 || stats.iter().any(|s| s.len() != self.hidden) {
            return Err(CqcdError::DimensionMismatch(
                "running statistics shape mismatch".into(),
            ));
        }
        let mut it = stats.into_iter();
        self.run_mean1 = it.next().unwrap();
        self.run_var1 = it.next().unwrap();
        self.run_mean2 = it.next().unwrap();
        self.run_var2 = it.next().unwrap();
        Ok(())
    }
}

/// Rebuilds an (h, w, channels) image from the flattened remover output.
pub fn rows_to_image(rows: &Array2<f64>, h: usize, w: usize) -> Result<Image> {
    let c = rows.ncols();
    let mut data = ndarray::Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(y, x, ch)] = rows[(y * w + x, ch)];
            }
        }
    }
    Image::new(data)
}
