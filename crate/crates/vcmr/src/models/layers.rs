//! Trainable parameters and 1-D network layers with explicit forward and
//! backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`;
//! `backward` consumes the cache, accumulates parameter gradients and
//! returns the gradient with respect to its input. All arithmetic is f64.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2};
use rand::Rng;


/// A named tensor with an accumulated gradient and a trainability flag.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { name: name.into(), value, grad, trainable: true }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn count(&self) -> usize {
        self.value.len()
    }
}

/// Uniform init in +-sqrt(1/fan_in), the usual scheme for ReLU stacks.
fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// 1-D convolution over (batch, channels, length).
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: Param, // [out, in, k]
    pub b: Param, // [out]
    pub stride: usize,
    pub pad: usize,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    cache_input: Option<Array3<f64>>,
}

impl Conv1d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel;
        Conv1d {
            w: Param::new(format!("{name}.w"), init_uniform(rng, &[out_channels, in_channels, kernel], fan_in)),
            b: Param::new(format!("{name}.b"), init_uniform(rng, &[out_channels], fan_in)),
            stride,
            pad,
            in_channels,
            out_channels,
            kernel,
            cache_input: None,
        }
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        (in_len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Array3<f64>, sample: usize, out_len: usize) -> Array2<f64> {
        let k = self.kernel;
        let in_len = x.shape()[2];
        let mut cols = Array2::zeros((self.in_channels * k, out_len));
        for c in 0..self.in_channels {
            for kk in 0..k {
                for j in 0..out_len {
                    let pos = (j * self.stride + kk) as isize - self.pad as isize;
                    if pos >= 0 && (pos as usize) < in_len {
                        cols[[c * k + kk, j]] = x[[sample, c, pos as usize]];
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let (batch, _, in_len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out_len = self.out_len(in_len);
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let w2 = w2
            .into_shape((self.out_channels, self.in_channels * self.kernel))
            .unwrap();
        let bias = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = Array3::zeros((batch, self.out_channels, out_len));
        for s in 0..batch {
            let cols = self.im2col(x, s, out_len);
            let mut ys = w2.dot(&cols);
            for (mut row, &b) in ys.axis_iter_mut(Axis(0)).zip(bias.iter()) {
                row += b;
            }
            y.index_axis_mut(Axis(0), s).assign(&ys);
        }
        if train {
            self.cache_input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let x = self.cache_input.take().expect("forward(train) before backward");
        let (batch, _, in_len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out_len = dy.shape()[2];
        let k = self.kernel;
        let w2 = self.w.value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let w2 = w2.into_shape((self.out_channels, self.in_channels * k)).unwrap().to_owned();
        let mut dw2 = Array2::<f64>::zeros((self.out_channels, self.in_channels * k));
        let mut db = Array1::<f64>::zeros(self.out_channels);
        let mut dx = Array3::zeros((batch, self.in_channels, in_len));
        for s in 0..batch {
            let cols = self.im2col(&x, s, out_len);
            let dys = dy.index_axis(Axis(0), s);
            dw2 = dw2 + dys.dot(&cols.t());
            db = db + dys.sum_axis(Axis(1));
            let dcols = w2.t().dot(&dys);
            for c in 0..self.in_channels {
                for kk in 0..k {
                    for j in 0..out_len {
                        let pos = (j * self.stride + kk) as isize - self.pad as isize;
                        if pos >= 0 && (pos as usize) < in_len {
                            dx[[s, c, pos as usize]] += dcols[[c * k + kk, j]];
                        }
                    }
                }
            }
        }
        let dw = dw2.into_shape((self.out_channels, self.in_channels, k)).unwrap();
        self.w.grad += &dw.into_dyn();
        self.b.grad += &db.into_dyn();
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}

/// Batch normalization over (batch, channel, length) with per-channel
/// statistics. When `frozen` the running statistics are used even in
/// training mode and never updated, so a frozen block neither learns nor
/// adapts through its statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub frozen: bool,
    pub name: String,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Array3<f64>,
    std_inv: Array1<f64>,
    used_batch_stats: bool,
}

impl BatchNorm1d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm1d {
            gamma: Param::new(format!("{name}.gamma"), ArrayD::ones(vec![channels])),
            beta: Param::new(format!("{name}.beta"), ArrayD::zeros(vec![channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            frozen: false,
            name: name.into(),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let n = (batch * len) as f64;
        let use_batch_stats = train && !self.frozen;
        let (mean, var) = if use_batch_stats {
            let mut mean = Array1::zeros(channels);
            let mut var = Array1::zeros(channels);
            for c in 0..channels {
                let slice = x.index_axis(Axis(1), c);
                let m = slice.sum() / n;
                mean[c] = m;
                var[c] = slice.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            }
            for c in 0..channels {
                self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c];
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let std_inv = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut x_hat = x.clone();
        for c in 0..channels {
            let mut slice = x_hat.index_axis_mut(Axis(1), c);
            slice.mapv_inplace(|v| (v - mean[c]) * std_inv[c]);
        }
        let mut y = x_hat.clone();
        for c in 0..channels {
            let mut slice = y.index_axis_mut(Axis(1), c);
            slice.mapv_inplace(|v| v * gamma[c] + beta[c]);
        }
        if train {
            self.cache = Some(BnCache { x_hat, std_inv, used_batch_stats: use_batch_stats });
        }
        y
    }

    pub fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let cache = self.cache.take().expect("forward(train) before backward");
        let (batch, channels, len) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
        let n = (batch * len) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut dgamma = Array1::zeros(channels);
        let mut dbeta = Array1::zeros(channels);
        for c in 0..channels {
            let dyc = dy.index_axis(Axis(1), c);
            let xc = cache.x_hat.index_axis(Axis(1), c);
            dgamma[c] = dyc.iter().zip(xc.iter()).map(|(d, x)| d * x).sum();
            dbeta[c] = dyc.sum();
        }
        let mut dx = Array3::zeros(dy.raw_dim());
        if cache.used_batch_stats {
            for c in 0..channels {
                let dyc = dy.index_axis(Axis(1), c);
                let xc = cache.x_hat.index_axis(Axis(1), c);
                let sum_dy = dbeta[c];
                let sum_dy_xhat = dgamma[c];
                let coeff = gamma[c] * cache.std_inv[c];
                let mut dxc = dx.index_axis_mut(Axis(1), c);
                for ((d, x), out) in dyc.iter().zip(xc.iter()).zip(dxc.iter_mut()) {
                    *out = coeff * (d - sum_dy / n - x * sum_dy_xhat / n);
                }
            }
        } else {
            for c in 0..channels {
                let coeff = gamma[c] * cache.std_inv[c];
                let dyc = dy.index_axis(Axis(1), c);
                let mut dxc = dx.index_axis_mut(Axis(1), c);
                for (d, out) in dyc.iter().zip(dxc.iter_mut()) {
                    *out = coeff * d;
                }
            }
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
}

/// Elementwise ReLU with a cached activation mask.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Array3<f64>>,
}

impl Relu {
    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let y = x.mapv(|v| v.max(0.0));
        if train {
            self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let mask = self.mask.take().expect("forward(train) before backward");
        dy * &mask
    }
}

/// Non-overlapping max pooling along the length axis.
#[derive(Debug, Clone)]
pub struct MaxPool1d {
    pub size: usize,
    argmax: Option<Vec<usize>>,
    in_shape: Option<(usize, usize, usize)>,
}

impl MaxPool1d {
    pub fn new(size: usize) -> Self {
        MaxPool1d { size, argmax: None, in_shape: None }
    }

    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let out_len = len / self.size;
        let mut y = Array3::zeros((batch, channels, out_len));
        let mut argmax = vec![0usize; batch * channels * out_len];
        for s in 0..batch {
            for c in 0..channels {
                for j in 0..out_len {
                    let base = j * self.size;
                    let mut best = x[[s, c, base]];
                    let mut best_i = base;
                    for i in base + 1..base + self.size {
                        if x[[s, c, i]] > best {
                            best = x[[s, c, i]];
                            best_i = i;
                        }
                    }
                    y[[s, c, j]] = best;
                    argmax[(s * channels + c) * out_len + j] = best_i;
                }
            }
        }
        if train {
            self.argmax = Some(argmax);
            self.in_shape = Some((batch, channels, len));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array3<f64>) -> Array3<f64> {
        let argmax = self.argmax.take().expect("forward(train) before backward");
        let (batch, channels, len) = self.in_shape.take().unwrap();
        let out_len = dy.shape()[2];
        let mut dx = Array3::zeros((batch, channels, len));
        for s in 0..batch {
            for c in 0..channels {
                for j in 0..out_len {
                    dx[[s, c, argmax[(s * channels + c) * out_len + j]]] += dy[[s, c, j]];
                }
            }
        }
        dx
    }
}

/// Fully connected layer over (batch, features).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param, // [out, in]
    pub b: Param, // [out]
    cache_input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), init_uniform(rng, &[out_dim, in_dim], in_dim)),
            b: Param::new(format!("{name}.b"), init_uniform(rng, &[out_dim], in_dim)),
            cache_input: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Array2<f64> {
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        if train {
            self.cache_input = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache_input.take().expect("forward(train) before backward");
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let dx = dy.dot(&w);
        self.w.grad += &dy.t().dot(&x).into_dyn();
        self.b.grad += &dy.sum_axis(Axis(0)).into_dyn();
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numeric-gradient helper used by layer tests: central finite differences
/// of a scalar loss as a function of one perturbed entry.
#[cfg(test)]
pub fn finite_diff(orig: f64, mut loss_at: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (loss_at(orig + h) - loss_at(orig - h)) / (2.0 * h)
}
