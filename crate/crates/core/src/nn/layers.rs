//! Layers with cached forward passes and explicit backward passes.
//!
//! Every `forward` stores what its `backward` needs; `backward` consumes the upstream gradient,
//! accumulates parameter gradients and returns the gradient with respect to the input. Calling
//! `backward` without a preceding `forward` is a usage error.

use rand::Rng;
use rand_distr::StandardNormal;
use super::tensor::{gemm, join, HasParams, Param, Scalar, Tensor};
use super::NnError;

/// Whether batch normalization uses batch statistics (and updates its running averages) or the
/// frozen running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn missing_cache(op: &'static str) -> NnError {
    NnError::Usage(format!("{op}: backward called without a cached forward pass"))
}

fn check_grad_shape<T: Scalar>(
    op: &'static str,
    grad: &Tensor<T>,
    want: &[usize],
) -> Result<(), NnError> {
    if grad.shape() != want {
        return Err(NnError::Shape(format!(
            "{op}: upstream gradient {:?} does not match output {:?}",
            grad.shape(),
            want
        )));
    }
    Ok(())
}

/// 2-D convolution over NHWC tensors with "same" padding.
///
/// Weights are stored `[k, k, c_in, c_out]`, which is also the row layout of the im2col matrix.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    kernel: usize,
    stride: usize,
    c_in: usize,
    c_out: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    in_dims: [usize; 4],
    out_hw: (usize, usize),
    cols: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-initialised convolution. `kernel` is 1 or 3, `stride` 1 or 2.
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let fan_in = (kernel * kernel * c_in) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w: Vec<T> = (0..kernel * kernel * c_in * c_out)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self {
            weight: Param::new(Tensor::from_vec(&[kernel, kernel, c_in, c_out], w).unwrap()),
            bias: Param::new(Tensor::zeros(&[c_out])),
            kernel,
            stride,
            c_in,
            c_out,
            cache: None,
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    fn out_size(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn im2col(&self, x: &Tensor<T>, [n, h, w, c]: [usize; 4], ho: usize, wo: usize) -> Vec<T> {
        if self.kernel == 1 && self.stride == 1 {
            return x.data().to_vec();
        }
        let k = self.kernel;
        let row_len = k * k * c;
        let pad = self.pad() as isize;
        let mut cols = vec![T::zero(); n * ho * wo * row_len];
        let src = x.data();
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s = ((b * h + iy as usize) * w + ix as usize) * c;
                            let d = row + (ky * k + kx) * c;
                            cols[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[T], [n, h, w, c]: [usize; 4], ho: usize, wo: usize) -> Vec<T> {
        if self.kernel == 1 && self.stride == 1 {
            return dcols.to_vec();
        }
        let k = self.kernel;
        let row_len = k * k * c;
        let pad = self.pad() as isize;
        let mut dx = vec![T::zero(); n * h * w * c];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = ((b * h + iy as usize) * w + ix as usize) * c;
                            let s = row + (ky * k + kx) * c;
                            for (o, &g) in dx[d..d + c].iter_mut().zip(&dcols[s..s + c]) {
                                *o += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let dims = x.dims4()?;
        let [n, h, w, c] = dims;
        if c != self.c_in {
            return Err(NnError::Shape(format!(
                "conv2d expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let cols = self.im2col(x, dims, ho, wo);
        let rows = n * ho * wo;
        let row_len = self.kernel * self.kernel * c;
        let mut out = Vec::with_capacity(rows * self.c_out);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            false,
            false,
            rows,
            row_len,
            self.c_out,
            &cols,
            self.weight.value.data(),
            T::one(),
            &mut out,
        );
        let out = Tensor::from_vec(&[n, ho, wo, self.c_out], out)?;
        out.check_finite("conv2d")?;
        self.cache = Some(ConvCache {
            in_dims: dims,
            out_hw: (ho, wo),
            cols,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("conv2d"))?;
        let [n, _, _, c] = cache.in_dims;
        let (ho, wo) = cache.out_hw;
        check_grad_shape("conv2d", dy, &[n, ho, wo, self.c_out])?;
        let rows = n * ho * wo;
        let row_len = self.kernel * self.kernel * c;
        let g = dy.data();
        gemm(
            true,
            false,
            row_len,
            rows,
            self.c_out,
            &cache.cols,
            g,
            T::one(),
            self.weight.grad.data_mut(),
        );
        let db = self.bias.grad.data_mut();
        for r in g.chunks_exact(self.c_out) {
            for (b, &v) in db.iter_mut().zip(r) {
                *b += v;
            }
        }
        let mut dcols = cache.cols;
        gemm(
            false,
            true,
            rows,
            self.c_out,
            row_len,
            g,
            self.weight.value.data(),
            T::zero(),
            &mut dcols,
        );
        let dx = self.col2im(&dcols, cache.in_dims, ho, wo);
        Tensor::from_vec(&cache.in_dims, dx)
    }
}

impl<T: Scalar> HasParams<T> for Conv2d<T> {
    fn named_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Batch normalization over the last (channel) axis.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    shape: Vec<usize>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::from_vec(&[channels], vec![T::one(); channels]).unwrap()),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![T::one(); channels]).unwrap(),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let c = self.channels();
        if x.shape().last() != Some(&c) {
            return Err(NnError::Shape(format!(
                "batchnorm expects {c} channels, got shape {:?}",
                x.shape()
            )));
        }
        let rows = x.len() / c;
        let data = x.data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(NnError::Shape(
                        "batchnorm in train mode needs at least two values per channel".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                for r in data.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(r) {
                        *m += v.f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for r in data.chunks_exact(c) {
                    for ((s, &v), m) in var.iter_mut().zip(r).zip(&mean) {
                        let d = v.f64() - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                let unbias = rows as f64 / (rows as f64 - 1.0);
                let mom = self.momentum;
                for i in 0..c {
                    let rm = &mut self.running_mean.data_mut()[i];
                    *rm = T::of((1.0 - mom) * rm.f64() + mom * mean[i]);
                    let rv = &mut self.running_var.data_mut()[i];
                    *rv = T::of((1.0 - mom) * rv.f64() + mom * var[i] * unbias);
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().iter().map(|v| v.f64()).collect(),
                self.running_var.data().iter().map(|v| v.f64()).collect(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + self.eps).sqrt())).collect();
        let mean: Vec<T> = mean.into_iter().map(T::of).collect();
        let mut x_hat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        for r in data.chunks_exact(c) {
            for i in 0..c {
                let xh = (r[i] - mean[i]) * inv_std[i];
                x_hat.push(xh);
                out.push(g[i] * xh + b[i]);
            }
        }
        let out = Tensor::from_vec(x.shape(), out)?;
        out.check_finite("batchnorm")?;
        self.cache = Some(BnCache {
            shape: x.shape().to_vec(),
            x_hat,
            inv_std,
            mode,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        check_grad_shape("batchnorm", dy, &cache.shape)?;
        let c = self.channels();
        let rows = dy.len() / c;
        let g = dy.data();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for (gr, xr) in g.chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
            for i in 0..c {
                sum_dy[i] += gr[i];
                sum_dy_xh[i] += gr[i] * xr[i];
            }
        }
        for i in 0..c {
            self.gamma.grad.data_mut()[i] += sum_dy_xh[i];
            self.beta.grad.data_mut()[i] += sum_dy[i];
        }
        let gamma = self.gamma.value.data();
        let mut dx = Vec::with_capacity(dy.len());
        match cache.mode {
            Mode::Train => {
                let m = T::of(rows as f64);
                for (gr, xr) in g.chunks_exact(c).zip(cache.x_hat.chunks_exact(c)) {
                    for i in 0..c {
                        let v = gamma[i] * cache.inv_std[i] / m
                            * (m * gr[i] - sum_dy[i] - xr[i] * sum_dy_xh[i]);
                        dx.push(v);
                    }
                }
            }
            Mode::Eval => {
                for gr in g.chunks_exact(c) {
                    for i in 0..c {
                        dx.push(gr[i] * gamma[i] * cache.inv_std[i]);
                    }
                }
            }
        }
        Tensor::from_vec(&cache.shape, dx)
    }
}

impl<T: Scalar> HasParams<T> for BatchNorm<T> {
    fn named_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }

    fn named_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

/// Rectifier. The subgradient at exactly 0 is taken as 0.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let active: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        out.check_finite("relu")?;
        self.active = Some((x.shape().to_vec(), active));
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (shape, active) = self.active.take().ok_or_else(|| missing_cache("relu"))?;
        check_grad_shape("relu", dy, &shape)?;
        let dx = dy
            .data()
            .iter()
            .zip(&active)
            .map(|(&g, &a)| if a { g } else { T::zero() })
            .collect();
        Tensor::from_vec(&shape, dx)
    }
}

#[derive(Debug, Clone)]
pub struct Tanh<T> {
    out: Option<Tensor<T>>,
}

impl<T: Scalar> Default for Tanh<T> {
    fn default() -> Self {
        Self { out: None }
    }
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let out = x.map(|v| v.tanh());
        out.check_finite("tanh")?;
        self.out = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let out = self.out.take().ok_or_else(|| missing_cache("tanh"))?;
        check_grad_shape("tanh", dy, out.shape())?;
        let dx = dy
            .data()
            .iter()
            .zip(out.data())
            .map(|(&g, &y)| g * (T::one() - y * y))
            .collect();
        Tensor::from_vec(out.shape(), dx)
    }
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let dims = x.dims4()?;
        let [n, h, w, c] = dims;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(NnError::Shape(format!(
                "maxpool2 needs at least 2x2 spatial input, got {h}x{w}"
            )));
        }
        let src = x.data();
        let mut out = Vec::with_capacity(n * ho * wo * c);
        let mut argmax = Vec::with_capacity(n * ho * wo * c);
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if src[idx] > src[best_idx] {
                                best_idx = idx;
                            }
                        }
                        out.push(src[best_idx]);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, ho, wo, c], out)?;
        out.check_finite("maxpool2")?;
        self.cache = Some((dims, argmax));
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (dims, argmax) = self.cache.take().ok_or_else(|| missing_cache("maxpool2"))?;
        if dy.len() != argmax.len() {
            return Err(NnError::Shape(
                "maxpool2: upstream gradient size does not match output".into(),
            ));
        }
        let mut dx = vec![T::zero(); dims.iter().product()];
        for (&g, &i) in dy.data().iter().zip(&argmax) {
            dx[i] += g;
        }
        Tensor::from_vec(&dims, dx)
    }
}

/// Fully connected layer on `[batch, features]` (any trailing shape is flattened).
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Vec<usize>, Vec<T>)>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std))
            .collect();
        Self {
            weight: Param::new(Tensor::from_vec(&[inputs, outputs], w).unwrap()),
            bias: Param::new(Tensor::zeros(&[outputs])),
            cache: None,
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.value.shape()[0], self.weight.value.shape()[1])
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (fin, fout) = self.dims();
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 || x.len() != n * fin {
            return Err(NnError::Shape(format!(
                "dense expects [batch, {fin}], got {:?}",
                x.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * fout);
        for _ in 0..n {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            false,
            false,
            n,
            fin,
            fout,
            x.data(),
            self.weight.value.data(),
            T::one(),
            &mut out,
        );
        let out = Tensor::from_vec(&[n, fout], out)?;
        out.check_finite("dense")?;
        self.cache = Some((x.shape().to_vec(), x.data().to_vec()));
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let (shape, x) = self.cache.take().ok_or_else(|| missing_cache("dense"))?;
        let (fin, fout) = self.dims();
        let n = shape[0];
        check_grad_shape("dense", dy, &[n, fout])?;
        gemm(
            true,
            false,
            fin,
            n,
            fout,
            &x,
            dy.data(),
            T::one(),
            self.weight.grad.data_mut(),
        );
        for r in dy.data().chunks_exact(fout) {
            for (b, &v) in self.bias.grad.data_mut().iter_mut().zip(r) {
                *b += v;
            }
        }
        let mut dx = vec![T::zero(); n * fin];
        gemm(
            false,
            true,
            n,
            fout,
            fin,
            dy.data(),
            self.weight.value.data(),
            T::zero(),
            &mut dx,
        );
        Tensor::from_vec(&shape, dx)
    }
}

impl<T: Scalar> HasParams<T> for Dense<T> {
    fn named_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Concatenates NHWC tensors with equal `n, h, w` along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>, NnError> {
    let first = parts
        .first()
        .ok_or_else(|| NnError::Shape("concat of zero tensors".into()))?
        .dims4()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let d = p.dims4()?;
        if d[..3] != first[..3] {
            return Err(NnError::Shape(format!(
                "concat_channels: {:?} vs {:?}",
                &d[..3],
                &first[..3]
            )));
        }
        widths.push(d[3]);
    }
    let total: usize = widths.iter().sum();
    let pixels = first[0] * first[1] * first[2];
    let mut out = Vec::with_capacity(pixels * total);
    for px in 0..pixels {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::from_vec(&[first[0], first[1], first[2], total], out)
}

/// Inverse of [`concat_channels`]: splits the channel axis into the given widths.
pub fn split_channels<T: Scalar>(
    x: &Tensor<T>,
    widths: &[usize],
) -> Result<Vec<Tensor<T>>, NnError> {
    let [n, h, w, c] = x.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(NnError::Shape(format!(
            "split_channels: widths {widths:?} do not sum to {c}"
        )));
    }
    let mut outs: Vec<Vec<T>> = widths
        .iter()
        .map(|&wd| Vec::with_capacity(n * h * w * wd))
        .collect();
    for px in x.data().chunks_exact(c) {
        let mut off = 0;
        for (o, &wd) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&px[off..off + wd]);
            off += wd;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &wd)| Tensor::from_vec(&[n, h, w, wd], d))
        .collect()
}
