use rand::Rng;

use super::map::FeatureMap;
use crate::error::{ensure, Result};

/// Glorot-uniform draw in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, count: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..count).map(|_| rng.random_range(-a..=a)).collect()
}

/// Temporal convolution with zero "same" padding of `(kernel_size - 1) / 2` on each side.
///
/// Weights are stored `[out][tap][in]` so both the forward dot product and the
/// backward scatter walk contiguous memory. Use [`Conv1d::weight_at`] for the
/// logical `(out, in, tap)` view; checkpoints are written in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel_size: usize, stride: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel_size,
            stride,
            weight: vec![0.0; out_channels * in_channels * kernel_size],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn xavier<R: Rng + ?Sized>(
        rng: &mut R,
        out_channels: usize,
        in_channels: usize,
        kernel_size: usize,
        stride: usize,
    ) -> Self {
        let mut layer = Self::zeros(out_channels, in_channels, kernel_size, stride);
        layer.weight = xavier_uniform(
            rng,
            layer.weight.len(),
            in_channels * kernel_size,
            out_channels * kernel_size,
        );
        layer
    }

    /// Build from a logical `(out, in, tap)` kernel array.
    pub fn from_kernels(kernels: &[Vec<Vec<f64>>], bias: Vec<f64>, stride: usize) -> Result<Self> {
        let out_channels = kernels.len();
        ensure!(out_channels >= 1, Shape, "conv needs at least one output channel");
        let in_channels = kernels[0].len();
        ensure!(in_channels >= 1, Shape, "conv needs at least one input channel");
        let kernel_size = kernels[0][0].len();
        ensure!(kernel_size >= 1 && stride >= 1, Shape, "kernel size and stride must be positive");
        ensure!(bias.len() == out_channels, Shape, "bias length {} != {out_channels}", bias.len());
        let mut layer = Self::zeros(out_channels, in_channels, kernel_size, stride);
        for (o, per_in) in kernels.iter().enumerate() {
            ensure!(per_in.len() == in_channels, Shape, "ragged conv kernels");
            for (i, taps) in per_in.iter().enumerate() {
                ensure!(taps.len() == kernel_size, Shape, "tap count != kernel size");
                for (j, &w) in taps.iter().enumerate() {
                    *layer.weight_at_mut(o, i, j) = w;
                }
            }
        }
        layer.bias = bias;
        Ok(layer)
    }

    #[inline]
    fn offset(&self, o: usize, i: usize, j: usize) -> usize {
        (o * self.kernel_size + j) * self.in_channels + i
    }

    #[inline]
    pub fn weight_at(&self, o: usize, i: usize, j: usize) -> f64 {
        self.weight[self.offset(o, i, j)]
    }

    #[inline]
    pub fn weight_at_mut(&mut self, o: usize, i: usize, j: usize) -> &mut f64 {
        let idx = self.offset(o, i, j);
        &mut self.weight[idx]
    }

    /// Kernel values flattened in logical `(out, in, tap)` order.
    pub fn kernels_logical(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.weight.len());
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for j in 0..self.kernel_size {
                    out.push(self.weight_at(o, i, j));
                }
            }
        }
        out
    }

    pub fn set_kernels_logical(&mut self, values: &[f64]) -> Result<()> {
        ensure!(values.len() == self.weight.len(), Shape, "kernel value count mismatch");
        let mut it = values.iter();
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                for j in 0..self.kernel_size {
                    *self.weight_at_mut(o, i, j) = *it.next().unwrap();
                }
            }
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let padded = input_len + 2 * self.padding();
        (padded >= self.kernel_size).then(|| (padded - self.kernel_size) / self.stride + 1)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        ensure!(
            x.channels() == self.in_channels,
            Shape,
            "conv expects {} input channels, got {}",
            self.in_channels,
            x.channels()
        );
        let out_len = self
            .output_len(x.len())
            .ok_or_else(|| crate::Error::Shape(format!("input of length {} too short for kernel {}", x.len(), self.kernel_size)))?;
        let pad = self.padding() as isize;
        let mut out = FeatureMap::zeros(out_len, self.out_channels);
        for t in 0..out_len {
            let base = (t * self.stride) as isize - pad;
            let row = out.row_mut(t);
            row.copy_from_slice(&self.bias);
            for j in 0..self.kernel_size {
                let src = base + j as isize;
                if src < 0 || src >= x.len() as isize {
                    continue;
                }
                let input = x.row(src as usize);
                for (o, acc) in row.iter_mut().enumerate() {
                    let w = &self.weight[self.offset(o, 0, j)..self.offset(o, 0, j) + self.in_channels];
                    *acc += dot(w, input);
                }
            }
        }
        Ok(out)
    }

    /// Accumulate parameter gradients into `grads` and return the input gradient.
    pub fn backward(&self, x: &FeatureMap, grad_out: &FeatureMap, grads: &mut Conv1d) -> Result<FeatureMap> {
        ensure!(
            Some(grad_out.len()) == self.output_len(x.len()) && grad_out.channels() == self.out_channels,
            Shape,
            "conv backward: upstream gradient shape does not match the forward record"
        );
        ensure!(grads.weight.len() == self.weight.len(), Shape, "conv backward: gradient buffer mismatch");
        let pad = self.padding() as isize;
        let mut grad_in = FeatureMap::zeros(x.len(), self.in_channels);
        for t in 0..grad_out.len() {
            let g_row = grad_out.row(t);
            for (b, g) in grads.bias.iter_mut().zip(g_row) {
                *b += g;
            }
            let base = (t * self.stride) as isize - pad;
            for j in 0..self.kernel_size {
                let src = base + j as isize;
                if src < 0 || src >= x.len() as isize {
                    continue;
                }
                let src = src as usize;
                let input = x.row(src);
                for (o, &g) in g_row.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let off = self.offset(o, 0, j);
                    axpy(g, input, &mut grads.weight[off..off + self.in_channels]);
                    axpy(g, &self.weight[off..off + self.in_channels], grad_in.row_mut(src));
                }
            }
        }
        Ok(grad_in)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu(x: &mut FeatureMap) {
    x.map_inplace(|v| v.max(0.0));
}

/// Zero the gradient wherever the ReLU output was not positive.
pub fn relu_backward(output: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &y) in grad.as_mut_slice().iter_mut().zip(output.as_slice()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn maxpool1d(x: &FeatureMap, window: usize, stride: usize) -> Result<FeatureMap> {
    ensure!(window >= 1 && stride >= 1, Shape, "pool window and stride must be positive");
    ensure!(x.len() >= window, Shape, "sequence of length {} shorter than pool window {window}", x.len());
    let out_len = (x.len() - window) / stride + 1;
    let mut out = FeatureMap::zeros(out_len, x.channels());
    for t in 0..out_len {
        let row = out.row_mut(t);
        row.copy_from_slice(x.row(t * stride));
        for s in t * stride + 1..t * stride + window {
            for (m, &v) in row.iter_mut().zip(x.row(s)) {
                if v > *m {
                    *m = v;
                }
            }
        }
    }
    Ok(out)
}

/// Route each pooled gradient to the first maximal input in its window.
pub fn maxpool1d_backward(x: &FeatureMap, window: usize, stride: usize, grad_out: &FeatureMap) -> Result<FeatureMap> {
    ensure!(x.len() >= window, Shape, "sequence shorter than pool window");
    let out_len = (x.len() - window) / stride + 1;
    ensure!(
        grad_out.len() == out_len && grad_out.channels() == x.channels(),
        Shape,
        "maxpool backward: gradient shape mismatch"
    );
    let mut grad_in = FeatureMap::zeros(x.len(), x.channels());
    for t in 0..out_len {
        for k in 0..x.channels() {
            let mut best = t * stride;
            for s in t * stride + 1..t * stride + window {
                if x.get(s, k) > x.get(best, k) {
                    best = s;
                }
            }
            let g = grad_in.get(best, k) + grad_out.get(t, k);
            grad_in.set(best, k, g);
        }
    }
    Ok(grad_in)
}

pub fn global_avg_pool(z: &FeatureMap) -> Vec<f64> {
    let mut out = vec![0.0; z.channels()];
    for row in z.rows() {
        for (acc, v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let n = z.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub fn global_avg_pool_backward(len: usize, grad: &[f64]) -> FeatureMap {
    let mut out = FeatureMap::zeros(len, grad.len());
    let n = len as f64;
    for t in 0..len {
        for (o, g) in out.row_mut(t).iter_mut().zip(grad) {
            *o = g / n;
        }
    }
    out
}

/// Fully connected classification layer; `weight` is `K x C`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// When false the bias is held at its current value (zero by default).
    pub train_bias: bool,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            train_bias: false,
        }
    }

    pub fn xavier<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        layer.weight = xavier_uniform(rng, inputs * outputs, inputs, outputs);
        layer
    }

    #[inline]
    pub fn weight_at(&self, k: usize, c: usize) -> f64 {
        self.weight[k * self.outputs + c]
    }

    /// Class weight vector `w^c`.
    pub fn class_weights(&self, c: usize) -> Vec<f64> {
        (0..self.inputs).map(|k| self.weight_at(k, c)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure!(x.len() == self.inputs, Shape, "dense expects {} inputs, got {}", self.inputs, x.len());
        let mut out = self.bias.clone();
        for (k, &xk) in x.iter().enumerate() {
            if xk == 0.0 {
                continue;
            }
            axpy(xk, &self.weight[k * self.outputs..(k + 1) * self.outputs], &mut out);
        }
        Ok(out)
    }

    /// Row-wise application to a feature map: `out[t] = x[t] . W + b`.
    pub fn forward_map(&self, x: &FeatureMap) -> Result<FeatureMap> {
        ensure!(x.channels() == self.inputs, Shape, "dense expects {} channels, got {}", self.inputs, x.channels());
        let mut out = FeatureMap::zeros(x.len(), self.outputs);
        for t in 0..x.len() {
            out.row_mut(t).copy_from_slice(&self.forward(x.row(t))?);
        }
        Ok(out)
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Dense) -> Result<Vec<f64>> {
        ensure!(
            x.len() == self.inputs && grad_out.len() == self.outputs,
            Shape,
            "dense backward: shape mismatch"
        );
        if self.train_bias {
            for (b, g) in grads.bias.iter_mut().zip(grad_out) {
                *b += g;
            }
        }
        let mut grad_in = vec![0.0; self.inputs];
        for (k, &xk) in x.iter().enumerate() {
            let w_row = &self.weight[k * self.outputs..(k + 1) * self.outputs];
            grad_in[k] = dot(w_row, grad_out);
            axpy(xk, grad_out, &mut grads.weight[k * self.outputs..(k + 1) * self.outputs]);
        }
        Ok(grad_in)
    }

    pub fn backward_map(&self, x: &FeatureMap, grad_out: &FeatureMap, grads: &mut Dense) -> Result<FeatureMap> {
        ensure!(grad_out.len() == x.len(), Shape, "dense backward: length mismatch");
        let mut grad_in = FeatureMap::zeros(x.len(), self.inputs);
        for t in 0..x.len() {
            let g = self.backward(x.row(t), grad_out.row(t), grads)?;
            grad_in.row_mut(t).copy_from_slice(&g);
        }
        Ok(grad_in)
    }
}
