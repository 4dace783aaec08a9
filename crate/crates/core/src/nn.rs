//! A small convolutional regression network with inverted dropout,
//! hand-written reverse-mode gradients and an Adam training loop.
//!
//! Tensors are single examples in channel-major `[C][H][W]` layout. All
//! convolutions use odd kernels with "same" zero padding, so the spatial
//! size is preserved through the stack. Convolutions are lowered to a
//! matrix product over an im2col buffer.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        ensure!(data.len() == shape.len(), ShapeMismatch, "{} values for shape {shape}", data.len());
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        check_shape(self.shape, other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.data.len() as f64)
    }
}

fn check_shape(got: Shape, expected: Shape) -> Result<()> {
    ensure!(got == expected, ShapeMismatch, "tensor shape {got}, expected {expected}");
    Ok(())
}

/// One entry of an architecture description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv { kernel_h: usize, kernel_w: usize, out_channels: usize },
    Relu,
    Dropout { rate: f64 },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { kernel_h, kernel_w, out_channels } => write!(f, "conv{kernel_h}x{kernel_w}:{out_channels}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Dropout { rate } => write!(f, "dropout:{rate}"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidParameter(format!("bad layer `{s}` (expected convKHxKW:OUT, relu or dropout:RATE)"));
        if s == "relu" {
            return Ok(LayerSpec::Relu);
        }
        if let Some(rate) = s.strip_prefix("dropout:") {
            return Ok(LayerSpec::Dropout { rate: rate.parse().map_err(|_| bad())? });
        }
        let rest = s.strip_prefix("conv").ok_or_else(bad)?;
        let (kernel, out) = rest.split_once(':').ok_or_else(bad)?;
        let (kh, kw) = kernel.split_once('x').ok_or_else(bad)?;
        Ok(LayerSpec::Conv {
            kernel_h: kh.parse().map_err(|_| bad())?,
            kernel_w: kw.parse().map_err(|_| bad())?,
            out_channels: out.parse().map_err(|_| bad())?,
        })
    }
}

/// Ordered layer list, written as comma-separated [`LayerSpec`]s, e.g.
/// `conv5x5:16,relu,dropout:0.1,conv5x5:2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture(pub Vec<LayerSpec>);

impl Architecture {
    /// Default estimator: three 5x5 convolutions with dropout after each
    /// hidden activation. Sized to train in minutes on one CPU core.
    pub fn compact() -> Self {
        "conv5x5:8,relu,dropout:0.1,conv5x5:8,relu,dropout:0.1,conv5x5:2".parse().expect("valid preset")
    }

    /// Four-layer 64/64/32-channel stack with 9x9 then 5x5 kernels.
    pub fn wide() -> Self {
        "conv9x9:64,relu,dropout:0.1,conv5x5:64,relu,dropout:0.1,conv5x5:32,relu,dropout:0.1,conv5x5:2"
            .parse()
            .expect("valid preset")
    }

    /// Accepts a preset name (`compact`, `wide`) or a layer list.
    pub fn resolve(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(Self::compact()),
            "wide" => Ok(Self::wide()),
            other => other.parse(),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, layer) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{layer}")?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',').map(str::parse).collect::<Result<Vec<_>>>().map(Architecture)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    /// `[out][in][kh][kw]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Output rows per im2col tile, sized so a tile's columns stay in cache.
    fn tile_rows(&self, width: usize) -> usize {
        const TILE_VALUES: usize = 1 << 16;
        (TILE_VALUES / (self.patch_len() * width)).max(1)
    }

    /// Lays the receptive fields of output rows `y0..y1` out as columns:
    /// `col[(c, dy, dx)][(y - y0, x)]`.
    fn im2col_rows(&self, input: &[f64], shape: Shape, y0: usize, y1: usize, col: &mut Vec<f64>) {
        let (h, w) = (shape.height, shape.width);
        let (ph, pw) = (self.kernel_h / 2, self.kernel_w / 2);
        let plane = h * w;
        let n = (y1 - y0) * w;
        col.clear();
        col.resize(self.patch_len() * n, 0.0);
        let mut row = 0;
        for c in 0..self.in_channels {
            let src = &input[c * plane..(c + 1) * plane];
            for dy in 0..self.kernel_h {
                for dx in 0..self.kernel_w {
                    let dst = &mut col[row * n..(row + 1) * n];
                    let x_lo = pw.saturating_sub(dx);
                    let x_hi = (w + pw).saturating_sub(dx).min(w);
                    if x_hi <= x_lo {
                        row += 1;
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = y as isize + dy as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (s0, d0) = (sy as usize * w + x_lo + dx - pw, (y - y0) * w + x_lo);
                        let len = x_hi - x_lo;
                        dst[d0..d0 + len].copy_from_slice(&src[s0..s0 + len]);
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds the columns of output rows `y0..y1` onto an
    /// input-shaped gradient.
    fn col2im_rows(&self, col: &[f64], shape: Shape, y0: usize, y1: usize, out: &mut [f64]) {
        let (h, w) = (shape.height, shape.width);
        let (ph, pw) = (self.kernel_h / 2, self.kernel_w / 2);
        let plane = h * w;
        let n = (y1 - y0) * w;
        let mut row = 0;
        for c in 0..self.in_channels {
            let dst = &mut out[c * plane..(c + 1) * plane];
            for dy in 0..self.kernel_h {
                for dx in 0..self.kernel_w {
                    let src = &col[row * n..(row + 1) * n];
                    let x_lo = pw.saturating_sub(dx);
                    let x_hi = (w + pw).saturating_sub(dx).min(w);
                    if x_hi <= x_lo {
                        row += 1;
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = y as isize + dy as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let (s0, d0) = (sy as usize * w + x_lo + dx - pw, (y - y0) * w + x_lo);
                        let len = x_hi - x_lo;
                        for (o, i) in dst[s0..s0 + len].iter_mut().zip(&src[d0..d0 + len]) {
                            *o += i;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn forward(&self, input: &[f64], shape: Shape) -> Vec<f64> {
        let (h, w) = (shape.height, shape.width);
        let plane = h * w;
        let k = self.patch_len();
        let mut out = Vec::with_capacity(self.out_channels * plane);
        for &b in &self.bias {
            out.extend(std::iter::repeat_n(b, plane));
        }
        let mut col = Vec::new();
        let step = self.tile_rows(w);
        for y0 in (0..h).step_by(step) {
            let y1 = (y0 + step).min(h);
            let n = (y1 - y0) * w;
            self.im2col_rows(input, shape, y0, y1, &mut col);
            // out[co][p] += W[co][k] * col[k][p]
            unsafe {
                matrixmultiply::dgemm(
                    self.out_channels,
                    k,
                    n,
                    1.0,
                    self.weight.as_ptr(),
                    k as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    1.0,
                    out.as_mut_ptr().add(y0 * w),
                    plane as isize,
                    1,
                );
            }
        }
        out
    }

    /// Accumulates into `grad_w`/`grad_b` and, when `want_input`, returns
    /// the input gradient.
    fn backward(
        &self,
        input: &[f64],
        grad_out: &[f64],
        shape: Shape,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        want_input: bool,
    ) -> Vec<f64> {
        let (h, w) = (shape.height, shape.width);
        let plane = h * w;
        let k = self.patch_len();
        for (gb, g) in grad_b.iter_mut().zip(grad_out.chunks_exact(plane)) {
            *gb += g.iter().sum::<f64>();
        }
        let mut grad_in = if want_input { vec![0.0; self.in_channels * plane] } else { Vec::new() };
        let (mut col, mut grad_col) = (Vec::new(), Vec::new());
        let step = self.tile_rows(w);
        for y0 in (0..h).step_by(step) {
            let y1 = (y0 + step).min(h);
            let n = (y1 - y0) * w;
            self.im2col_rows(input, shape, y0, y1, &mut col);
            let g = unsafe { grad_out.as_ptr().add(y0 * w) };
            unsafe {
                // dW[co][k] += dOut[co][p] * col[k][p]
                matrixmultiply::dgemm(
                    self.out_channels,
                    n,
                    k,
                    1.0,
                    g,
                    plane as isize,
                    1,
                    col.as_ptr(),
                    1,
                    n as isize,
                    1.0,
                    grad_w.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            if want_input {
                grad_col.clear();
                grad_col.resize(k * n, 0.0);
                unsafe {
                    // dcol[k][p] = W[co][k] * dOut[co][p]
                    matrixmultiply::dgemm(
                        k,
                        self.out_channels,
                        n,
                        1.0,
                        self.weight.as_ptr(),
                        1,
                        k as isize,
                        g,
                        plane as isize,
                        1,
                        0.0,
                        grad_col.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                self.col2im_rows(&grad_col, shape, y0, y1, &mut grad_in);
            }
        }
        grad_in
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    Dropout { rate: f64 },
}

/// Whether dropout layers sample masks, and from which seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    Active { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNet {
    input_shape: Shape,
    layers: Vec<Layer>,
}

/// Per-layer state kept from a forward pass for the backward pass.
enum Saved {
    Conv { input: Vec<f64>, shape: Shape },
    Relu { output: Vec<f64> },
    Dropout { mask: Option<Vec<f64>> },
}

/// Gradients of the per-example MSE with respect to every parameter
/// (ordered as [`NeuralNet::params`]) and to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub params: Vec<Vec<f64>>,
    pub input: Tensor,
}

impl NeuralNet {
    /// Builds a network with He-normal weights and zero biases. The final
    /// convolution must produce `output_channels` channels.
    pub fn new(arch: &Architecture, input_shape: Shape, output_channels: usize, seed: u64) -> Result<Self> {
        ensure!(!input_shape.is_empty(), InvalidParameter, "empty input shape");
        let mut rng = seed::rng(seed::substream(seed, seed::Stream::Weights));
        let mut channels = input_shape.channels;
        let mut layers = Vec::with_capacity(arch.0.len());
        for spec in &arch.0 {
            layers.push(match *spec {
                LayerSpec::Conv { kernel_h, kernel_w, out_channels } => {
                    ensure!(
                        kernel_h % 2 == 1 && kernel_w % 2 == 1,
                        InvalidParameter,
                        "kernel {kernel_h}x{kernel_w} must be odd for same padding"
                    );
                    ensure!(out_channels > 0, InvalidParameter, "conv with zero output channels");
                    let fan_in = (channels * kernel_h * kernel_w) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    let weight = (0..out_channels * channels * kernel_h * kernel_w).map(|_| normal.sample(&mut rng)).collect();
                    let conv = Conv2d {
                        in_channels: channels,
                        out_channels,
                        kernel_h,
                        kernel_w,
                        weight,
                        bias: vec![0.0; out_channels],
                    };
                    channels = out_channels;
                    Layer::Conv2d(conv)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dropout { rate } => {
                    ensure!((0.0..1.0).contains(&rate), InvalidParameter, "dropout rate {rate} outside [0, 1)");
                    Layer::Dropout { rate }
                }
            });
        }
        ensure!(
            matches!(layers.last(), Some(Layer::Conv2d(_))),
            InvalidParameter,
            "architecture must end with a convolution"
        );
        ensure!(
            channels == output_channels,
            ShapeMismatch,
            "architecture produces {channels} channels, {output_channels} required"
        );
        Ok(Self { input_shape, layers })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        let channels = self
            .layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv2d(c) => Some(c.out_channels),
                _ => None,
            })
            .unwrap_or(self.input_shape.channels);
        Shape { channels, ..self.input_shape }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn architecture(&self) -> Architecture {
        Architecture(
            self.layers
                .iter()
                .map(|l| match l {
                    Layer::Conv2d(c) => {
                        LayerSpec::Conv { kernel_h: c.kernel_h, kernel_w: c.kernel_w, out_channels: c.out_channels }
                    }
                    Layer::Relu => LayerSpec::Relu,
                    Layer::Dropout { rate } => LayerSpec::Dropout { rate: *rate },
                })
                .collect(),
        )
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Dropout { rate } if *rate > 0.0))
    }

    /// Parameter tensors in declaration order: each convolution's weights,
    /// then its biases.
    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv2d(c) => vec![c.weight.as_slice(), c.bias.as_slice()],
                _ => vec![],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, input: &Tensor, dropout: DropoutMode) -> Result<Tensor> {
        self.run(input, dropout, false).map(|(out, _)| out)
    }

    fn run(&self, input: &Tensor, dropout: DropoutMode, keep: bool) -> Result<(Tensor, Vec<Saved>)> {
        check_shape(input.shape, self.input_shape)?;
        let mut shape = input.shape;
        let mut x = input.data.clone();
        let mut saved = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(conv) => {
                    let out = conv.forward(&x, shape);
                    let input = std::mem::replace(&mut x, out);
                    if keep {
                        saved.push(Saved::Conv { input, shape });
                    }
                    shape.channels = conv.out_channels;
                }
                Layer::Relu => {
                    x.iter_mut().for_each(|v| *v = v.max(0.0));
                    if keep {
                        saved.push(Saved::Relu { output: x.clone() });
                    }
                }
                Layer::Dropout { rate } => {
                    let mask = match dropout {
                        DropoutMode::Off => None,
                        DropoutMode::Active { seed } => Some(dropout_mask(x.len(), *rate, seed::derive(seed, i as u64))),
                    };
                    if let Some(mask) = &mask {
                        x.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                    }
                    if keep {
                        saved.push(Saved::Dropout { mask });
                    }
                }
            }
        }
        Ok((Tensor { shape, data: x }, saved))
    }

    /// Gradients of `mean((forward(input) - target)^2)`.
    pub fn backward(&self, input: &Tensor, target: &Tensor, dropout: DropoutMode) -> Result<Gradients> {
        self.backprop(input, target, dropout, true)
    }

    /// As [`backward`](Self::backward); the input gradient is left empty
    /// unless `want_input`.
    fn backprop(&self, input: &Tensor, target: &Tensor, dropout: DropoutMode, want_input: bool) -> Result<Gradients> {
        check_shape(target.shape, self.output_shape())?;
        let (output, saved) = self.run(input, dropout, true)?;
        let n = output.data.len() as f64;
        let loss = output.mse(target)?;
        let mut grad: Vec<f64> = output.data.iter().zip(&target.data).map(|(o, t)| 2.0 * (o - t) / n).collect();

        let mut param_grads: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut slot = param_grads.len();
        for (idx, (layer, state)) in self.layers.iter().zip(saved).enumerate().rev() {
            match (layer, state) {
                (Layer::Conv2d(conv), Saved::Conv { input, shape }) => {
                    slot -= 2;
                    let (gw, gb) = param_grads[slot..slot + 2].split_at_mut(1);
                    grad = conv.backward(&input, &grad, shape, &mut gw[0], &mut gb[0], want_input || idx > 0);
                }
                (Layer::Relu, Saved::Relu { output }) => {
                    grad.iter_mut().zip(&output).for_each(|(g, &o)| {
                        if o <= 0.0 {
                            *g = 0.0
                        }
                    });
                }
                (Layer::Dropout { .. }, Saved::Dropout { mask }) => {
                    if let Some(mask) = mask {
                        grad.iter_mut().zip(&mask).for_each(|(g, m)| *g *= m);
                    }
                }
                _ => unreachable!("saved state follows layer order"),
            }
        }
        let input = if grad.is_empty() { Tensor { shape: Shape::new(0, 0, 0), data: grad } } else { Tensor { shape: self.input_shape, data: grad } };
        Ok(Gradients { loss, params: param_grads, input })
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Inverted-dropout mask: each unit survives with probability `1 - rate`
/// and survivors are scaled by `1 / (1 - rate)`.
fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed::substream(seed, seed::Stream::Dropout));
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 }).collect()
}

/// Largest relative difference between the analytic gradients and central
/// finite differences with step `h`, over every parameter and input element.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn gradient_check(net: &NeuralNet, input: &Tensor, target: &Tensor, dropout: DropoutMode, h: f64) -> Result<f64> {
    let analytic = net.backward(input, target, dropout)?;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-7);
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (pi, grads) in analytic.params.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.params_mut()[pi][j];
            probe.params_mut()[pi][j] = orig + h;
            let up = probe.forward(input, dropout)?.mse(target)?;
            probe.params_mut()[pi][j] = orig - h;
            let down = probe.forward(input, dropout)?.mse(target)?;
            probe.params_mut()[pi][j] = orig;
            worst = worst.max(rel(a, (up - down) / (2.0 * h)));
        }
    }
    let mut x = input.clone();
    for (j, &a) in analytic.input.data.iter().enumerate() {
        let orig = x.data[j];
        x.data[j] = orig + h;
        let up = net.forward(&x, dropout)?.mse(target)?;
        x.data[j] = orig - h;
        let down = net.forward(&x, dropout)?.mse(target)?;
        x.data[j] = orig;
        worst = worst.max(rel(a, (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 100,
            early_stop_patience: 5,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            InvalidParameter,
            "learning rate must be positive"
        );
        ensure!(self.batch_size >= 1, InvalidParameter, "batch size must be >= 1");
        ensure!(self.max_epochs >= 1, InvalidParameter, "max_epochs must be >= 1");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0,
            InvalidParameter,
            "Adam moments must be in [0, 1) and eps > 0"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Validation loss of the weights training started from.
    pub initial_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub stopped_epoch: usize,
    /// Epoch whose weights were returned; 0 means the starting weights.
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss.iter().copied().fold(self.initial_val_loss, f64::min)
    }
}

/// One input/target pair, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
}

/// Mean dropout-off MSE over `samples`.
pub fn evaluate_loss(net: &NeuralNet, samples: &[Sample]) -> Result<f64> {
    ensure!(!samples.is_empty(), InvalidParameter, "empty evaluation set");
    let losses = samples
        .par_iter()
        .map(|s| net.forward(&s.input, DropoutMode::Off)?.mse(&s.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(net: &NeuralNet) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn update(&mut self, net: &mut NeuralNet, grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (((p, g), m), v) in net.params_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Minibatch Adam on MSE with dropout active, early stopping on the
/// dropout-off validation loss. Returns the weights with the lowest
/// validation loss seen, counting the starting weights as epoch 0.
pub fn train(net: &NeuralNet, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<(NeuralNet, TrainReport)> {
    cfg.validate()?;
    ensure!(!train_set.is_empty(), InvalidParameter, "empty training set");
    ensure!(!val_set.is_empty(), InvalidParameter, "empty validation set");
    let started = Instant::now();

    let mut current = net.clone();
    let mut adam = Adam::new(&current);
    let initial_val_loss = evaluate_loss(&current, val_set)?;
    let mut best = (initial_val_loss, 0usize, current.clone());
    let mut report = TrainReport {
        initial_val_loss,
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        stopped_epoch: 0,
        best_epoch: 0,
        wall_time_s: 0.0,
    };
    let shuffle_seed = seed::substream(cfg.seed, seed::Stream::Shuffle);
    let dropout_seed = seed::substream(cfg.seed, seed::Stream::Dropout);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(shuffle_seed, epoch as u64)));
        let epoch_seed = seed::derive(dropout_seed, epoch as u64);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_example = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let mode = DropoutMode::Active { seed: seed::derive(epoch_seed, i as u64) };
                    current.backprop(&s.input, &s.target, mode, false)
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = current.params().iter().map(|p| vec![0.0; p.len()]).collect();
            for g in &per_example {
                loss_sum += g.loss;
                for (acc, part) in grads.iter_mut().zip(&g.params) {
                    acc.iter_mut().zip(part).for_each(|(a, p)| *a += p * scale);
                }
            }
            adam.update(&mut current, &grads, cfg);
        }
        ensure!(current.is_finite(), InvalidParameter, "training diverged at epoch {epoch}");
        let val = evaluate_loss(&current, val_set)?;
        report.train_loss.push(loss_sum / train_set.len() as f64);
        report.val_loss.push(val);
        report.stopped_epoch = epoch;
        if val < best.0 {
            best = (val, epoch, current.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.early_stop_patience {
                break;
            }
        }
    }
    report.best_epoch = best.1;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((best.2, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(shape: Shape, seed: u64) -> Tensor {
        let mut rng = seed::rng(seed);
        Tensor { shape, data: (0..shape.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect() }
    }

    #[test]
    fn architecture_roundtrips_through_text() {
        for arch in [Architecture::compact(), Architecture::wide()] {
            assert_eq!(arch.to_string().parse::<Architecture>().unwrap(), arch);
        }
        assert!("conv5x5".parse::<Architecture>().is_err());
        assert!("relu,sigmoid".parse::<Architecture>().is_err());
    }

    #[test]
    fn construction_checks() {
        let s = Shape::new(2, 6, 4);
        assert!(NeuralNet::new(&"conv4x3:2".parse().unwrap(), s, 2, 0).is_err());
        assert!(NeuralNet::new(&"conv3x3:2,relu".parse().unwrap(), s, 2, 0).is_err());
        assert!(NeuralNet::new(&"conv3x3:3".parse().unwrap(), s, 2, 0).is_err());
        assert!(NeuralNet::new(&"conv3x3:4,dropout:1.0,conv3x3:2".parse().unwrap(), s, 2, 0).is_err());
        let net = NeuralNet::new(&"conv3x3:4,relu,dropout:0.2,conv1x1:2".parse().unwrap(), s, 2, 0).unwrap();
        assert_eq!(net.output_shape(), s);
        assert_eq!(net.num_params(), 4 * 2 * 9 + 4 + 2 * 4 + 2);
    }

    #[test]
    fn forward_determinism_and_degenerate_dropout() {
        let s = Shape::new(2, 8, 5);
        let net = NeuralNet::new(&"conv3x3:4,relu,dropout:0.3,conv3x3:2".parse().unwrap(), s, 2, 1).unwrap();
        let x = random_tensor(s, 2);
        assert_eq!(net.forward(&x, DropoutMode::Off).unwrap(), net.forward(&x, DropoutMode::Off).unwrap());
        let a = net.forward(&x, DropoutMode::Active { seed: 5 }).unwrap();
        assert_eq!(a, net.forward(&x, DropoutMode::Active { seed: 5 }).unwrap());
        assert_ne!(a, net.forward(&x, DropoutMode::Active { seed: 6 }).unwrap());

        let no_drop = NeuralNet::new(&"conv3x3:4,relu,dropout:0,conv3x3:2".parse().unwrap(), s, 2, 1).unwrap();
        assert_eq!(
            no_drop.forward(&x, DropoutMode::Active { seed: 9 }).unwrap(),
            no_drop.forward(&x, DropoutMode::Off).unwrap()
        );
        assert!(matches!(net.forward(&random_tensor(Shape::new(2, 8, 4), 0), DropoutMode::Off), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let s = Shape::new(2, 7, 5);
        let net = NeuralNet::new(&"conv3x5:3".parse().unwrap(), s, 3, 4).unwrap();
        let Layer::Conv2d(conv) = &net.layers()[0] else { unreachable!() };
        let x = random_tensor(s, 3);
        let y = net.forward(&x, DropoutMode::Off).unwrap();
        for co in 0..3 {
            for yy in 0..7i64 {
                for xx in 0..5i64 {
                    let mut acc = conv.bias[co];
                    for ci in 0..2 {
                        for dy in 0..3i64 {
                            for dx in 0..5i64 {
                                let (sy, sx) = (yy + dy - 1, xx + dx - 2);
                                if (0..7).contains(&sy) && (0..5).contains(&sx) {
                                    let w = conv.weight[((co * 2 + ci) * 3 + dy as usize) * 5 + dx as usize];
                                    acc += w * x.data[ci * 35 + sy as usize * 5 + sx as usize];
                                }
                            }
                        }
                    }
                    let got = y.data[co * 35 + yy as usize * 5 + xx as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_gradient_at_target() {
        let s = Shape::new(2, 6, 4);
        let net = NeuralNet::new(&"conv3x3:3,relu,conv3x3:2".parse().unwrap(), s, 2, 3).unwrap();
        let x = random_tensor(s, 1);
        let target = net.forward(&x, DropoutMode::Off).unwrap();
        let g = net.backward(&x, &target, DropoutMode::Off).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.params.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(g.input.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn one_by_one_conv_gradient_by_hand() {
        let s = Shape::new(1, 3, 2);
        let mut net = NeuralNet::new(&"conv1x1:1".parse().unwrap(), s, 1, 0).unwrap();
        let w = 0.7;
        if let Layer::Conv2d(c) = &mut net.layers[0] {
            c.weight[0] = w;
        }
        let x = random_tensor(s, 8);
        let t = random_tensor(s, 9);
        let g = net.backward(&x, &t, DropoutMode::Off).unwrap();
        let n = 6.0;
        let dw: f64 = x.data.iter().zip(&t.data).map(|(x, t)| 2.0 * (w * x - t) * x / n).sum();
        let db: f64 = x.data.iter().zip(&t.data).map(|(x, t)| 2.0 * (w * x - t) / n).sum();
        assert!((g.params[0][0] - dw).abs() < 1e-14);
        assert!((g.params[1][0] - db).abs() < 1e-14);
        for i in 0..6 {
            assert!((g.input.data[i] - 2.0 * (w * x.data[i] - t.data[i]) * w / n).abs() < 1e-14);
        }
    }

    #[test]
    fn dropout_mask_expectation() {
        let rate = 0.3;
        let m = dropout_mask(100_000, rate, 12);
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
    }

    fn linear_samples(n: usize) -> Vec<Sample> {
        let s = Shape::new(1, 4, 3);
        (0..n)
            .map(|i| {
                let input = random_tensor(s, 100 + i as u64);
                let target = Tensor { shape: s, data: input.data.iter().map(|v| 0.5 * v).collect() };
                Sample { input, target }
            })
            .collect()
    }

    #[test]
    fn learns_a_scalar_gain() {
        let data = linear_samples(16);
        let net = NeuralNet::new(&"conv1x1:1".parse().unwrap(), Shape::new(1, 4, 3), 1, 2).unwrap();
        let cfg = TrainConfig { learning_rate: 0.01, batch_size: 4, max_epochs: 200, early_stop_patience: 200, seed: 1, ..Default::default() };
        let (trained, report) = train(&net, &data, &data, &cfg).unwrap();
        assert!(*report.train_loss.last().unwrap() < 1e-6, "{:?}", report.train_loss.last());
        assert!(evaluate_loss(&trained, &data).unwrap() < 1e-6);
    }

    #[test]
    fn patience_zero_stops_after_first_non_improvement() {
        let data = linear_samples(8);
        let net = NeuralNet::new(&"conv1x1:1".parse().unwrap(), Shape::new(1, 4, 3), 1, 2).unwrap();
        // A huge step overshoots immediately.
        let cfg = TrainConfig { learning_rate: 50.0, batch_size: 8, max_epochs: 50, early_stop_patience: 0, ..Default::default() };
        let (_, report) = train(&net, &data, &data, &cfg).unwrap();
        let first_bad = report
            .val_loss
            .iter()
            .scan(report.initial_val_loss, |best, &v| {
                let improved = v < *best;
                *best = best.min(v);
                Some(improved)
            })
            .position(|improved| !improved)
            .unwrap();
        assert_eq!(report.stopped_epoch, first_bad + 1);
        assert_eq!(report.val_loss.len(), report.stopped_epoch);
    }

    #[test]
    fn training_is_deterministic() {
        let data = linear_samples(10);
        let net = NeuralNet::new(&"conv3x3:2,relu,dropout:0.2,conv1x1:1".parse().unwrap(), Shape::new(1, 4, 3), 1, 2).unwrap();
        let cfg = TrainConfig { batch_size: 3, max_epochs: 5, seed: 4, ..Default::default() };
        let (a, ra) = train(&net, &data, &data, &cfg).unwrap();
        let (b, rb) = train(&net, &data, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(ra.val_loss, rb.val_loss);
        assert!(ra.best_val_loss() <= ra.initial_val_loss);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let net = NeuralNet::new(&"conv1x1:1".parse().unwrap(), Shape::new(1, 4, 3), 1, 2).unwrap();
        let data = linear_samples(2);
        let cfg = TrainConfig::default();
        assert!(matches!(train(&net, &[], &data, &cfg), Err(Error::InvalidParameter(_))));
        assert!(matches!(train(&net, &data, &[], &cfg), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cases = [
            ("conv3x3:2", DropoutMode::Off),
            ("conv1x1:2", DropoutMode::Off),
            ("conv3x5:3,relu,conv3x3:2", DropoutMode::Off),
            ("conv3x3:4,dropout:0.3,conv1x1:2", DropoutMode::Active { seed: 3 }),
            ("conv5x5:3,relu,dropout:0.2,conv3x3:3,relu,conv3x3:2", DropoutMode::Active { seed: 8 }),
        ];
        for (i, (arch, mode)) in cases.iter().enumerate() {
            let s = Shape::new(2, 6, 4);
            let net = NeuralNet::new(&arch.parse().unwrap(), s, 2, 20 + i as u64).unwrap();
            let x = random_tensor(s, 40 + i as u64);
            let t = random_tensor(s, 60 + i as u64);
            let err = gradient_check(&net, &x, &t, *mode, 1e-4).unwrap();
            assert!(err < 1e-4, "{arch}: relative error {err}");
        }
    }

    #[test]
    fn tiled_convolution_matches_direct_sum_and_differences() {
        // 24 channels of 5x5 patches on a width-9 grid span several tiles.
        let s = Shape::new(24, 30, 9);
        let net = NeuralNet::new(&"conv5x5:2".parse().unwrap(), s, 2, 6).unwrap();
        let Layer::Conv2d(conv) = &net.layers()[0] else { unreachable!() };
        assert!(conv.tile_rows(9) < 30);
        let x = random_tensor(s, 7);
        let y = net.forward(&x, DropoutMode::Off).unwrap();
        for &(co, yy, xx) in &[(0usize, 0i64, 0i64), (1, 13, 4), (0, 29, 8), (1, 12, 0), (0, 24, 3)] {
            let mut acc = conv.bias[co];
            for ci in 0..24 {
                for dy in 0..5i64 {
                    for dx in 0..5i64 {
                        let (sy, sx) = (yy + dy - 2, xx + dx - 2);
                        if (0..30).contains(&sy) && (0..9).contains(&sx) {
                            acc += conv.weight[((co * 24 + ci) * 5 + dy as usize) * 5 + dx as usize]
                                * x.data[ci * 270 + sy as usize * 9 + sx as usize];
                        }
                    }
                }
            }
            assert!((y.data[co * 270 + yy as usize * 9 + xx as usize] - acc).abs() < 1e-12);
        }
        let t = random_tensor(Shape::new(2, 30, 9), 8);
        let g = net.backward(&x, &t, DropoutMode::Off).unwrap();
        let h = 1e-4;
        for j in (0..s.len()).step_by(97) {
            let mut xp = x.clone();
            xp.data[j] += h;
            let up = net.forward(&xp, DropoutMode::Off).unwrap().mse(&t).unwrap();
            xp.data[j] -= 2.0 * h;
            let down = net.forward(&xp, DropoutMode::Off).unwrap().mse(&t).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((g.input.data[j] - fd).abs() <= 1e-4 * fd.abs().max(1e-7), "{j}");
        }
        let mut probe = net.clone();
        for j in (0..conv.weight.len()).step_by(53) {
            let orig = probe.params_mut()[0][j];
            probe.params_mut()[0][j] = orig + h;
            let up = probe.forward(&x, DropoutMode::Off).unwrap().mse(&t).unwrap();
            probe.params_mut()[0][j] = orig - h;
            let down = probe.forward(&x, DropoutMode::Off).unwrap().mse(&t).unwrap();
            probe.params_mut()[0][j] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((g.params[0][j] - fd).abs() <= 1e-4 * fd.abs().max(1e-7), "w{j}");
        }
    }
}
