//! Piecewise-linear networks: layer definitions, shape validation, forward
//! evaluation and input gradients.
//!
//! Tensors are laid out channels-first (`[channels, height, width]`) and all
//! arithmetic is `f64`. A ReLU unit whose pre-activation is exactly zero is
//! treated as inactive, and MaxPool routes gradients to the lowest flat index
//! among tied maxima.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Composed affine runs larger than this many matrix entries are left as-is.
const FOLD_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub out_features: usize,
    pub in_features: usize,
    /// Row-major `out_features x in_features`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Builds a dense layer from weight rows. Rows must all have the same length.
    pub fn from_rows(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let in_features = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != in_features) {
            return Err(Error::shape(
                None,
                format!("weight rows of length {in_features}"),
                format!("row of length {}", bad.len()),
            ));
        }
        Ok(Dense {
            out_features: rows.len(),
            in_features,
            weights: rows.into_iter().flatten().collect(),
            bias,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_features..(i + 1) * self.in_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.in_features.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: (usize, usize),
    /// Flattened `[out_channels, in_channels, kh, kw]`.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    /// `(v - mean[c]) / std[c]` with `c` indexing the leading axis.
    Normalize { mean: Vec<f64>, std: Vec<f64> },
    Flatten,
    Relu,
    MaxPool {
        window: (usize, usize),
        stride: (usize, usize),
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Normalize { .. } => "normalize",
            Layer::Flatten => "flatten",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(
            self,
            Layer::Dense(_) | Layer::Conv2d(_) | Layer::Normalize { .. } | Layer::Flatten
        )
    }

    fn values(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            Layer::Dense(d) => Box::new(d.weights.iter().chain(&d.bias)),
            Layer::Conv2d(c) => Box::new(c.kernel.iter().chain(&c.bias)),
            Layer::Normalize { mean, std } => Box::new(mean.iter().chain(std)),
            _ => Box::new(std::iter::empty()),
        }
    }

    /// Output shape for `input`, or `(expected, actual)` describing the violation.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, (String, String)> {
        let numel: usize = input.iter().product();
        match self {
            Layer::Dense(d) => {
                if d.weights.len() != d.out_features * d.in_features || d.out_features == 0 {
                    return Err((
                        format!("{}x{} weight matrix", d.out_features, d.in_features),
                        format!("{} weights", d.weights.len()),
                    ));
                }
                if d.bias.len() != d.out_features {
                    return Err((
                        format!("bias of length {}", d.out_features),
                        format!("bias of length {}", d.bias.len()),
                    ));
                }
                if input != [d.in_features] {
                    return Err((format!("input [{}]", d.in_features), format!("input {input:?}")));
                }
                Ok(vec![d.out_features])
            }
            Layer::Conv2d(c) => {
                let (kh, kw) = c.kernel_size;
                if c.kernel.len() != c.out_channels * c.in_channels * kh * kw
                    || c.out_channels == 0
                    || kh == 0
                    || kw == 0
                {
                    return Err((
                        format!("[{}, {}, {kh}, {kw}] kernel", c.out_channels, c.in_channels),
                        format!("{} kernel values", c.kernel.len()),
                    ));
                }
                if c.bias.len() != c.out_channels {
                    return Err((
                        format!("bias of length {}", c.out_channels),
                        format!("bias of length {}", c.bias.len()),
                    ));
                }
                if c.stride.0 == 0 || c.stride.1 == 0 {
                    return Err(("positive stride".into(), format!("{:?}", c.stride)));
                }
                let [ch, h, w] = input else {
                    return Err(("input [channels, height, width]".into(), format!("input {input:?}")));
                };
                let (ph, pw) = c.padding;
                if *ch != c.in_channels || h + 2 * ph < kh || w + 2 * pw < kw {
                    return Err((
                        format!("input [{}, >={}, >={}]", c.in_channels, kh.saturating_sub(2 * ph), kw.saturating_sub(2 * pw)),
                        format!("input {input:?}"),
                    ));
                }
                Ok(vec![
                    c.out_channels,
                    (h + 2 * ph - kh) / c.stride.0 + 1,
                    (w + 2 * pw - kw) / c.stride.1 + 1,
                ])
            }
            Layer::Normalize { mean, std } => {
                if mean.len() != input[0] || std.len() != input[0] {
                    return Err((
                        format!("{} channel statistics", input[0]),
                        format!("mean {} / std {}", mean.len(), std.len()),
                    ));
                }
                if std.iter().any(|&s| s <= 0.0) {
                    return Err(("positive std".into(), format!("{std:?}")));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![numel]),
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { window, stride } => {
                if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                    return Err((
                        "positive window and stride".into(),
                        format!("window {window:?}, stride {stride:?}"),
                    ));
                }
                let [ch, h, w] = input else {
                    return Err(("input [channels, height, width]".into(), format!("input {input:?}")));
                };
                if *h < window.0 || *w < window.1 {
                    return Err((
                        format!("spatial size at least {window:?}"),
                        format!("input {input:?}"),
                    ));
                }
                Ok(vec![*ch, (h - window.0) / stride.0 + 1, (w - window.1) / stride.1 + 1])
            }
        }
    }

    /// Applies the layer to `input` (of shape `in_shape`), writing into `out`.
    pub(crate) fn apply(&self, input: &[f64], in_shape: &[usize], out: &mut Vec<f64>) {
        self.apply_impl(input, in_shape, out, true);
    }

    /// Applies only the linear part of an affine layer (biases and means dropped).
    fn apply_linear(&self, input: &[f64], in_shape: &[usize], out: &mut Vec<f64>) {
        self.apply_impl(input, in_shape, out, false);
    }

    fn apply_impl(&self, input: &[f64], in_shape: &[usize], out: &mut Vec<f64>, with_offset: bool) {
        out.clear();
        match self {
            Layer::Dense(d) => {
                out.extend(d.rows().zip(&d.bias).map(|(row, &b)| {
                    let dot: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
                    if with_offset {
                        dot + b
                    } else {
                        dot
                    }
                }));
            }
            Layer::Conv2d(c) => conv_forward(c, input, in_shape, out, with_offset),
            Layer::Normalize { mean, std } => {
                let inner = input.len() / in_shape[0];
                for (ch, chunk) in input.chunks(inner).enumerate() {
                    let (m, s) = (mean[ch], std[ch]);
                    if with_offset {
                        out.extend(chunk.iter().map(|v| (v - m) / s));
                    } else {
                        out.extend(chunk.iter().map(|v| v / s));
                    }
                }
            }
            Layer::Flatten => out.extend_from_slice(input),
            Layer::Relu => out.extend(input.iter().map(|&v| v.max(0.0))),
            Layer::MaxPool { .. } => {
                let geometry = PoolGeometry::for_layer(self, in_shape).expect("validated maxpool");
                geometry.for_each_window(|idx| {
                    out.push(idx.iter().map(|&i| input[i]).fold(f64::NEG_INFINITY, f64::max));
                });
            }
        }
    }

    /// Backpropagates `grad_out` through the layer evaluated at `input`.
    fn backprop(&self, input: &[f64], in_shape: &[usize], grad_out: &[f64], grad_in: &mut Vec<f64>) {
        grad_in.clear();
        match self {
            Layer::Dense(d) => {
                grad_in.resize(d.in_features, 0.0);
                for (row, &g) in d.rows().zip(grad_out) {
                    if g != 0.0 {
                        for (acc, w) in grad_in.iter_mut().zip(row) {
                            *acc += w * g;
                        }
                    }
                }
            }
            Layer::Conv2d(c) => conv_backward(c, in_shape, grad_out, grad_in),
            Layer::Normalize { std, .. } => {
                let inner = grad_out.len() / in_shape[0];
                for (ch, chunk) in grad_out.chunks(inner).enumerate() {
                    grad_in.extend(chunk.iter().map(|g| g / std[ch]));
                }
            }
            Layer::Flatten => grad_in.extend_from_slice(grad_out),
            Layer::Relu => grad_in.extend(
                input
                    .iter()
                    .zip(grad_out)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }),
            ),
            Layer::MaxPool { .. } => {
                grad_in.resize(input.len(), 0.0);
                let geometry = PoolGeometry::for_layer(self, in_shape).expect("validated maxpool");
                let mut k = 0;
                geometry.for_each_window(|idx| {
                    let mut best = idx[0];
                    for &i in &idx[1..] {
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                    grad_in[best] += grad_out[k];
                    k += 1;
                });
            }
        }
    }
}

fn conv_forward(c: &Conv2d, input: &[f64], in_shape: &[usize], out: &mut Vec<f64>, with_bias: bool) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (kh, kw) = c.kernel_size;
    let (sh, sw) = c.stride;
    let (ph, pw) = c.padding;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    out.resize(c.out_channels * oh * ow, 0.0);
    for oc in 0..c.out_channels {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(if with_bias { c.bias[oc] } else { 0.0 });
        for ic in 0..c.in_channels {
            let src = &input[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * c.in_channels + ic) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = c.kernel[kbase + ky * kw + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                *d += k * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(c: &Conv2d, in_shape: &[usize], grad_out: &[f64], grad_in: &mut Vec<f64>) {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (kh, kw) = c.kernel_size;
    let (sh, sw) = c.stride;
    let (ph, pw) = c.padding;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    grad_in.resize(c.in_channels * h * w, 0.0);
    for oc in 0..c.out_channels {
        let plane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c.in_channels {
            let dst = &mut grad_in[ic * h * w..(ic + 1) * h * w];
            let kbase = (oc * c.in_channels + ic) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = c.kernel[kbase + ky * kw + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += k * plane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Window layout of a MaxPool layer over a `[channels, height, width]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolGeometry {
    pub(crate) fn for_layer(layer: &Layer, in_shape: &[usize]) -> Option<Self> {
        match (layer, in_shape) {
            (Layer::MaxPool { window, stride }, &[channels, height, width]) => Some(PoolGeometry {
                channels,
                height,
                width,
                window: *window,
                stride: *stride,
            }),
            _ => None,
        }
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [
            self.channels,
            (self.height - self.window.0) / self.stride.0 + 1,
            (self.width - self.window.1) / self.stride.1 + 1,
        ]
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Calls `f` with the flat input indices of every window, in output order.
    /// Indices within a window are increasing.
    pub fn for_each_window(&self, mut f: impl FnMut(&[usize])) {
        let [_, oh, ow] = self.output_shape();
        let (wh, ww) = self.window;
        let mut idx = Vec::with_capacity(wh * ww);
        for c in 0..self.channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    idx.clear();
                    for ky in 0..wh {
                        let y = oy * self.stride.0 + ky;
                        let base = (c * self.height + y) * self.width + ox * self.stride.1;
                        idx.extend(base..base + ww);
                    }
                    f(&idx);
                }
            }
        }
    }

    pub fn windows(&self) -> Vec<Vec<usize>> {
        let mut all = Vec::new();
        self.for_each_window(|idx| all.push(idx.to_vec()));
        all
    }
}

/// Checks layer invariants and inter-layer shape compatibility.
///
/// Returns the input shape of every layer followed by the network output shape.
pub fn validate_network(input_shape: &[usize], layers: &[Layer]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::shape(None, "non-empty input shape with positive dimensions", format!("{input_shape:?}")));
    }
    if layers.is_empty() {
        return Err(Error::shape(None, "at least one layer", "no layers"));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        if layer.values().any(|v| !v.is_finite()) {
            return Err(Error::Value(format!("layer {i} ({})", layer.kind())));
        }
        let next = layer
            .output_shape(shapes.last().unwrap())
            .map_err(|(expected, actual)| Error::shape(Some(i), expected, actual))?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// A validated, immutable sequence of piecewise-linear layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

impl Network {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let shapes = validate_network(&input_shape, &layers)?;
        Ok(Network { layers, shapes })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    /// Input shape of layer `i`; `i == layers().len()` gives the output shape.
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// The first layer that is neither affine nor ReLU, if any.
    pub fn first_non_relu_affine(&self) -> Option<(usize, &Layer)> {
        self.layers
            .iter()
            .enumerate()
            .find(|(_, l)| !(l.is_affine() || matches!(l, Layer::Relu)))
    }

    pub(crate) fn require_relu_affine(&self, operation: &'static str) -> Result<()> {
        match self.first_non_relu_affine() {
            Some((layer, l)) => Err(Error::UnsupportedLayer {
                layer,
                kind: l.kind(),
                operation,
            }),
            None => Ok(()),
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return Err(Error::shape(
                None,
                format!("input {:?}", self.input_shape()),
                format!("input {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(Tensor::from_parts(self.output_shape().to_vec(), self.forward_slice(x.data())))
    }

    pub(crate) fn forward_slice(&self, x: &[f64]) -> Vec<f64> {
        self.forward_range(x, 0, self.layers.len())
    }

    /// Applies layers `start..end` to `x`, which must have the shape expected by layer `start`.
    pub(crate) fn forward_range(&self, x: &[f64], start: usize, end: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for i in start..end {
            self.layers[i].apply(&cur, &self.shapes[i], &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Gradient of output component `output_index` with respect to the input.
    pub fn gradient(&self, x: &Tensor, output_index: usize) -> Result<Tensor> {
        self.check_input(x)?;
        self.check_output_index(output_index)?;
        let mut eval = GradientEvaluator::new(self);
        let g = eval.gradient(x.data(), output_index).to_vec();
        Ok(Tensor::from_parts(self.input_shape().to_vec(), g))
    }

    pub fn check_output_index(&self, output_index: usize) -> Result<()> {
        if output_index >= self.output_len() {
            return Err(Error::Index {
                index: output_index,
                len: self.output_len(),
            });
        }
        Ok(())
    }
}

/// Reusable buffers for repeated gradient evaluation on one network.
pub struct GradientEvaluator<'n> {
    net: &'n Network,
    activations: Vec<Vec<f64>>,
    grad: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'n> GradientEvaluator<'n> {
    pub fn new(net: &'n Network) -> Self {
        GradientEvaluator {
            net,
            activations: vec![Vec::new(); net.layers.len() + 1],
            grad: Vec::new(),
            scratch: Vec::new(),
        }
    }

    /// `x` must hold `net.input_len()` values and `output_index` must be in range.
    pub fn gradient(&mut self, x: &[f64], output_index: usize) -> &[f64] {
        let net = self.net;
        self.activations[0].clear();
        self.activations[0].extend_from_slice(x);
        for (i, layer) in net.layers.iter().enumerate() {
            let (done, rest) = self.activations.split_at_mut(i + 1);
            layer.apply(&done[i], &net.shapes[i], &mut rest[0]);
        }
        self.grad.clear();
        self.grad.resize(net.output_len(), 0.0);
        self.grad[output_index] = 1.0;
        for (i, layer) in net.layers.iter().enumerate().rev() {
            layer.backprop(&self.activations[i], &net.shapes[i], &self.grad, &mut self.scratch);
            std::mem::swap(&mut self.grad, &mut self.scratch);
        }
        &self.grad
    }

    /// Network output from the most recent `gradient` call.
    pub fn last_output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }
}

/// Composes each maximal run of affine layers ending in a flat shape into a
/// single dense step. Runs that end in a spatial shape, or whose composed
/// matrix would exceed [`FOLD_LIMIT`] entries, are kept unchanged.
pub fn fold_affine_layers(net: &Network) -> Network {
    let mut layers = Vec::new();
    let mut i = 0;
    while i < net.layers.len() {
        if !net.layers[i].is_affine() {
            layers.push(net.layers[i].clone());
            i += 1;
            continue;
        }
        let start = i;
        while i < net.layers.len() && net.layers[i].is_affine() {
            i += 1;
        }
        let in_shape = &net.shapes[start];
        let out_shape = &net.shapes[i];
        let in_len: usize = in_shape.iter().product();
        let foldable = out_shape.len() == 1
            && in_len * out_shape[0] <= FOLD_LIMIT
            && net.layers[start..i].iter().any(|l| !matches!(l, Layer::Flatten));
        if !foldable {
            layers.extend_from_slice(&net.layers[start..i]);
            continue;
        }
        if in_shape.len() > 1 {
            layers.push(Layer::Flatten);
        }
        layers.push(Layer::Dense(compose_run(net, start, i)));
    }
    Network::new(net.input_shape().to_vec(), layers).expect("folding preserves shapes")
}

fn compose_run(net: &Network, start: usize, end: usize) -> Dense {
    let in_len: usize = net.shapes[start].iter().product();
    // Columns of the running linear map, plus the running offset.
    let mut columns: Vec<Vec<f64>> = (0..in_len)
        .map(|j| {
            let mut e = vec![0.0; in_len];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut offset = vec![0.0; in_len];
    let mut buf = Vec::new();
    for k in start..end {
        let layer = &net.layers[k];
        let shape = &net.shapes[k];
        for col in &mut columns {
            layer.apply_linear(col, shape, &mut buf);
            std::mem::swap(col, &mut buf);
        }
        layer.apply(&offset, shape, &mut buf);
        std::mem::swap(&mut offset, &mut buf);
    }
    let out_len = offset.len();
    let mut weights = vec![0.0; out_len * in_len];
    for (j, col) in columns.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            weights[r * in_len + j] = v;
        }
    }
    Dense {
        out_features: out_len,
        in_features: in_len,
        weights,
        bias: offset,
    }
}
