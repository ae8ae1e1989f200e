//! Dense single-channel and multi-channel grids plus the convolution,
//! pooling and resampling primitives the attention modules are built from.
//!
//! All buffers are row-major `f64`. A [`FeatureMap`] stores its channels
//! back to back, each one an `height × width` plane.

use crate::error::{param_err, shape_err, Error, Result};

/// SELU scale (Klambauer et al.).
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch amplitude.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("non-finite value at flat index {i}"))),
        None => Ok(()),
    }
}

/// A single-channel `height × width` map: an image, a mask, or logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err(format!("grid dims must be >= 1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(shape_err(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { height, width, data })
    }

    /// Builds a grid without validation. Callers guarantee the invariants.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dims must be >= 1");
        Self::from_raw(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid dims must be >= 1");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self::from_raw(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.require_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_raw(self.height, self.width, data))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.width, self.height, |i, j| self.get(j, i))
    }

    /// Mirrors columns (left-right flip).
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |i, j| self.get(i, self.width - 1 - j))
    }

    pub fn rotate_180(&self) -> Self {
        Self::from_fn(self.height, self.width, |i, j| {
            self.get(self.height - 1 - i, self.width - 1 - j)
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn require_same_dims(&self, other: &Grid2D) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err(format!(
                "grid dims differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// A `channels × height × width` activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(shape_err(format!(
                "feature map dims must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(shape_err(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { channels, height, width, data })
    }

    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self { channels, height, width, data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "feature map dims must be >= 1");
        Self::from_raw(channels, height, width, vec![value; channels * height * width])
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "feature map dims must be >= 1");
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self::from_raw(channels, height, width, data)
    }

    /// Wraps a single grid as a one-channel map.
    pub fn from_grid(g: &Grid2D) -> Self {
        Self::from_raw(1, g.height, g.width, g.data.clone())
    }

    /// Stacks equally sized grids as channels.
    pub fn from_channels(planes: &[Grid2D]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| shape_err("no channels given"))?;
        let mut data = Vec::with_capacity(planes.len() * first.len());
        for p in planes {
            first.require_same_dims(p)?;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_raw(planes.len(), first.height, first.width, data))
    }

    /// Channel-wise concatenation.
    pub fn concat(parts: &[&FeatureMap]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.spatial_dims() != first.spatial_dims() {
                return Err(shape_err(format!(
                    "cannot concatenate {}x{} with {}x{}",
                    first.height, first.width, p.height, p.width
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_raw(channels, first.height, first.width, data))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_grid(&self, c: usize) -> Grid2D {
        Grid2D::from_raw(self.height, self.width, self.channel(c).to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    fn require_same_shape(&self, other: &FeatureMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(format!(
                "feature map shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.require_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_raw(self.channels, self.height, self.width, data))
    }

    pub fn add(&self, other: &FeatureMap) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &FeatureMap) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Multiplies every channel by the same spatial weight map.
    pub fn mul_spatial(&self, weights: &Grid2D) -> Result<Self> {
        if weights.dims() != self.spatial_dims() {
            return Err(shape_err(format!(
                "weight map {}x{} does not match feature map {}x{}",
                weights.height, weights.width, self.height, self.width
            )));
        }
        let n = self.plane_len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(idx, &v)| v * weights.data[idx % n])
            .collect();
        Ok(Self::from_raw(self.channels, self.height, self.width, data))
    }

    /// Multiplies channel `c` by `scales[c]`.
    pub fn scale_channels(&self, scales: &[f64]) -> Result<Self> {
        if scales.len() != self.channels {
            return Err(shape_err(format!(
                "{} channel scales for {} channels",
                scales.len(),
                self.channels
            )));
        }
        let n = self.plane_len();
        let data = self
            .data
            .chunks(n)
            .zip(scales)
            .flat_map(|(plane, &s)| plane.iter().map(move |&v| v * s))
            .collect();
        Ok(Self::from_raw(self.channels, self.height, self.width, data))
    }

    /// Spatial average of each channel (global average pooling).
    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.plane_len() as f64;
        self.data.chunks(self.plane_len()).map(|p| p.iter().sum::<f64>() / n).collect()
    }

    /// Pixelwise mean over channels.
    pub fn mean_over_channels(&self) -> Grid2D {
        let n = self.plane_len();
        let mut out = vec![0.0; n];
        for plane in self.data.chunks(n) {
            for (o, &v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        let inv = 1.0 / self.channels as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Grid2D::from_raw(self.height, self.width, out)
    }

    /// Swaps the spatial axes of every channel.
    pub fn transpose_spatial(&self) -> Self {
        Self::from_fn(self.channels, self.width, self.height, |c, i, j| self.get(c, j, i))
    }
}

/// Elementwise mapping shared by [`Grid2D`] and [`FeatureMap`].
pub trait Elementwise: Sized {
    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self;
}

impl Elementwise for Grid2D {
    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        self.map(f)
    }
}

impl Elementwise for FeatureMap {
    fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        self.map(f)
    }
}

/// Row-major dense matrix, used for attention score tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    /// `a · bᵀ` for two vectors.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for &x in a {
            data.extend(b.iter().map(|&y| x * y));
        }
        Self { rows: a.len(), cols: b.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(shape_err(format!(
                "matrix has {} columns, vector has {} entries",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Largest `|Σ_row − 1|` over all rows.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows)
            .map(|r| (self.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            data.push(e);
        }
        data[start..].iter_mut().for_each(|v| *v /= total);
    }
    Matrix { rows: m.rows, cols: m.cols, data }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

pub fn sigmoid_map<T: Elementwise>(x: &T) -> T {
    x.map_values(sigmoid)
}

/// Summed-area table with a zero top row and left column, `(h+1) × (w+1)`.
fn integral_image(g: &Grid2D) -> Vec<f64> {
    let (h, w) = g.dims();
    let stride = w + 1;
    let mut sat = vec![0.0; (h + 1) * stride];
    for i in 0..h {
        let mut row_sum = 0.0;
        for j in 0..w {
            row_sum += g.get(i, j);
            sat[(i + 1) * stride + j + 1] = sat[i * stride + j + 1] + row_sum;
        }
    }
    sat
}

/// Mean over the `k × k` window centred on each pixel, with the window
/// clipped to the image and divided by the number of in-bounds pixels.
///
/// Runs in `O(H·W)` for every `k` through an integral image.
pub fn box_mean(g: &Grid2D, k: usize) -> Result<Grid2D> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(param_err(format!("box window side must be odd and >= 1, got {k}")));
    }
    let (h, w) = g.dims();
    let r = k / 2;
    let sat = integral_image(g);
    let stride = w + 1;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let top = i.saturating_sub(r);
        let bottom = (i + r + 1).min(h);
        for j in 0..w {
            let left = j.saturating_sub(r);
            let right = (j + r + 1).min(w);
            let sum = sat[bottom * stride + right] - sat[top * stride + right]
                - sat[bottom * stride + left]
                + sat[top * stride + left];
            let count = ((bottom - top) * (right - left)) as f64;
            out.push(sum / count);
        }
    }
    Ok(Grid2D::from_raw(h, w, out))
}

/// How a [`ConvParams`] connects channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Every output channel sees every input channel.
    Dense,
    /// Each channel is filtered by its own kernel.
    Depthwise,
}

/// Weights for one stride-1, same-padded convolution layer.
///
/// Dense weights are laid out `[out][in][ky][kx]`, depthwise weights
/// `[channel][ky][kx]`. When `activation` is set, SELU is applied after the
/// bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    kind: ConvKind,
    in_channels: usize,
    out_channels: usize,
    kernel_size: usize,
    dilation: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: bool,
}

impl ConvParams {
    fn validate(self) -> Result<Self> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(param_err("channel counts must be >= 1"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(param_err(format!("kernel side must be odd, got {}", self.kernel_size)));
        }
        if self.dilation == 0 {
            return Err(param_err("dilation must be >= 1"));
        }
        let k2 = self.kernel_size * self.kernel_size;
        let expected = match self.kind {
            ConvKind::Dense => self.in_channels * self.out_channels * k2,
            ConvKind::Depthwise => self.in_channels * k2,
        };
        if self.weights.len() != expected {
            return Err(shape_err(format!(
                "expected {expected} weights, got {}",
                self.weights.len()
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(shape_err(format!(
                "expected {} biases, got {}",
                self.out_channels,
                self.bias.len()
            )));
        }
        check_finite(&self.weights)?;
        check_finite(&self.bias)?;
        Ok(self)
    }

    /// A dense `k × k` convolution.
    pub fn dense(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        Self {
            kind: ConvKind::Dense,
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            weights,
            bias,
            activation: false,
        }
        .validate()
    }

    /// A 1×1 convolution; `weights` is the `out × in` matrix.
    pub fn pointwise(
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        Self::dense(in_channels, out_channels, 1, 1, weights, bias)
    }

    pub fn depthwise(
        channels: usize,
        kernel_size: usize,
        dilation: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        Self {
            kind: ConvKind::Depthwise,
            in_channels: channels,
            out_channels: channels,
            kernel_size,
            dilation,
            weights,
            bias,
            activation: false,
        }
        .validate()
    }

    pub fn identity_pointwise(channels: usize) -> Self {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        Self::pointwise(channels, channels, w, vec![0.0; channels]).expect("identity is valid")
    }

    pub fn zero_pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::pointwise(
            in_channels,
            out_channels,
            vec![0.0; in_channels * out_channels],
            vec![0.0; out_channels],
        )
        .expect("zero conv is valid")
    }

    /// Depthwise kernel with a single 1 at the centre tap.
    pub fn delta_depthwise(channels: usize, kernel_size: usize, dilation: usize) -> Result<Self> {
        let k2 = kernel_size * kernel_size;
        let mut w = vec![0.0; channels * k2];
        for c in 0..channels {
            w[c * k2 + k2 / 2] = 1.0;
        }
        Self::depthwise(channels, kernel_size, dilation, w, vec![0.0; channels])
    }

    pub fn with_activation(mut self, on: bool) -> Self {
        self.activation = on;
        self
    }

    pub fn kind(&self) -> ConvKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> bool {
        self.activation
    }

    /// Zero padding on each side that keeps the spatial dims.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel_size - 1) / 2
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn finish(&self, mut out: Vec<f64>, plane: usize) -> Vec<f64> {
        for (chunk, &b) in out.chunks_mut(plane).zip(&self.bias) {
            for v in chunk.iter_mut() {
                *v += b;
                if self.activation {
                    *v = selu(*v);
                }
            }
        }
        out
    }

    fn check_reach(&self, h: usize, w: usize) -> Result<()> {
        let pad = self.padding();
        if pad > 0 && pad >= h && pad >= w {
            return Err(param_err(format!(
                "kernel {}x{} at dilation {} reaches {pad} pixels, beyond the {h}x{w} input",
                self.kernel_size, self.kernel_size, self.dilation
            )));
        }
        Ok(())
    }
}

/// Adds `weight · src` shifted by `(dy, dx)` into `dst`, skipping taps that
/// fall into the zero padding.
#[inline]
fn accumulate_shifted(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, weight: f64) {
    if weight == 0.0 {
        return;
    }
    let (h_i, w_i) = (h as isize, w as isize);
    let i0 = (-dy).max(0);
    let i1 = (h_i - dy).min(h_i);
    let j0 = (-dx).max(0);
    let j1 = (w_i - dx).min(w_i);
    if i0 >= i1 || j0 >= j1 {
        return;
    }
    let (j0, j1) = (j0 as usize, j1 as usize);
    for i in i0..i1 {
        let row = i as usize * w;
        let src_row = (i + dy) as usize * w;
        let d = &mut dst[row + j0..row + j1];
        let s = &src[(src_row as isize + j0 as isize + dx) as usize..][..j1 - j0];
        for (o, &v) in d.iter_mut().zip(s) {
            *o += weight * v;
        }
    }
}

/// Per-pixel linear map across channels plus bias.
pub fn conv1x1(x: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    if p.kind != ConvKind::Dense || p.kernel_size != 1 {
        return Err(param_err("conv1x1 needs a dense 1x1 kernel"));
    }
    conv2d(x, p)
}

/// Stride-1, zero-padded dense convolution that preserves `H × W`.
pub fn conv2d(x: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    if p.kind != ConvKind::Dense {
        return Err(param_err("conv2d needs dense params; use depthwise_conv"));
    }
    if p.in_channels != x.channels {
        return Err(shape_err(format!(
            "conv expects {} input channels, got {}",
            p.in_channels, x.channels
        )));
    }
    let (h, w) = x.spatial_dims();
    p.check_reach(h, w)?;
    let plane = h * w;
    let k = p.kernel_size;
    let half = (k / 2) as isize;
    let dil = p.dilation as isize;
    let mut out = vec![0.0; p.out_channels * plane];
    for (o, dst) in out.chunks_mut(plane).enumerate() {
        for c in 0..p.in_channels {
            let src = x.channel(c);
            let base = (o * p.in_channels + c) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = p.weights[base + ky * k + kx];
                    let dy = (ky as isize - half) * dil;
                    let dx = (kx as isize - half) * dil;
                    accumulate_shifted(dst, src, h, w, dy, dx, wgt);
                }
            }
        }
    }
    Ok(FeatureMap::from_raw(p.out_channels, h, w, p.finish(out, plane)))
}

/// Each channel convolved with its own dilated `k × k` kernel.
pub fn depthwise_conv(x: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    if p.kind != ConvKind::Depthwise {
        return Err(param_err("depthwise_conv needs depthwise params"));
    }
    if p.in_channels != x.channels {
        return Err(shape_err(format!(
            "depthwise conv expects {} channels, got {}",
            p.in_channels, x.channels
        )));
    }
    let (h, w) = x.spatial_dims();
    p.check_reach(h, w)?;
    let plane = h * w;
    let k = p.kernel_size;
    let half = (k / 2) as isize;
    let dil = p.dilation as isize;
    let mut out = vec![0.0; x.channels * plane];
    for (c, dst) in out.chunks_mut(plane).enumerate() {
        let src = x.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let wgt = p.weights[c * k * k + ky * k + kx];
                let dy = (ky as isize - half) * dil;
                let dx = (kx as isize - half) * dil;
                accumulate_shifted(dst, src, h, w, dy, dx, wgt);
            }
        }
    }
    Ok(FeatureMap::from_raw(x.channels, h, w, p.finish(out, plane)))
}

/// Dispatches on the kind of `p`.
pub fn apply_conv(x: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    match p.kind {
        ConvKind::Dense => conv2d(x, p),
        ConvKind::Depthwise => depthwise_conv(x, p),
    }
}

/// Source index pair and blend weight for each output position along one
/// axis (half-pixel centres, edges clamped).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every channel to `out_h × out_w`.
pub fn resize_bilinear(x: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(param_err("resize target must be >= 1x1"));
    }
    let (h, w) = x.spatial_dims();
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(x.channels * out_h * out_w);
    for c in 0..x.channels {
        let src = x.channel(c);
        for &(r0, r1, fy) in &rows {
            for &(c0, c1, fx) in &cols {
                let top = src[r0 * w + c0] * (1.0 - fx) + src[r0 * w + c1] * fx;
                let bottom = src[r1 * w + c0] * (1.0 - fx) + src[r1 * w + c1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(FeatureMap::from_raw(x.channels, out_h, out_w, out))
}

/// Bilinear upsampling by an integer factor.
pub fn upsample(x: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(param_err("upsample factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    resize_bilinear(x, x.height * factor, x.width * factor)
}

pub fn upsample_grid(g: &Grid2D, factor: usize) -> Result<Grid2D> {
    let up = upsample(&FeatureMap::from_grid(g), factor)?;
    Ok(Grid2D::from_raw(up.height, up.width, up.data))
}

/// 2×2 average pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &FeatureMap) -> Result<FeatureMap> {
    let (h, w) = x.spatial_dims();
    if h < 2 || w < 2 {
        return Err(shape_err(format!("cannot halve a {h}x{w} map")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(x.channels * oh * ow);
    for c in 0..x.channels {
        let src = x.channel(c);
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                out.push(0.25 * (a + b));
            }
        }
    }
    Ok(FeatureMap::from_raw(x.channels, oh, ow, out))
}

/// Keeps the even rows and columns. Applied after a same-padded stride-1
/// convolution this gives the stride-2 convolution with the same padding.
pub fn decimate2(x: &FeatureMap) -> Result<FeatureMap> {
    let (h, w) = x.spatial_dims();
    if h < 2 || w < 2 {
        return Err(shape_err(format!("cannot halve a {h}x{w} map")));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(x.channels * oh * ow);
    for c in 0..x.channels {
        let src = x.channel(c);
        for i in 0..oh {
            out.extend((0..ow).map(|j| src[2 * i * w + 2 * j]));
        }
    }
    Ok(FeatureMap::from_raw(x.channels, oh, ow, out))
}
