//! 2-D Fourier transforms, the ideal radial high-pass filter and masked
//! edge attention.
//!
//! Conventions: the forward transform is unnormalised and the inverse
//! carries the `1/(H·W)` factor, so `Σ|g|² = Σ|G|² / (H·W)`. A [`Spectrum`]
//! is always stored shifted, with the DC bin at `(H/2, W/2)` (integer
//! division), the same layout `numpy.fft.fftshift` produces.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::attention::{ddrm_forward, DdrmParams};
use crate::error::{param_err, shape_err, Error, Result};
use crate::grid::{FeatureMap, Grid2D};

/// Largest imaginary residue `ifft2` tolerates, relative to `max(1, max|re|)`.
pub const IMAG_TOLERANCE: f64 = 1e-5;

/// Default high-pass radius in frequency bins.
pub const DEFAULT_RADIUS: f64 = 16.0;

/// Complex spectrum with the DC bin moved to the centre.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(shape_err(format!(
                "spectrum {height}x{width} cannot hold {} bins",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Bin at shifted position `(i, j)`.
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.width + j]
    }

    /// Bin for signed frequency `(u, v)`, where `(0, 0)` is DC.
    pub fn at_frequency(&self, u: isize, v: isize) -> Complex64 {
        let i = (u + (self.height / 2) as isize).rem_euclid(self.height as isize) as usize;
        let j = (v + (self.width / 2) as isize).rem_euclid(self.width as isize) as usize;
        self.get(i, j)
    }

    pub fn scale(&self, a: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|z| z * a).collect(),
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Euclidean distance of shifted bin `(i, j)` from the centred DC bin.
    pub fn radius_of(&self, i: usize, j: usize) -> f64 {
        let di = i as f64 - (self.height / 2) as f64;
        let dj = j as f64 - (self.width / 2) as f64;
        (di * di + dj * dj).sqrt()
    }
}

/// Reusable FFT plans for one `H × W` shape.
struct Plan2 {
    height: usize,
    width: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
}

impl Plan2 {
    fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            rows: planner.plan_fft_forward(width),
            cols: planner.plan_fft_forward(height),
            rows_inv: planner.plan_fft_inverse(width),
            cols_inv: planner.plan_fft_inverse(height),
        }
    }

    fn transpose(&self, data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); h * w];
        for i in 0..h {
            for j in 0..w {
                out[j * h + i] = data[i * w + j];
            }
        }
        out
    }

    /// In-place unshifted 2-D transform.
    fn run(&self, data: &mut Vec<Complex64>, inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (rows, cols) = if inverse {
            (&self.rows_inv, &self.cols_inv)
        } else {
            (&self.rows, &self.cols)
        };
        rows.process(data);
        let mut t = self.transpose(data, h, w);
        cols.process(&mut t);
        *data = self.transpose(&t, w, h);
    }

    fn forward(&self, g: &[f64]) -> Spectrum {
        let (h, w) = (self.height, self.width);
        let mut buf: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.run(&mut buf, false);
        let mut shifted = vec![Complex64::default(); h * w];
        for i in 0..h {
            let si = (i + h / 2) % h;
            for j in 0..w {
                shifted[si * w + (j + w / 2) % w] = buf[i * w + j];
            }
        }
        Spectrum { height: h, width: w, data: shifted }
    }

    fn inverse(&self, s: &Spectrum) -> Vec<Complex64> {
        let (h, w) = (self.height, self.width);
        let mut buf = vec![Complex64::default(); h * w];
        for i in 0..h {
            let si = (i + h / 2) % h;
            for j in 0..w {
                buf[i * w + j] = s.data[si * w + (j + w / 2) % w];
            }
        }
        self.run(&mut buf, true);
        let norm = 1.0 / (h * w) as f64;
        buf.iter_mut().for_each(|z| *z *= norm);
        buf
    }
}

fn real_part(h: usize, w: usize, values: Vec<Complex64>) -> Result<Grid2D> {
    let scale = values.iter().map(|z| z.re.abs()).fold(1.0, f64::max);
    let residue = values.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if residue > IMAG_TOLERANCE * scale {
        return Err(Error::InvalidInput(format!(
            "inverse transform is not real: imaginary residue {residue:e}"
        )));
    }
    Grid2D::new(h, w, values.into_iter().map(|z| z.re).collect())
}

/// Unnormalised forward 2-D DFT, returned centred.
pub fn fft2(g: &Grid2D) -> Result<Spectrum> {
    if g.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("fft2 input contains non-finite values".into()));
    }
    Ok(Plan2::new(g.height(), g.width()).forward(g.data()))
}

/// Inverse of [`fft2`] without discarding the imaginary part.
pub fn ifft2_complex(s: &Spectrum) -> Vec<Complex64> {
    Plan2::new(s.height, s.width).inverse(s)
}

/// Inverse of [`fft2`]; fails when the result has a non-negligible
/// imaginary part (the spectrum was not Hermitian).
pub fn ifft2(s: &Spectrum) -> Result<Grid2D> {
    real_part(s.height, s.width, ifft2_complex(s))
}

/// Ideal high-pass: zero every bin strictly closer than `radius` to DC.
pub fn highpass(s: &Spectrum, radius: f64) -> Result<Spectrum> {
    if radius.is_nan() || radius < 0.0 {
        return Err(param_err(format!("high-pass radius must be >= 0, got {radius}")));
    }
    let mut out = s.clone();
    for i in 0..s.height {
        for j in 0..s.width {
            if s.radius_of(i, j) < radius {
                out.data[i * s.width + j] = Complex64::default();
            }
        }
    }
    Ok(out)
}

/// High-frequency content of every channel: `ifft2(highpass(fft2(x_c)))`.
pub fn high_frequency(x: &FeatureMap, radius: f64) -> Result<FeatureMap> {
    if radius.is_nan() || radius < 0.0 {
        return Err(param_err(format!("high-pass radius must be >= 0, got {radius}")));
    }
    let (h, w) = x.spatial_dims();
    let plan = Plan2::new(h, w);
    let mut out = Vec::with_capacity(x.data().len());
    for c in 0..x.channels() {
        let spec = highpass(&plan.forward(x.channel(c)), radius)?;
        out.extend(real_part(h, w, plan.inverse(&spec))?.into_data());
    }
    FeatureMap::new(x.channels(), h, w, out)
}

/// Absolute high-frequency response of a single image.
pub fn edge_magnitude(g: &Grid2D, radius: f64) -> Result<Grid2D> {
    let hf = high_frequency(&FeatureMap::from_grid(g), radius)?;
    Ok(hf.channel_grid(0).map(f64::abs))
}

/// Output of [`masked_edge_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeResult {
    /// Denoised edge features `E`.
    pub edge: FeatureMap,
    /// Edge-refined features `X + E`.
    pub refined: FeatureMap,
    pub radius: f64,
}

/// Masked edge attention: high-pass each channel, denoise with the
/// receptive-field block, and add the result back onto the input.
pub fn masked_edge_attention(x: &FeatureMap, radius: f64, rfb: &DdrmParams) -> Result<EdgeResult> {
    if rfb.in_channels() != x.channels() || rfb.out_channels() != x.channels() {
        return Err(shape_err(format!(
            "edge block maps {} -> {} channels but the input has {}",
            rfb.in_channels(),
            rfb.out_channels(),
            x.channels()
        )));
    }
    let x_high = high_frequency(x, radius)?;
    let edge = ddrm_forward(&x_high, rfb)?;
    let refined = x.add(&edge)?;
    Ok(EdgeResult { edge, refined, radius })
}
