//! Linear per-region restoration decoder: one learnable k×k kernel and bias per
//! PSF-map cell, blended across regions like the forward convolution.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamRole, Parameter, ParameterSet};
use crate::error::{Error, Result};
use crate::imaging::{convolve_regions, input_gradient, kernel_gradient, Kernel, Regions, SimImage};
use crate::psf::fft2;

pub const DEFAULT_DECODER_KERNEL: usize = 15;
pub const DEFAULT_NSR: f64 = 0.01;
/// Bounds for decoder parameters in a [`ParameterSet`].
const DECODER_BOUND: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub grid: usize,
    pub k: usize,
    /// Row-major kernels, one per cell.
    pub kernels: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

impl DecoderParams {
    /// Delta kernels and zero biases.
    pub fn identity(grid: usize, k: usize) -> Self {
        let cells = grid * grid;
        Self {
            grid,
            k,
            kernels: vec![Kernel::delta(k).taps; cells],
            biases: vec![0.0; cells],
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::Config(format!("decoder kernel size must be odd, got {}", self.k)));
        }
        if self.kernels.len() != self.cells() || self.biases.len() != self.cells() {
            return Err(Error::Dimension(format!(
                "decoder has {} kernels and {} biases for a {}x{} grid",
                self.kernels.len(),
                self.biases.len(),
                self.grid,
                self.grid
            )));
        }
        for (i, k) in self.kernels.iter().enumerate() {
            if k.len() != self.k * self.k {
                return Err(Error::Dimension(format!("decoder kernel {i} has {} taps", k.len())));
            }
            if k.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("decoder kernel {i}"),
                    value: f64::NAN,
                });
            }
        }
        Ok(())
    }

    /// Each cell's kernel is the k×k least-squares Wiener filter of that cell's
    /// PSF (see [`wiener_kernel`]). Missing PSFs get delta kernels.
    pub fn init_wiener(psfs: &[Option<Kernel>], grid: usize, k: usize, nsr: f64) -> Result<Self> {
        if !(nsr > 0.0) {
            return Err(Error::Config(format!("noise-to-signal ratio must be > 0, got {nsr}")));
        }
        if psfs.len() != grid * grid {
            return Err(Error::Dimension(format!("{} PSFs for a {grid}x{grid} grid", psfs.len())));
        }
        let kernels = psfs
            .iter()
            .enumerate()
            .map(|(i, p)| match p {
                Some(p) => wiener_kernel(p, k, nsr),
                None => {
                    log::warn!("decoder cell {i} has no PSF; using a delta kernel");
                    Kernel::delta(k).taps
                }
            })
            .collect();
        Ok(Self {
            grid,
            k,
            kernels,
            biases: vec![0.0; grid * grid],
        })
    }

    fn kernel_structs(&self) -> Vec<Kernel> {
        self.kernels
            .iter()
            .map(|t| Kernel {
                k: self.k,
                taps: t.clone(),
            })
            .collect()
    }

    pub fn decode(&self, img: &SimImage, regions: &Regions) -> Result<SimImage> {
        if regions.grid != self.grid {
            return Err(Error::Dimension(format!(
                "decoder grid {} does not match image regions {}",
                self.grid, regions.grid
            )));
        }
        convolve_regions(img, &self.kernel_structs(), Some(&self.biases), regions)
    }

    /// Gradient of a loss with upstream gradient `upstream` (w.r.t. the decoded
    /// image) over the flattened parameters, and the gradient w.r.t. the input.
    pub fn backward(&self, input: &SimImage, upstream: &SimImage, regions: &Regions) -> (Vec<f64>, SimImage) {
        let mut flat = Vec::with_capacity(self.cells() * (self.k * self.k + 1));
        for cell in 0..self.cells() {
            let (g, gb) = kernel_gradient(input, upstream, regions, cell, self.k, None);
            flat.extend(g);
            flat.push(gb);
        }
        (flat, input_gradient(upstream, &self.kernel_structs(), regions))
    }

    pub fn parameter_count(&self) -> usize {
        self.cells() * (self.k * self.k + 1)
    }

    /// Flattened values: per cell, the kernel taps row-major then the bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (k, b) in self.kernels.iter().zip(&self.biases) {
            out.extend_from_slice(k);
            out.push(*b);
        }
        out
    }

    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::Dimension(format!(
                "{} values for {} decoder parameters",
                values.len(),
                self.parameter_count()
            )));
        }
        let stride = self.k * self.k + 1;
        for (cell, chunk) in values.chunks(stride).enumerate() {
            self.kernels[cell].copy_from_slice(&chunk[..stride - 1]);
            self.biases[cell] = chunk[stride - 1];
        }
        Ok(())
    }

    /// Append the decoder parameters to `set` in flattened order.
    pub fn register(&self, set: &mut ParameterSet) -> Result<()> {
        let stride = self.k * self.k + 1;
        for (i, v) in self.flatten().into_iter().enumerate() {
            let (cell, slot) = (i / stride, i % stride);
            let name = if slot + 1 == stride {
                format!("decoder.{cell}.bias")
            } else {
                format!("decoder.{cell}.k{slot}")
            };
            set.push(Parameter {
                name,
                role: ParamRole::Decoder,
                value: v,
                lower: -DECODER_BOUND,
                upper: DECODER_BOUND,
            })?;
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("decoder serializes")
    }

    pub fn from_json_str(s: &str, path: &Path) -> Result<Self> {
        let d: Self = serde_json::from_str(s).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        d.validate()?;
        Ok(d)
    }
}

/// Least-squares `k × k` restoration filter for `psf`: the finite-support
/// Wiener solution minimising `|g * p - δ|² + nsr |g|²`. Cropping the
/// unconstrained `conj(P) / (|P|² + nsr)` instead loses most of its DC gain once
/// the PSF is a few pixels wide.
pub fn wiener_kernel(psf: &Kernel, k: usize, nsr: f64) -> Vec<f64> {
    let n = (psf.k + k).next_power_of_two();
    let hp = (psf.k / 2) as i64;
    let hk = (k / 2) as i64;
    let wrap = |v: i64| v.rem_euclid(n as i64) as usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
    for r in 0..psf.k {
        for c in 0..psf.k {
            buf[wrap(r as i64 - hp) * n + wrap(c as i64 - hp)] = Complex64::new(psf.taps[r * psf.k + c], 0.0);
        }
    }
    // autocorrelation of the PSF, exact (no wrap) for lags up to k - 1
    fft2(&mut buf, n, false);
    for v in buf.iter_mut() {
        *v = Complex64::new(v.norm_sqr(), 0.0);
    }
    fft2(&mut buf, n, true);
    let scale = 1.0 / (n * n) as f64;
    let acf = |dy: i64, dx: i64| buf[wrap(dy) * n + wrap(dx)].re * scale;
    let offsets: Vec<(i64, i64)> = (0..k * k).map(|i| ((i / k) as i64 - hk, (i % k) as i64 - hk)).collect();
    let a = DMatrix::from_fn(k * k, k * k, |i, j| {
        let (ay, ax) = offsets[i];
        let (by, bx) = offsets[j];
        acf(ay - by, ax - bx) + if i == j { nsr } else { 0.0 }
    });
    let tap = |y: i64, x: i64| {
        if y.abs() <= hp && x.abs() <= hp {
            psf.taps[(y + hp) as usize * psf.k + (x + hp) as usize]
        } else {
            0.0
        }
    };
    let rhs = DVector::from_iterator(k * k, offsets.iter().map(|&(y, x)| tap(-y, -x)));
    // positive definite for nsr > 0
    let g = a.cholesky().expect("nsr > 0 keeps the system positive definite").solve(&rhs);
    g.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::convolve_sv;

    fn gaussian(k: usize, sigma: f64) -> Kernel {
        let h = (k / 2) as f64;
        let mut taps: Vec<f64> = (0..k * k)
            .map(|i| {
                let (y, x) = ((i / k) as f64 - h, (i % k) as f64 - h);
                (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= s);
        Kernel { k, taps }
    }

    #[test]
    fn delta_psf_gives_delta_kernel() {
        let w = wiener_kernel(&Kernel::delta(9), 15, 0.01);
        for (i, v) in w.iter().enumerate() {
            let expect = if i == 7 * 15 + 7 { 1.0 / 1.01 } else { 0.0 };
            assert!((v - expect).abs() < 1e-6, "tap {i}: {v}");
        }
    }

    #[test]
    fn wiener_restores_blurred_edge() {
        let (w, h) = (48, 48);
        let step = SimImage::new(w, h, (0..w * h).map(|i| if i % w < w / 2 { 0.2 } else { 0.8 }).collect()).unwrap();
        let psf = gaussian(11, 1.0);
        let regions = Regions::new(w, h, 1).unwrap();
        let blurred = convolve_sv(&step, std::slice::from_ref(&psf), &regions).unwrap();
        let dec = DecoderParams::init_wiener(&[Some(psf)], 1, 31, 1e-4).unwrap();
        let restored = dec.decode(&blurred, &regions).unwrap();
        let mse = |a: &SimImage| a.data.iter().zip(&step.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        assert!(mse(&restored) * 10.0 < mse(&blurred), "{} vs {}", mse(&restored), mse(&blurred));
    }

    #[test]
    fn broad_psf_keeps_unit_dc_gain() {
        // sigma 3 px: the cropped unconstrained inverse kept about a third of the DC
        let w = wiener_kernel(&gaussian(41, 3.0), 15, 0.01);
        let dc: f64 = w.iter().sum();
        assert!(dc > 0.85 && dc < 1.0, "{dc}");
    }

    #[test]
    fn large_nsr_tends_to_matched_filter() {
        let psf = gaussian(9, 1.5);
        let nsr = 1e8;
        let w = wiener_kernel(&psf, 9, nsr);
        for (a, b) in w.iter().zip(&psf.taps) {
            assert!((a * nsr - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_decoder_and_linearity() {
        let regions = Regions::new(16, 16, 2).unwrap();
        let a = SimImage::new(16, 16, (0..256).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = SimImage::new(16, 16, (0..256).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let id = DecoderParams::identity(2, 5);
        for (x, y) in id.decode(&a, &regions).unwrap().data.iter().zip(&a.data) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut d = DecoderParams::init_wiener(&vec![Some(gaussian(7, 1.0)); 4], 2, 5, 0.05).unwrap();
        d.biases = vec![0.0; 4];
        let sum = SimImage::new(16, 16, a.data.iter().zip(&b.data).map(|(x, y)| 2.0 * x - y).collect()).unwrap();
        let da = d.decode(&a, &regions).unwrap();
        let db = d.decode(&b, &regions).unwrap();
        let ds = d.decode(&sum, &regions).unwrap();
        for i in 0..256 {
            assert!((ds.data[i] - (2.0 * da.data[i] - db.data[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let regions = Regions::new(12, 12, 2).unwrap();
        let x = SimImage::new(12, 12, (0..144).map(|i| ((i * 7 % 13) as f64) / 13.0).collect()).unwrap();
        let t = SimImage::new(12, 12, (0..144).map(|i| ((i * 5 % 11) as f64) / 11.0).collect()).unwrap();
        let mut d = DecoderParams::init_wiener(&vec![Some(gaussian(5, 0.8)); 4], 2, 5, 0.1).unwrap();
        d.biases = vec![0.01, -0.02, 0.03, 0.0];
        let loss = |d: &DecoderParams| {
            let y = d.decode(&x, &regions).unwrap();
            y.data.iter().zip(&t.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        let y = d.decode(&x, &regions).unwrap();
        let up = SimImage::new(12, 12, y.data.iter().zip(&t.data).map(|(a, b)| 2.0 * (a - b)).collect()).unwrap();
        let (g, _) = d.backward(&x, &up, &regions);
        let base = d.flatten();
        for idx in [0, 12, 25, 26 + 13, 3 * 26 + 25] {
            let h = 1e-6;
            let mut p = d.clone();
            let mut v = base.clone();
            v[idx] += h;
            p.unflatten(&v).unwrap();
            let mut m = d.clone();
            v[idx] -= 2.0 * h;
            m.unflatten(&v).unwrap();
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - g[idx]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {idx}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn register_names_and_json_round_trip() {
        let d = DecoderParams::identity(2, 3);
        let mut set = ParameterSet::new();
        d.register(&mut set).unwrap();
        assert_eq!(set.len(), 40);
        assert_eq!(set.get(9).name, "decoder.0.bias");
        assert_eq!(set.get(10).name, "decoder.1.k0");
        let back = DecoderParams::from_json_str(&d.to_json_string(), Path::new("d.json")).unwrap();
        assert_eq!(back, d);
    }
}
