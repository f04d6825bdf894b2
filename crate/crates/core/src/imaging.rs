//! Grayscale images, file I/O, region-blended spatially-variant convolution and
//! sensor noise.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::Real;

/// Single-channel image with values nominally in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SimImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, o: &SimImage) -> Result<()> {
        if self.width != o.width || self.height != o.height {
            return Err(Error::Dimension(format!(
                "image sizes differ: {}x{} vs {}x{}",
                self.width, self.height, o.width, o.height
            )));
        }
        Ok(())
    }

    pub fn clipped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Load a PNG or PGM/PPM file; colour images are converted to luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })?;
        let g = img.to_luma32f();
        let (w, h) = g.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: g.into_raw().into_iter().map(f64::from).collect(),
        })
    }

    /// Write as 8-bit PNG or 16-bit PGM depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let bytes = if ext == "pgm" {
            self.to_pgm16(1.0)
        } else {
            self.to_png8().map_err(|message| Error::Image {
                path: path.to_path_buf(),
                message,
            })?
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// 8-bit grayscale PNG, values clipped to `[0, 1]`.
    pub fn to_png8(&self) -> std::result::Result<Vec<u8>, String> {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        )
        .expect("buffer size matches");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| e.to_string())?;
        Ok(out.into_inner())
    }

    /// Binary 16-bit PGM with `scale` mapped to 65535.
    pub fn to_pgm16(&self, scale: f64) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for v in &self.data {
            let q = if scale > 0.0 { (v / scale).clamp(0.0, 1.0) } else { 0.0 };
            out.extend_from_slice(&((q * 65535.0).round() as u16).to_be_bytes());
        }
        out
    }

    /// Resample to `width × height` with a triangle filter.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("buffer size matches");
        let r = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        Self {
            width,
            height,
            data: r.into_raw().into_iter().map(f64::from).collect(),
        }
    }
}

/// Image files of a directory (PNG, PGM, PPM), sorted by name.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
                Some("png" | "pgm" | "ppm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG/PGM images in {}", dir.display())));
    }
    Ok(files)
}

/// Load every corpus image resized to `size × size`.
pub fn load_corpus(dir: &Path, size: usize) -> Result<Vec<(String, SimImage)>> {
    list_corpus(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, SimImage::load(&p)?.resized(size, size)))
        })
        .collect()
}

/// Directory of the bundled sample corpus.
pub fn bundled_corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

/// Add i.i.d. Gaussian noise of standard deviation `sigma` and clip to `[0, 1]`.
pub fn add_noise<R: Rng + ?Sized>(img: &SimImage, sigma: f64, rng: &mut R) -> SimImage {
    if sigma == 0.0 {
        return img.clone().clipped();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let data = img.data.iter().map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect();
    SimImage { data, ..*img }
}

/// Index into `0..n` after symmetric reflection (edge sample repeated).
#[inline]
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Bilinear cross-fade of a `grid × grid` partition of an image: every pixel
/// blends the kernels of the up to four nearest region centres.
#[derive(Debug, Clone)]
pub struct Regions {
    pub grid: usize,
    pub width: usize,
    pub height: usize,
    /// For each region index along y: rows with non-zero weight.
    rows: Vec<Vec<(usize, f64)>>,
    cols: Vec<Vec<(usize, f64)>>,
}

fn axis_weights(n: usize, grid: usize) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); grid];
    if grid == 1 {
        out[0] = (0..n).map(|i| (i, 1.0)).collect();
        return out;
    }
    let size = (n / grid) as f64;
    for i in 0..n {
        let t = ((i as f64 + 0.5) / size - 0.5).clamp(0.0, (grid - 1) as f64);
        let i0 = (t.floor() as usize).min(grid - 2);
        let f = t - i0 as f64;
        if 1.0 - f > 0.0 {
            out[i0].push((i, 1.0 - f));
        }
        if f > 0.0 {
            out[i0 + 1].push((i, f));
        }
    }
    out
}

impl Regions {
    pub fn new(width: usize, height: usize, grid: usize) -> Result<Self> {
        if grid == 0 || width % grid != 0 || height % grid != 0 {
            return Err(Error::Dimension(format!(
                "{width}x{height} image does not split into {grid}x{grid} regions"
            )));
        }
        Ok(Self {
            grid,
            width,
            height,
            rows: axis_weights(height, grid),
            cols: axis_weights(width, grid),
        })
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Weight of region `cell` at every pixel.
    pub fn weight_map(&self, cell: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.width * self.height];
        let (ci, cj) = (cell / self.grid, cell % self.grid);
        for &(r, wy) in &self.rows[ci] {
            for &(c, wx) in &self.cols[cj] {
                w[r * self.width + c] = wy * wx;
            }
        }
        w
    }

    fn check(&self, img: &SimImage) -> Result<()> {
        if img.width != self.width || img.height != self.height {
            return Err(Error::Dimension(format!(
                "image is {}x{}, regions were built for {}x{}",
                img.width, img.height, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Reflection-padded copy of `img` with `pad` pixels on every side.
fn padded(img: &SimImage, pad: usize) -> (Vec<f64>, usize) {
    let pw = img.width + 2 * pad;
    let ph = img.height + 2 * pad;
    let mut out = vec![0.0; pw * ph];
    for r in 0..ph {
        let sr = reflect(r as i64 - pad as i64, img.height);
        for c in 0..pw {
            let sc = reflect(c as i64 - pad as i64, img.width);
            out[r * pw + c] = img.data[sr * img.width + sc];
        }
    }
    (out, pw)
}

/// Square odd-sized kernel, row-major; tap `(r, c)` is offset `(r - k/2, c - k/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub k: usize,
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn delta(k: usize) -> Self {
        let mut taps = vec![0.0; k * k];
        taps[(k / 2) * k + k / 2] = 1.0;
        Self { k, taps }
    }

    fn nonzero(&self) -> Vec<(i64, i64, f64)> {
        let h = (self.k / 2) as i64;
        self.taps
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| ((i / self.k) as i64 - h, (i % self.k) as i64 - h, v))
            .collect()
    }
}

/// `out(p) = Σ_r w_r(p) (Σ_off k_r(off) x(p - off) + bias_r)` with reflection padding.
pub fn convolve_regions(img: &SimImage, kernels: &[Kernel], biases: Option<&[f64]>, regions: &Regions) -> Result<SimImage> {
    regions.check(img)?;
    if kernels.len() != regions.cells() {
        return Err(Error::Dimension(format!(
            "{} kernels for {} regions",
            kernels.len(),
            regions.cells()
        )));
    }
    let pad = kernels.iter().map(|k| k.k / 2).max().unwrap_or(0);
    let (p, pw) = padded(img, pad);
    let mut out = vec![0.0; img.width * img.height];
    for (cell, kern) in kernels.iter().enumerate() {
        let taps = kern.nonzero();
        let bias = biases.map(|b| b[cell]).unwrap_or(0.0);
        let (ci, cj) = (cell / regions.grid, cell % regions.grid);
        for &(r, wy) in &regions.rows[ci] {
            for &(c, wx) in &regions.cols[cj] {
                let mut s = bias;
                let base = (r + pad) as i64 * pw as i64 + (c + pad) as i64;
                for &(dy, dx, v) in &taps {
                    s += v * p[(base - dy * pw as i64 - dx) as usize];
                }
                out[r * img.width + c] += wy * wx * s;
            }
        }
    }
    SimImage::new(img.width, img.height, out)
}

/// [`convolve_regions`] over any [`Real`], for images given as `width × height`
/// row-major slices and kernels of common size `k`. Much slower than the `f64`
/// path; finite-difference oracles use it in extended precision.
pub fn convolve_regions_in<T: Real>(
    img: &[T],
    width: usize,
    kernels: &[Vec<T>],
    k: usize,
    biases: Option<&[f64]>,
    regions: &Regions,
) -> Result<Vec<T>> {
    let height = img.len() / width.max(1);
    if width != regions.width || height != regions.height || img.len() != width * height {
        return Err(Error::Dimension(format!(
            "image is {width}x{height}, regions were built for {}x{}",
            regions.width, regions.height
        )));
    }
    if kernels.len() != regions.cells() || kernels.iter().any(|t| t.len() != k * k) {
        return Err(Error::Dimension(format!(
            "{} kernels of size {k} for {} regions",
            kernels.len(),
            regions.cells()
        )));
    }
    let pad = k / 2;
    let pw = width + 2 * pad;
    let padded: Vec<T> = (0..(height + 2 * pad) * pw)
        .map(|i| {
            let sr = reflect((i / pw) as i64 - pad as i64, height);
            let sc = reflect((i % pw) as i64 - pad as i64, width);
            img[sr * width + sc].clone()
        })
        .collect();
    let mut out = vec![T::zero(); width * height];
    for (cell, kern) in kernels.iter().enumerate() {
        let taps: Vec<(i64, i64, &T)> = kern
            .iter()
            .enumerate()
            .filter(|(_, v)| !(v.val() == 0.0 && v.is_constant()))
            .map(|(i, v)| ((i / k) as i64 - pad as i64, (i % k) as i64 - pad as i64, v))
            .collect();
        let bias = biases.map(|b| b[cell]).unwrap_or(0.0);
        let (ci, cj) = (cell / regions.grid, cell % regions.grid);
        for &(r, wy) in &regions.rows[ci] {
            for &(c, wx) in &regions.cols[cj] {
                let mut s = T::cst(bias);
                let base = (r + pad) as i64 * pw as i64 + (c + pad) as i64;
                for &(dy, dx, v) in &taps {
                    s = s + v.clone() * padded[(base - dy * pw as i64 - dx) as usize].clone();
                }
                let o = &mut out[r * width + c];
                *o = o.clone() + s * (wy * wx);
            }
        }
    }
    Ok(out)
}

/// Spatially-variant convolution with one PSF kernel per region.
pub fn convolve_sv(img: &SimImage, kernels: &[Kernel], regions: &Regions) -> Result<SimImage> {
    convolve_regions(img, kernels, None, regions)
}

/// `∂L/∂k_cell(off) = Σ_p g(p) w_cell(p) x(p - off)` for the requested tap indices
/// (all taps when `taps` is `None`), plus `∂L/∂bias_cell = Σ_p g(p) w_cell(p)`.
pub fn kernel_gradient(
    img: &SimImage,
    upstream: &SimImage,
    regions: &Regions,
    cell: usize,
    k: usize,
    taps: Option<&[usize]>,
) -> (Vec<f64>, f64) {
    let pad = k / 2;
    let (p, pw) = padded(img, pad);
    let all: Vec<usize>;
    let wanted = match taps {
        Some(t) => t,
        None => {
            all = (0..k * k).collect();
            &all
        }
    };
    let h = pad as i64;
    let offs: Vec<i64> = wanted
        .iter()
        .map(|&i| (((i / k) as i64 - h) * pw as i64) + ((i % k) as i64 - h))
        .collect();
    let mut grad = vec![0.0; wanted.len()];
    let mut gbias = 0.0;
    let (ci, cj) = (cell / regions.grid, cell % regions.grid);
    for &(r, wy) in &regions.rows[ci] {
        for &(c, wx) in &regions.cols[cj] {
            let gw = upstream.data[r * img.width + c] * wy * wx;
            if gw == 0.0 {
                continue;
            }
            gbias += gw;
            let base = (r + pad) as i64 * pw as i64 + (c + pad) as i64;
            for (g, &o) in grad.iter_mut().zip(&offs) {
                *g += gw * p[(base - o) as usize];
            }
        }
    }
    let mut full = vec![0.0; k * k];
    match taps {
        Some(t) => {
            for (&i, g) in t.iter().zip(&grad) {
                full[i] = *g;
            }
        }
        None => full = grad,
    }
    (full, gbias)
}

/// Adjoint of [`convolve_regions`] with respect to its input image.
pub fn input_gradient(upstream: &SimImage, kernels: &[Kernel], regions: &Regions) -> SimImage {
    let (w, h) = (regions.width, regions.height);
    let pad = kernels.iter().map(|k| k.k / 2).max().unwrap_or(0);
    let pw = w + 2 * pad;
    let ph = h + 2 * pad;
    let mut gp = vec![0.0; pw * ph];
    for (cell, kern) in kernels.iter().enumerate() {
        let taps = kern.nonzero();
        let (ci, cj) = (cell / regions.grid, cell % regions.grid);
        for &(r, wy) in &regions.rows[ci] {
            for &(c, wx) in &regions.cols[cj] {
                let gw = upstream.data[r * w + c] * wy * wx;
                if gw == 0.0 {
                    continue;
                }
                let base = (r + pad) as i64 * pw as i64 + (c + pad) as i64;
                for &(dy, dx, v) in &taps {
                    gp[(base - dy * pw as i64 - dx) as usize] += v * gw;
                }
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..ph {
        let sr = reflect(r as i64 - pad as i64, h);
        for c in 0..pw {
            let g = gp[r * pw + c];
            if g != 0.0 {
                out[sr * w + reflect(c as i64 - pad as i64, w)] += g;
            }
        }
    }
    SimImage {
        width: w,
        height: h,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> SimImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SimImage::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn random_kernel(k: usize, seed: u64) -> Kernel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Kernel {
            k,
            taps: (0..k * k).map(|_| rng.random::<f64>()).collect(),
        }
    }

    #[test]
    fn delta_kernels_are_identity() {
        let img = noise_image(24, 16, 1);
        let regions = Regions::new(24, 16, 4).unwrap();
        let out = convolve_sv(&img, &vec![Kernel::delta(7); 16], &regions).unwrap();
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_region_is_plain_convolution() {
        let img = noise_image(13, 11, 2);
        let k = random_kernel(5, 3);
        let out = convolve_sv(&img, std::slice::from_ref(&k), &Regions::new(13, 11, 1).unwrap()).unwrap();
        for r in 0..11i64 {
            for c in 0..13i64 {
                let mut s = 0.0;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let v = k.taps[((dy + 2) * 5 + dx + 2) as usize];
                        s += v * img.at(reflect(r - dy, 11), reflect(c - dx, 13));
                    }
                }
                assert!((out.at(r as usize, c as usize) - s).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn region_weights_partition_unity() {
        let regions = Regions::new(32, 32, 8).unwrap();
        let mut total = vec![0.0; 32 * 32];
        for cell in 0..64 {
            for (t, w) in total.iter_mut().zip(regions.weight_map(cell)) {
                *t += w;
            }
        }
        assert!(total.iter().all(|t| (t - 1.0).abs() < 1e-15));
    }

    #[test]
    fn indivisible_size_rejected() {
        assert!(Regions::new(30, 32, 8).is_err());
    }

    #[test]
    fn normalized_blur_preserves_mean() {
        let img = noise_image(64, 64, 4);
        let k = Kernel {
            k: 9,
            taps: vec![1.0 / 81.0; 81],
        };
        let out = convolve_sv(&img, &vec![k; 16], &Regions::new(64, 64, 4).unwrap()).unwrap();
        assert!((out.mean() - img.mean()).abs() / img.mean() < 0.005);
    }

    #[test]
    fn adjoints_satisfy_dot_product_identity() {
        // <A x, g> = <x, A^T g> for the image adjoint, and the kernel gradient is the
        // derivative of <A x, g> in each tap
        let (w, h) = (16, 12);
        let regions = Regions::new(w, h, 2).unwrap();
        let x = noise_image(w, h, 5);
        let g = noise_image(w, h, 6);
        let kernels: Vec<Kernel> = (0..4).map(|i| random_kernel(5, 10 + i)).collect();
        let ax = convolve_sv(&x, &kernels, &regions).unwrap();
        let lhs: f64 = ax.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let atg = input_gradient(&g, &kernels, &regions);
        let rhs: f64 = x.data.iter().zip(&atg.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs());

        let (kg, _) = kernel_gradient(&x, &g, &regions, 3, 5, None);
        let mut sum = 0.0;
        for (tap, grad) in kg.iter().enumerate() {
            sum += grad * kernels[3].taps[tap];
        }
        // Σ_tap k·∂/∂k of a function linear in k equals the cell's contribution
        let mut only = vec![Kernel { k: 5, taps: vec![0.0; 25] }; 4];
        only[3] = kernels[3].clone();
        let part = convolve_sv(&x, &only, &regions).unwrap();
        let direct: f64 = part.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((sum - direct).abs() < 1e-10 * direct.abs());

        let subset = [0usize, 7, 24];
        let (ks, _) = kernel_gradient(&x, &g, &regions, 3, 5, Some(&subset));
        for &i in &subset {
            assert!((ks[i] - kg[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let img = SimImage::filled(200, 200, 0.5);
        let a = add_noise(&img, 0.01, &mut ChaCha8Rng::seed_from_u64(9));
        let b = add_noise(&img, 0.01, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let n = a.data.len() as f64;
        let diffs: Vec<f64> = a.data.iter().map(|v| v - 0.5).collect();
        let m = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 0.01).abs() < 0.0003, "{sd}");
        assert_eq!(add_noise(&img, 0.0, &mut ChaCha8Rng::seed_from_u64(1)), img);
    }

    #[test]
    fn reflection_indexing() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = SimImage::new(3, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let p = dir.path().join("a.pgm");
        img.save(&p).unwrap();
        let back = SimImage::load(&p).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-4);
        }
        let q = dir.path().join("a.png");
        img.save(&q).unwrap();
        let back = SimImage::load(&q).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-6);
        }
    }
}
