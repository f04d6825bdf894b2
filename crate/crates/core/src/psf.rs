//! Discrete PSFs from traced ray bundles, PSF maps over the image field and PSF
//! similarity.

use std::cell::RefCell;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::LensPrescription;
use crate::math::Real;
use crate::raytrace::{
    launch_rays, media_indices, pupil_grid, trace_launch, trace_nominal, FieldPoint, ImageHit, Launch, LensView,
};
use crate::tolerance::{realize_transforms, SurfaceTransform, TolerancePattern};

pub const DEFAULT_KERNEL: usize = 51;
pub const DEFAULT_PITCH_UM: f64 = 2.0;
pub const DEFAULT_GRID: usize = 8;

/// K×K intensity grid, row-major with rows along image-plane y.
#[derive(Debug, Clone)]
pub struct Psf<T> {
    pub k: usize,
    pub pitch_um: f64,
    pub field: FieldPoint,
    pub wavelength_nm: f64,
    pub pixels: Vec<T>,
    /// No ray reached the window; pixels are all zero.
    pub empty: bool,
}

impl<T: Real> Psf<T> {
    pub fn values(&self) -> Psf<f64> {
        Psf {
            k: self.k,
            pitch_um: self.pitch_um,
            field: self.field,
            wavelength_nm: self.wavelength_nm,
            pixels: self.pixels.iter().map(|p| p.val()).collect(),
            empty: self.empty,
        }
    }
}

impl Psf<f64> {
    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }

    pub fn peak(&self) -> f64 {
        self.pixels.iter().cloned().fold(0.0, f64::max)
    }
}

/// How densely to sample and where to put the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub kernel: usize,
    pub pitch_um: f64,
    /// Pupil grid is `pupil_samples × pupil_samples` masked to the unit disk.
    pub pupil_samples: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            kernel: DEFAULT_KERNEL,
            pitch_um: DEFAULT_PITCH_UM,
            pupil_samples: 64,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("PSF size must be odd, got {}", self.kernel)));
        }
        if !(self.pitch_um > 0.0) {
            return Err(Error::Config(format!("pixel pitch must be > 0, got {}", self.pitch_um)));
        }
        if self.pupil_samples == 0 {
            return Err(Error::Config("pupil sampling must be >= 1".into()));
        }
        Ok(())
    }
}

/// Bilinear splat of alive hits into a K×K window centred on `center` (mm),
/// normalized to unit sum.
pub fn splat<T: Real>(hits: &[ImageHit<T>], center: &(T, T), k: usize, pitch_um: f64) -> (Vec<T>, bool) {
    let mut px = vec![T::zero(); k * k];
    let mut total = T::zero();
    let half = (k / 2) as f64;
    let scale = 1e3 / pitch_um;
    for h in hits.iter().filter(|h| h.alive) {
        let u = (h.x.clone() - center.0.clone()) * scale + half;
        let v = (h.y.clone() - center.1.clone()) * scale + half;
        let (uf, vf) = (u.val().floor(), v.val().floor());
        if !(uf >= -1.0 && uf < k as f64 && vf >= -1.0 && vf < k as f64) {
            continue;
        }
        let fu = u - uf;
        let fv = v - vf;
        let (j0, i0) = (uf as i64, vf as i64);
        let wu = [T::cst(1.0) - fu.clone(), fu];
        let wv = [T::cst(1.0) - fv.clone(), fv];
        for (di, wy) in wv.iter().enumerate() {
            let i = i0 + di as i64;
            if i < 0 || i >= k as i64 {
                continue;
            }
            for (dj, wx) in wu.iter().enumerate() {
                let j = j0 + dj as i64;
                if j < 0 || j >= k as i64 {
                    continue;
                }
                let w = wy.clone() * wx.clone();
                let idx = i as usize * k + j as usize;
                px[idx] = px[idx].clone() + w.clone();
                total = total + w;
            }
        }
    }
    if !(total.val() > 0.0) {
        return (vec![T::zero(); k * k], true);
    }
    let inv = T::cst(1.0) / total;
    let px = px
        .into_iter()
        .map(|p| if p.val() == 0.0 && p.is_constant() { p } else { p * inv.clone() })
        .collect();
    (px, false)
}

/// Mean distance of alive hits from their centroid, µm; `None` without alive rays.
pub fn mean_radial_deviation<T: Real>(hits: &[ImageHit<T>]) -> Option<T> {
    let alive: Vec<&ImageHit<T>> = hits.iter().filter(|h| h.alive).collect();
    if alive.is_empty() {
        return None;
    }
    let n = alive.len() as f64;
    let mut cx = T::zero();
    let mut cy = T::zero();
    for h in &alive {
        cx = cx + h.x.clone();
        cy = cy + h.y.clone();
    }
    let cx = cx / n;
    let cy = cy / n;
    let mut sum = T::zero();
    for h in &alive {
        let d = ((h.x.clone() - cx.clone()).sq() + (h.y.clone() - cy.clone()).sq()).sqrt();
        sum = sum + d;
    }
    Some(sum * (1e3 / n))
}

/// Field direction of cell `(row, col)` of a `grid × grid` map. The image diagonal
/// spans the lens's maximum field; image coordinates are inverted with respect to
/// object coordinates.
pub fn cell_field(lens: &LensPrescription, grid: usize, row: usize, col: usize) -> FieldPoint {
    let t = lens.max_field().to_radians().tan() / std::f64::consts::SQRT_2;
    let n = |i: usize| 2.0 * (i as f64 + 0.5) / grid as f64 - 1.0;
    FieldPoint {
        x_deg: (-n(col) * t).atan().to_degrees(),
        y_deg: (-n(row) * t).atan().to_degrees(),
    }
}

/// Launches and PSF window centres for every cell of a map, computed from the
/// design geometry (zero pattern) of the current parameters. Shared by every
/// pattern rendered with the same parameters.
#[derive(Debug, Clone)]
pub struct MapGeometry<T> {
    pub grid: usize,
    pub settings: RenderSettings,
    pub wavelengths: Vec<f64>,
    pub fields: Vec<FieldPoint>,
    pub launches: Vec<Launch<T>>,
    /// Zero-pattern chief-ray hit at the reference wavelength, mm.
    pub centers: Vec<(T, T)>,
    indices: Vec<Vec<f64>>,
}

impl<T: Real> MapGeometry<T> {
    pub fn new(lens: &LensPrescription, view: &LensView<T>, grid: usize, settings: RenderSettings) -> Result<Self> {
        settings.validate()?;
        if grid == 0 {
            return Err(Error::Config("PSF grid must be >= 1".into()));
        }
        let pupil = pupil_grid(settings.pupil_samples);
        let ref_idx = media_indices(lens, lens.reference_wavelength())?;
        let mut fields = Vec::new();
        let mut launches = Vec::new();
        let mut centers = Vec::new();
        for row in 0..grid {
            for col in 0..grid {
                let field = cell_field(lens, grid, row, col);
                let launch = launch_rays(lens, view, field, &pupil)?;
                let chief = trace_nominal(launch.chief_ray(lens.reference_wavelength()), view, &ref_idx);
                if !chief.alive {
                    return Err(Error::Numerical(format!(
                        "chief ray of field ({:.3}, {:.3}) deg is vignetted in the design",
                        field.x_deg, field.y_deg
                    )));
                }
                fields.push(field);
                launches.push(launch);
                centers.push((chief.x, chief.y));
            }
        }
        let indices = lens
            .wavelengths
            .iter()
            .map(|&w| media_indices(lens, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            settings,
            wavelengths: lens.wavelengths.clone(),
            fields,
            launches,
            centers,
            indices,
        })
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    /// Trace and splat one cell under `transforms`.
    pub fn render_cell(&self, cell: usize, view: &LensView<T>, transforms: &[SurfaceTransform]) -> CellRender<T> {
        let s = &self.settings;
        let mut psfs = Vec::with_capacity(self.wavelengths.len());
        let mut spots = Vec::with_capacity(self.wavelengths.len());
        for (w, &wl) in self.wavelengths.iter().enumerate() {
            let hits = trace_launch(&self.launches[cell], view, transforms, &self.indices[w], wl);
            let (pixels, empty) = splat(&hits, &self.centers[cell], s.kernel, s.pitch_um);
            spots.push(mean_radial_deviation(&hits));
            psfs.push(Psf {
                k: s.kernel,
                pitch_um: s.pitch_um,
                field: self.fields[cell],
                wavelength_nm: wl,
                pixels,
                empty,
            });
        }
        CellRender { psfs, spots }
    }
}

/// PSFs of one cell per wavelength together with the per-wavelength spot statistic
/// of the same rays.
#[derive(Debug, Clone)]
pub struct CellRender<T> {
    pub psfs: Vec<Psf<T>>,
    /// Mean radial deviation in µm per wavelength; `None` when every ray died.
    pub spots: Vec<Option<T>>,
}

#[derive(Debug, Clone)]
pub struct MapCell<T> {
    pub field: FieldPoint,
    pub pattern_id: Option<usize>,
    /// One PSF per wavelength.
    pub psfs: Vec<Psf<T>>,
    pub spots: Vec<Option<T>>,
}

/// G×G grid of PSFs covering the image field; cells are row-major.
#[derive(Debug, Clone)]
pub struct PsfMap<T> {
    pub grid: usize,
    pub kernel: usize,
    pub pitch_um: f64,
    pub wavelengths: Vec<f64>,
    pub cells: Vec<MapCell<T>>,
}

impl<T: Real> PsfMap<T> {
    /// Wavelength-averaged kernel per cell for grayscale imaging, over non-empty
    /// PSFs. Cells whose PSFs are all empty yield `None`.
    pub fn gray_kernels(&self) -> Vec<Option<Vec<T>>> {
        self.cells
            .iter()
            .map(|c| {
                let live: Vec<&Psf<T>> = c.psfs.iter().filter(|p| !p.empty).collect();
                if live.is_empty() {
                    return None;
                }
                let w = 1.0 / live.len() as f64;
                let mut k = vec![T::zero(); self.kernel * self.kernel];
                for p in live {
                    for (acc, v) in k.iter_mut().zip(&p.pixels) {
                        if !(v.val() == 0.0 && v.is_constant()) {
                            *acc = acc.clone() + v.clone() * w;
                        }
                    }
                }
                Some(k)
            })
            .collect()
    }

    pub fn empty_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.psfs.iter().all(|p| p.empty)).count()
    }

    pub fn values(&self) -> PsfMap<f64> {
        PsfMap {
            grid: self.grid,
            kernel: self.kernel,
            pitch_um: self.pitch_um,
            wavelengths: self.wavelengths.clone(),
            cells: self
                .cells
                .iter()
                .map(|c| MapCell {
                    field: c.field,
                    pattern_id: c.pattern_id,
                    psfs: c.psfs.iter().map(Psf::values).collect(),
                    spots: c.spots.iter().map(|s| s.as_ref().map(|v| v.val())).collect(),
                })
                .collect(),
        }
    }
}

/// Which patterns a map is rendered under.
#[derive(Debug, Clone, Copy)]
pub enum MapPatterns<'a> {
    /// Every cell under the same pattern.
    Single(&'a TolerancePattern),
    /// Pattern `i` renders cell `i`, row-major; needs one pattern per cell.
    Stitched(&'a [TolerancePattern]),
}

/// Render a full PSF map.
pub fn assemble_map<T: Real>(
    lens: &LensPrescription,
    view: &LensView<T>,
    geometry: &MapGeometry<T>,
    patterns: MapPatterns<'_>,
) -> Result<PsfMap<T>> {
    let cells = geometry.cells();
    let per_cell: Vec<(Option<usize>, Vec<SurfaceTransform>)> = match patterns {
        MapPatterns::Single(p) => {
            let t = realize_transforms(p, lens)?;
            (0..cells).map(|_| (None, t.clone())).collect()
        }
        MapPatterns::Stitched(ps) => {
            if ps.len() != cells {
                return Err(Error::Dimension(format!(
                    "stitched map needs one pattern per cell: {} patterns for {} cells",
                    ps.len(),
                    cells
                )));
            }
            ps.iter()
                .enumerate()
                .map(|(i, p)| Ok((Some(i), realize_transforms(p, lens)?)))
                .collect::<Result<_>>()?
        }
    };
    let rendered: Vec<MapCell<T>> = per_cell
        .par_iter()
        .enumerate()
        .map(|(i, (id, t))| {
            let r = geometry.render_cell(i, view, t);
            MapCell {
                field: geometry.fields[i],
                pattern_id: *id,
                psfs: r.psfs,
                spots: r.spots,
            }
        })
        .collect();
    Ok(PsfMap {
        grid: geometry.grid,
        kernel: geometry.settings.kernel,
        pitch_um: geometry.settings.pitch_um,
        wavelengths: geometry.wavelengths.clone(),
        cells: rendered,
    })
}

/// Single PSF of the prescription under `pattern`.
pub fn render_psf(
    lens: &LensPrescription,
    pattern: &TolerancePattern,
    field: FieldPoint,
    wavelength_nm: f64,
    settings: RenderSettings,
) -> Result<Psf<f64>> {
    settings.validate()?;
    let view = LensView::<f64>::plain(lens);
    let transforms = realize_transforms(pattern, lens)?;
    let launch = launch_rays(lens, &view, field, &pupil_grid(settings.pupil_samples))?;
    let ref_idx = media_indices(lens, lens.reference_wavelength())?;
    let chief = trace_nominal(launch.chief_ray(lens.reference_wavelength()), &view, &ref_idx);
    if !chief.alive {
        return Err(Error::Numerical("chief ray vignetted in the design".into()));
    }
    let idx = media_indices(lens, wavelength_nm)?;
    let hits = trace_launch(&launch, &view, &transforms, &idx, wavelength_nm);
    let (pixels, empty) = splat(&hits, &(chief.x, chief.y), settings.kernel, settings.pitch_um);
    Ok(Psf {
        k: settings.kernel,
        pitch_um: settings.pitch_um,
        field,
        wavelength_nm,
        pixels,
        empty,
    })
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Forward 2-D FFT of an `n × n` buffer in place.
pub(crate) fn fft2(buf: &mut [Complex64], n: usize, inverse: bool) {
    let (f, i) = plans(n);
    let plan = if inverse { i } else { f };
    for row in buf.chunks_mut(n) {
        plan.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..n {
        for r in 0..n {
            col[r] = buf[r * n + c];
        }
        plan.process(&mut col);
        for r in 0..n {
            buf[r * n + c] = col[r];
        }
    }
}

/// Lag `(dy, dx)` in `[-K/2, K/2]²` maximising `Σ_p a(p) b(p + lag)`.
fn best_lag(a: &[f64], b: &[f64], k: usize) -> (i64, i64) {
    let n = (2 * k).next_power_of_two();
    let load = |src: &[f64]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
        for r in 0..k {
            for c in 0..k {
                buf[r * n + c] = Complex64::new(src[r * k + c], 0.0);
            }
        }
        fft2(&mut buf, n, false);
        buf
    };
    let fa = load(a);
    let mut fb = load(b);
    for (x, y) in fb.iter_mut().zip(&fa) {
        *x *= y.conj();
    }
    fft2(&mut fb, n, true);
    let h = (k / 2) as i64;
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for dy in -h..=h {
        for dx in -h..=h {
            let r = dy.rem_euclid(n as i64) as usize;
            let c = dx.rem_euclid(n as i64) as usize;
            let v = fb[r * n + c].re;
            // prefer the smallest lag on ties so identical inputs pick lag 0
            let tie_break = (dy.abs() + dx.abs()) as f64 * 1e-15 * v.abs();
            if v - tie_break > best.0 {
                best = (v - tie_break, (dy, dx));
            }
        }
    }
    best.1
}

fn correlation_at<T: Real>(a: &[T], b: &[T], k: usize, lag: (i64, i64)) -> T {
    let mut s = T::zero();
    for r in 0..k as i64 {
        let rb = r + lag.0;
        if rb < 0 || rb >= k as i64 {
            continue;
        }
        for c in 0..k as i64 {
            let cb = c + lag.1;
            if cb < 0 || cb >= k as i64 {
                continue;
            }
            let x = &a[(r * k as i64 + c) as usize];
            if x.val() == 0.0 {
                continue;
            }
            let y = &b[(rb * k as i64 + cb) as usize];
            if y.val() == 0.0 {
                continue;
            }
            s = s + x.clone() * y.clone();
        }
    }
    s
}

fn l2<T: Real>(a: &[T]) -> T {
    let mut s = T::zero();
    for x in a.iter().filter(|x| x.val() != 0.0) {
        s = s + x.sq();
    }
    s.sqrt()
}

/// Maximum over integer lags within ±K/2 of the cross-correlation of the two PSFs,
/// each scaled to unit L2 norm. Empty PSFs score 0; bitwise-identical PSFs score
/// exactly 1.
pub fn psf_similarity<T: Real>(a: &Psf<T>, b: &Psf<T>) -> Result<T> {
    if a.k != b.k {
        return Err(Error::Dimension(format!("PSF sizes differ: {} vs {}", a.k, b.k)));
    }
    if a.empty || b.empty {
        return Ok(T::zero());
    }
    if a.pixels.iter().zip(&b.pixels).all(|(x, y)| x.val().to_bits() == y.val().to_bits()) {
        return Ok(T::cst(1.0));
    }
    let av: Vec<f64> = a.pixels.iter().map(|p| p.val()).collect();
    let bv: Vec<f64> = b.pixels.iter().map(|p| p.val()).collect();
    let lag = best_lag(&av, &bv, a.k);
    let s = correlation_at(&a.pixels, &b.pixels, a.k, lag) / (l2(&a.pixels) * l2(&b.pixels));
    Ok(if s.val() > 1.0 { T::cst(1.0) } else { s })
}

/// Cosine similarity of the vectorised PSFs, no shift search.
pub fn cosine_similarity(a: &Psf<f64>, b: &Psf<f64>) -> f64 {
    if a.empty || b.empty {
        return 0.0;
    }
    if a.pixels == b.pixels {
        return 1.0;
    }
    let dot: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| x * y).sum();
    (dot / (l2(&a.pixels) * l2(&b.pixels))).min(1.0)
}
