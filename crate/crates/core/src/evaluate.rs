//! Monte Carlo robustness evaluation: metric distributions over random tolerance
//! patterns, yield thresholds and PSF stability.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::imaging::{add_noise, convolve_sv, Kernel, Regions, SimImage};
use crate::lens::LensPrescription;
use crate::psf::{assemble_map, cosine_similarity, MapGeometry, MapPatterns, PsfMap, RenderSettings, DEFAULT_GRID};
use crate::raytrace::LensView;
use crate::rng::stream;
use crate::tolerance::{sample_pattern, TolerancePattern, ToleranceRange};

/// Confidence levels of the yield table, percent.
pub const CONFIDENCE_PCT: [u32; 4] = [90, 70, 50, 10];

/// `10 log10(1 / MSE)` for unit dynamic range; `+∞` for identical images.
pub fn psnr(a: &SimImage, b: &SimImage) -> Result<f64> {
    a.same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over every 8×8 window (stride 1, uniform weights, population
/// statistics). Images smaller than a window use one window over the whole image.
pub fn ssim(a: &SimImage, b: &SimImage) -> Result<f64> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let n = (ww * wh) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - wh {
        for c in 0..=w - ww {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in r..r + wh {
                let row = i * w;
                for j in c..c + ww {
                    let (x, y) = (a.data[row + j], b.data[row + j]);
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cxy = sxy / n - mx * my;
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub trial: u64,
    /// Corpus-averaged PSNR, dB; `+∞` only if every image restored exactly.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean radial spot deviation over cells and wavelengths, µm.
    pub mean_spot: f64,
    pub mean_psf_similarity: f64,
    /// Every PSF of the trial was empty or the pattern could not be realized.
    pub failed: bool,
}

impl MetricSample {
    pub fn psnr_saturated(&self) -> bool {
        self.psnr == f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YieldThreshold {
    /// Confidence `p` in percent.
    pub confidence_pct: u32,
    /// Inverse empirical CDF of PSNR at `1 - p` (type-1 order statistic): at least
    /// a fraction `p` of the trials reach it.
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    pub seed: u64,
    pub ranges: ToleranceRange,
    pub samples: Vec<MetricSample>,
    pub thresholds: Vec<YieldThreshold>,
    pub psnr_histogram: Histogram,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_spot: f64,
    pub mean_psf_similarity: f64,
    /// Spot of the as-designed lens, µm, for comparison with the Monte Carlo mean.
    pub design_spot: f64,
    pub failures: usize,
}

/// Evaluation scale and rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub image_size: usize,
    pub grid: usize,
    pub render: RenderSettings,
    pub noise_sigma: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            image_size: 512,
            grid: DEFAULT_GRID,
            render: RenderSettings {
                pitch_um: 5.0,
                pupil_samples: 16,
                ..Default::default()
            },
            noise_sigma: 0.01,
        }
    }
}

/// Type-1 empirical quantile threshold: the `⌈n(1-p)⌉`-th smallest value, so that
/// at least a fraction `p` of the samples is at or above it.
pub fn yield_threshold(sorted: &[f64], confidence_pct: u32) -> f64 {
    let n = sorted.len();
    let rank = (n * (100 - confidence_pct as usize)).div_ceil(100).max(1);
    sorted[rank.min(n) - 1]
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Thresholds at every confidence of [`CONFIDENCE_PCT`].
pub fn thresholds(samples: &[MetricSample]) -> Vec<YieldThreshold> {
    if samples.is_empty() {
        return Vec::new();
    }
    let p = sorted(samples.iter().map(|s| s.psnr));
    let s = sorted(samples.iter().map(|s| s.ssim));
    CONFIDENCE_PCT
        .iter()
        .map(|&c| YieldThreshold {
            confidence_pct: c,
            psnr: yield_threshold(&p, c),
            ssim: yield_threshold(&s, c),
        })
        .collect()
}

/// Equal-width histogram of the finite values; one bin when all are equal.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Histogram {
            edges: vec![],
            counts: vec![],
        };
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Histogram {
            edges: vec![lo, hi],
            counts: vec![finite.len()],
        };
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for v in finite {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    Histogram { edges, counts }
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Mean of the non-missing spot entries of a map, µm.
fn map_spot(map: &PsfMap<f64>) -> f64 {
    mean_finite(map.cells.iter().flat_map(|c| c.spots.iter().filter_map(|s| *s)))
}

/// Mean cosine similarity between corresponding PSFs; empty PSFs score 0.
pub fn map_similarity(ideal: &PsfMap<f64>, perturbed: &PsfMap<f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in ideal.cells.iter().zip(&perturbed.cells) {
        for (p, q) in a.psfs.iter().zip(&b.psfs) {
            sum += cosine_similarity(p, q);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn map_kernels(map: &PsfMap<f64>) -> Vec<Kernel> {
    map.gray_kernels()
        .into_iter()
        .map(|g| Kernel {
            k: map.kernel,
            taps: g.unwrap_or_else(|| vec![0.0; map.kernel * map.kernel]),
        })
        .collect()
}

/// Design-state geometry and ideal map shared by every trial.
struct Reference {
    geometry: MapGeometry<f64>,
    view: LensView<f64>,
    ideal: PsfMap<f64>,
}

fn reference(lens: &LensPrescription, grid: usize, render: RenderSettings) -> Result<Reference> {
    let view = LensView::plain(lens);
    let geometry = MapGeometry::new(lens, &view, grid, render)?;
    let zero = TolerancePattern::zero(lens);
    let ideal = assemble_map(lens, &view, &geometry, MapPatterns::Single(&zero))?;
    Ok(Reference { geometry, view, ideal })
}

fn trial_pattern(lens: &LensPrescription, ranges: &ToleranceRange, seed: u64, trial: u64) -> TolerancePattern {
    sample_pattern(&mut stream(seed, "eval-pattern", trial), ranges, lens)
}

/// Simulated capture and restoration of every corpus image under `map`;
/// returns the corpus-mean PSNR and SSIM.
pub fn restore_metrics(
    map: &PsfMap<f64>,
    decoder: &DecoderParams,
    corpus: &[SimImage],
    regions: &Regions,
    noise_sigma: f64,
    seed: u64,
    trial: u64,
) -> Result<(f64, f64)> {
    let kernels = map_kernels(map);
    let mut ps = Vec::with_capacity(corpus.len());
    let mut ss = Vec::with_capacity(corpus.len());
    for (i, truth) in corpus.iter().enumerate() {
        let blurred = convolve_sv(truth, &kernels, regions)?;
        let index = trial * corpus.len() as u64 + i as u64;
        let capture = add_noise(&blurred, noise_sigma, &mut stream(seed, "eval-noise", index));
        let restored = decoder.decode(&capture, regions)?.clipped();
        ps.push(psnr(&restored, truth)?);
        ss.push(ssim(&restored, truth)?);
    }
    let p = if ps.iter().all(|v| *v == f64::INFINITY) {
        f64::INFINITY
    } else {
        mean_finite(ps.into_iter())
    };
    Ok((p, ss.iter().sum::<f64>() / ss.len() as f64))
}

/// Monte Carlo evaluation of a lens + decoder: one full single-pattern PSF map per
/// trial, capture simulation and restoration of every corpus image.
pub fn monte_carlo_eval(
    lens: &LensPrescription,
    decoder: &DecoderParams,
    ranges: &ToleranceRange,
    n_trials: usize,
    corpus: &[SimImage],
    seed: u64,
    settings: &EvalSettings,
) -> Result<YieldReport> {
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be >= 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Config("evaluation corpus is empty".into()));
    }
    ranges.validate()?;
    if decoder.grid != settings.grid {
        return Err(Error::Dimension(format!(
            "decoder grid {} differs from evaluation grid {}",
            decoder.grid, settings.grid
        )));
    }
    let regions = Regions::new(corpus[0].width, corpus[0].height, settings.grid)?;
    let reference = reference(lens, settings.grid, settings.render)?;
    let samples: Vec<MetricSample> = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let pattern = trial_pattern(lens, ranges, seed, trial);
            let map = assemble_map(lens, &reference.view, &reference.geometry, MapPatterns::Single(&pattern));
            let failed = match &map {
                Ok(m) => m.empty_cells() == m.cells.len(),
                Err(_) => true,
            };
            if failed {
                log::warn!("trial {trial}: no light reaches the sensor");
                return Ok(MetricSample {
                    trial,
                    psnr: 0.0,
                    ssim: 0.0,
                    mean_spot: f64::NAN,
                    mean_psf_similarity: 0.0,
                    failed: true,
                });
            }
            let map = map?;
            let (p, s) = restore_metrics(&map, decoder, corpus, &regions, settings.noise_sigma, seed, trial)?;
            Ok(MetricSample {
                trial,
                psnr: p,
                ssim: s,
                mean_spot: map_spot(&map),
                mean_psf_similarity: map_similarity(&reference.ideal, &map),
                failed: false,
            })
        })
        .collect::<Result<_>>()?;
    Ok(report(samples, seed, *ranges, map_spot(&reference.ideal)))
}

/// Assemble a report from samples in trial order.
pub fn report(samples: Vec<MetricSample>, seed: u64, ranges: ToleranceRange, design_spot: f64) -> YieldReport {
    let psnrs: Vec<f64> = samples.iter().map(|s| s.psnr).collect();
    YieldReport {
        seed,
        ranges,
        thresholds: thresholds(&samples),
        psnr_histogram: histogram(&psnrs, 20),
        mean_psnr: mean_finite(psnrs.iter().copied()),
        mean_ssim: mean_finite(samples.iter().map(|s| s.ssim)),
        mean_spot: mean_finite(samples.iter().map(|s| s.mean_spot)),
        mean_psf_similarity: mean_finite(samples.iter().map(|s| s.mean_psf_similarity)),
        design_spot,
        failures: samples.iter().filter(|s| s.failed).count(),
        samples,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub seed: u64,
    /// Per-trial mean cosine similarity to the ideal PSFs.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Distribution of the mean cosine similarity between perturbed and ideal PSFs.
pub fn psf_stability(
    lens: &LensPrescription,
    ranges: &ToleranceRange,
    n_trials: usize,
    seed: u64,
    grid: usize,
    render: RenderSettings,
) -> Result<StabilityReport> {
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be >= 1".into()));
    }
    let reference = reference(lens, grid, render)?;
    let samples: Vec<f64> = (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let pattern = trial_pattern(lens, ranges, seed, trial);
            Ok(match assemble_map(lens, &reference.view, &reference.geometry, MapPatterns::Single(&pattern)) {
                Ok(map) => map_similarity(&reference.ideal, &map),
                Err(_) => 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(StabilityReport {
        seed,
        mean,
        std,
        min: samples.iter().copied().fold(f64::INFINITY, f64::min),
        max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        samples,
    })
}

pub fn samples_csv(samples: &[MetricSample]) -> String {
    let mut s = String::from("trial,psnr,ssim,mean_spot_um,mean_psf_similarity,failed\n");
    for m in samples {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.trial, m.psnr, m.ssim, m.mean_spot, m.mean_psf_similarity, m.failed
        ));
    }
    s
}

/// Parse the output of [`samples_csv`].
pub fn parse_samples_csv(text: &str) -> Result<Vec<MetricSample>> {
    let bad = |line: usize, what: &str| Error::Config(format!("samples CSV line {line}: {what}"));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i + 1, "expected 6 fields"));
            }
            let num = |k: usize| f[k].trim().parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            Ok(MetricSample {
                trial: f[0].trim().parse().map_err(|_| bad(i + 1, "bad trial"))?,
                psnr: num(1)?,
                ssim: num(2)?,
                mean_spot: num(3)?,
                mean_psf_similarity: num(4)?,
                failed: f[5].trim() == "true",
            })
        })
        .collect()
}

/// Bar chart of a histogram.
pub fn histogram_svg(h: &Histogram, title: &str, xlabel: &str) -> String {
    let (w, ht, m) = (640.0, 400.0, 50.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{ht}\" viewBox=\"0 0 {w} {ht}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        w / 2.0,
        xml_escape(title)
    );
    let maxc = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let nb = h.counts.len().max(1) as f64;
    let bw = (w - 2.0 * m) / nb;
    for (i, &c) in h.counts.iter().enumerate() {
        let bh = (ht - 2.0 * m) * c as f64 / maxc;
        s += &format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4a7ab5\" stroke=\"white\"/>\n",
            m + bw * i as f64,
            ht - m - bh,
            bw,
            bh
        );
    }
    s += &format!(
        "<line x1=\"{m}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n",
        y = ht - m,
        x2 = w - m
    );
    if let (Some(lo), Some(hi)) = (h.edges.first(), h.edges.last()) {
        s += &format!(
            "<text x=\"{m}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\">{lo:.2}</text>\n\
             <text x=\"{x2}\" y=\"{y}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">{hi:.2}</text>\n",
            y = ht - m + 16.0,
            x2 = w - m
        );
    }
    s += &format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n\
         <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {})\">count (max {})</text>\n</svg>\n",
        w / 2.0,
        ht - 12.0,
        xml_escape(xlabel),
        ht / 2.0,
        ht / 2.0,
        maxc as usize
    );
    s
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
