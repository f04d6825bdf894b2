//! Spot, PSF-similarity and image-quality losses and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::SimImage;
use crate::math::Real;
use crate::psf::{psf_similarity, PsfMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Per µm of mean radial spot deviation.
    pub spot: f64,
    pub psf: f64,
    pub mse: f64,
    pub tv: f64,
    /// Perceptual term; not implemented, must stay 0.
    pub vgg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spot: 0.05,
            psf: 1.0,
            mse: 0.1,
            tv: 0.01,
            vgg: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("spot", self.spot),
            ("psf", self.psf),
            ("mse", self.mse),
            ("tv", self.tv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        if self.vgg != 0.0 {
            return Err(Error::Config("the perceptual (vgg) loss is not available; its weight must be 0".into()));
        }
        Ok(())
    }
}

/// Sum over (wavelength, field) entries of the mean radial deviation of each spot,
/// µm. Entries without surviving rays are skipped; their count is returned.
pub fn spot_loss<T: Real>(entries: &[Option<T>]) -> (T, usize) {
    let mut total = T::zero();
    let mut skipped = 0;
    for e in entries {
        match e {
            Some(v) => total = total + v.clone(),
            None => skipped += 1,
        }
    }
    (total, skipped)
}

/// One minus the mean PSF similarity over every (cell, wavelength) pair. Empty
/// perturbed PSFs contribute similarity 0; their count is returned.
pub fn psf_loss<T: Real>(ideal: &PsfMap<T>, perturbed: &PsfMap<T>) -> Result<(T, usize)> {
    if ideal.cells.len() != perturbed.cells.len() {
        return Err(Error::Dimension(format!(
            "PSF maps have {} and {} cells",
            ideal.cells.len(),
            perturbed.cells.len()
        )));
    }
    let mut sum = T::zero();
    let mut n = 0usize;
    let mut empty = 0usize;
    for (a, b) in ideal.cells.iter().zip(&perturbed.cells) {
        if a.psfs.len() != b.psfs.len() {
            return Err(Error::Dimension("cells carry different wavelength counts".into()));
        }
        for (p, q) in a.psfs.iter().zip(&b.psfs) {
            if q.empty {
                empty += 1;
            }
            sum = sum + psf_similarity(p, q)?;
            n += 1;
        }
    }
    if n == 0 {
        return Ok((T::zero(), 0));
    }
    Ok((-(sum / n as f64) + 1.0, empty))
}

/// `λ_mse · MSE + λ_tv · TV(restored)` and its gradient with respect to `restored`.
/// TV is the mean absolute forward difference over both axes.
pub fn image_loss(restored: &SimImage, truth: &SimImage, w: &LossWeights) -> Result<(f64, SimImage)> {
    restored.same_shape(truth)?;
    let (wd, ht) = (restored.width, restored.height);
    let n = (wd * ht) as f64;
    let mut grad = vec![0.0; wd * ht];
    let mut mse = 0.0;
    for (i, (r, t)) in restored.data.iter().zip(&truth.data).enumerate() {
        let d = r - t;
        mse += d * d;
        grad[i] = w.mse * 2.0 * d / n;
    }
    mse /= n;
    let mut tv = 0.0;
    let count = (ht * wd.saturating_sub(1) + ht.saturating_sub(1) * wd) as f64;
    if w.tv != 0.0 && count > 0.0 {
        let s = w.tv / count;
        let mut diff = |a: usize, b: usize| {
            let d = restored.data[b] - restored.data[a];
            tv += d.abs();
            let g = if d > 0.0 {
                s
            } else if d < 0.0 {
                -s
            } else {
                0.0
            };
            grad[b] += g;
            grad[a] -= g;
        };
        for r in 0..ht {
            for c in 0..wd {
                let i = r * wd + c;
                if c + 1 < wd {
                    diff(i, i + 1);
                }
                if r + 1 < ht {
                    diff(i, i + wd);
                }
            }
        }
        tv /= count;
    }
    Ok((w.mse * mse + w.tv * tv, SimImage::new(wd, ht, grad)?))
}

/// Value of [`image_loss`] over any [`Real`], for a restored image given as a
/// row-major slice shaped like `truth`.
pub fn image_loss_value<T: Real>(restored: &[T], truth: &SimImage, w: &LossWeights) -> Result<T> {
    if restored.len() != truth.data.len() {
        return Err(Error::Dimension(format!(
            "restored image has {} pixels, truth {}",
            restored.len(),
            truth.data.len()
        )));
    }
    let (wd, ht) = (truth.width, truth.height);
    let n = (wd * ht) as f64;
    let mut mse = T::zero();
    for (r, &t) in restored.iter().zip(&truth.data) {
        mse = mse + (r.clone() - t).sq();
    }
    let mut total = mse / n * w.mse;
    let count = (ht * wd.saturating_sub(1) + ht.saturating_sub(1) * wd) as f64;
    if w.tv != 0.0 && count > 0.0 {
        let mut tv = T::zero();
        let abs_diff = |a: usize, b: usize| {
            let d = restored[b].clone() - restored[a].clone();
            if d.val() < 0.0 {
                -d
            } else {
                d
            }
        };
        for r in 0..ht {
            for c in 0..wd {
                let i = r * wd + c;
                if c + 1 < wd {
                    tv = tv + abs_diff(i, i + 1);
                }
                if r + 1 < ht {
                    tv = tv + abs_diff(i, i + wd);
                }
            }
        }
        total = total + tv / count * w.tv;
    }
    Ok(total)
}

/// Unweighted component values with the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spot: f64,
    pub psf: f64,
    pub image: f64,
    pub total: f64,
}

/// `λ_spot·spot + λ_psf·psf + image`; the image component already carries its
/// own MSE/TV weights.
pub fn total_loss<T: Real>(spot: &T, psf: &T, image: &T, w: &LossWeights) -> Result<(T, LossBreakdown)> {
    for (name, v) in [("spot", spot), ("psf", psf), ("image", image)] {
        if !v.val().is_finite() {
            return Err(Error::NonFinite {
                what: format!("{name} loss"),
                value: v.val(),
            });
        }
    }
    let total = spot.clone() * w.spot + psf.clone() * w.psf + image.clone();
    let b = LossBreakdown {
        spot: spot.val(),
        psf: psf.val(),
        image: image.val(),
        total: total.val(),
    };
    Ok((total, b))
}
