//! Forward-mode gradients of the training losses against central finite
//! differences with a Richardson extrapolation.
//!
//! The differences are taken in double-double arithmetic through the whole
//! pipeline, image chain included, so the step can be small enough to stay clear
//! of the kinks that bilinear splatting, clipping and TV put into the losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_parameters, lift_seeded};
use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::imaging::SimImage;
use crate::lens::LensPrescription;
use crate::math::{Dd, Real};
use crate::optimize::{Evaluation, OptimizeConfig, Stage, Trainer};
use crate::raytrace::LensView;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    /// Finite-difference step relative to each parameter's scale.
    pub step: f64,
    pub tolerance: f64,
    /// Looser bound for the PSF loss, whose shift search has kinks.
    pub psf_tolerance: f64,
    /// Floor of the relative-error denominator.
    pub floor: f64,
    /// Decoder taps checked through the image loss.
    pub decoder_samples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-9,
            tolerance: 1e-4,
            psf_tolerance: 1e-3,
            floor: 1e-8,
            decoder_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub parameter: String,
    pub component: String,
    pub ad: f64,
    /// Central difference with step h.
    pub fd: f64,
    /// Richardson combination of steps h and h/2.
    pub fd_richardson: f64,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub lens: String,
    pub rows: Vec<GradRow>,
    pub pass: bool,
}

impl GradReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<16} {:<8} {:>16} {:>16} {:>10} {}\n",
            "parameter", "loss", "AD", "FD", "rel.err", "status"
        );
        for r in &self.rows {
            s += &format!(
                "{:<16} {:<8} {:>16.9e} {:>16.9e} {:>10.2e} {}\n",
                r.parameter,
                r.component,
                r.ad,
                r.fd_richardson,
                r.rel_error,
                if r.pass { "ok" } else { "FAIL" }
            );
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("parameter,loss,ad,fd,fd_richardson,rel_error,tolerance,pass\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.parameter, r.component, r.ad, r.fd, r.fd_richardson, r.rel_error, r.tolerance, r.pass
            );
        }
        s
    }
}

const COMPONENTS: [&str; 4] = ["spot", "psf", "image", "total"];

fn components<T: Clone>(e: &Evaluation<T>) -> [T; 4] {
    [e.spot.clone(), e.psf.clone(), e.image.clone(), e.total.clone()]
}

/// Compare AD and FD gradients of every loss component over all lens parameters
/// (tolerance-aware batch of iteration 0), and of the image loss over a few
/// decoder taps. `seeds` scales individual AD partials (1 = faithful) so a
/// broken derivative can be injected deliberately.
pub fn gradcheck(
    lens: &LensPrescription,
    config: &OptimizeConfig,
    images: Vec<SimImage>,
    decoder: Option<DecoderParams>,
    check: &GradCheckConfig,
    seeds: &[f64],
) -> Result<GradReport> {
    let mut config = config.clone();
    config.stage = Stage::ToleranceAware;
    let trainer = Trainer::new(lens.clone(), config, images)?;
    let state = trainer.init_state(decoder)?;
    let params = state.lens_params.clone();
    let iteration = 0;

    let view = lift_seeded(lens, &params, seeds)?;
    let ad = trainer.evaluate(&view, lens, &state.decoder, iteration, true)?;
    let ad_parts = components(&ad);
    let eval_lens = |i: usize, delta: f64| -> Result<[Dd; 4]> {
        let mut p = params.clone();
        p.set_value(i, p.get(i).value + delta);
        let l = apply_parameters(lens, &p)?;
        let v = LensView::<Dd>::plain(&l);
        let e = trainer.evaluate_exact(&v, &l, &state.decoder, iteration)?;
        Ok(components(&e))
    };

    let mut rows = Vec::new();
    for i in 0..params.len() {
        let h = check.step * state.lens_scales[i];
        let (p1, m1, p2, m2) = (eval_lens(i, h)?, eval_lens(i, -h)?, eval_lens(i, h / 2.0)?, eval_lens(i, -h / 2.0)?);
        for (c, name) in COMPONENTS.iter().enumerate() {
            let fd = ((p1[c] - m1[c]) / (2.0 * h)).val();
            let fd_half = ((p2[c] - m2[c]) / h).val();
            let tol = if *name == "psf" { check.psf_tolerance } else { check.tolerance };
            rows.push(row(
                &params.get(i).name,
                name,
                ad_parts[c].partial(i),
                fd,
                fd_half,
                tol,
                check.floor,
            ));
        }
    }

    // Decoder half: the image loss is linear-quadratic in the taps.
    let plain = LensView::<Dd>::plain(lens);
    let dgrad = ad.decoder_grad.clone().expect("requested");
    let stride = state.decoder.k * state.decoder.k + 1;
    let flat = state.decoder.flatten();
    let n = flat.len();
    for s in 0..check.decoder_samples.min(n) {
        let j = (s * 7919 + stride / 2) % n;
        let eval_dec = |delta: f64| -> Result<Dd> {
            let mut f = flat.clone();
            f[j] += delta;
            let mut d = state.decoder.clone();
            d.unflatten(&f)?;
            Ok(trainer.evaluate_exact(&plain, lens, &d, iteration)?.image)
        };
        let h = check.step;
        let fd = ((eval_dec(h)? - eval_dec(-h)?) / (2.0 * h)).val();
        let fd_half = ((eval_dec(h / 2.0)? - eval_dec(-h / 2.0)?) / h).val();
        let (cell, slot) = (j / stride, j % stride);
        let name = if slot + 1 == stride {
            format!("decoder.{cell}.bias")
        } else {
            format!("decoder.{cell}.k{slot}")
        };
        rows.push(row(&name, "image", dgrad[j], fd, fd_half, check.tolerance, check.floor));
    }

    let pass = rows.iter().all(|r| r.pass);
    Ok(GradReport {
        lens: lens.name.clone(),
        rows,
        pass,
    })
}

fn row(parameter: &str, component: &str, ad: f64, fd: f64, fd_half: f64, tolerance: f64, floor: f64) -> GradRow {
    let rich = (4.0 * fd_half - fd) / 3.0;
    let rel_error = (ad - rich).abs() / ad.abs().max(floor);
    GradRow {
        parameter: parameter.to_string(),
        component: component.to_string(),
        ad,
        fd,
        fd_richardson: rich,
        rel_error,
        tolerance,
        pass: rel_error < tolerance && ad.is_finite(),
    }
}

/// Error for a failed report, carrying the worst row.
pub fn failure(report: &GradReport) -> Option<Error> {
    let worst = report
        .rows
        .iter()
        .filter(|r| !r.pass)
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))?;
    Some(Error::Numerical(format!(
        "gradient check failed: d{}/d{} AD {:.6e} vs FD {:.6e} (rel. error {:.2e})",
        worst.component, worst.parameter, worst.ad, worst.fd_richardson, worst.rel_error
    )))
}
