//! Two-stage training: task-only pretraining on the design, then joint
//! tolerance-aware optimization over stitched PSF maps of sampled patterns.
//!
//! Lens parameters are differentiated in forward mode through tracing and PSF
//! splatting. The image chain (convolution, noise, clipping, decoder, image loss)
//! runs in `f64` with hand-written adjoints; the two halves meet at the PSF taps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{apply_parameters, lens_parameters, lift, DiffScalar, ParamRole, ParameterSet};
use crate::decoder::{DecoderParams, DEFAULT_DECODER_KERNEL, DEFAULT_NSR};
use crate::error::{Error, Result};
use crate::imaging::{add_noise, convolve_regions_in, convolve_sv, kernel_gradient, Kernel, Regions, SimImage};
use crate::lens::LensPrescription;
use crate::losses::{image_loss, image_loss_value, psf_loss, spot_loss, total_loss, LossBreakdown, LossWeights};
use crate::math::Real;
use crate::psf::{assemble_map, MapGeometry, MapPatterns, PsfMap, RenderSettings, DEFAULT_GRID};
use crate::raytrace::LensView;
use crate::rng::stream;
use crate::tolerance::{sample_pattern, TolerancePattern, ToleranceRange};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    ToleranceAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OpticsOnly,
    DecoderOnly,
    Both,
}

impl Mode {
    pub fn optics(self) -> bool {
        matches!(self, Mode::OpticsOnly | Mode::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, Mode::DecoderOnly | Mode::Both)
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "tolerance_aware" | "tolerance-aware" => Ok(Stage::ToleranceAware),
            _ => Err(Error::Config(format!("unknown stage {s:?} (pretrain | tolerance_aware)"))),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optics_only" | "optics-only" => Ok(Mode::OpticsOnly),
            "decoder_only" | "decoder-only" => Ok(Mode::DecoderOnly),
            "both" => Ok(Mode::Both),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (optics_only | decoder_only | both)"
            ))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::ToleranceAware => "tolerance_aware",
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::OpticsOnly => "optics_only",
            Mode::DecoderOnly => "decoder_only",
            Mode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeConfig {
    pub stage: Stage,
    pub mode: Mode,
    pub n_patterns: usize,
    pub iterations: usize,
    /// Lens step size as a fraction of each parameter's scale.
    pub lr_lens: f64,
    pub lr_decoder: f64,
    pub seed: u64,
    pub ranges: ToleranceRange,
    pub weights: LossWeights,
    /// Training image side, px.
    pub image_size: usize,
    pub grid: usize,
    pub render: RenderSettings,
    pub decoder_kernel: usize,
    /// Noise-to-signal ratio of the Wiener initialisation.
    pub nsr: f64,
    /// Std of the additive Gaussian sensor noise on unit range.
    pub noise_sigma: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            mode: Mode::Both,
            n_patterns: 64,
            iterations: 200,
            lr_lens: 1e-4,
            lr_decoder: 1e-4,
            seed: 0,
            ranges: ToleranceRange::default(),
            weights: LossWeights::default(),
            image_size: 256,
            grid: DEFAULT_GRID,
            // wide enough for the chief-ray shift of decentred elements
            render: RenderSettings {
                pitch_um: 5.0,
                pupil_samples: 16,
                ..Default::default()
            },
            decoder_kernel: DEFAULT_DECODER_KERNEL,
            nsr: DEFAULT_NSR,
            noise_sigma: 0.01,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patterns == 0 {
            return Err(Error::Config("n_patterns must be >= 1".into()));
        }
        for (name, v) in [("lr_lens", self.lr_lens), ("lr_decoder", self.lr_decoder)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.grid == 0 || self.image_size == 0 || self.image_size % self.grid != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of the grid {}",
                self.image_size, self.grid
            )));
        }
        if self.decoder_kernel % 2 == 0 {
            return Err(Error::Config(format!("decoder kernel must be odd, got {}", self.decoder_kernel)));
        }
        self.ranges.validate()?;
        self.weights.validate()?;
        self.render.validate()
    }
}

/// One optimization step as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: u64,
    pub stage: Stage,
    pub spot: f64,
    pub psf: f64,
    pub image: f64,
    pub total: f64,
    pub empty_cells: usize,
    pub image_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Tolerance-aware training started without a pretrained state.
    pub fresh_start: bool,
    pub lens_params: ParameterSet,
    /// Reference magnitude of each lens parameter for step-size normalization.
    pub lens_scales: Vec<f64>,
    pub decoder: DecoderParams,
    /// Adam moments: lens parameters first, then the flattened decoder.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub adam_steps: u64,
    pub iteration: u64,
    pub history: Vec<IterRecord>,
}

impl TrainState {
    /// Lens and decoder parameters in one ordered set.
    pub fn parameter_set(&self) -> Result<ParameterSet> {
        let mut set = self.lens_params.clone();
        self.decoder.register(&mut set)?;
        Ok(set)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn from_json_str(s: &str, origin: &Path) -> Result<Self> {
        let st: Self = serde_json::from_str(s).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        st.decoder.validate()?;
        let n = st.lens_params.len() + st.decoder.parameter_count();
        if st.m.len() != n || st.v.len() != n || st.lens_scales.len() != st.lens_params.len() {
            return Err(Error::Dimension(format!("checkpoint moments do not match {n} parameters")));
        }
        Ok(st)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s, path)
    }

    /// Switch to `stage`, resetting the moment estimates on a change.
    fn enter(&mut self, stage: Stage) {
        if self.stage != stage {
            self.stage = stage;
            self.m.iter_mut().for_each(|x| *x = 0.0);
            self.v.iter_mut().for_each(|x| *x = 0.0);
            self.adam_steps = 0;
        }
    }
}

/// CSV of the loss history with one column per component.
pub fn history_csv(history: &[IterRecord]) -> String {
    let mut s = String::from("iteration,stage,total,spot,psf,image,empty_cells,image_index\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.iteration, r.stage, r.total, r.spot, r.psf, r.image, r.empty_cells, r.image_index
        ));
    }
    s
}

/// Loss components of one evaluation. With a [`DiffScalar`] view the values
/// carry lens-parameter partials.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub spot: T,
    pub psf: T,
    pub image: T,
    pub total: T,
    pub breakdown: LossBreakdown,
    /// Flattened decoder gradient when requested.
    pub decoder_grad: Option<Vec<f64>>,
    pub empty_cells: usize,
    pub image_index: usize,
}

/// Everything fixed over a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub lens: LensPrescription,
    pub config: OptimizeConfig,
    pub images: Vec<SimImage>,
    regions: Regions,
}

impl Trainer {
    /// `images` must already be `image_size` square.
    pub fn new(lens: LensPrescription, config: OptimizeConfig, images: Vec<SimImage>) -> Result<Self> {
        config.validate()?;
        if images.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        for img in &images {
            if img.width != config.image_size || img.height != config.image_size {
                return Err(Error::Dimension(format!(
                    "training image is {}x{}, expected {}",
                    img.width, img.height, config.image_size
                )));
            }
        }
        let regions = Regions::new(config.image_size, config.image_size, config.grid)?;
        Ok(Self {
            lens,
            config,
            images,
            regions,
        })
    }

    pub fn regions(&self) -> &Regions {
        &self.regions
    }

    /// Fresh state at the design values. Without a decoder, one is initialised by
    /// Wiener inversion of the design's PSF map.
    pub fn init_state(&self, decoder: Option<DecoderParams>) -> Result<TrainState> {
        let lens_params = lens_parameters(&self.lens);
        let decoder = match decoder {
            Some(d) => {
                d.validate()?;
                if d.grid != self.config.grid {
                    return Err(Error::Dimension(format!(
                        "decoder grid {} differs from training grid {}",
                        d.grid, self.config.grid
                    )));
                }
                d
            }
            None => design_decoder(
                &self.lens,
                self.config.grid,
                self.config.render,
                self.config.decoder_kernel,
                self.config.nsr,
            )?,
        };
        let lens_scales = lens_params
            .iter()
            .map(|p| match p.role {
                ParamRole::Curvature => p.value.abs().max(0.01),
                _ => p.value.abs().max(0.1),
            })
            .collect();
        let n = lens_params.len() + decoder.parameter_count();
        Ok(TrainState {
            stage: self.config.stage,
            fresh_start: self.config.stage == Stage::ToleranceAware,
            lens_params,
            lens_scales,
            decoder,
            m: vec![0.0; n],
            v: vec![0.0; n],
            adam_steps: 0,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Per-cell patterns of a tolerance-aware iteration: `n_patterns` draws
    /// assigned to cells through a seeded permutation (tiled when fewer patterns
    /// than cells). `None` in pretraining.
    pub fn patterns(&self, iteration: u64) -> Option<Vec<TolerancePattern>> {
        if self.config.stage != Stage::ToleranceAware {
            return None;
        }
        let c = &self.config;
        let mut rng = stream(c.seed, "patterns", iteration);
        let drawn: Vec<TolerancePattern> = (0..c.n_patterns)
            .map(|_| sample_pattern(&mut rng, &c.ranges, &self.lens))
            .collect();
        let cells = c.grid * c.grid;
        let mut perm: Vec<usize> = (0..cells).collect();
        perm.shuffle(&mut stream(c.seed, "assign", iteration));
        Some(perm.into_iter().map(|p| drawn[p % c.n_patterns].clone()).collect())
    }

    /// Full loss of `decoder` with the lens described by `view` (whose values
    /// must equal `lens_now`) on the batch of `iteration`.
    pub fn evaluate<T: Real>(
        &self,
        view: &LensView<T>,
        lens_now: &LensPrescription,
        decoder: &DecoderParams,
        iteration: u64,
        want_decoder_grad: bool,
    ) -> Result<Evaluation<T>> {
        self.evaluate_with(view, lens_now, decoder, iteration, want_decoder_grad, false)
    }

    /// [`Trainer::evaluate`] with the image loss recomputed entirely in `T`
    /// instead of from `f64` taps. Slow; finite differences in extended precision
    /// use it so the image term is not limited by `f64` rounding.
    pub fn evaluate_exact<T: Real>(
        &self,
        view: &LensView<T>,
        lens_now: &LensPrescription,
        decoder: &DecoderParams,
        iteration: u64,
    ) -> Result<Evaluation<T>> {
        self.evaluate_with(view, lens_now, decoder, iteration, false, true)
    }

    fn evaluate_with<T: Real>(
        &self,
        view: &LensView<T>,
        lens_now: &LensPrescription,
        decoder: &DecoderParams,
        iteration: u64,
        want_decoder_grad: bool,
        exact_image: bool,
    ) -> Result<Evaluation<T>> {
        let c = &self.config;
        let geometry = MapGeometry::new(lens_now, view, c.grid, c.render)?;
        let zero = TolerancePattern::zero(lens_now);
        let ideal = assemble_map(lens_now, view, &geometry, MapPatterns::Single(&zero))?;
        let perturbed = match self.patterns(iteration) {
            Some(ps) => Some(assemble_map(lens_now, view, &geometry, MapPatterns::Stitched(&ps))?),
            None => None,
        };
        let map = perturbed.as_ref().unwrap_or(&ideal);
        let cells = map.cells.len();
        let empty_cells = map.empty_cells();
        if 2 * empty_cells > cells {
            return Err(Error::Numerical(format!(
                "{empty_cells} of {cells} PSF cells are empty; tolerances exceed the traceable range"
            )));
        }

        let entries: Vec<Option<T>> = map.cells.iter().flat_map(|c| c.spots.iter().cloned()).collect();
        let (spot_sum, skipped) = spot_loss(&entries);
        let live = entries.len() - skipped;
        let spot = if live > 0 { spot_sum / live as f64 } else { T::zero() };
        let psf = match &perturbed {
            Some(p) => psf_loss(&ideal, p)?.0,
            None => T::zero(),
        };

        let (image, decoder_grad, image_index) = if exact_image {
            let (v, index) = self.image_value(map, decoder, iteration)?;
            (v, None, index)
        } else {
            self.image_term(map, decoder, iteration, want_decoder_grad)?
        };
        let (total, breakdown) = total_loss(&spot, &psf, &image, &c.weights)?;
        Ok(Evaluation {
            spot,
            psf,
            image,
            total,
            breakdown,
            decoder_grad,
            empty_cells,
            image_index,
        })
    }

    /// Image loss evaluated in `T` end to end, with the same noise draws and
    /// clipping as [`Trainer::image_term`].
    fn image_value<T: Real>(&self, map: &PsfMap<T>, decoder: &DecoderParams, iteration: u64) -> Result<(T, usize)> {
        let c = &self.config;
        let k = map.kernel;
        let kernels: Vec<Vec<T>> = map
            .gray_kernels()
            .into_iter()
            .map(|g| g.unwrap_or_else(|| vec![T::zero(); k * k]))
            .collect();
        let index = (iteration % self.images.len() as u64) as usize;
        let truth = &self.images[index];
        let lifted: Vec<T> = truth.data.iter().map(|&v| T::cst(v)).collect();
        let blurred = convolve_regions_in(&lifted, truth.width, &kernels, k, None, &self.regions)?;
        let mut rng = stream(c.seed, "noise", iteration);
        let normal = (c.noise_sigma > 0.0).then(|| Normal::new(0.0, c.noise_sigma).expect("validated sigma"));
        let capture: Vec<T> = blurred
            .into_iter()
            .map(|b| {
                let y = match &normal {
                    Some(n) => b + n.sample(&mut rng),
                    None => b,
                };
                if y.val() <= 0.0 {
                    T::zero()
                } else if y.val() >= 1.0 {
                    T::cst(1.0)
                } else {
                    y
                }
            })
            .collect();
        let taps: Vec<Vec<T>> = decoder
            .kernels
            .iter()
            .map(|t| t.iter().map(|&v| T::cst(v)).collect())
            .collect();
        let restored = convolve_regions_in(&capture, truth.width, &taps, decoder.k, Some(&decoder.biases), &self.regions)?;
        Ok((image_loss_value(&restored, truth, &c.weights)?, index))
    }

    fn image_term<T: Real>(
        &self,
        map: &PsfMap<T>,
        decoder: &DecoderParams,
        iteration: u64,
        want_decoder_grad: bool,
    ) -> Result<(T, Option<Vec<f64>>, usize)> {
        let c = &self.config;
        let k = map.kernel;
        let gray = map.gray_kernels();
        let kernels: Vec<Kernel> = gray
            .iter()
            .map(|g| Kernel {
                k,
                taps: match g {
                    Some(v) => v.iter().map(Real::val).collect(),
                    None => vec![0.0; k * k],
                },
            })
            .collect();
        let index = (iteration % self.images.len() as u64) as usize;
        let truth = &self.images[index];
        let blurred = convolve_sv(truth, &kernels, &self.regions)?;
        let noisy = add_noise(&blurred, c.noise_sigma, &mut stream(c.seed, "noise", iteration));
        let capture = noisy.clone().clipped();
        let restored = decoder.decode(&capture, &self.regions)?;
        let (value, g_restored) = image_loss(&restored, truth, &c.weights)?;

        let supports: Vec<Vec<usize>> = gray
            .iter()
            .map(|g| match g {
                Some(v) => (0..v.len()).filter(|&i| !v[i].is_constant()).collect(),
                None => Vec::new(),
            })
            .collect();
        let lens_needed = supports.iter().any(|s| !s.is_empty());
        if !lens_needed && !want_decoder_grad {
            return Ok((T::cst(value), None, index));
        }
        let (flat, mut g_capture) = decoder.backward(&capture, &g_restored, &self.regions);
        for (g, &y) in g_capture.data.iter_mut().zip(&noisy.data) {
            if !(y > 0.0 && y < 1.0) {
                *g = 0.0;
            }
        }
        let mut image = T::cst(value);
        if lens_needed {
            let mut acc = T::zero();
            for (cell, support) in supports.iter().enumerate() {
                if support.is_empty() {
                    continue;
                }
                let taps = gray[cell].as_ref().expect("support implies a kernel");
                let (g, _) = kernel_gradient(truth, &g_capture, &self.regions, cell, k, Some(support));
                for &i in support {
                    if g[i] != 0.0 {
                        acc = acc + taps[i].clone() * g[i];
                    }
                }
            }
            // Value of the loss, partials of the tap contraction.
            let shift = acc.val();
            image = image + (acc - shift);
        }
        Ok((image, want_decoder_grad.then_some(flat), index))
    }

    /// Loss and gradient at the current state, without updating it.
    pub fn gradient(&self, state: &TrainState) -> Result<(Evaluation<DiffScalar>, Vec<f64>)> {
        let lens_now = apply_parameters(&self.lens, &state.lens_params)?;
        let active = if self.config.mode.optics() {
            state.lens_params.clone()
        } else {
            ParameterSet::new()
        };
        let view = lift(&lens_now, &active)?;
        let eval = self.evaluate(&view, &lens_now, &state.decoder, state.iteration, self.config.mode.decoder())?;
        let lens_grad = crate::autodiff::gradient(&eval.total, &state.lens_params)?;
        Ok((eval, lens_grad))
    }

    /// One adaptive-moment step on the parameters of the active mode.
    pub fn step(&self, state: &mut TrainState) -> Result<IterRecord> {
        state.enter(self.config.stage);
        let (eval, lens_grad) = self.gradient(state)?;
        let mode = self.config.mode;
        let n_lens = state.lens_params.len();
        let dec_grad = eval.decoder_grad.clone().unwrap_or_default();
        if let Some(bad) = dec_grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "decoder gradient".into(),
                value: *bad,
            });
        }
        state.adam_steps += 1;
        let t = state.adam_steps as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let adam = |slot: usize, g: f64, m: &mut [f64], v: &mut [f64]| -> f64 {
            m[slot] = BETA1 * m[slot] + (1.0 - BETA1) * g;
            v[slot] = BETA2 * v[slot] + (1.0 - BETA2) * g * g;
            (m[slot] / c1) / ((v[slot] / c2).sqrt() + ADAM_EPS)
        };
        if mode.optics() {
            for (i, &g) in lens_grad.iter().enumerate() {
                let d = adam(i, g, &mut state.m, &mut state.v);
                let p = state.lens_params.get(i).value;
                state.lens_params.set_value(i, p - self.config.lr_lens * state.lens_scales[i] * d);
            }
        }
        if mode.decoder() {
            let mut flat = state.decoder.flatten();
            for (j, &g) in dec_grad.iter().enumerate() {
                let d = adam(n_lens + j, g, &mut state.m, &mut state.v);
                flat[j] = (flat[j] - self.config.lr_decoder * d).clamp(-1e6, 1e6);
            }
            state.decoder.unflatten(&flat)?;
        }
        let rec = IterRecord {
            iteration: state.iteration,
            stage: self.config.stage,
            spot: eval.breakdown.spot,
            psf: eval.breakdown.psf,
            image: eval.breakdown.image,
            total: eval.breakdown.total,
            empty_cells: eval.empty_cells,
            image_index: eval.image_index,
        };
        state.iteration += 1;
        state.history.push(rec);
        Ok(rec)
    }

    /// Run `iterations` steps. On failure the state is left at the last good step.
    pub fn run<F: FnMut(&TrainState, &IterRecord)>(&self, state: &mut TrainState, iterations: usize, mut on_iter: F) -> Result<()> {
        for _ in 0..iterations {
            let rec = self.step(state)?;
            log::debug!(
                "iter {} total {:.6e} spot {:.4} psf {:.4e} image {:.4e}",
                rec.iteration,
                rec.total,
                rec.spot,
                rec.psf,
                rec.image
            );
            on_iter(state, &rec);
        }
        Ok(())
    }
}

/// Wiener decoder for the as-designed PSF map of `lens`.
pub fn design_decoder(
    lens: &LensPrescription,
    grid: usize,
    render: RenderSettings,
    k: usize,
    nsr: f64,
) -> Result<DecoderParams> {
    let view = LensView::plain(lens);
    let geo = MapGeometry::new(lens, &view, grid, render)?;
    let zero = TolerancePattern::zero(lens);
    let map = assemble_map(lens, &view, &geo, MapPatterns::Single(&zero))?;
    let kernels: Vec<Option<Kernel>> = map
        .gray_kernels()
        .into_iter()
        .map(|t| t.map(|taps| Kernel { k: map.kernel, taps }))
        .collect();
    DecoderParams::init_wiener(&kernels, grid, k, nsr)
}

/// Task-only training from the design, `config.iterations` steps.
pub fn pretrain(
    config: &OptimizeConfig,
    lens: &LensPrescription,
    decoder: Option<DecoderParams>,
    corpus: Vec<SimImage>,
) -> Result<TrainState> {
    if config.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain needs stage = pretrain".into()));
    }
    let trainer = Trainer::new(lens.clone(), config.clone(), corpus)?;
    let mut state = trainer.init_state(decoder)?;
    trainer.run(&mut state, config.iterations, |_, _| {})?;
    Ok(state)
}

/// Tolerance-aware training continuing from `state`, `config.iterations` steps.
pub fn tolerance_aware(
    config: &OptimizeConfig,
    lens: &LensPrescription,
    corpus: Vec<SimImage>,
    mut state: TrainState,
) -> Result<TrainState> {
    if config.stage != Stage::ToleranceAware {
        return Err(Error::Config("tolerance_aware needs stage = tolerance_aware".into()));
    }
    let trainer = Trainer::new(lens.clone(), config.clone(), corpus)?;
    trainer.run(&mut state, config.iterations, |_, _| {})?;
    Ok(state)
}

/// Prescription with the trained lens parameters written back.
pub fn trained_lens(lens: &LensPrescription, state: &TrainState) -> Result<LensPrescription> {
    apply_parameters(lens, &state.lens_params)
}
