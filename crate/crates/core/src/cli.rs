//! The `tolopt` command line: argument parsing, config resolution
//! (defaults < config file < flags), artifact manifests and replay.
//!
//! Every run writes its outputs and a `manifest.json` under the output
//! directory. The manifest stores the fully resolved invocation with absolute
//! input paths, so `tolopt replay --manifest <file>` re-runs it without the
//! original config file or working directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::lens_parameters;
use crate::decoder::{DecoderParams, DEFAULT_DECODER_KERNEL, DEFAULT_NSR};
use crate::error::{Error, Result};
use crate::evaluate::{
    histogram, histogram_svg, monte_carlo_eval, parse_samples_csv, samples_csv, thresholds, EvalSettings,
    YieldReport, YieldThreshold,
};
use crate::gradcheck::{failure, gradcheck, GradCheckConfig};
use crate::imaging::{add_noise, bundled_corpus_dir, convolve_sv, list_corpus, load_corpus, Kernel, Regions, SimImage};
use crate::lens::{fixtures, load_prescription, LensPrescription};
use crate::losses::LossWeights;
use crate::optimize::{design_decoder, history_csv, trained_lens, Mode, OptimizeConfig, Stage, TrainState, Trainer};
use crate::psf::{assemble_map, MapGeometry, MapPatterns, PsfMap, RenderSettings, DEFAULT_GRID};
use crate::raytrace::{launch_rays, media_indices, pupil_grid, spot_from_hits, spot_svg, trace_launch, FieldPoint, LensView, SpotEntry};
use crate::rng::stream;
use crate::tolerance::{realize_transforms, sample_pattern, TolerancePattern, ToleranceRange};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "TOLOPT_OUT";
const DEFAULT_OUT: &str = "tolopt-out";

#[derive(Debug, Parser)]
#[command(name = "tolopt", version, about = "Tolerance-aware lens and decoder co-design")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $TOLOPT_OUT, else ./tolopt-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads [default: available cores]. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Prescription JSON, or a bundled fixture: lens1, lens2, cooke.
    #[arg(long, global = true)]
    pub lens: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory of training/evaluation images [default: bundled corpus].
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Decenter max, mm.
    #[arg(long, global = true)]
    pub decenter: Option<f64>,
    /// Tilt max, degrees.
    #[arg(long, global = true)]
    pub tilt: Option<f64>,
    /// Central-thickness max, mm.
    #[arg(long, global = true)]
    pub thickness: Option<f64>,
    /// Fractional curvature-error max.
    #[arg(long, global = true)]
    pub curvature: Option<f64>,
    #[arg(long, global = true)]
    pub w_spot: Option<f64>,
    #[arg(long, global = true)]
    pub w_psf: Option<f64>,
    #[arg(long, global = true)]
    pub w_mse: Option<f64>,
    #[arg(long, global = true)]
    pub w_tv: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Trace the pupil grid for each field and wavelength; CSV of every ray.
    Trace(TraceArgs),
    /// Spot diagrams with RMS radii; CSV and SVG panel.
    Spot(TraceArgs),
    /// PSF map as 16-bit PGM tiles with JSON sidecars.
    Psf(PsfArgs),
    /// Simulated capture of an input image through the PSF map.
    Render(RenderArgs),
    /// Draw tolerance patterns.
    Sample(SampleArgs),
    /// Forward-mode gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Pretrain or tolerance-aware training with checkpoints and a loss log.
    Optimize(OptimizeArgs),
    /// Monte Carlo yield evaluation.
    Evaluate(EvaluateArgs),
    /// Yield thresholds recomputed from a samples CSV.
    Yield(YieldArgs),
    /// Comparison table of evaluation runs.
    Report(ReportArgs),
    /// Re-run an invocation from its manifest and compare the artifacts.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct PatternArgs {
    /// Tolerance pattern JSON (one pattern, or the output of `sample`).
    #[arg(long)]
    pub pattern: Option<PathBuf>,
    /// Index into a pattern list.
    #[arg(long, default_value_t = 0)]
    pub pattern_index: usize,
    /// Draw one pattern from the seed instead of using the design.
    #[arg(long)]
    pub perturb: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct TraceArgs {
    /// Field angles, degrees [default: the prescription's].
    #[arg(long, value_delimiter = ',')]
    pub fields: Vec<f64>,
    /// Wavelengths, nm [default: the prescription's].
    #[arg(long, value_delimiter = ',')]
    pub wavelengths: Vec<f64>,
    /// Pupil grid size (n × n masked to the disk).
    #[arg(long)]
    pub pupil: Option<usize>,
    #[command(flatten)]
    pub pattern: PatternArgs,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct RenderFlags {
    #[arg(long)]
    pub grid: Option<usize>,
    /// PSF window size in pixels (odd).
    #[arg(long)]
    pub kernel: Option<usize>,
    /// PSF pixel pitch, µm.
    #[arg(long)]
    pub pitch: Option<f64>,
    #[arg(long)]
    pub pupil: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct PsfArgs {
    #[command(flatten)]
    pub render: RenderFlags,
    #[command(flatten)]
    pub pattern: PatternArgs,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct RenderArgs {
    /// Input PNG/PGM image.
    #[arg(long)]
    pub image: PathBuf,
    /// Resample the input to size × size first.
    #[arg(long)]
    pub size: Option<usize>,
    /// Noise standard deviation (full scale 1).
    #[arg(long)]
    pub noise: Option<f64>,
    #[command(flatten)]
    pub render: RenderFlags,
    #[command(flatten)]
    pub pattern: PatternArgs,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct GradcheckArgs {
    /// Image size of the batch.
    #[arg(long)]
    pub size: Option<usize>,
    /// Finite-difference step relative to each parameter's scale.
    #[arg(long)]
    pub step: Option<f64>,
    #[command(flatten)]
    pub render: RenderFlags,
    /// Scale the AD partial of a parameter, `name=factor` (test fault injection).
    #[arg(long, hide = true)]
    pub inject_fault: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct OptimizeArgs {
    /// pretrain | tolerance-aware
    #[arg(long)]
    pub stage: Option<Stage>,
    /// both | optics-only | decoder-only
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Tolerance patterns per iteration.
    #[arg(long)]
    pub patterns: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr_lens: Option<f64>,
    #[arg(long)]
    pub lr_decoder: Option<f64>,
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub render: RenderFlags,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also keep a checkpoint every n iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Training checkpoint: trained lens and decoder.
    #[arg(long, conflicts_with = "decoder")]
    pub checkpoint: Option<PathBuf>,
    /// Decoder JSON for the given lens [default: Wiener filters of the design].
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[command(flatten)]
    pub render: RenderFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct YieldArgs {
    /// samples.csv written by `evaluate`.
    #[arg(long)]
    pub samples: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Output directories of `evaluate` runs.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Row labels, one per run [default: directory names].
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Ray-trace settings of `trace` and `spot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    /// Empty: the prescription's fields.
    pub fields: Vec<f64>,
    /// Empty: the prescription's wavelengths.
    pub wavelengths: Vec<f64>,
    pub pupil_samples: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            fields: Vec::new(),
            wavelengths: Vec::new(),
            pupil_samples: 32,
        }
    }
}

/// Settings of `psf` and `render`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsfConfig {
    pub grid: usize,
    pub render: RenderSettings,
    pub noise_sigma: f64,
}

impl Default for PsfConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            render: RenderSettings::default(),
            noise_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSection {
    pub check: GradCheckConfig,
    pub grid: usize,
    pub image_size: usize,
    pub render: RenderSettings,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            check: GradCheckConfig::default(),
            grid: 4,
            image_size: 32,
            render: RenderSettings {
                kernel: 51,
                pitch_um: 5.0,
                pupil_samples: 12,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub trials: usize,
    pub settings: EvalSettings,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: 50,
            settings: EvalSettings::default(),
        }
    }
}

/// Every setting of a run. `seed`, `ranges` and `weights` at the top level are
/// authoritative and copied into the training section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lens: Option<String>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub ranges: ToleranceRange,
    pub weights: LossWeights,
    pub trace: TraceConfig,
    pub psf: PsfConfig,
    pub sample_count: usize,
    pub gradcheck: GradcheckSection,
    pub optimize: OptimizeConfig,
    pub evaluate: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lens: None,
            corpus: None,
            out: None,
            seed: 0,
            ranges: ToleranceRange::default(),
            weights: LossWeights::default(),
            trace: TraceConfig::default(),
            psf: PsfConfig::default(),
            sample_count: 16,
            gradcheck: GradcheckSection::default(),
            optimize: OptimizeConfig::default(),
            evaluate: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// A resolved invocation: what the manifest records and replay executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub invocation: Invocation,
    pub inputs: Vec<FileHash>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<FileHash>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Parse `args` (program name first), run, and map the outcome to an exit code:
/// 0 success, 1 invalid input or configuration, 2 numerical failure.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest, cli.global.out.as_deref());
    }
    let base = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = output_dir(cli.global.out.as_deref(), base.out.as_deref());
    let inv = resolve(&cli.global, &cli.command, base)?;
    execute(&inv, &out).map(|_| ())
}

fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.map(Path::to_path_buf))
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_render(r: &mut RenderSettings, grid: &mut usize, f: &RenderFlags) {
    set(grid, f.grid);
    set(&mut r.kernel, f.kernel);
    set(&mut r.pitch_um, f.pitch);
    set(&mut r.pupil_samples, f.pupil);
}

fn absolute_pattern(p: &mut PatternArgs) -> Result<()> {
    if let Some(path) = &p.pattern {
        p.pattern = Some(absolute(path)?);
    }
    Ok(())
}

/// Merge flags over `base` and make every input path absolute.
pub fn resolve(global: &GlobalArgs, command: &Command, base: RunConfig) -> Result<Invocation> {
    let mut c = base;
    let mut command = command.clone();
    set(&mut c.lens, global.lens.clone().map(Some));
    set(&mut c.corpus, global.corpus.clone().map(Some));
    set(&mut c.out, global.out.clone().map(Some));
    set(&mut c.seed, global.seed);
    set(&mut c.ranges.decenter_mm, global.decenter);
    set(&mut c.ranges.tilt_deg, global.tilt);
    set(&mut c.ranges.thickness_mm, global.thickness);
    set(&mut c.ranges.curvature_frac, global.curvature);
    set(&mut c.weights.spot, global.w_spot);
    set(&mut c.weights.psf, global.w_psf);
    set(&mut c.weights.mse, global.w_mse);
    set(&mut c.weights.tv, global.w_tv);

    match &mut command {
        Command::Trace(a) | Command::Spot(a) => {
            if !a.fields.is_empty() {
                c.trace.fields = a.fields.clone();
            }
            if !a.wavelengths.is_empty() {
                c.trace.wavelengths = a.wavelengths.clone();
            }
            set(&mut c.trace.pupil_samples, a.pupil);
            absolute_pattern(&mut a.pattern)?;
        }
        Command::Psf(a) => {
            apply_render(&mut c.psf.render, &mut c.psf.grid, &a.render);
            absolute_pattern(&mut a.pattern)?;
        }
        Command::Render(a) => {
            apply_render(&mut c.psf.render, &mut c.psf.grid, &a.render);
            set(&mut c.psf.noise_sigma, a.noise);
            a.image = absolute(&a.image)?;
            absolute_pattern(&mut a.pattern)?;
        }
        Command::Sample(a) => set(&mut c.sample_count, a.count),
        Command::Gradcheck(a) => {
            let g = &mut c.gradcheck;
            apply_render(&mut g.render, &mut g.grid, &a.render);
            set(&mut g.image_size, a.size);
            set(&mut g.check.step, a.step);
        }
        Command::Optimize(a) => {
            let o = &mut c.optimize;
            set(&mut o.stage, a.stage);
            set(&mut o.mode, a.mode);
            set(&mut o.n_patterns, a.patterns);
            set(&mut o.iterations, a.iters);
            set(&mut o.lr_lens, a.lr_lens);
            set(&mut o.lr_decoder, a.lr_decoder);
            set(&mut o.image_size, a.size);
            apply_render(&mut o.render, &mut o.grid, &a.render);
            if let Some(p) = &a.resume {
                a.resume = Some(absolute(p)?);
            }
            if a.checkpoint_every == Some(0) {
                return Err(Error::Config("--checkpoint-every must be >= 1".into()));
            }
        }
        Command::Evaluate(a) => {
            let e = &mut c.evaluate;
            set(&mut e.trials, a.trials);
            set(&mut e.settings.image_size, a.size);
            set(&mut e.settings.noise_sigma, a.noise);
            apply_render(&mut e.settings.render, &mut e.settings.grid, &a.render);
            if let Some(p) = &a.checkpoint {
                a.checkpoint = Some(absolute(p)?);
            }
            if let Some(p) = &a.decoder {
                a.decoder = Some(absolute(p)?);
            }
        }
        Command::Yield(a) => a.samples = absolute(&a.samples)?,
        Command::Report(a) => {
            for r in &mut a.runs {
                *r = absolute(r)?;
            }
        }
        Command::Replay(_) => return Err(Error::Config("replay cannot be resolved".into())),
    }
    c.optimize.seed = c.seed;
    c.optimize.ranges = c.ranges;
    c.optimize.weights = c.weights;

    if let Some(l) = &c.lens {
        if fixtures::by_name(l).is_none() {
            c.lens = Some(absolute(Path::new(l))?.to_string_lossy().into_owned());
        }
    }
    if let Some(p) = &c.corpus {
        c.corpus = Some(absolute(p)?);
    }
    c.ranges.validate()?;
    c.weights.validate()?;
    c.optimize.validate()?;
    c.psf.render.validate()?;
    c.gradcheck.render.validate()?;
    c.evaluate.settings.render.validate()?;
    if !(c.psf.noise_sigma >= 0.0 && c.evaluate.settings.noise_sigma >= 0.0) {
        return Err(Error::Config("noise sigma must be >= 0".into()));
    }
    Ok(Invocation { command, config: c })
}

/// Output directory under construction; tracks inputs and artifact hashes.
struct Outputs {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    artifacts: Vec<FileHash>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: absolute(dir)?,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    fn input(&mut self, p: &Path) {
        if !self.inputs.iter().any(|q| q == p) {
            self.inputs.push(p.to_path_buf());
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if self.inputs.contains(&path) {
            return Err(Error::Config(format!(
                "refusing to overwrite input {} with an output",
                path.display()
            )));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(FileHash {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn write_json<S: Serialize>(&mut self, rel: &str, value: &S) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn finish(mut self, inv: &Invocation) -> Result<Manifest> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.to_string_lossy().into_owned(),
                    sha256: hash_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            tool: "tolopt".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: inv.config.seed,
            invocation: inv.clone(),
            inputs,
            artifacts: self.artifacts,
        };
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn load_lens(config: &RunConfig, out: &mut Outputs) -> Result<LensPrescription> {
    let name = config
        .lens
        .as_deref()
        .ok_or_else(|| Error::Config("no lens given (--lens or `lens` in the config file)".into()))?;
    if let Some(l) = fixtures::by_name(name) {
        return Ok(l);
    }
    let path = Path::new(name);
    let lens = load_prescription(path)?;
    out.input(path);
    Ok(lens)
}

fn load_images(config: &RunConfig, size: usize, out: &mut Outputs) -> Result<Vec<SimImage>> {
    let dir = config.corpus.clone().unwrap_or_else(bundled_corpus_dir);
    for f in list_corpus(&dir)? {
        out.input(&f);
    }
    Ok(load_corpus(&dir, size)?.into_iter().map(|(_, i)| i).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatternSet {
    seed: u64,
    ranges: ToleranceRange,
    lens: String,
    patterns: Vec<TolerancePattern>,
}

/// The selected pattern and a short id for sidecars.
fn load_pattern(
    args: &PatternArgs,
    config: &RunConfig,
    lens: &LensPrescription,
    out: &mut Outputs,
) -> Result<(TolerancePattern, String)> {
    let (pattern, id) = if let Some(path) = &args.pattern {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        out.input(path);
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        };
        let id = format!(
            "{}#{}",
            path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default(),
            args.pattern_index
        );
        match serde_json::from_str::<TolerancePattern>(&text) {
            Ok(p) => (p, id),
            Err(_) => {
                let set: PatternSet = serde_json::from_str(&text).map_err(parse_err)?;
                let p = set.patterns.get(args.pattern_index).cloned().ok_or_else(|| {
                    Error::Config(format!(
                        "pattern index {} out of range ({} patterns in {})",
                        args.pattern_index,
                        set.patterns.len(),
                        path.display()
                    ))
                })?;
                (p, id)
            }
        }
    } else if args.perturb {
        let p = sample_pattern(&mut stream(config.seed, "cli-pattern", 0), &config.ranges, lens);
        (p, format!("seed:{}", config.seed))
    } else {
        (TolerancePattern::zero(lens), "design".to_string())
    };
    if pattern.groups.len() != lens.element_groups.len() || pattern.curvature_frac.len() != lens.surfaces.len() {
        return Err(Error::Dimension(format!(
            "pattern has {} groups / {} surfaces, lens {} has {} / {}",
            pattern.groups.len(),
            pattern.curvature_frac.len(),
            lens.name,
            lens.element_groups.len(),
            lens.surfaces.len()
        )));
    }
    realize_transforms(&pattern, lens)?;
    Ok((pattern, id))
}

/// Run a resolved invocation, writing into `out_dir`.
pub fn execute(inv: &Invocation, out_dir: &Path) -> Result<Manifest> {
    let mut out = Outputs::new(out_dir)?;
    let c = &inv.config;
    let outcome = match &inv.command {
        Command::Trace(a) => cmd_trace(a, c, &mut out, false),
        Command::Spot(a) => cmd_trace(a, c, &mut out, true),
        Command::Psf(a) => cmd_psf(a, c, &mut out),
        Command::Render(a) => cmd_render(a, c, &mut out),
        Command::Sample(_) => cmd_sample(c, &mut out),
        Command::Gradcheck(a) => cmd_gradcheck(a, c, &mut out),
        Command::Optimize(a) => cmd_optimize(a, c, &mut out),
        Command::Evaluate(a) => cmd_evaluate(a, c, &mut out),
        Command::Yield(a) => cmd_yield(a, &mut out),
        Command::Report(a) => cmd_report(a, &mut out),
        Command::Replay(_) => Err(Error::Config("nested replay".into())),
    };
    // Partial results of a failed run are still recorded.
    let manifest = out.finish(inv)?;
    outcome.map(|_| manifest)
}

fn replay(manifest_path: &Path, out: Option<&Path>) -> Result<()> {
    let m = Manifest::load(manifest_path)?;
    for input in &m.inputs {
        let now = hash_file(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(Error::Config(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let dir = output_dir(out, None);
    let again = execute(&m.invocation, &dir)?;
    let mut differing = Vec::new();
    for a in &m.artifacts {
        match again.artifacts.iter().find(|b| b.path == a.path) {
            Some(b) if b.sha256 == a.sha256 => {}
            _ => differing.push(a.path.clone()),
        }
    }
    if differing.is_empty() {
        println!("replay: {} artifacts identical", m.artifacts.len());
        Ok(())
    } else {
        Err(Error::Numerical(format!("replay differs in {}", differing.join(", "))))
    }
}

fn cmd_trace(a: &TraceArgs, c: &RunConfig, out: &mut Outputs, spot: bool) -> Result<()> {
    let _ = a;
    let lens = load_lens(c, out)?;
    let (pattern, pattern_id) = load_pattern(&a.pattern, c, &lens, out)?;
    let fields = if c.trace.fields.is_empty() { lens.fields.clone() } else { c.trace.fields.clone() };
    let wavelengths = if c.trace.wavelengths.is_empty() {
        lens.wavelengths.clone()
    } else {
        c.trace.wavelengths.clone()
    };
    let view = LensView::<f64>::plain(&lens);
    let transforms = realize_transforms(&pattern, &lens)?;
    let pupil = pupil_grid(c.trace.pupil_samples);
    let mut rays = String::from("field_deg,wavelength_nm,pupil_u,pupil_v,x_mm,y_mm,alive,death\n");
    let mut entries: Vec<SpotEntry> = Vec::new();
    for &f in &fields {
        let launch = launch_rays(&lens, &view, FieldPoint::on_y(f), &pupil)?;
        for &wl in &wavelengths {
            let idx = media_indices(&lens, wl)?;
            let hits = trace_launch(&launch, &view, &transforms, &idx, wl);
            for (h, (u, v)) in hits.iter().zip(&pupil) {
                let death = h.death.map(|(r, s)| format!("{r:?}@{s}")).unwrap_or_default();
                rays += &format!("{f},{wl},{u},{v},{},{},{},{death}\n", h.x, h.y, h.alive);
            }
            entries.push(spot_from_hits(f, wl, &hits)?);
        }
    }
    let title = format!("{} ({pattern_id})", lens.name);
    if spot {
        let mut s = String::from("field_deg,wavelength_nm,rms_um,centroid_x_mm,centroid_y_mm,rays,dead\n");
        for e in &entries {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                e.field_deg,
                e.wavelength_nm,
                e.rms_um,
                e.centroid.0,
                e.centroid.1,
                e.hits.len() + e.dead,
                e.dead
            );
            println!(
                "field {:7.3} deg  {:7.2} nm  rms {:8.3} um  dead {}",
                e.field_deg, e.wavelength_nm, e.rms_um, e.dead
            );
        }
        out.write("spots.csv", s.as_bytes())?;
        let mut hits = String::from("field_deg,wavelength_nm,x_mm,y_mm\n");
        for e in &entries {
            for h in &e.hits {
                hits += &format!("{},{},{},{}\n", e.field_deg, e.wavelength_nm, h.0, h.1);
            }
        }
        out.write("hits.csv", hits.as_bytes())?;
    } else {
        out.write("rays.csv", rays.as_bytes())?;
        println!("traced {} rays per field and wavelength", pupil.len());
    }
    out.write("spot.svg", spot_svg(&entries, &title).as_bytes())
}

fn render_map(lens: &LensPrescription, pattern: &TolerancePattern, grid: usize, render: RenderSettings) -> Result<PsfMap<f64>> {
    let view = LensView::<f64>::plain(lens);
    let geometry = MapGeometry::new(lens, &view, grid, render)?;
    assemble_map(lens, &view, &geometry, MapPatterns::Single(pattern))
}

#[derive(Serialize)]
struct PsfSidecar<'a> {
    file: String,
    row: usize,
    col: usize,
    field: FieldPoint,
    wavelength_nm: f64,
    pitch_um: f64,
    kernel: usize,
    pattern_id: &'a str,
    /// Intensity mapped to 65535 in the PGM.
    scale: f64,
    sum: f64,
    empty: bool,
}

fn cmd_psf(a: &PsfArgs, c: &RunConfig, out: &mut Outputs) -> Result<()> {
    let lens = load_lens(c, out)?;
    let (pattern, pattern_id) = load_pattern(&a.pattern, c, &lens, out)?;
    let map = render_map(&lens, &pattern, c.psf.grid, c.psf.render)?;
    let mut index = Vec::new();
    for (cell, mc) in map.cells.iter().enumerate() {
        let (row, col) = (cell / map.grid, cell % map.grid);
        for p in &mc.psfs {
            let name = format!("psf/r{row}_c{col}_{:.0}nm", p.wavelength_nm);
            let img = SimImage::new(p.k, p.k, p.pixels.clone())?;
            let scale = p.peak();
            out.write(&format!("{name}.pgm"), &img.to_pgm16(scale))?;
            let side = PsfSidecar {
                file: format!("{name}.pgm"),
                row,
                col,
                field: p.field,
                wavelength_nm: p.wavelength_nm,
                pitch_um: p.pitch_um,
                kernel: p.k,
                pattern_id: &pattern_id,
                scale,
                sum: p.sum(),
                empty: p.empty,
            };
            out.write_json(&format!("{name}.json"), &side)?;
            index.push(side);
        }
    }
    out.write_json("psf_map.json", &index)?;
    println!(
        "{} PSFs ({}x{} cells, {} empty), pattern {pattern_id}",
        index.len(),
        map.grid,
        map.grid,
        map.empty_cells()
    );
    Ok(())
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

fn cmd_render(a: &RenderArgs, c: &RunConfig, out: &mut Outputs) -> Result<()> {
    let lens = load_lens(c, out)?;
    let (pattern, pattern_id) = load_pattern(&a.pattern, c, &lens, out)?;
    out.input(&a.image);
    let mut img = SimImage::load(&a.image)?;
    if let Some(s) = a.size {
        img = img.resized(s, s);
    }
    let map = render_map(&lens, &pattern, c.psf.grid, c.psf.render)?;
    let regions = Regions::new(img.width, img.height, c.psf.grid)?;
    let blurred = convolve_sv(&img, &map_kernels(&map), &regions)?;
    let capture = add_noise(&blurred, c.psf.noise_sigma, &mut stream(c.seed, "render-noise", 0));
    out.write("capture.pgm", &capture.to_pgm16(1.0))?;
    let png = capture.to_png8().map_err(|message| Error::Image {
        path: out.dir.join("capture.png"),
        message,
    })?;
    out.write("capture.png", &png)?;
    println!(
        "rendered {}x{} capture through {}x{} PSF cells, pattern {pattern_id}",
        img.width, img.height, c.psf.grid, c.psf.grid
    );
    Ok(())
}

fn cmd_sample(c: &RunConfig, out: &mut Outputs) -> Result<()> {
    let lens = load_lens(c, out)?;
    let patterns: Vec<TolerancePattern> = (0..c.sample_count as u64)
        .map(|i| sample_pattern(&mut stream(c.seed, "sample", i), &c.ranges, &lens))
        .collect();
    let mut csv = String::from("index");
    for g in 0..lens.element_groups.len() {
        for k in ["dx_mm", "dy_mm", "dz_mm", "alpha_deg", "beta_deg", "gamma_deg"] {
            csv += &format!(",g{g}_{k}");
        }
    }
    for s in 0..lens.surfaces.len() {
        csv += &format!(",s{s}_curvature_frac");
    }
    csv.push('\n');
    for (i, p) in patterns.iter().enumerate() {
        csv += &i.to_string();
        for v in p.scalars() {
            csv += &format!(",{v}");
        }
        csv.push('\n');
    }
    out.write("patterns.csv", csv.as_bytes())?;
    out.write_json(
        "patterns.json",
        &PatternSet {
            seed: c.seed,
            ranges: c.ranges,
            lens: lens.name.clone(),
            patterns,
        },
    )?;
    println!("{} patterns for {} (seed {})", c.sample_count, lens.name, c.seed);
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, c: &RunConfig, out: &mut Outputs) -> Result<()> {
    let lens = load_lens(c, out)?;
    let g = &c.gradcheck;
    let config = OptimizeConfig {
        grid: g.grid,
        image_size: g.image_size,
        render: g.render,
        ..c.optimize.clone()
    };
    let images = load_images(c, g.image_size, out)?;
    let params = lens_parameters(&lens);
    let mut seeds = vec![1.0; params.len()];
    for f in &a.inject_fault {
        let (name, factor) = f
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("fault `{f}` is not name=factor")))?;
        let i = params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("no lens parameter named {name}")))?;
        seeds[i] = factor
            .parse()
            .map_err(|_| Error::Config(format!("bad fault factor in `{f}`")))?;
    }
    let report = gradcheck(&lens, &config, images, None, &g.check, &seeds)?;
    print!("{}", report.table());
    out.write("gradcheck.csv", report.csv().as_bytes())?;
    out.write_json("gradcheck.json", &report)?;
    match failure(&report) {
        Some(e) => Err(e),
        None => {
            println!("all {} gradients agree", report.rows.len());
            Ok(())
        }
    }
}

fn cmd_optimize(a: &OptimizeArgs, c: &RunConfig, out: &mut Outputs) -> Result<()> {
    let lens = load_lens(c, out)?;
    let o = &c.optimize;
    let images = load_images(c, o.image_size, out)?;
    let trainer = Trainer::new(lens.clone(), o.clone(), images)?;
    let mut state = match &a.resume {
        Some(p) => {
            out.input(p);
            TrainState::load(p)?
        }
        None => trainer.init_state(None)?,
    };
    let every = a.checkpoint_every;
    let mut snapshots: Vec<(u64, String)> = Vec::new();
    let outcome = trainer.run(&mut state, o.iterations, |s, r| {
        println!(
            "{} {:5} total {:.6e} spot {:.4} psf {:.5} image {:.6e}",
            r.stage, r.iteration, r.total, r.spot, r.psf, r.image
        );
        if let Some(n) = every {
            if s.iteration % n as u64 == 0 {
                snapshots.push((s.iteration, s.to_json_string()));
            }
        }
    });
    for (it, json) in &snapshots {
        out.write(&format!("checkpoints/iter_{it:06}.json"), json.as_bytes())?;
    }
    out.write("checkpoint.json", state.to_json_string().as_bytes())?;
    out.write("loss.csv", history_csv(&state.history).as_bytes())?;
    let trained = trained_lens(&lens, &state)?;
    out.write("lens.json", trained.to_json_string().as_bytes())?;
    out.write("decoder.json", state.decoder.to_json_string().as_bytes())?;
    outcome
}

fn cmd_evaluate(a: &EvaluateArgs, c: &RunConfig, out: &mut Outputs) -> Result<()> {
    let base = load_lens(c, out)?;
    let s = &c.evaluate.settings;
    let (lens, decoder) = if let Some(p) = &a.checkpoint {
        out.input(p);
        let st = TrainState::load(p)?;
        (trained_lens(&base, &st)?, st.decoder)
    } else if let Some(p) = &a.decoder {
        out.input(p);
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        (base, DecoderParams::from_json_str(&text, p)?)
    } else {
        let d = design_decoder(&base, s.grid, s.render, DEFAULT_DECODER_KERNEL, DEFAULT_NSR)?;
        (base, d)
    };
    let corpus = load_images(c, s.image_size, out)?;
    let report = monte_carlo_eval(&lens, &decoder, &c.ranges, c.evaluate.trials, &corpus, c.seed, s)?;
    out.write_json("yield_report.json", &report)?;
    out.write("samples.csv", samples_csv(&report.samples).as_bytes())?;
    out.write(
        "psnr_histogram.svg",
        histogram_svg(&report.psnr_histogram, &format!("{}: PSNR over {} trials", lens.name, report.samples.len()), "PSNR (dB)").as_bytes(),
    )?;
    let ssims: Vec<f64> = report.samples.iter().map(|m| m.ssim).collect();
    out.write(
        "ssim_histogram.svg",
        histogram_svg(&histogram(&ssims, 20), &format!("{}: SSIM over {} trials", lens.name, report.samples.len()), "SSIM").as_bytes(),
    )?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &YieldReport) {
    println!(
        "mean PSNR {:.3} dB  SSIM {:.4}  PSF similarity {:.4}  spot {:.3} um (design {:.3} um)  failures {}",
        r.mean_psnr, r.mean_ssim, r.mean_psf_similarity, r.mean_spot, r.design_spot, r.failures
    );
    print_thresholds(&r.thresholds);
}

fn print_thresholds(t: &[YieldThreshold]) {
    for y in t {
        println!("  {:3}% of trials reach PSNR {:.3} dB, SSIM {:.4}", y.confidence_pct, y.psnr, y.ssim);
    }
}

#[derive(Serialize)]
struct YieldSummary {
    trials: usize,
    failures: usize,
    thresholds: Vec<YieldThreshold>,
}

fn cmd_yield(a: &YieldArgs, out: &mut Outputs) -> Result<()> {
    out.input(&a.samples);
    let text = std::fs::read_to_string(&a.samples).map_err(|e| Error::io(&a.samples, e))?;
    let samples = parse_samples_csv(&text)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("{} has no samples", a.samples.display())));
    }
    let t = thresholds(&samples);
    let mut csv = String::from("confidence_pct,psnr,ssim\n");
    for y in &t {
        csv += &format!("{},{},{}\n", y.confidence_pct, y.psnr, y.ssim);
    }
    out.write("yield.csv", csv.as_bytes())?;
    out.write_json(
        "yield.json",
        &YieldSummary {
            trials: samples.len(),
            failures: samples.iter().filter(|s| s.failed).count(),
            thresholds: t.clone(),
        },
    )?;
    print_thresholds(&t);
    Ok(())
}

fn cmd_report(a: &ReportArgs, out: &mut Outputs) -> Result<()> {
    if !a.labels.is_empty() && a.labels.len() != a.runs.len() {
        return Err(Error::Config(format!("{} labels for {} runs", a.labels.len(), a.runs.len())));
    }
    let mut rows = Vec::new();
    for (i, dir) in a.runs.iter().enumerate() {
        let path = dir.join("yield_report.json");
        out.input(&path);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let r: YieldReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let label = a.labels.get(i).cloned().unwrap_or_else(|| {
            dir.file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{i}"))
        });
        rows.push((label, r));
    }
    let pct: Vec<u32> = rows
        .first()
        .map(|(_, r)| r.thresholds.iter().map(|t| t.confidence_pct).collect())
        .unwrap_or_default();
    let mut csv = String::from("run,trials,design_spot_um,mc_spot_um,mean_psnr,mean_ssim,mean_psf_similarity,failures");
    let mut md = String::from("| run | trials | spot design (µm) | spot MC (µm) | PSNR | SSIM | PSF sim. | failures |");
    for p in &pct {
        csv += &format!(",yield_psnr_{p}");
        md += &format!(" Y0 {p}% |");
    }
    csv.push('\n');
    md += "\n|---|---|---|---|---|---|---|---|";
    md += &"---|".repeat(pct.len());
    md.push('\n');
    for (label, r) in &rows {
        csv += &format!(
            "{label},{},{},{},{},{},{},{}",
            r.samples.len(),
            r.design_spot,
            r.mean_spot,
            r.mean_psnr,
            r.mean_ssim,
            r.mean_psf_similarity,
            r.failures
        );
        md += &format!(
            "| {label} | {} | {:.2} | {:.2} | {:.2} | {:.4} | {:.4} | {} |",
            r.samples.len(),
            r.design_spot,
            r.mean_spot,
            r.mean_psnr,
            r.mean_ssim,
            r.mean_psf_similarity,
            r.failures
        );
        for p in &pct {
            let v = r.thresholds.iter().find(|t| t.confidence_pct == *p).map(|t| t.psnr).unwrap_or(f64::NAN);
            csv += &format!(",{v}");
            md += &format!(" {v:.2} |");
        }
        csv.push('\n');
        md.push('\n');
    }
    out.write("report.csv", csv.as_bytes())?;
    out.write("report.md", md.as_bytes())?;
    print!("{md}");
    Ok(())
}
