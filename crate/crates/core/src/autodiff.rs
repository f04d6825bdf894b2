//! Forward-mode differentiation with dense partials.
//!
//! A [`DiffScalar`] carries a value and the vector of partial derivatives with
//! respect to the registered parameters of a [`ParameterSet`]. Constants carry an
//! empty partials vector, which every operation treats as all zeros; results are as
//! long as the longest operand.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::lens::LensPrescription;
use crate::math::Real;
use crate::raytrace::LensView;

/// Inline capacity; lens parameter counts stay below this so tracing never allocates.
const INLINE: usize = 16;

type Partials = SmallVec<[f64; INLINE]>;

#[derive(Clone, PartialEq)]
pub struct DiffScalar {
    value: f64,
    partials: Partials,
}

impl fmt::Debug for DiffScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:?}", self.value, self.partials.as_slice())
    }
}

impl DiffScalar {
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            partials: Partials::new(),
        }
    }

    /// Independent variable number `index` out of `count`, seeded with `seed`
    /// (normally 1).
    pub fn variable(value: f64, index: usize, count: usize, seed: f64) -> Self {
        let mut partials = Partials::from_elem(0.0, count);
        partials[index] = seed;
        Self { value, partials }
    }

    pub fn from_parts(value: f64, partials: Vec<f64>) -> Self {
        Self {
            value,
            partials: Partials::from_vec(partials),
        }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn partials(&self) -> &[f64] {
        &self.partials
    }

    /// Partial `i`, zero when beyond the stored length.
    pub fn partial(&self, i: usize) -> f64 {
        self.partials.get(i).copied().unwrap_or(0.0)
    }

    /// Partials padded (or checked) to `len` entries.
    pub fn partials_padded(&self, len: usize) -> Vec<f64> {
        let mut v = self.partials.to_vec();
        v.resize(len.max(v.len()), 0.0);
        v
    }

    fn map(self, value: f64, dfdx: f64) -> Self {
        let mut partials = self.partials;
        if dfdx == 0.0 {
            partials.iter_mut().for_each(|p| *p = 0.0);
        } else {
            partials.iter_mut().for_each(|p| *p *= dfdx);
        }
        Self { value, partials }
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.map(s, c)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.map(c, -s)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.map(e, e)
    }

    pub fn ln(self) -> Self {
        let v = self.value;
        self.map(v.ln(), 1.0 / v)
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(self) -> Self {
        let v = self.value;
        let d = if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.map(v.abs(), d)
    }

    pub fn powi(self, n: i32) -> Self {
        let v = self.value;
        self.map(v.powi(n), n as f64 * v.powi(n - 1))
    }

    /// Scale both value and partials by a constant.
    pub fn scaled(mut self, k: f64) -> Self {
        self.value *= k;
        self.partials.iter_mut().for_each(|p| *p *= k);
        self
    }

    /// `self += k * o` without allocating a temporary.
    pub fn add_scaled(&mut self, o: &DiffScalar, k: f64) {
        self.value += k * o.value;
        if self.partials.len() < o.partials.len() {
            self.partials.resize(o.partials.len(), 0.0);
        }
        for (p, q) in self.partials.iter_mut().zip(o.partials.iter()) {
            *p += k * q;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.partials.iter().all(|p| p.is_finite())
    }
}

impl Real for DiffScalar {
    fn cst(v: f64) -> Self {
        DiffScalar::constant(v)
    }
    fn val(&self) -> f64 {
        self.value
    }
    /// Square root; the partials at exactly zero are taken as zero.
    fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.map(s, d)
    }
    fn sq(&self) -> Self {
        let v = self.value;
        self.clone().map(v * v, 2.0 * v)
    }
    fn is_constant(&self) -> bool {
        self.partials.iter().all(|&p| p == 0.0)
    }
}

impl Add for DiffScalar {
    type Output = DiffScalar;
    fn add(mut self, rhs: DiffScalar) -> DiffScalar {
        self.add_scaled(&rhs, 1.0);
        self
    }
}

impl AddAssign<&DiffScalar> for DiffScalar {
    fn add_assign(&mut self, rhs: &DiffScalar) {
        self.add_scaled(rhs, 1.0);
    }
}

impl Sub for DiffScalar {
    type Output = DiffScalar;
    fn sub(mut self, rhs: DiffScalar) -> DiffScalar {
        self.add_scaled(&rhs, -1.0);
        self
    }
}

impl Mul for DiffScalar {
    type Output = DiffScalar;
    fn mul(self, rhs: DiffScalar) -> DiffScalar {
        let (a, b) = (self.value, rhs.value);
        let (mut long, short, kl, ks) = if self.partials.len() >= rhs.partials.len() {
            (self.partials, rhs.partials, b, a)
        } else {
            (rhs.partials, self.partials, a, b)
        };
        for p in long.iter_mut() {
            *p *= kl;
        }
        for (p, q) in long.iter_mut().zip(short.iter()) {
            *p += ks * q;
        }
        DiffScalar {
            value: a * b,
            partials: long,
        }
    }
}

impl Div for DiffScalar {
    type Output = DiffScalar;
    fn div(self, rhs: DiffScalar) -> DiffScalar {
        let inv_b = 1.0 / rhs.value;
        let q = self.value / rhs.value;
        // d(a/b) = (da - q db) / b
        let mut out = self.scaled(inv_b);
        out.value = q;
        out.add_scaled(&rhs, -q * inv_b);
        out.value = q;
        out
    }
}

impl Neg for DiffScalar {
    type Output = DiffScalar;
    fn neg(self) -> DiffScalar {
        self.scaled(-1.0)
    }
}

impl Add<f64> for DiffScalar {
    type Output = DiffScalar;
    fn add(mut self, rhs: f64) -> DiffScalar {
        self.value += rhs;
        self
    }
}

impl Sub<f64> for DiffScalar {
    type Output = DiffScalar;
    fn sub(mut self, rhs: f64) -> DiffScalar {
        self.value -= rhs;
        self
    }
}

impl Mul<f64> for DiffScalar {
    type Output = DiffScalar;
    fn mul(self, rhs: f64) -> DiffScalar {
        self.scaled(rhs)
    }
}

impl Div<f64> for DiffScalar {
    type Output = DiffScalar;
    fn div(self, rhs: f64) -> DiffScalar {
        let v = self.value / rhs;
        let mut out = self.scaled(1.0 / rhs);
        out.value = v;
        out
    }
}

/// What a registered parameter controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Curvature,
    Thickness,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub role: ParamRole,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Ordered optimizable parameters. Lens parameters always precede decoder
/// parameters so that lens partial indices coincide with global indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Parameter) -> Result<()> {
        if self.params.iter().any(|q| q.name == p.name) {
            return Err(Error::Parameter(format!("duplicate parameter name {}", p.name)));
        }
        if p.role != ParamRole::Decoder && self.params.iter().any(|q| q.role == ParamRole::Decoder) {
            return Err(Error::Parameter(format!(
                "lens parameter {} registered after decoder parameters",
                p.name
            )));
        }
        if !(p.lower <= p.value && p.value <= p.upper) {
            return Err(Error::Parameter(format!(
                "parameter {} = {} outside bounds [{}, {}]",
                p.name, p.value, p.lower, p.upper
            )));
        }
        self.params.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of leading non-decoder parameters.
    pub fn lens_count(&self) -> usize {
        self.params.iter().take_while(|p| p.role != ParamRole::Decoder).count()
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    /// Overwrite values, clamping each into its bounds.
    pub fn set_values(&mut self, values: &[f64]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clamp(p.lower, p.upper);
        }
    }

    pub fn set_value(&mut self, i: usize, v: f64) {
        let p = &mut self.params[i];
        p.value = v.clamp(p.lower, p.upper);
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn truncate(&mut self, n: usize) {
        self.params.truncate(n);
    }
}

/// Extract the gradient of `loss` over `params`, failing on the first non-finite
/// partial with the offending parameter name.
pub fn gradient(loss: &DiffScalar, params: &ParameterSet) -> Result<Vec<f64>> {
    if loss.partials().len() > params.len() {
        return Err(Error::Parameter(format!(
            "loss carries {} partials but only {} parameters are registered",
            loss.partials().len(),
            params.len()
        )));
    }
    let g = loss.partials_padded(params.len());
    if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("gradient w.r.t. {}", params.get(i).name),
            value: *v,
        });
    }
    Ok(g)
}

/// Parameter name for the curvature of surface `i`.
pub fn curvature_name(i: usize) -> String {
    format!("curvature.{i}")
}

/// Parameter name for the axial distance after surface `i`.
pub fn thickness_name(i: usize) -> String {
    format!("thickness.{i}")
}

/// Every curvature of a non-stop surface and every axial distance, with bounds
/// that keep each surface inside its hemisphere and each gap positive.
pub fn lens_parameters(lens: &LensPrescription) -> ParameterSet {
    let mut set = ParameterSet::new();
    for (i, s) in lens.surfaces.iter().enumerate() {
        if s.is_stop {
            continue;
        }
        let limit = 0.95 / s.semi_diameter;
        let lo = (s.curvature - 0.02).max(-limit).min(s.curvature);
        let hi = (s.curvature + 0.02).min(limit).max(s.curvature);
        set.push(Parameter {
            name: curvature_name(i),
            role: ParamRole::Curvature,
            value: s.curvature,
            lower: lo,
            upper: hi,
        })
        .expect("fresh names");
    }
    for (i, s) in lens.surfaces.iter().enumerate() {
        set.push(Parameter {
            name: thickness_name(i),
            role: ParamRole::Thickness,
            value: s.thickness,
            lower: (0.5 * s.thickness).max(0.05).min(s.thickness),
            upper: 1.5 * s.thickness + 1.0,
        })
        .expect("fresh names");
    }
    set
}

/// Write the current lens parameter values back into a prescription copy.
pub fn apply_parameters(lens: &LensPrescription, params: &ParameterSet) -> Result<LensPrescription> {
    let mut out = lens.clone();
    for p in params.iter() {
        match resolve(lens, p)? {
            Slot::Curvature(i) => out.surfaces[i].curvature = p.value,
            Slot::Thickness(i) => out.surfaces[i].thickness = p.value,
            Slot::Decoder => {}
        }
    }
    Ok(out)
}

enum Slot {
    Curvature(usize),
    Thickness(usize),
    Decoder,
}

fn resolve(lens: &LensPrescription, p: &Parameter) -> Result<Slot> {
    let index = |prefix: &str| -> Option<usize> {
        p.name
            .strip_prefix(prefix)
            .and_then(|rest| rest.parse::<usize>().ok())
            .filter(|&i| i < lens.surfaces.len())
    };
    let slot = match p.role {
        ParamRole::Curvature => index("curvature.").map(Slot::Curvature),
        ParamRole::Thickness => index("thickness.").map(Slot::Thickness),
        ParamRole::Decoder => p.name.starts_with("decoder.").then_some(Slot::Decoder),
    };
    slot.ok_or_else(|| Error::Parameter(format!("parameter {} maps to no surface or decoder slot", p.name)))
}

/// Differentiable view of `lens` in which every lens parameter of `params` is an
/// independent variable. Decoder parameters occupy partial slots but do not touch
/// the geometry.
pub fn lift(lens: &LensPrescription, params: &ParameterSet) -> Result<LensView<DiffScalar>> {
    lift_seeded(lens, params, &[])
}

/// As [`lift`], with per-parameter seeds for the partials (missing entries are 1).
/// A seed other than 1 scales that parameter's derivative; used for fault injection.
pub fn lift_seeded(lens: &LensPrescription, params: &ParameterSet, seeds: &[f64]) -> Result<LensView<DiffScalar>> {
    let n = params.lens_count();
    let mut curvature: Vec<DiffScalar> = lens.surfaces.iter().map(|s| DiffScalar::constant(s.curvature)).collect();
    let mut thickness: Vec<DiffScalar> = lens.surfaces.iter().map(|s| DiffScalar::constant(s.thickness)).collect();
    for (k, p) in params.iter().enumerate() {
        let seed = seeds.get(k).copied().unwrap_or(1.0);
        match resolve(lens, p)? {
            Slot::Curvature(i) => curvature[i] = DiffScalar::variable(p.value, k, n, seed),
            Slot::Thickness(i) => thickness[i] = DiffScalar::variable(p.value, k, n, seed),
            Slot::Decoder => {}
        }
    }
    Ok(LensView::from_parts(lens, curvature, thickness))
}
