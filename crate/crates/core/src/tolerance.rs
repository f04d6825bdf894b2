//! Manufacturing and assembly tolerances.
//!
//! Each element group (singlet or cemented group) receives an independent rigid
//! perturbation (decenter, axial shift from central-thickness error, tilt about the
//! group's front vertex) and each surface an independent fractional curvature error.
//! Every scalar is drawn from `N(0, (max/3)²)` and clamped to `[-max, max]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::LensPrescription;
use crate::math::{Mat3, Real, Vec3};

/// Maximum magnitude of each tolerance category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToleranceRange {
    pub decenter_mm: f64,
    pub tilt_deg: f64,
    pub thickness_mm: f64,
    /// Fractional, e.g. 0.003 for ±0.3 %.
    pub curvature_frac: f64,
}

impl Default for ToleranceRange {
    fn default() -> Self {
        Self {
            decenter_mm: 0.04,
            tilt_deg: 0.05,
            thickness_mm: 0.04,
            curvature_frac: 0.003,
        }
    }
}

impl ToleranceRange {
    pub const ZERO: ToleranceRange = ToleranceRange {
        decenter_mm: 0.0,
        tilt_deg: 0.0,
        thickness_mm: 0.0,
        curvature_frac: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("decenter", self.decenter_mm),
            ("tilt", self.tilt_deg),
            ("thickness", self.thickness_mm),
            ("curvature", self.curvature_frac),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} tolerance max must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Same ranges multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            decenter_mm: self.decenter_mm * k,
            tilt_deg: self.tilt_deg * k,
            thickness_mm: self.thickness_mm * k,
            curvature_frac: self.curvature_frac * k,
        }
    }
}

/// Rigid perturbation of one element group, in lens-motion terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupTolerance {
    pub dx_mm: f64,
    pub dy_mm: f64,
    pub dz_mm: f64,
    pub alpha_deg: f64,
    pub beta_deg: f64,
    pub gamma_deg: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TolerancePattern {
    pub groups: Vec<GroupTolerance>,
    /// Fractional curvature error of every surface.
    pub curvature_frac: Vec<f64>,
}

impl TolerancePattern {
    /// The as-designed pattern for `lens`.
    pub fn zero(lens: &LensPrescription) -> Self {
        Self {
            groups: vec![GroupTolerance::default(); lens.element_groups.len()],
            curvature_frac: vec![0.0; lens.surfaces.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.groups.iter().all(|g| *g == GroupTolerance::default())
            && self.curvature_frac.iter().all(|&c| c == 0.0)
    }

    /// Every scalar of the pattern, groups first.
    pub fn scalars(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .groups
            .iter()
            .flat_map(|g| [g.dx_mm, g.dy_mm, g.dz_mm, g.alpha_deg, g.beta_deg, g.gamma_deg])
            .collect();
        v.extend_from_slice(&self.curvature_frac);
        v
    }
}

/// One scalar from `N(0, (max/3)²)`, not clamped.
pub fn draw_unclamped<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * (max / 3.0)
}

/// One scalar from `N(0, (max/3)²)` clamped to `[-max, max]`.
pub fn draw<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    // + 0.0 folds a negative zero into +0
    draw_unclamped(rng, max).clamp(-max, max) + 0.0
}

pub fn sample_pattern<R: Rng + ?Sized>(
    rng: &mut R,
    ranges: &ToleranceRange,
    lens: &LensPrescription,
) -> TolerancePattern {
    let groups = lens
        .element_groups
        .iter()
        .map(|_| GroupTolerance {
            dx_mm: draw(rng, ranges.decenter_mm),
            dy_mm: draw(rng, ranges.decenter_mm),
            dz_mm: draw(rng, ranges.thickness_mm),
            alpha_deg: draw(rng, ranges.tilt_deg),
            beta_deg: draw(rng, ranges.tilt_deg),
            gamma_deg: draw(rng, ranges.tilt_deg),
        })
        .collect();
    let curvature_frac = lens
        .surfaces
        .iter()
        .map(|_| draw(rng, ranges.curvature_frac))
        .collect();
    TolerancePattern { groups, curvature_frac }
}

/// Per-surface coordinate-system transform.
///
/// A lens that moved by `x ↦ R_lens (x - p) + p + T` (pivot `p` on the axis at the
/// group's front vertex) is traced by moving the ray the opposite way:
/// `x' = rotation · (x + translation - p) + p` with `rotation = R_lensᵀ` and
/// `translation = -T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceTransform {
    pub rotation: Mat3Serde,
    pub translation: [f64; 3],
    /// Surface whose vertex is the tilt pivot.
    pub pivot_surface: usize,
    pub curvature_frac: f64,
    /// Δc in mm⁻¹ relative to the designed curvature at realization time.
    pub curvature_offset: f64,
}

/// Serde wrapper for a rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3Serde(pub [[f64; 3]; 3]);

impl From<Mat3> for Mat3Serde {
    fn from(m: Mat3) -> Self {
        Mat3Serde(m.0)
    }
}

impl SurfaceTransform {
    pub fn identity(surface: usize) -> Self {
        Self {
            rotation: Mat3::IDENTITY.into(),
            translation: [0.0; 3],
            pivot_surface: surface,
            curvature_frac: 0.0,
            curvature_offset: 0.0,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        Mat3(self.rotation.0)
    }

    /// No rigid motion (curvature may still be perturbed).
    pub fn is_rigid_identity(&self) -> bool {
        self.rotation().is_identity() && self.translation == [0.0; 3]
    }

    pub fn is_identity(&self) -> bool {
        self.is_rigid_identity() && self.curvature_frac == 0.0
    }

    /// Lens motion `(R_lens, T)` this coordinate transform undoes.
    pub fn lens_motion(&self) -> (Mat3, [f64; 3]) {
        let t = self.translation;
        (self.rotation().transpose(), [-t[0], -t[1], -t[2]])
    }

    /// World point into the element frame.
    pub fn to_local_point<T: Real>(&self, p: &Vec3<T>, pivot_z: &T) -> Vec3<T> {
        let t = &self.translation;
        let rel = Vec3::new(
            p.x.clone() + t[0],
            p.y.clone() + t[1],
            p.z.clone() + t[2] - pivot_z.clone(),
        );
        let mut r = self.rotation().apply(&rel);
        r.z = r.z + pivot_z.clone();
        r
    }

    pub fn to_local_dir<T: Real>(&self, d: &Vec3<T>) -> Vec3<T> {
        self.rotation().apply(d)
    }

    /// Element-frame point back to world coordinates.
    pub fn to_world_point<T: Real>(&self, p: &Vec3<T>, pivot_z: &T) -> Vec3<T> {
        let t = &self.translation;
        let rel = Vec3::new(p.x.clone(), p.y.clone(), p.z.clone() - pivot_z.clone());
        let r = self.rotation().transpose().apply(&rel);
        Vec3::new(r.x - t[0], r.y - t[1], r.z + pivot_z.clone() - t[2])
    }

    pub fn to_world_dir<T: Real>(&self, d: &Vec3<T>) -> Vec3<T> {
        self.rotation().transpose().apply(d)
    }
}

/// Lens-motion rotation `Rz(γ)·Ry(β)·Rx(α)` for angles in degrees.
pub fn lens_rotation(alpha_deg: f64, beta_deg: f64, gamma_deg: f64) -> Mat3 {
    Mat3::rot_z(gamma_deg.to_radians())
        .mul(&Mat3::rot_y(beta_deg.to_radians()))
        .mul(&Mat3::rot_x(alpha_deg.to_radians()))
}

pub fn realize_transforms(pattern: &TolerancePattern, lens: &LensPrescription) -> Result<Vec<SurfaceTransform>> {
    if pattern.groups.len() != lens.element_groups.len() {
        return Err(Error::Dimension(format!(
            "pattern has {} groups, prescription has {}",
            pattern.groups.len(),
            lens.element_groups.len()
        )));
    }
    if pattern.curvature_frac.len() != lens.surfaces.len() {
        return Err(Error::Dimension(format!(
            "pattern has {} curvature entries, prescription has {} surfaces",
            pattern.curvature_frac.len(),
            lens.surfaces.len()
        )));
    }
    let mut out: Vec<SurfaceTransform> = (0..lens.surfaces.len()).map(SurfaceTransform::identity).collect();
    for (members, g) in lens.element_groups.iter().zip(&pattern.groups) {
        let front = members[0];
        let rotation = lens_rotation(g.alpha_deg, g.beta_deg, g.gamma_deg).transpose();
        let translation = [-g.dx_mm + 0.0, -g.dy_mm + 0.0, -g.dz_mm + 0.0];
        for &s in members {
            out[s].rotation = rotation.into();
            out[s].translation = translation;
            out[s].pivot_surface = front;
        }
    }
    for (i, t) in out.iter_mut().enumerate() {
        t.curvature_frac = pattern.curvature_frac[i];
        t.curvature_offset = pattern.curvature_frac[i] * lens.surfaces[i].curvature;
    }
    Ok(out)
}
