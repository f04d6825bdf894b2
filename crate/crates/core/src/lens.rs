//! Lens prescriptions: spherical surfaces, materials, fields and wavelengths.
//!
//! Prescription files are JSON documents laid out like a classic lens data table:
//!
//! ```json
//! {
//!   "name": "lens1",
//!   "object_distance_mm": 1000.0,
//!   "surfaces": [
//!     { "radius_mm": 22.01, "distance_mm": 3.26, "diameter_mm": 19.0, "nd": 1.62041, "vd": 60.323649 },
//!     { "radius_mm": "INFINITY", "distance_mm": 4.75, "diameter_mm": 10.0, "stop": true }
//!   ],
//!   "image_diameter_mm": 10.14,
//!   "element_groups": [[0, 1]],
//!   "wavelengths_nm": [486.13, 587.56, 656.27],
//!   "field_angles_deg": [0.0, 10.0, 20.0]
//! }
//! ```
//!
//! `nd` may be omitted or given as `"AIR"`. `distance_mm` of the last surface is the
//! image distance. `curvature_per_mm`, when present, overrides `radius_mm`; the writer
//! emits it whenever the radius alone would not reproduce the curvature bit-exactly.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const F_LINE_NM: f64 = 486.13;
pub const D_LINE_NM: f64 = 587.56;
pub const C_LINE_NM: f64 = 656.27;

pub const DEFAULT_WAVELENGTHS_NM: [f64; 3] = [F_LINE_NM, D_LINE_NM, C_LINE_NM];

const BAND_NM: (f64, f64) = (400.0, 800.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub nd: f64,
    pub vd: f64,
    pub is_air: bool,
}

impl MaterialSpec {
    pub const AIR: MaterialSpec = MaterialSpec {
        nd: 1.0,
        vd: 0.0,
        is_air: true,
    };

    pub fn glass(nd: f64, vd: f64) -> Self {
        Self { nd, vd, is_air: false }
    }

    /// Coefficients `(A, B)` of `n(λ) = A + B/λ²`, λ in micrometres, pinned to
    /// `nd` at the d line and to `(nd - 1)/vd` for `n(F) - n(C)`.
    pub fn cauchy_coefficients(&self) -> (f64, f64) {
        if self.is_air {
            return (1.0, 0.0);
        }
        let inv_sq = |nm: f64| {
            let um = nm * 1e-3;
            1.0 / (um * um)
        };
        let b = (self.nd - 1.0) / self.vd / (inv_sq(F_LINE_NM) - inv_sq(C_LINE_NM));
        let a = self.nd - b * inv_sq(D_LINE_NM);
        (a, b)
    }

    pub fn refractive_index(&self, wavelength_nm: f64) -> Result<f64> {
        if !(BAND_NM.0..=BAND_NM.1).contains(&wavelength_nm) {
            return Err(Error::WavelengthOutOfBand(wavelength_nm));
        }
        if self.is_air {
            return Ok(1.0);
        }
        let (a, b) = self.cauchy_coefficients();
        let um = wavelength_nm * 1e-3;
        Ok(a + b / (um * um))
    }
}

/// Free-function form of [`MaterialSpec::refractive_index`].
pub fn refractive_index(material: &MaterialSpec, wavelength_nm: f64) -> Result<f64> {
    material.refractive_index(wavelength_nm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    /// 1/radius in mm⁻¹, zero for a plane.
    pub curvature: f64,
    /// Axial distance to the next surface (or the image plane), mm.
    pub thickness: f64,
    pub semi_diameter: f64,
    pub material_after: MaterialSpec,
    pub is_stop: bool,
}

impl Surface {
    pub fn radius(&self) -> f64 {
        curvature_to_radius(self.curvature)
    }
}

pub fn radius_to_curvature(radius: f64) -> f64 {
    if radius.is_infinite() || radius == 0.0 {
        0.0
    } else {
        1.0 / radius
    }
}

pub fn curvature_to_radius(curvature: f64) -> f64 {
    if curvature == 0.0 {
        f64::INFINITY
    } else {
        1.0 / curvature
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensPrescription {
    pub name: String,
    pub object_distance: f64,
    pub surfaces: Vec<Surface>,
    pub element_groups: Vec<Vec<usize>>,
    pub wavelengths: Vec<f64>,
    pub fields: Vec<f64>,
    pub image_semi_diameter: f64,
}

/// One broken invariant, with where it happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.rule)
    }
}

impl LensPrescription {
    /// Axial position of every surface vertex; surface 0 sits at z = 0.
    pub fn vertex_z(&self) -> Vec<f64> {
        let mut z = 0.0;
        self.surfaces
            .iter()
            .map(|s| {
                let here = z;
                z += s.thickness;
                here
            })
            .collect()
    }

    pub fn image_z(&self) -> f64 {
        self.surfaces.iter().map(|s| s.thickness).sum()
    }

    pub fn stop_index(&self) -> Option<usize> {
        self.surfaces.iter().position(|s| s.is_stop)
    }

    /// Medium in front of surface `i`.
    pub fn material_before(&self, i: usize) -> MaterialSpec {
        if i == 0 {
            MaterialSpec::AIR
        } else {
            self.surfaces[i - 1].material_after
        }
    }

    /// Surfaces that bound glass on either side.
    pub fn is_glass_surface(&self, i: usize) -> bool {
        !self.surfaces[i].material_after.is_air || !self.material_before(i).is_air
    }

    /// Group index of each surface, `None` for the stop and other air-air surfaces.
    pub fn group_of_surface(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.surfaces.len()];
        for (g, members) in self.element_groups.iter().enumerate() {
            for &s in members {
                if s < out.len() {
                    out[s] = Some(g);
                }
            }
        }
        out
    }

    /// Runs of glass surfaces: a group opens on the first surface with glass behind it
    /// and closes on the next surface with air behind it, so cemented doublets merge.
    pub fn default_groups(surfaces: &[Surface]) -> Vec<Vec<usize>> {
        let mut groups = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        for (i, s) in surfaces.iter().enumerate() {
            if !s.material_after.is_air {
                current.push(i);
            } else if !current.is_empty() {
                current.push(i);
                groups.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            groups.push(current);
        }
        groups
    }

    /// Paraxial effective focal length at `wavelength_nm` (y-nu trace of a
    /// collimated marginal ray).
    pub fn paraxial_efl(&self, wavelength_nm: f64) -> Result<f64> {
        let mut y = 1.0;
        let mut nu = 0.0; // n * u
        let mut n = 1.0;
        for (i, s) in self.surfaces.iter().enumerate() {
            let n_after = s.material_after.refractive_index(wavelength_nm)?;
            nu -= y * (n_after - n) * s.curvature;
            n = n_after;
            if i + 1 < self.surfaces.len() {
                y += s.thickness * nu / n;
            }
        }
        if nu == 0.0 {
            return Err(Error::Numerical("afocal system has no focal length".into()));
        }
        Ok(-1.0 / nu)
    }

    /// Largest listed field angle.
    pub fn max_field(&self) -> f64 {
        self.fields.iter().cloned().fold(0.0, f64::max)
    }

    /// Reference wavelength for aiming and chief-ray centering: the d line when
    /// present, otherwise the middle entry.
    pub fn reference_wavelength(&self) -> f64 {
        if self.wavelengths.contains(&D_LINE_NM) {
            D_LINE_NM
        } else {
            self.wavelengths[self.wavelengths.len() / 2]
        }
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut push = |location: String, rule: &str| {
            v.push(Violation {
                location,
                rule: rule.to_string(),
            })
        };
        if !(self.object_distance.is_finite() && self.object_distance > 0.0) {
            push("object".into(), "object distance must be finite and positive");
        }
        if self.surfaces.is_empty() {
            push("prescription".into(), "no surfaces");
        }
        for (i, s) in self.surfaces.iter().enumerate() {
            let loc = format!("surface {i}");
            if !(s.thickness >= 0.0) {
                push(loc.clone(), "thickness must be >= 0");
            }
            if !(s.semi_diameter > 0.0) {
                push(loc.clone(), "semi-diameter must be > 0");
            }
            if !((s.curvature * s.semi_diameter).abs() < 1.0) {
                push(loc.clone(), "|curvature * semi-diameter| must be < 1");
            }
            if !s.material_after.is_air {
                if !(s.material_after.nd > 1.0) {
                    push(loc.clone(), "glass nd must be > 1");
                }
                if !(s.material_after.vd > 0.0) {
                    push(loc.clone(), "glass vd must be > 0");
                }
            }
            if s.is_stop && !s.material_after.is_air {
                push(loc.clone(), "stop must be followed by air");
            }
        }
        let stops: Vec<usize> = (0..self.surfaces.len()).filter(|&i| self.surfaces[i].is_stop).collect();
        match stops.len() {
            1 => {}
            0 => push("prescription".into(), "exactly one stop surface required, found none"),
            _ => push(
                format!(
                    "surfaces {}",
                    stops.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
                ),
                "exactly one stop surface required",
            ),
        }
        // element groups: contiguous runs covering every glass surface exactly once
        let mut seen = vec![0usize; self.surfaces.len()];
        for (g, members) in self.element_groups.iter().enumerate() {
            let loc = format!("group {g}");
            if members.is_empty() {
                push(loc.clone(), "empty element group");
                continue;
            }
            if members.windows(2).any(|w| w[1] != w[0] + 1) {
                push(loc.clone(), "group surfaces must be a contiguous run");
            }
            for &s in members {
                if s >= self.surfaces.len() {
                    push(loc.clone(), "group references a missing surface");
                } else {
                    seen[s] += 1;
                    if self.surfaces[s].is_stop {
                        push(loc.clone(), "the stop cannot belong to an element group");
                    }
                }
            }
        }
        for i in 0..self.surfaces.len() {
            if self.is_glass_surface(i) && seen[i] != 1 {
                push(
                    format!("surface {i}"),
                    "glass surface must belong to exactly one element group",
                );
            } else if !self.is_glass_surface(i) && seen[i] > 0 {
                push(format!("surface {i}"), "air-air surface listed in an element group");
            }
        }
        if self.wavelengths.is_empty() {
            push("wavelengths".into(), "at least one wavelength required");
        }
        for &w in &self.wavelengths {
            if !(BAND_NM.0..=BAND_NM.1).contains(&w) {
                push(format!("wavelength {w}"), "outside 400-800 nm");
            }
        }
        if self.fields.is_empty() {
            push("fields".into(), "at least one field angle required");
        }
        for &f in &self.fields {
            if !(f.abs() < 89.0) {
                push(format!("field {f}"), "field angle must be below 89 degrees");
            }
        }
        if !(self.image_semi_diameter > 0.0) {
            push("image".into(), "image semi-diameter must be > 0");
        }
        v
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let file: PrescriptionFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let lens = file.into_prescription(origin)?;
        let violations = lens.validate();
        if !violations.is_empty() {
            return Err(Error::Invalid(
                violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "),
            ));
        }
        Ok(lens)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&PrescriptionFile::from_prescription(self))
            .expect("prescription serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_prescription(path: &Path) -> Result<LensPrescription> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LensPrescription::from_json_str(&text, path)
}

pub fn validate(lens: &LensPrescription) -> Vec<Violation> {
    lens.validate()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum NumberOrWord {
    Number(f64),
    Word(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SurfaceRecord {
    radius_mm: NumberOrWord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    curvature_per_mm: Option<f64>,
    distance_mm: f64,
    diameter_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nd: Option<NumberOrWord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vd: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    stop: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrescriptionFile {
    #[serde(default)]
    name: String,
    object_distance_mm: f64,
    surfaces: Vec<SurfaceRecord>,
    #[serde(default)]
    image_diameter_mm: Option<f64>,
    #[serde(default)]
    element_groups: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    wavelengths_nm: Option<Vec<f64>>,
    #[serde(default)]
    field_angles_deg: Option<Vec<f64>>,
}

fn is_word(w: &str, target: &str) -> bool {
    w.trim().eq_ignore_ascii_case(target)
}

impl PrescriptionFile {
    fn into_prescription(self, origin: &Path) -> Result<LensPrescription> {
        let parse_err = |i: usize, m: &str| Error::Parse {
            path: origin.to_path_buf(),
            message: format!("surface {i}: {m}"),
        };
        let mut surfaces = Vec::with_capacity(self.surfaces.len());
        for (i, r) in self.surfaces.iter().enumerate() {
            let curvature = match (r.curvature_per_mm, &r.radius_mm) {
                (Some(c), _) => c,
                (None, NumberOrWord::Number(rad)) => radius_to_curvature(*rad),
                (None, NumberOrWord::Word(w)) if is_word(w, "INFINITY") || is_word(w, "INF") => 0.0,
                (None, NumberOrWord::Word(w)) => return Err(parse_err(i, &format!("bad radius {w:?}"))),
            };
            let material_after = match &r.nd {
                None => MaterialSpec::AIR,
                Some(NumberOrWord::Word(w)) if is_word(w, "AIR") => MaterialSpec::AIR,
                Some(NumberOrWord::Word(w)) => return Err(parse_err(i, &format!("bad nd {w:?}"))),
                Some(NumberOrWord::Number(nd)) => {
                    let vd = r.vd.ok_or_else(|| parse_err(i, "glass entry without vd"))?;
                    MaterialSpec::glass(*nd, vd)
                }
            };
            surfaces.push(Surface {
                curvature,
                thickness: r.distance_mm,
                semi_diameter: r.diameter_mm / 2.0,
                material_after,
                is_stop: r.stop,
            });
        }
        let element_groups = self
            .element_groups
            .unwrap_or_else(|| LensPrescription::default_groups(&surfaces));
        let wavelengths = self
            .wavelengths_nm
            .unwrap_or_else(|| DEFAULT_WAVELENGTHS_NM.to_vec());
        let image_semi_diameter = self.image_diameter_mm.map(|d| d / 2.0).unwrap_or(f64::NAN);
        let mut lens = LensPrescription {
            name: self.name,
            object_distance: self.object_distance_mm,
            surfaces,
            element_groups,
            wavelengths,
            fields: Vec::new(),
            image_semi_diameter,
        };
        lens.fields = match self.field_angles_deg {
            Some(f) => f,
            None => default_fields(&lens),
        };
        Ok(lens)
    }

    fn from_prescription(lens: &LensPrescription) -> Self {
        let surfaces = lens
            .surfaces
            .iter()
            .map(|s| {
                let radius = s.radius();
                let exact = radius_to_curvature(radius) == s.curvature;
                SurfaceRecord {
                    radius_mm: if radius.is_infinite() {
                        NumberOrWord::Word("INFINITY".into())
                    } else {
                        NumberOrWord::Number(radius)
                    },
                    curvature_per_mm: if exact { None } else { Some(s.curvature) },
                    distance_mm: s.thickness,
                    diameter_mm: s.semi_diameter * 2.0,
                    nd: if s.material_after.is_air {
                        None
                    } else {
                        Some(NumberOrWord::Number(s.material_after.nd))
                    },
                    vd: if s.material_after.is_air {
                        None
                    } else {
                        Some(s.material_after.vd)
                    },
                    stop: s.is_stop,
                }
            })
            .collect();
        PrescriptionFile {
            name: lens.name.clone(),
            object_distance_mm: lens.object_distance,
            surfaces,
            image_diameter_mm: Some(lens.image_semi_diameter * 2.0),
            element_groups: Some(lens.element_groups.clone()),
            wavelengths_nm: Some(lens.wavelengths.clone()),
            field_angles_deg: Some(lens.fields.clone()),
        }
    }
}

/// 0, 0.5, 0.7 and 1.0 of the field that fills the image circle.
fn default_fields(lens: &LensPrescription) -> Vec<f64> {
    let full = lens
        .paraxial_efl(D_LINE_NM)
        .ok()
        .filter(|f| f.is_finite() && lens.image_semi_diameter.is_finite())
        .map(|f| (lens.image_semi_diameter / f.abs()).atan().to_degrees())
        .unwrap_or(0.0);
    [0.0, 0.5, 0.7, 1.0].iter().map(|k| k * full).collect()
}

/// Shipped fixtures.
pub mod fixtures {
    use super::*;

    pub const LENS1_JSON: &str = include_str!("../fixtures/lens1.json");
    pub const LENS2_JSON: &str = include_str!("../fixtures/lens2.json");
    pub const COOKE_JSON: &str = include_str!("../fixtures/cooke.json");

    fn parse(text: &str, name: &str) -> LensPrescription {
        LensPrescription::from_json_str(text, Path::new(name)).expect("shipped fixture is valid")
    }

    pub fn lens1() -> LensPrescription {
        parse(LENS1_JSON, "lens1.json")
    }

    pub fn lens2() -> LensPrescription {
        parse(LENS2_JSON, "lens2.json")
    }

    pub fn cooke() -> LensPrescription {
        parse(COOKE_JSON, "cooke.json")
    }

    /// Look up a fixture by name (`lens1`, `lens2`, `cooke`).
    pub fn by_name(name: &str) -> Option<LensPrescription> {
        match name {
            "lens1" => Some(lens1()),
            "lens2" => Some(lens2()),
            "cooke" => Some(cooke()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d_line_anchor_is_exact() {
        let g = MaterialSpec::glass(1.620410, 60.323649);
        let n = g.refractive_index(D_LINE_NM).unwrap();
        assert!((n - 1.620410).abs() < 1e-15);
    }

    #[test]
    fn f_minus_c_matches_abbe() {
        let g = MaterialSpec::glass(1.620410, 60.323649);
        let df = g.refractive_index(F_LINE_NM).unwrap() - g.refractive_index(C_LINE_NM).unwrap();
        assert!((df - 0.620410 / 60.323649).abs() < 1e-15);
        assert!((df - 0.010285).abs() < 5e-7);
    }

    #[test]
    fn air_is_unity() {
        for w in [400.0, 550.0, 800.0] {
            assert_eq!(MaterialSpec::AIR.refractive_index(w).unwrap(), 1.0);
        }
    }

    #[test]
    fn out_of_band_rejected() {
        assert!(MaterialSpec::AIR.refractive_index(1000.0).is_err());
        assert!(MaterialSpec::glass(1.5, 60.0).refractive_index(399.0).is_err());
    }

    #[test]
    fn lens1_first_surface() {
        let l = fixtures::lens1();
        let s = &l.surfaces[0];
        assert!((s.radius() - 22.01).abs() < 1e-12);
        assert_eq!(s.thickness, 3.26);
        assert_eq!(s.material_after.nd, 1.620410);
        assert_eq!(s.material_after.vd, 60.323649);
        assert_eq!(l.object_distance, 1000.0);
        assert!(l.validate().is_empty());
    }

    #[test]
    fn lens2_layout() {
        let l = fixtures::lens2();
        assert_eq!(l.surfaces.len(), 11);
        assert_eq!(l.surfaces.iter().filter(|s| s.is_stop).count(), 1);
        assert_eq!(l.surfaces.last().unwrap().thickness, 35.074);
        assert_eq!(l.element_groups.len(), 5);
        assert_eq!(l.object_distance, 2000.0);
    }

    #[test]
    fn infinity_radius_is_planar() {
        let text = r#"{"object_distance_mm": 100.0, "image_diameter_mm": 2.0,
            "surfaces": [
              {"radius_mm": "INFINITY", "distance_mm": 1.0, "diameter_mm": 4.0, "stop": true},
              {"radius_mm": 50.0, "distance_mm": 2.0, "diameter_mm": 4.0, "nd": 1.5, "vd": 60.0},
              {"radius_mm": "INFINITY", "distance_mm": 90.0, "diameter_mm": 4.0, "nd": "AIR"}
            ]}"#;
        let l = LensPrescription::from_json_str(text, Path::new("t")).unwrap();
        assert_eq!(l.surfaces[0].curvature, 0.0);
        assert_eq!(l.surfaces[2].curvature, 0.0);
        assert_eq!(l.element_groups, vec![vec![1, 2]]);
    }

    #[test]
    fn two_stops_reported_once() {
        let mut l = fixtures::lens1();
        l.surfaces[1].is_stop = true;
        let v: Vec<_> = l
            .validate()
            .into_iter()
            .filter(|v| v.rule.contains("stop surface"))
            .collect();
        assert_eq!(v.len(), 1);
        assert!(v[0].location.contains('1') && v[0].location.contains('4'), "{:?}", v[0]);
    }

    #[test]
    fn negative_thickness_names_surface() {
        let mut l = fixtures::lens1();
        l.surfaces[2].thickness = -0.5;
        let v = l.validate();
        assert!(v.iter().any(|v| v.location == "surface 2" && v.rule.contains("thickness")));
    }

    #[test]
    fn cemented_groups_merge() {
        let g = MaterialSpec::glass(1.6, 40.0);
        let mk = |m: MaterialSpec| Surface {
            curvature: 0.01,
            thickness: 1.0,
            semi_diameter: 5.0,
            material_after: m,
            is_stop: false,
        };
        let s = vec![mk(g), mk(g), mk(MaterialSpec::AIR), mk(MaterialSpec::AIR), mk(g), mk(MaterialSpec::AIR)];
        assert_eq!(LensPrescription::default_groups(&s), vec![vec![0, 1, 2], vec![4, 5]]);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        for mut l in [fixtures::lens1(), fixtures::lens2(), fixtures::cooke()] {
            // a curvature whose radius does not round-trip
            l.surfaces[0].curvature = 0.03 + 1e-17 * 3.0;
            l.surfaces[1].curvature = 1.0 / 300.0;
            let back = LensPrescription::from_json_str(&l.to_json_string(), Path::new("rt")).unwrap();
            assert_eq!(back, l);
        }
    }

    #[test]
    fn curvature_radius_involution() {
        for r in [22.01, -435.76, 2541.82, 1e-3, -7.0] {
            let back = curvature_to_radius(radius_to_curvature(r));
            assert!((back - r).abs() <= r.abs() * f64::EPSILON, "{r} -> {back}");
        }
        assert_eq!(radius_to_curvature(f64::INFINITY), 0.0);
    }

    #[test]
    fn normal_dispersion() {
        let g = MaterialSpec::glass(1.7552, 27.53);
        let mut prev = f64::INFINITY;
        for w in (400..=800).step_by(20) {
            let n = g.refractive_index(w as f64).unwrap();
            assert!(n < prev);
            prev = n;
        }
    }
}
