//! Sequential ray tracing through spherical surfaces with tolerance transforms.
//!
//! All tracing is generic over [`Real`]: `f64` for evaluation, `DiffScalar` for
//! gradients and [`Dd`](crate::math::Dd) for precision cross-checks. Rays that leave an aperture,
//! miss a surface or totally internally reflect are marked dead and carry a reason;
//! they are never an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::LensPrescription;
use crate::math::{Mat3, Real, Vec3};
use crate::tolerance::{realize_transforms, SurfaceTransform, TolerancePattern};

/// Geometry of a prescription in the scalar type being traced.
#[derive(Debug, Clone)]
pub struct LensView<T> {
    pub curvature: Vec<T>,
    pub vertex_z: Vec<T>,
    pub image_z: T,
    pub semi_diameter: Vec<f64>,
    pub stop: usize,
    pub object_distance: f64,
}

impl<T: Real> LensView<T> {
    /// Every geometric quantity lifted as a constant.
    pub fn plain(lens: &LensPrescription) -> Self {
        Self::from_parts(
            lens,
            lens.surfaces.iter().map(|s| T::cst(s.curvature)).collect(),
            lens.surfaces.iter().map(|s| T::cst(s.thickness)).collect(),
        )
    }

    /// Build from per-surface curvatures and thicknesses.
    pub fn from_parts(lens: &LensPrescription, curvature: Vec<T>, thickness: Vec<T>) -> Self {
        let mut vertex_z = Vec::with_capacity(thickness.len());
        let mut z = T::cst(0.0);
        for t in &thickness {
            vertex_z.push(z.clone());
            z = z + t.clone();
        }
        Self {
            curvature,
            vertex_z,
            image_z: z,
            semi_diameter: lens.surfaces.iter().map(|s| s.semi_diameter).collect(),
            stop: lens.stop_index().unwrap_or(0),
            object_distance: lens.object_distance,
        }
    }

    pub fn surface_count(&self) -> usize {
        self.curvature.len()
    }
}

/// Refractive index in front of every surface and after the last one:
/// `n[i]` precedes surface `i`, `n[len]` is image space.
pub fn media_indices(lens: &LensPrescription, wavelength_nm: f64) -> Result<Vec<f64>> {
    let mut n = Vec::with_capacity(lens.surfaces.len() + 1);
    n.push(1.0);
    for s in &lens.surfaces {
        n.push(s.material_after.refractive_index(wavelength_nm)?);
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathReason {
    Miss,
    Aperture,
    TotalInternalReflection,
}

#[derive(Debug, Clone)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Unit direction.
    pub dir: Vec3<T>,
    pub wavelength_nm: f64,
    pub alive: bool,
    /// Reason and surface index for dead rays.
    pub death: Option<(DeathReason, usize)>,
}

impl<T: Real> Ray<T> {
    pub fn new(origin: Vec3<T>, dir: Vec3<T>, wavelength_nm: f64) -> Self {
        Self {
            origin,
            dir,
            wavelength_nm,
            alive: true,
            death: None,
        }
    }

    fn kill(mut self, reason: DeathReason, surface: usize) -> Self {
        self.alive = false;
        self.death = Some((reason, surface));
        self
    }
}

/// Distance along `d` from `q` (position relative to the vertex) to the sphere
/// `c|x|² - 2 x·a = 0` through the vertex with axis `a`, vertex-proximal root.
fn sphere_distance<T: Real>(q: &Vec3<T>, d: &Vec3<T>, axis_q: T, axis_d: T, c: &T) -> Option<T> {
    let b = c.clone() * q.dot(d) - axis_d;
    let cc = c.clone() * q.norm_sq() - axis_q * 2.0;
    let disc = b.sq() - c.clone() * cc.clone();
    if !(disc.val() >= 0.0) {
        return None;
    }
    let den = disc.sqrt() - b;
    if !(den.val() > 0.0) {
        return None;
    }
    Some(cc / den)
}

/// Vector Snell refraction; `normal` is unit and faces the incoming ray.
fn refract<T: Real>(d: &Vec3<T>, normal: &Vec3<T>, mu: f64) -> Option<Vec3<T>> {
    let cos_i = -normal.dot(d);
    let k = (T::cst(1.0) - cos_i.sq()) * (-(mu * mu)) + 1.0;
    if !(k.val() >= 0.0) {
        return None;
    }
    let coef = cos_i * mu - k.sqrt();
    let out = d.scale_by(&T::cst(mu)).add_scaled(normal, &coef);
    Some(out.normalized())
}

/// Trace one surface: move the ray into the element frame, intersect the sphere of
/// curvature `c·(1 + Δc_frac)`, refract, and move back to world coordinates.
pub fn trace_surface<T: Real>(
    ray: Ray<T>,
    index: usize,
    view: &LensView<T>,
    transform: &SurfaceTransform,
    n_in: f64,
    n_out: f64,
) -> Ray<T> {
    if !ray.alive {
        return ray;
    }
    let rigid = !transform.is_rigid_identity();
    let pivot_z = &view.vertex_z[transform.pivot_surface];
    let (p, d) = if rigid {
        (
            transform.to_local_point(&ray.origin, pivot_z),
            transform.to_local_dir(&ray.dir),
        )
    } else {
        (ray.origin.clone(), ray.dir.clone())
    };
    let c = if transform.curvature_frac == 0.0 {
        view.curvature[index].clone()
    } else {
        view.curvature[index].clone() * (1.0 + transform.curvature_frac)
    };
    let zv = view.vertex_z[index].clone();
    let q = Vec3::new(p.x.clone(), p.y.clone(), p.z.clone() - zv.clone());
    let Some(t) = sphere_distance(&q, &d, q.z.clone(), d.z.clone(), &c) else {
        return ray.kill(DeathReason::Miss, index);
    };
    let h = q.add_scaled(&d, &t);
    let r2 = h.x.sq() + h.y.sq();
    let sd = view.semi_diameter[index];
    if !(r2.val() <= sd * sd) {
        return ray.kill(DeathReason::Aperture, index);
    }
    let new_dir = if n_in == n_out {
        d
    } else {
        let normal = Vec3::new(
            c.clone() * h.x.clone(),
            c.clone() * h.y.clone(),
            c * h.z.clone() - 1.0,
        )
        .normalized();
        match refract(&d, &normal, n_in / n_out) {
            Some(v) => v,
            None => return ray.kill(DeathReason::TotalInternalReflection, index),
        }
    };
    let hit = Vec3::new(h.x, h.y, h.z + zv);
    let (origin, dir) = if rigid {
        (
            transform.to_world_point(&hit, pivot_z),
            transform.to_world_dir(&new_dir),
        )
    } else {
        (hit, new_dir)
    };
    Ray { origin, dir, ..ray }
}

/// Image-plane intersection of a traced ray.
#[derive(Debug, Clone)]
pub struct ImageHit<T> {
    pub x: T,
    pub y: T,
    pub alive: bool,
    pub death: Option<(DeathReason, usize)>,
}

fn to_image_plane<T: Real>(ray: Ray<T>, image_z: &T) -> ImageHit<T> {
    if !ray.alive {
        return ImageHit {
            x: T::zero(),
            y: T::zero(),
            alive: false,
            death: ray.death,
        };
    }
    if !(ray.dir.z.val() > 0.0) {
        return ImageHit {
            x: T::zero(),
            y: T::zero(),
            alive: false,
            death: Some((DeathReason::Miss, usize::MAX)),
        };
    }
    let t = (image_z.clone() - ray.origin.z.clone()) / ray.dir.z.clone();
    ImageHit {
        x: ray.origin.x.clone() + ray.dir.x.clone() * t.clone(),
        y: ray.origin.y.clone() + ray.dir.y.clone() * t,
        alive: true,
        death: None,
    }
}

/// Trace through every surface with precomputed transforms and media indices, then
/// on to the image plane.
pub fn trace_with_transforms<T: Real>(
    ray: Ray<T>,
    view: &LensView<T>,
    transforms: &[SurfaceTransform],
    indices: &[f64],
) -> ImageHit<T> {
    let mut r = ray;
    for i in 0..view.surface_count() {
        r = trace_surface(r, i, view, &transforms[i], indices[i], indices[i + 1]);
        if !r.alive {
            break;
        }
    }
    to_image_plane(r, &view.image_z)
}

/// Trace one ray through the prescription perturbed by `pattern`.
pub fn trace_system<T: Real>(ray: Ray<T>, lens: &LensPrescription, pattern: &TolerancePattern) -> Result<ImageHit<T>> {
    let transforms = realize_transforms(pattern, lens)?;
    let indices = media_indices(lens, ray.wavelength_nm)?;
    let view = LensView::plain(lens);
    Ok(trace_with_transforms(ray, &view, &transforms, &indices))
}

/// Trace with every surface at its design position (no transform arithmetic at all).
pub fn trace_nominal<T: Real>(ray: Ray<T>, view: &LensView<T>, indices: &[f64]) -> ImageHit<T> {
    let mut r = ray;
    for i in 0..view.surface_count() {
        r = trace_surface(r, i, view, &SurfaceTransform::identity(i), indices[i], indices[i + 1]);
        if !r.alive {
            break;
        }
    }
    to_image_plane(r, &view.image_z)
}

/// Reference trace that physically moves each element instead of the ray: the
/// sphere, its axis and its aperture are placed in world coordinates by the lens
/// motion `(R_lens, T)` and intersected there. Used to check the coordinate-transform
/// path.
pub fn trace_moved_lens(
    ray: Ray<f64>,
    view: &LensView<f64>,
    transforms: &[SurfaceTransform],
    indices: &[f64],
) -> ImageHit<f64> {
    let mut r = ray;
    for i in 0..view.surface_count() {
        if !r.alive {
            break;
        }
        let tr = &transforms[i];
        let (rot, shift): (Mat3, [f64; 3]) = tr.lens_motion();
        let pivot = [0.0, 0.0, view.vertex_z[tr.pivot_surface]];
        let v_design = [0.0, 0.0, view.vertex_z[i] - pivot[2]];
        let v_rot = rot.apply_f64(v_design);
        let vertex = Vec3::new(
            v_rot[0] + pivot[0] + shift[0],
            v_rot[1] + pivot[1] + shift[1],
            v_rot[2] + pivot[2] + shift[2],
        );
        let a = rot.apply_f64([0.0, 0.0, 1.0]);
        let axis = Vec3::new(a[0], a[1], a[2]);
        let c = view.curvature[i] * (1.0 + tr.curvature_frac);
        let q = r.origin.sub(&vertex);
        let d = r.dir.clone();
        let Some(t) = sphere_distance(&q, &d, q.dot(&axis), d.dot(&axis), &c) else {
            r = r.kill(DeathReason::Miss, i);
            break;
        };
        let h = q.add_scaled(&d, &t);
        let ha = h.dot(&axis);
        let radial2 = h.norm_sq() - ha * ha;
        let sd = view.semi_diameter[i];
        if !(radial2 <= sd * sd) {
            r = r.kill(DeathReason::Aperture, i);
            break;
        }
        let new_dir = if indices[i] == indices[i + 1] {
            d
        } else {
            let normal = h.scale_by(&c).sub(&axis).normalized();
            match refract(&d, &normal, indices[i] / indices[i + 1]) {
                Some(v) => v,
                None => {
                    r = r.kill(DeathReason::TotalInternalReflection, i);
                    break;
                }
            }
        };
        r.origin = h.add(&vertex);
        r.dir = new_dir;
    }
    to_image_plane(r, &view.image_z)
}

/// Field direction as angles whose tangents are the ray slopes in x and y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldPoint {
    pub x_deg: f64,
    pub y_deg: f64,
}

impl FieldPoint {
    pub fn on_y(deg: f64) -> Self {
        Self { x_deg: 0.0, y_deg: deg }
    }

    /// Object point for an object plane at `distance` in front of the first vertex.
    pub fn object_point(&self, distance: f64) -> [f64; 3] {
        [
            -distance * self.x_deg.to_radians().tan(),
            -distance * self.y_deg.to_radians().tan(),
            -distance,
        ]
    }
}

/// Trace from the object side to the stop plane with the design geometry, ignoring
/// apertures. Returns the stop-plane hit.
fn trace_to_stop<T: Real>(view: &LensView<T>, ray: Ray<T>, indices: &[f64]) -> Option<(T, T)> {
    let mut r = ray;
    for i in 0..view.stop {
        let c = &view.curvature[i];
        let zv = view.vertex_z[i].clone();
        let q = Vec3::new(r.origin.x.clone(), r.origin.y.clone(), r.origin.z.clone() - zv.clone());
        let t = sphere_distance(&q, &r.dir, q.z.clone(), r.dir.z.clone(), c)?;
        let h = q.add_scaled(&r.dir, &t);
        let dir = if indices[i] == indices[i + 1] {
            r.dir.clone()
        } else {
            let normal = Vec3::new(
                c.clone() * h.x.clone(),
                c.clone() * h.y.clone(),
                c.clone() * h.z.clone() - 1.0,
            )
            .normalized();
            refract(&r.dir, &normal, indices[i] / indices[i + 1])?
        };
        r.origin = Vec3::new(h.x, h.y, h.z + zv);
        r.dir = dir;
    }
    if !(r.dir.z.val() > 0.0) {
        return None;
    }
    let t = (view.vertex_z[view.stop].clone() - r.origin.z.clone()) / r.dir.z.clone();
    Some((
        r.origin.x.clone() + r.dir.x.clone() * t.clone(),
        r.origin.y.clone() + r.dir.y.clone() * t,
    ))
}

fn ray_through<T: Real>(object: [f64; 3], aim: (T, T), wavelength_nm: f64) -> Ray<T> {
    let o = Vec3::<T>::from_f64(object);
    let target = Vec3::new(aim.0, aim.1, T::cst(0.0));
    Ray::new(o.clone(), target.sub(&o).normalized(), wavelength_nm)
}

fn view_values<T: Real>(view: &LensView<T>) -> LensView<f64> {
    LensView {
        curvature: view.curvature.iter().map(|c| c.val()).collect(),
        vertex_z: view.vertex_z.iter().map(|c| c.val()).collect(),
        image_z: view.image_z.val(),
        semi_diameter: view.semi_diameter.clone(),
        stop: view.stop,
        object_distance: view.object_distance,
    }
}

/// Aim a ray from `object` at stop-plane point `target`. Newton iterations in `f64`
/// locate the aim point on the first vertex plane; further Newton steps in `T`
/// with the converged Jacobian carry the derivatives and the extra precision.
fn aim<T: Real>(
    view: &LensView<T>,
    plain: &LensView<f64>,
    object: [f64; 3],
    target: (f64, f64),
    indices: &[f64],
    wavelength_nm: f64,
) -> Option<(T, T)> {
    let stop_hit = |a: (f64, f64)| trace_to_stop(plain, ray_through(object, a, wavelength_nm), indices);
    // paraxial-ish starting guess: the line from the object point to the target
    let zs = plain.vertex_z[plain.stop];
    let s = plain.object_distance / (plain.object_distance + zs);
    let mut a = (
        object[0] + (target.0 - object[0]) * s,
        object[1] + (target.1 - object[1]) * s,
    );
    let mut jinv = [[1.0, 0.0], [0.0, 1.0]];
    let step = 1e-6;
    for _ in 0..30 {
        let h = stop_hit(a)?;
        let hx = stop_hit((a.0 + step, a.1))?;
        let hy = stop_hit((a.0, a.1 + step))?;
        let j = [
            [(hx.0 - h.0) / step, (hy.0 - h.0) / step],
            [(hx.1 - h.1) / step, (hy.1 - h.1) / step],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        jinv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
        let e = (target.0 - h.0, target.1 - h.1);
        a.0 += jinv[0][0] * e.0 + jinv[0][1] * e.1;
        a.1 += jinv[1][0] * e.0 + jinv[1][1] * e.1;
        if e.0.abs().max(e.1.abs()) < 1e-13 {
            break;
        }
    }
    // At least two steps so the derivatives settle, then continue while the
    // residual still shrinks (double-double needs about four).
    let mut at = (T::cst(a.0), T::cst(a.1));
    let mut last = f64::INFINITY;
    for k in 0..6 {
        let h = trace_to_stop(view, ray_through(object, at.clone(), wavelength_nm), indices)?;
        let ex = -(h.0 - target.0);
        let ey = -(h.1 - target.1);
        let r = ex.val().abs().max(ey.val().abs());
        if k >= 2 && !(r < 0.5 * last && r > 0.0) {
            break;
        }
        last = r;
        at = (
            at.0 + ex.clone() * jinv[0][0] + ey.clone() * jinv[0][1],
            at.1 + ex * jinv[1][0] + ey * jinv[1][1],
        );
    }
    Some(at)
}

/// Uniform square grid of `n × n` pupil samples masked to the unit disk.
pub fn pupil_grid(n: usize) -> Vec<(f64, f64)> {
    let n = n.max(1);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let u = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let v = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            if u * u + v * v <= 1.0 {
                out.push((u, v));
            }
        }
    }
    out
}

/// Rays for one field point that fill the physical stop.
#[derive(Debug, Clone)]
pub struct Launch<T> {
    pub field: FieldPoint,
    pub object: [f64; 3],
    pub pupil: Vec<(f64, f64)>,
    /// Aim points on the first vertex plane, one per pupil sample.
    pub aims: Vec<(T, T)>,
    pub chief_aim: (T, T),
}

impl<T: Real> Launch<T> {
    pub fn ray(&self, k: usize, wavelength_nm: f64) -> Ray<T> {
        ray_through(self.object, self.aims[k].clone(), wavelength_nm)
    }

    pub fn chief_ray(&self, wavelength_nm: f64) -> Ray<T> {
        ray_through(self.object, self.chief_aim.clone(), wavelength_nm)
    }
}

/// Aim a 5×5 grid of pupil nodes on `[-1, 1]²` at the stop and interpolate the
/// aim point of every pupil sample between them with a tensor Lagrange basis.
pub fn launch_rays<T: Real>(
    lens: &LensPrescription,
    view: &LensView<T>,
    field: FieldPoint,
    pupil: &[(f64, f64)],
) -> Result<Launch<T>> {
    const NODES: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let wl = lens.reference_wavelength();
    let indices = media_indices(lens, wl)?;
    let plain = view_values(view);
    let object = field.object_point(view.object_distance);
    let r_stop = view.semi_diameter[view.stop];
    let mut nodes: Vec<(T, T)> = Vec::with_capacity(NODES.len() * NODES.len());
    for v in NODES {
        for u in NODES {
            let a = aim(view, &plain, object, (u * r_stop, v * r_stop), &indices, wl).ok_or_else(|| {
                Error::Numerical(format!(
                    "cannot aim field ({}, {}) deg at stop point ({u}, {v})",
                    field.x_deg, field.y_deg
                ))
            })?;
            nodes.push(a);
        }
    }
    let basis = |s: f64| -> [f64; 5] {
        let mut w = [1.0; 5];
        for (i, wi) in w.iter_mut().enumerate() {
            for (j, nj) in NODES.iter().enumerate() {
                if i != j {
                    *wi *= (s - nj) / (NODES[i] - nj);
                }
            }
        }
        w
    };
    let interp = |u: f64, v: f64| -> (T, T) {
        let (bu, bv) = (basis(u), basis(v));
        let mut x = T::zero();
        let mut y = T::zero();
        for (iv, wv) in bv.iter().enumerate() {
            for (iu, wu) in bu.iter().enumerate() {
                let w = wu * wv;
                if w != 0.0 {
                    let n = &nodes[iv * NODES.len() + iu];
                    x = x + n.0.clone() * w;
                    y = y + n.1.clone() * w;
                }
            }
        }
        (x, y)
    };
    let aims = pupil.iter().map(|&(u, v)| interp(u, v)).collect();
    Ok(Launch {
        field,
        object,
        pupil: pupil.to_vec(),
        aims,
        chief_aim: nodes[nodes.len() / 2].clone(),
    })
}

/// Trace every launched ray at one wavelength.
pub fn trace_launch<T: Real>(
    launch: &Launch<T>,
    view: &LensView<T>,
    transforms: &[SurfaceTransform],
    indices: &[f64],
    wavelength_nm: f64,
) -> Vec<ImageHit<T>> {
    (0..launch.aims.len())
        .map(|k| trace_with_transforms(launch.ray(k, wavelength_nm), view, transforms, indices))
        .collect()
}

/// Spot diagram of one (field, wavelength).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpotEntry {
    pub field_deg: f64,
    pub wavelength_nm: f64,
    /// Image-plane hits of the surviving rays, mm.
    pub hits: Vec<(f64, f64)>,
    pub centroid: (f64, f64),
    pub rms_um: f64,
    pub dead: usize,
}

/// RMS radius about the centroid, µm.
pub fn rms_um(hits: &[(f64, f64)]) -> (f64, (f64, f64)) {
    let n = hits.len() as f64;
    let cx = hits.iter().map(|h| h.0).sum::<f64>() / n;
    let cy = hits.iter().map(|h| h.1).sum::<f64>() / n;
    let ms = hits.iter().map(|h| (h.0 - cx).powi(2) + (h.1 - cy).powi(2)).sum::<f64>() / n;
    (ms.sqrt() * 1e3, (cx, cy))
}

/// Spot diagram for a field angle along y.
pub fn trace_field(
    lens: &LensPrescription,
    pattern: &TolerancePattern,
    field_deg: f64,
    wavelength_nm: f64,
    pupil_samples: usize,
) -> Result<SpotEntry> {
    let view = LensView::<f64>::plain(lens);
    let transforms = realize_transforms(pattern, lens)?;
    let indices = media_indices(lens, wavelength_nm)?;
    let launch = launch_rays(lens, &view, FieldPoint::on_y(field_deg), &pupil_grid(pupil_samples))?;
    let hits = trace_launch(&launch, &view, &transforms, &indices, wavelength_nm);
    spot_from_hits(field_deg, wavelength_nm, &hits)
}

pub fn spot_from_hits(field_deg: f64, wavelength_nm: f64, hits: &[ImageHit<f64>]) -> Result<SpotEntry> {
    let alive: Vec<(f64, f64)> = hits.iter().filter(|h| h.alive).map(|h| (h.x, h.y)).collect();
    if alive.is_empty() {
        return Err(Error::AllRaysDead {
            field_deg,
            wavelength_nm,
        });
    }
    let (rms, centroid) = rms_um(&alive);
    Ok(SpotEntry {
        field_deg,
        wavelength_nm,
        dead: hits.len() - alive.len(),
        hits: alive,
        centroid,
        rms_um: rms,
    })
}

/// One panel per field with the wavelengths overlaid around the d-line centroid,
/// all panels on a common scale, each annotated with its polychromatic RMS.
pub fn spot_svg(entries: &[SpotEntry], title: &str) -> String {
    let mut fields: Vec<f64> = Vec::new();
    for e in entries {
        if !fields.contains(&e.field_deg) {
            fields.push(e.field_deg);
        }
    }
    let (cell, pad, top) = (220.0, 10.0, 40.0);
    let w = cell * fields.len().max(1) as f64;
    let h = cell + top + 40.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        w / 2.0,
        crate::evaluate::xml_escape(title)
    );
    let groups: Vec<(f64, Vec<&SpotEntry>, (f64, f64))> = fields
        .iter()
        .map(|&f| {
            let es: Vec<&SpotEntry> = entries.iter().filter(|e| e.field_deg == f).collect();
            let all: Vec<(f64, f64)> = es.iter().flat_map(|e| e.hits.iter().copied()).collect();
            let (_, c) = rms_um(&all);
            (f, es, c)
        })
        .collect();
    let half = groups
        .iter()
        .flat_map(|(_, es, c)| es.iter().flat_map(move |e| e.hits.iter().map(move |h| (h.0 - c.0).abs().max((h.1 - c.1).abs()))))
        .fold(1e-6, f64::max);
    let scale = (cell / 2.0 - pad) / half;
    let colour = |wl: f64| match wl {
        x if x < 520.0 => "#2060d0",
        x if x < 620.0 => "#20a040",
        _ => "#d03030",
    };
    for (i, (f, es, c)) in groups.iter().enumerate() {
        let (cx, cy) = (cell * (i as f64 + 0.5), top + cell / 2.0);
        s += &format!(
            "<rect x=\"{:.1}\" y=\"{top}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#bbb\"/>\n",
            cell * i as f64 + pad / 2.0,
            cell - pad,
            cell - pad
        );
        for e in es {
            for hit in &e.hits {
                s += &format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"0.9\" fill=\"{}\"/>\n",
                    cx + (hit.0 - c.0) * scale,
                    cy - (hit.1 - c.1) * scale,
                    colour(e.wavelength_nm)
                );
            }
        }
        let all: Vec<(f64, f64)> = es.iter().flat_map(|e| e.hits.iter().copied()).collect();
        s += &format!(
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{f:.2}° RMS {:.2} µm</text>\n",
            top + cell + 16.0,
            rms_um(&all).0
        );
    }
    s += &format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">panel half-width {:.1} µm</text>\n</svg>\n",
        w / 2.0,
        h - 6.0,
        half * 1e3
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens::{fixtures, MaterialSpec, Surface};
    use crate::tolerance::TolerancePattern;

    fn single_surface(curvature: f64, n_after: f64) -> LensPrescription {
        LensPrescription {
            name: "single".into(),
            object_distance: 100.0,
            surfaces: vec![
                Surface {
                    curvature: 0.0,
                    thickness: 1.0,
                    semi_diameter: 5.0,
                    material_after: MaterialSpec::AIR,
                    is_stop: true,
                },
                Surface {
                    curvature,
                    thickness: 50.0,
                    semi_diameter: 10.0,
                    material_after: if n_after == 1.0 {
                        MaterialSpec::AIR
                    } else {
                        MaterialSpec::glass(n_after, 60.0)
                    },
                    is_stop: false,
                },
            ],
            element_groups: vec![],
            wavelengths: vec![587.56],
            fields: vec![0.0],
            image_semi_diameter: 5.0,
        }
    }

    #[test]
    fn on_axis_ray_is_undeviated() {
        let lens = fixtures::lens1();
        let view = LensView::<f64>::plain(&lens);
        let idx = media_indices(&lens, 587.56).unwrap();
        let ray = Ray::new(Vec3::new(0.0, 0.0, -10.0), Vec3::new(0.0, 0.0, 1.0), 587.56);
        let r = trace_surface(ray, 0, &view, &SurfaceTransform::identity(0), idx[0], idx[1]);
        assert!(r.alive);
        assert_eq!(r.dir.val(), [0.0, 0.0, 1.0]);
        let hit = trace_nominal(r, &view, &idx);
        assert!(hit.alive && hit.x.abs() < 1e-9 && hit.y.abs() < 1e-9);
    }

    #[test]
    fn plane_between_equal_media_only_advances() {
        let lens = single_surface(0.0, 1.0);
        let view = LensView::<f64>::plain(&lens);
        let d = Vec3::new(0.1, -0.05, 1.0).normalized();
        let ray = Ray::new(Vec3::new(0.2, 0.3, -1.0), d.clone(), 587.56);
        let r = trace_surface(ray, 1, &view, &SurfaceTransform::identity(1), 1.0, 1.0);
        assert_eq!(r.dir, d);
        assert!((r.origin.z - 1.0).abs() < 1e-15);
    }

    #[test]
    fn refraction_matches_scalar_snell() {
        // meridional ray on a convex sphere, compared against angles solved by hand
        let c = 1.0 / 20.0;
        let n2 = 1.6;
        let lens = single_surface(c, n2);
        let view = LensView::<f64>::plain(&lens);
        let y0 = 3.0;
        let ray = Ray::new(Vec3::new(0.0, y0, 0.0), Vec3::new(0.0, 0.0, 1.0), 587.56);
        let r = trace_surface(ray, 1, &view, &SurfaceTransform::identity(1), 1.0, n2);
        // analytic hit: sphere of radius R centered at z = 1 + R
        let rad = 1.0 / c;
        let zh = 1.0 + rad - (rad * rad - y0 * y0).sqrt();
        assert!((r.origin.z - zh).abs() < 1e-12);
        let incidence = (y0 / rad).asin();
        let refr = (incidence.sin() / n2).asin();
        // the refracted ray turns toward the axis by (incidence - refr)
        let expect_slope = -(incidence - refr).tan();
        let slope = r.dir.y / r.dir.z;
        assert!((slope - expect_slope).abs() < 1e-12, "{slope} vs {expect_slope}");
    }

    #[test]
    fn refracted_direction_is_unit() {
        let lens = fixtures::lens2();
        let view = LensView::<f64>::plain(&lens);
        let idx = media_indices(&lens, 486.13).unwrap();
        let mut r = Ray::new(Vec3::new(1.0, -2.0, -5.0), Vec3::new(0.01, 0.05, 1.0).normalized(), 486.13);
        for i in 0..lens.surfaces.len() {
            r = trace_surface(r, i, &view, &SurfaceTransform::identity(i), idx[i], idx[i + 1]);
            assert!(r.alive);
            assert!((r.dir.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reversed_ray_recovers_incident_direction() {
        // refract forward, then refract the reversed ray at the same point backwards
        let c = 1.0 / 15.0;
        let n2 = 1.7;
        let d = Vec3::new(0.05, 0.12, 1.0).normalized();
        let h = Vec3::new(1.2, -0.7, 0.0);
        let hz = (1.0 - (1.0 - c * c * (h.x * h.x + h.y * h.y)).sqrt()) / c;
        let p = Vec3::new(h.x, h.y, hz);
        let normal = Vec3::new(c * p.x, c * p.y, c * p.z - 1.0).normalized();
        let out = refract(&d, &normal, 1.0 / n2).unwrap();
        let back = refract(&out.scale_by(&-1.0), &normal.scale_by(&-1.0), n2).unwrap();
        let back = back.scale_by(&-1.0);
        for (a, b) in back.val().iter().zip(d.val()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn thin_lens_focal_length() {
        // c1 = 1/50, c2 = 0, n = 1.5, t = 0.01: lensmaker gives f = 100 mm
        let mut lens = single_surface(1.0 / 50.0, 1.5);
        lens.surfaces[1].thickness = 0.01;
        lens.surfaces.push(Surface {
            curvature: 0.0,
            thickness: 200.0,
            semi_diameter: 10.0,
            material_after: MaterialSpec::AIR,
            is_stop: false,
        });
        let view = LensView::<f64>::plain(&lens);
        let wl = 587.56;
        let idx = media_indices(&lens, wl).unwrap();
        let lens_index = lens.surfaces[1].material_after.refractive_index(wl).unwrap();
        assert!((lens_index - 1.5).abs() < 1e-15);
        let h = 0.01;
        let mut r = Ray::new(Vec3::new(0.0, h, -1.0), Vec3::new(0.0, 0.0, 1.0), wl);
        for i in 0..lens.surfaces.len() {
            r = trace_surface(r, i, &view, &SurfaceTransform::identity(i), idx[i], idx[i + 1]);
        }
        let slope = r.dir.y / r.dir.z;
        let efl = -h / slope;
        assert!((efl - 100.0).abs() / 100.0 < 0.005, "efl {efl}");
    }

    #[test]
    fn zero_pattern_matches_nominal_bit_for_bit() {
        let lens = fixtures::lens1();
        let view = LensView::<f64>::plain(&lens);
        let idx = media_indices(&lens, 656.27).unwrap();
        let ray = || Ray::new(Vec3::new(0.5, -1.0, -20.0), Vec3::new(-0.01, 0.07, 1.0).normalized(), 656.27);
        let a = trace_system(ray(), &lens, &TolerancePattern::zero(&lens)).unwrap();
        let b = trace_nominal(ray(), &view, &idx);
        assert_eq!(a.x.to_bits(), b.x.to_bits());
        assert_eq!(a.y.to_bits(), b.y.to_bits());
    }

    #[test]
    fn aperture_kills_marginal_ray() {
        let lens = fixtures::lens1();
        let ray = Ray::new(Vec3::new(0.0, 9.8, -5.0), Vec3::new(0.0, 0.0, 1.0), 587.56);
        let hit = trace_system(ray, &lens, &TolerancePattern::zero(&lens)).unwrap();
        assert!(!hit.alive);
        assert!(matches!(hit.death, Some((DeathReason::Aperture, _))));
    }

    #[test]
    fn single_ray_spot_has_zero_rms() {
        let lens = fixtures::lens1();
        let spot = trace_field(&lens, &TolerancePattern::zero(&lens), 2.0, 587.56, 1).unwrap();
        assert_eq!(spot.hits.len(), 1);
        assert_eq!(spot.rms_um, 0.0);
    }

    #[test]
    fn all_rays_at_one_point_have_zero_rms() {
        let (rms, c) = rms_um(&[(0.25, -0.5); 7]);
        assert_eq!(rms, 0.0);
        assert_eq!(c, (0.25, -0.5));
    }

    #[test]
    fn aimed_rays_fill_the_stop() {
        for lens in [fixtures::lens1(), fixtures::lens2(), fixtures::cooke()] {
            let view = LensView::<f64>::plain(&lens);
            let wl = lens.reference_wavelength();
            let idx = media_indices(&lens, wl).unwrap();
            let r_stop = lens.surfaces[lens.stop_index().unwrap()].semi_diameter;
            let field = FieldPoint::on_y(lens.max_field());
            let pupil: Vec<(f64, f64)> = (0..16)
                .map(|k| {
                    let a = k as f64 / 16.0 * std::f64::consts::TAU;
                    (a.cos(), a.sin())
                })
                .collect();
            let launch = launch_rays(&lens, &view, field, &pupil).unwrap();
            for (k, &(u, v)) in pupil.iter().enumerate() {
                let (x, y) = trace_to_stop(&view, launch.ray(k, wl), &idx).unwrap();
                let err = ((x - u * r_stop).powi(2) + (y - v * r_stop).powi(2)).sqrt();
                assert!(err < 0.005 * r_stop, "{}: pupil ({u:.2},{v:.2}) off by {err}", lens.name);
            }
        }
    }
}
