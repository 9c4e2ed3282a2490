//! Mask-driven deformable registration of a reference scan onto its follow-up.
//!
//! The reference lung mask (moving) is aligned to the follow-up lung mask
//! (fixed) with a cubic BSpline free-form deformation. Mean squares between
//! Gaussian-smoothed masks is minimized with L-BFGS over a coarse-to-fine
//! pyramid. CT intensities and pathology labels never enter the optimization.

mod bspline;
pub mod lbfgs;

use serde::{Deserialize, Serialize};

pub use bspline::{cubic_basis, BSplineTransform, TRANSFORM_FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::preprocess::{sample, Interpolate, ProcessedTimepoint};
use crate::volume::{require_same_geometry, Volume3D};
use crate::{CtVolume, LabelVolume};
use lbfgs::{LbfgsOptions, StopReason};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Control points per axis, including the two lying outside the image.
    pub control_grid_points: usize,
    /// Levels with shrink factors `2^(L-1), ..., 2, 1`.
    pub pyramid_levels: usize,
    /// Gaussian smoothing of the masks, in voxels of each level.
    pub smoothing_sigma: f64,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub lbfgs_memory: usize,
    /// Largest coefficient update per iteration, in voxels of the current level.
    pub max_step: f64,
    /// Weight of the squared differences between neighbouring control points.
    pub regularization_weight: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            control_grid_points: 8,
            pyramid_levels: 3,
            smoothing_sigma: 1.0,
            max_iterations: 100,
            convergence_tol: 1e-6,
            lbfgs_memory: 7,
            max_step: 1.0,
            regularization_weight: 1e-3,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("registration: {m}")));
        if self.control_grid_points < 4 {
            return bad("control_grid_points must be at least 4");
        }
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be at least 1");
        }
        if !(self.smoothing_sigma >= 0.0) || !(self.convergence_tol >= 0.0) || !(self.regularization_weight >= 0.0) {
            return bad("smoothing_sigma, convergence_tol and regularization_weight must be non-negative");
        }
        if !(self.max_step > 0.0) || self.lbfgs_memory == 0 {
            return bad("max_step and lbfgs_memory must be positive");
        }
        Ok(())
    }

    pub fn shrink_factors(&self) -> Vec<usize> {
        (0..self.pyramid_levels).rev().map(|l| 1usize << l).collect()
    }
}

/// Per-level optimizer summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub shrink: usize,
    pub iterations: usize,
    pub evaluations: usize,
    pub initial_metric: f64,
    pub final_metric: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub levels: Vec<LevelReport>,
    pub dice_before: f64,
    pub dice_after: f64,
    /// The optimized transform lowered the mask overlap and was discarded.
    pub fell_back_to_identity: bool,
}

/// Estimates the transform mapping follow-up voxels to reference positions:
/// `warp(m0, R)` approximates `m1`.
pub fn register_masks(m0: &LabelVolume, m1: &LabelVolume, cfg: &RegistrationConfig) -> Result<BSplineTransform> {
    register_masks_with_report(m0, m1, cfg).map(|(t, _)| t)
}

pub fn register_masks_with_report(
    m0: &LabelVolume,
    m1: &LabelVolume,
    cfg: &RegistrationConfig,
) -> Result<(BSplineTransform, RegistrationReport)> {
    cfg.validate()?;
    require_same_geometry(m0, m1, "register_masks")?;
    for (name, m) in [("reference lung mask", m0), ("follow-up lung mask", m1)] {
        m.validate_labels(1)?;
        if m.count_nonzero() == 0 {
            return Err(Error::EmptyMask(name.into()));
        }
    }
    let domain = *m1.geometry();
    let mut transform = BSplineTransform::identity(domain, [cfg.control_grid_points; 3])?;
    let moving: Vec<f64> = m0.data().iter().map(|&v| f64::from(v)).collect();
    let fixed: Vec<f64> = m1.data().iter().map(|&v| f64::from(v)).collect();

    let mut coef: Vec<f64> = vec![0.0; 3 * transform.n_control_points()];
    let mut levels = Vec::new();
    for shrink in cfg.shrink_factors() {
        let level = Level::new(&fixed, &moving, domain.shape, shrink, cfg.smoothing_sigma, &transform);
        let opts = LbfgsOptions {
            memory: cfg.lbfgs_memory,
            max_iterations: cfg.max_iterations,
            tolerance: cfg.convergence_tol,
            max_step: cfg.max_step * shrink as f64,
        };
        let grid = transform.grid_shape;
        let out = lbfgs::minimize(
            |c| {
                let (mut v, mut g) = level.metric(c);
                if cfg.regularization_weight > 0.0 {
                    v += membrane(c, grid, cfg.regularization_weight, &mut g);
                }
                (v, g)
            },
            coef,
            &opts,
        )
        .map_err(|e| {
            Error::Divergence(format!(
                "non-finite metric {} at level shrink {shrink}, iteration {}",
                e.value, e.iteration
            ))
        })?;
        log::debug!(
            "registration level x{shrink}: {} iterations, metric {:.6e} -> {:.6e}",
            out.iterations,
            out.initial_value,
            out.value
        );
        levels.push(LevelReport {
            shrink,
            iterations: out.iterations,
            evaluations: out.evaluations,
            initial_metric: out.initial_value,
            final_metric: out.value,
            converged: out.stop != StopReason::MaxIterations,
        });
        coef = out.x;
    }
    transform.set_index_coefficients(&coef);
    transform.validate()?;

    let dice_before = dice(m0, m1, 1)?;
    let mut dice_after = dice(&warp(m0, &transform, WarpKind::Label)?, m1, 1)?;
    let fell_back_to_identity = dice_after < dice_before;
    if fell_back_to_identity {
        log::warn!("registration lowered mask overlap ({dice_before:.4} -> {dice_after:.4}); using identity");
        transform = BSplineTransform::identity(domain, transform.grid_shape)?;
        dice_after = dice_before;
    }
    Ok((transform, RegistrationReport { levels, dice_before, dice_after, fell_back_to_identity }))
}

/// `λ · mean over grid edges of |c_i - c_j|²`; adds its gradient to `g`.
fn membrane(c: &[f64], grid: [usize; 3], weight: f64, g: &mut [f64]) -> f64 {
    let [gx, gy, gz] = grid;
    let idx = |i: usize, j: usize, k: usize| i + gx * (j + gy * k);
    let mut edges = Vec::new();
    for k in 0..gz {
        for j in 0..gy {
            for i in 0..gx {
                let a = idx(i, j, k);
                if i + 1 < gx {
                    edges.push((a, idx(i + 1, j, k)));
                }
                if j + 1 < gy {
                    edges.push((a, idx(i, j + 1, k)));
                }
                if k + 1 < gz {
                    edges.push((a, idx(i, j, k + 1)));
                }
            }
        }
    }
    let scale = weight / edges.len() as f64;
    let mut value = 0.0;
    for (a, b) in edges {
        for d in 0..3 {
            let diff = c[3 * a + d] - c[3 * b + d];
            value += scale * diff * diff;
            g[3 * a + d] += 2.0 * scale * diff;
            g[3 * b + d] -= 2.0 * scale * diff;
        }
    }
    value
}

/// One pyramid level: smoothed fixed and moving images plus the spline basis
/// tables at the level's voxel centres.
struct Level {
    shape: [usize; 3],
    shrink: usize,
    fixed: Vec<f64>,
    moving: Vec<f64>,
    sampler: bspline::GridSampler,
}

impl Level {
    fn new(fixed: &[f64], moving: &[f64], full: [usize; 3], shrink: usize, sigma: f64, t: &BSplineTransform) -> Self {
        let (fixed, shape) = downsample(fixed, full, shrink);
        let (moving, _) = downsample(moving, full, shrink);
        let fixed = gaussian(&fixed, shape, sigma);
        let moving = gaussian(&moving, shape, sigma);
        // Level voxel j covers full voxels [j*s, (j+1)*s); its centre is j*s + (s-1)/2.
        let pos: [Vec<f64>; 3] = std::array::from_fn(|a| {
            (0..shape[a])
                .map(|j| ((j * shrink) as f64 + (shrink - 1) as f64 / 2.0).min((full[a] - 1) as f64))
                .collect()
        });
        let sampler = t.sampler([&pos[0], &pos[1], &pos[2]]);
        Self { shape, shrink, fixed, moving, sampler }
    }

    /// Mean squared difference and its gradient with respect to the
    /// coefficients (full-resolution voxel units, flattened).
    fn metric(&self, flat: &[f64]) -> (f64, Vec<f64>) {
        let coef: Vec<[f64; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let disp = self.sampler.evaluate(&coef);
        let [nx, ny, nz] = self.shape;
        let n = (nx * ny * nz) as f64;
        let s = self.shrink as f64;
        let mut value = 0.0;
        let mut dd = vec![[0.0; 3]; disp.len()];
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let d = disp[i];
                    let q = [x as f64 + d[0] / s, y as f64 + d[1] / s, z as f64 + d[2] / s];
                    let (m, grad) = trilinear_with_gradient(&self.moving, self.shape, q);
                    let r = m - self.fixed[i];
                    value += r * r;
                    let k = 2.0 * r / (n * s);
                    dd[i] = [k * grad[0], k * grad[1], k * grad[2]];
                    i += 1;
                }
            }
        }
        let gc = self.sampler.adjoint(&dd);
        (value / n, gc.into_iter().flatten().collect())
    }
}

/// Block average with factor `s`; trailing partial blocks average what exists.
fn downsample(data: &[f64], shape: [usize; 3], s: usize) -> (Vec<f64>, [usize; 3]) {
    if s == 1 {
        return (data.to_vec(), shape);
    }
    let out: [usize; 3] = std::array::from_fn(|a| shape[a].div_ceil(s));
    let mut sum = vec![0.0; out.iter().product()];
    let mut count = vec![0u32; sum.len()];
    let mut i = 0;
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let j = x / s + out[0] * (y / s + out[1] * (z / s));
                sum[j] += data[i];
                count[j] += 1;
                i += 1;
            }
        }
    }
    for (v, c) in sum.iter_mut().zip(count) {
        *v /= f64::from(c);
    }
    (sum, out)
}

/// Separable Gaussian blur with replicated borders, truncated at 3σ.
fn gaussian(data: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut cur = data.to_vec();
    let strides = [1, shape[0], shape[0] * shape[1]];
    for axis in 0..3 {
        let n = shape[axis] as isize;
        let stride = strides[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / stride) % shape[axis]) as isize;
            let base = i - pos as usize * stride;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let p = (pos + k as isize - radius).clamp(0, n - 1) as usize;
                acc += w * cur[base + p * stride];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Trilinear value and exact gradient at `q`, clamping to the edge. Clamped
/// axes have zero derivative.
#[inline]
fn trilinear_with_gradient(img: &[f64], shape: [usize; 3], q: [f64; 3]) -> (f64, [f64; 3]) {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0.0; 3];
    let mut live = [true; 3];
    for a in 0..3 {
        let hi = (shape[a] - 1) as f64;
        let p = if q[a] <= 0.0 {
            live[a] = false;
            0.0
        } else if q[a] >= hi {
            live[a] = false;
            hi
        } else {
            q[a]
        };
        let f = (p.floor() as usize).min(shape[a].saturating_sub(2));
        i0[a] = f;
        i1[a] = (f + 1).min(shape[a] - 1);
        t[a] = p - f as f64;
        if shape[a] == 1 {
            live[a] = false;
        }
    }
    let at = |x: usize, y: usize, z: usize| img[x + shape[0] * (y + shape[1] * z)];
    let c000 = at(i0[0], i0[1], i0[2]);
    let c100 = at(i1[0], i0[1], i0[2]);
    let c010 = at(i0[0], i1[1], i0[2]);
    let c110 = at(i1[0], i1[1], i0[2]);
    let c001 = at(i0[0], i0[1], i1[2]);
    let c101 = at(i1[0], i0[1], i1[2]);
    let c011 = at(i0[0], i1[1], i1[2]);
    let c111 = at(i1[0], i1[1], i1[2]);
    let [tx, ty, tz] = t;
    let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    let v = uz * (uy * (ux * c000 + tx * c100) + ty * (ux * c010 + tx * c110))
        + tz * (uy * (ux * c001 + tx * c101) + ty * (ux * c011 + tx * c111));
    let gx = uz * (uy * (c100 - c000) + ty * (c110 - c010)) + tz * (uy * (c101 - c001) + ty * (c111 - c011));
    let gy = uz * (ux * (c010 - c000) + tx * (c110 - c100)) + tz * (ux * (c011 - c001) + tx * (c111 - c101));
    let gz = uy * (ux * (c001 - c000) + tx * (c101 - c100)) + ty * (ux * (c011 - c010) + tx * (c111 - c110));
    let g = [gx, gy, gz];
    (v, std::array::from_fn(|a| if live[a] { g[a] } else { 0.0 }))
}

/// Resampling rule for [`warp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpKind {
    /// Trilinear for floating-point volumes.
    Intensity,
    /// Nearest neighbour; never invents new values.
    Label,
}

/// Resamples `vol` into the transform's fixed geometry: output voxel `x` takes
/// the value at `x + D(x)`. Samples outside the volume are 0.
pub fn warp<T: Interpolate>(vol: &Volume3D<T>, transform: &BSplineTransform, kind: WarpKind) -> Result<Volume3D<T>> {
    if !vol.geometry().matches(&transform.domain) {
        return Err(Error::GeometryMismatch(format!(
            "warp: volume {:?} vs transform domain {:?}",
            vol.geometry(),
            transform.domain
        )));
    }
    let field = transform.displacement_field();
    let shape = vol.shape();
    let mut out = Vec::with_capacity(vol.data().len());
    let mut i = 0;
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let d = field.data()[i];
                let p = [x as f64 + f64::from(d[0]), y as f64 + f64::from(d[1]), z as f64 + f64::from(d[2])];
                out.push(match kind {
                    WarpKind::Intensity => sample(vol, p, T::default()),
                    WarpKind::Label => sample(vol, p.map(f64::round), T::default()),
                });
                i += 1;
            }
        }
    }
    Ok(Volume3D::new(*vol.geometry(), out)?.with_meta(vol.meta().clone()))
}

/// A reference timepoint resampled into follow-up space, with the follow-up
/// alongside.
#[derive(Debug, Clone)]
pub struct RegisteredPair {
    pub x0_reg: CtVolume,
    pub y0_reg: Option<LabelVolume>,
    pub m0_reg: LabelVolume,
    pub x1: CtVolume,
    pub y1: Option<LabelVolume>,
    pub m1: LabelVolume,
    pub transform: BSplineTransform,
    pub report: RegistrationReport,
}

/// Registers the lung masks and carries CT and pathology along.
pub fn register_pair(
    reference: &ProcessedTimepoint,
    followup: &ProcessedTimepoint,
    cfg: &RegistrationConfig,
) -> Result<RegisteredPair> {
    require_same_geometry(&reference.ct, &followup.ct, "register_pair ct")?;
    let (transform, report) = register_masks_with_report(&reference.lung_mask, &followup.lung_mask, cfg)?;
    Ok(RegisteredPair {
        x0_reg: warp(&reference.ct, &transform, WarpKind::Intensity)?,
        y0_reg: reference.pathology.as_ref().map(|y| warp(y, &transform, WarpKind::Label)).transpose()?,
        m0_reg: warp(&reference.lung_mask, &transform, WarpKind::Label)?,
        x1: followup.ct.clone(),
        y1: followup.pathology.clone(),
        m1: followup.lung_mask.clone(),
        transform,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::BoundingBox;
    use crate::volume::Geometry;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ellipsoid(shape: [usize; 3], c: [f64; 3], r: [f64; 3]) -> LabelVolume {
        Volume3D::from_fn(Geometry::with_shape(shape).unwrap(), |x, y, z| {
            let p = [x as f64, y as f64, z as f64];
            u8::from((0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0)
        })
    }

    fn fast() -> RegistrationConfig {
        RegistrationConfig { max_iterations: 40, ..Default::default() }
    }

    #[test]
    fn identity_warp_is_exact() {
        let g = Geometry::new([9, 7, 5], [0.8, 0.9, 2.0], [1.0, 2.0, 3.0]).unwrap();
        let t = BSplineTransform::identity(g, [6, 5, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = Volume3D::from_fn(g, |_, _, _| rng.random_range(0..5u8));
        assert_eq!(warp(&labels, &t, WarpKind::Label).unwrap(), labels);
        let ct = Volume3D::from_fn(g, |_, _, _| rng.random::<f32>());
        let w = warp(&ct, &t, WarpKind::Intensity).unwrap();
        for (a, b) in w.data().iter().zip(ct.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn translation_moves_delta_spike() {
        let g = Geometry::new([20, 20, 20], [1.5, 1.5, 1.5], [0.0; 3]).unwrap();
        let mut spike = Volume3D::filled(g, 0.0f32);
        spike.set(12, 9, 7, 1.0);
        // Constant coefficients give a constant displacement of (3, -2, 1) voxels.
        let mut t = BSplineTransform::identity(g, [6; 3]).unwrap();
        for c in &mut t.coefficients {
            *c = [3.0 * 1.5, -2.0 * 1.5, 1.5];
        }
        let w = warp(&spike, &t, WarpKind::Intensity).unwrap();
        let (argmax, _) = w.data().iter().enumerate().fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        // Output x samples input x + d, so the spike appears at 12 - 3 etc.
        assert_eq!(g.coords(argmax), [9, 11, 6]);
        assert!((w.data()[argmax] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn warp_rejects_foreign_geometry() {
        let t = BSplineTransform::identity(Geometry::with_shape([8; 3]).unwrap(), [4; 3]).unwrap();
        let v = Volume3D::filled(Geometry::with_shape([8, 8, 9]).unwrap(), 0u8);
        assert!(matches!(warp(&v, &t, WarpKind::Label), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn identical_masks_stay_aligned() {
        let m = ellipsoid([32; 3], [15.5, 16.0, 15.0], [10.0, 8.0, 11.0]);
        let t = register_masks(&m, &m, &fast()).unwrap();
        let d = dice(&warp(&m, &t, WarpKind::Label).unwrap(), &m, 1).unwrap();
        assert!(d >= 0.99, "dice {d}");
    }

    #[test]
    fn recovers_five_voxel_translation() {
        let m0 = ellipsoid([40; 3], [19.0, 20.0, 19.5], [11.0, 9.0, 12.0]);
        let m1 = ellipsoid([40; 3], [24.0, 20.0, 19.5], [11.0, 9.0, 12.0]);
        let before = dice(&m0, &m1, 1).unwrap();
        let (t, report) = register_masks_with_report(&m0, &m1, &fast()).unwrap();
        let d = dice(&warp(&m0, &t, WarpKind::Label).unwrap(), &m1, 1).unwrap();
        assert!(d >= 0.95, "dice {before} -> {d}, {report:?}");
        assert!(!report.fell_back_to_identity);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = ellipsoid([16; 3], [8.0; 3], [4.0; 3]);
        let empty = Volume3D::filled(*m.geometry(), 0u8);
        assert!(matches!(register_masks(&m, &empty, &fast()), Err(Error::EmptyMask(_))));
        assert!(matches!(register_masks(&empty, &m, &fast()), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn config_invariants() {
        let mut c = RegistrationConfig { control_grid_points: 3, ..Default::default() };
        assert!(c.validate().is_err());
        c.control_grid_points = 4;
        c.pyramid_levels = 0;
        assert!(c.validate().is_err());
        assert_eq!(RegistrationConfig::default().shrink_factors(), vec![4, 2, 1]);
    }

    #[test]
    fn metric_gradient_matches_finite_differences() {
        let m0 = ellipsoid([16; 3], [7.0, 8.0, 8.5], [5.0, 4.0, 5.5]);
        let m1 = ellipsoid([16; 3], [8.5, 7.5, 8.0], [5.0, 4.5, 5.0]);
        let f: Vec<f64> = m1.data().iter().map(|&v| f64::from(v)).collect();
        let m: Vec<f64> = m0.data().iter().map(|&v| f64::from(v)).collect();
        let t = BSplineTransform::identity(*m1.geometry(), [5; 3]).unwrap();
        let level = Level::new(&f, &m, [16; 3], 2, 1.0, &t);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c: Vec<f64> = (0..3 * 125).map(|_| rng.random_range(-0.7..0.7)).collect();
        let (_, g) = level.metric(&c);
        let h = 1e-6;
        for k in [0, 17, 100, 188, 250, 374] {
            let mut cp = c.clone();
            cp[k] += h;
            let mut cm = c.clone();
            cm[k] -= h;
            let fd = (level.metric(&cp).0 - level.metric(&cm).0) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-3), "k={k} fd={fd} g={}", g[k]);
        }
    }

    #[test]
    fn membrane_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = [4, 5, 4];
        let c: Vec<f64> = (0..3 * 80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = vec![0.0; c.len()];
        membrane(&c, grid, 0.3, &mut g);
        for k in [0, 41, 239] {
            let mut cp = c.clone();
            cp[k] += 1e-6;
            let mut cm = c.clone();
            cm[k] -= 1e-6;
            let mut sink = vec![0.0; c.len()];
            let fd = (membrane(&cp, grid, 0.3, &mut sink) - membrane(&cm, grid, 0.3, &mut sink)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn transform_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::new([10, 12, 8], [0.5, 0.7, 1.2], [3.0, -4.0, 5.0]).unwrap();
        let mut t = BSplineTransform::identity(g, [5, 6, 4]).unwrap();
        for (i, c) in t.coefficients.iter_mut().enumerate() {
            *c = [i as f64 * 0.1, -(i as f64), 1.0 / (i as f64 + 1.0)];
        }
        let p = dir.path().join("t.json");
        t.save(&p).unwrap();
        assert_eq!(BSplineTransform::load(&p).unwrap(), t);
    }

    fn processed(ct: CtVolume, mask: LabelVolume, pathology: LabelVolume) -> ProcessedTimepoint {
        ProcessedTimepoint { ct, lung_mask: mask, pathology: Some(pathology), bbox: BoundingBox { lo: [0; 3], hi: [0; 3] } }
    }

    #[test]
    fn pathology_does_not_affect_transform() {
        let shape = [24; 3];
        let m0 = ellipsoid(shape, [11.0, 12.0, 11.5], [7.0, 6.0, 8.0]);
        let m1 = ellipsoid(shape, [12.5, 11.5, 12.0], [7.5, 6.0, 7.5]);
        let ct0 = m0.map(|v| if v == 1 { 0.2 } else { 0.0 });
        let ct1 = m1.map(|v| if v == 1 { 0.2 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut y0a = m0.clone();
        let mut y0b = m0.clone();
        for (a, b) in y0a.data_mut().iter_mut().zip(y0b.data_mut()) {
            if *a == 1 {
                *a = rng.random_range(1..5);
                *b = rng.random_range(1..5);
            }
        }
        let fup = processed(ct1, m1.clone(), m1);
        let cfg = RegistrationConfig { max_iterations: 15, ..Default::default() };
        let a = register_pair(&processed(ct0.clone(), m0.clone(), y0a.clone()), &fup, &cfg).unwrap();
        let b = register_pair(&processed(ct0, m0, y0b), &fup, &cfg).unwrap();
        assert_eq!(a.transform.coefficients, b.transform.coefficients);
        let alphabet = a.y0_reg.unwrap().alphabet();
        assert!(alphabet.iter().all(|l| y0a.alphabet().contains(l) || *l == 0));
    }

    #[test]
    fn identical_timepoints_give_matching_ct() {
        let m = ellipsoid([24; 3], [11.5; 3], [8.0, 7.0, 9.0]);
        let ct = Volume3D::from_fn(*m.geometry(), |x, y, z| ((x + 2 * y + 3 * z) % 17) as f32 / 17.0);
        let tp = processed(ct.clone(), m.clone(), m.clone());
        let r = register_pair(&tp, &tp, &fast()).unwrap();
        let mad: f32 = r.x0_reg.data().iter().zip(ct.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / ct.data().len() as f32;
        assert!(mad < 0.01, "{mad}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn warp_preserves_label_alphabet(seed in any::<u64>(), amp in 0.0f64..6.0) {
            let g = Geometry::with_shape([10, 9, 8]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = Volume3D::from_fn(g, |_, _, _| [0u8, 2, 3][rng.random_range(0..3)]);
            let mut t = BSplineTransform::identity(g, [5; 3]).unwrap();
            for c in &mut t.coefficients {
                *c = [rng.random_range(-amp..=amp), rng.random_range(-amp..=amp), rng.random_range(-amp..=amp)];
            }
            let w = warp(&labels, &t, WarpKind::Label).unwrap();
            for l in w.alphabet() {
                prop_assert!(l == 0 || l == 2 || l == 3);
            }
        }

        #[test]
        fn registration_never_lowers_dice(dx in -3.0f64..3.0, rx in 4.0f64..7.0) {
            let m0 = ellipsoid([20; 3], [9.5; 3], [6.0, 5.0, 6.5]);
            let m1 = ellipsoid([20; 3], [9.5 + dx, 9.5, 9.5], [rx, 5.0, 6.5]);
            let cfg = RegistrationConfig { max_iterations: 10, pyramid_levels: 2, ..Default::default() };
            let (t, r) = register_masks_with_report(&m0, &m1, &cfg).unwrap();
            let after = dice(&warp(&m0, &t, WarpKind::Label).unwrap(), &m1, 1).unwrap();
            prop_assert!(after >= dice(&m0, &m1, 1).unwrap());
            prop_assert_eq!(after, r.dice_after);
        }
    }
}
