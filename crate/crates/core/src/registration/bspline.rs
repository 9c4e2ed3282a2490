//! Cubic BSpline free-form deformation on a uniform control grid.
//!
//! Control point `i` along an axis sits at index-space position `(i - 1) * h`
//! with `h = (N - 1) / (n - 3)`, so `n` points cover voxel centres `0..N-1`
//! with one extra point beyond each end. Dense evaluation and its adjoint are
//! separable tensor contractions, one axis at a time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3D};

pub const TRANSFORM_FORMAT_VERSION: u32 = 1;

/// Uniform cubic BSpline basis at fractional offset `t`.
#[inline]
pub fn cubic_basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Deformable transform `T(x) = x + D(x)` over the fixed image domain.
/// Coefficients are displacements in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineTransform {
    pub format_version: u32,
    /// Control points per axis.
    pub grid_shape: [usize; 3],
    /// Distance between neighbouring control points (mm).
    pub grid_spacing: [f64; 3],
    /// World position (mm) of control point `(0, 0, 0)`.
    pub grid_origin: [f64; 3],
    /// Geometry of the fixed image the transform is defined on.
    pub domain: Geometry,
    /// Layout note written into serialized files.
    pub coefficient_order: String,
    /// One `[dx, dy, dz]` per control point, `x` index fastest.
    pub coefficients: Vec<[f64; 3]>,
}

const COEFFICIENT_ORDER: &str =
    "coefficients[i + gx*(j + gy*k)] = [dx, dy, dz] in mm for control point (i, j, k); x fastest";

impl BSplineTransform {
    /// Zero displacement with `points` control points per axis (at least 4).
    pub fn identity(domain: Geometry, points: [usize; 3]) -> Result<Self> {
        if points.iter().any(|&n| n < 4) {
            return Err(Error::Config(format!("control grid {points:?} needs at least 4 points per axis")));
        }
        let h = Self::index_spacing(&domain, points);
        Ok(Self {
            format_version: TRANSFORM_FORMAT_VERSION,
            grid_shape: points,
            grid_spacing: std::array::from_fn(|a| h[a] * domain.spacing[a]),
            grid_origin: std::array::from_fn(|a| domain.origin[a] - h[a] * domain.spacing[a]),
            domain,
            coefficient_order: COEFFICIENT_ORDER.to_string(),
            coefficients: vec![[0.0; 3]; points.iter().product()],
        })
    }

    fn index_spacing(domain: &Geometry, points: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| ((domain.shape[a].max(2) - 1) as f64) / (points[a] - 3) as f64)
    }

    pub fn n_control_points(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_identity(&self) -> bool {
        self.coefficients.iter().all(|c| *c == [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_shape.iter().product::<usize>() != self.coefficients.len() {
            return Err(Error::Config("coefficient count does not match grid shape".into()));
        }
        if self.coefficients.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Divergence("non-finite transform coefficient".into()));
        }
        let expect = Self::identity(self.domain, self.grid_shape)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * a.abs().max(b.abs()).max(1.0);
        if (0..3).any(|a| !close(expect.grid_spacing[a], self.grid_spacing[a]) || !close(expect.grid_origin[a], self.grid_origin[a])) {
            return Err(Error::Config("control grid does not cover the fixed domain".into()));
        }
        Ok(())
    }

    /// Coefficients converted to domain voxel units.
    pub(crate) fn index_coefficients(&self) -> Vec<[f64; 3]> {
        let s = self.domain.spacing;
        self.coefficients.iter().map(|c| [c[0] / s[0], c[1] / s[1], c[2] / s[2]]).collect()
    }

    pub(crate) fn set_index_coefficients(&mut self, flat: &[f64]) {
        let s = self.domain.spacing;
        for (c, v) in self.coefficients.iter_mut().zip(flat.chunks_exact(3)) {
            *c = [v[0] * s[0], v[1] * s[1], v[2] * s[2]];
        }
    }

    pub(crate) fn sampler(&self, positions: [&[f64]; 3]) -> GridSampler {
        let h = Self::index_spacing(&self.domain, self.grid_shape);
        GridSampler::new(self.grid_shape, h, positions)
    }

    /// Dense displacement (voxel units) at every domain voxel.
    pub fn displacement_field(&self) -> Volume3D<[f32; 3]> {
        let pos: [Vec<f64>; 3] = std::array::from_fn(|a| (0..self.domain.shape[a]).map(|i| i as f64).collect());
        let sampler = self.sampler([&pos[0], &pos[1], &pos[2]]);
        let dense = sampler.evaluate(&self.index_coefficients());
        Volume3D::new(self.domain, dense.into_iter().map(|d| d.map(|v| v as f32)).collect())
            .expect("dense field matches the domain")
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let t: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if t.format_version != TRANSFORM_FORMAT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unsupported transform version {}", t.format_version),
            });
        }
        t.validate()?;
        Ok(t)
    }
}

/// Basis support of one sample position along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Support {
    pub first: usize,
    pub w: [f64; 4],
}

/// Precomputed per-axis basis tables for a rectilinear set of sample points.
#[derive(Debug, Clone)]
pub(crate) struct GridSampler {
    grid: [usize; 3],
    tables: [Vec<Support>; 3],
}

impl GridSampler {
    pub fn new(grid: [usize; 3], h: [f64; 3], positions: [&[f64]; 3]) -> Self {
        let tables = std::array::from_fn(|a| {
            positions[a]
                .iter()
                .map(|&p| {
                    let u = p / h[a];
                    let cell = (u.floor().max(0.0) as usize).min(grid[a] - 4);
                    Support { first: cell, w: cubic_basis(u - cell as f64) }
                })
                .collect()
        });
        Self { grid, tables }
    }

    pub fn shape(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.tables[a].len())
    }

    /// `D[x,y,z] = Σ Bx[x,i] By[y,j] Bz[z,k] C[i,j,k]`.
    pub fn evaluate(&self, coef: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let [gx, gy, gz] = self.grid;
        let [nx, ny, nz] = self.shape();
        let [tx, ty, tz] = &self.tables;
        // Contract x: t1[x + nx*(j + gy*k)]
        let mut t1 = vec![[0.0; 3]; nx * gy * gz];
        for jk in 0..gy * gz {
            let row = &coef[jk * gx..(jk + 1) * gx];
            for (x, s) in tx.iter().enumerate() {
                t1[x + nx * jk] = weighted(row, s);
            }
        }
        // Contract y: t2[x + nx*(y + ny*k)]
        let mut t2 = vec![[0.0; 3]; nx * ny * gz];
        for k in 0..gz {
            for (y, s) in ty.iter().enumerate() {
                let out = &mut t2[nx * (y + ny * k)..][..nx];
                for (m, &w) in s.w.iter().enumerate() {
                    let src = &t1[nx * (s.first + m + gy * k)..][..nx];
                    axpy(out, src, w);
                }
            }
        }
        // Contract z.
        let mut d = vec![[0.0; 3]; nx * ny * nz];
        for (z, s) in tz.iter().enumerate() {
            let out = &mut d[nx * ny * z..][..nx * ny];
            for (m, &w) in s.w.iter().enumerate() {
                let src = &t2[nx * ny * (s.first + m)..][..nx * ny];
                axpy(out, src, w);
            }
        }
        d
    }

    /// Adjoint of [`evaluate`](Self::evaluate): scatters a dense field back onto
    /// the control grid.
    pub fn adjoint(&self, dense: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let [gx, gy, gz] = self.grid;
        let [nx, ny, _] = self.shape();
        let [tx, ty, tz] = &self.tables;
        let mut u2 = vec![[0.0; 3]; nx * ny * gz];
        for (z, s) in tz.iter().enumerate() {
            let src = &dense[nx * ny * z..][..nx * ny];
            for (m, &w) in s.w.iter().enumerate() {
                axpy(&mut u2[nx * ny * (s.first + m)..][..nx * ny], src, w);
            }
        }
        let mut u1 = vec![[0.0; 3]; nx * gy * gz];
        for k in 0..gz {
            for (y, s) in ty.iter().enumerate() {
                let src = &u2[nx * (y + ny * k)..][..nx];
                for (m, &w) in s.w.iter().enumerate() {
                    axpy(&mut u1[nx * (s.first + m + gy * k)..][..nx], src, w);
                }
            }
        }
        let mut c = vec![[0.0; 3]; gx * gy * gz];
        for jk in 0..gy * gz {
            let src = &u1[nx * jk..][..nx];
            let row = &mut c[jk * gx..(jk + 1) * gx];
            for (x, s) in tx.iter().enumerate() {
                for (m, &w) in s.w.iter().enumerate() {
                    for a in 0..3 {
                        row[s.first + m][a] += w * src[x][a];
                    }
                }
            }
        }
        c
    }
}

#[inline]
fn weighted(row: &[[f64; 3]], s: &Support) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for (m, &w) in s.w.iter().enumerate() {
        let c = row[s.first + m];
        for a in 0..3 {
            acc[a] += w * c[a];
        }
    }
    acc
}

#[inline]
fn axpy(out: &mut [[f64; 3]], src: &[[f64; 3]], w: f64) {
    for (o, s) in out.iter_mut().zip(src) {
        o[0] += w * s[0];
        o[1] += w * s[1];
        o[2] += w * s[2];
    }
}
