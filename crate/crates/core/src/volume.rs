//! Regular 3D grids with physical geometry, and the pathology class taxonomy.
//!
//! Voxels are stored with `x` varying fastest (`index = x + nx * (y + ny * z)`),
//! the same ordering NIfTI uses on disk. Geometry is axis-aligned: a voxel at
//! index `(i, j, k)` sits at `origin + (i, j, k) * spacing` millimetres.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation classes, background included.
pub const N_CLASSES: usize = 5;

const GEOMETRY_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
    /// World position (mm) of voxel `(0, 0, 0)`.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidGeometry(format!("shape {shape:?} has an empty axis")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGeometry(format!("spacing {spacing:?} must be positive")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!("origin {origin:?} is not finite")));
        }
        Ok(Self { shape, spacing, origin })
    }

    /// Unit spacing, zero origin.
    pub fn with_shape(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3], [0.0; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.shape;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn world(&self, idx: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + idx[a] * self.spacing[a])
    }

    pub fn continuous_index(&self, world: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (world[a] - self.origin[a]) / self.spacing[a])
    }

    /// Exact shape equality plus spacing/origin equality within a relative
    /// tolerance of 1e-6.
    pub fn matches(&self, other: &Geometry) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= GEOMETRY_RTOL * a.abs().max(b.abs()).max(1.0);
        self.shape == other.shape
            && (0..3).all(|a| close(self.spacing[a], other.spacing[a]))
            && (0..3).all(|a| close(self.origin[a], other.origin[a]))
    }
}

/// A 3D grid of `T` carrying physical geometry and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<T> {
    geometry: Geometry,
    data: Vec<T>,
    meta: BTreeMap<String, String>,
}

impl<T: Copy> Volume3D<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::ShapeMismatch { shape: geometry.shape, got: data.len() });
        }
        Ok(Self { geometry, data, meta: BTreeMap::new() })
    }

    pub fn filled(geometry: Geometry, value: T) -> Self {
        Self { data: vec![value; geometry.len()], geometry, meta: BTreeMap::new() }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let [nx, ny, nz] = geometry.shape;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { geometry, data, meta: BTreeMap::new() }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.geometry.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = value;
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    /// Replaces the geometry while keeping voxel data; the shape must not change.
    pub fn with_geometry(mut self, geometry: Geometry) -> Result<Self> {
        if geometry.shape != self.geometry.shape {
            return Err(Error::GeometryMismatch(format!(
                "cannot relabel shape {:?} as {:?}",
                self.geometry.shape, geometry.shape
            )));
        }
        self.geometry = geometry;
        Ok(self)
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Volume3D<U> {
        Volume3D {
            geometry: self.geometry,
            data: self.data.iter().copied().map(f).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Copies the inclusive index box `lo..=hi`; the origin moves so that
    /// retained voxels keep their world coordinates.
    pub fn crop(&self, lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if lo[a] > hi[a] || hi[a] >= self.geometry.shape[a] {
                return Err(Error::InvalidGeometry(format!(
                    "crop box {lo:?}..={hi:?} outside shape {:?}",
                    self.geometry.shape
                )));
            }
        }
        let shape = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
        let origin = self.geometry.world([lo[0] as f64, lo[1] as f64, lo[2] as f64]);
        let geometry = Geometry::new(shape, self.geometry.spacing, origin)?;
        let mut data = Vec::with_capacity(geometry.len());
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                let row = self.geometry.index(lo[0], y, z);
                data.extend_from_slice(&self.data[row..row + shape[0]]);
            }
        }
        Ok(Self { geometry, data, meta: self.meta.clone() })
    }
}

impl Volume3D<u8> {
    /// Fails on the first voxel whose label exceeds `max`.
    pub fn validate_labels(&self, max: u8) -> Result<()> {
        match self.data.iter().find(|&&l| l > max) {
            Some(&label) => Err(Error::InvalidLabel { label, max }),
            None => Ok(()),
        }
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }

    /// Sorted set of label values present.
    pub fn alphabet(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.data {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }
}

/// True iff both grids share shape exactly and spacing/origin within 1e-6 relative.
pub fn check_geometry<A: Copy, B: Copy>(a: &Volume3D<A>, b: &Volume3D<B>) -> bool {
    a.geometry().matches(b.geometry())
}

pub(crate) fn require_same_geometry<A: Copy, B: Copy>(
    a: &Volume3D<A>,
    b: &Volume3D<B>,
    what: &str,
) -> Result<()> {
    if check_geometry(a, b) {
        Ok(())
    } else {
        Err(Error::GeometryMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.geometry(),
            b.geometry()
        )))
    }
}

/// Segmentation classes, in serialization / one-hot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum PathologyClass {
    Background = 0,
    HealthyLung = 1,
    GroundGlass = 2,
    Consolidation = 3,
    PleuralEffusion = 4,
}

impl PathologyClass {
    pub const ALL: [PathologyClass; N_CLASSES] = [
        PathologyClass::Background,
        PathologyClass::HealthyLung,
        PathologyClass::GroundGlass,
        PathologyClass::Consolidation,
        PathologyClass::PleuralEffusion,
    ];

    /// The four pathology-map classes reported in evaluations.
    pub const FOREGROUND: [PathologyClass; 4] = [
        PathologyClass::HealthyLung,
        PathologyClass::GroundGlass,
        PathologyClass::Consolidation,
        PathologyClass::PleuralEffusion,
    ];

    #[inline]
    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(index: u8) -> Option<Self> {
        Self::ALL.get(index as usize).copied()
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            PathologyClass::Background => "BG",
            PathologyClass::HealthyLung => "HL",
            PathologyClass::GroundGlass => "GGO",
            PathologyClass::Consolidation => "CONS",
            PathologyClass::PleuralEffusion => "PLEFF",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PathologyClass::Background => "background",
            PathologyClass::HealthyLung => "healthy lung",
            PathologyClass::GroundGlass => "ground-glass opacity",
            PathologyClass::Consolidation => "consolidation",
            PathologyClass::PleuralEffusion => "pleural effusion",
        }
    }

    /// Binary consolidation projection: CONS → 1, everything else → 0.
    #[inline]
    pub fn consolidation_projection(label: u8) -> u8 {
        u8::from(label == PathologyClass::Consolidation as u8)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(shape: [usize; 3]) -> Geometry {
        Geometry::new(shape, [0.9, 0.8, 1.5], [-10.0, 3.0, 100.0]).unwrap()
    }

    #[test]
    fn geometry_rejects_degenerate_axes() {
        assert!(Geometry::new([0, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn check_geometry_examples() {
        let a = Volume3D::filled(geom([30, 30, 30]), 0u8);
        assert!(check_geometry(&a, &a));

        let b = Volume3D::filled(Geometry::with_shape([300, 300, 300]).unwrap(), 0u8);
        let c = Volume3D::filled(Geometry::with_shape([300, 300, 299]).unwrap(), 0u8);
        assert!(!check_geometry(&b, &c));

        let mut g = geom([30, 30, 30]);
        g.spacing[0] += 1e-9;
        let d = Volume3D::filled(g, 0.0f32);
        assert!(check_geometry(&a, &d));

        g.spacing[0] += 1e-3;
        let e = Volume3D::filled(g, 0.0f32);
        assert!(!check_geometry(&a, &e));
    }

    #[test]
    fn index_roundtrip() {
        let g = geom([5, 7, 3]);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    #[test]
    fn crop_keeps_world_coordinates() {
        let g = geom([10, 9, 8]);
        let v = Volume3D::from_fn(g, |x, y, z| (x * 100 + y * 10 + z) as f32);
        let c = v.crop([2, 3, 4], [5, 7, 6]).unwrap();
        assert_eq!(c.shape(), [4, 5, 3]);
        assert_eq!(c.get(0, 0, 0), v.get(2, 3, 4));
        assert_eq!(c.get(3, 4, 2), v.get(5, 7, 6));
        let w_old = g.world([2.0, 3.0, 4.0]);
        let w_new = c.geometry().world([0.0; 3]);
        for a in 0..3 {
            assert!((w_old[a] - w_new[a]).abs() < 1e-12);
        }
        assert!(v.crop([0, 0, 0], [10, 0, 0]).is_err());
    }

    #[test]
    fn class_map_is_contiguous() {
        for (i, c) in PathologyClass::ALL.iter().enumerate() {
            assert_eq!(c.index() as usize, i);
            assert_eq!(PathologyClass::from_index(i as u8), Some(*c));
        }
        assert_eq!(PathologyClass::from_index(5), None);
    }

    #[test]
    fn consolidation_projection() {
        let projected: Vec<u8> = (0..5u8).map(PathologyClass::consolidation_projection).collect();
        assert_eq!(projected, vec![0, 0, 0, 1, 0]);
    }

    #[test]
    fn label_validation() {
        let g = geom([2, 2, 2]);
        let mut v = Volume3D::filled(g, 1u8);
        assert!(v.validate_labels(4).is_ok());
        v.set(1, 1, 1, 7);
        assert!(matches!(v.validate_labels(4), Err(Error::InvalidLabel { label: 7, max: 4 })));
        assert_eq!(v.alphabet(), vec![1, 7]);
    }
}
