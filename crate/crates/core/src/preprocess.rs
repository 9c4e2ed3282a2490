//! Cropping, HU clipping with min-max normalization, isotropic-grid resizing
//! and three-view slicing with empty-slice removal.
//!
//! The chain always runs in the order crop → clip/normalize → resize → slice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::study::Timepoint;
use crate::volume::{require_same_geometry, Geometry, Volume3D};
use crate::{CtVolume, LabelVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Lower clip bound in HU.
    pub clip_lo: f64,
    /// Upper clip bound in HU.
    pub clip_hi: f64,
    /// Edge length of the resized cube, in voxels.
    pub target_size: usize,
    /// Slices whose max − min falls below this (normalized units) are empty.
    pub empty_eps: f64,
    /// Voxels added around the lung bounding box before cropping.
    pub crop_margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { clip_lo: -1024.0, clip_hi: 600.0, target_size: 300, empty_eps: 1e-5, crop_margin: 0 }
    }
}

impl PreprocessConfig {
    pub fn desk() -> Self {
        Self { target_size: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::Config(format!(
                "clip_lo ({}) must be below clip_hi ({})",
                self.clip_lo, self.clip_hi
            )));
        }
        if self.target_size < 8 {
            return Err(Error::Config(format!("target_size {} < 8", self.target_size)));
        }
        if !(self.empty_eps > 0.0) {
            return Err(Error::Config(format!("empty_eps {} must be positive", self.empty_eps)));
        }
        Ok(())
    }
}

/// Inclusive voxel index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn shape(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a] + 1)
    }
}

/// Minimal box around the non-zero voxels of `mask`, grown by `margin` and
/// clamped to the grid. `None` for an empty mask.
pub fn foreground_bbox(mask: &LabelVolume, margin: usize) -> Option<BoundingBox> {
    let [nx, ny, nz] = mask.shape();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    let data = mask.data();
    for z in 0..nz {
        for y in 0..ny {
            let row = &data[mask.geometry().index(0, y, z)..][..nx];
            let Some(first) = row.iter().position(|&l| l != 0) else { continue };
            let last = row.iter().rposition(|&l| l != 0).unwrap_or(first);
            any = true;
            lo = [lo[0].min(first), lo[1].min(y), lo[2].min(z)];
            hi = [hi[0].max(last), hi[1].max(y), hi[2].max(z)];
        }
    }
    any.then(|| BoundingBox {
        lo: lo.map(|v| v.saturating_sub(margin)),
        hi: std::array::from_fn(|a| (hi[a] + margin).min(mask.shape()[a] - 1)),
    })
}

/// Crops a volume and its lung mask to the lung bounding box.
pub fn crop_to_lung<T: Copy>(
    ct: &Volume3D<T>,
    lung_mask: &LabelVolume,
    margin: usize,
) -> Result<(Volume3D<T>, LabelVolume, BoundingBox)> {
    require_same_geometry(ct, lung_mask, "crop_to_lung")?;
    let bbox = foreground_bbox(lung_mask, margin)
        .ok_or_else(|| Error::EmptyMask("lung mask has no foreground voxel".into()))?;
    Ok((ct.crop(bbox.lo, bbox.hi)?, lung_mask.crop(bbox.lo, bbox.hi)?, bbox))
}

/// Clips to `[clip_lo, clip_hi]`, then rescales by the post-clip min and max
/// of this volume to `[0, 1]`. A constant volume maps to 0.5 everywhere.
pub fn clip_and_normalize<T: Scalar>(ct: &Volume3D<T>, cfg: &PreprocessConfig) -> Volume3D<T> {
    let lo = T::of(cfg.clip_lo);
    let hi = T::of(cfg.clip_hi);
    let clipped = ct.map(|v| v.max(lo).min(hi));
    let (min, max) = clipped
        .data()
        .iter()
        .fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
    if !(max > min) {
        return clipped.map(|_| T::of(0.5));
    }
    let range = max - min;
    clipped.map(|v| ((v - min) / range).max(T::zero()).min(T::one()))
}

/// Voxel types that can be resampled; floats interpolate trilinearly and
/// integer labels take the nearest neighbour.
pub trait Interpolate: Copy + Default {
    /// Combines the 8 cell corners `c[dz][dy][dx]` at fractional offsets `t`.
    fn blend(c: &[[[Self; 2]; 2]; 2], t: [f64; 3]) -> Self;
}

macro_rules! linear {
    ($($t:ty),*) => {$(
        impl Interpolate for $t {
            #[inline]
            fn blend(c: &[[[Self; 2]; 2]; 2], t: [f64; 3]) -> Self {
                #[inline]
                fn lerp(a: $t, b: $t, t: f64) -> $t {
                    if t == 0.0 { a } else { a + (t as $t) * (b - a) }
                }
                let x00 = lerp(c[0][0][0], c[0][0][1], t[0]);
                let x01 = lerp(c[0][1][0], c[0][1][1], t[0]);
                let x10 = lerp(c[1][0][0], c[1][0][1], t[0]);
                let x11 = lerp(c[1][1][0], c[1][1][1], t[0]);
                lerp(lerp(x00, x01, t[1]), lerp(x10, x11, t[1]), t[2])
            }
        }
    )*};
}

macro_rules! nearest {
    ($($t:ty),*) => {$(
        impl Interpolate for $t {
            #[inline]
            fn blend(c: &[[[Self; 2]; 2]; 2], t: [f64; 3]) -> Self {
                let pick = |t: f64| usize::from(t >= 0.5);
                c[pick(t[2])][pick(t[1])][pick(t[0])]
            }
        }
    )*};
}

linear!(f32, f64);
nearest!(u8, i8);

#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisSample {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
}

impl AxisSample {
    /// Position `p` must already lie in `[0, n - 1]`.
    #[inline]
    pub(crate) fn at(p: f64, n: usize) -> Self {
        let i0 = (p.floor().max(0.0) as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let t = if i1 == i0 { 0.0 } else { p - i0 as f64 };
        Self { i0, i1, t }
    }
}

#[inline]
pub(crate) fn sample_cell<T: Interpolate>(vol: &Volume3D<T>, s: [AxisSample; 3]) -> T {
    let g = vol.geometry();
    let d = vol.data();
    let at = |x, y, z| d[g.index(x, y, z)];
    let xs = [s[0].i0, s[0].i1];
    let ys = [s[1].i0, s[1].i1];
    let zs = [s[2].i0, s[2].i1];
    let c = [
        [[at(xs[0], ys[0], zs[0]), at(xs[1], ys[0], zs[0])], [at(xs[0], ys[1], zs[0]), at(xs[1], ys[1], zs[0])]],
        [[at(xs[0], ys[0], zs[1]), at(xs[1], ys[0], zs[1])], [at(xs[0], ys[1], zs[1]), at(xs[1], ys[1], zs[1])]],
    ];
    T::blend(&c, [s[0].t, s[1].t, s[2].t])
}

/// Samples at a continuous index; outside `[0, n-1]` on any axis yields `fill`.
#[inline]
pub fn sample<T: Interpolate>(vol: &Volume3D<T>, p: [f64; 3], fill: T) -> T {
    const TOL: f64 = 1e-9;
    let shape = vol.shape();
    let mut s = [AxisSample { i0: 0, i1: 0, t: 0.0 }; 3];
    for a in 0..3 {
        let n = shape[a];
        if !(p[a] >= -TOL && p[a] <= (n - 1) as f64 + TOL) {
            return fill;
        }
        s[a] = AxisSample::at(p[a].clamp(0.0, (n - 1) as f64), n);
    }
    sample_cell(vol, s)
}

/// Resamples to `target³` voxels preserving the physical extent; voxel
/// centres keep the half-voxel alignment of the original grid.
pub fn resize<T: Interpolate>(vol: &Volume3D<T>, target: usize) -> Result<Volume3D<T>> {
    resize_to(vol, [target; 3])
}

pub fn resize_to<T: Interpolate>(vol: &Volume3D<T>, target: [usize; 3]) -> Result<Volume3D<T>> {
    let src = vol.geometry();
    let spacing: [f64; 3] = std::array::from_fn(|a| src.spacing[a] * src.shape[a] as f64 / target[a] as f64);
    let origin: [f64; 3] = std::array::from_fn(|a| src.origin[a] - 0.5 * src.spacing[a] + 0.5 * spacing[a]);
    let geometry = Geometry::new(target, spacing, origin)?;
    let tables: [Vec<AxisSample>; 3] = std::array::from_fn(|a| {
        let n = src.shape[a];
        let scale = n as f64 / target[a] as f64;
        (0..target[a])
            .map(|i| AxisSample::at(((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64), n))
            .collect()
    });
    let out = Volume3D::from_fn(geometry, |x, y, z| sample_cell(vol, [tables[0][x], tables[1][y], tables[2][z]]));
    Ok(out.with_meta(vol.meta().clone()))
}

/// Slicing direction. Axial slices fix `z`, coronal fix `y`, sagittal fix `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Coronal, View::Sagittal];

    /// Volume axis held fixed within one slice.
    pub fn axis(self) -> usize {
        match self {
            View::Axial => 2,
            View::Coronal => 1,
            View::Sagittal => 0,
        }
    }

    /// `(column axis, row axis)` of the 2D image.
    pub fn image_axes(self) -> (usize, usize) {
        match self {
            View::Axial => (0, 1),
            View::Coronal => (0, 2),
            View::Sagittal => (1, 2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
        }
    }
}

/// Row-major 2D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image2<T> {
    #[inline]
    pub fn get(&self, col: usize, row: usize) -> T {
        self.data[row * self.width + col]
    }
}

impl<T: Scalar> Image2<T> {
    pub fn variation(&self) -> T {
        let (min, max) = self
            .data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(a, b), &v| (a.min(v), b.max(v)));
        max - min
    }
}

pub fn slice<T: Copy>(vol: &Volume3D<T>, view: View, index: usize) -> Image2<T> {
    let shape = vol.shape();
    let (ca, ra) = view.image_axes();
    let (width, height) = (shape[ca], shape[ra]);
    let mut data = Vec::with_capacity(width * height);
    let mut p = [0usize; 3];
    p[view.axis()] = index;
    for row in 0..height {
        p[ra] = row;
        for col in 0..width {
            p[ca] = col;
            data.push(vol.get(p[0], p[1], p[2]));
        }
    }
    Image2 { width, height, data }
}

/// Inverse of slicing: writes `images[i]` back as slice `i` along `view`.
pub fn stack<T: Copy + Default>(geometry: Geometry, view: View, images: &[Image2<T>]) -> Result<Volume3D<T>> {
    let (ca, ra) = view.image_axes();
    let shape = geometry.shape;
    if images.len() != shape[view.axis()]
        || images.iter().any(|im| im.width != shape[ca] || im.height != shape[ra])
    {
        return Err(Error::GeometryMismatch(format!(
            "{} {} slices do not tile shape {shape:?}",
            images.len(),
            view.as_str()
        )));
    }
    let mut out = Volume3D::filled(geometry, T::default());
    let mut p = [0usize; 3];
    for (index, im) in images.iter().enumerate() {
        p[view.axis()] = index;
        for row in 0..im.height {
            p[ra] = row;
            for col in 0..im.width {
                p[ca] = col;
                out.set(p[0], p[1], p[2], im.get(col, row));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SliceStack<T> {
    pub view: View,
    /// One image per index along the view axis.
    pub slices: Vec<Image2<T>>,
    /// Indices whose slice is not empty, ascending.
    pub kept_indices: Vec<usize>,
}

pub fn extract_slices<T: Scalar>(vol: &Volume3D<T>, view: View, cfg: &PreprocessConfig) -> SliceStack<T> {
    let eps = T::of(cfg.empty_eps);
    let slices: Vec<_> = (0..vol.shape()[view.axis()]).map(|i| slice(vol, view, i)).collect();
    let kept_indices = slices
        .iter()
        .enumerate()
        .filter(|(_, s)| !(s.variation() < eps))
        .map(|(i, _)| i)
        .collect();
    SliceStack { view, slices, kept_indices }
}

/// Kept slice indices per view without materialising the images.
pub fn kept_indices<T: Scalar>(vol: &Volume3D<T>, view: View, cfg: &PreprocessConfig) -> Vec<usize> {
    extract_slices(vol, view, cfg).kept_indices
}

/// A timepoint after crop → normalize → resize.
#[derive(Debug, Clone)]
pub struct ProcessedTimepoint {
    /// Normalized intensities in `[0, 1]`.
    pub ct: CtVolume,
    pub lung_mask: LabelVolume,
    pub pathology: Option<LabelVolume>,
    pub bbox: BoundingBox,
}

pub fn preprocess_timepoint(tp: &Timepoint, cfg: &PreprocessConfig) -> Result<ProcessedTimepoint> {
    cfg.validate()?;
    let (ct, lung, bbox) = crop_to_lung(&tp.ct, &tp.lung_mask, cfg.crop_margin)?;
    let pathology = tp.pathology.as_ref().map(|p| p.crop(bbox.lo, bbox.hi)).transpose()?;
    let ct = clip_and_normalize(&ct, cfg);
    Ok(ProcessedTimepoint {
        ct: resize(&ct, cfg.target_size)?,
        lung_mask: resize(&lung, cfg.target_size)?,
        pathology: pathology.map(|p| resize(&p, cfg.target_size)).transpose()?,
        bbox,
    })
}

/// A longitudinal pair on a shared `target³` grid, ready for registration.
#[derive(Debug, Clone)]
pub struct ProcessedPair {
    pub reference: ProcessedTimepoint,
    pub followup: ProcessedTimepoint,
}

/// Preprocesses both timepoints and places the reference scan on the
/// follow-up grid.
///
/// Each scan is cropped to its own lung box, so the shared grid amounts to a
/// box-to-box affine pre-alignment; the residual deformation is left to the
/// deformable registration.
pub fn preprocess_pair(reference: &Timepoint, followup: &Timepoint, cfg: &PreprocessConfig) -> Result<ProcessedPair> {
    let r = preprocess_timepoint(reference, cfg)?;
    let f = preprocess_timepoint(followup, cfg)?;
    let g = *f.ct.geometry();
    let relabel = |v: LabelVolume| v.with_geometry(g);
    let reference = ProcessedTimepoint {
        ct: r.ct.with_geometry(g)?,
        lung_mask: relabel(r.lung_mask)?,
        pathology: r.pathology.map(relabel).transpose()?,
        bbox: r.bbox,
    };
    Ok(ProcessedPair { reference, followup: f })
}
