//! NIfTI-1 (`.nii`) reading and writing for volumes, label maps and
//! displacement fields.
//!
//! Geometry is stored twice, as qform (identity rotation, offset = origin) and
//! as a diagonal sform; readers take spacing from `pixdim` and the origin from
//! whichever transform code is set. Volume metadata travels in `descrip` as
//! `key=value` pairs separated by `;`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array, ArrayD, ShapeBuilder};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Volume3D};
use crate::{CtVolume, DisplacementField, LabelVolume, ProgressionMap};

const UNITS_MM: u8 = 2;
const INTENT_VECTOR: i16 = 1007;
const DESCRIP_LEN: usize = 80;

fn nifti_err(path: &Path) -> impl FnOnce(nifti::NiftiError) -> Error + '_ {
    move |source| Error::Nifti { path: path.to_path_buf(), source }
}

fn header_for(geometry: &Geometry, meta: &BTreeMap<String, String>) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0; 8];
    for a in 0..3 {
        h.pixdim[a + 1] = geometry.spacing[a] as f32;
    }
    h.xyzt_units = UNITS_MM;
    h.qform_code = 1;
    h.sform_code = 1;
    h.quatern_b = 0.0;
    h.quatern_c = 0.0;
    h.quatern_d = 0.0;
    h.quatern_x = geometry.origin[0] as f32;
    h.quatern_y = geometry.origin[1] as f32;
    h.quatern_z = geometry.origin[2] as f32;
    h.srow_x = [geometry.spacing[0] as f32, 0.0, 0.0, geometry.origin[0] as f32];
    h.srow_y = [0.0, geometry.spacing[1] as f32, 0.0, geometry.origin[1] as f32];
    h.srow_z = [0.0, 0.0, geometry.spacing[2] as f32, geometry.origin[2] as f32];
    let mut descrip: Vec<u8> = meta
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
        .into_bytes();
    descrip.truncate(DESCRIP_LEN - 1);
    descrip.resize(DESCRIP_LEN, 0);
    h.descrip = descrip;
    h
}

fn geometry_from(header: &NiftiHeader, shape: [usize; 3], path: &Path) -> Result<Geometry> {
    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]].map(|s| f64::from(s.abs()));
    let origin = if header.qform_code > 0 {
        [header.quatern_x, header.quatern_y, header.quatern_z].map(f64::from)
    } else if header.sform_code > 0 {
        [header.srow_x[3], header.srow_y[3], header.srow_z[3]].map(f64::from)
    } else {
        [0.0; 3]
    };
    Geometry::new(shape, spacing, origin).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn meta_from(header: &NiftiHeader) -> BTreeMap<String, String> {
    let end = header.descrip.iter().position(|&b| b == 0).unwrap_or(header.descrip.len());
    String::from_utf8_lossy(&header.descrip[..end])
        .split(';')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Voxel element types this module can write.
pub trait NiftiVoxel: Copy + sealed::Sealed {
    #[doc(hidden)]
    fn write(options: &WriterOptions<'_>, data: &ndarray::Array3<Self>) -> nifti::Result<()>;
}

mod sealed {
    pub trait Sealed {}
}

macro_rules! nifti_voxel {
    ($($t:ty),*) => {$(
        impl sealed::Sealed for $t {}
        impl NiftiVoxel for $t {
            fn write(options: &WriterOptions<'_>, data: &ndarray::Array3<Self>) -> nifti::Result<()> {
                options.write_nifti(data)
            }
        }
    )*};
}

nifti_voxel!(u8, i8, i16, f32, f64);

/// Writes any supported voxel type. Parent directories must exist.
pub fn write_volume<T: NiftiVoxel>(path: impl AsRef<Path>, volume: &Volume3D<T>) -> Result<()> {
    let path = path.as_ref();
    let [nx, ny, nz] = volume.shape();
    let array = Array::from_shape_vec((nx, ny, nz).f(), volume.data().to_vec())
        .expect("volume length matches its geometry");
    let header = header_for(volume.geometry(), volume.meta());
    T::write(&WriterOptions::new(path).reference_header(&header), &array).map_err(nifti_err(path))
}

/// Writes a CT volume in HU as signed 16-bit, rounding to the nearest unit.
pub fn write_hu(path: impl AsRef<Path>, ct: &CtVolume) -> Result<()> {
    let hu = ct.map(|v| v.round().clamp(f32::from(i16::MIN), f32::from(i16::MAX)) as i16);
    write_volume(path, &hu)
}

fn read_array(path: &Path) -> Result<(NiftiHeader, ArrayD<f32>)> {
    let object = ReaderOptions::new().read_file(path).map_err(nifti_err(path))?;
    let header = object.header().clone();
    let array = object.into_volume().into_ndarray::<f32>().map_err(nifti_err(path))?;
    Ok((header, array))
}

fn spatial_shape(array_shape: &[usize], path: &Path) -> Result<[usize; 3]> {
    match array_shape {
        [nx] => Ok([*nx, 1, 1]),
        [nx, ny] => Ok([*nx, *ny, 1]),
        [nx, ny, nz, rest @ ..] if rest.iter().all(|&d| d == 1) => Ok([*nx, *ny, *nz]),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a 3D scalar volume, found dims {other:?}"),
        }),
    }
}

/// Reads any scalar NIfTI volume as `f32` (scaling applied).
pub fn read_f32(path: impl AsRef<Path>) -> Result<CtVolume> {
    let path = path.as_ref();
    let (header, array) = read_array(path)?;
    let shape = spatial_shape(array.shape(), path)?;
    let geometry = geometry_from(&header, shape, path)?;
    // Reversing the axes turns logical iteration order into x-fastest order.
    let data: Vec<f32> = array.t().iter().copied().collect();
    Ok(Volume3D::new(geometry, data)?.with_meta(meta_from(&header)))
}

/// Reads an integral label map; non-integral or out-of-range voxels are rejected.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let v = read_f32(path)?;
    if let Some(bad) = v.data().iter().find(|&&x| x.fract() != 0.0 || !(0.0..=255.0).contains(&x)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("voxel value {bad} is not a valid label"),
        });
    }
    Ok(v.map(|x| x as u8))
}

pub fn read_progression(path: impl AsRef<Path>) -> Result<ProgressionMap> {
    let path = path.as_ref();
    let v = read_f32(path)?;
    if let Some(bad) = v.data().iter().find(|&&x| !(x == -1.0 || x == 0.0 || x == 1.0)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("progression value {bad} outside {{-1, 0, 1}}"),
        });
    }
    Ok(v.map(|x| x as i8))
}

/// Writes a 3-vector field as a 5D `(nx, ny, nz, 1, 3)` float32 NIfTI with the
/// vector intent code.
pub fn write_displacement(path: impl AsRef<Path>, field: &DisplacementField) -> Result<()> {
    let path = path.as_ref();
    let [nx, ny, nz] = field.shape();
    let n = field.geometry().len();
    let mut flat = vec![0.0f32; 3 * n];
    for (i, v) in field.data().iter().enumerate() {
        for c in 0..3 {
            flat[i + c * n] = v[c];
        }
    }
    let array = Array::from_shape_vec((nx, ny, nz, 1, 3).f(), flat).expect("field length");
    let mut header = header_for(field.geometry(), field.meta());
    header.intent_code = INTENT_VECTOR;
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&array)
        .map_err(nifti_err(path))
}

pub fn read_displacement(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let (header, array) = read_array(path)?;
    let shape = match array.shape() {
        [nx, ny, nz, 1, 3] => [*nx, *ny, *nz],
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected (nx, ny, nz, 1, 3) vector field, found {other:?}"),
            })
        }
    };
    let geometry = geometry_from(&header, shape, path)?;
    let n = geometry.len();
    let flat: Vec<f32> = array.t().iter().copied().collect();
    let data = (0..n).map(|i| [flat[i], flat[i + n], flat[i + 2 * n]]).collect();
    Ok(Volume3D::new(geometry, data)?.with_meta(meta_from(&header)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::check_geometry;

    fn geometry() -> Geometry {
        Geometry::new([5, 4, 3], [0.9, 0.75, 1.25], [-120.5, 33.0, 7.125]).unwrap()
    }

    #[test]
    fn float_and_label_volumes_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = geometry();
        let mut meta = BTreeMap::new();
        meta.insert("device".to_string(), "phantom".to_string());
        meta.insert("day".to_string(), "12".to_string());
        let v = Volume3D::from_fn(g, |x, y, z| (x as f32) * 0.5 - (y * z) as f32).with_meta(meta);
        let p = dir.path().join("v.nii");
        write_volume(&p, &v).unwrap();
        let back = read_f32(&p).unwrap();
        assert!(check_geometry(&v, &back));
        assert_eq!(v.data(), back.data());
        assert_eq!(back.meta(), v.meta());

        let labels = Volume3D::from_fn(g, |x, y, z| ((x + y + z) % 5) as u8);
        let p = dir.path().join("l.nii");
        write_volume(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap().data(), labels.data());
    }

    #[test]
    fn hu_is_stored_as_int16() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::from_fn(geometry(), |x, _, _| -1000.4 + x as f32 * 300.0);
        let p = dir.path().join("ct.nii");
        write_hu(&p, &v).unwrap();
        let header = NiftiHeader::from_file(&p).unwrap();
        assert_eq!(header.datatype, nifti::NiftiType::Int16 as i16);
        let back = read_f32(&p).unwrap();
        for (a, b) in v.data().iter().zip(back.data()) {
            assert_eq!(a.round(), *b);
        }
    }

    #[test]
    fn displacement_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Volume3D::from_fn(geometry(), |x, y, z| [x as f32, -(y as f32), 0.25 * z as f32]);
        let p = dir.path().join("d.nii");
        write_displacement(&p, &f).unwrap();
        let back = read_displacement(&p).unwrap();
        assert_eq!(back.data(), f.data());
        assert!(check_geometry(&f, &back));
    }

    #[test]
    fn non_integral_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::filled(geometry(), 1.5f32);
        let p = dir.path().join("bad.nii");
        write_volume(&p, &v).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Format { .. })));
    }
}
