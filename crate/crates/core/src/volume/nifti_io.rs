use std::path::Path;

use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use super::{to_stored_hu, RawVolume};
use crate::error::{BpregError, Result};

/// Reads a NIfTI-1 file (`.nii` or `.nii.gz`). Intensities are scaled with
/// `scl_slope`/`scl_inter` and rounded to integer HU; 4D inputs keep the
/// first volume.
pub fn load_nifti(path: &Path) -> Result<RawVolume> {
    if !path.exists() {
        return Err(BpregError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => BpregError::io(path, io),
            other => BpregError::format(path, other.to_string()),
        })?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if ndim < 3 {
        return Err(BpregError::format(path, format!("expected 3 dimensions, got {ndim}")));
    }
    let dims = [
        header.dim[1] as usize,
        header.dim[2] as usize,
        header.dim[3] as usize,
    ];
    let spacing = [
        header.pixdim[1].abs() as f64,
        header.pixdim[2].abs() as f64,
        header.pixdim[3].abs() as f64,
    ];
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(BpregError::format(path, format!("non-positive spacing {spacing:?}")));
    }
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| BpregError::format(path, e.to_string()))?;
    let shape = arr.shape().to_vec();
    if shape.len() < 3 || shape[..3] != dims[..] {
        return Err(BpregError::format(path, format!("payload shape {shape:?} != dims {dims:?}")));
    }
    let mut voxels = Vec::with_capacity(dims.iter().product());
    let extra = shape.len() - 3;
    let mut index = vec![0usize; shape.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                index[0] = x;
                index[1] = y;
                index[2] = z;
                for e in index.iter_mut().skip(3).take(extra) {
                    *e = 0;
                }
                voxels.push(to_stored_hu(arr[index.as_slice()]));
            }
        }
    }
    let vol = RawVolume {
        dims,
        spacing,
        voxels,
    };
    vol.check().map_err(|r| BpregError::format(path, r))?;
    Ok(vol)
}
