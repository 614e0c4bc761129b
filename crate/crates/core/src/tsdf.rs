//! Per-view truncated signed distance fields and binary observation weights.
//!
//! The signed distance of a point is measured along its line of sight:
//! the Euclidean range of the observed surface point minus the range of the
//! query point, positive in front of the surface. Values are scaled by the
//! band width `delta` and saturate at ±1. A voxel counts as observed (with
//! weight 1) unless it is invisible to the camera or lies more than `eta`
//! behind the observed surface; such occluded voxels keep `f = -1` with
//! weight 0.

use std::io::Write;
use std::path::Path;

use nalgebra::Point3;

use crate::grid::DenseGrid;
use crate::volume::{Camera, RangeImage, VolumeDomain};
use crate::{Error, Result};

/// Stored field value for voxels the camera cannot see at all.
pub const UNOBSERVED_VALUE: f32 = 1.0;

/// Dense TSDF `f` in `[-1, 1]` and weight `w` in `{0, 1}` for one view.
#[derive(Clone, Debug)]
pub struct ViewTsdf {
    pub f: DenseGrid<f32>,
    pub w: DenseGrid<u8>,
    pub delta: f64,
    pub eta: f64,
}

impl ViewTsdf {
    /// Bytes a dense representation needs when both `f` and `w` are stored
    /// as 32-bit floats per voxel.
    pub fn dense_footprint_bytes(resolution: usize) -> usize {
        resolution.pow(3) * 2 * std::mem::size_of::<f32>()
    }

    /// Writes `f` (kind 0) or `w` (kind 1) as a raw little-endian float32
    /// blob behind a header of five little-endian i32: `N N N kind 0`.
    pub fn dump_raw(&self, path: &Path, kind: DumpKind) -> Result<()> {
        let n = self.f.n() as i32;
        let mut buf = Vec::with_capacity(20 + 4 * self.f.len());
        for h in [n, n, n, kind as i32, 0] {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        match kind {
            DumpKind::Field => {
                for v in self.f.as_slice() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            DumpKind::Weight => {
                for &v in self.w.as_slice() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        std::fs::File::create(path)
            .and_then(|mut file| file.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpKind {
    Field = 0,
    Weight = 1,
}

/// Euclidean range of the surface sample at pixel `(i, j)` with depth `z`.
fn pixel_range(cam: &Camera, i: usize, j: usize, z: f64) -> f64 {
    (cam.ray_direction(Camera::pixel_center(i, j)) * z).norm()
}

/// Line-of-sight signed distance of `x` to the observed surface, in meters.
pub fn signed_distance(x: &Point3<f64>, img: &RangeImage, cam: &Camera) -> Option<f64> {
    let (i, j) = cam.project_to_pixel(x)?;
    let z = img.depth(i, j)?;
    Some(pixel_range(cam, i, j, z) - (x - cam.center()).norm())
}

/// Scales by `delta` and saturates to `[-1, 1]`.
pub fn truncate(phi: f64, delta: f64) -> f64 {
    if phi.abs() > delta {
        phi.signum()
    } else {
        phi / delta
    }
}

/// 0 for unobserved points and for points deeper than `eta` behind the
/// surface, 1 otherwise.
pub fn visibility_weight(phi: Option<f64>, eta: f64) -> u8 {
    match phi {
        Some(p) if p >= -eta => 1,
        _ => 0,
    }
}

/// `(f, w)` for one sample.
fn tsdf_sample(phi: Option<f64>, delta: f64, eta: f64) -> (f32, u8) {
    let w = visibility_weight(phi, eta);
    let f = match phi {
        None => UNOBSERVED_VALUE,
        Some(_) if w == 0 => -1.0,
        Some(p) => truncate(p, delta) as f32,
    };
    (f, w)
}

pub fn build_view_tsdf(
    img: &RangeImage,
    cam: &Camera,
    dom: &VolumeDomain,
    delta: f64,
    eta: f64,
) -> Result<ViewTsdf> {
    if !(delta > 0.0 && eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta and eta must be positive (delta={delta}, eta={eta})"
        )));
    }
    let k = cam.intrinsics();
    if img.width() != k.width || img.height() != k.height {
        return Err(Error::InvalidArgument(format!(
            "range image is {}x{} but the camera expects {}x{}",
            img.width(),
            img.height(),
            k.width,
            k.height
        )));
    }
    let ranges: Vec<Option<f64>> = (0..img.height())
        .flat_map(|j| (0..img.width()).map(move |i| (i, j)))
        .map(|(i, j)| img.depth(i, j).map(|z| pixel_range(cam, i, j, z)))
        .collect();
    let center = cam.center();
    let n = dom.resolution();
    let slab = n * n;
    let mut f = DenseGrid::filled(n, 0.0f32);
    let mut w = DenseGrid::filled(n, 0u8);
    let samples: Vec<(f32, u8)> = crate::par::map_range(n, |z| {
        let mut out = Vec::with_capacity(slab);
        for y in 0..n {
            for x in 0..n {
                let p = dom.voxel_center([x, y, z]);
                let phi = cam
                    .project_to_pixel(&p)
                    .and_then(|(i, j)| ranges[j * k.width + i])
                    .map(|range| range - (p - center).norm());
                out.push(tsdf_sample(phi, delta, eta));
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();
    for (i, (fv, wv)) in samples.into_iter().enumerate() {
        f.as_mut_slice()[i] = fv;
        w.as_mut_slice()[i] = wv;
    }
    Ok(ViewTsdf { f, w, delta, eta })
}
