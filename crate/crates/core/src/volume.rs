//! Reconstruction-volume geometry, the pinhole camera and range images.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::{Error, Result};

/// Axis-aligned cubic reconstruction volume of `2^depth` voxels per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeDomain {
    origin: Point3<f64>,
    voxel_size: f64,
    depth: u32,
}

impl VolumeDomain {
    /// `resolution` must be a power of two.
    pub fn new(origin: Point3<f64>, voxel_size: f64, resolution: usize) -> Result<Self> {
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if resolution == 0 || !resolution.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "resolution must be a power of two, got {resolution}"
            )));
        }
        if !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        Ok(VolumeDomain {
            origin,
            voxel_size,
            depth: resolution.trailing_zeros(),
        })
    }

    /// A domain of the given extent centered on `center`.
    pub fn centered(center: Point3<f64>, voxel_size: f64, resolution: usize) -> Result<Self> {
        let half = 0.5 * voxel_size * resolution as f64;
        Self::new(center - Vector3::repeat(half), voxel_size, resolution)
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    /// Voxels per axis.
    pub fn resolution(&self) -> usize {
        1 << self.depth
    }

    /// Maximum octree depth; the finest octree level equals the voxel grid.
    pub fn max_depth(&self) -> u32 {
        self.depth
    }

    pub fn extent(&self) -> f64 {
        self.voxel_size * self.resolution() as f64
    }

    pub fn voxel_count(&self) -> usize {
        self.resolution().pow(3)
    }

    pub fn center(&self) -> Point3<f64> {
        self.origin + Vector3::repeat(0.5 * self.extent())
    }

    /// World position of a voxel center. Panics on out-of-range indices.
    pub fn voxel_center(&self, idx: [usize; 3]) -> Point3<f64> {
        let n = self.resolution();
        assert!(
            idx.iter().all(|&i| i < n),
            "voxel index {idx:?} outside a {n}^3 domain"
        );
        Point3::new(
            self.origin.x + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin.y + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin.z + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    /// Index of the voxel containing `p`, if any.
    pub fn voxel_index(&self, p: &Point3<f64>) -> Option<[usize; 3]> {
        let n = self.resolution() as f64;
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let t = ((p[k] - self.origin[k]) / self.voxel_size).floor();
            if !(0.0..n).contains(&t) {
                return None;
            }
            idx[k] = t as usize;
        }
        Some(idx)
    }
}

/// Pinhole intrinsics. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` in image
/// coordinates, so its center sits at `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive and finite: {self:?}"
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be non-zero".into()));
        }
        Ok(())
    }
}

/// A calibrated view: intrinsics plus the camera-to-world rigid transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    intrinsics: Intrinsics,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ROTATION_TOLERANCE: f64 = 1e-9;

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        intrinsics.validate()?;
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= ROTATION_TOLERANCE) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal (deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidCamera(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidCamera("translation must be finite".into()));
        }
        Ok(Camera {
            intrinsics,
            rotation,
            translation,
        })
    }

    /// A camera at `eye` whose optical axis (+z) points at `target`. The
    /// image y axis points roughly along `-up`.
    pub fn look_at(
        intrinsics: Intrinsics,
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::InvalidCamera("eye coincides with target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector parallel to view axis".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_columns(&[x, y, z]);
        Self::new(intrinsics, rotation, eye.coords)
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    /// Camera-to-world rotation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Projection center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    pub fn world_to_camera(&self, x: &Point3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x.coords - self.translation)
    }

    pub fn camera_to_world(&self, xc: &Vector3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * xc + self.translation)
    }

    /// Continuous image coordinates of `x`, or `None` when it lies behind the
    /// camera or outside `[0, W) x [0, H)`.
    pub fn project(&self, x: &Point3<f64>) -> Option<[f64; 2]> {
        let xc = self.world_to_camera(x);
        if xc.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = k.fx * xc.x / xc.z + k.cx;
        let v = k.fy * xc.y / xc.z + k.cy;
        if (0.0..k.width as f64).contains(&u) && (0.0..k.height as f64).contains(&v) {
            Some([u, v])
        } else {
            None
        }
    }

    /// Nearest pixel containing the projection of `x`.
    pub fn project_to_pixel(&self, x: &Point3<f64>) -> Option<(usize, usize)> {
        self.project(x).map(|[u, v]| {
            let k = &self.intrinsics;
            ((u as usize).min(k.width - 1), (v as usize).min(k.height - 1))
        })
    }

    /// World point at camera-frame depth `z` along the ray through image
    /// coordinates `(u, v)`.
    pub fn backproject(&self, uv: [f64; 2], z: f64) -> Point3<f64> {
        self.camera_to_world(&(self.ray_direction(uv) * z))
    }

    /// Camera-frame ray through `(u, v)`, scaled so that its z component is 1.
    pub fn ray_direction(&self, uv: [f64; 2]) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((uv[0] - k.cx) / k.fx, (uv[1] - k.cy) / k.fy, 1.0)
    }

    pub fn pixel_center(i: usize, j: usize) -> [f64; 2] {
        [i as f64 + 0.5, j as f64 + 0.5]
    }
}

/// Depth image storing camera-frame z in meters; 0 marks an invalid sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    width: usize,
    height: usize,
    depth: Vec<f64>,
}

impl RangeImage {
    pub fn new(width: usize, height: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "depth buffer has {} samples, expected {width}x{height}",
                depth.len()
            )));
        }
        if let Some(bad) = depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "depth samples must be finite and non-negative, found {bad}"
            )));
        }
        Ok(RangeImage {
            width,
            height,
            depth,
        })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        RangeImage {
            width,
            height,
            depth: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major samples.
    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    /// Valid depth at pixel `(i, j)`.
    pub fn depth(&self, i: usize, j: usize) -> Option<f64> {
        let d = self.depth[j * self.width + i];
        (d > 0.0).then_some(d)
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}
