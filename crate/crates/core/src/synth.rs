//! Synthetic sphere datasets with analytic ground truth.

use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::dataset::{Dataset, Frame};
use crate::volume::{Camera, Intrinsics, RangeImage, VolumeDomain};
use crate::{par, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphereScene {
    pub center: Point3<f64>,
    pub radius: f64,
}

impl SphereScene {
    pub fn new(center: Point3<f64>, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sphere needs a finite center and positive radius, got r={radius}"
            )));
        }
        Ok(SphereScene { center, radius })
    }

    /// Unsigned distance of `p` to the sphere surface.
    pub fn surface_distance(&self, p: &Point3<f64>) -> f64 {
        ((p - self.center).norm() - self.radius).abs()
    }

    /// Signed distance, positive outside.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        (p - self.center).norm() - self.radius
    }

    /// Smallest positive `t` with `origin + t·dir` on the sphere.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let oc = origin - self.center;
        let a = dir.dot(dir);
        let b = 2.0 * dir.dot(&oc);
        let c = oc.dot(&oc) - self.radius * self.radius;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        // cancellation-free roots
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        if q == 0.0 {
            return None;
        }
        let (t0, t1) = (q / a, c / q);
        let (near, far) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        if near > 0.0 {
            Some(near)
        } else if far > 0.0 {
            Some(far)
        } else {
            None
        }
    }
}

/// Exact depth image of the sphere; each pixel's ray runs through its center.
pub fn render_sphere_depth(cam: &Camera, scene: &SphereScene) -> Result<RangeImage> {
    let center = cam.center();
    if (center - scene.center).norm() <= scene.radius {
        return Err(Error::InvalidCamera("camera lies inside the sphere".into()));
    }
    let k = cam.intrinsics();
    let rows = par::map_range(k.height, |j| {
        (0..k.width)
            .map(|i| {
                let d = cam.ray_direction(Camera::pixel_center(i, j));
                let world_dir = cam.rotation() * d;
                // d has unit camera-frame z, so the ray parameter is the depth
                scene.intersect(&center, &world_dir).unwrap_or(0.0)
            })
            .collect::<Vec<_>>()
    });
    RangeImage::new(k.width, k.height, rows.into_iter().flatten().collect())
}

/// `n` near-uniform unit directions on a Fibonacci spiral.
pub fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Cameras on a sphere of radius `orbit` around `target`, all looking at it.
pub fn orbit_cameras(
    intrinsics: &Intrinsics,
    target: Point3<f64>,
    orbit: f64,
    n: usize,
) -> Result<Vec<Camera>> {
    fibonacci_directions(n)
        .into_iter()
        .map(|dir| {
            let up = if dir.z.abs() < 0.9 {
                Vector3::z()
            } else {
                Vector3::y()
            };
            Camera::look_at(*intrinsics, target + dir * orbit, target, up)
        })
        .collect()
}

/// Everything needed to generate a sphere dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub scene: SphereScene,
    pub n_views: usize,
    pub orbit_radius: f64,
    pub intrinsics: Intrinsics,
    pub domain: VolumeDomain,
}

impl Default for SynthConfig {
    /// A 60 mm sphere in a 256 mm cube of 128³ voxels, seen by 31 cameras.
    fn default() -> Self {
        Self::with_grid(0.002, 128)
    }
}

impl SynthConfig {
    /// The default scene on a grid of `resolution` voxels of `voxel_size`.
    pub fn with_grid(voxel_size: f64, resolution: usize) -> Self {
        SynthConfig {
            scene: SphereScene {
                center: Point3::origin(),
                radius: 0.06,
            },
            n_views: 31,
            orbit_radius: 0.3,
            intrinsics: Intrinsics {
                fx: 525.0,
                fy: 525.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
            domain: VolumeDomain::centered(Point3::origin(), voxel_size, resolution)
                .expect("valid default domain"),
        }
    }

    /// 1 mm voxels over the same 256 mm cube.
    pub fn full_scale() -> Self {
        Self::with_grid(0.001, 256)
    }

    /// `margin` is the free space required between sphere and domain faces.
    pub fn validate(&self, margin: f64) -> Result<()> {
        if self.n_views == 0 {
            return Err(Error::InvalidArgument("at least one view is required".into()));
        }
        if !(self.orbit_radius > self.scene.radius) {
            return Err(Error::InvalidArgument(format!(
                "orbit radius {} must exceed the sphere radius {}",
                self.orbit_radius, self.scene.radius
            )));
        }
        self.intrinsics.validate()?;
        let lo = self.domain.origin();
        let hi = lo + Vector3::repeat(self.domain.extent());
        for k in 0..3 {
            let c = self.scene.center[k];
            let r = self.scene.radius + margin;
            if c - r < lo[k] || c + r > hi[k] {
                return Err(Error::InvalidArgument(format!(
                    "sphere plus margin {margin} does not fit inside the volume"
                )));
            }
        }
        Ok(())
    }
}

/// Renders the dataset in memory. Depths are rounded to `f32` so they match
/// what a written and re-read dataset contains.
pub fn sphere_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.validate(0.0)?;
    let cameras = orbit_cameras(
        &config.intrinsics,
        config.scene.center,
        config.orbit_radius,
        config.n_views,
    )?;
    let frames = cameras
        .into_iter()
        .map(|camera| {
            let img = render_sphere_depth(&camera, &config.scene)?;
            let rounded = img.depths().iter().map(|&d| d as f32 as f64).collect();
            Ok(Frame {
                image: RangeImage::new(img.width(), img.height(), rounded)?,
                camera,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        domain: config.domain,
        intrinsics: config.intrinsics,
        frames,
        ground_truth: Some(config.scene),
    })
}

/// Renders and writes a dataset, returning the in-memory copy.
pub fn make_sphere_dataset(out_dir: &Path, config: &SynthConfig) -> Result<Dataset> {
    let ds = sphere_dataset(config)?;
    ds.write(out_dir)?;
    Ok(ds)
}
