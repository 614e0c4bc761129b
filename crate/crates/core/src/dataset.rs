//! On-disk dataset layout.
//!
//! ```text
//! intrinsics.txt          fx fy cx cy W H
//! domain.txt              ox oy oz s_v N
//! frame_0000.pfm          depth in meters, 0 = invalid (little-endian PFM)
//! frame_0000.pose.txt     4x4 camera-to-world matrix, row-major
//! ground_truth.txt        cx cy cz r   (optional, synthetic data only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};

use crate::synth::SphereScene;
use crate::volume::{Camera, Intrinsics, RangeImage, VolumeDomain};
use crate::{Error, Result};

/// A loaded dataset: the volume, the calibrated frames and optional ground truth.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub domain: VolumeDomain,
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub ground_truth: Option<SphereScene>,
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub image: RangeImage,
    pub camera: Camera,
}

pub fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:04}.pfm"))
}

pub fn pose_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("frame_{i:04}.pose.txt"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses all whitespace-separated numbers of a text file, requiring exactly `count`.
fn parse_numbers(path: &Path, text: &str, count: usize) -> Result<Vec<f64>> {
    let values = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::format(path, format!("not a number: {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != count {
        return Err(Error::format(
            path,
            format!("expected {count} numbers, found {}", values.len()),
        ));
    }
    Ok(values)
}

fn as_count(path: &Path, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::format(path, format!("expected a positive integer, got {v}")))
    }
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let v = parse_numbers(path, &read_text(path)?, 6)?;
    let k = Intrinsics {
        fx: v[0],
        fy: v[1],
        cx: v[2],
        cy: v[3],
        width: as_count(path, v[4])?,
        height: as_count(path, v[5])?,
    };
    k.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(k)
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics) -> Result<()> {
    write_text(
        path,
        &format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )
}

pub fn read_domain(path: &Path) -> Result<VolumeDomain> {
    let v = parse_numbers(path, &read_text(path)?, 5)?;
    VolumeDomain::new(Point3::new(v[0], v[1], v[2]), v[3], as_count(path, v[4])?)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_domain(path: &Path, d: &VolumeDomain) -> Result<()> {
    let o = d.origin();
    write_text(
        path,
        &format!("{} {} {} {} {}\n", o.x, o.y, o.z, d.voxel_size(), d.resolution()),
    )
}

pub fn read_ground_truth(path: &Path) -> Result<SphereScene> {
    let v = parse_numbers(path, &read_text(path)?, 4)?;
    SphereScene::new(Point3::new(v[0], v[1], v[2]), v[3])
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_ground_truth(path: &Path, s: &SphereScene) -> Result<()> {
    let c = s.center;
    write_text(path, &format!("{} {} {} {}\n", c.x, c.y, c.z, s.radius))
}

/// Reads a camera-to-world pose; the rotation must be a proper rotation.
pub fn read_pose(path: &Path, k: &Intrinsics) -> Result<Camera> {
    let v = parse_numbers(path, &read_text(path)?, 16)?;
    let m = Matrix4::from_row_slice(&v);
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(Error::format(path, "last row must be 0 0 0 1"));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    Camera::new(*k, r, t).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_pose(path: &Path, cam: &Camera) -> Result<()> {
    let r = cam.rotation();
    let t = cam.translation();
    let mut s = String::new();
    for i in 0..3 {
        s += &format!("{} {} {} {}\n", r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]);
    }
    s += "0 0 0 1\n";
    write_text(path, &s)
}

/// Reads a single-channel PFM. Negative scale means little-endian; rows are
/// stored bottom to top. Non-finite or negative samples become invalid (0).
pub fn read_pfm(path: &Path) -> Result<RangeImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "Pf" {
        return Err(Error::format(path, format!("unsupported PFM type {magic:?}")));
    }
    let parse = |t: String| -> Result<f64> {
        t.parse().map_err(|_| Error::format(path, format!("bad header value {t:?}")))
    };
    let width = as_count(path, parse(token()?)?)?;
    let height = as_count(path, parse(token()?)?)?;
    let scale = parse(token()?)?;
    if scale == 0.0 {
        return Err(Error::format(path, "zero scale"));
    }
    // exactly one whitespace byte separates the header from the data
    let start = pos + 1;
    let expected = width * height * 4;
    if bytes.len() < start + expected {
        return Err(Error::format(
            path,
            format!("expected {expected} data bytes, found {}", bytes.len().saturating_sub(start)),
        ));
    }
    let data = &bytes[start..start + expected];
    let mut depth = vec![0.0; width * height];
    for row in 0..height {
        let j = height - 1 - row;
        for i in 0..width {
            let k = 4 * (row * width + i);
            let b = [data[k], data[k + 1], data[k + 2], data[k + 3]];
            let v = if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            depth[j * width + i] = if v.is_finite() && v > 0.0 { v as f64 } else { 0.0 };
        }
    }
    RangeImage::new(width, height, depth).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a little-endian single-channel PFM; depths are stored as f32.
pub fn write_pfm(path: &Path, img: &RangeImage) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    buf.reserve(4 * w * h);
    for row in 0..h {
        let j = h - 1 - row;
        for i in 0..w {
            buf.extend_from_slice(&(img.depths()[j * w + i] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Loads a dataset directory. Frames are read from index 0 upward until
    /// the first missing depth file.
    pub fn load(dir: &Path) -> Result<Dataset> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;
        let domain = read_domain(&dir.join("domain.txt"))?;
        let gt_path = dir.join("ground_truth.txt");
        let ground_truth = if gt_path.exists() {
            Some(read_ground_truth(&gt_path)?)
        } else {
            None
        };
        let mut frames = Vec::new();
        for i in 0.. {
            let fp = frame_path(dir, i);
            if !fp.exists() {
                break;
            }
            let image = read_pfm(&fp)?;
            if image.width() != intrinsics.width || image.height() != intrinsics.height {
                return Err(Error::format(&fp, "image size differs from intrinsics"));
            }
            let camera = read_pose(&pose_path(dir, i), &intrinsics)?;
            frames.push(Frame { image, camera });
        }
        if frames.is_empty() {
            return Err(Error::format(dir, "no frames found"));
        }
        Ok(Dataset {
            domain,
            intrinsics,
            frames,
            ground_truth,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_intrinsics(&dir.join("intrinsics.txt"), &self.intrinsics)?;
        write_domain(&dir.join("domain.txt"), &self.domain)?;
        if let Some(gt) = &self.ground_truth {
            write_ground_truth(&dir.join("ground_truth.txt"), gt)?;
        }
        for (i, f) in self.frames.iter().enumerate() {
            write_pfm(&frame_path(dir, i), &f.image)?;
            write_pose(&pose_path(dir, i), &f.camera)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intrinsics() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 110.0,
            cx: 3.5,
            cy: 2.5,
            width: 7,
            height: 5,
        }
    }

    #[test]
    fn pfm_round_trip_keeps_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let depth: Vec<f64> = (0..35).map(|i| if i % 4 == 0 { 0.0 } else { i as f32 as f64 * 0.125 }).collect();
        let img = RangeImage::new(7, 5, depth.clone()).unwrap();
        let p = dir.path().join("a.pfm");
        write_pfm(&p, &img).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.depths(), &depth[..]);
        // the first stored row is the bottom image row
        let bytes = fs::read(&p).unwrap();
        let header = b"Pf\n7 5\n-1.0\n".len();
        let first = f32::from_le_bytes(bytes[header..header + 4].try_into().unwrap());
        assert_eq!(first as f64, depth[4 * 7]);
    }

    #[test]
    fn pfm_rejects_truncated_data() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pfm");
        fs::write(&p, b"Pf\n4 4\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn pose_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cam = Camera::look_at(
            intrinsics(),
            Point3::new(0.3, -0.17, 0.21),
            Point3::new(0.01, 0.02, -0.03),
            Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        let p = dir.path().join("p.txt");
        write_pose(&p, &cam).unwrap();
        assert_eq!(read_pose(&p, &intrinsics()).unwrap(), cam);
    }

    #[test]
    fn text_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = intrinsics();
        write_intrinsics(&dir.path().join("i.txt"), &k).unwrap();
        assert_eq!(read_intrinsics(&dir.path().join("i.txt")).unwrap(), k);
        let d = VolumeDomain::new(Point3::new(-0.128, -0.128, -0.128), 0.002, 128).unwrap();
        write_domain(&dir.path().join("d.txt"), &d).unwrap();
        assert_eq!(read_domain(&dir.path().join("d.txt")).unwrap(), d);
    }

    #[test]
    fn malformed_text_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.txt");
        fs::write(&p, "1 2 3").unwrap();
        assert!(matches!(read_intrinsics(&p), Err(Error::Format { .. })));
        fs::write(&p, "100 100 50 50 64 x").unwrap();
        assert!(matches!(read_intrinsics(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_directory_is_io_error() {
        let err = Dataset::load(Path::new("/nonexistent/dataset")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
