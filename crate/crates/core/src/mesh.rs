//! Marching cubes, mesh I/O and vertex-wise mesh differences.
//!
//! The case table is derived at first use rather than transcribed: on every
//! cube face the sign changes are paired so that each negative corner is cut
//! off on its own, the resulting face segments are chained into closed loops
//! and each loop is fanned into triangles. Because the pairing on a face only
//! depends on that face's four corners, neighboring cells always agree and
//! the surface is closed wherever it does not leave the masked region.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Point3;

use crate::grid::DenseGrid;
use crate::synth::SphereScene;
use crate::volume::VolumeDomain;
use crate::{par, Error, Result};

/// Indexed triangle mesh with an optional per-vertex scalar.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub quality: Option<Vec<f64>>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Checks index bounds, repeated indices and the quality channel length.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&i| i >= n) {
                return Err(Error::InvalidArgument(format!("triangle {t} has an index out of range")));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidArgument(format!("triangle {t} repeats a vertex")));
            }
        }
        if let Some(q) = &self.quality {
            if q.len() != self.vertices.len() {
                return Err(Error::InvalidArgument("quality channel length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Undirected edges used by other than exactly two triangles.
    pub fn boundary_edge_count(&self) -> usize {
        let mut uses: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        uses.values().filter(|&&c| c != 2).count()
    }

    pub fn write_ply(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ply()).map_err(|e| Error::io(path, e))
    }

    /// ASCII PLY text. Coordinates are written in shortest round-trip form.
    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s += "ply\nformat ascii 1.0\n";
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s += "property double x\nproperty double y\nproperty double z\n";
        if self.quality.is_some() {
            s += "property double quality\n";
        }
        let _ = writeln!(s, "element face {}", self.triangles.len());
        s += "property list uchar int vertex_indices\nend_header\n";
        for (i, v) in self.vertices.iter().enumerate() {
            let _ = write!(s, "{} {} {}", v.x, v.y, v.z);
            if let Some(q) = &self.quality {
                let _ = write!(s, " {}", q[i]);
            }
            s.push('\n');
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }

    /// Reads an ASCII PLY with `x y z` and optionally `quality` vertex
    /// properties and triangular faces.
    pub fn read_ply(path: &Path) -> Result<TriMesh> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_ply(&text).map_err(|reason| Error::format(path, reason))
    }
}

fn parse_ply(text: &str) -> std::result::Result<TriMesh, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("missing ply magic".into());
    }
    let mut n_vertices = None;
    let mut n_faces = None;
    let mut props: Vec<String> = Vec::new();
    let mut current = "";
    loop {
        let line = lines.next().ok_or("unterminated header")?.trim();
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(format!("unsupported format {fmt}")),
            ["element", "vertex", n] => {
                n_vertices = Some(n.parse::<usize>().map_err(|_| "bad vertex count")?);
                current = "vertex";
            }
            ["element", "face", n] => {
                n_faces = Some(n.parse::<usize>().map_err(|_| "bad face count")?);
                current = "face";
            }
            ["element", ..] => current = "other",
            ["property", "list", ..] => {}
            ["property", _, name] if current == "vertex" => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let nv = n_vertices.ok_or("no vertex element")?;
    let nf = n_faces.unwrap_or(0);
    let col = |name: &str| props.iter().position(|p| p == name);
    let (cx, cy, cz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err("vertex element lacks x, y or z".into()),
    };
    let cq = col("quality");
    let mut mesh = TriMesh {
        quality: cq.map(|_| Vec::with_capacity(nv)),
        ..TriMesh::default()
    };
    for _ in 0..nv {
        let line = lines.next().ok_or("truncated vertex list")?;
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format!("bad number {t:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if vals.len() < props.len() {
            return Err("short vertex line".into());
        }
        mesh.vertices.push(Point3::new(vals[cx], vals[cy], vals[cz]));
        if let (Some(q), Some(c)) = (mesh.quality.as_mut(), cq) {
            q.push(vals[c]);
        }
    }
    for _ in 0..nf {
        let line = lines.next().ok_or("truncated face list")?;
        let idx = line
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| format!("bad index {t:?}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if idx.first() != Some(&3) || idx.len() != 4 {
            return Err("only triangular faces are supported".into());
        }
        mesh.triangles.push([idx[1], idx[2], idx[3]]);
    }
    mesh.validate().map_err(|e| e.to_string())?;
    Ok(mesh)
}

/// Cube corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as `(lower corner, axis)`.
fn cube_edges() -> [(usize, usize); 12] {
    let mut edges = [(0, 0); 12];
    let mut k = 0;
    for axis in 0..3 {
        for c in 0..8 {
            if c & (1 << axis) == 0 {
                edges[k] = (c, axis);
                k += 1;
            }
        }
    }
    edges
}

fn edge_index(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    let axis = (lo ^ hi).trailing_zeros() as usize;
    cube_edges()
        .iter()
        .position(|&e| e == (lo, axis))
        .expect("corners are not adjacent")
}

/// The six faces, each as four corners in counter-clockwise order seen from
/// outside the cube.
fn cube_faces() -> [[usize; 4]; 6] {
    let mut faces = [[0; 4]; 6];
    for axis in 0..3 {
        let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |a: usize, b: usize| (side << axis) | (a << i) | (b << j);
            // (i, j, axis) is right-handed, so this loop faces +axis
            let mut ring = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                ring.reverse();
            }
            faces[2 * axis + side] = ring;
        }
    }
    faces
}

/// Triangles per cube configuration as triples of edge indices. Bit `c` of
/// the case index is set when corner `c` is negative.
fn case_table() -> &'static Vec<Vec<[u8; 3]>> {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(case_triangles).collect())
}

fn case_triangles(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    // next[e] = edge following e on the loop
    let mut next = [usize::MAX; 12];
    for ring in cube_faces() {
        for k in 0..4 {
            let c = ring[k];
            if !inside(c) {
                continue;
            }
            let prev = ring[(k + 3) % 4];
            let succ = ring[(k + 1) % 4];
            let entry = edge_index(prev, c);
            let exit = edge_index(c, succ);
            match (inside(prev), inside(succ)) {
                (false, false) => next[entry] = exit,
                (false, true) => {
                    // walk forward through the run of negative corners
                    let mut m = (k + 1) % 4;
                    while inside(ring[(m + 1) % 4]) {
                        m = (m + 1) % 4;
                    }
                    next[entry] = edge_index(ring[m], ring[(m + 1) % 4]);
                }
                _ => {}
            }
        }
    }
    let mut seen = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if next[start] == usize::MAX || seen[start] {
            continue;
        }
        let mut ring = Vec::new();
        let mut e = start;
        while !seen[e] {
            seen[e] = true;
            ring.push(e as u8);
            e = next[e];
        }
        for k in 1..ring.len() - 1 {
            tris.push([ring[0], ring[k], ring[k + 1]]);
        }
    }
    tris
}

/// Extracts the zero level set of `field`, whose samples sit at the voxel
/// centers of `dom`. With a `mask`, cells with a zero mask value at any
/// corner produce no geometry. Triangles are oriented with normals pointing
/// toward positive values.
pub fn marching_cubes(
    field: &DenseGrid<f64>,
    dom: &VolumeDomain,
    mask: Option<&DenseGrid<f32>>,
) -> TriMesh {
    let n = field.n();
    assert_eq!(n, dom.resolution(), "field and domain resolutions differ");
    if let Some(m) = mask {
        assert_eq!(m.n(), n, "mask and field resolutions differ");
    }
    if n < 2 {
        return TriMesh::default();
    }
    let table = case_table();
    let edges = cube_edges();
    let slabs = par::map_range(n - 1, |z| {
        let mut keyed: Vec<[(u64, Point3<f64>); 3]> = Vec::new();
        for y in 0..n - 1 {
            for x in 0..n - 1 {
                let base = [x, y, z];
                let at = |c: usize| {
                    let o = corner_offset(c);
                    [base[0] + o[0], base[1] + o[1], base[2] + o[2]]
                };
                if let Some(m) = mask {
                    if (0..8).any(|c| m[at(c)] == 0.0) {
                        continue;
                    }
                }
                let values: [f64; 8] = std::array::from_fn(|c| field[at(c)]);
                let case = (0..8).fold(0, |acc, c| acc | (((values[c] < 0.0) as usize) << c));
                let tris = &table[case];
                if tris.is_empty() {
                    continue;
                }
                let vertex = |e: u8| {
                    let (c, axis) = edges[e as usize];
                    let lo = at(c);
                    let mut hi = lo;
                    hi[axis] += 1;
                    let (a, b) = (values[c], values[c | (1 << axis)]);
                    let t = a / (a - b);
                    let pa = dom.voxel_center(lo);
                    let pb = dom.voxel_center(hi);
                    let key = (field.linear(lo) as u64) * 3 + axis as u64;
                    (key, pa + (pb - pa) * t)
                };
                for tri in tris {
                    keyed.push(tri.map(vertex));
                }
            }
        }
        keyed
    });
    let mut index: HashMap<u64, u32> = HashMap::new();
    let mut mesh = TriMesh::default();
    for slab in slabs {
        for tri in slab {
            let ids = tri.map(|(key, p)| {
                *index.entry(key).or_insert_with(|| {
                    mesh.vertices.push(p);
                    (mesh.vertices.len() - 1) as u32
                })
            });
            mesh.triangles.push(ids);
        }
    }
    mesh
}

/// Directed vertex-to-vertex distances from one mesh to another.
#[derive(Clone, Debug)]
pub struct VertexDiff {
    pub distances: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    /// The source mesh with `quality` set to the distances.
    pub colored: TriMesh,
}

impl VertexDiff {
    fn from_distances(a: &TriMesh, distances: Vec<f64>) -> Self {
        let (mean, std, max) = summarize(&distances);
        let mut colored = a.clone();
        colored.quality = Some(distances.clone());
        VertexDiff {
            distances,
            mean,
            std,
            max,
            colored,
        }
    }

    /// `mean std max` on one line.
    pub fn summary_line(&self) -> String {
        format!("{} {} {}", self.mean, self.std, self.max)
    }

    /// One `index,distance` row per vertex behind a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("vertex,distance\n");
        for (i, d) in self.distances.iter().enumerate() {
            let _ = writeln!(s, "{i},{d}");
        }
        s
    }
}

/// Mean, population standard deviation and maximum.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max = values.iter().cloned().fold(0.0, f64::max);
    (mean, var.sqrt(), max)
}

/// For each vertex of `a`, the distance to the nearest vertex of `b`.
pub fn vertex_diff(a: &TriMesh, b: &TriMesh) -> Result<VertexDiff> {
    if b.vertices.is_empty() {
        return Err(Error::InvalidArgument("reference mesh has no vertices".into()));
    }
    let points: Vec<[f64; 3]> = b.vertices.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree = ImmutableKdTree::<f64, 3>::new_from_slice(&points)
        .map_err(|e| Error::InvalidArgument(format!("cannot index reference mesh: {e:?}")))?;
    let distances = par::map_slice(&a.vertices, |p| {
        tree.query(&[p.x, p.y, p.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute()
            .distance
            .sqrt()
    });
    Ok(VertexDiff::from_distances(a, distances))
}

/// Mean of the two directed vertex differences.
pub fn symmetric_mean(a: &TriMesh, b: &TriMesh) -> Result<f64> {
    Ok(0.5 * (vertex_diff(a, b)?.mean + vertex_diff(b, a)?.mean))
}

/// Distance of every vertex of `a` to the analytic sphere surface.
pub fn sphere_diff(a: &TriMesh, sphere: &SphereScene) -> VertexDiff {
    let distances = par::map_slice(&a.vertices, |p| sphere.surface_distance(p));
    VertexDiff::from_distances(a, distances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_field(n: usize, dom: &VolumeDomain, s: &SphereScene) -> DenseGrid<f64> {
        DenseGrid::from_fn(n, |idx| s.signed_distance(&dom.voxel_center(idx)))
    }

    #[test]
    fn table_has_expected_shape() {
        let t = case_table();
        assert!(t[0].is_empty());
        assert!(t[255].is_empty());
        for c in 0..8 {
            assert_eq!(t[1 << c].len(), 1);
            assert_eq!(t[255 ^ (1 << c)].len(), 1);
        }
        // two diagonally opposite corners are cut off separately
        assert_eq!(t[0b1000_0001].len(), 2);
        // a half cube is a quad
        assert_eq!(t[0b0000_1111].len(), 2);
    }

    #[test]
    fn every_case_closes_its_loops() {
        // each used edge appears in exactly one loop, so edge multiplicity in
        // the fan equals ring structure: check that vertices sit on sign
        // changes only
        let edges = cube_edges();
        for (case, tris) in case_table().iter().enumerate() {
            for tri in tris {
                for &e in tri {
                    let (c, axis) = edges[e as usize];
                    let a = case & (1 << c) != 0;
                    let b = case & (1 << (c | (1 << axis))) != 0;
                    assert_ne!(a, b, "case {case} edge {e}");
                }
            }
        }
    }

    #[test]
    fn constant_field_gives_empty_mesh() {
        let dom = VolumeDomain::centered(Point3::origin(), 0.1, 8).unwrap();
        let m = marching_cubes(&DenseGrid::filled(8, 1.0), &dom, None);
        assert!(m.is_empty());
        assert!(m.triangles.is_empty());
    }

    #[test]
    fn sphere_is_closed_accurate_and_outward() {
        let dom = VolumeDomain::centered(Point3::origin(), 1.0 / 32.0, 64).unwrap();
        let s = SphereScene::new(Point3::new(0.013, -0.021, 0.007), 0.6).unwrap();
        let m = marching_cubes(&sphere_field(64, &dom, &s), &dom, None);
        m.validate().unwrap();
        assert!(m.triangles.len() > 1000);
        assert_eq!(m.boundary_edge_count(), 0);
        for v in &m.vertices {
            assert!(s.surface_distance(v) <= dom.voxel_size());
        }
        let mut outward = 0;
        for t in &m.triangles {
            let [a, b, c] = t.map(|i| m.vertices[i as usize]);
            let normal = (b - a).cross(&(c - a));
            let centroid = (a.coords + b.coords + c.coords) / 3.0;
            if normal.dot(&(centroid - s.center.coords)) > 0.0 {
                outward += 1;
            }
        }
        assert_eq!(outward, m.triangles.len());
    }

    #[test]
    fn every_edge_pair_is_oriented_consistently() {
        let dom = VolumeDomain::centered(Point3::origin(), 0.1, 16).unwrap();
        // two touching blobs exercise ambiguous faces
        let field = DenseGrid::from_fn(16, |[x, y, z]| {
            let p = dom.voxel_center([x, y, z]);
            let a = (p - Point3::new(-0.2, 0.0, 0.0)).norm() - 0.33;
            let b = (p - Point3::new(0.25, 0.05, 0.0)).norm() - 0.31;
            a.min(b) + 0.02 * (7.0 * p.x).sin() * (5.0 * p.y).cos()
        });
        let m = marching_cubes(&field, &dom, None);
        let mut directed: HashMap<(u32, u32), u32> = HashMap::new();
        for t in &m.triangles {
            for k in 0..3 {
                *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
            }
        }
        for (&(a, b), &count) in &directed {
            assert_eq!(count, 1);
            assert_eq!(directed.get(&(b, a)), Some(&1));
        }
    }

    #[test]
    fn vertices_lie_on_sign_changes() {
        let dom = VolumeDomain::centered(Point3::origin(), 0.1, 16).unwrap();
        let s = SphereScene::new(Point3::origin(), 0.45).unwrap();
        let field = sphere_field(16, &dom, &s);
        let m = marching_cubes(&field, &dom, None);
        for v in &m.vertices {
            let g = (v - dom.origin()) / dom.voxel_size() - nalgebra::Vector3::repeat(0.5);
            let on_grid = g.iter().filter(|c| (*c - c.round()).abs() < 1e-9).count();
            assert!(on_grid >= 2, "vertex {v} is not on a grid edge");
        }
    }

    #[test]
    fn mask_suppresses_geometry() {
        let dom = VolumeDomain::centered(Point3::origin(), 0.1, 16).unwrap();
        let s = SphereScene::new(Point3::origin(), 0.45).unwrap();
        let field = sphere_field(16, &dom, &s);
        let full = marching_cubes(&field, &dom, None);
        let mask = DenseGrid::from_fn(16, |[x, _, _]| if x < 8 { 1.0f32 } else { 0.0 });
        let half = marching_cubes(&field, &dom, Some(&mask));
        assert!(half.triangles.len() < full.triangles.len());
        assert!(half.vertices.iter().all(|v| v.x < 0.0));
        let none = marching_cubes(&field, &dom, Some(&DenseGrid::filled(16, 0.0)));
        assert!(none.is_empty());
    }

    #[test]
    fn ply_round_trip() {
        let dom = VolumeDomain::centered(Point3::origin(), 0.1, 8).unwrap();
        let s = SphereScene::new(Point3::new(0.01, 0.0, 0.0), 0.25).unwrap();
        let mut m = marching_cubes(&sphere_field(8, &dom, &s), &dom, None);
        m.quality = Some((0..m.vertices.len()).map(|i| i as f64 * 1e-3).collect());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ply");
        m.write_ply(&p).unwrap();
        assert_eq!(TriMesh::read_ply(&p).unwrap(), m);
    }

    #[test]
    fn unreadable_ply_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 2\n").unwrap();
        assert!(TriMesh::read_ply(&p).is_err());
        assert!(TriMesh::read_ply(&dir.path().join("missing.ply")).is_err());
    }

    #[test]
    fn identical_meshes_have_zero_difference() {
        let dom = VolumeDomain::centered(Point3::origin(), 0.1, 16).unwrap();
        let s = SphereScene::new(Point3::origin(), 0.45).unwrap();
        let m = marching_cubes(&sphere_field(16, &dom, &s), &dom, None);
        let d = vertex_diff(&m, &m).unwrap();
        assert_eq!((d.mean, d.std, d.max), (0.0, 0.0, 0.0));
        assert_eq!(d.colored.quality.as_ref().unwrap().len(), m.vertices.len());
    }

    #[test]
    fn concentric_spheres_differ_by_radius_gap() {
        let dom = VolumeDomain::centered(Point3::origin(), 1.0 / 64.0, 128).unwrap();
        let a = SphereScene::new(Point3::origin(), 0.5).unwrap();
        let b = SphereScene::new(Point3::origin(), 0.7).unwrap();
        let ma = marching_cubes(&sphere_field(128, &dom, &a), &dom, None);
        let mb = marching_cubes(&sphere_field(128, &dom, &b), &dom, None);
        let d = vertex_diff(&ma, &mb).unwrap();
        assert!((d.mean - 0.2).abs() < 0.02, "mean {}", d.mean);
    }

    #[test]
    fn vertex_diff_matches_brute_force() {
        let dom = VolumeDomain::centered(Point3::origin(), 0.1, 16).unwrap();
        let a = SphereScene::new(Point3::new(0.03, 0.0, -0.02), 0.4).unwrap();
        let b = SphereScene::new(Point3::origin(), 0.5).unwrap();
        let ma = marching_cubes(&sphere_field(16, &dom, &a), &dom, None);
        let mb = marching_cubes(&sphere_field(16, &dom, &b), &dom, None);
        let d = vertex_diff(&ma, &mb).unwrap();
        for (v, &got) in ma.vertices.iter().zip(&d.distances) {
            let want = mb.vertices.iter().map(|w| (v - w).norm()).fold(f64::INFINITY, f64::min);
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_reference_is_an_error() {
        let m = TriMesh::default();
        assert!(vertex_diff(&m, &m).is_err());
    }

    #[test]
    fn sphere_diff_of_exact_points_is_zero() {
        let s = SphereScene::new(Point3::new(1.0, 2.0, 3.0), 0.5).unwrap();
        let m = TriMesh {
            vertices: vec![Point3::new(1.5, 2.0, 3.0), Point3::new(1.0, 2.0, 2.5)],
            ..TriMesh::default()
        };
        let d = sphere_diff(&m, &s);
        assert!(d.max < 1e-15);
    }
}
