use octofuse::cli::build_inputs;
use octofuse::dataset::Dataset;
use octofuse::fusion::{
    dense_energy, dense_fuse, fuse, initial_dense, initialize, octree_energy, DenseData,
    DenseSolver, FusionParams,
};
use octofuse::grid::DenseGrid;
use octofuse::mesh::{marching_cubes, vertex_diff};
use octofuse::octree::{build_octree, OctreeField};
use octofuse::synth::{sphere_dataset, SynthConfig};
use octofuse::tsdf::ViewTsdf;

fn small_sphere(n: usize, views: usize) -> Dataset {
    let mut cfg = SynthConfig::with_grid(0.256 / n as f64, n);
    cfg.n_views = views;
    cfg.intrinsics.width = 320;
    cfg.intrinsics.height = 240;
    cfg.intrinsics.cx = 160.0;
    cfg.intrinsics.cy = 120.0;
    cfg.intrinsics.fx = 262.5;
    cfg.intrinsics.fy = 262.5;
    sphere_dataset(&cfg).unwrap()
}

fn params_for(ds: &Dataset) -> FusionParams {
    let s = ds.domain.voxel_size();
    FusionParams {
        delta: 2.0 * s,
        eta: 5.0 * s,
        max_depth: ds.domain.max_depth(),
        ..FusionParams::default()
    }
}

fn view(f: DenseGrid<f32>, w: DenseGrid<u8>) -> ViewTsdf {
    ViewTsdf {
        f,
        w,
        delta: 0.01,
        eta: 0.02,
    }
}

fn max_abs_diff(a: &DenseGrid<f64>, b: &DenseGrid<f64>) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn fully_observed_view_equal_to_iterate_has_flat_energy() {
    let n = 8;
    let f = DenseGrid::from_fn(n, |[x, y, z]| ((x + 2 * y + 3 * z) % 7) as f32 / 7.0 - 0.5);
    let v = view(f.clone(), DenseGrid::filled(n, 1));
    let p = FusionParams {
        lambda: 0.0,
        max_depth: 3,
        ..FusionParams::default()
    };
    let u = f.map(|&x| x as f64);
    let expected = (n * n * n) as f64 * p.epsilon / (1.0 + p.gamma);
    let dense = dense_energy(&u, &DenseData::from_views(std::slice::from_ref(&v)), &p);
    assert!((dense - expected).abs() <= 1e-12 * expected);
    let tree = OctreeField::from_dense(&u, 0.0);
    let oct = octree_energy(&tree, &[build_octree(&v.f, &v.w, 0.0)], &p);
    assert!((oct - expected).abs() <= 1e-12 * expected);
}

#[test]
fn unobserved_views_without_smoothing_have_zero_energy() {
    let n = 4;
    let v = view(DenseGrid::filled(n, 1.0), DenseGrid::filled(n, 0));
    let p = FusionParams {
        lambda: 0.0,
        max_depth: 2,
        ..FusionParams::default()
    };
    let u = DenseGrid::from_fn(n, |[x, _, _]| x as f64 / 4.0);
    assert_eq!(dense_energy(&u, &DenseData::from_views(&[v]), &p), 0.0);
}

#[test]
fn single_view_initialization_is_the_view() {
    let n = 8;
    let f = DenseGrid::from_fn(n, |[x, _, _]| ((x as f32 - 3.5) / 2.0).clamp(-1.0, 1.0));
    let w = DenseGrid::from_fn(n, |[_, y, _]| u8::from(y < 6));
    let v = view(f.clone(), w);
    let p = FusionParams {
        max_depth: 3,
        ..FusionParams::default()
    };
    let u = initialize(std::slice::from_ref(&v), &p).unwrap().densify();
    let bound = p.gamma / (1.0 + p.gamma);
    for (a, b) in u.as_slice().iter().zip(f.as_slice()) {
        assert!((a - *b as f64).abs() <= bound);
    }
}

#[test]
fn disjoint_views_initialize_from_their_sole_observer() {
    let n = 8;
    let f1 = DenseGrid::filled(n, 0.5f32);
    let f2 = DenseGrid::filled(n, -0.25f32);
    let w1 = DenseGrid::from_fn(n, |[x, _, _]| u8::from(x < 4));
    let w2 = DenseGrid::from_fn(n, |[x, _, _]| u8::from(x >= 4));
    let p = FusionParams {
        max_depth: 3,
        ..FusionParams::default()
    };
    let u = initial_dense(&[view(f1, w1), view(f2, w2)], &p).unwrap();
    let bound = p.gamma;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let want = if x < 4 { 0.5 } else { -0.25 };
                assert!((u[[x, y, z]] - want).abs() <= bound);
            }
        }
    }
}

#[test]
fn single_view_without_smoothing_converges_to_its_values() {
    let n = 8;
    let f = DenseGrid::from_fn(n, |[x, y, z]| (((x * 3 + y * 5 + z) % 9) as f32 - 4.0) / 4.5);
    let w = DenseGrid::from_fn(n, |[x, y, _]| u8::from((x + y) % 4 != 0));
    let v = view(f.clone(), w.clone());
    let p = FusionParams {
        lambda: 0.0,
        max_depth: 3,
        ..FusionParams::default()
    };
    let mut solver = DenseSolver::new(
        DenseData::from_views(std::slice::from_ref(&v)),
        DenseGrid::filled(n, 0.0),
        p.clone(),
    )
    .unwrap();
    let res = solver.run();
    let last_step = p.step_size(p.iterations - 1);
    for i in 0..n * n * n {
        if w.as_slice()[i] == 1 {
            assert!((res.field.as_slice()[i] - f.as_slice()[i] as f64).abs() <= 2.0 * last_step);
        }
    }
}

/// Duplicates only shift the normalizer floor γ. The comparison uses a stable
/// step size; at tiny ε the explicit iteration amplifies that shift.
#[test]
fn duplicated_views_change_the_result_only_through_the_normalizer_floor() {
    let ds = small_sphere(32, 8);
    let p = FusionParams {
        epsilon: 0.25,
        ..params_for(&ds)
    };
    let inputs = build_inputs(&ds, &p).unwrap();
    let once = fuse(&inputs.views, &p).unwrap().field.densify();
    let twice_views: Vec<ViewTsdf> = inputs.views.iter().flat_map(|v| [v.clone(), v.clone()]).collect();
    let twice = fuse(&twice_views, &p).unwrap().field.densify();
    assert!(max_abs_diff(&once, &twice) < 1e-3);
    let once = dense_fuse(&inputs.views, &p).unwrap().field;
    let twice = dense_fuse(&twice_views, &p).unwrap().field;
    assert!(max_abs_diff(&once, &twice) < 1e-3);
}

#[test]
fn solves_are_deterministic() {
    let ds = small_sphere(16, 6);
    let mut p = params_for(&ds);
    p.iterations = 15;
    let inputs = build_inputs(&ds, &p).unwrap();
    let a = fuse(&inputs.views, &p).unwrap();
    let b = fuse(&inputs.views, &p).unwrap();
    assert_eq!(a.node_counts(), b.node_counts());
    let bits = |e: Vec<f64>| e.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.energies()), bits(b.energies()));
    assert_eq!(a.field.leaves(), b.field.leaves());
    let da = dense_fuse(&inputs.views, &p).unwrap();
    let db = dense_fuse(&inputs.views, &p).unwrap();
    assert_eq!(bits(da.energies()), bits(db.energies()));
}

#[test]
fn fusion_lowers_the_initial_energy() {
    let ds = small_sphere(32, 8);
    let p = params_for(&ds);
    let inputs = build_inputs(&ds, &p).unwrap();
    let e = fuse(&inputs.views, &p).unwrap().energies();
    assert!(e[0] >= e[e.len() - 1], "{} -> {}", e[0], e[e.len() - 1]);
}

/// With ε large enough for the explicit step to be stable, the dense
/// energy descends monotonically and the octree ends close to the dense
/// optimum.
#[test]
fn energy_descends_when_the_step_is_stable() {
    let ds = small_sphere(32, 8);
    let p = FusionParams {
        epsilon: 0.25,
        ..params_for(&ds)
    };
    let inputs = build_inputs(&ds, &p).unwrap();
    let dense = dense_fuse(&inputs.views, &p).unwrap().energies();
    for (t, w) in dense.windows(2).enumerate() {
        assert!(w[1] <= w[0], "dense energy rose at iteration {}: {} -> {}", t + 1, w[0], w[1]);
    }
    let octree = fuse(&inputs.views, &p).unwrap().energies();
    let (d_end, o_end) = (dense[dense.len() - 1], octree[octree.len() - 1]);
    assert!(d_end < dense[0] && o_end < octree[0]);
    assert!((o_end - d_end).abs() <= 0.02 * d_end, "octree {o_end} vs dense {d_end}");
}

#[test]
fn octree_and_dense_meshes_agree_at_64() {
    let ds = small_sphere(64, 12);
    let p = params_for(&ds);
    let inputs = build_inputs(&ds, &p).unwrap();
    let oct = fuse(&inputs.views, &p).unwrap().field.densify();
    let dense = dense_fuse(&inputs.views, &p).unwrap().field;
    let a = marching_cubes(&oct, &ds.domain, Some(&inputs.weight_sum));
    let b = marching_cubes(&dense, &ds.domain, Some(&inputs.weight_sum));
    assert!(!a.vertices.is_empty() && !b.vertices.is_empty());
    let d = vertex_diff(&a, &b).unwrap();
    assert!(d.mean <= ds.domain.voxel_size(), "mean {}", d.mean);
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = small_sphere(16, 3);
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.domain, ds.domain);
    assert_eq!(back.intrinsics, ds.intrinsics);
    assert_eq!(back.ground_truth, ds.ground_truth);
    assert_eq!(back.frames.len(), ds.frames.len());
    for (a, b) in back.frames.iter().zip(&ds.frames) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.camera, b.camera);
    }
}
