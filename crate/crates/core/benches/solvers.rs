use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use octofuse::cli::build_inputs;
use octofuse::fusion::{initial_dense, initialize, DenseData, DenseSolver, FusionParams, OctreeSolver};
use octofuse::octree::build_octree;
use octofuse::synth::{sphere_dataset, SynthConfig};
use octofuse::tsdf::ViewTsdf;

const N: usize = 64;

fn setup() -> (Vec<ViewTsdf>, FusionParams) {
    let mut cfg = SynthConfig::with_grid(0.256 / N as f64, N);
    cfg.n_views = 12;
    let ds = sphere_dataset(&cfg).unwrap();
    let s = ds.domain.voxel_size();
    let params = FusionParams {
        delta: 2.0 * s,
        eta: 5.0 * s,
        max_depth: ds.domain.max_depth(),
        ..FusionParams::default()
    };
    let inputs = build_inputs(&ds, &params).unwrap();
    (inputs.views, params)
}

fn octree_solver(views: &[ViewTsdf], p: &FusionParams) -> OctreeSolver {
    let trees = views.iter().map(|v| build_octree(&v.f, &v.w, p.tau)).collect();
    OctreeSolver::new(trees, initialize(views, p).unwrap(), p.clone()).unwrap()
}

fn dense_solver(views: &[ViewTsdf], p: &FusionParams) -> DenseSolver {
    DenseSolver::new(DenseData::from_views(views), initial_dense(views, p).unwrap(), p.clone()).unwrap()
}

fn steps(c: &mut Criterion, label: &str, run: &dyn Fn(&mut (dyn FnMut() + Send))) {
    let (views, p) = setup();
    let warm = 20;
    let xi = p.step_size(warm);
    let mut oct = octree_solver(&views, &p);
    let mut dense = dense_solver(&views, &p);
    for t in 0..warm {
        oct.step(p.step_size(t));
        dense.step(p.step_size(t));
    }
    let mut g = c.benchmark_group(format!("step_{N}/{label}"));
    g.sample_size(10);
    g.bench_function("octree", |b| {
        b.iter_batched(|| oct.clone(), |mut s| run(&mut || { s.step(xi); }), BatchSize::LargeInput)
    });
    g.bench_function("dense", |b| {
        b.iter_batched(|| dense.clone(), |mut s| run(&mut || { s.step(xi); }), BatchSize::LargeInput)
    });
    g.bench_function("octree_energy", |b| {
        b.iter(|| run(&mut || { std::hint::black_box(oct.energy()); }))
    });
    g.finish();
}

#[cfg(feature = "parallel")]
fn bench(c: &mut Criterion) {
    steps(c, "parallel", &|f| f());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    steps(c, "one_thread", &|f| pool.install(f));
}

#[cfg(not(feature = "parallel"))]
fn bench(c: &mut Criterion) {
    steps(c, "sequential", &|f| f());
}

criterion_group!(benches, bench);
criterion_main!(benches);
