//! The `synth`, `fuse` and `compare` commands.
//!
//! Exit codes: 0 on success, 1 for I/O and data errors, 2 for invalid
//! arguments or configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::dataset::{self, Dataset};
use crate::fusion::{
    dense_fuse, initialize, DenseData, DenseSolver, FuseResult, FusionParams, IterationStats,
    OctreeSolver,
};
use crate::grid::DenseGrid;
use crate::mesh::{marching_cubes, sphere_diff, symmetric_mean, vertex_diff, TriMesh, VertexDiff};
use crate::octree::{build_octree, OctreeField, ViewTree};
use crate::synth::{make_sphere_dataset, SphereScene, SynthConfig};
use crate::tsdf::{build_view_tsdf, ViewTsdf};
use crate::volume::VolumeDomain;
use crate::{par, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "octofuse", version, about = "Variational range-image fusion on a dynamic octree")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic sphere dataset.
    Synth(SynthArgs),
    /// Fuse a dataset into a mesh.
    Fuse(FuseArgs),
    /// Vertex-wise difference between two meshes or a mesh and the ground-truth sphere.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 31)]
    pub views: usize,
    /// Voxels per axis (a power of two).
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Voxel size in meters.
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Sphere radius in meters.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Camera distance from the sphere center in meters.
    #[arg(long)]
    pub orbit: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Focal length in pixels; the principal point is the image center.
    #[arg(long)]
    pub focal: Option<f64>,
    /// 1 mm voxels on a 256³ grid instead of the 2 mm desk-scale default.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Octree,
    Dense,
    Both,
}

impl Mode {
    fn parse(s: &str) -> Option<Mode> {
        <Mode as ValueEnum>::from_str(s, true).ok()
    }
}

#[derive(Args, Debug, Default)]
pub struct FuseArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for meshes and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key = value` configuration file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub xi0: Option<f64>,
    #[arg(long)]
    pub halve_every: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "tau-s")]
    pub tau_split: Option<f64>,
    #[arg(long = "tau-j")]
    pub tau_join: Option<f64>,
    #[arg(long)]
    pub clamp: Option<bool>,
    /// Also write the final octree iterate as a text dump.
    #[arg(long)]
    pub dump_tree: Option<PathBuf>,
    /// Print per-iteration progress to stderr.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Mesh whose vertices are measured.
    pub mesh: PathBuf,
    /// Reference mesh.
    #[arg(long, conflicts_with = "sphere")]
    pub against: Option<PathBuf>,
    /// `ground_truth.txt` with the analytic sphere, or a dataset directory containing it.
    #[arg(long)]
    pub sphere: Option<PathBuf>,
    /// Output prefix for `<prefix>.ply` and `<prefix>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also print the mean of both directed differences.
    #[arg(long)]
    pub symmetric: bool,
}

/// Effective configuration of a fuse run after merging defaults, the
/// config file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub params: FusionParams,
    pub data: PathBuf,
    pub out: PathBuf,
    pub mode: Mode,
    pub dump_tree: Option<PathBuf>,
    pub verbosity: u8,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Merges built-in defaults, an optional config file and the flags, in
    /// increasing precedence.
    pub fn resolve(args: &FuseArgs) -> Result<RunConfig> {
        let mut params = FusionParams::default();
        let mut data = None;
        let mut out = None;
        let mut mode = Mode::Octree;
        let mut dump_tree = None;
        let mut verbosity = 0;
        if let Some(path) = &args.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (n, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| usage(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
                let (key, value) = (key.trim(), value.trim());
                let p = &mut params;
                match key {
                    "delta" => p.delta = parse_value(key, value)?,
                    "eta" => p.eta = parse_value(key, value)?,
                    "lambda" => p.lambda = parse_value(key, value)?,
                    "epsilon" => p.epsilon = parse_value(key, value)?,
                    "gamma" => p.gamma = parse_value(key, value)?,
                    "xi0" => p.xi0 = parse_value(key, value)?,
                    "halve_every" => p.halve_every = parse_value(key, value)?,
                    "iterations" => p.iterations = parse_value(key, value)?,
                    "tau" => p.tau = parse_value(key, value)?,
                    "tau_split" => p.tau_split = parse_value(key, value)?,
                    "tau_join" => p.tau_join = parse_value(key, value)?,
                    "clamp" => p.clamp = parse_value(key, value)?,
                    "data" => data = Some(PathBuf::from(value)),
                    "out" => out = Some(PathBuf::from(value)),
                    "dump_tree" => dump_tree = Some(PathBuf::from(value)),
                    "verbosity" => verbosity = parse_value(key, value)?,
                    "mode" => {
                        mode = Mode::parse(value)
                            .ok_or_else(|| usage(format!("invalid mode {value:?}")))?
                    }
                    _ => return Err(usage(format!("unknown configuration key {key:?}"))),
                }
            }
        }
        let p = &mut params;
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = args.$field { p.$field = v; } )* };
        }
        take!(delta, eta, lambda, epsilon, gamma, xi0, halve_every, iterations, tau, tau_split, tau_join, clamp);
        if let Some(m) = args.mode {
            mode = m;
        }
        let data = args
            .data
            .clone()
            .or(data)
            .ok_or_else(|| usage("no dataset given (--data or `data` key)"))?;
        let out = args.out.clone().or(out).unwrap_or_else(|| PathBuf::from("."));
        Ok(RunConfig {
            params,
            data,
            out,
            mode,
            dump_tree: args.dump_tree.clone().or(dump_tree),
            verbosity: verbosity.max(args.verbose),
        })
    }

    /// Comment block echoed at the top of every report.
    pub fn header(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# data = {}", self.data.display());
        let _ = writeln!(s, "# mode = {:?}", self.mode);
        for line in self.params.describe().lines() {
            let _ = writeln!(s, "# {line}");
        }
        s
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Fuse(a) => cmd_fuse(&a),
        Command::Compare(a) => cmd_compare(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

pub fn synth_config(a: &SynthArgs) -> Result<SynthConfig> {
    let mut c = if a.full_scale {
        SynthConfig::full_scale()
    } else {
        SynthConfig::default()
    };
    if a.resolution.is_some() || a.voxel_size.is_some() {
        // keep the cube extent unless both are given
        let n = a.resolution.unwrap_or(c.domain.resolution());
        let s = a.voxel_size.unwrap_or(c.domain.extent() / n as f64);
        c.domain = VolumeDomain::centered(c.scene.center, s, n)?;
    }
    c.n_views = a.views;
    if let Some(r) = a.radius {
        c.scene = SphereScene::new(c.scene.center, r)?;
    }
    if let Some(o) = a.orbit {
        c.orbit_radius = o;
    }
    if let Some(w) = a.width {
        c.intrinsics.width = w;
        c.intrinsics.cx = w as f64 / 2.0;
    }
    if let Some(h) = a.height {
        c.intrinsics.height = h;
        c.intrinsics.cy = h as f64 / 2.0;
    }
    if let Some(f) = a.focal {
        c.intrinsics.fx = f;
        c.intrinsics.fy = f;
    }
    let defaults = FusionParams::default();
    c.validate(defaults.delta + defaults.eta)?;
    Ok(c)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let config = synth_config(a)?;
    let ds = make_sphere_dataset(&a.out, &config)?;
    let d = &ds.domain;
    println!(
        "wrote {} views to {}: {}x{} px, {}^3 voxels of {} m, sphere r = {} m",
        ds.frames.len(),
        a.out.display(),
        ds.intrinsics.width,
        ds.intrinsics.height,
        d.resolution(),
        d.voxel_size(),
        config.scene.radius
    );
    Ok(())
}

/// Per-view TSDFs plus the accumulated weight of all views.
pub struct Inputs {
    pub views: Vec<ViewTsdf>,
    pub weight_sum: DenseGrid<f32>,
}

pub fn build_inputs(ds: &Dataset, params: &FusionParams) -> Result<Inputs> {
    let views = par::map_slice(&ds.frames, |f| {
        build_view_tsdf(&f.image, &f.camera, &ds.domain, params.delta, params.eta)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut weight_sum = DenseGrid::filled(ds.domain.resolution(), 0.0f32);
    for v in &views {
        for (s, &w) in weight_sum.as_mut_slice().iter_mut().zip(v.w.as_slice()) {
            *s += w as f32;
        }
    }
    Ok(Inputs { views, weight_sum })
}

/// What one solver run produced.
pub struct SolveOutput {
    pub mode: Mode,
    pub field: DenseGrid<f64>,
    pub history: Vec<IterationStats>,
    pub input_bytes: usize,
    pub mesh: TriMesh,
    pub tree: Option<OctreeField>,
    pub view_trees: Vec<ViewTree>,
}

impl SolveOutput {
    pub fn final_nodes(&self) -> usize {
        self.history.last().map_or(0, |s| s.node_count)
    }

    /// Input representation plus the largest iterate seen.
    pub fn peak_memory_bytes(&self) -> usize {
        self.input_bytes + self.history.iter().map(|s| s.memory_bytes).max().unwrap_or(0)
    }

    pub fn solve_wall_ms(&self) -> f64 {
        self.history.iter().map(|s| s.wall_ms).sum()
    }

    pub fn summary_line(&self) -> String {
        let mode = match self.mode {
            Mode::Octree => "octree",
            _ => "dense",
        };
        format!(
            "{mode} {} {} {:.1}",
            self.final_nodes(),
            self.peak_memory_bytes(),
            self.solve_wall_ms()
        )
    }
}

pub fn solve_octree(
    inputs: &Inputs,
    dom: &VolumeDomain,
    params: &FusionParams,
    verbosity: u8,
) -> Result<SolveOutput> {
    let view_trees = par::map_slice(&inputs.views, |v| build_octree(&v.f, &v.w, params.tau));
    let input_bytes = view_trees.iter().map(ViewTree::memory_bytes).sum();
    let init = initialize(&inputs.views, params)?;
    let mut solver = OctreeSolver::new(view_trees, init, params.clone())?;
    let FuseResult { field: tree, history } = solver.run_with(|s| progress(verbosity, "octree", s));
    let field = tree.densify();
    let mesh = marching_cubes(&field, dom, Some(&inputs.weight_sum));
    let view_trees = solver.views().to_vec();
    Ok(SolveOutput {
        mode: Mode::Octree,
        field,
        history,
        input_bytes,
        mesh,
        tree: Some(tree),
        view_trees,
    })
}

pub fn solve_dense(
    inputs: &Inputs,
    dom: &VolumeDomain,
    params: &FusionParams,
    verbosity: u8,
) -> Result<SolveOutput> {
    let res = if verbosity > 0 {
        let init = crate::fusion::initial_dense(&inputs.views, params)?;
        let mut solver = DenseSolver::new(DenseData::from_views(&inputs.views), init, params.clone())?;
        solver.run_with(|s| progress(verbosity, "dense", s))
    } else {
        dense_fuse(&inputs.views, params)?
    };
    let mesh = marching_cubes(&res.field, dom, Some(&inputs.weight_sum));
    let input_bytes = inputs.views.len() * ViewTsdf::dense_footprint_bytes(dom.resolution());
    Ok(SolveOutput {
        mode: Mode::Dense,
        field: res.field,
        history: res.history,
        input_bytes,
        mesh,
        tree: None,
        view_trees: Vec::new(),
    })
}

fn progress(verbosity: u8, label: &str, s: &IterationStats) {
    if verbosity > 0 {
        eprintln!(
            "{label} iter {:3} energy {:.6e} nodes {} splits {} joins {} {:.1} ms",
            s.iteration, s.energy, s.node_count, s.splits, s.joins, s.wall_ms
        );
    }
}

/// Report CSV: the configuration header, then one row per history entry.
/// Row 0 is the initial iterate.
pub fn report_csv(config: &RunConfig, history: &[IterationStats]) -> String {
    let mut s = config.header();
    s += "iter,energy,node_count,memory_bytes,splits,joins,wall_ms,mixed_sign_joins\n";
    for h in history {
        let _ = writeln!(
            s,
            "{},{:e},{},{},{},{},{:.3},{}",
            h.iteration, h.energy, h.node_count, h.memory_bytes, h.splits, h.joins, h.wall_ms, h.mixed_sign_joins
        );
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<()> {
    let config = RunConfig::resolve(args)?;
    let ds = Dataset::load(&config.data)?;
    let mut params = config.params.clone();
    params.max_depth = ds.domain.max_depth();
    params.validate()?;
    fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let start = Instant::now();
    let inputs = build_inputs(&ds, &params)?;
    if config.verbosity > 0 {
        eprintln!("built {} view TSDFs in {:.1} s", inputs.views.len(), start.elapsed().as_secs_f64());
    }

    let mut summary = config.header();
    let mut outputs = Vec::new();
    if matches!(config.mode, Mode::Octree | Mode::Both) {
        outputs.push(solve_octree(&inputs, &ds.domain, &params, config.verbosity)?);
    }
    if matches!(config.mode, Mode::Dense | Mode::Both) {
        outputs.push(solve_dense(&inputs, &ds.domain, &params, config.verbosity)?);
    }
    for o in &outputs {
        let name = if o.mode == Mode::Octree { "octree" } else { "dense" };
        o.mesh.write_ply(&config.out.join(format!("{name}.ply")))?;
        write(&config.out.join(format!("{name}_report.csv")), &report_csv(&config, &o.history))?;
        for line in [o.summary_line(), format!("input_bytes {name} {}", o.input_bytes)] {
            println!("{line}");
            summary += &line;
            summary.push('\n');
        }
        if let Some(tree) = &o.tree {
            if let Some(p) = &config.dump_tree {
                let mut buf = Vec::new();
                tree.dump(&mut buf).map_err(|e| Error::io(p, e))?;
                fs::write(p, buf).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    if let [oct, dense] = &outputs[..] {
        let diff = vertex_diff(&oct.mesh, &dense.mesh)?;
        let line = format!("octree_vs_dense {}", diff.summary_line());
        println!("{line}");
        summary += &line;
        summary.push('\n');
        let q = oct
            .tree
            .as_ref()
            .expect("octree output carries its tree")
            .quantization_error(&dense.field);
        let line = format!("quantization_error {} {}", q.sum, q.volume_weighted);
        println!("{line}");
        summary += &line;
        summary.push('\n');
    }
    write(&config.out.join("summary.txt"), &summary)
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let mesh = TriMesh::read_ply(&a.mesh)?;
    let diff: VertexDiff = match (&a.against, &a.sphere) {
        (Some(b), None) => {
            let other = TriMesh::read_ply(b)?;
            if a.symmetric {
                println!("symmetric_mean {}", symmetric_mean(&mesh, &other)?);
            }
            vertex_diff(&mesh, &other)?
        }
        (None, Some(s)) => {
            let path = if s.is_dir() { s.join("ground_truth.txt") } else { s.clone() };
            sphere_diff(&mesh, &dataset::read_ground_truth(&path)?)
        }
        _ => return Err(usage("give exactly one of --against or --sphere")),
    };
    if let Some(prefix) = &a.out {
        diff.colored.write_ply(&prefix.with_extension("ply"))?;
        write(&prefix.with_extension("csv"), &diff.to_csv())?;
    }
    println!("{}", diff.summary_line());
    Ok(())
}

/// Ground-truth sphere of a dataset directory, if it has one.
pub fn ground_truth(dir: &Path) -> Result<Option<SphereScene>> {
    let p = dir.join("ground_truth.txt");
    if p.exists() {
        dataset::read_ground_truth(&p).map(Some)
    } else {
        Ok(None)
    }
}
