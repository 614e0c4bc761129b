//! Variational fusion solvers.
//!
//! The fused field `u` minimizes
//!
//! ```text
//! E(u) = sum over cells of [ sum_i w_i Γ((u - f_i)²) / (sum_i w_i + γ) + λ Γ(|∇⁺u|²) ] · volume
//! Γ(x²) = sqrt(x² + ε²)
//! ```
//!
//! by projected gradient descent `u ← clamp(u + ξ Δu)` with
//! `Δu = λ div(∇⁺u / Γ(|∇⁺u|²)) - D_u / (Σw + γ)`. Gradients are forward
//! differences and the divergence uses backward differences of the flux,
//! both with zero flux across the domain boundary. Spacing is measured in
//! finest voxels, so a cell at octree level `L` uses `h = 2^(D_max - L)`.
//!
//! [`OctreeSolver`] performs each iteration as one depth-first pass over the
//! iterate, splitting and joining nodes as it goes. All reads during a pass
//! see the iterate as it was when the pass started, so the visiting order
//! does not matter and a fully refined tree reproduces [`DenseSolver`]
//! exactly.

use std::time::Instant;

use crate::grid::DenseGrid;
use crate::octree::{build_octree, Cell, OctreeField, ViewTree, NONE};
use crate::tsdf::ViewTsdf;
use crate::{par, Error, Result};

/// Scalars of the method. Lengths are in meters, field values unitless.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    /// TSDF band half-width δ.
    pub delta: f64,
    /// Occlusion depth η behind the surface that is still trusted.
    pub eta: f64,
    /// Smoothness weight λ.
    pub lambda: f64,
    /// epsL1 constant ε.
    pub epsilon: f64,
    /// Normalizer floor γ.
    pub gamma: f64,
    /// Initial step size ξ0.
    pub xi0: f64,
    /// The step size halves every this many iterations.
    pub halve_every: usize,
    pub iterations: usize,
    /// Spread threshold τ for building octrees from dense grids.
    pub tau: f64,
    /// Split threshold τ_s on `|u + ξ Δu|`.
    pub tau_split: f64,
    /// Join threshold τ_j; values above 1 disable joins.
    pub tau_join: f64,
    /// Octree depth D_max; the grid has `2^D_max` voxels per axis.
    pub max_depth: u32,
    /// Clamp the iterate to `[-1, 1]` after each update.
    pub clamp: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            delta: 0.004,
            eta: 0.02,
            lambda: 0.3,
            epsilon: 1e-3,
            gamma: 1e-4,
            xi0: 0.1,
            halve_every: 20,
            iterations: 100,
            tau: 0.1,
            tau_split: 0.1,
            tau_join: 0.5,
            max_depth: 7,
            clamp: true,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("delta", self.delta),
            ("eta", self.eta),
            ("epsilon", self.epsilon),
            ("gamma", self.gamma),
            ("xi0", self.xi0),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("tau_split", self.tau_split),
            ("tau_join", self.tau_join),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.halve_every == 0 {
            return Err(Error::InvalidArgument("halve_every must be at least 1".into()));
        }
        if self.tau_split >= self.tau_join {
            return Err(Error::InvalidArgument(format!(
                "tau_split ({}) must be below tau_join ({})",
                self.tau_split, self.tau_join
            )));
        }
        if self.max_depth == 0 || self.max_depth > 12 {
            return Err(Error::InvalidArgument(format!(
                "max_depth must be in 1..=12, got {}",
                self.max_depth
            )));
        }
        Ok(())
    }

    /// Step size of iteration `t` (0-based).
    pub fn step_size(&self, t: usize) -> f64 {
        self.xi0 * 0.5f64.powi((t / self.halve_every) as i32)
    }

    /// `key = value` lines, one per parameter.
    pub fn describe(&self) -> String {
        format!(
            "delta = {}\neta = {}\nlambda = {}\nepsilon = {}\ngamma = {}\nxi0 = {}\nhalve_every = {}\niterations = {}\ntau = {}\ntau_split = {}\ntau_join = {}\nmax_depth = {}\nclamp = {}\n",
            self.delta,
            self.eta,
            self.lambda,
            self.epsilon,
            self.gamma,
            self.xi0,
            self.halve_every,
            self.iterations,
            self.tau,
            self.tau_split,
            self.tau_join,
            self.max_depth,
            self.clamp
        )
    }
}

/// Statistics of one solver iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub energy: f64,
    pub node_count: usize,
    pub memory_bytes: usize,
    pub splits: usize,
    pub joins: usize,
    /// Joins whose merged children did not all share one sign.
    pub mixed_sign_joins: usize,
    pub wall_ms: f64,
}

/// The epsL1 approximation `sqrt(x² + ε²)` of `|x|`.
#[inline]
pub fn gamma_eps(x_sq: f64, eps: f64) -> f64 {
    (x_sq + eps * eps).sqrt()
}

/// Derivative of the normalized data term with respect to `u`, for samples
/// `(f_i, w_i)`. Samples with zero weight may be omitted.
pub fn data_derivative(u: f64, samples: &[(f64, f64)], eps: f64, gamma: f64) -> f64 {
    let mut num = 0.0;
    let mut wsum = 0.0;
    for &(f, w) in samples {
        let r = u - f;
        num += w * r / gamma_eps(r * r, eps);
        wsum += w;
    }
    num / (wsum + gamma)
}

/// Normalized data energy density.
pub fn data_energy(u: f64, samples: &[(f64, f64)], eps: f64, gamma: f64) -> f64 {
    let mut num = 0.0;
    let mut wsum = 0.0;
    for &(f, w) in samples {
        let r = u - f;
        num += w * gamma_eps(r * r, eps);
        wsum += w;
    }
    num / (wsum + gamma)
}

/// Field values around a cell: the center, its six face neighbors and the
/// six cells `c - e_k + e_j` (j ≠ k) needed by the backward fluxes. `None`
/// marks cells outside the domain.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub center: f64,
    pub forward: [Option<f64>; 3],
    pub backward: [Option<f64>; 3],
    /// `diagonal[k][j]` is the value at `c - e_k + e_j`; unused for `j == k`.
    pub diagonal: [[Option<f64>; 3]; 3],
}

const UNIT: [[i64; 3]; 3] = [[1, 0, 0], [0, 1, 0], [0, 0, 1]];

impl Stencil {
    /// Gathers the stencil through `sample`, which maps a relative offset to
    /// the value there or `None` outside the domain.
    pub fn gather(sample: impl Fn([i64; 3]) -> Option<f64>) -> Self {
        let center = sample([0, 0, 0]).expect("stencil center outside the domain");
        let forward = UNIT.map(&sample);
        let backward = UNIT.map(|e| sample([-e[0], -e[1], -e[2]]));
        let mut diagonal = [[None; 3]; 3];
        for k in 0..3 {
            if backward[k].is_none() {
                continue;
            }
            for j in 0..3 {
                if j != k {
                    let mut d = [0i64; 3];
                    d[k] -= 1;
                    d[j] += 1;
                    diagonal[k][j] = sample(d);
                }
            }
        }
        Stencil {
            center,
            forward,
            backward,
            diagonal,
        }
    }

    /// Forward-difference gradient at the center, 0 across the boundary.
    pub fn forward_gradient(&self, h: f64) -> [f64; 3] {
        gradient(self.center, self.forward, h)
    }

    /// `div(∇⁺u / Γ(|∇⁺u|²))` by backward differences of the flux.
    pub fn divergence_of_flux(&self, h: f64, eps: f64) -> f64 {
        let p = flux(self.forward_gradient(h), eps);
        let mut div = 0.0;
        for k in 0..3 {
            let back = match self.backward[k] {
                Some(b) => {
                    let mut fwd = self.diagonal[k];
                    fwd[k] = Some(self.center);
                    flux(gradient(b, fwd, h), eps)[k]
                }
                None => 0.0,
            };
            div += (p[k] - back) / h;
        }
        div
    }
}

#[inline]
fn gradient(center: f64, forward: [Option<f64>; 3], h: f64) -> [f64; 3] {
    forward.map(|v| v.map_or(0.0, |v| (v - center) / h))
}

#[inline]
fn flux(g: [f64; 3], eps: f64) -> [f64; 3] {
    let n = gamma_eps(g[0] * g[0] + g[1] * g[1] + g[2] * g[2], eps);
    g.map(|c| c / n)
}

/// Descent direction and energy density at one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointUpdate {
    pub delta_u: f64,
    pub energy_density: f64,
}

/// `Δu = λ div(S'(∇u)) - D_u / (Σw + γ)` together with the integrand of the
/// energy at the same cell. Both solvers go through this function.
pub fn descent_update(
    stencil: &Stencil,
    h: f64,
    samples: &[(f64, f64)],
    params: &FusionParams,
) -> PointUpdate {
    let eps = params.epsilon;
    let u = stencil.center;
    let g = stencil.forward_gradient(h);
    let tv = gamma_eps(g[0] * g[0] + g[1] * g[1] + g[2] * g[2], eps);
    let div = if params.lambda > 0.0 {
        stencil.divergence_of_flux(h, eps)
    } else {
        0.0
    };
    PointUpdate {
        delta_u: params.lambda * div - data_derivative(u, samples, eps, params.gamma),
        energy_density: data_energy(u, samples, eps, params.gamma) + params.lambda * tv,
    }
}

#[inline]
fn apply_step(u: f64, delta_u: f64, xi: f64, clamp: bool) -> f64 {
    let v = u + xi * delta_u;
    if clamp {
        v.clamp(-1.0, 1.0)
    } else {
        v
    }
}

/// Split/join decision for one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Restructure {
    Split,
    Join,
    Keep,
}

/// Applies the restructuring rules to a node whose tentative value is
/// `candidate = u + ξ Δu`. `children` carries, for inner nodes, each child's
/// candidate and updated value after the child itself was processed, or
/// `None` for a child that is still an inner node.
pub fn restructure(
    is_leaf: bool,
    can_split: bool,
    candidate: f64,
    children: Option<&[Option<(f64, f64)>; 8]>,
    tau_split: f64,
    tau_join: f64,
) -> Restructure {
    if is_leaf {
        if can_split && candidate.abs() < tau_split {
            return Restructure::Split;
        }
        return Restructure::Keep;
    }
    let Some(children) = children else {
        return Restructure::Keep;
    };
    if candidate.abs() <= tau_join {
        return Restructure::Keep;
    }
    let mut positive = 0;
    let mut negative = 0;
    for child in children {
        match child {
            Some((cand, value)) if cand.abs() > tau_join => {
                if *value > 0.0 {
                    positive += 1;
                } else if *value < 0.0 {
                    negative += 1;
                }
            }
            _ => return Restructure::Keep,
        }
    }
    if positive == 8 || negative == 8 {
        Restructure::Join
    } else {
        Restructure::Keep
    }
}

/// Dense `ū = (Σ w_i f_i + γ f̄) / (Σ w_i + γ)` accumulated view by view,
/// where `f̄` is the unweighted mean of all views' stored values.
#[derive(Clone, Debug)]
pub struct InitAccumulator {
    n: usize,
    weighted: Vec<f64>,
    weights: Vec<f64>,
    plain: Vec<f64>,
    views: usize,
}

impl InitAccumulator {
    pub fn new(resolution: usize) -> Self {
        let len = resolution.pow(3);
        InitAccumulator {
            n: resolution,
            weighted: vec![0.0; len],
            weights: vec![0.0; len],
            plain: vec![0.0; len],
            views: 0,
        }
    }

    pub fn add(&mut self, view: &ViewTsdf) {
        assert_eq!(view.f.n(), self.n, "view resolution mismatch");
        for (i, (&f, &w)) in view.f.as_slice().iter().zip(view.w.as_slice()).enumerate() {
            let (f, w) = (f as f64, w as f64);
            self.weighted[i] += w * f;
            self.weights[i] += w;
            self.plain[i] += f;
        }
        self.views += 1;
    }

    pub fn view_count(&self) -> usize {
        self.views
    }

    pub fn initial_field(&self, gamma: f64) -> DenseGrid<f64> {
        let k = self.views.max(1) as f64;
        let data = (0..self.weighted.len())
            .map(|i| (self.weighted[i] + gamma * self.plain[i] / k) / (self.weights[i] + gamma))
            .collect();
        DenseGrid::from_vec(self.n, data)
    }
}

/// Dense initial field `ū` for a set of views.
pub fn initial_dense(views: &[ViewTsdf], params: &FusionParams) -> Result<DenseGrid<f64>> {
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one view is required".into()))?;
    let mut acc = InitAccumulator::new(first.f.n());
    for v in views {
        acc.add(v);
    }
    Ok(acc.initial_field(params.gamma))
}

/// Octree initialization: `ū` octree-ified with spread threshold `τ`.
pub fn initialize(views: &[ViewTsdf], params: &FusionParams) -> Result<OctreeField> {
    Ok(OctreeField::from_dense(&initial_dense(views, params)?, params.tau))
}

/// Output of a full solve. `history[0]` describes the initial iterate;
/// `history[t]` the iterate after iteration `t`, with its energy.
#[derive(Clone, Debug)]
pub struct FuseResult<F> {
    pub field: F,
    pub history: Vec<IterationStats>,
}

impl<F> FuseResult<F> {
    pub fn energies(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.energy).collect()
    }

    pub fn node_counts(&self) -> Vec<usize> {
        self.history.iter().map(|s| s.node_count).collect()
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.history.iter().map(|s| s.wall_ms).sum()
    }

    pub fn peak_memory_bytes(&self) -> usize {
        self.history.iter().map(|s| s.memory_bytes).max().unwrap_or(0)
    }
}

/// Shifts per-pass energies (evaluated on the incoming iterate) so every
/// history entry carries the energy of the iterate it describes.
fn assemble_history(
    initial: IterationStats,
    mut passes: Vec<IterationStats>,
    final_energy: f64,
) -> Vec<IterationStats> {
    let mut history = Vec::with_capacity(passes.len() + 1);
    let mut initial = initial;
    if let Some(first) = passes.first() {
        initial.energy = first.energy;
    } else {
        initial.energy = final_energy;
    }
    history.push(initial);
    for t in 0..passes.len() {
        passes[t].energy = passes.get(t + 1).map_or(final_energy, |p| p.energy);
    }
    history.extend(passes);
    history
}

/// Octree fusion of dense views: builds view trees, initializes and solves.
pub fn fuse(views: &[ViewTsdf], params: &FusionParams) -> Result<FuseResult<OctreeField>> {
    params.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("at least one view is required".into()));
    }
    let trees = par::map_slice(views, |v| build_octree(&v.f, &v.w, params.tau));
    let init = initialize(views, params)?;
    let mut solver = OctreeSolver::new(trees, init, params.clone())?;
    Ok(solver.run())
}

/// Dense reference fusion with the same update rule, schedule and clamping.
pub fn dense_fuse(views: &[ViewTsdf], params: &FusionParams) -> Result<FuseResult<DenseGrid<f64>>> {
    params.validate()?;
    let init = initial_dense(views, params)?;
    let data = DenseData::from_views(views);
    let mut solver = DenseSolver::new(data, init, params.clone())?;
    Ok(solver.run())
}

/// The octree solver state: view trees, the iterate and the parameters.
#[derive(Clone)]
pub struct OctreeSolver {
    views: Vec<ViewTree>,
    field: OctreeField,
    params: FusionParams,
    iteration: usize,
}

impl OctreeSolver {
    pub fn new(views: Vec<ViewTree>, field: OctreeField, params: FusionParams) -> Result<Self> {
        params.validate()?;
        if views.is_empty() {
            return Err(Error::InvalidArgument("at least one view is required".into()));
        }
        let depth = field.max_depth();
        if depth != params.max_depth || views.iter().any(|v| v.max_depth() != depth) {
            return Err(Error::InvalidArgument(format!(
                "octree depths disagree with max_depth {}",
                params.max_depth
            )));
        }
        Ok(OctreeSolver {
            views,
            field,
            params,
            iteration: 0,
        })
    }

    pub fn field(&self) -> &OctreeField {
        &self.field
    }

    pub fn into_field(self) -> OctreeField {
        self.field
    }

    pub fn views(&self) -> &[ViewTree] {
        &self.views
    }

    /// One restructuring pass with step size `xi`. The returned energy is
    /// that of the updated iterate; `wall_ms` covers the pass only.
    pub fn step(&mut self, xi: f64) -> IterationStats {
        self.iteration += 1;
        let start = Instant::now();
        let mut pass = Pass::new(&mut self.field, &self.views, &self.params, xi);
        pass.run();
        let (splits, joins, mixed) = (pass.splits, pass.joins, pass.mixed_sign_joins);
        self.field.propagate_means();
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        IterationStats {
            iteration: self.iteration,
            energy: self.energy(),
            node_count: self.field.node_count(),
            memory_bytes: self.field.memory_bytes(),
            splits,
            joins,
            mixed_sign_joins: mixed,
            wall_ms,
        }
    }

    /// Energy of the current iterate on the finest grid.
    pub fn energy(&self) -> f64 {
        octree_energy(&self.field, &self.views, &self.params)
    }

    /// Runs the configured schedule from the current state.
    pub fn run(&mut self) -> FuseResult<OctreeField> {
        self.run_with(|_| {})
    }

    pub fn run_with(&mut self, mut progress: impl FnMut(&IterationStats)) -> FuseResult<OctreeField> {
        let mut history = vec![IterationStats {
            iteration: 0,
            energy: self.energy(),
            node_count: self.field.node_count(),
            memory_bytes: self.field.memory_bytes(),
            splits: 0,
            joins: 0,
            mixed_sign_joins: 0,
            wall_ms: 0.0,
        }];
        for t in 0..self.params.iterations {
            let s = self.step(self.params.step_size(t));
            progress(&s);
            history.push(s);
        }
        FuseResult {
            field: self.field.clone(),
            history,
        }
    }
}

/// What a visited node reports to its parent for the join rule.
#[derive(Clone, Copy)]
struct Visit {
    /// `(candidate, updated value)` when the node is a leaf after the visit.
    leaf: Option<(f64, f64)>,
}

struct Pass<'a> {
    tree: &'a mut OctreeField,
    views: &'a [ViewTree],
    params: &'a FusionParams,
    xi: f64,
    depth: u32,
    /// Child visiting order; results must not depend on it.
    order: [usize; 8],
    /// View-tree node per (level, view), following the iterate's descent.
    cursors: Vec<u32>,
    samples: Vec<(f64, f64)>,
    splits: usize,
    joins: usize,
    mixed_sign_joins: usize,
}

impl<'a> Pass<'a> {
    fn new(
        tree: &'a mut OctreeField,
        views: &'a [ViewTree],
        params: &'a FusionParams,
        xi: f64,
    ) -> Self {
        let depth = tree.max_depth();
        Pass {
            tree,
            views,
            params,
            xi,
            depth,
            order: [0, 1, 2, 3, 4, 5, 6, 7],
            cursors: vec![ViewTree::ROOT_ID; (depth as usize + 1) * views.len()],
            samples: Vec::with_capacity(views.len()),
            splits: 0,
            joins: 0,
            mixed_sign_joins: 0,
        }
    }

    fn run(&mut self) {
        self.tree.begin_pass();
        self.visit(0, Cell::ROOT);
        self.tree.end_pass();
    }

    fn descend_cursors(&mut self, level: u32, o: usize) {
        let nv = self.views.len();
        let (lo, hi) = self.cursors.split_at_mut((level as usize + 1) * nv);
        let parent = &lo[level as usize * nv..];
        for (i, view) in self.views.iter().enumerate() {
            hi[i] = view.descend(parent[i], o);
        }
    }

    fn visit(&mut self, id: u32, cell: Cell) -> Visit {
        let level = cell.level;
        let h = (1u64 << (self.depth - level)) as f64;
        let tree = &*self.tree;
        let stencil =
            Stencil::gather(|d| cell.offset(d).map(|c| tree.snapshot_lookup(c)));
        let nv = self.views.len();
        self.samples.clear();
        for (i, view) in self.views.iter().enumerate() {
            let (f, w) = view.sample(self.cursors[level as usize * nv + i]);
            if w > 0.0 {
                self.samples.push((f as f64, w as f64));
            }
        }
        let pu = descent_update(&stencil, h, &self.samples, self.params);
        let node = self.tree.nodes[id as usize];
        let candidate = stencil.center + self.xi * pu.delta_u;
        let updated = apply_step(stencil.center, pu.delta_u, self.xi, self.params.clamp);
        let p = self.params;
        if node.children == NONE {
            let can_split = level < self.depth;
            match restructure(true, can_split, candidate, None, p.tau_split, p.tau_join) {
                Restructure::Split => {
                    let kids = self.tree.split(crate::octree::NodeId(id));
                    self.splits += 1;
                    for o in self.order {
                        self.descend_cursors(level, o);
                        self.visit(kids[o].0, cell.child(o));
                    }
                    Visit { leaf: None }
                }
                _ => {
                    self.tree.nodes[id as usize].value = updated;
                    Visit {
                        leaf: Some((candidate, updated)),
                    }
                }
            }
        } else {
            let mut kids = [None; 8];
            for o in self.order {
                self.descend_cursors(level, o);
                kids[o] = self.visit(node.children + o as u32, cell.child(o)).leaf;
            }
            match restructure(false, false, candidate, Some(&kids), p.tau_split, p.tau_join) {
                Restructure::Join => {
                    let merged = self.tree.join(crate::octree::NodeId(id));
                    self.joins += 1;
                    let all_pos = merged.iter().all(|&v| v > 0.0);
                    let all_neg = merged.iter().all(|&v| v < 0.0);
                    if !(all_pos || all_neg) {
                        self.mixed_sign_joins += 1;
                    }
                    let value = self.tree.nodes[id as usize].value;
                    Visit {
                        leaf: Some((candidate, value)),
                    }
                }
                _ => Visit { leaf: None },
            }
        }
    }
}

/// Dense per-voxel data: the TSDF values of every view observing the voxel,
/// in view order, stored compressed-row style.
#[derive(Clone, Debug)]
pub struct DenseData {
    n: usize,
    offsets: Vec<u32>,
    values: Vec<f32>,
}

impl DenseData {
    pub fn from_views(views: &[ViewTsdf]) -> Self {
        let n = views.first().map_or(0, |v| v.f.n());
        let len = n * n * n;
        let mut counts = vec![0u32; len];
        for v in views {
            for (c, &w) in counts.iter_mut().zip(v.w.as_slice()) {
                *c += w as u32;
            }
        }
        let mut offsets = Vec::with_capacity(len + 1);
        let mut acc = 0u32;
        offsets.push(0);
        for c in &counts {
            acc += c;
            offsets.push(acc);
        }
        let mut values = vec![0.0f32; acc as usize];
        let mut cursor: Vec<u32> = offsets[..len].to_vec();
        for v in views {
            for (i, (&f, &w)) in v.f.as_slice().iter().zip(v.w.as_slice()).enumerate() {
                if w != 0 {
                    values[cursor[i] as usize] = f;
                    cursor[i] += 1;
                }
            }
        }
        DenseData { n, offsets, values }
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    /// Observed TSDF values at linear voxel index `i`.
    pub fn observations(&self, i: usize) -> &[f32] {
        &self.values[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }

    /// Accumulated weight per voxel.
    pub fn weight_sum(&self) -> DenseGrid<f32> {
        DenseGrid::from_vec(
            self.n,
            self.offsets.windows(2).map(|w| (w[1] - w[0]) as f32).collect(),
        )
    }
}

/// Jacobi-style dense solver: every update reads the previous iterate.
#[derive(Clone)]
pub struct DenseSolver {
    data: DenseData,
    u: DenseGrid<f64>,
    params: FusionParams,
    iteration: usize,
}

impl DenseSolver {
    pub fn new(data: DenseData, u: DenseGrid<f64>, params: FusionParams) -> Result<Self> {
        params.validate()?;
        if data.resolution() != u.n() {
            return Err(Error::InvalidArgument("data and iterate resolutions differ".into()));
        }
        Ok(DenseSolver {
            data,
            u,
            params,
            iteration: 0,
        })
    }

    pub fn field(&self) -> &DenseGrid<f64> {
        &self.u
    }

    pub fn data(&self) -> &DenseData {
        &self.data
    }

    /// Computes the update of every voxel of slab `z` from the current
    /// iterate, writing new values to `out` when given. Returns the slab's
    /// energy.
    fn slab(&self, z: usize, xi: f64, mut out: Option<&mut [f64]>) -> f64 {
        let n = self.u.n();
        let mut samples = Vec::new();
        let mut energy = 0.0;
        for y in 0..n {
            for x in 0..n {
                let c = [x as i64, y as i64, z as i64];
                let stencil =
                    Stencil::gather(|d| self.u.get([c[0] + d[0], c[1] + d[1], c[2] + d[2]]).copied());
                let i = self.u.linear([x, y, z]);
                samples.clear();
                samples.extend(self.data.observations(i).iter().map(|&f| (f as f64, 1.0)));
                let pu = descent_update(&stencil, 1.0, &samples, &self.params);
                energy += pu.energy_density;
                if let Some(out) = out.as_deref_mut() {
                    out[x + n * y] = apply_step(stencil.center, pu.delta_u, xi, self.params.clamp);
                }
            }
        }
        energy
    }

    /// One Jacobi step. The returned energy is that of the incoming iterate.
    pub fn step(&mut self, xi: f64) -> IterationStats {
        self.iteration += 1;
        let start = Instant::now();
        let n = self.u.n();
        let mut next = vec![0.0; n * n * n];
        let energies = {
            let this = &*self;
            par::map_chunks_mut(&mut next, n * n, |z, out| this.slab(z, xi, Some(out)))
        };
        self.u = DenseGrid::from_vec(n, next);
        IterationStats {
            iteration: self.iteration,
            energy: energies.iter().sum(),
            node_count: n * n * n,
            memory_bytes: n * n * n * std::mem::size_of::<f64>(),
            splits: 0,
            joins: 0,
            mixed_sign_joins: 0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        }
    }

    pub fn energy(&self) -> f64 {
        let n = self.u.n();
        par::map_range(n, |z| self.slab(z, 0.0, None)).iter().sum()
    }

    pub fn run(&mut self) -> FuseResult<DenseGrid<f64>> {
        self.run_with(|_| {})
    }

    pub fn run_with(
        &mut self,
        mut progress: impl FnMut(&IterationStats),
    ) -> FuseResult<DenseGrid<f64>> {
        let n = self.u.n();
        let initial = IterationStats {
            iteration: 0,
            energy: 0.0,
            node_count: n * n * n,
            memory_bytes: n * n * n * std::mem::size_of::<f64>(),
            splits: 0,
            joins: 0,
            mixed_sign_joins: 0,
            wall_ms: 0.0,
        };
        let passes: Vec<_> = (0..self.params.iterations)
            .map(|t| {
                let s = self.step(self.params.step_size(t));
                progress(&s);
                s
            })
            .collect();
        let final_energy = self.energy();
        FuseResult {
            field: self.u.clone(),
            history: assemble_history(initial, passes, final_energy),
        }
    }
}

/// Energy of an octree iterate against view trees, summed voxel by voxel on
/// the finest grid without materializing it. With lossless view trees this
/// equals `dense_energy` of the densified iterate.
pub fn octree_energy(field: &OctreeField, views: &[ViewTree], params: &FusionParams) -> f64 {
    let depth = field.max_depth();
    let leaves = field.leaves();
    let parts = par::map_slice(&leaves, |&(cell, u)| {
        let mut cursors: Vec<u32> = views
            .iter()
            .map(|v| (0..cell.level).fold(ViewTree::ROOT_ID, |id, l| v.descend(id, cell.octant_below(l))))
            .collect();
        let mut samples = Vec::with_capacity(views.len());
        leaf_data_energy(views, &mut cursors, &mut samples, cell, depth, u, params)
            + params.lambda * leaf_tv_energy(field, cell, u, params.epsilon)
    });
    parts.iter().sum()
}

/// Data energy of a constant-valued block, refined until every view is
/// constant over the part being summed.
fn leaf_data_energy(
    views: &[ViewTree],
    cursors: &mut Vec<u32>,
    samples: &mut Vec<(f64, f64)>,
    cell: Cell,
    depth: u32,
    u: f64,
    params: &FusionParams,
) -> f64 {
    let nv = views.len();
    let base = cursors.len() - nv;
    let uniform = cell.level == depth
        || views.iter().zip(&cursors[base..]).all(|(v, &id)| v.is_leaf_id(id));
    if uniform {
        samples.clear();
        for (v, &id) in views.iter().zip(&cursors[base..]) {
            let (f, w) = v.sample(id);
            if w > 0.0 {
                samples.push((f as f64, w as f64));
            }
        }
        let s = cell.size(depth) as f64;
        return s * s * s * data_energy(u, samples, params.epsilon, params.gamma);
    }
    let mut total = 0.0;
    for o in 0..8 {
        for i in 0..nv {
            let id = views[i].descend(cursors[base + i], o);
            cursors.push(id);
        }
        total += leaf_data_energy(views, cursors, samples, cell.child(o), depth, u, params);
        cursors.truncate(base + nv);
    }
    total
}

/// TV energy of the finest voxels of a leaf. Only voxels on the leaf's upper
/// faces see a nonzero forward difference.
fn leaf_tv_energy(field: &OctreeField, cell: Cell, u: f64, eps: f64) -> f64 {
    let depth = field.max_depth();
    let n = 1usize << depth;
    let s = cell.size(depth);
    let o = cell.finest_origin(depth);
    let flat = gamma_eps(0.0, eps);
    let interior = (s - 1) * (s - 1) * (s - 1);
    let mut total = interior as f64 * flat;
    let last = [o[0] + s - 1, o[1] + s - 1, o[2] + s - 1];
    let diff = |p: [usize; 3], k: usize| -> f64 {
        if p[k] != last[k] || p[k] + 1 == n {
            return 0.0;
        }
        let mut q = p;
        q[k] += 1;
        let idx = q.map(|c| c as u32);
        field.lookup_at_level(Cell::new(depth, idx)) - u
    };
    for z in o[2]..o[2] + s {
        for y in o[1]..o[1] + s {
            for x in o[0]..o[0] + s {
                if x != last[0] && y != last[1] && z != last[2] {
                    continue;
                }
                let p = [x, y, z];
                let g: f64 = (0..3).map(|k| diff(p, k).powi(2)).sum();
                total += gamma_eps(g, eps);
            }
        }
    }
    total
}

/// Energy of a dense iterate.
pub fn dense_energy(u: &DenseGrid<f64>, data: &DenseData, params: &FusionParams) -> f64 {
    let solver = DenseSolver {
        data: data.clone(),
        u: u.clone(),
        params: params.clone(),
        iteration: 0,
    };
    solver.energy()
}
