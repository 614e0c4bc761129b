//! Octree field representations.
//!
//! [`ViewTree`] is the compact, read-only octree of one view's `(f, w)` pair.
//! [`OctreeField`] is the mutable iterate of the solver: a node pool with
//! contiguous 8-child blocks, a free list, and a per-node snapshot slot that
//! keeps the value a node held when the current solver pass started (for
//! nodes split during the pass this is their pre-split value).
//!
//! Both trees are built top-down from dense grids: a node is subdivided while
//! the spread (max - min) of the dense values it covers exceeds `tau`. Leaf
//! values are subvolume means and inner nodes hold the mean of their
//! children.

use std::io::{self, Write};

use crate::grid::DenseGrid;

pub(crate) const NONE: u32 = u32::MAX;

/// A cell of the octree: level `0` is the root, level `D_max` the voxel grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Cell {
    pub level: u32,
    pub index: [u32; 3],
}

impl Cell {
    pub const ROOT: Cell = Cell {
        level: 0,
        index: [0, 0, 0],
    };

    pub fn new(level: u32, index: [u32; 3]) -> Self {
        Cell { level, index }
    }

    /// Child in octant `o` (bit 0: x, bit 1: y, bit 2: z).
    #[inline]
    pub fn child(&self, o: usize) -> Cell {
        Cell {
            level: self.level + 1,
            index: [
                2 * self.index[0] + (o & 1) as u32,
                2 * self.index[1] + ((o >> 1) & 1) as u32,
                2 * self.index[2] + ((o >> 2) & 1) as u32,
            ],
        }
    }

    /// Octant taken below level `l` on the way from the root to this cell.
    #[inline]
    pub fn octant_below(&self, l: u32) -> usize {
        let shift = self.level - 1 - l;
        let [x, y, z] = self.index;
        (((x >> shift) & 1) | (((y >> shift) & 1) << 1) | (((z >> shift) & 1) << 2)) as usize
    }

    /// Edge length in finest voxels.
    #[inline]
    pub fn size(&self, max_depth: u32) -> usize {
        1 << (max_depth - self.level)
    }

    /// First finest voxel covered by this cell.
    pub fn finest_origin(&self, max_depth: u32) -> [usize; 3] {
        let s = self.size(max_depth);
        self.index.map(|i| i as usize * s)
    }

    /// Neighbor at signed offset, `None` outside the domain at this level.
    #[inline]
    pub fn offset(&self, d: [i64; 3]) -> Option<Cell> {
        let n = 1i64 << self.level;
        let mut index = [0u32; 3];
        for k in 0..3 {
            let v = self.index[k] as i64 + d[k];
            if !(0..n).contains(&v) {
                return None;
            }
            index[k] = v as u32;
        }
        Some(Cell {
            level: self.level,
            index,
        })
    }
}

/// Spread `|max - min|` of dense values inside `cell`.
pub fn spread<T: Copy + Into<f64>>(field: &DenseGrid<T>, cell: Cell, max_depth: u32) -> f64 {
    let s = cell.size(max_depth);
    let o = cell.finest_origin(max_depth);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for z in o[2]..o[2] + s {
        for y in o[1]..o[1] + s {
            for x in o[0]..o[0] + s {
                let v: f64 = field[[x, y, z]].into();
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    (hi - lo).abs()
}

/// Sum of dense values inside `cell`, accumulated octant by octant down to
/// single voxels. This order is the one every subvolume mean in this module
/// uses, so means computed here and during construction agree bit for bit.
pub fn block_sum<T: Copy + Into<f64>>(field: &DenseGrid<T>, cell: Cell, max_depth: u32) -> f64 {
    if cell.level == max_depth {
        let [x, y, z] = cell.index;
        return field[[x as usize, y as usize, z as usize]].into();
    }
    let mut s = 0.0;
    for o in 0..8 {
        s += block_sum(field, cell.child(o), max_depth);
    }
    s
}

/// Mean of dense values inside `cell`. A constant block yields its value
/// exactly rather than a rounded sum over the volume.
pub fn block_mean<T: Copy + Into<f64>>(field: &DenseGrid<T>, cell: Cell, max_depth: u32) -> f64 {
    let o = cell.finest_origin(max_depth);
    let first: f64 = field[o].into();
    if spread(field, cell, max_depth) == 0.0 {
        return first;
    }
    block_sum(field, cell, max_depth) / cell_volume(cell, max_depth)
}

/// Mean of eight children; exact when they all agree.
fn mean8(values: [f64; 8]) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return values[0];
    }
    values.iter().sum::<f64>() / 8.0
}

fn mean_from_stats(lo: f64, hi: f64, sum: f64, volume: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        sum / volume
    }
}

fn cell_volume(cell: Cell, max_depth: u32) -> f64 {
    (cell.size(max_depth) as f64).powi(3)
}

fn depth_of<T>(grid: &DenseGrid<T>) -> u32 {
    let n = grid.n();
    assert!(n.is_power_of_two(), "grid size {n} is not a power of two");
    n.trailing_zeros()
}

/// Per-level min/max/sum statistics of a dense field, used to make every
/// top-down split decision in O(1).
struct Pyramid {
    levels: Vec<LevelStats>,
}

#[derive(Default)]
struct LevelStats {
    min: Vec<f64>,
    max: Vec<f64>,
    sum: Vec<f64>,
}

impl LevelStats {
    fn with_len(len: usize) -> Self {
        LevelStats {
            min: vec![0.0; len],
            max: vec![0.0; len],
            sum: vec![0.0; len],
        }
    }
}

#[inline]
fn level_linear(cell: Cell) -> usize {
    let n = 1usize << cell.level;
    let [x, y, z] = cell.index.map(|v| v as usize);
    x + n * (y + n * z)
}

impl Pyramid {
    fn build<T: Copy + Into<f64>>(field: &DenseGrid<T>) -> Self {
        let depth = depth_of(field);
        let mut levels: Vec<LevelStats> = (0..depth).map(|_| LevelStats::default()).collect();
        for level in (0..depth).rev() {
            let n = 1u32 << level;
            let mut stats = LevelStats::with_len((n as usize).pow(3));
            for z in 0..n {
                for y in 0..n {
                    for x in 0..n {
                        let cell = Cell::new(level, [x, y, z]);
                        let (mut lo, mut hi, mut s) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
                        for o in 0..8 {
                            let c = cell.child(o);
                            let (clo, chi, cs) = if level + 1 == depth {
                                let [cx, cy, cz] = c.index.map(|v| v as usize);
                                let v: f64 = field[[cx, cy, cz]].into();
                                (v, v, v)
                            } else {
                                let st = &levels[level as usize + 1];
                                let i = level_linear(c);
                                (st.min[i], st.max[i], st.sum[i])
                            };
                            lo = lo.min(clo);
                            hi = hi.max(chi);
                            s += cs;
                        }
                        let i = level_linear(cell);
                        stats.min[i] = lo;
                        stats.max[i] = hi;
                        stats.sum[i] = s;
                    }
                }
            }
            levels[level as usize] = stats;
        }
        Pyramid { levels }
    }

    /// `(min, max, sum)` of the subvolume of `cell`; `None` at the finest
    /// level where the dense grid itself answers.
    fn stats(&self, cell: Cell) -> Option<(f64, f64, f64)> {
        self.levels.get(cell.level as usize).map(|st| {
            let i = level_linear(cell);
            (st.min[i], st.max[i], st.sum[i])
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[repr(C)]
struct ViewNode {
    f: f32,
    w: f32,
    children: u32,
}

/// Read-only octree holding one view's TSDF value `f` and weight `w`.
/// Inner nodes carry the mean weight of their subvolume, fractional where
/// it is partly observed, and the weighted mean of `f` over the observed
/// part (the plain mean where nothing is observed).
#[derive(Clone, Debug)]
pub struct ViewTree {
    nodes: Vec<ViewNode>,
    depth: u32,
}

/// Builds a view tree. A node is split while `spread(f) > tau` or the weight
/// is not constant over it, down to the grid resolution.
pub fn build_octree(f: &DenseGrid<f32>, w: &DenseGrid<u8>, tau: f64) -> ViewTree {
    assert_eq!(f.n(), w.n(), "field and weight grids differ in size");
    let depth = depth_of(f);
    let fp = Pyramid::build(f);
    let wp = Pyramid::build(w);
    let mut nodes = vec![ViewNode {
        f: 0.0,
        w: 0.0,
        children: NONE,
    }];
    build_view_node(&mut nodes, 0, Cell::ROOT, depth, tau, f, w, &fp, &wp);
    let mut tree = ViewTree { nodes, depth };
    tree.propagate_means();
    tree
}

#[allow(clippy::too_many_arguments)]
fn build_view_node(
    nodes: &mut Vec<ViewNode>,
    id: usize,
    cell: Cell,
    depth: u32,
    tau: f64,
    f: &DenseGrid<f32>,
    w: &DenseGrid<u8>,
    fp: &Pyramid,
    wp: &Pyramid,
) {
    let (Some((flo, fhi, fsum)), Some((wlo, whi, wsum))) = (fp.stats(cell), wp.stats(cell)) else {
        let [x, y, z] = cell.index.map(|v| v as usize);
        nodes[id].f = f[[x, y, z]];
        nodes[id].w = w[[x, y, z]] as f32;
        return;
    };
    if (fhi - flo).abs() > tau || wlo != whi {
        let first = nodes.len();
        nodes[id].children = first as u32;
        nodes.extend(std::iter::repeat_n(
            ViewNode {
                f: 0.0,
                w: 0.0,
                children: NONE,
            },
            8,
        ));
        for o in 0..8 {
            build_view_node(nodes, first + o, cell.child(o), depth, tau, f, w, fp, wp);
        }
    } else {
        let vol = cell_volume(cell, depth);
        nodes[id].f = mean_from_stats(flo, fhi, fsum, vol) as f32;
        nodes[id].w = mean_from_stats(wlo, whi, wsum, vol) as f32;
    }
}

impl ViewTree {
    pub fn max_depth(&self) -> u32 {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_footprint() -> usize {
        std::mem::size_of::<ViewNode>()
    }

    pub fn memory_bytes(&self) -> usize {
        self.node_count() * Self::node_footprint()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.children == NONE).count()
    }

    fn propagate_means(&mut self) {
        fn rec(nodes: &mut [ViewNode], id: usize) -> (f64, f64) {
            let c = nodes[id].children;
            if c == NONE {
                return (nodes[id].f as f64, nodes[id].w as f64);
            }
            let kids: [(f64, f64); 8] = std::array::from_fn(|o| rec(nodes, c as usize + o));
            let w = kids.map(|k| k.1);
            let wsum: f64 = w.iter().sum();
            nodes[id].f = if wsum == 0.0 || w.iter().all(|&v| v == w[0]) {
                mean8(kids.map(|k| k.0))
            } else {
                kids.iter().map(|k| k.0 * k.1).sum::<f64>() / wsum
            } as f32;
            nodes[id].w = mean8(w) as f32;
            (nodes[id].f as f64, nodes[id].w as f64)
        }
        rec(&mut self.nodes, 0);
    }

    /// `(f, w)` of the node at `cell`, or of the leaf that subsumes it when
    /// the tree is shallower there.
    pub fn lookup_at_level(&self, cell: Cell) -> (f64, f64) {
        let mut id = 0usize;
        for l in 0..cell.level {
            let c = self.nodes[id].children;
            if c == NONE {
                break;
            }
            id = c as usize + cell.octant_below(l);
        }
        let n = &self.nodes[id];
        (n.f as f64, n.w as f64)
    }

    /// `(f, w)` sampled at every finest voxel.
    pub fn densify(&self) -> (DenseGrid<f32>, DenseGrid<f32>) {
        let n = 1usize << self.depth;
        let mut f = DenseGrid::filled(n, 0.0f32);
        let mut w = DenseGrid::filled(n, 0.0f32);
        self.for_each_leaf(|cell, node| {
            fill_block(&mut f, cell, self.depth, node.f);
            fill_block(&mut w, cell, self.depth, node.w);
        });
        (f, w)
    }

    fn for_each_leaf(&self, mut visit: impl FnMut(Cell, &ViewNode)) {
        let mut stack = vec![(0usize, Cell::ROOT)];
        while let Some((id, cell)) = stack.pop() {
            let node = &self.nodes[id];
            if node.children == NONE {
                visit(cell, node);
            } else {
                for o in (0..8).rev() {
                    stack.push((node.children as usize + o, cell.child(o)));
                }
            }
        }
    }

    /// Leaf cells in pre-order.
    pub fn leaves(&self) -> Vec<(Cell, f64, f64)> {
        let mut out = Vec::new();
        self.for_each_leaf(|cell, n| out.push((cell, n.f as f64, n.w as f64)));
        out
    }

    /// Pre-order dump, one node per line: `level cx cy cz is_leaf value weight`.
    pub fn dump(&self, out: &mut impl Write) -> io::Result<()> {
        let mut stack = vec![(0usize, Cell::ROOT)];
        while let Some((id, cell)) = stack.pop() {
            let node = &self.nodes[id];
            let leaf = node.children == NONE;
            writeln!(
                out,
                "{} {} {} {} {} {} {}",
                cell.level, cell.index[0], cell.index[1], cell.index[2], leaf as u8, node.f, node.w
            )?;
            if !leaf {
                for o in (0..8).rev() {
                    stack.push((node.children as usize + o, cell.child(o)));
                }
            }
        }
        Ok(())
    }

    pub(crate) const ROOT_ID: u32 = 0;

    /// Child of `id` in octant `o`, or `id` itself when it is a leaf.
    #[inline]
    pub(crate) fn descend(&self, id: u32, o: usize) -> u32 {
        let c = self.nodes[id as usize].children;
        if c == NONE {
            id
        } else {
            c + o as u32
        }
    }

    #[inline]
    pub(crate) fn is_leaf_id(&self, id: u32) -> bool {
        self.nodes[id as usize].children == NONE
    }

    #[inline]
    pub(crate) fn sample(&self, id: u32) -> (f32, f32) {
        let n = &self.nodes[id as usize];
        (n.f, n.w)
    }
}

fn fill_block<T: Copy>(grid: &mut DenseGrid<T>, cell: Cell, depth: u32, v: T) {
    let s = cell.size(depth);
    let o = cell.finest_origin(depth);
    for z in o[2]..o[2] + s {
        for y in o[1]..o[1] + s {
            for x in o[0]..o[0] + s {
                grid[[x, y, z]] = v;
            }
        }
    }
}

/// Handle to a node of an [`OctreeField`]. Handles of joined children become
/// invalid once their block is recycled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

#[derive(Clone, Copy, Debug)]
pub(crate) struct Node {
    pub(crate) value: f64,
    /// Value at the start of the current solver pass.
    pub(crate) snapshot: f64,
    pub(crate) children: u32,
    /// Child block at the start of the current pass.
    pub(crate) snap_children: u32,
    pub(crate) level: u8,
}

impl Node {
    fn leaf(value: f64, level: u8) -> Self {
        Node {
            value,
            snapshot: value,
            children: NONE,
            snap_children: NONE,
            level,
        }
    }
}

/// The solver iterate: a dynamic octree of scalar values in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct OctreeField {
    pub(crate) nodes: Vec<Node>,
    free: Vec<u32>,
    deferred: Vec<u32>,
    in_pass: bool,
    depth: u32,
}

/// Quantization error of an octree against a dense field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizationError {
    /// Unweighted sum over leaves of `|leaf value - dense subvolume mean|`.
    pub sum: f64,
    /// The same terms scaled by the leaf's share of the domain volume.
    pub volume_weighted: f64,
}

impl OctreeField {
    /// A single root leaf holding `value`.
    pub fn uniform(max_depth: u32, value: f64) -> Self {
        OctreeField {
            nodes: vec![Node::leaf(value, 0)],
            free: Vec::new(),
            deferred: Vec::new(),
            in_pass: false,
            depth: max_depth,
        }
    }

    /// Builds the tree top-down, splitting while the spread exceeds `tau`.
    pub fn from_dense(field: &DenseGrid<f64>, tau: f64) -> Self {
        let depth = depth_of(field);
        let pyramid = Pyramid::build(field);
        let mut tree = Self::uniform(depth, 0.0);
        tree.build_node(0, Cell::ROOT, tau, field, &pyramid);
        tree.propagate_means();
        tree
    }

    fn build_node(&mut self, id: u32, cell: Cell, tau: f64, field: &DenseGrid<f64>, p: &Pyramid) {
        match p.stats(cell) {
            None => {
                let [x, y, z] = cell.index.map(|v| v as usize);
                self.nodes[id as usize].value = field[[x, y, z]];
            }
            Some((lo, hi, _)) if (hi - lo).abs() > tau => {
                let first = self.alloc_block(0.0, cell.level as u8 + 1);
                self.nodes[id as usize].children = first;
                for o in 0..8 {
                    self.build_node(first + o as u32, cell.child(o), tau, field, p);
                }
            }
            Some((lo, hi, sum)) => {
                self.nodes[id as usize].value =
                    mean_from_stats(lo, hi, sum, cell_volume(cell, self.depth));
            }
        }
        let v = self.nodes[id as usize].value;
        self.nodes[id as usize].snapshot = v;
    }

    fn alloc_block(&mut self, value: f64, level: u8) -> u32 {
        let leaf = Node::leaf(value, level);
        match self.free.pop() {
            Some(first) => {
                self.nodes[first as usize..first as usize + 8].fill(leaf);
                first
            }
            None => {
                let first = self.nodes.len() as u32;
                self.nodes.extend(std::iter::repeat_n(leaf, 8));
                first
            }
        }
    }

    pub fn max_depth(&self) -> u32 {
        self.depth
    }

    pub fn root(&self) -> NodeId {
        NodeId(0)
    }

    /// Live nodes (recycled blocks excluded).
    pub fn node_count(&self) -> usize {
        self.nodes.len() - 8 * (self.free.len() + self.deferred.len())
    }

    pub fn node_footprint() -> usize {
        std::mem::size_of::<Node>()
    }

    pub fn memory_bytes(&self) -> usize {
        self.node_count() * Self::node_footprint()
    }

    pub fn leaf_count(&self) -> usize {
        let mut count = 0;
        self.for_each_leaf(|_, _| count += 1);
        count
    }

    pub fn value(&self, id: NodeId) -> f64 {
        self.nodes[id.0 as usize].value
    }

    pub fn set_value(&mut self, id: NodeId, value: f64) {
        self.nodes[id.0 as usize].value = value;
    }

    pub fn level(&self, id: NodeId) -> u32 {
        self.nodes[id.0 as usize].level as u32
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0 as usize].children == NONE
    }

    pub fn children(&self, id: NodeId) -> Option<[NodeId; 8]> {
        let c = self.nodes[id.0 as usize].children;
        (c != NONE).then(|| std::array::from_fn(|o| NodeId(c + o as u32)))
    }

    /// The value a node held before it was split in the most recent pass
    /// (or by the most recent [`split`](Self::split) outside a pass).
    pub fn pre_split_value(&self, id: NodeId) -> Option<f64> {
        let n = &self.nodes[id.0 as usize];
        (n.children != NONE && n.snap_children == NONE).then_some(n.snapshot)
    }

    /// The node exactly at `cell`, if the tree reaches that deep there.
    pub fn find(&self, cell: Cell) -> Option<NodeId> {
        let mut id = 0u32;
        for l in 0..cell.level {
            let c = self.nodes[id as usize].children;
            if c == NONE {
                return None;
            }
            id = c + cell.octant_below(l) as u32;
        }
        Some(NodeId(id))
    }

    /// Subdivides a leaf into 8 children that inherit its value.
    ///
    /// Panics if the node is not a leaf or already at the finest level.
    pub fn split(&mut self, id: NodeId) -> [NodeId; 8] {
        let node = self.nodes[id.0 as usize];
        assert!(node.children == NONE, "split of a non-leaf node");
        assert!(
            (node.level as u32) < self.depth,
            "split below the maximum depth {}",
            self.depth
        );
        let first = self.alloc_block(node.value, node.level + 1);
        let n = &mut self.nodes[id.0 as usize];
        n.children = first;
        n.snapshot = node.value;
        n.snap_children = NONE;
        // children read as the parent's value in snapshot lookups
        for o in 0..8 {
            self.nodes[first as usize + o].snapshot = node.value;
        }
        std::array::from_fn(|o| NodeId(first + o as u32))
    }

    /// Replaces 8 leaf children by their mean. Returns the children values
    /// that were merged.
    ///
    /// Panics if the node is a leaf or any child is not a leaf.
    pub fn join(&mut self, id: NodeId) -> [f64; 8] {
        let first = self.nodes[id.0 as usize].children;
        assert!(first != NONE, "join of a leaf node");
        let values: [f64; 8] = std::array::from_fn(|o| {
            let c = &self.nodes[first as usize + o];
            assert!(c.children == NONE, "join of a node with non-leaf children");
            c.value
        });
        let n = &mut self.nodes[id.0 as usize];
        n.value = mean8(values);
        n.children = NONE;
        if self.in_pass {
            // snapshot reads may still descend into the old children
            self.deferred.push(first);
        } else {
            n.snap_children = NONE;
            self.free.push(first);
        }
        values
    }

    /// Sets every inner node to the mean of its children, bottom-up.
    pub fn propagate_means(&mut self) {
        fn rec(nodes: &mut [Node], id: usize) -> f64 {
            let c = nodes[id].children;
            if c == NONE {
                return nodes[id].value;
            }
            let values: [f64; 8] = std::array::from_fn(|o| rec(nodes, c as usize + o));
            nodes[id].value = mean8(values);
            nodes[id].value
        }
        rec(&mut self.nodes, 0);
    }

    /// Value of the node at `cell`, or of the leaf subsuming it.
    pub fn lookup_at_level(&self, cell: Cell) -> f64 {
        let mut id = 0usize;
        for l in 0..cell.level {
            let c = self.nodes[id].children;
            if c == NONE {
                break;
            }
            id = c as usize + cell.octant_below(l);
        }
        self.nodes[id].value
    }

    pub fn densify(&self) -> DenseGrid<f64> {
        let mut g = DenseGrid::filled(1usize << self.depth, 0.0);
        self.for_each_leaf(|cell, v| fill_block(&mut g, cell, self.depth, v));
        g
    }

    pub fn for_each_leaf(&self, mut visit: impl FnMut(Cell, f64)) {
        let mut stack = vec![(0usize, Cell::ROOT)];
        while let Some((id, cell)) = stack.pop() {
            let node = &self.nodes[id];
            if node.children == NONE {
                visit(cell, node.value);
            } else {
                for o in (0..8).rev() {
                    stack.push((node.children as usize + o, cell.child(o)));
                }
            }
        }
    }

    pub fn leaves(&self) -> Vec<(Cell, f64)> {
        let mut out = Vec::new();
        self.for_each_leaf(|c, v| out.push((c, v)));
        out
    }

    /// Pre-order dump, one node per line: `level cx cy cz is_leaf value weight`.
    /// The iterate carries no weight, so the last column is 0.
    pub fn dump(&self, out: &mut impl Write) -> io::Result<()> {
        let mut stack = vec![(0usize, Cell::ROOT)];
        while let Some((id, cell)) = stack.pop() {
            let node = &self.nodes[id];
            let leaf = node.children == NONE;
            writeln!(
                out,
                "{} {} {} {} {} {} 0",
                cell.level, cell.index[0], cell.index[1], cell.index[2], leaf as u8, node.value
            )?;
            if !leaf {
                for o in (0..8).rev() {
                    stack.push((node.children as usize + o, cell.child(o)));
                }
            }
        }
        Ok(())
    }

    pub fn quantization_error(&self, dense: &DenseGrid<f64>) -> QuantizationError {
        assert_eq!(dense.n(), 1usize << self.depth, "domain mismatch");
        let total = (dense.n() as f64).powi(3);
        let mut err = QuantizationError {
            sum: 0.0,
            volume_weighted: 0.0,
        };
        self.for_each_leaf(|cell, v| {
            let term = (v - block_mean(dense, cell, self.depth)).abs();
            err.sum += term;
            err.volume_weighted += term * cell_volume(cell, self.depth) / total;
        });
        err
    }

    /// Starts a solver pass: every node's snapshot takes its current value
    /// and structure.
    pub(crate) fn begin_pass(&mut self) {
        debug_assert!(!self.in_pass);
        for n in &mut self.nodes {
            n.snapshot = n.value;
            n.snap_children = n.children;
        }
        self.in_pass = true;
    }

    /// Ends a solver pass and recycles blocks released by joins.
    pub(crate) fn end_pass(&mut self) {
        self.in_pass = false;
        for first in self.deferred.drain(..) {
            self.free.push(first);
        }
    }

    /// Value at `cell` as of the start of the current pass.
    #[inline]
    pub(crate) fn snapshot_lookup(&self, cell: Cell) -> f64 {
        let mut id = 0usize;
        for l in 0..cell.level {
            let c = self.nodes[id].snap_children;
            if c == NONE {
                break;
            }
            id = c as usize + cell.octant_below(l);
        }
        self.nodes[id].snapshot
    }
}
