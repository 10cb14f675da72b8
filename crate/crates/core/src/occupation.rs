//! The binned occupation measure of a path and every drift evaluation
//! against it.
//!
//! The drift felt at position `x` is `∫ f(x - y) dμ(y)` where `μ` is the
//! occupation measure of the whole trajectory, so it has to be evaluated
//! once per step against an ever-growing history. The measure is discretized
//! into cells of width `bin_width`; each cell keeps its zeroth moment (time
//! mass) and first moment (mass-weighted sum of deposit positions), so `f`
//! is evaluated at the within-cell centroid and the per-cell error is second
//! order in the bin width instead of first.
//!
//! Storage is paged: cells live in pages of 1024, each page carrying a
//! dense dyadic mini-tree, and a second dyadic hierarchy runs over the page
//! hull. All nodes are anchored at absolute coordinates (node `(k, j)`
//! spans cell ids `[j·2^k, (j+1)·2^k)`), so the structure never re-anchors
//! as the query point moves; the hull just doubles, staying aligned, when
//! the path escapes it. Empty pages cost one null pointer, which keeps
//! sparse extents (clusters separated by 1e8 cells) cheap.
//!
//! A `Coarsened` drift query descends the hierarchy and stops at any node
//! whose span lies entirely outside the near window and satisfies
//!
//! ```text
//! node_mass · env(d) · halfwidth ≤ tol · node_mass / total_mass,
//! ```
//!
//! where `env(d)` is a monotone upper bound on `|f′|` at distances ≥ d from
//! the query (see [`Kernel::derivative_envelope`]). Summing the per-node
//! bounds gives `|coarsened - exact| ≤ tol` unconditionally.
//!
//! Every aggregate node is recomputed as the sum of its two children on each
//! update, so a node's value is a pure function of current leaf values. That
//! makes a canonical rebuild from a cell snapshot bit-identical to the live
//! structure, which is what lets checkpoints resume exactly.

use crate::kernels::{DerivEnvelope, Kernel};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

const PAGE_BITS: u32 = 10;
const PAGE_CELLS: i64 = 1 << PAGE_BITS;
/// Heap layout: root at 1, leaves at `[PAGE_CELLS, 2*PAGE_CELLS)`.
const TREE_LEN: usize = (2 * PAGE_CELLS) as usize;
/// Hull growth guard: 2^24 page slots = 1.7e10 cells.
const MAX_SLOTS: usize = 1 << 24;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Node {
    mass: f64,
    moment: f64,
}

impl Node {
    #[inline]
    fn sum(a: Node, b: Node) -> Node {
        Node { mass: a.mass + b.mass, moment: a.moment + b.moment }
    }

    #[inline]
    fn centroid(&self) -> f64 {
        self.moment / self.mass
    }
}

struct Page {
    tree: Box<[Node; TREE_LEN]>,
}

impl Page {
    fn new() -> Self {
        Page { tree: Box::new([Node::default(); TREE_LEN]) }
    }

    #[inline]
    fn total(&self) -> Node {
        self.tree[1]
    }

    fn rebuild(&mut self) {
        for i in (1..PAGE_CELLS as usize).rev() {
            self.tree[i] = Node::sum(self.tree[2 * i], self.tree[2 * i + 1]);
        }
    }
}

impl Clone for Page {
    fn clone(&self) -> Self {
        Page { tree: Box::new(*self.tree) }
    }
}

/// One nonempty cell of the measure, as exposed to snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: i64,
    pub mass: f64,
    pub first_moment: f64,
}

/// How a drift query is answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Sum `mass·f(x - centroid)` over every nonempty cell.
    Exact,
    /// Descend the dyadic aggregate, collapsing admissible far nodes.
    Coarsened,
}

/// Parameters of a drift query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftQuerySpec {
    pub mode: DriftMode,
    /// Maximum absolute coarsening error against `Exact`.
    pub opening_tolerance: f64,
    /// Nodes within this distance of the query are always expanded to
    /// leaves; must be at least one bin width.
    pub near_radius: f64,
}

impl DriftQuerySpec {
    pub fn exact() -> Self {
        DriftQuerySpec { mode: DriftMode::Exact, opening_tolerance: 0.0, near_radius: 0.0 }
    }

    pub fn coarsened(opening_tolerance: f64, near_radius: f64) -> Result<Self> {
        if !(opening_tolerance > 0.0) {
            return Err(Error::NonPositive { name: "opening_tolerance", value: opening_tolerance });
        }
        if !(near_radius > 0.0) {
            return Err(Error::NonPositive { name: "near_radius", value: near_radius });
        }
        Ok(DriftQuerySpec { mode: DriftMode::Coarsened, opening_tolerance, near_radius })
    }

    pub fn validate(&self, bin_width: f64) -> Result<()> {
        if self.mode == DriftMode::Coarsened {
            if !(self.opening_tolerance > 0.0) {
                return Err(Error::NonPositive {
                    name: "opening_tolerance",
                    value: self.opening_tolerance,
                });
            }
            if self.near_radius < bin_width {
                return Err(Error::InvalidConfig(format!(
                    "near_radius {} must be at least bin_width {}",
                    self.near_radius, bin_width
                )));
            }
        }
        Ok(())
    }
}

/// Binned occupation measure with a dyadic far-field aggregate.
#[derive(Clone)]
pub struct OccupationMeasure {
    bin_width: f64,
    total_mass: f64,
    /// Absolute index of the first page slot; aligned to `slots.len()`,
    /// which is a power of two (or empty before the first deposit).
    min_page: i64,
    slots: Vec<Option<Box<Page>>>,
    /// `levels[k-1][j]` aggregates pages `[J·2^k, (J+1)·2^k)` for
    /// `J = (min_page >> k) + j`; `levels.len() = log2(slots.len())`.
    levels: Vec<Vec<Node>>,
}

impl std::fmt::Debug for OccupationMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OccupationMeasure")
            .field("bin_width", &self.bin_width)
            .field("total_mass", &self.total_mass)
            .field("pages", &self.slots.iter().filter(|s| s.is_some()).count())
            .field("hull_pages", &self.slots.len())
            .finish()
    }
}

impl OccupationMeasure {
    pub fn new(bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(Error::NonPositive { name: "bin_width", value: bin_width });
        }
        Ok(OccupationMeasure {
            bin_width,
            total_mass: 0.0,
            min_page: 0,
            slots: Vec::new(),
            levels: Vec::new(),
        })
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    /// Total deposited time mass.
    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn is_empty(&self) -> bool {
        self.total_mass == 0.0
    }

    /// Number of nonempty cells.
    pub fn nonempty_cells(&self) -> usize {
        self.pages()
            .map(|(_, p)| p.tree[PAGE_CELLS as usize..].iter().filter(|n| n.mass > 0.0).count())
            .sum()
    }

    /// Width of the allocated hull, in cells.
    pub fn hull_cells(&self) -> i64 {
        self.slots.len() as i64 * PAGE_CELLS
    }

    #[inline]
    fn cell_of(&self, x: f64) -> i64 {
        (x / self.bin_width).floor() as i64
    }

    fn pages(&self) -> impl Iterator<Item = (i64, &Page)> {
        let min_page = self.min_page;
        self.slots
            .iter()
            .enumerate()
            .filter_map(move |(i, s)| s.as_deref().map(|p| (min_page + i as i64, p)))
    }

    /// Add `dt` of time mass at position `x`, growing the hull if needed.
    pub fn deposit(&mut self, x: f64, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::NonPositive { name: "dt", value: dt });
        }
        if !x.is_finite() {
            return Err(Error::InvalidConfig("deposit position must be finite".into()));
        }
        let cell = self.cell_of(x);
        let page = cell >> PAGE_BITS;
        self.ensure_page(page)?;
        let slot = (page - self.min_page) as usize;
        let p = self.slots[slot].get_or_insert_with(|| Box::new(Page::new()));
        let mut i = (PAGE_CELLS + (cell & (PAGE_CELLS - 1))) as usize;
        p.tree[i].mass += dt;
        p.tree[i].moment += x * dt;
        while i > 1 {
            i >>= 1;
            p.tree[i] = Node::sum(p.tree[2 * i], p.tree[2 * i + 1]);
        }
        for k in 1..=self.levels.len() as u32 {
            let j_abs = page >> k;
            let left = self.child(k - 1, 2 * j_abs);
            let right = self.child(k - 1, 2 * j_abs + 1);
            let idx = (j_abs - (self.min_page >> k)) as usize;
            self.levels[k as usize - 1][idx] = Node::sum(left, right);
        }
        self.total_mass += dt;
        Ok(())
    }

    /// Aggregate node at `(level k, absolute index j)`; level 0 is the page
    /// totals. Out-of-hull indices read as zero.
    #[inline]
    fn child(&self, k: u32, j_abs: i64) -> Node {
        if k == 0 {
            let slot = j_abs - self.min_page;
            if slot < 0 || slot as usize >= self.slots.len() {
                return Node::default();
            }
            match &self.slots[slot as usize] {
                Some(p) => p.total(),
                None => Node::default(),
            }
        } else {
            let base = self.min_page >> k;
            let idx = j_abs - base;
            let level = &self.levels[k as usize - 1];
            if idx < 0 || idx as usize >= level.len() {
                return Node::default();
            }
            level[idx as usize]
        }
    }

    fn ensure_page(&mut self, page: i64) -> Result<()> {
        if self.slots.is_empty() {
            self.min_page = page;
            self.slots.push(None);
            return Ok(());
        }
        let covered = |min: i64, len: i64| page >= min && page < min + len;
        if covered(self.min_page, self.slots.len() as i64) {
            return Ok(());
        }
        let mut len = self.slots.len() as i64;
        let mut min = self.min_page;
        while !covered(min, len) {
            len *= 2;
            if len as usize > MAX_SLOTS {
                return Err(Error::InvalidConfig(format!(
                    "occupation hull would exceed {MAX_SLOTS} pages; bin_width is likely too \
                     small for the range of deposit positions"
                )));
            }
            min = min.div_euclid(len) * len;
        }
        let mut slots: Vec<Option<Box<Page>>> = Vec::with_capacity(len as usize);
        slots.resize_with(len as usize, || None);
        let offset = (self.min_page - min) as usize;
        for (i, s) in self.slots.drain(..).enumerate() {
            slots[offset + i] = s;
        }
        self.min_page = min;
        self.slots = slots;
        self.rebuild_levels();
        Ok(())
    }

    fn rebuild_levels(&mut self) {
        let m = self.slots.len().trailing_zeros();
        debug_assert!(self.slots.is_empty() || self.slots.len().is_power_of_two());
        self.levels = Vec::with_capacity(m as usize);
        for k in 1..=m {
            let n = self.slots.len() >> k;
            let base = self.min_page >> k;
            let mut level = Vec::with_capacity(n);
            for j in 0..n as i64 {
                let j_abs = base + j;
                level.push(Node::sum(self.child(k - 1, 2 * j_abs), self.child(k - 1, 2 * j_abs + 1)));
            }
            self.levels.push(level);
        }
    }

    /// Iterate nonempty cells in ascending id order.
    pub fn cells(&self) -> impl Iterator<Item = CellRecord> + '_ {
        self.pages().flat_map(|(page, p)| {
            p.tree[PAGE_CELLS as usize..]
                .iter()
                .enumerate()
                .filter(|(_, n)| n.mass > 0.0)
                .map(move |(off, n)| CellRecord {
                    cell_id: page * PAGE_CELLS + off as i64,
                    mass: n.mass,
                    first_moment: n.moment,
                })
        })
    }

    /// Rebuild a measure from a cell snapshot. Aggregates are recomputed
    /// canonically, which matches the live-updated structure bit for bit.
    pub fn from_cells<I: IntoIterator<Item = CellRecord>>(bin_width: f64, cells: I) -> Result<Self> {
        let mut m = OccupationMeasure::new(bin_width)?;
        let mut total = 0.0;
        for rec in cells {
            if !(rec.mass > 0.0) {
                return Err(Error::BadCheckpoint(format!(
                    "cell {} has nonpositive mass {}",
                    rec.cell_id, rec.mass
                )));
            }
            let page = rec.cell_id >> PAGE_BITS;
            m.ensure_page(page)?;
            let slot = (page - m.min_page) as usize;
            let p = m.slots[slot].get_or_insert_with(|| Box::new(Page::new()));
            let leaf = (PAGE_CELLS + (rec.cell_id & (PAGE_CELLS - 1))) as usize;
            p.tree[leaf].mass += rec.mass;
            p.tree[leaf].moment += rec.first_moment;
            total += rec.mass;
        }
        for s in m.slots.iter_mut().flatten() {
            s.rebuild();
        }
        m.rebuild_levels();
        m.total_mass = total;
        Ok(m)
    }

    /// Write the cell snapshot as CSV with exact decimal round-trip.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "cell_id,mass,first_moment")?;
        for c in self.cells() {
            writeln!(w, "{},{},{}", c.cell_id, c.mass, c.first_moment)?;
        }
        Ok(())
    }

    /// Read a cell snapshot written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: BufRead>(bin_width: f64, r: R) -> Result<Self> {
        let mut cells = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != "cell_id,mass,first_moment" {
                    return Err(Error::BadCheckpoint(format!("unexpected header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse_err = |what: &str| Error::BadCheckpoint(format!("line {}: bad {what}", i + 1));
            let cell_id = parts
                .next()
                .and_then(|s| s.trim().parse::<i64>().ok())
                .ok_or_else(|| parse_err("cell_id"))?;
            let mass = parts
                .next()
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| parse_err("mass"))?;
            let first_moment = parts
                .next()
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| parse_err("first_moment"))?;
            cells.push(CellRecord { cell_id, mass, first_moment });
        }
        Self::from_cells(bin_width, cells)
    }

    /// Exact drift: `Σ mass·f(x - centroid)` over nonempty cells.
    pub fn drift_exact(&self, kernel: &Kernel, x: f64) -> f64 {
        let mut total = 0.0;
        for (_, p) in self.pages() {
            let mut s = 0.0;
            for n in &p.tree[PAGE_CELLS as usize..] {
                if n.mass > 0.0 {
                    s += n.mass * kernel.eval(x - n.centroid());
                }
            }
            total += s;
        }
        total
    }

    /// Drift query per `spec`. Builds the derivative envelope on the fly in
    /// coarsened mode; hot loops should hold a [`DriftEvaluator`] instead.
    pub fn drift_at(&self, kernel: &Kernel, x: f64, spec: &DriftQuerySpec) -> f64 {
        match spec.mode {
            DriftMode::Exact => self.drift_exact(kernel, x),
            DriftMode::Coarsened => DriftEvaluator::new(kernel, *spec).eval(self, x),
        }
    }

    /// Split the exact drift into the contribution of cells with centroid in
    /// `[a, b]` (`h`) and the rest (`k`).
    pub fn drift_split(&self, kernel: &Kernel, x: f64, interval: (f64, f64)) -> Result<(f64, f64)> {
        let (a, b) = interval;
        if !(a < b) {
            return Err(Error::DegenerateInterval(a, b));
        }
        let mut h = 0.0;
        let mut k = 0.0;
        for (_, p) in self.pages() {
            for n in &p.tree[PAGE_CELLS as usize..] {
                if n.mass > 0.0 {
                    let c = n.centroid();
                    let term = n.mass * kernel.eval(x - c);
                    if a <= c && c <= b {
                        h += term;
                    } else {
                        k += term;
                    }
                }
            }
        }
        Ok((h, k))
    }

    /// The in-interval drift component `h` evaluated at each grid point.
    pub fn drift_profile(
        &self,
        kernel: &Kernel,
        grid: &[f64],
        interval: (f64, f64),
    ) -> Result<Vec<f64>> {
        let (a, b) = interval;
        if !(a < b) {
            return Err(Error::DegenerateInterval(a, b));
        }
        if grid.is_empty() {
            return Err(Error::InvalidGrid("drift_profile grid is empty".into()));
        }
        // Collect the in-interval cells once; the grid loop then touches
        // only those.
        let cells: Vec<Node> = self
            .pages()
            .flat_map(|(_, p)| p.tree[PAGE_CELLS as usize..].iter().copied())
            .filter(|n| {
                n.mass > 0.0 && {
                    let c = n.centroid();
                    a <= c && c <= b
                }
            })
            .collect();
        Ok(grid
            .iter()
            .map(|&x| cells.iter().map(|n| n.mass * kernel.eval(x - n.centroid())).sum())
            .collect())
    }
}

/// A drift query with the kernel's derivative envelope prepared once.
pub struct DriftEvaluator<'k> {
    kernel: &'k Kernel,
    spec: DriftQuerySpec,
    env: DerivEnvelope,
}

impl<'k> DriftEvaluator<'k> {
    pub fn new(kernel: &'k Kernel, spec: DriftQuerySpec) -> Self {
        DriftEvaluator { kernel, spec, env: kernel.derivative_envelope() }
    }

    pub fn spec(&self) -> &DriftQuerySpec {
        &self.spec
    }

    pub fn eval(&self, measure: &OccupationMeasure, x: f64) -> f64 {
        self.eval_counting(measure, x).0
    }

    /// Evaluate and report how many aggregate nodes were visited.
    pub fn eval_counting(&self, measure: &OccupationMeasure, x: f64) -> (f64, u64) {
        match self.spec.mode {
            DriftMode::Exact => {
                (measure.drift_exact(self.kernel, x), measure.nonempty_cells() as u64)
            }
            DriftMode::Coarsened => {
                if measure.is_empty() {
                    return (0.0, 0);
                }
                let mut acc = Acc { sum: 0.0, visited: 0 };
                let ctx = QueryCtx {
                    x,
                    w: measure.bin_width,
                    near: self.spec.near_radius,
                    // admissibility: env(d) * halfwidth <= tol / total_mass
                    budget: self.spec.opening_tolerance / measure.total_mass,
                };
                let m = measure.levels.len() as u32;
                if m == 0 {
                    if let Some(p) = measure.slots.first().and_then(|s| s.as_deref()) {
                        self.visit_page(p, measure.min_page, 1, &ctx, &mut acc);
                    }
                } else {
                    let root = measure.min_page >> m;
                    self.visit_above(measure, m, root, &ctx, &mut acc);
                }
                (acc.sum, acc.visited)
            }
        }
    }

    fn visit_above(
        &self,
        measure: &OccupationMeasure,
        k: u32,
        j_abs: i64,
        ctx: &QueryCtx,
        acc: &mut Acc,
    ) {
        let node = measure.child(k, j_abs);
        if node.mass <= 0.0 {
            return;
        }
        acc.visited += 1;
        let cell_lo = (j_abs << k) << PAGE_BITS;
        let width_cells = PAGE_CELLS << k;
        if let Some(value) = self.try_far(node, cell_lo, width_cells, ctx) {
            acc.sum += value;
            return;
        }
        if k == 0 {
            let slot = (j_abs - measure.min_page) as usize;
            if let Some(p) = measure.slots[slot].as_deref() {
                self.visit_page(p, j_abs, 1, ctx, acc);
            }
        } else {
            self.visit_above(measure, k - 1, 2 * j_abs, ctx, acc);
            self.visit_above(measure, k - 1, 2 * j_abs + 1, ctx, acc);
        }
    }

    fn visit_page(&self, page: &Page, page_abs: i64, idx: usize, ctx: &QueryCtx, acc: &mut Acc) {
        let node = page.tree[idx];
        if node.mass <= 0.0 {
            return;
        }
        acc.visited += 1;
        if idx >= PAGE_CELLS as usize {
            // Leaf cell: the same term exact mode would add.
            acc.sum += node.mass * self.kernel.eval(ctx.x - node.centroid());
            return;
        }
        let depth = idx.ilog2();
        let width_cells = PAGE_CELLS >> depth;
        let cell_lo = page_abs * PAGE_CELLS + (idx as i64 - (1 << depth)) * width_cells;
        if let Some(value) = self.try_far(node, cell_lo, width_cells, ctx) {
            acc.sum += value;
            return;
        }
        self.visit_page(page, page_abs, 2 * idx, ctx, acc);
        self.visit_page(page, page_abs, 2 * idx + 1, ctx, acc);
    }

    /// If the node's span is beyond the near window and the envelope bound
    /// meets the per-unit-mass budget, return its collapsed contribution.
    #[inline]
    fn try_far(&self, node: Node, cell_lo: i64, width_cells: i64, ctx: &QueryCtx) -> Option<f64> {
        let lo = cell_lo as f64 * ctx.w;
        let hi = (cell_lo + width_cells) as f64 * ctx.w;
        let d = if ctx.x < lo {
            lo - ctx.x
        } else if ctx.x > hi {
            ctx.x - hi
        } else {
            0.0
        };
        if d < ctx.near {
            return None;
        }
        let halfwidth = 0.5 * (hi - lo);
        if self.env.at(d) * halfwidth <= ctx.budget {
            Some(node.mass * self.kernel.eval(ctx.x - node.centroid()))
        } else {
            None
        }
    }
}

struct QueryCtx {
    x: f64,
    w: f64,
    near: f64,
    budget: f64,
}

struct Acc {
    sum: f64,
    visited: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{context, StreamRng};
    use approx::assert_relative_eq;

    fn spec_coarse(tol: f64, near: f64) -> DriftQuerySpec {
        DriftQuerySpec::coarsened(tol, near).unwrap()
    }

    #[test]
    fn deposit_tracks_cell_moments() {
        let mut m = OccupationMeasure::new(0.1).unwrap();
        m.deposit(0.55, 0.01).unwrap();
        let cells: Vec<_> = m.cells().collect();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].cell_id, 5);
        assert_relative_eq!(cells[0].mass, 0.01, max_relative = 1e-15);
        assert_relative_eq!(cells[0].first_moment / cells[0].mass, 0.55, max_relative = 1e-12);
        assert_relative_eq!(m.total_mass(), 0.01, max_relative = 1e-15);

        let mut m = OccupationMeasure::new(0.1).unwrap();
        m.deposit(0.52, 0.01).unwrap();
        m.deposit(0.58, 0.01).unwrap();
        let cells: Vec<_> = m.cells().collect();
        assert_eq!(cells.len(), 1);
        assert_relative_eq!(cells[0].first_moment / cells[0].mass, 0.55, max_relative = 1e-12);
    }

    #[test]
    fn deposit_rejects_bad_input() {
        let mut m = OccupationMeasure::new(0.1).unwrap();
        assert!(m.deposit(0.0, 0.0).is_err());
        assert!(m.deposit(0.0, -1.0).is_err());
        assert!(m.deposit(f64::NAN, 1.0).is_err());
        assert!(OccupationMeasure::new(0.0).is_err());
    }

    #[test]
    fn mass_conservation_over_many_random_deposits() {
        let mut rng = StreamRng::new(5, context::TEST, 10);
        let mut m = OccupationMeasure::new(0.05).unwrap();
        let mut expected = 0.0;
        for _ in 0..200_000 {
            let x = rng.next_normal() * 30.0;
            let dt = rng.next_uniform() * 1e-2;
            m.deposit(x, dt).unwrap();
            expected += dt;
        }
        assert!((m.total_mass() - expected).abs() <= 1e-9 * expected);
        let cell_sum: f64 = m.cells().map(|c| c.mass).sum();
        assert!((cell_sum - expected).abs() <= 1e-9 * expected);
    }

    #[test]
    fn centroids_stay_inside_their_cells() {
        let mut rng = StreamRng::new(6, context::TEST, 11);
        let w = 0.37;
        let mut m = OccupationMeasure::new(w).unwrap();
        for _ in 0..50_000 {
            m.deposit((rng.next_uniform() - 0.5) * 1e4, rng.next_uniform() + 1e-9).unwrap();
        }
        for c in m.cells() {
            let centroid = c.first_moment / c.mass;
            let lo = c.cell_id as f64 * w;
            let hi = (c.cell_id + 1) as f64 * w;
            let slack = 1e-9 * w.max(lo.abs()).max(hi.abs());
            assert!(
                centroid >= lo - slack && centroid <= hi + slack,
                "cell {} centroid {centroid} outside [{lo}, {hi}]",
                c.cell_id
            );
        }
    }

    /// Every aggregate must equal the sum of its children; with canonical
    /// recomputation this holds bitwise against a full rebuild.
    #[test]
    fn aggregates_match_full_rebuild_exactly() {
        let mut rng = StreamRng::new(7, context::TEST, 12);
        let mut m = OccupationMeasure::new(0.25).unwrap();
        for _ in 0..30_000 {
            let x = rng.next_normal() * 2000.0;
            m.deposit(x, rng.next_uniform()).unwrap();
        }
        let rebuilt = OccupationMeasure::from_cells(m.bin_width(), m.cells()).unwrap();
        assert_eq!(m.slots.len(), rebuilt.slots.len());
        assert_eq!(m.min_page, rebuilt.min_page);
        for (a, b) in m.pages().zip(rebuilt.pages()) {
            assert_eq!(a.0, b.0);
            for (x, y) in a.1.tree.iter().zip(b.1.tree.iter()) {
                assert_eq!(x.mass.to_bits(), y.mass.to_bits());
                assert_eq!(x.moment.to_bits(), y.moment.to_bits());
            }
        }
        for (la, lb) in m.levels.iter().zip(rebuilt.levels.iter()) {
            for (x, y) in la.iter().zip(lb.iter()) {
                assert_eq!(x.mass.to_bits(), y.mass.to_bits());
                assert_eq!(x.moment.to_bits(), y.moment.to_bits());
            }
        }
    }

    #[test]
    fn drift_on_empty_measure_is_zero() {
        let m = OccupationMeasure::new(0.1).unwrap();
        let k = Kernel::durrett_rogers(0.5).unwrap();
        assert_eq!(m.drift_at(&k, 3.0, &DriftQuerySpec::exact()), 0.0);
        assert_eq!(m.drift_at(&k, 3.0, &spec_coarse(0.01, 1.0)), 0.0);
    }

    #[test]
    fn single_atom_drift() {
        // mass 2 at y=1, query at x=2: 2*f(1) = 1 for every beta.
        for beta in [0.2, 0.5, 0.8] {
            let k = Kernel::durrett_rogers(beta).unwrap();
            let mut m = OccupationMeasure::new(0.1).unwrap();
            m.deposit(1.0, 2.0).unwrap();
            assert_relative_eq!(
                m.drift_at(&k, 2.0, &DriftQuerySpec::exact()),
                1.0,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn split_is_a_partition_of_exact() {
        let k = Kernel::durrett_rogers(0.5).unwrap();
        let mut m = OccupationMeasure::new(0.05).unwrap();
        m.deposit(1.0, 1.0).unwrap();
        let (h, kk) = m.drift_split(&k, 3.0, (0.0, 2.0)).unwrap();
        assert_relative_eq!(h, k.eval(2.0), max_relative = 1e-12);
        assert_eq!(kk, 0.0);
        let (h, kk) = m.drift_split(&k, 3.0, (4.0, 6.0)).unwrap();
        assert_eq!(h, 0.0);
        assert_relative_eq!(kk, k.eval(2.0), max_relative = 1e-12);

        let mut rng = StreamRng::new(8, context::TEST, 13);
        let mut last = OccupationMeasure::new(0.1).unwrap();
        for case in 0..300 {
            let mut m = OccupationMeasure::new(0.1).unwrap();
            for _ in 0..200 {
                m.deposit(rng.next_normal() * 50.0, rng.next_uniform()).unwrap();
            }
            let x = rng.next_normal() * 20.0;
            let a = rng.next_range(-40.0, 0.0);
            let b = rng.next_range(1e-6, 40.0);
            let (h, kk) = m.drift_split(&k, x, (a, b)).unwrap();
            let exact = m.drift_at(&k, x, &DriftQuerySpec::exact());
            assert!(
                (h + kk - exact).abs() <= 1e-12 * (1.0 + h.abs() + kk.abs()),
                "case {case}: h+k={} exact={exact}",
                h + kk
            );
            last = m;
        }
        assert!(last.drift_split(&k, 0.0, (2.0, 2.0)).is_err());
    }

    #[test]
    fn profile_matches_closed_form_atoms() {
        let k = Kernel::durrett_rogers(0.5).unwrap();
        let mut m = OccupationMeasure::new(0.01).unwrap();
        m.deposit(1.0, 1.0).unwrap();
        let prof = m.drift_profile(&k, &[0.0, 0.5], (0.0, 1.5)).unwrap();
        assert_relative_eq!(prof[0], -0.5, max_relative = 1e-10);
        assert_relative_eq!(prof[1], -0.36939806251812928, max_relative = 1e-9);

        let empty = OccupationMeasure::new(0.01).unwrap();
        let prof = empty.drift_profile(&k, &[0.0, 1.0], (0.0, 1.0)).unwrap();
        assert_eq!(prof, vec![0.0, 0.0]);
        assert!(empty.drift_profile(&k, &[], (0.0, 1.0)).is_err());
    }

    #[test]
    fn odd_kernel_profile_vanishes_at_center_of_symmetric_measure() {
        let k = Kernel::durrett_rogers(0.3).unwrap();
        let mut m = OccupationMeasure::new(0.1).unwrap();
        let center = 2.0;
        for i in 1..50 {
            let off = i as f64 * 0.25;
            m.deposit(center + off, 0.7).unwrap();
            m.deposit(center - off, 0.7).unwrap();
        }
        let prof = m.drift_profile(&k, &[center], (center - 20.0, center + 20.0)).unwrap();
        assert!(prof[0].abs() <= 1e-12, "profile {prof:?}");
    }

    #[test]
    fn coarsened_within_tolerance_of_exact() {
        let mut rng = StreamRng::new(9, context::TEST, 14);
        for kernel in [Kernel::durrett_rogers(0.5).unwrap(), Kernel::nonneg_power(0.35).unwrap()] {
            for case in 0..40 {
                let w = [0.05, 0.1, 0.5][case % 3];
                let mut m = OccupationMeasure::new(w).unwrap();
                let n = 2000 + rng.next_index(20_000);
                for _ in 0..n {
                    // Heavy-tailed positions: normal / uniform^2, clipped.
                    let x = (rng.next_normal() / rng.next_uniform().powi(2)).clamp(-1e6, 1e6);
                    m.deposit(x, rng.next_uniform() * 0.1 + 1e-6).unwrap();
                }
                let tol = [1e-2, 1e-4][case % 2];
                let spec = spec_coarse(tol, 2.0 * w);
                let eval = DriftEvaluator::new(&kernel, spec);
                for _ in 0..20 {
                    let x = rng.next_normal() * 100.0;
                    let exact = m.drift_exact(&kernel, x);
                    let coarse = eval.eval(&m, x);
                    assert!(
                        (coarse - exact).abs() <= tol,
                        "{} case {case}: |{coarse} - {exact}| > {tol}",
                        kernel.name()
                    );
                }
            }
        }
    }

    #[test]
    fn coarsened_visits_few_nodes_on_wide_sparse_hull() {
        // Two clusters separated by 1e8 cells; the empty middle must cost
        // nothing and far mass must collapse after O(log extent) nodes.
        let k = Kernel::durrett_rogers(0.5).unwrap();
        let w = 1.0;
        let mut m = OccupationMeasure::new(w).unwrap();
        let mut rng = StreamRng::new(10, context::TEST, 15);
        for _ in 0..5_000 {
            m.deposit(rng.next_range(0.0, 50.0), 0.01).unwrap();
            m.deposit(1.0e8 + rng.next_range(0.0, 50.0), 0.01).unwrap();
        }
        assert!(m.hull_cells() >= 100_000_000);
        let spec = spec_coarse(0.5, 4.0);
        let eval = DriftEvaluator::new(&k, spec);
        for x in [25.0, 1.0e8 + 25.0, 5.0e7] {
            let (coarse, visited) = eval.eval_counting(&m, x);
            let exact = m.drift_exact(&k, x);
            assert!((coarse - exact).abs() <= 0.5);
            assert!(visited <= 2_000, "visited {visited} nodes at x={x}");
        }
    }

    #[test]
    fn snapshot_csv_round_trips_bit_exactly() {
        let mut rng = StreamRng::new(11, context::TEST, 16);
        let mut m = OccupationMeasure::new(0.31).unwrap();
        for _ in 0..5_000 {
            m.deposit(rng.next_normal() * 77.0, rng.next_uniform() * 0.3 + 1e-12).unwrap();
        }
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let m2 = OccupationMeasure::read_csv(0.31, buf.as_slice()).unwrap();
        let a: Vec<_> = m.cells().collect();
        let b: Vec<_> = m2.cells().collect();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.cell_id, y.cell_id);
            assert_eq!(x.mass.to_bits(), y.mass.to_bits());
            assert_eq!(x.first_moment.to_bits(), y.first_moment.to_bits());
        }
        let k = Kernel::durrett_rogers(0.5).unwrap();
        let q = 3.7;
        assert_eq!(
            m.drift_exact(&k, q).to_bits(),
            m2.drift_exact(&k, q).to_bits(),
            "drift after round-trip must be bit-identical"
        );
    }

    #[test]
    fn negative_and_boundary_cells_map_correctly() {
        let mut m = OccupationMeasure::new(1.0).unwrap();
        m.deposit(-0.5, 1.0).unwrap();
        m.deposit(-1.0, 1.0).unwrap();
        m.deposit(0.0, 1.0).unwrap();
        let ids: Vec<i64> = m.cells().map(|c| c.cell_id).collect();
        assert_eq!(ids, vec![-1, 0]);
        let rec: Vec<_> = m.cells().collect();
        assert_eq!(rec[0].mass, 2.0); // -0.5 and -1.0 share cell [-1, 0)
    }
}
