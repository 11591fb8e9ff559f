//! Dynamic graded quadtree carrying cell averages of `(v, u_e, w)`.
//!
//! Nodes live in dense per-level arrays addressed by [`CellIndex`]. A node is
//! a leaf (part of the computational partition), internal (its four children
//! are present and its value is their projection), or virtual (a predicted
//! cell that only completes flux and prediction stencils).

use std::collections::HashMap;

use crate::elliptic::CsrMatrix;
use crate::error::{Error, Result};
use crate::fv::face_coefficient;
use crate::grid::{reflect, CellIndex, Direction, CHILD_OFFSETS};
use crate::model::{Medium, ModelParams};
use crate::multiresolution::{prediction_weights, project, threshold_for_level, DetailSet, MrConfig, Stencil};
use crate::scalar::Real;

/// Largest finest level the dense store accepts.
pub const MAX_TREE_LEVEL: u8 = 12;

const SCALE_FLOOR: f64 = 1e-30;

/// Same-level cousin offsets every leaf needs for its flux stencil.
pub const COUSIN_OFFSETS: [(i64, i64); 8] = [(1, 0), (-1, 0), (2, 0), (-2, 0), (0, 1), (0, -1), (0, 2), (0, -2)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Absent,
    Leaf,
    Internal,
    Virtual,
}

impl NodeKind {
    #[inline]
    pub fn is_present(self) -> bool {
        self != NodeKind::Absent
    }

    #[inline]
    pub fn is_real(self) -> bool {
        matches!(self, NodeKind::Leaf | NodeKind::Internal)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeConfig<T> {
    pub mr: MrConfig<T>,
    pub min_level: u8,
    /// When false the tree never changes shape (forced-uniform runs).
    pub adapt: bool,
}

impl<T: Real> TreeConfig<T> {
    pub fn new(max_level: u8, eps_ref: T) -> Self {
        Self { mr: MrConfig::new(max_level, eps_ref), min_level: 2.min(max_level), adapt: true }
    }

    pub fn validate(&self) -> Result<()> {
        self.mr.validate()?;
        if self.mr.max_level > MAX_TREE_LEVEL {
            return Err(Error::param(
                "mr.max_level",
                format!("the adaptive tree supports at most level {MAX_TREE_LEVEL}"),
            ));
        }
        if self.min_level > self.mr.max_level {
            return Err(Error::param("mr.min_level", "must not exceed max_level"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionMetrics<T> {
    pub eta: T,
    pub leaf_count: usize,
    pub fine_count: u64,
}

/// `η = N / (2^{−(L+1)} N + #leaves)`.
pub fn compression_rate<T: Real>(fine_count: u64, max_level: u8, leaf_count: usize) -> T {
    let n = T::of(fine_count as f64);
    n / (T::pow2(-(max_level as i32 + 1)) * n + T::of(leaf_count as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RemeshReport {
    pub coarsened: usize,
    pub refined: usize,
    pub structure_changed: bool,
}

/// Explicit-flux face. The fine-side leaf receives `+F`, the other leaf `−F`;
/// `F = t_e (u_e[src_other] − u_e[src_fine])`, where `src_other` is a virtual
/// cousin on faces towards a coarser leaf.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FluxFace<T> {
    pub fine: usize,
    pub other: usize,
    pub src_fine: usize,
    pub src_other: usize,
    pub t_e: T,
    pub level: u8,
}

/// Two-point face between leaves used by the elliptic operator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipticFace<T> {
    pub a: usize,
    pub b: usize,
    pub t_i: T,
    pub t_e: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VirtualEntry {
    pub id: usize,
    pub stencil: [usize; 25],
    pub child: u8,
}

/// Everything the time stepper needs about the current structure.
#[derive(Clone, Debug)]
pub struct Plan<T> {
    pub leaves: Vec<usize>,
    pub leaf_cells: Vec<CellIndex>,
    pub leaf_area: Vec<T>,
    pub faces: Vec<FluxFace<T>>,
    pub elliptic_faces: Vec<EllipticFace<T>>,
    pub matrix: CsrMatrix<T>,
    /// Internal node ids, finest level first.
    pub internal: Vec<usize>,
    /// Virtual nodes in a valid evaluation order.
    pub virtuals: Vec<VirtualEntry>,
    pub min_leaf_level: u8,
    pub max_leaf_level: u8,
}

#[derive(Clone, Debug)]
pub struct MrTree<T> {
    cfg: TreeConfig<T>,
    params: ModelParams<T>,
    weights: [[T; 25]; 4],
    offsets: Vec<usize>,
    kind: Vec<NodeKind>,
    value: Vec<[T; 3]>,
    significant: Vec<bool>,
    details: Vec<DetailSet<T>>,
    virtuals: Vec<VirtualEntry>,
    plan: Option<Plan<T>>,
    face_cache: HashMap<(usize, usize), (T, T)>,
    /// Significance pattern under which the current shape is a fixed point.
    stable_under: Option<Vec<usize>>,
    detail_plan: Option<DetailPlan>,
}

/// Flattened detail evaluation for one node-kind pattern.
#[derive(Clone, Debug)]
struct DetailPlan {
    kind: Vec<NodeKind>,
    /// Absent cells to predict, dependencies first: (id, child slot, parent stencil).
    predicted: Vec<(usize, usize, [usize; 25])>,
    /// Internal nodes: (id, level, stencil, children).
    internal: Vec<(usize, u8, [usize; 25], [usize; 4])>,
}

/// Predicted values of absent cells, indexed by node id.
struct Memo<T> {
    slots: Vec<Option<[T; 3]>>,
}

impl<T: Copy> Memo<T> {
    fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    fn get(&self, id: usize) -> Option<&[T; 3]> {
        self.slots[id].as_ref()
    }

    fn insert(&mut self, id: usize, v: [T; 3]) {
        self.slots[id] = Some(v);
    }

    fn remove(&mut self, id: usize) {
        self.slots[id] = None;
    }
}

impl<T: Real> MrTree<T> {
    /// All cells down to `L` are leaves, with the given averages.
    pub fn full(cfg: TreeConfig<T>, params: ModelParams<T>, fill: impl Fn(CellIndex) -> [T; 3]) -> Result<Self> {
        cfg.validate()?;
        let max = cfg.mr.max_level as usize;
        let mut offsets = Vec::with_capacity(max + 2);
        let mut total = 0usize;
        for l in 0..=max {
            offsets.push(total);
            total += 1usize << (2 * l);
        }
        offsets.push(total);
        let mut tree = Self {
            weights: prediction_weights(cfg.mr.gamma),
            cfg,
            params,
            offsets,
            kind: vec![NodeKind::Internal; total],
            value: vec![[T::zero(); 3]; total],
            significant: vec![false; total],
            details: vec![DetailSet::default(); total],
            virtuals: Vec::new(),
            plan: None,
            face_cache: HashMap::new(),
            stable_under: None,
            detail_plan: None,
        };
        for c in crate::grid::level_cells(cfg.mr.max_level) {
            let id = tree.id(c);
            tree.kind[id] = NodeKind::Leaf;
            tree.value[id] = fill(c);
        }
        tree.project_internal();
        tree.materialize_virtual_leaves();
        Ok(tree)
    }

    /// Full tree followed by one adaptation pass.
    pub fn build_initial(
        cfg: TreeConfig<T>,
        params: ModelParams<T>,
        fill: impl Fn(CellIndex) -> [T; 3],
    ) -> Result<Self> {
        let mut tree = Self::full(cfg, params, fill)?;
        if cfg.adapt {
            tree.remesh()?;
        }
        Ok(tree)
    }

    /// Rebuilds a (not necessarily graded) tree from a leaf partition.
    pub fn from_leaves(cfg: TreeConfig<T>, params: ModelParams<T>, rows: &[(CellIndex, [T; 3])]) -> Result<Self> {
        let mut tree = Self::full(cfg, params, |_| [T::zero(); 3])?;
        tree.kind.iter_mut().for_each(|k| *k = NodeKind::Absent);
        tree.virtuals.clear();
        tree.plan = None;
        let mut area = 0.0f64;
        for &(c, val) in rows {
            if c.level > cfg.mr.max_level {
                return Err(Error::BeyondFinest { level: c.level, max_level: cfg.mr.max_level });
            }
            let id = tree.id(c);
            if tree.kind[id] != NodeKind::Absent {
                return Err(Error::Invariant(format!("leaf {c} overlaps another leaf")));
            }
            tree.kind[id] = NodeKind::Leaf;
            tree.value[id] = val;
            area += c.geometry::<f64>().area;
            let mut a = c;
            while a.level > 0 {
                a = a.parent()?;
                let aid = tree.id(a);
                match tree.kind[aid] {
                    NodeKind::Leaf => return Err(Error::Invariant(format!("leaf {c} lies inside leaf {a}"))),
                    _ => tree.kind[aid] = NodeKind::Internal,
                }
            }
        }
        if (area - 1.0).abs() > 1e-12 {
            return Err(Error::Invariant(format!("leaves cover area {area}, expected 1")));
        }
        for id in 0..tree.kind.len() {
            if tree.kind[id] == NodeKind::Internal {
                let c = tree.cell(id);
                if c.level == cfg.mr.max_level || c.children(cfg.mr.max_level)?.iter().any(|&k| !tree.kind_of(k).is_real()) {
                    return Err(Error::Invariant(format!("leaves do not tile cell {c}")));
                }
            }
        }
        tree.project_internal();
        Ok(tree)
    }

    pub fn config(&self) -> &TreeConfig<T> {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn max_level(&self) -> u8 {
        self.cfg.mr.max_level
    }

    #[inline]
    pub fn id(&self, c: CellIndex) -> usize {
        self.offsets[c.level as usize] + ((c.j as usize) << c.level) + c.i as usize
    }

    pub fn cell(&self, id: usize) -> CellIndex {
        let level = self.offsets.partition_point(|&o| o <= id) - 1;
        let local = id - self.offsets[level];
        CellIndex { level: level as u8, i: (local & ((1 << level) - 1)) as u32, j: (local >> level) as u32 }
    }

    #[inline]
    pub fn kind_of(&self, c: CellIndex) -> NodeKind {
        self.kind[self.id(c)]
    }

    #[inline]
    pub fn kind_by_id(&self, id: usize) -> NodeKind {
        self.kind[id]
    }

    pub fn value(&self, c: CellIndex) -> Option<[T; 3]> {
        let id = self.id(c);
        self.kind[id].is_present().then(|| self.value[id])
    }

    #[inline]
    pub fn value_by_id(&self, id: usize) -> [T; 3] {
        self.value[id]
    }

    #[inline]
    pub fn value_mut(&mut self, id: usize) -> &mut [T; 3] {
        &mut self.value[id]
    }

    pub fn is_significant(&self, c: CellIndex) -> bool {
        self.significant[self.id(c)]
    }

    pub fn detail_set(&self, c: CellIndex) -> DetailSet<T> {
        self.details[self.id(c)]
    }

    /// Leaves in depth-first order, children in `(0,0),(1,0),(0,1),(1,1)` order.
    pub fn leaf_ids(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            match self.kind[id] {
                NodeKind::Leaf => out.push(id),
                NodeKind::Internal => {
                    let c = self.cell(id);
                    for e in CHILD_OFFSETS.iter().rev() {
                        stack.push(self.id(c.child(*e)));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn leaves(&self) -> Vec<(CellIndex, [T; 3])> {
        self.leaf_ids().into_iter().map(|id| (self.cell(id), self.value[id])).collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.kind.iter().filter(|&&k| k == NodeKind::Leaf).count()
    }

    pub fn virtual_count(&self) -> usize {
        self.virtuals.len()
    }

    pub fn compression(&self) -> CompressionMetrics<T> {
        let l = self.max_level();
        let fine_count = 1u64 << (2 * l as u32);
        let leaf_count = self.leaf_count();
        CompressionMetrics { eta: compression_rate(fine_count, l, leaf_count), leaf_count, fine_count }
    }

    /// `Σ |K| u_c` over leaves.
    pub fn leaf_integral(&self, component: usize) -> T {
        self.leaf_ids()
            .into_iter()
            .map(|id| self.cell(id).geometry::<T>().area * self.value[id][component])
            .sum()
    }

    /// Recomputes every internal value as the projection of its children.
    pub fn project_internal(&mut self) {
        for l in (0..self.max_level()).rev() {
            let n = 1usize << l;
            for local in 0..n * n {
                let id = self.offsets[l as usize] + local;
                if self.kind[id] == NodeKind::Internal {
                    let c = self.cell(id);
                    let kids = CHILD_OFFSETS.map(|e| self.value[self.id(c.child(e))]);
                    self.value[id] = [0, 1, 2].map(|k| project([kids[0][k], kids[1][k], kids[2][k], kids[3][k]]));
                }
            }
        }
    }

    fn predict_virtual(weights: &[[T; 25]; 4], value: &[[T; 3]], entry: &VirtualEntry, component: usize) -> T {
        let w = &weights[entry.child as usize];
        let mut acc = T::zero();
        for k in 0..25 {
            acc += w[k] * value[entry.stencil[k]][component];
        }
        acc
    }

    /// Re-predicts every virtual cell from the current coarser values.
    pub fn refresh_virtuals(&mut self) {
        for c in 0..3 {
            self.refresh_virtual_component(c);
        }
    }

    /// As [`refresh_virtuals`](Self::refresh_virtuals) for one component.
    pub fn refresh_virtual_component(&mut self, component: usize) {
        for entry in &self.virtuals {
            let v = Self::predict_virtual(&self.weights, &self.value, entry, component);
            self.value[entry.id][component] = v;
        }
    }

    /// Internal projections of one component, using a precomputed order.
    pub fn project_component(&mut self, internal: &[usize], component: usize) {
        for &id in internal {
            let c = self.cell(id);
            let kids = CHILD_OFFSETS.map(|e| self.value[self.id(c.child(e))][component]);
            self.value[id][component] = project(kids);
        }
    }

    pub fn refresh(&mut self) {
        self.project_internal();
        self.refresh_virtuals();
    }

    fn stencil_ids(&self, c: CellIndex) -> [usize; 25] {
        let n = 1i64 << c.level;
        let mut out = [0usize; 25];
        for dj in 0..5i64 {
            let jj = reflect(c.j as i64 + dj - 2, n) as u32;
            for di in 0..5i64 {
                let ii = reflect(c.i as i64 + di - 2, n) as u32;
                out[(dj * 5 + di) as usize] = self.id(CellIndex { level: c.level, i: ii, j: jj });
            }
        }
        out
    }

    /// Value of `c`, predicting absent cells recursively from coarser levels.
    fn value_or_predict(&self, c: CellIndex, memo: &mut Memo<T>) -> [T; 3] {
        let id = self.id(c);
        if self.kind[id].is_present() {
            return self.value[id];
        }
        if let Some(v) = memo.get(id) {
            return *v;
        }
        let p = c.parent().expect("level 0 is always present");
        let ids = self.stencil_ids(p);
        let mut vals = [[T::zero(); 3]; 25];
        for k in 0..25 {
            vals[k] = self.value_or_predict(self.cell(ids[k]), memo);
        }
        let w = &self.weights[c.child_slot()];
        let mut out = [T::zero(); 3];
        for comp in 0..3 {
            for k in 0..25 {
                out[comp] += w[k] * vals[k][comp];
            }
        }
        memo.insert(id, out);
        out
    }

    /// Global max-norm of each component over the leaves, floored.
    pub fn component_scales(&self) -> [T; 3] {
        let mut s = [T::of(SCALE_FLOOR); 3];
        for (id, k) in self.kind.iter().enumerate() {
            if *k == NodeKind::Leaf {
                for c in 0..3 {
                    s[c] = s[c].max(self.value[id][c].abs());
                }
            }
        }
        s
    }

    fn push_predicted(&self, c: CellIndex, seen: &mut [bool], out: &mut Vec<(usize, usize, [usize; 25])>) {
        let id = self.id(c);
        if self.kind[id].is_present() || seen[id] {
            return;
        }
        seen[id] = true;
        let p = c.parent().expect("level 0 is always present");
        let ids = self.stencil_ids(p);
        for &k in &ids {
            self.push_predicted(self.cell(k), seen, out);
        }
        out.push((id, c.child_slot(), ids));
    }

    fn build_detail_plan(&self) -> DetailPlan {
        let mut seen = vec![false; self.kind.len()];
        let mut predicted = Vec::new();
        let mut internal = Vec::new();
        for id in 0..self.kind.len() {
            if self.kind[id] != NodeKind::Internal {
                continue;
            }
            let c = self.cell(id);
            let ids = self.stencil_ids(c);
            for &k in &ids {
                self.push_predicted(self.cell(k), &mut seen, &mut predicted);
            }
            internal.push((id, c.level, ids, CHILD_OFFSETS.map(|e| self.id(c.child(e)))));
        }
        DetailPlan { kind: self.kind.clone(), predicted, internal }
    }

    /// Details and significance flags of all internal nodes.
    pub fn compute_details(&mut self) -> Vec<usize> {
        let scales = self.component_scales();
        let plan = match self.detail_plan.take() {
            Some(p) if p.kind == self.kind => p,
            _ => self.build_detail_plan(),
        };
        let mut vals = self.value.clone();
        for (id, slot, ids) in &plan.predicted {
            let w = &self.weights[*slot];
            let mut out = [T::zero(); 3];
            for comp in 0..3 {
                for k in 0..25 {
                    out[comp] += w[k] * vals[ids[k]][comp];
                }
            }
            vals[*id] = out;
        }
        self.significant.iter_mut().for_each(|s| *s = false);
        let mut significant = Vec::new();
        for (id, level, ids, kids) in &plan.internal {
            let mut s = [[[T::zero(); 5]; 5]; 3];
            for k in 0..25 {
                let v = vals[ids[k]];
                for comp in 0..3 {
                    s[comp][k / 5][k % 5] = v[comp];
                }
            }
            let kv = kids.map(|k| self.value[k]);
            let children = [0, 1, 2].map(|k| [kv[0][k], kv[1][k], kv[2][k], kv[3][k]]);
            let d = DetailSet::compute(&s.map(Stencil), &children, self.cfg.mr.gamma);
            self.details[*id] = d;
            if d.normalized_magnitude(scales) >= threshold_for_level(*level, &self.cfg.mr) {
                self.significant[*id] = true;
                significant.push(*id);
            }
        }
        self.detail_plan = Some(plan);
        significant
    }

    fn clear_virtuals(&mut self) {
        for e in std::mem::take(&mut self.virtuals) {
            self.kind[e.id] = NodeKind::Absent;
        }
        self.plan = None;
    }

    /// Whether turning internal `c` into a leaf keeps edge neighbours within one level.
    fn collapse_keeps_grading(&self, c: CellIndex) -> bool {
        for dir in Direction::ALL {
            let (di, dj) = dir.offset();
            if let Some(n) = c.offset(di, dj) {
                if self.kind_of(n) == NodeKind::Internal {
                    let back = dir.opposite().offset();
                    for e in CHILD_OFFSETS {
                        let k = n.child(e);
                        // only the children touching the shared edge matter
                        let touches = k.offset(back.0, back.1).map_or(false, |m| c.contains(m));
                        if touches && self.kind_of(k) == NodeKind::Internal {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    fn collapse(&mut self, c: CellIndex) {
        let id = self.id(c);
        for e in CHILD_OFFSETS {
            let k = self.id(c.child(e));
            self.kind[k] = NodeKind::Absent;
            self.significant[k] = false;
        }
        self.kind[id] = NodeKind::Leaf;
    }

    /// Removes non-significant sibling quadruples bottom-up. Details must be current.
    pub fn coarsen_by_threshold(&mut self) -> usize {
        self.clear_virtuals();
        let mut count = 0;
        for l in (self.cfg.min_level..self.max_level()).rev() {
            let n = 1usize << l;
            for local in 0..n * n {
                let id = self.offsets[l as usize] + local;
                if self.kind[id] != NodeKind::Internal || self.significant[id] {
                    continue;
                }
                let c = self.cell(id);
                let all_leaves = CHILD_OFFSETS.iter().all(|&e| self.kind_of(c.child(e)) == NodeKind::Leaf);
                if all_leaves && self.collapse_keeps_grading(c) {
                    self.collapse(c);
                    count += 1;
                }
            }
        }
        count
    }

    /// Splits leaf `c` into four predicted children.
    pub fn refine_leaf(&mut self, c: CellIndex) -> Result<()> {
        let memo = &mut Memo::new(self.kind.len());
        self.refine_with(c, memo)
    }

    fn refine_with(&mut self, c: CellIndex, memo: &mut Memo<T>) -> Result<()> {
        let kids = c.children(self.max_level())?;
        if self.kind_of(c) != NodeKind::Leaf {
            return Err(Error::Invariant(format!("refining non-leaf {c}")));
        }
        if !self.virtuals.is_empty() {
            self.clear_virtuals();
        }
        let vals: Vec<[T; 3]> = kids.iter().map(|&k| self.value_or_predict(k, memo)).collect();
        for (k, v) in kids.iter().zip(vals) {
            let id = self.id(*k);
            self.kind[id] = NodeKind::Leaf;
            self.value[id] = v;
            memo.remove(id);
        }
        let id = self.id(c);
        self.kind[id] = NodeKind::Internal;
        self.plan = None;
        Ok(())
    }

    /// Refines each leaf below `L` whose parent is significant.
    pub fn add_safety_zone(&mut self) -> Result<usize> {
        let mut memo = Memo::new(self.kind.len());
        let targets: Vec<CellIndex> = self
            .leaf_ids()
            .into_iter()
            .map(|id| self.cell(id))
            .filter(|c| c.level < self.max_level() && c.level > 0 && self.significant[self.id(c.parent().unwrap())])
            .collect();
        for &c in &targets {
            self.refine_with(c, &mut memo)?;
        }
        Ok(targets.len())
    }

    /// The leaf covering `c`'s region when `c` is not a real node.
    fn covering_leaf(&self, c: CellIndex) -> Option<CellIndex> {
        let mut a = c;
        loop {
            match self.kind_of(a) {
                NodeKind::Leaf => return Some(a),
                NodeKind::Internal => return None,
                _ => a = a.parent().ok()?,
            }
        }
    }

    /// Refines coarse leaves until edge-adjacent leaves differ by at most one level.
    pub fn ensure_graded(&mut self) -> Result<usize> {
        let mut memo = Memo::new(self.kind.len());
        let mut count = 0;
        loop {
            let mut targets = Vec::new();
            for id in self.leaf_ids() {
                let c = self.cell(id);
                for dir in Direction::ALL {
                    let (di, dj) = dir.offset();
                    if let Some(n) = c.offset(di, dj) {
                        if let Some(cov) = self.covering_leaf(n) {
                            if cov.level + 1 < c.level {
                                targets.push(cov);
                            }
                        }
                    }
                }
            }
            targets.sort();
            targets.dedup();
            if targets.is_empty() {
                return Ok(count);
            }
            for c in targets {
                if self.kind_of(c) == NodeKind::Leaf {
                    self.refine_with(c, &mut memo)?;
                    count += 1;
                }
            }
        }
    }

    fn ensure_present(&mut self, c: CellIndex) {
        let id = self.id(c);
        if self.kind[id].is_present() {
            return;
        }
        let p = c.parent().expect("level 0 is always present");
        self.ensure_present(p);
        self.ensure_stencil(p);
        let entry = VirtualEntry { id, stencil: self.stencil_ids(p), child: c.child_slot() as u8 };
        self.value[id] = [0, 1, 2].map(|k| Self::predict_virtual(&self.weights, &self.value, &entry, k));
        self.kind[id] = NodeKind::Virtual;
        self.virtuals.push(entry);
    }

    fn ensure_stencil(&mut self, c: CellIndex) {
        for id in self.stencil_ids(c) {
            let cell = self.cell(id);
            self.ensure_present(cell);
        }
    }

    /// Creates the virtual cells needed by flux and prediction stencils:
    /// every leaf's cousins within two cells, and the parent-level 5×5
    /// neighbourhood of every internal or virtual parent.
    pub fn materialize_virtual_leaves(&mut self) {
        self.clear_virtuals();
        self.project_internal();
        for id in 0..self.kind.len() {
            if self.kind[id] == NodeKind::Internal {
                let c = self.cell(id);
                self.ensure_stencil(c);
            }
        }
        for id in self.leaf_ids() {
            let c = self.cell(id);
            let n = 1i64 << c.level;
            for (di, dj) in COUSIN_OFFSETS {
                let cousin = CellIndex {
                    level: c.level,
                    i: reflect(c.i as i64 + di, n) as u32,
                    j: reflect(c.j as i64 + dj, n) as u32,
                };
                self.ensure_present(cousin);
            }
        }
    }

    /// Full adaptation pass: details, coarsening, safety zone, grading, virtual cells.
    pub fn remesh(&mut self) -> Result<RemeshReport> {
        if !self.cfg.adapt {
            self.refresh();
            return Ok(RemeshReport::default());
        }
        self.project_internal();
        let significant = self.compute_details();
        if self.stable_under.as_ref() == Some(&significant) {
            self.refresh_virtuals();
            return Ok(RemeshReport::default());
        }
        let before = self.leaf_ids();
        let old_plan = self.plan.take();
        let coarsened = self.coarsen_by_threshold();
        let refined = self.add_safety_zone()? + self.ensure_graded()?;
        let after = self.leaf_ids();
        let structure_changed = before != after;
        self.materialize_virtual_leaves();
        if structure_changed {
            self.stable_under = None;
        } else {
            self.stable_under = Some(significant);
            self.plan = old_plan;
        }
        Ok(RemeshReport { coarsened, refined, structure_changed })
    }

    fn transmissibilities(&mut self, a: CellIndex, b: CellIndex) -> Result<(T, T)> {
        let key = (self.id(a), self.id(b));
        if let Some(t) = self.face_cache.get(&key) {
            return Ok(*t);
        }
        let t = (
            face_coefficient(a, b, Medium::Intra, &self.params)?.transmissibility(),
            face_coefficient(a, b, Medium::Extra, &self.params)?.transmissibility(),
        );
        self.face_cache.insert(key, t);
        Ok(t)
    }

    /// Builds (or returns the cached) stepping plan for the current structure.
    pub fn plan(&mut self) -> Result<&Plan<T>> {
        if self.plan.is_none() {
            let plan = self.build_plan()?;
            self.plan = Some(plan);
        }
        Ok(self.plan.as_ref().unwrap())
    }

    pub fn cached_plan(&self) -> Option<&Plan<T>> {
        self.plan.as_ref()
    }

    fn build_plan(&mut self) -> Result<Plan<T>> {
        let leaves = self.leaf_ids();
        let mut leaf_index = HashMap::with_capacity(leaves.len());
        for (k, &id) in leaves.iter().enumerate() {
            leaf_index.insert(id, k);
        }
        let leaf_cells: Vec<CellIndex> = leaves.iter().map(|&id| self.cell(id)).collect();
        let leaf_area = leaf_cells.iter().map(|c| c.geometry::<T>().area).collect();
        let mut faces = Vec::new();
        let mut elliptic_faces = Vec::new();
        for (k, &c) in leaf_cells.iter().enumerate() {
            for dir in Direction::ALL {
                let (di, dj) = dir.offset();
                let Some(n) = c.offset(di, dj) else { continue };
                let nid = self.id(n);
                match self.kind[nid] {
                    NodeKind::Leaf => {
                        if matches!(dir, Direction::PlusX | Direction::PlusY) {
                            let (t_i, t_e) = self.transmissibilities(c, n)?;
                            let other = leaf_index[&nid];
                            faces.push(FluxFace { fine: k, other, src_fine: leaves[k], src_other: nid, t_e, level: c.level });
                            elliptic_faces.push(EllipticFace { a: k, b: other, t_i, t_e });
                        }
                    }
                    NodeKind::Internal => {}
                    NodeKind::Virtual | NodeKind::Absent => {
                        if self.kind[nid] == NodeKind::Absent {
                            return Err(Error::Invariant(format!("cousin {n} of leaf {c} is missing")));
                        }
                        let coarse = n.parent()?;
                        let cid = self.id(coarse);
                        if self.kind[cid] != NodeKind::Leaf {
                            return Err(Error::Invariant(format!("leaf {c} is not graded against {coarse}")));
                        }
                        let other = leaf_index[&cid];
                        let (_, t_e_same) = self.transmissibilities(c, n)?;
                        faces.push(FluxFace {
                            fine: k,
                            other,
                            src_fine: leaves[k],
                            src_other: nid,
                            t_e: t_e_same,
                            level: c.level,
                        });
                        let (t_i, t_e) = self.transmissibilities(c, coarse)?;
                        elliptic_faces.push(EllipticFace { a: k, b: other, t_i, t_e });
                    }
                }
            }
        }
        let n = leaves.len();
        let mut triplets = Vec::with_capacity(4 * elliptic_faces.len() + n);
        for f in &elliptic_faces {
            let t = f.t_i + f.t_e;
            triplets.push((f.a, f.a, t));
            triplets.push((f.b, f.b, t));
            triplets.push((f.a, f.b, -t));
            triplets.push((f.b, f.a, -t));
        }
        for k in 0..n {
            triplets.push((k, k, T::zero()));
        }
        let matrix = CsrMatrix::from_triplets(n, triplets);
        let mut internal: Vec<usize> =
            (0..self.kind.len()).filter(|&id| self.kind[id] == NodeKind::Internal).collect();
        internal.sort_by_key(|&id| std::cmp::Reverse(self.cell(id).level));
        let min_leaf_level = leaf_cells.iter().map(|c| c.level).min().unwrap_or(0);
        let max_leaf_level = leaf_cells.iter().map(|c| c.level).max().unwrap_or(0);
        Ok(Plan {
            leaves,
            leaf_cells,
            leaf_area,
            faces,
            elliptic_faces,
            matrix,
            internal,
            virtuals: self.virtuals.clone(),
            min_leaf_level,
            max_leaf_level,
        })
    }

    /// Uniform-level values: finer leaves are projected, coarser ones predicted.
    pub fn decode_to_level(&self, level: u8) -> Vec<[T; 3]> {
        let mut tree = self.clone();
        tree.project_internal();
        let mut memo = Memo::new(tree.kind.len());
        crate::grid::level_cells(level).map(|c| tree.value_or_predict(c, &mut memo)).collect()
    }

    /// Structural checks: parents present, internal nodes complete, partition,
    /// grading, and (when virtual cells are materialized) complete stencils.
    pub fn check_invariants(&self) -> Result<()> {
        let max = self.max_level();
        for id in 0..self.kind.len() {
            let k = self.kind[id];
            if !k.is_present() {
                continue;
            }
            let c = self.cell(id);
            if c.level > 0 && !self.kind_of(c.parent()?).is_present() {
                return Err(Error::Invariant(format!("node {c} has no parent")));
            }
            match k {
                NodeKind::Internal => {
                    if c.level == max {
                        return Err(Error::Invariant(format!("internal node {c} on the finest level")));
                    }
                    for ch in c.children(max)? {
                        if !self.kind_of(ch).is_real() {
                            return Err(Error::Invariant(format!("internal node {c} misses child {ch}")));
                        }
                    }
                }
                NodeKind::Virtual => {
                    let pk = self.kind_of(c.parent()?);
                    if pk == NodeKind::Internal {
                        return Err(Error::Invariant(format!("virtual {c} under internal parent")));
                    }
                    if c.level < max && c.children(max)?.iter().any(|&ch| self.kind_of(ch).is_real()) {
                        return Err(Error::Invariant(format!("virtual {c} has real children")));
                    }
                }
                _ => {}
            }
        }
        let leaves = self.leaf_ids();
        if leaves.len() != self.leaf_count() {
            return Err(Error::Invariant("leaf unreachable from the root".into()));
        }
        let area: f64 = leaves.iter().map(|&id| self.cell(id).geometry::<f64>().area).sum();
        if (area - 1.0).abs() > 1e-12 {
            return Err(Error::Invariant(format!("leaf area sum {area}")));
        }
        for &id in &leaves {
            let c = self.cell(id);
            if self.cfg.adapt && c.level < self.cfg.min_level {
                return Err(Error::Invariant(format!("leaf {c} below the minimum level")));
            }
            for dir in Direction::ALL {
                let (di, dj) = dir.offset();
                let Some(n) = c.offset(di, dj) else { continue };
                match self.kind_of(n) {
                    NodeKind::Leaf => {}
                    NodeKind::Internal => {
                        let back = dir.opposite().offset();
                        for e in CHILD_OFFSETS {
                            let k = n.child(e);
                            let touches = k.offset(back.0, back.1).map_or(false, |m| c.contains(m));
                            if touches && self.kind_of(k) != NodeKind::Leaf {
                                return Err(Error::Invariant(format!("grading violated between {c} and {k}")));
                            }
                        }
                    }
                    _ => {
                        let cov = self.covering_leaf(n).ok_or_else(|| Error::Invariant(format!("{n} uncovered")))?;
                        if cov.level + 1 != c.level {
                            return Err(Error::Invariant(format!("grading violated between {c} and {cov}")));
                        }
                    }
                }
            }
            if !self.virtuals.is_empty() || self.plan.is_some() {
                let n = 1i64 << c.level;
                for (di, dj) in COUSIN_OFFSETS {
                    let cousin = CellIndex {
                        level: c.level,
                        i: reflect(c.i as i64 + di, n) as u32,
                        j: reflect(c.j as i64 + dj, n) as u32,
                    };
                    if !self.kind_of(cousin).is_present() {
                        return Err(Error::Invariant(format!("cousin {cousin} of leaf {c} missing")));
                    }
                }
            }
        }
        for e in &self.virtuals {
            if e.stencil.iter().any(|&s| !self.kind[s].is_present()) {
                return Err(Error::Invariant(format!("stencil of virtual {} incomplete", self.cell(e.id))));
            }
        }
        Ok(())
    }

    /// Overwrites every leaf value and re-derives internal and virtual values.
    pub fn set_leaf_values(&mut self, f: impl Fn(CellIndex) -> [T; 3]) {
        for id in self.leaf_ids() {
            self.value[id] = f(self.cell(id));
        }
        self.refresh();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cell_average, initial_cell_state, StimulusProtocol};
    use proptest::prelude::*;

    fn cfg(l: u8) -> TreeConfig<f64> {
        TreeConfig::new(l, 5e-4)
    }

    fn disc_tree(l: u8) -> MrTree<f64> {
        let stim = StimulusProtocol::<f64>::default();
        MrTree::build_initial(cfg(l), ModelParams::default(), |c| {
            let (v, w) = initial_cell_state(c, &stim);
            [v, 0.0, w]
        })
        .unwrap()
    }

    fn idx(l: u8, i: u32, j: u32) -> CellIndex {
        CellIndex::new(l, i, j).unwrap()
    }

    #[test]
    fn id_round_trip() {
        let t = MrTree::full(cfg(4), ModelParams::default(), |_| [0.0; 3]).unwrap();
        for id in 0..t.kind.len() {
            assert_eq!(t.id(t.cell(id)), id);
        }
    }

    #[test]
    fn flattened_details_match_recursive_prediction() {
        let mut t = disc_tree(6);
        t.project_internal();
        t.compute_details();
        let mut memo = Memo::new(t.kind.len());
        let mut checked = 0;
        for id in 0..t.kind.len() {
            if t.kind[id] != NodeKind::Internal {
                continue;
            }
            let c = t.cell(id);
            let ids = t.stencil_ids(c);
            let mut s = [[[0.0; 5]; 5]; 3];
            for k in 0..25 {
                let v = t.value_or_predict(t.cell(ids[k]), &mut memo);
                for comp in 0..3 {
                    s[comp][k / 5][k % 5] = v[comp];
                }
            }
            let kids = CHILD_OFFSETS.map(|e| t.value[t.id(c.child(e))]);
            let children = [0, 1, 2].map(|k| [kids[0][k], kids[1][k], kids[2][k], kids[3][k]]);
            assert_eq!(t.details[id], DetailSet::compute(&s.map(Stencil), &children, t.cfg.mr.gamma), "{c}");
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn constant_data_collapses_to_min_level() {
        let t = MrTree::build_initial(cfg(6), ModelParams::default(), |_| [3.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.leaf_count(), 16);
        assert!(t.leaves().iter().all(|(c, v)| c.level == 2 && v[0] == 3.0));
        t.check_invariants().unwrap();
    }

    #[test]
    fn disc_tree_is_a_graded_partition_refined_at_the_edge() {
        let l = 7;
        let t = disc_tree(l);
        t.check_invariants().unwrap();
        let h = 2f64.powi(-(l as i32));
        let finest: Vec<CellIndex> = t.leaves().into_iter().map(|(c, _)| c).filter(|c| c.level == l).collect();
        assert!(!finest.is_empty());
        for c in &finest {
            let g = c.geometry::<f64>();
            let r = ((g.center.0 - 0.5).powi(2) + (g.center.1 - 0.5).powi(2)).sqrt();
            // the 5×5 prediction stencil and the safety zone widen the band
            assert!((r - 0.05).abs() <= 16.0 * h, "{c} at r={r}");
        }
        let coarsest = t.leaves().iter().map(|(c, _)| c.level).min().unwrap();
        for (c, _) in t.leaves() {
            let g = c.geometry::<f64>();
            let r = ((g.center.0 - 0.5).powi(2) + (g.center.1 - 0.5).powi(2)).sqrt();
            if c.level == coarsest {
                assert!(r > 0.25);
            }
        }
        assert!(t.compression().eta > 5.0);
    }

    #[test]
    fn coarsening_is_idempotent_and_conservative() {
        let mut t = disc_tree(6);
        let mass = t.leaf_integral(0);
        t.compute_details();
        let first = t.coarsen_by_threshold();
        let mass1 = t.leaf_integral(0);
        assert!((mass1 - mass).abs() <= 1e-12 * mass.abs().max(1.0));
        t.compute_details();
        let leaves = t.leaf_ids();
        assert_eq!(t.coarsen_by_threshold(), 0, "first pass removed {first}");
        assert_eq!(leaves, t.leaf_ids());
    }

    #[test]
    fn significant_subtree_survives_and_distant_ones_collapse() {
        // one bump deep inside the lower-left quadrant
        let bump = idx(5, 6, 6);
        let mut t = MrTree::full(TreeConfig::new(5, 1e-2), ModelParams::default(), |c| {
            [if c == bump { 1.0 } else { 0.0 }, 0.0, 0.0]
        })
        .unwrap();
        t.remesh().unwrap();
        t.check_invariants().unwrap();
        assert_eq!(t.kind_of(bump), NodeKind::Leaf);
        assert!(t.is_significant(bump.parent().unwrap()));
        for (c, _) in t.leaves() {
            // coarse-level details still see the bump, so the safety zone keeps level 3 here
            if c.geometry::<f64>().center.0 > 0.5 && c.geometry::<f64>().center.1 > 0.5 {
                assert!(c.level <= 3, "{c}");
            }
        }
    }

    #[test]
    fn safety_zone_refines_children_of_significant_parents() {
        let mut t = MrTree::full(cfg(4), ModelParams::default(), |_| [0.0; 3]).unwrap();
        t.remesh().unwrap();
        assert_eq!(t.leaf_count(), 16);
        let p = idx(1, 0, 0);
        let pid = t.id(p);
        t.significant[pid] = true;
        t.clear_virtuals();
        let refined = t.add_safety_zone().unwrap();
        assert_eq!(refined, 4);
        for e in CHILD_OFFSETS {
            assert_eq!(t.kind_of(p.child(e)), NodeKind::Internal);
        }
        assert!(t.leaves().iter().all(|(c, _)| c.level <= 4));
    }

    #[test]
    fn grading_refines_the_coarse_side() {
        let mut t = MrTree::full(cfg(5), ModelParams::default(), |_| [0.0; 3]).unwrap();
        t.remesh().unwrap();
        let a = idx(2, 1, 1);
        t.refine_leaf(a).unwrap();
        let b = idx(3, 3, 3);
        t.refine_leaf(b).unwrap();
        let c = idx(4, 7, 7);
        t.refine_leaf(c).unwrap();
        // (4, 7, 7) now touches the level-2 leaf (2, 2, 1)
        let n = t.ensure_graded().unwrap();
        assert!(n > 0);
        t.materialize_virtual_leaves();
        t.check_invariants().unwrap();
    }

    #[test]
    fn boundary_leaves_get_reflected_cousins() {
        let mut t = MrTree::full(cfg(4), ModelParams::default(), |c| [c.i as f64, 0.0, 0.0]).unwrap();
        t.cfg.adapt = true;
        t.remesh().unwrap();
        t.check_invariants().unwrap();
        let corner = t.leaves()[0].0;
        assert_eq!((corner.i, corner.j), (0, 0));
        let n = 1i64 << corner.level;
        assert_eq!(reflect(-1, n), 0);
        assert!(t.kind_of(corner.offset_reflected(-2, 0)).is_present());
    }

    #[test]
    fn static_remesh_is_a_fixed_point() {
        let mut t = disc_tree(6);
        let leaves = t.leaves();
        for _ in 0..3 {
            let r = t.remesh().unwrap();
            assert!(!r.structure_changed);
            assert_eq!(t.leaves(), leaves);
        }
    }

    #[test]
    fn compression_examples() {
        let eta: f64 = compression_rate(65536, 9, 3316);
        assert!((eta - 19.39).abs() < 0.01, "{eta}");
        let full: f64 = compression_rate(1 << 18, 9, 1 << 18);
        assert!((full - 1.0 / (1.0 + 2f64.powi(-10))).abs() < 1e-15);
        let a: f64 = compression_rate(4096, 6, 100);
        let b: f64 = compression_rate(4096, 6, 200);
        assert!(a > b);
    }

    #[test]
    fn decode_reproduces_full_data_on_full_tree() {
        let t = MrTree::full(cfg(4), ModelParams::default(), |c| [c.i as f64 * 0.1 + c.j as f64, 1.0, 2.0]).unwrap();
        let d = t.decode_to_level(4);
        for (k, c) in crate::grid::level_cells(4).enumerate() {
            assert_eq!(d[k][0], c.i as f64 * 0.1 + c.j as f64);
        }
        let coarse = t.decode_to_level(2);
        assert_eq!(coarse.len(), 16);
    }

    #[test]
    fn from_leaves_round_trip_and_rejects_holes() {
        let t = disc_tree(5);
        let rows = t.leaves();
        let back = MrTree::from_leaves(cfg(5), ModelParams::default(), &rows).unwrap();
        assert_eq!(back.leaves(), rows);
        let mut missing = rows.clone();
        missing.pop();
        assert!(MrTree::from_leaves(cfg(5), ModelParams::default(), &missing).is_err());
    }

    #[test]
    fn front_tracking_follows_translated_profile() {
        let l = 6;
        let profile = |x0: f64| {
            move |c: CellIndex| {
                let v = cell_average(c, 4, |p: (f64, f64)| ((p.0 - x0) / 0.02).tanh());
                [v, 0.0, 1.0]
            }
        };
        let mut t = MrTree::build_initial(cfg(l), ModelParams::default(), profile(0.3)).unwrap();
        let centroid = |t: &MrTree<f64>| {
            let xs: Vec<f64> =
                t.leaves().iter().filter(|(c, _)| c.level == l).map(|(c, _)| c.geometry::<f64>().center.0).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!((centroid(&t) - 0.3).abs() < 0.05);
        for _ in 0..=l {
            t.set_leaf_values(profile(0.6));
            t.remesh().unwrap();
        }
        t.check_invariants().unwrap();
        assert!((centroid(&t) - 0.6).abs() < 0.05, "{}", centroid(&t));
    }

    #[test]
    fn plan_faces_are_consistent() {
        let mut t = disc_tree(6);
        let plan = t.plan().unwrap().clone();
        assert_eq!(plan.leaves.len(), t.leaf_count());
        assert_eq!(plan.matrix.asymmetry(), 0.0);
        let ones = vec![1.0; plan.leaves.len()];
        assert!(plan.matrix.matvec(&ones).iter().all(|x| x.abs() < 1e-9));
        // each leaf sees fluxes through all its interior edges
        let mut edges = vec![0usize; plan.leaves.len()];
        for f in &plan.faces {
            edges[f.fine] += 1;
        }
        for (k, c) in plan.leaf_cells.iter().enumerate() {
            let interior = Direction::ALL.iter().filter(|d| {
                let (di, dj) = d.offset();
                c.offset(di, dj).is_some()
            });
            // faces owned by k: same-level + and toward coarser; never more than its interior edges
            assert!(edges[k] <= interior.count());
        }
    }

    fn random_tree(l: u8, picks: &[(u8, u32, u32)]) -> MrTree<f64> {
        let mut t = MrTree::full(cfg(l), ModelParams::default(), |c| [c.i as f64, c.j as f64, 0.0]).unwrap();
        t.remesh().unwrap();
        for &(lev, i, j) in picks {
            let lev = lev % l;
            let n = 1u32 << lev;
            let c = CellIndex { level: lev, i: i % n, j: j % n };
            if t.kind_of(c) == NodeKind::Leaf {
                t.refine_leaf(c).unwrap();
            }
        }
        t.ensure_graded().unwrap();
        t.materialize_virtual_leaves();
        t
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn random_trees_keep_invariants(picks in proptest::collection::vec((0u8..6, 0u32..64, 0u32..64), 0..40)) {
            let mut t = random_tree(6, &picks);
            t.check_invariants().unwrap();
            t.plan().unwrap();
            let area: f64 = t.leaves().iter().map(|(c, _)| c.geometry::<f64>().area).sum();
            prop_assert!((area - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn coarsening_conserves_weighted_sums(picks in proptest::collection::vec((0u8..6, 0u32..64, 0u32..64), 0..30)) {
            let mut t = random_tree(6, &picks);
            let before = [0, 1, 2].map(|k| t.leaf_integral(k));
            t.compute_details();
            t.coarsen_by_threshold();
            for k in 0..3 {
                prop_assert!((t.leaf_integral(k) - before[k]).abs() <= 1e-12 * before[k].abs().max(1.0));
            }
        }
    }
}
