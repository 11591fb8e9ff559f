//! Dyadic cell hierarchy on the unit square.
//!
//! Level `l` partitions `[0,1]²` into `2^l × 2^l` squares
//! `V_(i,j),l = 2^-l [i, i+1] × [j, j+1]`. All adjacency is integer arithmetic.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest level representable with `u32` coordinates and still addressable by
/// the dense tree store.
pub const MAX_SUPPORTED_LEVEL: u8 = 14;

/// Address of a dyadic control volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub level: u8,
    pub i: u32,
    pub j: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGeometry<T> {
    pub center: (T, T),
    pub side: T,
    pub area: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    PlusX,
    MinusX,
    PlusY,
    MinusY,
}

impl Direction {
    pub const ALL: [Direction; 4] =
        [Direction::PlusX, Direction::MinusX, Direction::PlusY, Direction::MinusY];

    pub fn offset(self) -> (i64, i64) {
        match self {
            Direction::PlusX => (1, 0),
            Direction::MinusX => (-1, 0),
            Direction::PlusY => (0, 1),
            Direction::MinusY => (0, -1),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::PlusX => Direction::MinusX,
            Direction::MinusX => Direction::PlusX,
            Direction::PlusY => Direction::MinusY,
            Direction::MinusY => Direction::PlusY,
        }
    }

    /// Outward unit normal of the face in this direction.
    pub fn normal<T: Real>(self) -> (T, T) {
        let (dx, dy) = self.offset();
        (T::of(dx as f64), T::of(dy as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Neighbor {
    Cell(CellIndex),
    Boundary,
}

/// Child offsets `e ∈ {0,1}²` in storage order `(0,0), (1,0), (0,1), (1,1)`.
pub const CHILD_OFFSETS: [(u32, u32); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

impl CellIndex {
    pub fn new(level: u8, i: u32, j: u32) -> Result<Self> {
        if level > MAX_SUPPORTED_LEVEL || i >= (1u32 << level) || j >= (1u32 << level) {
            return Err(Error::IndexOutOfRange { level: level as i64, i: i as i64, j: j as i64 });
        }
        Ok(Self { level, i, j })
    }

    pub const fn root() -> Self {
        Self { level: 0, i: 0, j: 0 }
    }

    #[inline]
    pub fn cells_per_side(self) -> u32 {
        1u32 << self.level
    }

    pub fn geometry<T: Real>(self) -> CellGeometry<T> {
        let side = T::pow2(-(self.level as i32));
        let half = T::of(0.5);
        CellGeometry {
            center: ((T::of(self.i as f64) + half) * side, (T::of(self.j as f64) + half) * side),
            side,
            area: side * side,
        }
    }

    /// The four children `(l+1, 2i+e1, 2j+e2)`, in [`CHILD_OFFSETS`] order.
    pub fn children(self, max_level: u8) -> Result<[CellIndex; 4]> {
        if self.level >= max_level {
            return Err(Error::BeyondFinest { level: self.level, max_level });
        }
        Ok(CHILD_OFFSETS.map(|e| self.child(e)))
    }

    #[inline]
    pub fn child(self, (e1, e2): (u32, u32)) -> CellIndex {
        CellIndex { level: self.level + 1, i: 2 * self.i + e1, j: 2 * self.j + e2 }
    }

    /// Position of this cell among its siblings, as an index into [`CHILD_OFFSETS`].
    #[inline]
    pub fn child_slot(self) -> usize {
        ((self.i & 1) + 2 * (self.j & 1)) as usize
    }

    pub fn parent(self) -> Result<CellIndex> {
        if self.level == 0 {
            return Err(Error::NoParent);
        }
        Ok(CellIndex { level: self.level - 1, i: self.i / 2, j: self.j / 2 })
    }

    /// Ancestor on `level` (which must not exceed this cell's level).
    pub fn ancestor(self, level: u8) -> CellIndex {
        debug_assert!(level <= self.level);
        let shift = self.level - level;
        CellIndex { level, i: self.i >> shift, j: self.j >> shift }
    }

    pub fn neighbor(self, dir: Direction) -> Neighbor {
        let (di, dj) = dir.offset();
        match self.offset(di, dj) {
            Some(c) => Neighbor::Cell(c),
            None => Neighbor::Boundary,
        }
    }

    /// Same-level cell shifted by `(di, dj)`, or `None` outside the domain.
    pub fn offset(self, di: i64, dj: i64) -> Option<CellIndex> {
        let n = self.cells_per_side() as i64;
        let (i, j) = (self.i as i64 + di, self.j as i64 + dj);
        if (0..n).contains(&i) && (0..n).contains(&j) {
            Some(CellIndex { level: self.level, i: i as u32, j: j as u32 })
        } else {
            None
        }
    }

    /// Same-level cell shifted by `(di, dj)`, mirrored back across `∂Ω`.
    pub fn offset_reflected(self, di: i64, dj: i64) -> CellIndex {
        let n = self.cells_per_side() as i64;
        CellIndex {
            level: self.level,
            i: reflect(self.i as i64 + di, n) as u32,
            j: reflect(self.j as i64 + dj, n) as u32,
        }
    }

    /// Whether this cell contains (or equals) `other`.
    pub fn contains(self, other: CellIndex) -> bool {
        other.level >= self.level && other.ancestor(self.level) == self
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.level, self.i, self.j)
    }
}

/// Whole-cell mirror of index `k` into `0..n`: `-1 → 0`, `-2 → 1`, `n → n-1`.
pub fn reflect(k: i64, n: i64) -> i64 {
    let period = 2 * n;
    let m = k.rem_euclid(period);
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// All cells of a uniform level in row-major (`j` outer) order.
pub fn level_cells(level: u8) -> impl Iterator<Item = CellIndex> {
    let n = 1u32 << level;
    (0..n).flat_map(move |j| (0..n).map(move |i| CellIndex { level, i, j }))
}
