//! Snapshot files: `# t=<time> L=<L> mode=<mode>` followed by one
//! `l,i,j,x_center,y_center,side,v,u_e,w` row per leaf in depth-first order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::CellIndex;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub max_level: u8,
    pub mode: String,
    pub rows: Vec<(CellIndex, [f64; 3])>,
}

/// Position of `c` in a depth-first traversal with children in
/// `(0,0),(1,0),(0,1),(1,1)` order.
pub fn dfs_key(c: CellIndex, max_level: u8) -> u64 {
    let shift = max_level - c.level;
    let (i, j) = ((c.i as u64) << shift, (c.j as u64) << shift);
    let mut key = 0u64;
    for b in 0..max_level as u32 {
        key |= ((i >> b) & 1) << (2 * b);
        key |= ((j >> b) & 1) << (2 * b + 1);
    }
    key
}

impl Snapshot {
    /// Builds a snapshot with rows sorted depth-first.
    pub fn new(time: f64, max_level: u8, mode: &str, mut rows: Vec<(CellIndex, [f64; 3])>) -> Self {
        rows.sort_by_key(|&(c, _)| dfs_key(c, max_level));
        Self { time, max_level, mode: mode.to_string(), rows }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 2));
        let _ = writeln!(s, "# t={} L={} mode={}", self.time, self.max_level, self.mode);
        for &(c, [v, ue, w]) in &self.rows {
            let g = c.geometry::<f64>();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.level, c.i, c.j, g.center.0, g.center.1, g.side, v, ue, w
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Harness("empty snapshot".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::Harness(format!("snapshot header must start with '#': {header:?}")))?;
        let (mut time, mut level, mut mode) = (None, None, None);
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("t", v)) => time = v.parse::<f64>().ok(),
                Some(("L", v)) => level = v.parse::<u8>().ok(),
                Some(("mode", v)) => mode = Some(v.to_string()),
                _ => {}
            }
        }
        let (time, max_level, mode) = match (time, level, mode) {
            (Some(t), Some(l), Some(m)) => (t, l, m),
            _ => return Err(Error::Harness(format!("malformed snapshot header {header:?}"))),
        };
        let mut rows = Vec::new();
        for (n, line) in lines {
            let bad = |what: &str| Error::Harness(format!("snapshot line {}: {what}", n + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(&format!("expected 9 fields, found {}", f.len())));
            }
            let l: u8 = f[0].trim().parse().map_err(|_| bad("bad level"))?;
            let i: u32 = f[1].trim().parse().map_err(|_| bad("bad i"))?;
            let j: u32 = f[2].trim().parse().map_err(|_| bad("bad j"))?;
            let c = CellIndex::new(l, i, j).map_err(|e| bad(&e.to_string()))?;
            if l > max_level {
                return Err(bad("leaf finer than L"));
            }
            let mut val = [0.0; 3];
            for (k, s) in f[6..].iter().enumerate() {
                val[k] = s.trim().parse().map_err(|_| bad("bad value"))?;
            }
            rows.push((c, val));
        }
        Ok(Self { time, max_level, mode, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

pub fn snapshot_file_name(index: usize) -> String {
    format!("snapshot_{index:03}.csv")
}

/// Snapshot files of a run directory, in index order.
pub fn list_snapshots(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut files: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("snapshot_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}
