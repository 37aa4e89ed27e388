//! Credence × stakes decision-boundary grids.
//!
//! Rows index X (ascending), columns index the first theory's credence.
//!
//! # Grid file
//!
//! ```text
//! MUGRID 1\n
//! {"meta":{...},"credence_axis":[...],"x_axis":[...],"labels":[...]}\n
//! rows × cols label bytes, row-major, each a `Choice` code
//! ```
//!
//! `labels` lists the label name for each code so the file is readable
//! without this crate.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{run_episode, Choice, Controller, EnvError, Environment, X_MAX, X_MIN};
use crate::exec::Execution;
use crate::seeding;
use crate::theories::{CredenceVector, TheorySpec};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("grid dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("grid file: {0}")]
    Format(String),
    #[error("palette has no colour for {0}")]
    UnknownLabel(Choice),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GridMeta {
    pub algorithm: String,
    pub variant: String,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryGrid {
    pub credence_axis: Vec<f64>,
    pub x_axis: Vec<f64>,
    pub meta: GridMeta,
    cells: Vec<Choice>,
}

/// `n` evenly spaced points on `[a, b]`, endpoints included; the midpoint
/// when `n == 1`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![(a + b) / 2.0],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Standard axes: credence in [0, 1] and X in [1, 10].
pub fn default_axes(credence_cells: usize, x_cells: usize) -> (Vec<f64>, Vec<f64>) {
    (linspace(0.0, 1.0, credence_cells), linspace(X_MIN, X_MAX, x_cells))
}

impl BoundaryGrid {
    pub fn new(credence_axis: Vec<f64>, x_axis: Vec<f64>, meta: GridMeta) -> Self {
        let n = credence_axis.len() * x_axis.len();
        BoundaryGrid {
            credence_axis,
            x_axis,
            meta,
            cells: vec![Choice::Nothing; n],
        }
    }

    pub fn from_cells(
        credence_axis: Vec<f64>,
        x_axis: Vec<f64>,
        meta: GridMeta,
        cells: Vec<Choice>,
    ) -> Result<Self, SweepError> {
        if cells.len() != credence_axis.len() * x_axis.len() {
            return Err(SweepError::Format(format!(
                "{} cells for a {}×{} grid",
                cells.len(),
                x_axis.len(),
                credence_axis.len()
            )));
        }
        Ok(BoundaryGrid {
            credence_axis,
            x_axis,
            meta,
            cells,
        })
    }

    pub fn rows(&self) -> usize {
        self.x_axis.len()
    }

    pub fn cols(&self) -> usize {
        self.credence_axis.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn get(&self, row: usize, col: usize) -> Choice {
        self.cells[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, c: Choice) {
        let cols = self.cols();
        self.cells[row * cols + col] = c;
    }

    pub fn cells(&self) -> &[Choice] {
        &self.cells
    }

    pub fn count(&self, c: Choice) -> usize {
        self.cells.iter().filter(|&&v| v == c).count()
    }

    pub fn fraction(&self, c: Choice) -> f64 {
        self.count(c) as f64 / self.cells.len().max(1) as f64
    }

    /// Cells that break "once `c` is chosen at some X, it stays chosen for
    /// all larger X at the same credence", as a fraction of all cells.
    pub fn monotonicity_violations(&self, c: Choice) -> f64 {
        let mut bad = 0;
        for col in 0..self.cols() {
            if let Some(first) = (0..self.rows()).find(|&r| self.get(r, col) == c) {
                bad += (first..self.rows()).filter(|&r| self.get(r, col) != c).count();
            }
        }
        bad as f64 / self.cells.len().max(1) as f64
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), SweepError> {
        #[derive(Serialize)]
        struct Header<'a> {
            meta: &'a GridMeta,
            credence_axis: &'a [f64],
            x_axis: &'a [f64],
            labels: Vec<&'static str>,
        }
        let header = Header {
            meta: &self.meta,
            credence_axis: &self.credence_axis,
            x_axis: &self.x_axis,
            labels: Choice::ALL.iter().map(|c| c.label()).collect(),
        };
        w.write_all(b"MUGRID 1\n")?;
        serde_json::to_writer(&mut *w, &header).map_err(|e| SweepError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        let bytes: Vec<u8> = self.cells.iter().map(|c| c.code()).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self, SweepError> {
        #[derive(Deserialize)]
        struct Header {
            meta: GridMeta,
            credence_axis: Vec<f64>,
            x_axis: Vec<f64>,
        }
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line != "MUGRID 1\n" {
            return Err(SweepError::Format(format!("bad magic line {line:?}")));
        }
        line.clear();
        r.read_line(&mut line)?;
        let h: Header = serde_json::from_str(&line).map_err(|e| SweepError::Format(e.to_string()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let cells = bytes
            .iter()
            .map(|&b| Choice::from_code(b).ok_or_else(|| SweepError::Format(format!("bad label byte {b}"))))
            .collect::<Result<Vec<_>, _>>()?;
        BoundaryGrid::from_cells(h.credence_axis, h.x_axis, h.meta, cells)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        self.write_to(&mut b).expect("in-memory write");
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, SweepError> {
        BoundaryGrid::read_from(&mut io::Cursor::new(b))
    }

    pub fn save(&self, path: &Path) -> Result<(), SweepError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SweepError> {
        BoundaryGrid::from_bytes(&std::fs::read(path)?)
    }
}

/// Plays one deterministic episode per cell with `controller` and records
/// the first realised choice.
pub fn run_sweep<E, C>(
    env: &E,
    controller: &C,
    theories: &[TheorySpec],
    credence_axis: Vec<f64>,
    x_axis: Vec<f64>,
    meta: GridMeta,
    exec: Execution,
) -> Result<BoundaryGrid, SweepError>
where
    E: Environment,
    C: Controller<E>,
{
    let cols = credence_axis.len();
    let n = cols * x_axis.len();
    let seed = meta.seed;
    let cells = exec.map_indexed(n, |i| {
        let (row, col) = (i / cols, i % cols);
        let c = CredenceVector::pair(credence_axis[col]).map_err(EnvError::from)?;
        let rec = run_episode(
            env,
            controller,
            seeding::derive(seed, "sweep", i as u64),
            Some(x_axis[row]),
            &c,
            theories,
            None,
        )?;
        Ok::<_, SweepError>(rec.first_choice().unwrap_or(Choice::Nothing))
    });
    let cells = cells.into_iter().collect::<Result<Vec<_>, _>>()?;
    BoundaryGrid::from_cells(credence_axis, x_axis, meta, cells)
}

/// Steps at which snapshots fire: every `interval`, plus `total` itself if
/// the interval does not land on it.
pub fn snapshot_schedule(total: u64, interval: u64) -> Vec<u64> {
    if total == 0 {
        return Vec::new();
    }
    let interval = interval.clamp(1, total);
    let mut v: Vec<u64> = (1..=total / interval).map(|i| i * interval).collect();
    if v.last() != Some(&total) {
        v.push(total);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette(pub BTreeMap<Choice, [u8; 3]>);

impl Default for Palette {
    fn default() -> Self {
        Palette(BTreeMap::from([
            (Choice::Nothing, [68, 1, 84]),
            (Choice::Switch, [253, 231, 37]),
            (Choice::Push, [33, 145, 140]),
            (Choice::LieOnly, [230, 97, 1]),
            (Choice::Doomsday, [200, 0, 0]),
        ]))
    }
}

/// Binary PPM, one pixel per cell, highest X in the top row.
pub fn render_ppm(grid: &BoundaryGrid, palette: &Palette) -> Result<Vec<u8>, SweepError> {
    let mut out = format!("P6\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    for row in (0..grid.rows()).rev() {
        for col in 0..grid.cols() {
            let c = grid.get(row, col);
            out.extend_from_slice(palette.0.get(&c).ok_or(SweepError::UnknownLabel(c))?);
        }
    }
    Ok(out)
}

/// Legend lines `label r g b` for the labels present in `grid`.
pub fn legend(grid: &BoundaryGrid, palette: &Palette) -> Result<String, SweepError> {
    let mut s = String::new();
    for c in Choice::ALL {
        if grid.count(c) > 0 {
            let [r, g, b] = *palette.0.get(&c).ok_or(SweepError::UnknownLabel(c))?;
            s.push_str(&format!("{} {r} {g} {b}\n", c.label()));
        }
    }
    Ok(s)
}

/// Writes `<stem>.ppm` and `<stem>.legend.txt`.
pub fn render(grid: &BoundaryGrid, palette: &Palette, stem: &Path) -> Result<(), SweepError> {
    std::fs::write(stem.with_extension("ppm"), render_ppm(grid, palette)?)?;
    std::fs::write(stem.with_extension("legend.txt"), legend(grid, palette)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDiff {
    pub fraction: f64,
    pub changed: usize,
    /// Counts of `(label in a, label in b)` over differing cells.
    pub transitions: BTreeMap<(Choice, Choice), usize>,
}

impl GridDiff {
    pub fn count(&self, from: Choice, to: Choice) -> usize {
        self.transitions.get(&(from, to)).copied().unwrap_or(0)
    }
}

pub fn diff_grids(a: &BoundaryGrid, b: &BoundaryGrid) -> Result<GridDiff, SweepError> {
    if a.dims() != b.dims() {
        return Err(SweepError::DimensionMismatch(a.dims(), b.dims()));
    }
    let mut transitions = BTreeMap::new();
    let mut changed = 0;
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        if x != y {
            changed += 1;
            *transitions.entry((x, y)).or_insert(0) += 1;
        }
    }
    Ok(GridDiff {
        fraction: changed as f64 / a.cells.len().max(1) as f64,
        changed,
        transitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{bandit_of, ActionId, Problem, Scripted, Variant};

    fn tiny(cells: Vec<Choice>, rows: usize, cols: usize) -> BoundaryGrid {
        let (c, x) = default_axes(cols, rows);
        BoundaryGrid::from_cells(c, x, GridMeta::default(), cells).unwrap()
    }

    #[test]
    fn schedules() {
        assert_eq!(snapshot_schedule(10_000_000, 500_000).len(), 20);
        assert_eq!(snapshot_schedule(1_000_000, 500_000), vec![500_000, 1_000_000]);
        assert_eq!(snapshot_schedule(100_000, 10_000).len(), 10);
        assert_eq!(snapshot_schedule(25, 10), vec![10, 20, 25]);
    }

    #[test]
    fn linspace_endpoints() {
        let v = linspace(1.0, 10.0, 60);
        assert_eq!((v[0], v[59]), (1.0, 10.0));
        assert_eq!(linspace(0.0, 1.0, 1), vec![0.5]);
    }

    #[test]
    fn grid_file_round_trip() {
        let g = tiny(vec![Choice::Switch, Choice::Nothing, Choice::Push, Choice::Doomsday], 2, 2);
        let b = g.to_bytes();
        assert!(b.starts_with(b"MUGRID 1\n"));
        let back = BoundaryGrid::from_bytes(&b).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.get(1, 0), Choice::Push);
        let mut bad = b.clone();
        *bad.last_mut().unwrap() = 77;
        assert!(BoundaryGrid::from_bytes(&bad).is_err());
    }

    #[test]
    fn diffs() {
        let a = tiny(vec![Choice::Switch], 1, 1);
        let b = tiny(vec![Choice::Nothing], 1, 1);
        assert_eq!(diff_grids(&a, &a).unwrap().fraction, 0.0);
        let d = diff_grids(&a, &b).unwrap();
        assert_eq!(d.fraction, 1.0);
        assert_eq!(d.count(Choice::Switch, Choice::Nothing), 1);
        let c = tiny(vec![Choice::Nothing; 2], 1, 2);
        assert!(matches!(diff_grids(&a, &c), Err(SweepError::DimensionMismatch(..))));
    }

    #[test]
    fn uniform_render_is_one_colour() {
        let g = tiny(vec![Choice::Push; 6], 2, 3);
        let img = render_ppm(&g, &Palette::default()).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert!(img.starts_with(header));
        let px = &img[header.len()..];
        assert_eq!(px.len(), 18);
        assert!(px.chunks(3).all(|p| p == [33, 145, 140]));
        assert_eq!(legend(&g, &Palette::default()).unwrap(), "push 33 145 140\n");
    }

    #[test]
    fn render_puts_high_x_on_top() {
        let g = tiny(vec![Choice::Nothing, Choice::Switch], 2, 1);
        let img = render_ppm(&g, &Palette::default()).unwrap();
        let px = &img[b"P6\n1 2\n255\n".len()..];
        assert_eq!(&px[..3], &[253, 231, 37]);
    }

    #[test]
    fn render_rejects_missing_colour() {
        let g = tiny(vec![Choice::LieOnly], 1, 1);
        let mut p = Palette::default();
        p.0.remove(&Choice::LieOnly);
        assert!(matches!(render_ppm(&g, &p), Err(SweepError::UnknownLabel(Choice::LieOnly))));
    }

    #[test]
    fn monotonicity_counts_reversions() {
        use Choice::*;
        // Column 0: nothing, switch, nothing (one violation). Column 1: fine.
        let g = tiny(vec![Nothing, Nothing, Switch, Nothing, Nothing, Switch], 3, 2);
        assert!((g.monotonicity_violations(Switch) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn scripted_sweep_fills_every_cell() {
        let env = bandit_of(Variant::single(Problem::Classic));
        let theories = Problem::Classic.table().all_theories();
        let (c, x) = default_axes(1, 1);
        let g = run_sweep(&env, &Scripted(vec![ActionId(1)]), &theories, c, x, GridMeta::default(), Execution::Sequential)
            .unwrap();
        assert_eq!(g.cells(), &[Choice::Switch]);
        let (c, x) = default_axes(7, 5);
        let a = run_sweep(&env, &Scripted(vec![]), &theories, c.clone(), x.clone(), GridMeta::default(), Execution::Parallel)
            .unwrap();
        let b = run_sweep(&env, &Scripted(vec![]), &theories, c, x, GridMeta::default(), Execution::Sequential)
            .unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.count(Choice::Nothing), 35);
    }
}
