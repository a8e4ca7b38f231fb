//! Random-uniform heightfield terrain.
//!
//! The field covers `size_x × size_y` meters centered on the environment
//! origin and is sampled at cell centers, `horizontal_scale` apart. Heights
//! are stored as integer multiples of `vertical_scale`.
//!
//! Generation divides the grid into a 2×2 layout of segments. Each segment
//! draws one sub-terrain index by proportion, then every cell draws a height
//! uniformly from its sub-terrain lattice `{noise_min, noise_min + step, ...}`
//! (values `<= noise_max`). Cells within `border_width` of an internal
//! segment edge are blended toward the neighboring segment's edge cell and
//! snapped back onto their own lattice.
//!
//! Random draw order for a given seed (stream 0 of [`StreamRng`]):
//! four `uniform()` draws for the segments in row-major order, then one
//! `below(lattice_len)` per cell in row-major order.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamRng;

const TERRAIN_STREAM: u64 = 0;
const LATTICE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TerrainError {
    #[error("invalid terrain config: {0}")]
    Config(String),
    #[error("degenerate grid {cols}x{rows}: at least 2 cells per axis are required")]
    DegenerateGrid { cols: usize, rows: usize },
    #[error("query ({x:.4}, {y:.4}) outside terrain extent [{x_min:.4}, {x_max:.4}] x [{y_min:.4}, {y_max:.4}]")]
    OutOfExtent {
        x: f64,
        y: f64,
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubTerrainConfig {
    pub proportion: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    pub noise_step: f64,
    pub border_width: f64,
}

impl SubTerrainConfig {
    /// Number of lattice values in `[noise_min, noise_max]`.
    pub fn lattice_len(&self) -> usize {
        ((self.noise_max - self.noise_min) / self.noise_step + LATTICE_EPS).floor() as usize + 1
    }

    fn lattice_value(&self, k: usize) -> f64 {
        self.noise_min + k as f64 * self.noise_step
    }

    /// Nearest lattice point to `h`, clamped to the lattice range.
    fn snap(&self, h: f64) -> f64 {
        let k = ((h - self.noise_min) / self.noise_step).round();
        let k = k.clamp(0.0, (self.lattice_len() - 1) as f64) as usize;
        self.lattice_value(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainConfig {
    pub vertical_scale: f64,
    pub horizontal_scale: f64,
    pub slope_threshold: f64,
    pub size_x: f64,
    pub size_y: f64,
    pub sub_terrains: Vec<SubTerrainConfig>,
    pub seed: u64,
}

impl Default for TerrainConfig {
    /// Baseline generator values with the two rough-soil sub-terrains.
    fn default() -> Self {
        Self {
            vertical_scale: 0.005,
            horizontal_scale: 0.1,
            slope_threshold: 0.75,
            size_x: 15.0,
            size_y: 15.0,
            sub_terrains: vec![
                SubTerrainConfig {
                    proportion: 0.5,
                    noise_min: 0.03,
                    noise_max: 0.07,
                    noise_step: 0.01,
                    border_width: 0.01,
                },
                SubTerrainConfig {
                    proportion: 0.5,
                    noise_min: 0.03,
                    noise_max: 0.07,
                    noise_step: 0.25,
                    border_width: 0.25,
                },
            ],
            seed: 0,
        }
    }
}

impl TerrainConfig {
    /// A single zero-height sub-terrain: a perfectly flat floor.
    pub fn flat(size: f64) -> Self {
        Self {
            size_x: size,
            size_y: size,
            sub_terrains: vec![SubTerrainConfig {
                proportion: 1.0,
                noise_min: 0.0,
                noise_max: 0.0,
                noise_step: 0.01,
                border_width: 0.0,
            }],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TerrainError> {
        let bad = |msg: String| Err(TerrainError::Config(msg));
        if !(self.vertical_scale > 0.0) {
            return bad(format!("vertical_scale must be > 0, got {}", self.vertical_scale));
        }
        if !(self.horizontal_scale > 0.0) {
            return bad(format!("horizontal_scale must be > 0, got {}", self.horizontal_scale));
        }
        if !(self.slope_threshold > 0.0) {
            return bad(format!("slope_threshold must be > 0, got {}", self.slope_threshold));
        }
        if !(self.size_x > 0.0 && self.size_y > 0.0) {
            return bad(format!("size must be > 0, got {}x{}", self.size_x, self.size_y));
        }
        if self.sub_terrains.is_empty() {
            return bad("at least one sub-terrain is required".into());
        }
        let total: f64 = self.sub_terrains.iter().map(|s| s.proportion).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("sub-terrain proportions sum to {total}, expected 1.0"));
        }
        for (i, s) in self.sub_terrains.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.proportion) {
                return bad(format!("sub_terrains[{i}].proportion {} outside [0, 1]", s.proportion));
            }
            if !(0.0 <= s.noise_min && s.noise_min <= s.noise_max) {
                return bad(format!(
                    "sub_terrains[{i}] needs 0 <= noise_min <= noise_max, got [{}, {}]",
                    s.noise_min, s.noise_max
                ));
            }
            if !(s.noise_step > 0.0) {
                return bad(format!("sub_terrains[{i}].noise_step must be > 0"));
            }
            if !(s.border_width >= 0.0) {
                return bad(format!("sub_terrains[{i}].border_width must be >= 0"));
            }
            // Lattice values must be representable in integer height units.
            for (name, v) in [("noise_min", s.noise_min), ("noise_step", s.noise_step)] {
                let units = v / self.vertical_scale;
                if (units - units.round()).abs() > 1e-6 {
                    return bad(format!(
                        "sub_terrains[{i}].{name} = {v} is not a multiple of vertical_scale {}",
                        self.vertical_scale
                    ));
                }
            }
        }
        Ok(())
    }

    fn grid_dims(&self) -> (usize, usize) {
        let cols = (self.size_x / self.horizontal_scale).round() as usize;
        let rows = (self.size_y / self.horizontal_scale).round() as usize;
        (cols, rows)
    }
}

/// Regular grid of terrain heights, row-major (`rows` along y, `cols` along x).
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    cols: usize,
    rows: usize,
    cell_size: f64,
    vertical_scale: f64,
    /// Planar coordinates of the center of cell (0, 0).
    origin: (f64, f64),
    units: Vec<i32>,
}

impl Heightfield {
    /// Builds a field from metric heights, quantizing each to `vertical_scale`.
    pub fn from_heights(
        cols: usize,
        rows: usize,
        cell_size: f64,
        vertical_scale: f64,
        origin: (f64, f64),
        heights: &[f64],
    ) -> Result<Self, TerrainError> {
        if cols < 2 || rows < 2 {
            return Err(TerrainError::DegenerateGrid { cols, rows });
        }
        if heights.len() != cols * rows {
            return Err(TerrainError::Config(format!(
                "expected {} heights, got {}",
                cols * rows,
                heights.len()
            )));
        }
        let units = heights
            .iter()
            .map(|h| (h / vertical_scale).round() as i32)
            .collect();
        Ok(Self {
            cols,
            rows,
            cell_size,
            vertical_scale,
            origin,
            units,
        })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    /// Height of cell `(row, col)` in meters.
    pub fn height(&self, row: usize, col: usize) -> f64 {
        self.units[row * self.cols + col] as f64 * self.vertical_scale
    }

    /// All heights in meters, row-major.
    pub fn heights(&self) -> Vec<f64> {
        self.units
            .iter()
            .map(|&u| u as f64 * self.vertical_scale)
            .collect()
    }

    /// Planar position of the sample at `(row, col)`.
    pub fn node_position(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + col as f64 * self.cell_size,
            self.origin.1 + row as f64 * self.cell_size,
        )
    }

    /// Queryable planar extent `(x_min, x_max, y_min, y_max)`: the full area
    /// covered by the cells, half a cell beyond the outermost samples.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let half = 0.5 * self.cell_size;
        (
            self.origin.0 - half,
            self.origin.0 + (self.cols - 1) as f64 * self.cell_size + half,
            self.origin.1 - half,
            self.origin.1 + (self.rows - 1) as f64 * self.cell_size + half,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x_min, x_max, y_min, y_max) = self.extent();
        (x_min..=x_max).contains(&x) && (y_min..=y_max).contains(&y)
    }

    /// Bilinear height at `(x, y)`. The outer half-cell band extends the
    /// edge samples.
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64, TerrainError> {
        if !self.contains(x, y) {
            let (x_min, x_max, y_min, y_max) = self.extent();
            return Err(TerrainError::OutOfExtent {
                x,
                y,
                x_min,
                x_max,
                y_min,
                y_max,
            });
        }
        let (col, tx) = Self::locate(x - self.origin.0, self.cell_size, self.cols);
        let (row, ty) = Self::locate(y - self.origin.1, self.cell_size, self.rows);
        let h00 = self.height(row, col);
        let h01 = self.height(row, col + 1);
        let h10 = self.height(row + 1, col);
        let h11 = self.height(row + 1, col + 1);
        let bottom = h00 + (h01 - h00) * tx;
        let top = h10 + (h11 - h10) * tx;
        Ok(bottom + (top - bottom) * ty)
    }

    fn locate(offset: f64, cell: f64, n: usize) -> (usize, f64) {
        let f = (offset / cell).clamp(0.0, (n - 1) as f64);
        let i = (f.floor() as usize).min(n - 2);
        (i, f - i as f64)
    }

    /// Writes the grid as CSV: a `x_cells,y_cells,cell_size` header line, a
    /// line with those values, then one line per grid row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x_cells,y_cells,cell_size")?;
        writeln!(w, "{},{},{}", self.cols, self.rows, self.cell_size)?;
        for row in 0..self.rows {
            let line: Vec<String> = (0..self.cols)
                .map(|col| format!("{}", self.height(row, col)))
                .collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Writes an 8-bit binary portable graymap (P5), min height black.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> io::Result<()> {
        let lo = *self.units.iter().min().expect("non-empty field");
        let hi = *self.units.iter().max().expect("non-empty field");
        let span = (hi - lo).max(1) as f64;
        write!(w, "P5\n{} {}\n255\n", self.cols, self.rows)?;
        let pixels: Vec<u8> = self
            .units
            .iter()
            .map(|&u| (((u - lo) as f64 / span) * 255.0).round() as u8)
            .collect();
        w.write_all(&pixels)
    }
}

/// Generates the heightfield for `cfg`. Deterministic in `cfg.seed`.
pub fn generate_heightfield(cfg: &TerrainConfig) -> Result<Heightfield, TerrainError> {
    cfg.validate()?;
    let (cols, rows) = cfg.grid_dims();
    if cols < 2 || rows < 2 {
        return Err(TerrainError::DegenerateGrid { cols, rows });
    }
    let mut rng = StreamRng::new(cfg.seed, TERRAIN_STREAM);

    let mut segment_sub = [0usize; 4];
    for slot in segment_sub.iter_mut() {
        *slot = pick_by_proportion(&cfg.sub_terrains, rng.uniform());
    }
    let mid_col = cols / 2;
    let mid_row = rows / 2;
    let sub_of = |row: usize, col: usize| -> &SubTerrainConfig {
        let seg = usize::from(row >= mid_row) * 2 + usize::from(col >= mid_col);
        &cfg.sub_terrains[segment_sub[seg]]
    };

    let mut raw = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            let sub = sub_of(row, col);
            let k = rng.below(sub.lattice_len() as u64) as usize;
            raw.push(sub.lattice_value(k));
        }
    }

    let cell = cfg.horizontal_scale;
    let mut heights = Vec::with_capacity(raw.len());
    for row in 0..rows {
        for col in 0..cols {
            let sub = sub_of(row, col);
            let mut h = raw[row * cols + col];
            if sub.border_width > 0.0 {
                let dx = ((col as f64 + 0.5) - mid_col as f64).abs() * cell;
                if dx < sub.border_width {
                    let across = if col < mid_col { mid_col } else { mid_col - 1 };
                    let w = 0.5 * (1.0 - dx / sub.border_width);
                    h += w * (raw[row * cols + across] - h);
                }
                let dy = ((row as f64 + 0.5) - mid_row as f64).abs() * cell;
                if dy < sub.border_width {
                    let across = if row < mid_row { mid_row } else { mid_row - 1 };
                    let w = 0.5 * (1.0 - dy / sub.border_width);
                    h += w * (raw[across * cols + col] - h);
                }
                h = sub.snap(h);
            }
            heights.push(h);
        }
    }

    let origin = (
        -0.5 * cfg.size_x + 0.5 * cell,
        -0.5 * cfg.size_y + 0.5 * cell,
    );
    Heightfield::from_heights(cols, rows, cell, cfg.vertical_scale, origin, &heights)
}

fn pick_by_proportion(subs: &[SubTerrainConfig], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, s) in subs.iter().enumerate() {
        acc += s.proportion;
        if u < acc {
            return i;
        }
    }
    subs.len() - 1
}

/// Limits every adjacent-cell height difference to `threshold × cell_size`
/// by repeatedly lowering the higher cell of each violating pair until no
/// pair violates. Already-compliant fields come back unchanged.
pub fn clamp_slopes(hf: &Heightfield, threshold: f64) -> Heightfield {
    let limit = (threshold * hf.cell_size / hf.vertical_scale + 1e-9).floor() as i32;
    let mut out = hf.clone();
    let (cols, rows) = (hf.cols, hf.rows);
    let u = &mut out.units;
    loop {
        let mut changed = false;
        for row in 0..rows {
            for col in 0..cols {
                let i = row * cols + col;
                let mut neighbors = [None, None];
                if col + 1 < cols {
                    neighbors[0] = Some(i + 1);
                }
                if row + 1 < rows {
                    neighbors[1] = Some(i + cols);
                }
                for j in neighbors.into_iter().flatten() {
                    if u[i] - u[j] > limit {
                        u[i] = u[j] + limit;
                        changed = true;
                    } else if u[j] - u[i] > limit {
                        u[j] = u[i] + limit;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    out
}
