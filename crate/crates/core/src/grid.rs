//! Grid geometry: shapes, positions and orders over grid cells.

use crate::error::{Error, Result};
use crate::rng::SeededStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Parameter(format!("grid {rows}x{cols} must be at least 1x1")));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Larger side; the distance normalizer in location selection.
    pub fn max_side(&self) -> usize {
        self.rows.max(self.cols)
    }

    pub fn position(&self, linear: usize) -> Result<Position> {
        if linear >= self.len() {
            return Err(Error::Index {
                context: "grid position",
                index: linear,
                bound: self.len(),
            });
        }
        Ok(Position {
            row: linear / self.cols,
            col: linear % self.cols,
        })
    }

    pub fn linear(&self, p: Position) -> Result<usize> {
        self.check(p)?;
        Ok(p.row * self.cols + p.col)
    }

    pub fn check(&self, p: Position) -> Result<()> {
        if p.row >= self.rows || p.col >= self.cols {
            return Err(Error::Position {
                row: p.row as isize,
                col: p.col as isize,
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Position {
    pub row: usize,
    pub col: usize,
}

impl Position {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Chebyshev distance between two cells.
pub fn linf_distance(a: Position, b: Position) -> usize {
    a.row.abs_diff(b.row).max(a.col.abs_diff(b.col))
}

/// A permutation of the linear cell indices `0..N`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Order(Vec<usize>);

impl Order {
    /// Validates that `cells` is a permutation of `0..n`.
    pub fn new(cells: Vec<usize>, n: usize) -> Result<Self> {
        if cells.len() != n {
            return Err(Error::Order(format!("length {} does not match {n} cells", cells.len())));
        }
        let mut seen = vec![false; n];
        for &c in &cells {
            if c >= n {
                return Err(Error::Order(format!("cell {c} outside 0..{n}")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Order(format!("cell {c} repeated")));
            }
        }
        Ok(Self(cells))
    }

    pub fn raster(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_raster(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &c)| i == c)
    }

    /// `rank[cell]` = step at which `cell` is generated.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.0.len()];
        for (i, &c) in self.0.iter().enumerate() {
            r[c] = i;
        }
        r
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

/// Unbiased uniform permutation of `0..n` (Fisher–Yates).
pub fn sample_uniform_order(n: usize, stream: &mut SeededStream) -> Order {
    let mut cells: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = stream.below(i + 1);
        cells.swap(i, j);
    }
    Order(cells)
}

/// Mean Chebyshev distance between consecutive cells of `order`.
pub fn average_order_distance(order: &Order, grid: GridShape) -> Result<f64> {
    let cells = order.as_slice();
    if cells.len() < 2 {
        return Err(Error::Parameter("average distance needs at least two cells".into()));
    }
    let mut total = 0usize;
    for w in cells.windows(2) {
        total += linf_distance(grid.position(w[0])?, grid.position(w[1])?);
    }
    Ok(total as f64 / (cells.len() - 1) as f64)
}
