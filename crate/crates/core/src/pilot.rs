//! Least-squares channel estimates at pilot REs and their bilinear
//! interpolation to the full grid. This is both the baseline estimator and
//! the input prior for the network.

use num_complex::Complex64;

use crate::error::{ensure, Error, Result};
use crate::ofdm::{OfdmConfig, PilotConfig};
use crate::signal::ComplexGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEstimate {
    /// `(subcarrier, symbol, estimate)`.
    pub entries: Vec<(usize, usize, Complex64)>,
}

/// `H[k, m] = RX[k, m] / pilot[k, m]` at every pilot RE.
pub fn ls_estimate_at_pilots(rx: &ComplexGrid, pilots: &PilotConfig) -> Result<SparseEstimate> {
    let entries = pilots
        .entries()
        .map(|(k, m, p)| {
            ensure!(
                k < rx.rows() && m < rx.cols(),
                ShapeMismatch,
                "pilot ({k}, {m}) outside {}x{} grid",
                rx.rows(),
                rx.cols()
            );
            if p.norm_sqr() == 0.0 {
                return Err(Error::DivisionByZero { subcarrier: k, symbol: m });
            }
            Ok((k, m, rx.get(k, m) / p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SparseEstimate { entries })
}

/// Linear interpolation of `points` (sorted by position) at `x`, holding the
/// end values outside the sampled range.
fn interp_clamped(points: &[(f64, Complex64)], x: f64) -> Complex64 {
    let (first, last) = (points[0], points[points.len() - 1]);
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let hi = points.partition_point(|p| p.0 <= x);
    let (x0, y0) = points[hi - 1];
    let (x1, y1) = points[hi];
    if x == x0 {
        return y0;
    }
    let t = (x - x0) / (x1 - x0);
    y0 + (y1 - y0) * t
}

/// Fills the grid from pilot estimates: linear in frequency along each
/// pilot symbol, then linear in time between pilot symbols. Beyond the
/// outermost pilots the nearest edge value is held.
pub fn interpolate_grid(sparse: &SparseEstimate, cfg: &OfdmConfig) -> Result<ComplexGrid> {
    ensure!(!sparse.entries.is_empty(), InvalidParameter, "empty sparse estimate");
    let mut symbols: Vec<usize> = sparse.entries.iter().map(|e| e.1).collect();
    symbols.sort_unstable();
    symbols.dedup();
    ensure!(symbols.len() >= 2, InvalidParameter, "need pilots on at least 2 symbols, found {}", symbols.len());
    ensure!(
        sparse.entries.iter().all(|&(k, m, _)| k < cfg.num_subcarriers && m < cfg.symbols_per_slot),
        ShapeMismatch,
        "sparse entry outside the {}x{} grid",
        cfg.num_subcarriers,
        cfg.symbols_per_slot
    );

    // Frequency pass: one full column per pilot symbol.
    let columns: Vec<(f64, Vec<Complex64>)> = symbols
        .iter()
        .map(|&m| {
            let mut pts: Vec<(f64, Complex64)> =
                sparse.entries.iter().filter(|e| e.1 == m).map(|&(k, _, v)| (k as f64, v)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let col = (0..cfg.num_subcarriers).map(|k| interp_clamped(&pts, k as f64)).collect();
            (m as f64, col)
        })
        .collect();

    // Time pass.
    let mut grid = ComplexGrid::zeros(cfg.num_subcarriers, cfg.symbols_per_slot);
    let mut pts: Vec<(f64, Complex64)> = Vec::with_capacity(columns.len());
    for k in 0..cfg.num_subcarriers {
        pts.clear();
        pts.extend(columns.iter().map(|(m, col)| (*m, col[k])));
        for m in 0..cfg.symbols_per_slot {
            grid.set(k, m, interp_clamped(&pts, m as f64));
        }
    }
    Ok(grid)
}
