//! Metrics, held-out evaluation and the CSV/SVG artifacts.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::DatasetExample;
use crate::error::{ensure, Result};
use crate::fsutil::write_atomic;
use crate::model::ChannelEstimator;
use crate::retrain::IterationRecord;
use crate::seed;
use crate::signal::ComplexGrid;
use crate::uncertainty::{mc_predict, summarize, McConfig};

pub const EVAL_CSV: &str = "eval.csv";
pub const ITERATIONS_CSV: &str = "iterations.csv";
pub const SCATTER_SVG: &str = "uncertainty_vs_error.svg";
pub const ITERATIONS_SVG: &str = "mse_per_iteration.svg";

/// Mean of `|a - b|^2` over all entries.
pub fn mse(a: &ComplexGrid, b: &ComplexGrid) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>() / n)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    ensure!(x.len() == y.len(), ShapeMismatch, "{} vs {} values", x.len(), y.len());
    ensure!(x.len() >= 2, InvalidParameter, "need at least two pairs, got {}", x.len());
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    ensure!(sxx > 0.0 && syy > 0.0, DegenerateInput, "correlation of a constant sequence");
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub example: usize,
    pub baseline_mse: f64,
    pub nn_mse: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub rows: Vec<EvalRow>,
    pub mean_baseline_mse: f64,
    pub mean_nn_mse: f64,
    /// Pearson r between uncertainty and NN squared error; `None` when
    /// either column is constant.
    pub uncertainty_error_r: Option<f64>,
    pub mc: McConfig,
    /// False when `T = 1` and the uncertainty column is a placeholder zero.
    pub uncertainty_defined: bool,
}

impl EvalResult {
    /// Relative reduction of the mean MSE against the baseline.
    pub fn improvement(&self) -> f64 {
        1.0 - self.mean_nn_mse / self.mean_baseline_mse
    }
}

/// Scores every example: baseline MSE of the interpolated input, MSE of the
/// dropout-off prediction, and MC-dropout entropy. Example `j` draws its MC
/// passes from `derive(mc.base_seed, j)`.
pub fn evaluate(est: &ChannelEstimator, test_set: &[DatasetExample], mc: &McConfig) -> Result<EvalResult> {
    ensure!(!test_set.is_empty(), InvalidParameter, "empty test set");
    mc.validate()?;
    let uncertainty_defined = mc.num_passes >= 2;
    let rows = test_set
        .par_iter()
        .enumerate()
        .map(|(j, ex)| {
            let baseline_mse = mse(&ex.input, &ex.target)?;
            let nn_mse = mse(&est.predict(&ex.input)?, &ex.target)?;
            let uncertainty = if uncertainty_defined {
                let cfg = McConfig { base_seed: seed::derive(mc.base_seed, j as u64), ..mc.clone() };
                summarize(&mc_predict(&est.net, &est.encode(&ex.input)?, &cfg)?, mc.alpha)?.scalar_entropy
            } else {
                0.0
            };
            Ok(EvalRow { example: j, baseline_mse, nn_mse, uncertainty })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean_baseline_mse = rows.iter().map(|r| r.baseline_mse).sum::<f64>() / n;
    let mean_nn_mse = rows.iter().map(|r| r.nn_mse).sum::<f64>() / n;
    let u: Vec<f64> = rows.iter().map(|r| r.uncertainty).collect();
    let e: Vec<f64> = rows.iter().map(|r| r.nn_mse).collect();
    let uncertainty_error_r = if uncertainty_defined { pearson(&u, &e).ok() } else { None };
    Ok(EvalResult { rows, mean_baseline_mse, mean_nn_mse, uncertainty_error_r, mc: mc.clone(), uncertainty_defined })
}

pub fn eval_csv(result: &EvalResult) -> String {
    let mut s = String::from("example,baseline_mse,nn_mse,uncertainty\n");
    for r in &result.rows {
        let _ = writeln!(s, "{},{},{},{}", r.example, r.baseline_mse, r.nn_mse, r.uncertainty);
    }
    s
}

pub fn iterations_csv(records: &[IterationRecord]) -> String {
    let mut s = format!("{}\n", IterationRecord::CSV_HEADER);
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Writes `eval.csv` and the uncertainty/error scatter plot.
pub fn emit_eval_report(result: &EvalResult, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let points: Vec<(f64, f64)> = result.rows.iter().map(|r| (r.uncertainty, r.nn_mse)).collect();
    let svg = Plot {
        title: "Uncertainty vs NN squared error",
        x_label: "uncertainty (mean entropy, nats)",
        y_label: "NN MSE",
    }
    .scatter(&points);
    write_atomic(&out_dir.join(EVAL_CSV), eval_csv(result).as_bytes())?;
    write_atomic(&out_dir.join(SCATTER_SVG), svg.as_bytes())
}

/// Writes `iterations.csv` and the validation-MSE-per-iteration plot.
pub fn emit_iteration_report(records: &[IterationRecord], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut points = Vec::with_capacity(records.len() + 1);
    if let Some(first) = records.first() {
        points.push((0.0, first.val_mse_before));
    }
    points.extend(records.iter().map(|r| (r.iteration as f64, r.val_mse_after)));
    let svg = Plot { title: "Validation MSE per iteration", x_label: "iteration", y_label: "validation MSE" }.line(&points);
    write_atomic(&out_dir.join(ITERATIONS_CSV), iterations_csv(records).as_bytes())?;
    write_atomic(&out_dir.join(ITERATIONS_SVG), svg.as_bytes())
}

struct Plot<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 64.0;

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

impl Plot<'_> {
    fn frame(&self, points: &[(f64, f64)]) -> (String, impl Fn(f64, f64) -> (f64, f64)) {
        let (x0, x1) = bounds(points.iter().map(|p| p.0));
        let (y0, y1) = bounds(points.iter().map(|p| p.1));
        let map = move |x: f64, y: f64| {
            (MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN), H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN))
        };
        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            W - 2.0 * MARGIN,
            H - 2.0 * MARGIN
        );
        let _ = writeln!(s, r#"<text x="{}" y="32" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, self.title);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 16.0, self.x_label);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            self.y_label
        );
        for (v, (px, _)) in [(x0, map(x0, y0)), (x1, map(x1, y0))] {
            let _ = writeln!(s, r#"<text x="{px:.1}" y="{}" text-anchor="middle" font-size="10">{v:.4e}</text>"#, H - MARGIN + 14.0);
        }
        for (v, (_, py)) in [(y0, map(x0, y0)), (y1, map(x0, y1))] {
            let _ = writeln!(s, r#"<text x="{}" y="{py:.1}" text-anchor="end" font-size="10">{v:.4e}</text>"#, MARGIN - 4.0);
        }
        (s, map)
    }

    fn scatter(&self, points: &[(f64, f64)]) -> String {
        let (mut s, map) = self.frame(points);
        for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let (px, py) = map(x, y);
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="steelblue"/>"#);
        }
        s.push_str("</svg>\n");
        s
    }

    fn line(&self, points: &[(f64, f64)]) -> String {
        let (mut s, map) = self.frame(points);
        let coords: Vec<String> = points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| {
                let (px, py) = map(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, coords.join(" "));
        for c in &coords {
            let (px, py) = c.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="steelblue"/>"#);
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use num_complex::Complex64;
    use proptest::prelude::*;

    #[test]
    fn mse_oracles() {
        let a = ComplexGrid::from_column_major(2, 1, vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]).unwrap();
        let z = ComplexGrid::zeros(2, 1);
        assert_eq!(mse(&a, &z).unwrap(), 0.5);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let c = Complex64::new(0.3, -0.4);
        let shifted = ComplexGrid::from_fn(2, 1, |r, col| a.get(r, col) + c);
        assert!((mse(&shifted, &a).unwrap() - c.norm_sqr()).abs() < 1e-15);
        assert!(matches!(mse(&a, &ComplexGrid::zeros(1, 2)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pearson_oracles() {
        let x = [1.0, 2.0, 3.0, 5.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::DegenerateInput(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    fn records() -> Vec<IterationRecord> {
        (1..=3)
            .map(|t| IterationRecord {
                iteration: t,
                selected: vec![0, 2],
                val_mse_before: 1.0 / t as f64,
                val_mse_after: 1.0 / (t + 1) as f64,
                mean_uncertainty_before: -3.0,
                mean_uncertainty_after: -3.5,
                trainset_size: 10,
            })
            .collect()
    }

    #[test]
    fn emitted_files_are_deterministic_and_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let result = EvalResult {
            rows: (0..5).map(|i| EvalRow { example: i, baseline_mse: 0.2, nn_mse: 0.1 * i as f64, uncertainty: -(i as f64) }).collect(),
            mean_baseline_mse: 0.2,
            mean_nn_mse: 0.2,
            uncertainty_error_r: Some(-1.0),
            mc: McConfig::default(),
            uncertainty_defined: true,
        };
        emit_eval_report(&result, dir.path()).unwrap();
        emit_iteration_report(&records(), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(EVAL_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert_eq!(csv.lines().next().unwrap(), "example,baseline_mse,nn_mse,uncertainty");
        let it = std::fs::read_to_string(dir.path().join(ITERATIONS_CSV)).unwrap();
        assert_eq!(it.lines().count(), 4);
        assert_eq!(it.lines().nth(1).unwrap(), "1,1,0.5,-3,-3.5,2,10");
        for f in [SCATTER_SVG, ITERATIONS_SVG] {
            let svg = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(svg.starts_with("<?xml") && svg.contains("<svg") && svg.trim_end().ends_with("</svg>"));
        }
        let first = std::fs::read(dir.path().join(EVAL_CSV)).unwrap();
        emit_eval_report(&result, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(EVAL_CSV)).unwrap(), first);
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, b"x").unwrap();
        assert!(matches!(emit_iteration_report(&records(), &file), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            a in 0.1f64..5.0, b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&x, &y) {
                let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                let xn: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
                prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-9);
                prop_assert!((pearson(&xn, &y).unwrap() + r).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn mse_symmetric_and_shift_invariant(
            vals in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..20),
            cr in -1.0f64..1.0, ci in -1.0f64..1.0,
        ) {
            let n = vals.len();
            let a = ComplexGrid::from_fn(n, 1, |r, _| Complex64::new(vals[r].0, vals[r].1));
            let b = ComplexGrid::from_fn(n, 1, |r, _| Complex64::new(vals[r].2, vals[r].3));
            let c = Complex64::new(cr, ci);
            let m = mse(&a, &b).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m, mse(&b, &a).unwrap());
            let a2 = ComplexGrid::from_fn(n, 1, |r, col| a.get(r, col) + c);
            let b2 = ComplexGrid::from_fn(n, 1, |r, col| b.get(r, col) + c);
            prop_assert!((mse(&a2, &b2).unwrap() - m).abs() < 1e-12);
        }
    }
}
