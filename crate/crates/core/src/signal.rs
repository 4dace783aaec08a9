//! Grid and waveform containers shared by every stage, plus the `CGRD`
//! binary grid codec.

use std::io::{Read, Write};

use num_complex::Complex64;

use crate::error::{ensure, Error, Result};

pub const CGRD_MAGIC: &[u8; 4] = b"CGRD";

/// Subcarriers x OFDM symbols matrix of complex values, stored symbol by
/// symbol (column-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, Complex64::new(0.0, 0.0))
    }

    pub fn filled(rows: usize, cols: usize, value: Complex64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for col in 0..cols {
            for row in 0..rows {
                data.push(f(row, col));
            }
        }
        Self { rows, cols, data }
    }

    /// Wraps column-major data.
    pub fn from_column_major(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            ShapeMismatch,
            "{} values for a {rows}x{cols} grid",
            data.len()
        );
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[col * self.rows + row]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[col * self.rows + row] = value;
    }

    pub fn column(&self, col: usize) -> &[Complex64] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn column_mut(&mut self, col: usize) -> &mut [Complex64] {
        &mut self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &ComplexGrid) -> Result<ComplexGrid> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn check_same_shape(&self, other: &ComplexGrid) -> Result<()> {
        ensure!(
            self.shape() == other.shape(),
            ShapeMismatch,
            "{}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        Ok(())
    }

    /// Rounds every component to the nearest `f32`, the precision grids are
    /// persisted at.
    pub fn quantize_f32(&mut self) {
        for z in &mut self.data {
            *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
        }
    }

    pub fn max_abs_diff(&self, other: &ComplexGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Writes the grid as a `CGRD` record: magic, u32 rows, u32 cols, then
    /// interleaved little-endian f32 (re, im) pairs, one symbol column at a
    /// time.
    pub fn write_cgrd<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.data.len() * 8);
        buf.extend_from_slice(CGRD_MAGIC);
        buf.extend_from_slice(&(self.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for z in &self.data {
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_cgrd<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 12];
        read_exact_or_format(&mut r, &mut header, "grid header")?;
        if &header[..4] != CGRD_MAGIC {
            return Err(Error::Format("bad grid magic, expected CGRD".into()));
        }
        let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|&n| n <= (1 << 28))
            .ok_or_else(|| Error::Format(format!("implausible grid shape {rows}x{cols}")))?;
        let mut body = vec![0u8; count * 8];
        read_exact_or_format(&mut r, &mut body, "grid body")?;
        let data = body
            .chunks_exact(8)
            .map(|c| {
                let re = f32::from_le_bytes(c[..4].try_into().unwrap());
                let im = f32::from_le_bytes(c[4..].try_into().unwrap());
                Complex64::new(re as f64, im as f64)
            })
            .collect();
        Ok(Self { rows, cols, data })
    }
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

/// Complex baseband samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
}

impl Waveform {
    pub fn new(samples: Vec<Complex64>, sample_rate_hz: f64) -> Self {
        Self { samples, sample_rate_hz }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean |x|^2.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}
