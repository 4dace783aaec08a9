//! Resource grid construction and CP-OFDM modulation.
//!
//! Subcarrier `k` of `num_subcarriers` sits on FFT bin `k - num_subcarriers/2`
//! (mod `nfft`), so the occupied band is centered on DC. Both transform
//! directions use unitary `1/sqrt(nfft)` scaling.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::seed;
use crate::signal::{ComplexGrid, Waveform};

/// Numerology of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfdmConfig {
    pub nfft: usize,
    pub sample_rate_hz: f64,
    pub num_subcarriers: usize,
    pub symbols_per_slot: usize,
    pub cp_lengths_samples: Vec<usize>,
    /// Recorded for completeness; edge windowing is not applied.
    pub windowing_samples: usize,
    pub slots_per_subframe: usize,
    pub slots_per_frame: usize,
}

impl Default for OfdmConfig {
    /// 1024-point FFT at 30.72 Msps (30 kHz spacing), 51 resource blocks,
    /// normal cyclic prefix: 88 samples on the first symbol of the slot
    /// (each half-subframe), 72 on the rest.
    fn default() -> Self {
        let mut cp = vec![72; 14];
        cp[0] = 88;
        Self {
            nfft: 1024,
            sample_rate_hz: 30_720_000.0,
            num_subcarriers: 612,
            symbols_per_slot: 14,
            cp_lengths_samples: cp,
            windowing_samples: 36,
            slots_per_subframe: 2,
            slots_per_frame: 20,
        }
    }
}

impl OfdmConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.nfft > 0, InvalidParameter, "nfft must be positive");
        ensure!(
            self.num_subcarriers > 0 && self.num_subcarriers <= self.nfft,
            InvalidParameter,
            "num_subcarriers {} must be in 1..={}",
            self.num_subcarriers,
            self.nfft
        );
        ensure!(self.symbols_per_slot > 0, InvalidParameter, "symbols_per_slot must be positive");
        ensure!(
            self.cp_lengths_samples.len() == self.symbols_per_slot,
            InvalidParameter,
            "{} cyclic prefix lengths for {} symbols",
            self.cp_lengths_samples.len(),
            self.symbols_per_slot
        );
        ensure!(
            self.cp_lengths_samples.iter().all(|&c| c > 0 && c <= self.nfft),
            InvalidParameter,
            "cyclic prefix lengths must be in 1..=nfft"
        );
        ensure!(self.sample_rate_hz > 0.0, InvalidParameter, "sample rate must be positive");
        Ok(())
    }

    pub fn grid_len(&self) -> usize {
        self.num_subcarriers * self.symbols_per_slot
    }

    pub fn slot_len_samples(&self) -> usize {
        self.cp_lengths_samples.iter().sum::<usize>() + self.nfft * self.symbols_per_slot
    }

    /// First sample of symbol `m`, cyclic prefix included.
    pub fn symbol_start(&self, m: usize) -> usize {
        self.cp_lengths_samples[..m].iter().sum::<usize>() + m * self.nfft
    }

    /// First sample of the FFT window of symbol `m`.
    pub fn useful_start(&self, m: usize) -> usize {
        self.symbol_start(m) + self.cp_lengths_samples[m]
    }

    /// Signed frequency index of subcarrier `k`, in bins from DC.
    pub fn signed_bin(&self, k: usize) -> i64 {
        k as i64 - (self.num_subcarriers / 2) as i64
    }

    pub fn fft_bin(&self, k: usize) -> usize {
        self.signed_bin(k).rem_euclid(self.nfft as i64) as usize
    }

    fn check_grid(&self, grid: &ComplexGrid) -> Result<()> {
        ensure!(
            grid.shape() == (self.num_subcarriers, self.symbols_per_slot),
            ShapeMismatch,
            "grid is {}x{}, config expects {}x{}",
            grid.rows(),
            grid.cols(),
            self.num_subcarriers,
            self.symbols_per_slot
        );
        Ok(())
    }
}

/// Serializable description of a seeded QPSK comb layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotLayout {
    pub symbols: Vec<usize>,
    pub subcarrier_stride: usize,
    pub subcarrier_offset: usize,
    pub seed: u64,
}

impl Default for PilotLayout {
    fn default() -> Self {
        Self { symbols: vec![2, 11], subcarrier_stride: 2, subcarrier_offset: 0, seed: PilotConfig::DEFAULT_SEED }
    }
}

impl PilotLayout {
    pub fn build(&self, num_subcarriers: usize) -> PilotConfig {
        PilotConfig::qpsk(num_subcarriers, self.symbols.clone(), self.subcarrier_stride, self.subcarrier_offset, self.seed)
    }
}

/// Comb pilot layout: every `subcarrier_stride`-th subcarrier from
/// `subcarrier_offset` on each listed symbol carries a known QPSK value.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotConfig {
    pub num_subcarriers: usize,
    pub pilot_symbol_indices: Vec<usize>,
    pub subcarrier_stride: usize,
    pub subcarrier_offset: usize,
    /// One value per pilot RE, ordered symbol by symbol (as listed), then
    /// by ascending subcarrier.
    pub pilot_values: Vec<Complex64>,
}

impl PilotConfig {
    pub const DEFAULT_SEED: u64 = 0x0D3E_5A11;

    /// Symbols {2, 11}, every second subcarrier, seeded QPSK values.
    pub fn default_for(cfg: &OfdmConfig) -> Self {
        PilotLayout::default().build(cfg.num_subcarriers)
    }

    pub fn qpsk(
        num_subcarriers: usize,
        mut pilot_symbol_indices: Vec<usize>,
        subcarrier_stride: usize,
        subcarrier_offset: usize,
        seed: u64,
    ) -> Self {
        pilot_symbol_indices.sort_unstable();
        pilot_symbol_indices.dedup();
        let per_symbol = if subcarrier_stride == 0 || subcarrier_offset >= num_subcarriers {
            0
        } else {
            (num_subcarriers - subcarrier_offset).div_ceil(subcarrier_stride)
        };
        let mut rng = seed::rng(seed::substream(seed, seed::Stream::Pilots));
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let pilot_values = (0..per_symbol * pilot_symbol_indices.len())
            .map(|_| {
                let re = if rng.random::<bool>() { a } else { -a };
                let im = if rng.random::<bool>() { a } else { -a };
                Complex64::new(re, im)
            })
            .collect();
        Self { num_subcarriers, pilot_symbol_indices, subcarrier_stride, subcarrier_offset, pilot_values }
    }

    pub fn pilot_subcarriers(&self) -> impl Iterator<Item = usize> + '_ {
        (self.subcarrier_offset..self.num_subcarriers).step_by(self.subcarrier_stride.max(1))
    }

    /// `(subcarrier, symbol, value)` for every pilot RE, in `pilot_values`
    /// order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        self.pilot_symbol_indices
            .iter()
            .flat_map(move |&m| self.pilot_subcarriers().map(move |k| (k, m)))
            .zip(&self.pilot_values)
            .map(|((k, m), &v)| (k, m, v))
    }

    pub fn num_pilots(&self) -> usize {
        self.pilot_symbol_indices.len() * self.pilot_subcarriers().count()
    }

    pub fn is_pilot(&self, k: usize, m: usize) -> bool {
        self.pilot_symbol_indices.contains(&m)
            && k >= self.subcarrier_offset
            && (k - self.subcarrier_offset) % self.subcarrier_stride.max(1) == 0
            && k < self.num_subcarriers
    }

    pub fn validate(&self, cfg: &OfdmConfig) -> Result<()> {
        ensure!(
            self.num_subcarriers == cfg.num_subcarriers,
            InvalidParameter,
            "pilot layout built for {} subcarriers, config has {}",
            self.num_subcarriers,
            cfg.num_subcarriers
        );
        ensure!(self.subcarrier_stride >= 1, InvalidParameter, "pilot stride must be >= 1");
        ensure!(
            self.pilot_symbol_indices.iter().all(|&m| m < cfg.symbols_per_slot),
            InvalidParameter,
            "pilot symbol index out of range"
        );
        ensure!(
            self.pilot_values.len() == self.num_pilots(),
            InvalidLength,
            "{} pilot values for {} pilot REs",
            self.pilot_values.len(),
            self.num_pilots()
        );
        ensure!(
            self.pilot_values.iter().all(|v| (v.norm() - 1.0).abs() <= 1e-12),
            InvalidParameter,
            "pilot values must have unit magnitude"
        );
        Ok(())
    }
}

/// Gray-mapped 16QAM with unit average power, four bits per symbol
/// `(b0, b1, b2, b3)`: `b0`,`b2` pick the in-phase level, `b1`,`b3` the
/// quadrature level.
pub fn qam16_modulate(bits: &[u8]) -> Result<Vec<Complex64>> {
    ensure!(bits.len() % 4 == 0, InvalidLength, "{} bits is not a multiple of 4", bits.len());
    let scale = 1.0 / 10f64.sqrt();
    let level = |b: u8| 1.0 - 2.0 * (b & 1) as f64;
    Ok(bits
        .chunks_exact(4)
        .map(|b| {
            let re = level(b[0]) * (2.0 - level(b[2]));
            let im = level(b[1]) * (2.0 - level(b[3]));
            Complex64::new(re * scale, im * scale)
        })
        .collect())
}

/// Uniform random payload bits from `seed`.
pub fn random_bits(count: usize, seed: u64) -> Vec<u8> {
    let mut rng = seed::rng(seed::substream(seed, seed::Stream::Payload));
    (0..count).map(|_| rng.random::<bool>() as u8).collect()
}

/// Number of payload bits needed to fill every non-pilot RE.
pub fn payload_bits_len(cfg: &OfdmConfig, pilots: &PilotConfig) -> usize {
    4 * (cfg.grid_len() - pilots.num_pilots())
}

/// Places pilots at their REs and 16QAM payload everywhere else, filling
/// data REs symbol by symbol.
pub fn build_resource_grid(payload_bits: &[u8], cfg: &OfdmConfig, pilots: &PilotConfig) -> Result<ComplexGrid> {
    cfg.validate()?;
    pilots.validate(cfg)?;
    let expected = payload_bits_len(cfg, pilots);
    ensure!(
        payload_bits.len() == expected,
        InvalidLength,
        "payload has {} bits, layout needs {expected}",
        payload_bits.len()
    );
    let mut data = qam16_modulate(payload_bits)?.into_iter();
    let mut grid = ComplexGrid::zeros(cfg.num_subcarriers, cfg.symbols_per_slot);
    for m in 0..cfg.symbols_per_slot {
        for k in 0..cfg.num_subcarriers {
            if !pilots.is_pilot(k, m) {
                grid.set(k, m, data.next().expect("payload length checked"));
            }
        }
    }
    for (k, m, v) in pilots.entries() {
        grid.set(k, m, v);
    }
    Ok(grid)
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(nfft: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans { forward: planner.plan_fft_forward(nfft), inverse: planner.plan_fft_inverse(nfft) }
}

pub fn ofdm_modulate(grid: &ComplexGrid, cfg: &OfdmConfig) -> Result<Waveform> {
    cfg.validate()?;
    cfg.check_grid(grid)?;
    let Plans { inverse, .. } = plans(cfg.nfft);
    let scale = 1.0 / (cfg.nfft as f64).sqrt();
    let mut samples = Vec::with_capacity(cfg.slot_len_samples());
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.nfft];
    for m in 0..cfg.symbols_per_slot {
        buf.fill(Complex64::new(0.0, 0.0));
        for (k, &v) in grid.column(m).iter().enumerate() {
            buf[cfg.fft_bin(k)] = v;
        }
        inverse.process(&mut buf);
        buf.iter_mut().for_each(|z| *z *= scale);
        let cp = cfg.cp_lengths_samples[m];
        samples.extend_from_slice(&buf[cfg.nfft - cp..]);
        samples.extend_from_slice(&buf);
    }
    Ok(Waveform::new(samples, cfg.sample_rate_hz))
}

pub fn ofdm_demodulate(y: &Waveform, cfg: &OfdmConfig) -> Result<ComplexGrid> {
    cfg.validate()?;
    ensure!(
        y.len() == cfg.slot_len_samples(),
        ShapeMismatch,
        "waveform has {} samples, one slot is {}",
        y.len(),
        cfg.slot_len_samples()
    );
    let Plans { forward, .. } = plans(cfg.nfft);
    let scale = 1.0 / (cfg.nfft as f64).sqrt();
    let mut grid = ComplexGrid::zeros(cfg.num_subcarriers, cfg.symbols_per_slot);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.nfft];
    for m in 0..cfg.symbols_per_slot {
        let start = cfg.useful_start(m);
        buf.copy_from_slice(&y.samples[start..start + cfg.nfft]);
        forward.process(&mut buf);
        for (k, out) in grid.column_mut(m).iter_mut().enumerate() {
            *out = buf[cfg.fft_bin(k)] * scale;
        }
    }
    Ok(grid)
}
