//! Tapped-delay-line fading channels.
//!
//! Tap tables come from the bundled `data/tdl_profiles.txt`. Each Rayleigh
//! tap is driven by its own sum-of-sinusoids generator; a line-of-sight tap
//! adds a deterministic Doppler-shifted phasor weighted by the profile's
//! Rician K-factor.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ofdm::OfdmConfig;
use crate::seed;
use crate::signal::{ComplexGrid, Waveform};

/// Sinusoids per Rayleigh tap.
pub const NUM_SINUSOIDS: usize = 32;

/// Arrival angle of the LOS component relative to the direction of travel.
const LOS_ARRIVAL_ANGLE: f64 = PI / 4.0;

static BUNDLED_TABLE: &str = include_str!("../data/tdl_profiles.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProfileName {
    #[serde(rename = "TDL-A")]
    TdlA,
    #[serde(rename = "TDL-B")]
    TdlB,
    #[serde(rename = "TDL-C")]
    TdlC,
    #[serde(rename = "TDL-D")]
    TdlD,
    #[serde(rename = "TDL-E")]
    TdlE,
}

impl ProfileName {
    pub const ALL: [ProfileName; 5] =
        [ProfileName::TdlA, ProfileName::TdlB, ProfileName::TdlC, ProfileName::TdlD, ProfileName::TdlE];

    pub fn as_str(self) -> &'static str {
        match self {
            ProfileName::TdlA => "TDL-A",
            ProfileName::TdlB => "TDL-B",
            ProfileName::TdlC => "TDL-C",
            ProfileName::TdlD => "TDL-D",
            ProfileName::TdlE => "TDL-E",
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProfileName::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownProfile(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub normalized_delay: f64,
    pub power_db: f64,
    pub is_los: bool,
}

/// A power delay profile with powers normalized to unit total.
#[derive(Debug, Clone, PartialEq)]
pub struct TdlProfile {
    pub label: String,
    pub taps: Vec<Tap>,
    pub rician_k_db: Option<f64>,
}

impl TdlProfile {
    /// Sorts taps by delay and renormalizes powers so their linear sum is 1.
    pub fn new(label: impl Into<String>, mut taps: Vec<Tap>, rician_k_db: Option<f64>) -> Result<Self> {
        let label = label.into();
        ensure!(!taps.is_empty(), InvalidParameter, "profile {label} has no taps");
        ensure!(
            taps.iter().all(|t| t.normalized_delay.is_finite() && t.normalized_delay >= 0.0 && t.power_db.is_finite()),
            InvalidParameter,
            "profile {label} has a negative or non-finite tap"
        );
        taps.sort_by(|a, b| a.normalized_delay.total_cmp(&b.normalized_delay));
        ensure!(taps[0].normalized_delay == 0.0, InvalidParameter, "profile {label}: first tap delay must be 0");
        ensure!(
            taps.iter().skip(1).all(|t| !t.is_los),
            InvalidParameter,
            "profile {label}: only the first tap may be line-of-sight"
        );
        ensure!(
            !taps[0].is_los || rician_k_db.is_some(),
            InvalidParameter,
            "profile {label}: LOS tap without a K-factor"
        );
        let total: f64 = taps.iter().map(|t| db_to_linear(t.power_db)).sum();
        let offset = 10.0 * total.log10();
        for t in &mut taps {
            t.power_db -= offset;
        }
        Ok(Self { label, taps, rician_k_db })
    }

    pub fn linear_powers(&self) -> Vec<f64> {
        self.taps.iter().map(|t| db_to_linear(t.power_db)).collect()
    }

    pub fn has_los(&self) -> bool {
        self.taps[0].is_los
    }
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Parses the stanza format: `profile <name>`, optional `k_factor_db <v>`,
/// then `tap <normalized_delay> <power_db> [los]` lines. `#` starts a
/// comment.
pub fn parse_profile_table(text: &str) -> Result<Vec<(ProfileName, TdlProfile)>> {
    struct Stanza {
        name: ProfileName,
        k: Option<f64>,
        taps: Vec<Tap>,
    }
    let mut stanzas: Vec<Stanza> = Vec::new();
    let bad = |n: usize, msg: &str| Error::Format(format!("tdl table line {}: {msg}", n + 1));
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "profile" => {
                let name = fields.get(1).ok_or_else(|| bad(n, "missing profile name"))?.parse()?;
                stanzas.push(Stanza { name, k: None, taps: Vec::new() });
            }
            "k_factor_db" => {
                let current = stanzas.last_mut().ok_or_else(|| bad(n, "k_factor_db before profile"))?;
                let v = fields.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, "bad k_factor_db"))?;
                current.k = Some(v);
            }
            "tap" => {
                let current = stanzas.last_mut().ok_or_else(|| bad(n, "tap before profile"))?;
                let num = |i: usize| -> Result<f64> {
                    fields.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| bad(n, "bad tap value"))
                };
                let is_los = match fields.get(3) {
                    None => false,
                    Some(&"los") => true,
                    Some(_) => return Err(bad(n, "unexpected tap flag")),
                };
                current.taps.push(Tap { normalized_delay: num(1)?, power_db: num(2)?, is_los });
            }
            other => return Err(bad(n, &format!("unknown keyword `{other}`"))),
        }
    }
    stanzas
        .into_iter()
        .map(|s| {
            ensure!(
                !s.taps.iter().any(|t| t.is_los) || matches!(s.name, ProfileName::TdlD | ProfileName::TdlE),
                Format,
                "{} may not have a LOS tap",
                s.name
            );
            Ok((s.name, TdlProfile::new(s.name.as_str(), s.taps, s.k)?))
        })
        .collect()
}

fn bundled_profiles() -> &'static [(ProfileName, TdlProfile)] {
    static TABLE: OnceLock<Vec<(ProfileName, TdlProfile)>> = OnceLock::new();
    TABLE.get_or_init(|| parse_profile_table(BUNDLED_TABLE).expect("bundled TDL table is well formed"))
}

/// The bundled tap table for `name`.
pub fn make_tdl_profile(name: ProfileName) -> TdlProfile {
    bundled_profiles()
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, p)| p.clone())
        .expect("every profile is bundled")
}

/// Looks a profile up by its textual name, e.g. `"TDL-C"`.
pub fn tdl_profile_by_name(name: &str) -> Result<TdlProfile> {
    Ok(make_tdl_profile(name.parse()?))
}

/// One time-varying realization of a profile, sampled at `sample_rate_hz`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub profile: TdlProfile,
    pub delay_spread_ns: f64,
    pub max_doppler_hz: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
    /// Unit-average-power fading per tap, one value per sample.
    pub tap_gains: Vec<Vec<Complex64>>,
    /// Linear power weight applied to each tap's fading.
    pub tap_powers: Vec<f64>,
    pub tap_delays_samples: Vec<usize>,
}

impl ChannelRealization {
    /// A time-invariant channel with explicit complex gains at integer sample
    /// delays.
    pub fn from_static(gains: &[Complex64], delays: &[usize], num_samples: usize, sample_rate_hz: f64) -> Result<Self> {
        ensure!(gains.len() == delays.len() && !gains.is_empty(), InvalidParameter, "need matching gains and delays");
        ensure!(num_samples > 0, InvalidParameter, "num_samples must be positive");
        let taps = delays
            .iter()
            .map(|&d| Tap { normalized_delay: d as f64, power_db: 0.0, is_los: false })
            .collect();
        let profile = TdlProfile { label: "static".into(), taps, rician_k_db: None };
        Ok(Self {
            profile,
            delay_spread_ns: 1e9 / sample_rate_hz,
            max_doppler_hz: 0.0,
            sample_rate_hz,
            seed: 0,
            tap_gains: gains.iter().map(|&g| vec![g; num_samples]).collect(),
            tap_powers: vec![1.0; gains.len()],
            tap_delays_samples: delays.to_vec(),
        })
    }

    pub fn num_samples(&self) -> usize {
        self.tap_gains.first().map_or(0, Vec::len)
    }

    /// Power-weighted complex gain of tap `l` at sample `n`.
    pub fn path_gain(&self, l: usize, n: usize) -> Complex64 {
        self.tap_gains[l][n] * self.tap_powers[l].sqrt()
    }
}

/// Draws a fading realization of `profile`.
///
/// Tap `l` lands on sample delay `round(tau_l * delay_spread * fs)`. With
/// `max_doppler_hz == 0` every tap is a constant unit-modulus phasor.
pub fn realize_channel(
    profile: &TdlProfile,
    delay_spread_ns: f64,
    max_doppler_hz: f64,
    num_samples: usize,
    sample_rate_hz: f64,
    seed: u64,
) -> Result<ChannelRealization> {
    ensure!(
        delay_spread_ns.is_finite() && delay_spread_ns > 0.0,
        InvalidParameter,
        "delay spread must be positive, got {delay_spread_ns} ns"
    );
    ensure!(
        max_doppler_hz.is_finite() && max_doppler_hz >= 0.0,
        InvalidParameter,
        "max Doppler must be non-negative, got {max_doppler_hz} Hz"
    );
    ensure!(num_samples > 0, InvalidParameter, "num_samples must be positive");
    ensure!(sample_rate_hz.is_finite() && sample_rate_hz > 0.0, InvalidParameter, "sample rate must be positive");

    let channel_seed = seed::substream(seed, seed::Stream::Channel);
    let k_linear = profile.rician_k_db.map(db_to_linear);
    let mut tap_gains = Vec::with_capacity(profile.taps.len());
    let mut tap_delays_samples = Vec::with_capacity(profile.taps.len());
    for (l, tap) in profile.taps.iter().enumerate() {
        let delay = tap.normalized_delay * delay_spread_ns * 1e-9 * sample_rate_hz;
        tap_delays_samples.push(delay.round() as usize);
        let mut rng = seed::rng(seed::derive(channel_seed, l as u64));
        let gains = if max_doppler_hz == 0.0 {
            let phase = rng.random::<f64>() * 2.0 * PI;
            vec![Complex64::from_polar(1.0, phase); num_samples]
        } else {
            let diffuse = sum_of_sinusoids(&mut rng, max_doppler_hz, sample_rate_hz, num_samples);
            match (tap.is_los, k_linear) {
                (true, Some(k)) => {
                    let los_phase = rng.random::<f64>() * 2.0 * PI;
                    let los_freq = max_doppler_hz * LOS_ARRIVAL_ANGLE.cos();
                    let (a_los, a_diffuse) = ((k / (k + 1.0)).sqrt(), (1.0 / (k + 1.0)).sqrt());
                    diffuse
                        .iter()
                        .enumerate()
                        .map(|(n, &d)| {
                            let t = n as f64 / sample_rate_hz;
                            Complex64::from_polar(a_los, 2.0 * PI * los_freq * t + los_phase) + d * a_diffuse
                        })
                        .collect()
                }
                _ => diffuse,
            }
        };
        tap_gains.push(gains);
    }
    Ok(ChannelRealization {
        profile: profile.clone(),
        delay_spread_ns,
        max_doppler_hz,
        sample_rate_hz,
        seed,
        tap_gains,
        tap_powers: profile.linear_powers(),
        tap_delays_samples,
    })
}

/// Unit-power Rayleigh process
/// `g(t) = N^-1/2 sum_n exp(j(2 pi f_d cos(a_n) t + phi_n))` with arrival
/// angles `a_n = (2 pi n + theta) / N` and uniform random phases.
fn sum_of_sinusoids<R: Rng>(rng: &mut R, max_doppler_hz: f64, sample_rate_hz: f64, num_samples: usize) -> Vec<Complex64> {
    // Oscillators advance by phasor rotation, re-anchored on exact phase
    // every BLOCK samples to bound drift.
    const BLOCK: usize = 2048;
    let theta = (rng.random::<f64>() * 2.0 - 1.0) * PI;
    let oscillators: Vec<(f64, f64)> = (0..NUM_SINUSOIDS)
        .map(|n| {
            let angle = (2.0 * PI * n as f64 + theta) / NUM_SINUSOIDS as f64;
            let omega = 2.0 * PI * max_doppler_hz * angle.cos() / sample_rate_hz;
            (omega, rng.random::<f64>() * 2.0 * PI)
        })
        .collect();
    let scale = 1.0 / (NUM_SINUSOIDS as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); num_samples];
    for &(omega, phase) in &oscillators {
        let step = Complex64::from_polar(1.0, omega);
        for (b, chunk) in out.chunks_mut(BLOCK).enumerate() {
            let mut z = Complex64::from_polar(scale, phase + omega * (b * BLOCK) as f64);
            for v in chunk {
                *v += z;
                z *= step;
            }
        }
    }
    out
}

/// `y[n] = sum_l h_l[n] x[n - d_l]`, with `x` zero before the first sample.
pub fn apply_channel(x: &Waveform, ch: &ChannelRealization) -> Result<Waveform> {
    ensure!(
        x.sample_rate_hz == ch.sample_rate_hz,
        ShapeMismatch,
        "waveform at {} Hz, channel at {} Hz",
        x.sample_rate_hz,
        ch.sample_rate_hz
    );
    ensure!(
        x.len() == ch.num_samples(),
        ShapeMismatch,
        "waveform has {} samples, channel realization {}",
        x.len(),
        ch.num_samples()
    );
    let mut y = vec![Complex64::new(0.0, 0.0); x.len()];
    for (l, gains) in ch.tap_gains.iter().enumerate() {
        let d = ch.tap_delays_samples[l];
        let amp = ch.tap_powers[l].sqrt();
        for n in d..x.len() {
            y[n] += gains[n] * amp * x.samples[n - d];
        }
    }
    Ok(Waveform::new(y, x.sample_rate_hz))
}

/// Adds circular complex Gaussian noise at `snr_db` relative to the measured
/// power of `x`. `snr_db = +inf` disables noise.
pub fn add_awgn(x: &Waveform, snr_db: f64, seed: u64) -> Result<Waveform> {
    ensure!(!snr_db.is_nan(), InvalidParameter, "SNR is NaN");
    let power = x.mean_power();
    ensure!(power > 0.0 && power.is_finite(), InvalidParameter, "signal power must be positive and finite");
    if snr_db == f64::INFINITY {
        return Ok(x.clone());
    }
    let sigma = (power / db_to_linear(snr_db) / 2.0).sqrt();
    let mut rng = seed::rng(seed::substream(seed, seed::Stream::Noise));
    let samples = x
        .samples
        .iter()
        .map(|&s| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            s + Complex64::new(re, im) * sigma
        })
        .collect();
    Ok(Waveform::new(samples, x.sample_rate_hz))
}

/// Frequency response seen by each OFDM symbol:
/// `H[k, m] = sum_l hbar_l(m) exp(-j 2 pi k_abs d_l / nfft)`, where
/// `hbar_l(m)` is tap `l`'s gain averaged over symbol `m`'s FFT window.
pub fn perfect_channel_grid(ch: &ChannelRealization, cfg: &OfdmConfig) -> Result<ComplexGrid> {
    cfg.validate()?;
    ensure!(
        ch.num_samples() >= cfg.slot_len_samples(),
        ShapeMismatch,
        "realization covers {} samples, slot needs {}",
        ch.num_samples(),
        cfg.slot_len_samples()
    );
    let n = cfg.nfft as f64;
    let mut grid = ComplexGrid::zeros(cfg.num_subcarriers, cfg.symbols_per_slot);
    for m in 0..cfg.symbols_per_slot {
        let start = cfg.useful_start(m);
        let window = start..start + cfg.nfft;
        let column = grid.column_mut(m);
        for (l, gains) in ch.tap_gains.iter().enumerate() {
            let mean = gains[window.clone()].iter().sum::<Complex64>() / n * ch.tap_powers[l].sqrt();
            let d = ch.tap_delays_samples[l] as f64;
            for (k, h) in column.iter_mut().enumerate() {
                let phase = -2.0 * PI * cfg.signed_bin(k) as f64 * d / n;
                *h += mean * Complex64::from_polar(1.0, phase);
            }
        }
    }
    Ok(grid)
}
