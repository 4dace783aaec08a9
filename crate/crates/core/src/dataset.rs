//! Dataset generation, splitting and persistence.
//!
//! Each example is one slot: a random 16QAM payload with pilots is
//! OFDM-modulated, passed through a freshly drawn TDL channel plus AWGN and
//! demodulated. The network input is the interpolated least-squares pilot
//! estimate of that received grid; the target is the perfect channel grid.
//! Example `i` depends only on `master_seed ^ i`, so any example can be
//! regenerated from its stored seed.
//!
//! On disk a dataset is a directory holding `manifest.json` (format version,
//! generation spec, per-example metadata) and `examples.bin` (an input and a
//! target `CGRD` record per example, in manifest order).

use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{add_awgn, apply_channel, make_tdl_profile, perfect_channel_grid, realize_channel, ProfileName, TdlProfile};
use crate::error::{ensure, Error, Result};
use crate::fsutil::write_atomic;
use crate::ofdm::{build_resource_grid, ofdm_demodulate, ofdm_modulate, payload_bits_len, random_bits, OfdmConfig, PilotConfig, PilotLayout};
use crate::pilot::{interpolate_grid, ls_estimate_at_pilots};
use crate::seed;
use crate::signal::ComplexGrid;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXAMPLES_FILE: &str = "examples.bin";

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        if self.lo == self.hi {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * u
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        ensure!(
            self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi,
            InvalidParameter,
            "{what} range [{}, {}] is empty or not finite",
            self.lo,
            self.hi
        );
        Ok(())
    }
}

impl From<[f64; 2]> for Interval {
    fn from([lo, hi]: [f64; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_examples: usize,
    pub profiles: Vec<ProfileName>,
    pub delay_spread_ns: Interval,
    pub max_doppler_hz: Interval,
    pub snr_db: Interval,
    pub ofdm: OfdmConfig,
    pub pilots: PilotLayout,
    pub master_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_examples: 256,
            profiles: ProfileName::ALL.to_vec(),
            delay_spread_ns: Interval::new(1.0, 300.0),
            max_doppler_hz: Interval::new(5.0, 400.0),
            snr_db: Interval::new(0.0, 10.0),
            ofdm: OfdmConfig::default(),
            pilots: PilotLayout::default(),
            master_seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_examples >= 1, InvalidParameter, "num_examples must be >= 1");
        ensure!(!self.profiles.is_empty(), InvalidParameter, "no delay profiles selected");
        self.delay_spread_ns.check("delay spread")?;
        self.max_doppler_hz.check("Doppler")?;
        self.snr_db.check("SNR")?;
        ensure!(self.delay_spread_ns.lo > 0.0, InvalidParameter, "delay spread must be positive");
        ensure!(self.max_doppler_hz.lo >= 0.0, InvalidParameter, "Doppler must be non-negative");
        self.ofdm.validate()?;
        self.pilot_config().validate(&self.ofdm)
    }

    pub fn pilot_config(&self) -> PilotConfig {
        self.pilots.build(self.ofdm.num_subcarriers)
    }

    pub fn example_seed(&self, index: usize) -> u64 {
        self.master_seed ^ index as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub index: usize,
    pub profile: ProfileName,
    pub delay_spread_ns: f64,
    pub doppler_hz: f64,
    pub snr_db: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub adversarial: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetExample {
    /// Interpolated pilot estimate of the received grid.
    pub input: ComplexGrid,
    /// Perfect channel grid.
    pub target: ComplexGrid,
    pub meta: ExampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub version: u32,
    pub spec: DatasetSpec,
    pub examples: Vec<DatasetExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Runs one slot through the link and returns `(input, target)` at full
/// precision.
pub fn simulate_link(
    profile: &TdlProfile,
    delay_spread_ns: f64,
    doppler_hz: f64,
    snr_db: f64,
    cfg: &OfdmConfig,
    pilots: &PilotConfig,
    seed: u64,
) -> Result<(ComplexGrid, ComplexGrid)> {
    let bits = random_bits(payload_bits_len(cfg, pilots), seed);
    let tx = build_resource_grid(&bits, cfg, pilots)?;
    let wave = ofdm_modulate(&tx, cfg)?;
    let channel = realize_channel(profile, delay_spread_ns, doppler_hz, wave.len(), cfg.sample_rate_hz, seed)?;
    let rx_wave = add_awgn(&apply_channel(&wave, &channel)?, snr_db, seed)?;
    let rx = ofdm_demodulate(&rx_wave, cfg)?;
    let input = interpolate_grid(&ls_estimate_at_pilots(&rx, pilots)?, cfg)?;
    let target = perfect_channel_grid(&channel, cfg)?;
    Ok((input, target))
}

/// Example `index` of `spec`: channel parameters drawn uniformly from the
/// spec's ranges, grids rounded to `f32`.
pub fn generate_example(spec: &DatasetSpec, pilots: &PilotConfig, index: usize) -> Result<DatasetExample> {
    let seed = spec.example_seed(index);
    let mut rng = seed::rng(seed::substream(seed, seed::Stream::Parameters));
    let profile = spec.profiles[rng.random_range(0..spec.profiles.len())];
    let delay_spread_ns = spec.delay_spread_ns.sample(&mut rng);
    let doppler_hz = spec.max_doppler_hz.sample(&mut rng);
    let snr_db = spec.snr_db.sample(&mut rng);
    let (mut input, mut target) =
        simulate_link(&make_tdl_profile(profile), delay_spread_ns, doppler_hz, snr_db, &spec.ofdm, pilots, seed)?;
    input.quantize_f32();
    target.quantize_f32();
    Ok(DatasetExample {
        input,
        target,
        meta: ExampleMeta { index, profile, delay_spread_ns, doppler_hz, snr_db, seed, adversarial: false },
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let pilots = spec.pilot_config();
    let examples = (0..spec.num_examples)
        .into_par_iter()
        .map(|i| generate_example(spec, &pilots, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { version: FORMAT_VERSION, spec: spec.clone(), examples })
}

/// Seeded shuffle, then the first `floor(train_fraction * N)` examples go to
/// training and the rest to validation.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    ensure!(
        train_fraction > 0.0 && train_fraction < 1.0,
        InvalidParameter,
        "train fraction {train_fraction} outside (0, 1)"
    );
    let n = ds.len();
    ensure!(n >= 2, InvalidParameter, "cannot split {n} examples");
    let cut = (train_fraction * n as f64).floor() as usize;
    ensure!(cut >= 1 && cut < n, InvalidParameter, "fraction {train_fraction} of {n} leaves an empty side");
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seed::rng(seed::substream(seed, seed::Stream::Split)));
    let pick = |idx: &[usize]| Dataset {
        version: ds.version,
        spec: ds.spec.clone(),
        examples: idx.iter().map(|&i| ds.examples[i].clone()).collect(),
    };
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: DatasetSpec,
    examples: Vec<ExampleMeta>,
}

/// Writes `manifest.json` and `examples.bin` into `dir`, each through a
/// temporary file renamed into place.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bin = Vec::with_capacity(ds.len() * 2 * (12 + ds.spec.ofdm.grid_len() * 8));
    for ex in &ds.examples {
        ex.input.write_cgrd(&mut bin)?;
        ex.target.write_cgrd(&mut bin)?;
    }
    let manifest = Manifest {
        version: ds.version,
        spec: ds.spec.clone(),
        examples: ds.examples.iter().map(|e| e.meta.clone()).collect(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(EXAMPLES_FILE), &bin)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    ensure!(manifest.version == FORMAT_VERSION, Format, "unsupported dataset version {}", manifest.version);
    let shape = (manifest.spec.ofdm.num_subcarriers, manifest.spec.ofdm.symbols_per_slot);
    let mut reader = BufReader::new(fs::File::open(dir.join(EXAMPLES_FILE))?);
    let mut examples = Vec::with_capacity(manifest.examples.len());
    for meta in manifest.examples {
        let input = ComplexGrid::read_cgrd(&mut reader)
            .map_err(|e| Error::Format(format!("example {}: {e}", meta.index)))?;
        let target = ComplexGrid::read_cgrd(&mut reader)
            .map_err(|e| Error::Format(format!("example {}: {e}", meta.index)))?;
        ensure!(
            input.shape() == shape && target.shape() == shape,
            Format,
            "example {} grid shape disagrees with manifest {}x{}",
            meta.index,
            shape.0,
            shape.1
        );
        examples.push(DatasetExample { input, target, meta });
    }
    let mut rest = [0u8; 1];
    ensure!(
        reader.read(&mut rest)? == 0,
        Format,
        "examples.bin holds more records than the manifest lists"
    );
    Ok(Dataset { version: manifest.version, spec: manifest.spec, examples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::Tap;

    fn small_spec(n: usize, seed: u64) -> DatasetSpec {
        DatasetSpec { num_examples: n, master_seed: seed, ..Default::default() }
    }

    #[test]
    fn examples_respect_ranges_and_shapes() {
        let ds = generate_dataset(&small_spec(6, 11)).unwrap();
        assert_eq!(ds.len(), 6);
        for (i, ex) in ds.examples.iter().enumerate() {
            assert_eq!(ex.input.shape(), (612, 14));
            assert_eq!(ex.target.shape(), (612, 14));
            assert_eq!(ex.meta.index, i);
            assert_eq!(ex.meta.seed, 11 ^ i as u64);
            assert!(ds.spec.delay_spread_ns.contains(ex.meta.delay_spread_ns));
            assert!(ds.spec.max_doppler_hz.contains(ex.meta.doppler_hz));
            assert!(ds.spec.snr_db.contains(ex.meta.snr_db));
            assert!(ex.input.is_finite() && ex.target.is_finite());
        }
    }

    #[test]
    fn regenerating_from_meta_is_bit_exact() {
        let spec = small_spec(4, 5);
        let ds = generate_dataset(&spec).unwrap();
        let again = generate_example(&spec, &spec.pilot_config(), 2).unwrap();
        assert_eq!(again, ds.examples[2]);
    }

    #[test]
    fn noiseless_flat_static_link_gives_exact_baseline() {
        let cfg = OfdmConfig::default();
        let pilots = PilotConfig::default_for(&cfg);
        let flat = TdlProfile::new("flat", vec![Tap { normalized_delay: 0.0, power_db: 0.0, is_los: false }], None).unwrap();
        let (input, target) = simulate_link(&flat, 50.0, 0.0, f64::INFINITY, &cfg, &pilots, 3).unwrap();
        assert!(input.max_abs_diff(&target) < 1e-6);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = small_spec(1, 0);
        spec.delay_spread_ns = Interval::new(0.0, 10.0);
        assert!(matches!(generate_dataset(&spec), Err(Error::InvalidParameter(_))));
        let mut spec = small_spec(1, 0);
        spec.snr_db = Interval::new(5.0, 1.0);
        assert!(generate_dataset(&spec).is_err());
        assert!(generate_dataset(&small_spec(0, 0)).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let spec = small_spec(10, 1);
        let ds = Dataset {
            version: FORMAT_VERSION,
            spec: spec.clone(),
            examples: (0..10)
                .map(|i| DatasetExample {
                    input: ComplexGrid::zeros(1, 1),
                    target: ComplexGrid::zeros(1, 1),
                    meta: ExampleMeta {
                        index: i,
                        profile: ProfileName::TdlA,
                        delay_spread_ns: 1.0,
                        doppler_hz: 5.0,
                        snr_db: 0.0,
                        seed: i as u64,
                        adversarial: false,
                    },
                })
                .collect(),
        };
        let (train, val) = split(&ds, 0.8, 3).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        let mut all: Vec<usize> = train.examples.iter().chain(&val.examples).map(|e| e.meta.index).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(&ds, 0.8, 3).unwrap(), (train, val));
        assert!(split(&ds, 1.0, 3).is_err());
        assert!(split(&ds, 0.05, 3).is_err());
    }
}
