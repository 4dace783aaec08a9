//! The CNN channel estimator: grid/tensor encoding, input normalization and
//! the `NNCK` checkpoint format.
//!
//! A grid of `K` subcarriers by `M` symbols becomes a `[2][K][M]` tensor
//! (real plane, then imaginary plane) scaled by `1/sigma`, where `sigma` is
//! the standard deviation of all real and imaginary values of the training
//! inputs. Targets use the same scale.
//!
//! Checkpoint layout: `NNCK`, a little-endian `u32` header length, a JSON
//! header, then every parameter tensor as little-endian `f32` in declaration
//! order (per convolution: weights, then biases).

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetExample;
use crate::error::{ensure, Error, Result};
use crate::fsutil::write_atomic;
use crate::nn::{self, Architecture, DropoutMode, NeuralNet, Sample, Shape, Tensor, TrainConfig, TrainReport};
use crate::signal::ComplexGrid;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelEstimator {
    pub net: NeuralNet,
    /// Input/target scale; tensors hold `value / sigma`.
    pub sigma: f64,
}

impl ChannelEstimator {
    /// Fresh network for `rows x cols` grids with unit scale.
    pub fn new(arch: &Architecture, rows: usize, cols: usize, seed: u64) -> Result<Self> {
        let net = NeuralNet::new(arch, Shape::new(2, rows, cols), 2, seed)?;
        Ok(Self { net, sigma: 1.0 })
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        let s = self.net.input_shape();
        (s.height, s.width)
    }

    pub fn encode(&self, grid: &ComplexGrid) -> Result<Tensor> {
        ensure!(
            grid.shape() == self.grid_shape(),
            ShapeMismatch,
            "grid {:?} does not fit a network built for {:?}",
            grid.shape(),
            self.grid_shape()
        );
        Ok(encode_grid(grid, self.sigma))
    }

    pub fn decode(&self, t: &Tensor) -> Result<ComplexGrid> {
        decode_tensor(t, self.sigma)
    }

    pub fn sample(&self, ex: &DatasetExample) -> Result<Sample> {
        Ok(Sample { input: self.encode(&ex.input)?, target: self.encode(&ex.target)? })
    }

    pub fn samples(&self, examples: &[DatasetExample]) -> Result<Vec<Sample>> {
        examples.iter().map(|e| self.sample(e)).collect()
    }

    /// Dropout-off prediction in grid units.
    pub fn predict(&self, grid: &ComplexGrid) -> Result<ComplexGrid> {
        self.decode(&self.net.forward(&self.encode(grid)?, DropoutMode::Off)?)
    }

    /// Trains from the current weights and returns the best-validation
    /// estimator. `sigma` is kept as is.
    pub fn train(
        &self,
        train_set: &[DatasetExample],
        val_set: &[DatasetExample],
        cfg: &TrainConfig,
    ) -> Result<(ChannelEstimator, TrainReport)> {
        let (net, report) = nn::train(&self.net, &self.samples(train_set)?, &self.samples(val_set)?, cfg)?;
        Ok((Self { net, sigma: self.sigma }, report))
    }
}

/// Population standard deviation of all real and imaginary parts of the
/// example inputs.
pub fn input_sigma(examples: &[DatasetExample]) -> Result<f64> {
    ensure!(!examples.is_empty(), InvalidParameter, "no examples to normalize over");
    let values = || examples.iter().flat_map(|e| e.input.as_slice().iter().flat_map(|z| [z.re, z.im]));
    let n = examples.iter().map(|e| 2 * e.input.len()).sum::<usize>() as f64;
    let mean = values().sum::<f64>() / n;
    let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    ensure!(var > 0.0 && var.is_finite(), DegenerateInput, "training inputs are constant");
    Ok(var.sqrt())
}

pub fn encode_grid(grid: &ComplexGrid, sigma: f64) -> Tensor {
    let (rows, cols) = grid.shape();
    let plane = rows * cols;
    let mut data = vec![0.0; 2 * plane];
    let inv = 1.0 / sigma;
    for c in 0..cols {
        for (r, z) in grid.column(c).iter().enumerate() {
            data[r * cols + c] = z.re * inv;
            data[plane + r * cols + c] = z.im * inv;
        }
    }
    Tensor { shape: Shape::new(2, rows, cols), data }
}

pub fn decode_tensor(t: &Tensor, sigma: f64) -> Result<ComplexGrid> {
    ensure!(t.shape.channels == 2, ShapeMismatch, "expected 2 channels, got {}", t.shape);
    let (rows, cols) = (t.shape.height, t.shape.width);
    let plane = rows * cols;
    Ok(ComplexGrid::from_fn(rows, cols, |r, c| {
        Complex64::new(t.data[r * cols + c] * sigma, t.data[plane + r * cols + c] * sigma)
    }))
}

/// Everything needed to rebuild an estimator, plus how it was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub estimator: ChannelEstimator,
    pub train_config: TrainConfig,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: String,
    input_shape: Shape,
    output_shape: Shape,
    normalization_sigma: f64,
    train_config: TrainConfig,
    seed: u64,
    param_lengths: Vec<usize>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = &self.estimator.net;
        let params = net.params();
        let header = Header {
            version: CHECKPOINT_VERSION,
            architecture: net.architecture().to_string(),
            input_shape: net.input_shape(),
            output_shape: net.output_shape(),
            normalization_sigma: self.estimator.sigma,
            train_config: self.train_config.clone(),
            seed: self.seed,
            param_lengths: params.iter().map(|p| p.len()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + 4 * net.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in params {
            for &w in p {
                out.extend_from_slice(&(w as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 8 && &bytes[..4] == CHECKPOINT_MAGIC, Format, "not an NNCK checkpoint");
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        ensure!(bytes.len() >= 8 + hlen, Format, "checkpoint header truncated");
        let header: Header = serde_json::from_slice(&bytes[8..8 + hlen])?;
        ensure!(header.version == CHECKPOINT_VERSION, Format, "unsupported checkpoint version {}", header.version);
        let arch: Architecture = header.architecture.parse()?;
        let mut net = NeuralNet::new(&arch, header.input_shape, header.output_shape.channels, 0)?;
        ensure!(net.output_shape() == header.output_shape, Format, "output shape disagrees with architecture");
        let lengths: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        ensure!(lengths == header.param_lengths, Format, "parameter layout disagrees with architecture");
        let mut body = &bytes[8 + hlen..];
        ensure!(
            body.len() == 4 * lengths.iter().sum::<usize>(),
            Format,
            "weight section holds {} bytes, expected {}",
            body.len(),
            4 * lengths.iter().sum::<usize>()
        );
        for p in net.params_mut() {
            for w in p.iter_mut() {
                *w = f32::from_le_bytes(body[..4].try_into().expect("4 bytes")) as f64;
                body = &body[4..];
            }
        }
        ensure!(net.is_finite(), Format, "checkpoint holds non-finite weights");
        ensure!(
            header.normalization_sigma.is_finite() && header.normalization_sigma > 0.0,
            Format,
            "bad normalization sigma"
        );
        Ok(Self {
            estimator: ChannelEstimator { net, sigma: header.normalization_sigma },
            train_config: header.train_config,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ExampleMeta;
    use crate::channel::ProfileName;

    fn example(rows: usize, cols: usize, seed: u64) -> DatasetExample {
        let f = |s: u64| {
            ComplexGrid::from_fn(rows, cols, |r, c| {
                let x = (r * 31 + c * 7 + s as usize) as f64;
                Complex64::new(x.sin(), (0.5 * x).cos())
            })
        };
        DatasetExample {
            input: f(seed),
            target: f(seed + 1),
            meta: ExampleMeta {
                index: 0,
                profile: ProfileName::TdlA,
                delay_spread_ns: 1.0,
                doppler_hz: 5.0,
                snr_db: 0.0,
                seed,
                adversarial: false,
            },
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let ex = example(6, 3, 1);
        let t = encode_grid(&ex.input, 0.25);
        assert_eq!(t.shape, Shape::new(2, 6, 3));
        assert_eq!(t.data[1 * 3 + 2], ex.input.get(1, 2).re * 4.0);
        assert_eq!(t.data[18 + 1 * 3 + 2], ex.input.get(1, 2).im * 4.0);
        assert!(decode_tensor(&t, 0.25).unwrap().max_abs_diff(&ex.input) < 1e-15);
    }

    #[test]
    fn sigma_matches_direct_formula() {
        let exs = [example(4, 2, 0), example(4, 2, 5)];
        let vals: Vec<f64> = exs.iter().flat_map(|e| e.input.as_slice().iter().flat_map(|z| [z.re, z.im])).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((input_sigma(&exs).unwrap() - sd).abs() < 1e-15);
        assert!(input_sigma(&[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact_after_f32_rounding() {
        let mut est = ChannelEstimator::new(&"conv3x3:4,relu,dropout:0.1,conv3x3:2".parse().unwrap(), 6, 3, 9).unwrap();
        est.sigma = 0.37;
        est.net.quantize_f32();
        let ck = Checkpoint { estimator: est, train_config: TrainConfig::default(), seed: 9 };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"NNCK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let est = ChannelEstimator::new(&"conv3x3:2".parse().unwrap(), 4, 4, 1).unwrap();
        let bytes = Checkpoint { estimator: est, train_config: TrainConfig::default(), seed: 1 }.to_bytes().unwrap();
        for bad in [&bytes[..bytes.len() - 1], &bytes[..6], b"XXXXabcd".as_slice()] {
            assert!(matches!(Checkpoint::from_bytes(bad), Err(Error::Format(_))));
        }
    }

    #[test]
    fn predict_rejects_wrong_grid() {
        let est = ChannelEstimator::new(&"conv3x3:2".parse().unwrap(), 4, 4, 1).unwrap();
        assert!(matches!(est.predict(&ComplexGrid::zeros(4, 5)), Err(Error::ShapeMismatch(_))));
    }
}
