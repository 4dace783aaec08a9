//! Channel estimation workbench for a 5G-style OFDM link.
//!
//! The pipeline, module by module:
//!
//! - [`ofdm`]: numerology, 16QAM payload, pilots, CP-OFDM modulation.
//! - [`channel`]: TDL profiles, sum-of-sinusoids fading, AWGN and the
//!   perfect channel grid.
//! - [`pilot`]: least-squares estimates at pilots and linear interpolation.
//! - [`dataset`]: seeded example generation, splitting and persistence.
//! - [`nn`]: convolution/ReLU/dropout network, backprop and Adam.
//! - [`model`]: grid encoding, normalization and checkpoints.
//! - [`uncertainty`]: Monte-Carlo dropout statistics.
//! - [`retrain`]: uncertainty-driven FGSM retraining.
//! - [`report`]: metrics, evaluation and CSV/SVG output.
//! - [`cli`]: the `chanest` command.
//!
//! ```
//! use chanest::ofdm::{OfdmConfig, PilotConfig};
//!
//! let cfg = OfdmConfig::default();
//! let pilots = PilotConfig::default_for(&cfg);
//! assert_eq!((cfg.num_subcarriers, cfg.symbols_per_slot), (612, 14));
//! assert_eq!(pilots.num_pilots(), 612);
//! ```

pub mod channel;
pub mod cli;
pub mod dataset;
pub mod error;
mod fsutil;
pub mod model;
pub mod nn;
pub mod ofdm;
pub mod pilot;
pub mod report;
pub mod retrain;
pub mod seed;
pub mod signal;
pub mod uncertainty;

// The guide's code blocks run as doctests so the book cannot drift from the
// API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/ofdm.md")]
    mod ofdm {}
    #[doc = include_str!("../../../book/src/channel.md")]
    mod channel {}
    #[doc = include_str!("../../../book/src/pilots.md")]
    mod pilots {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/uncertainty.md")]
    mod uncertainty {}
    #[doc = include_str!("../../../book/src/retraining.md")]
    mod retraining {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
