//! Uncertainty-aware adversarial retraining.
//!
//! Each iteration scores the validation set with MC-dropout entropy, picks
//! the most uncertain fraction, perturbs those inputs with FGSM and
//! continues training on the training set plus the augmentation. The loop
//! stops after `max_iterations` or once the validation MSE drops below the
//! tolerance.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetExample;
use crate::error::{ensure, Error, Result};
use crate::model::ChannelEstimator;
use crate::nn::{DropoutMode, TrainConfig};
use crate::report::mse;
use crate::seed;
use crate::uncertainty::{mc_predict, summarize, McConfig};

/// What gets added to the training set each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    /// Training set plus FGSM copies of the selected validation inputs.
    #[default]
    AdversarialOnly,
    /// Training set plus the whole validation set.
    Literal,
}

impl fmt::Display for AugmentationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AdversarialOnly => "adversarial",
            Self::Literal => "literal",
        })
    }
}

impl FromStr for AugmentationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adversarial" | "adversarial_only" => Ok(Self::AdversarialOnly),
            "literal" | "literal_d_union_v" => Ok(Self::Literal),
            other => Err(Error::InvalidParameter(format!("unknown mode `{other}` (adversarial, literal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub max_iterations: usize,
    /// Stop once the post-retrain validation MSE is below this.
    pub tolerance: f64,
    pub uncertain_fraction: f64,
    /// Perturbation size in grid units; `None` means 0.05 times the
    /// estimator's input standard deviation.
    pub fgsm_epsilon: Option<f64>,
    pub mode: AugmentationMode,
    pub train: TrainConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            tolerance: 1e-4,
            uncertain_fraction: 0.2,
            fgsm_epsilon: None,
            mode: AugmentationMode::AdversarialOnly,
            train: TrainConfig { max_epochs: 20, ..TrainConfig::default() },
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_iterations >= 1, InvalidParameter, "max_iterations must be >= 1");
        ensure!(!(self.tolerance <= 0.0), InvalidParameter, "tolerance must be positive");
        ensure!(
            self.uncertain_fraction > 0.0 && self.uncertain_fraction <= 1.0,
            InvalidParameter,
            "uncertain fraction {} outside (0, 1]",
            self.uncertain_fraction
        );
        if let Some(eps) = self.fgsm_epsilon {
            ensure!(eps >= 0.0 && eps.is_finite(), InvalidParameter, "FGSM epsilon must be finite and >= 0");
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Validation-set positions chosen for augmentation.
    pub selected: Vec<usize>,
    pub val_mse_before: f64,
    pub val_mse_after: f64,
    pub mean_uncertainty_before: f64,
    pub mean_uncertainty_after: f64,
    pub trainset_size: usize,
}

impl IterationRecord {
    pub const CSV_HEADER: &'static str =
        "iteration,val_mse_before,val_mse_after,mean_uncertainty_before,mean_uncertainty_after,num_selected,trainset_size";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration,
            self.val_mse_before,
            self.val_mse_after,
            self.mean_uncertainty_before,
            self.mean_uncertainty_after,
            self.selected.len(),
            self.trainset_size
        )
    }
}

/// Mean scalar entropy of the MC prediction for each example. Example `j`
/// runs its passes from `derive(mc.base_seed, j)`.
pub fn score_uncertainty(est: &ChannelEstimator, examples: &[DatasetExample], mc: &McConfig) -> Result<Vec<f64>> {
    ensure!(!examples.is_empty(), InvalidParameter, "no examples to score");
    mc.validate()?;
    examples
        .par_iter()
        .enumerate()
        .map(|(j, ex)| {
            let cfg = McConfig { base_seed: seed::derive(mc.base_seed, j as u64), ..mc.clone() };
            let pred = mc_predict(&est.net, &est.encode(&ex.input)?, &cfg)?;
            Ok(summarize(&pred, mc.alpha)?.scalar_entropy)
        })
        .collect()
}

/// Positions of the `ceil(fraction * N)` highest scores, ascending. Ties at
/// the cutoff go to the lower position.
pub fn select_uncertain(scores: &[f64], fraction: f64) -> Result<Vec<usize>> {
    ensure!(!scores.is_empty(), InvalidParameter, "no scores to select from");
    ensure!(fraction > 0.0 && fraction <= 1.0, InvalidParameter, "fraction {fraction} outside (0, 1]");
    let k = ((fraction * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// FGSM: moves every real and imaginary input component by `epsilon`
/// (grid units) in the sign of the loss gradient at the true target.
pub fn fgsm_perturb(est: &ChannelEstimator, ex: &DatasetExample, epsilon: f64) -> Result<DatasetExample> {
    ensure!(epsilon >= 0.0 && epsilon.is_finite(), InvalidParameter, "FGSM epsilon must be finite and >= 0");
    let s = est.sample(ex)?;
    let grad = est.net.backward(&s.input, &s.target, DropoutMode::Off)?.input;
    let sign = |g: f64| if g > 0.0 { epsilon } else if g < 0.0 { -epsilon } else { 0.0 };
    let (rows, cols) = ex.input.shape();
    let plane = rows * cols;
    let mut out = ex.clone();
    for c in 0..cols {
        for (r, z) in out.input.column_mut(c).iter_mut().enumerate() {
            z.re += sign(grad.data[r * cols + c]);
            z.im += sign(grad.data[plane + r * cols + c]);
        }
    }
    out.meta.adversarial = true;
    Ok(out)
}

/// Mean dropout-off MSE over `examples`, in grid units.
pub fn validation_mse(est: &ChannelEstimator, examples: &[DatasetExample]) -> Result<f64> {
    ensure!(!examples.is_empty(), InvalidParameter, "empty validation set");
    let per = examples
        .par_iter()
        .map(|ex| mse(&est.predict(&ex.input)?, &ex.target))
        .collect::<Result<Vec<_>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the loop from `est`, warm-starting each iteration from the previous
/// weights. Iteration `t` trains with seed `derive(cfg.train.seed, t)`.
/// The same MC seeds are used throughout, so one iteration's "after" scores
/// are the next iteration's "before" scores.
pub fn retrain_loop(
    est: &ChannelEstimator,
    train_set: &[DatasetExample],
    val_set: &[DatasetExample],
    cfg: &RetrainConfig,
    mc: &McConfig,
) -> Result<(ChannelEstimator, Vec<IterationRecord>)> {
    cfg.validate()?;
    ensure!(!train_set.is_empty(), InvalidParameter, "empty training set");
    ensure!(!val_set.is_empty(), InvalidParameter, "empty validation set");
    let epsilon = cfg.fgsm_epsilon.unwrap_or(0.05 * est.sigma);

    let mut current = est.clone();
    let mut val_before = validation_mse(&current, val_set)?;
    let mut scores = score_uncertainty(&current, val_set, mc)?;
    let mut records = Vec::with_capacity(cfg.max_iterations);

    for t in 1..=cfg.max_iterations {
        let selected = select_uncertain(&scores, cfg.uncertain_fraction)?;
        let augmentation: Vec<DatasetExample> = match cfg.mode {
            AugmentationMode::AdversarialOnly => selected
                .par_iter()
                .map(|&j| fgsm_perturb(&current, &val_set[j], epsilon))
                .collect::<Result<_>>()?,
            AugmentationMode::Literal => val_set.to_vec(),
        };
        let mut combined = train_set.to_vec();
        combined.extend(augmentation);

        let train_cfg = TrainConfig { seed: seed::derive(cfg.train.seed, t as u64), ..cfg.train.clone() };
        let (next, _) = current.train(&combined, val_set, &train_cfg)?;
        let val_after = validation_mse(&next, val_set)?;
        let scores_after = score_uncertainty(&next, val_set, mc)?;

        records.push(IterationRecord {
            iteration: t,
            selected,
            val_mse_before: val_before,
            val_mse_after: val_after,
            mean_uncertainty_before: mean(&scores),
            mean_uncertainty_after: mean(&scores_after),
            trainset_size: combined.len(),
        });
        current = next;
        val_before = val_after;
        scores = scores_after;
        if val_after < cfg.tolerance {
            break;
        }
    }
    Ok((current, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ProfileName;
    use crate::dataset::ExampleMeta;
    use crate::signal::ComplexGrid;
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn toy(n: usize, seed: u64) -> Vec<DatasetExample> {
        let mut rng = seed::rng(seed);
        (0..n)
            .map(|i| {
                let input = ComplexGrid::from_fn(6, 4, |_, _| {
                    use rand::Rng;
                    Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                });
                let target = ComplexGrid::from_fn(6, 4, |r, c| input.get(r, c) * 0.5);
                DatasetExample {
                    input,
                    target,
                    meta: ExampleMeta {
                        index: i,
                        profile: ProfileName::TdlB,
                        delay_spread_ns: 10.0,
                        doppler_hz: 10.0,
                        snr_db: 5.0,
                        seed: i as u64,
                        adversarial: false,
                    },
                }
            })
            .collect()
    }

    fn estimator(arch: &str) -> ChannelEstimator {
        ChannelEstimator::new(&arch.parse().unwrap(), 6, 4, 2).unwrap()
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_uncertain(&[0.1, 0.9, 0.5], 0.3).unwrap(), vec![1]);
        assert_eq!(select_uncertain(&[0.1, 0.9, 0.5], 1.0).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_uncertain(&[0.5, 0.7, 0.5, 0.5], 0.5).unwrap(), vec![0, 1]);
        assert!(select_uncertain(&[], 0.5).is_err());
        assert!(select_uncertain(&[1.0], 0.0).is_err());
    }

    #[test]
    fn scores_without_dropout_sit_on_the_floor() {
        let est = estimator("conv3x3:4,relu,dropout:0.0,conv3x3:2");
        let exs = toy(3, 1);
        let s = score_uncertainty(&est, &exs, &McConfig { num_passes: 4, ..Default::default() }).unwrap();
        let floor = crate::uncertainty::gaussian_entropy(0.0);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|&v| (v - floor).abs() < 1e-12));
    }

    #[test]
    fn scores_match_direct_recomputation() {
        let est = estimator("conv3x3:4,relu,dropout:0.2,conv3x3:2");
        let exs = toy(3, 4);
        let mc = McConfig { num_passes: 6, base_seed: 77, alpha: 0.05 };
        let s = score_uncertainty(&est, &exs, &mc).unwrap();
        for (j, ex) in exs.iter().enumerate() {
            let cfg = McConfig { base_seed: seed::derive(77, j as u64), ..mc.clone() };
            let pred = mc_predict(&est.net, &est.encode(&ex.input).unwrap(), &cfg).unwrap();
            assert!((summarize(&pred, 0.05).unwrap().scalar_entropy - s[j]).abs() < 1e-12);
        }
        assert!(score_uncertainty(&est, &[], &mc).is_err());
    }

    #[test]
    fn fgsm_basics() {
        let est = estimator("conv1x1:2");
        let ex = &toy(1, 3)[0];
        assert_eq!(fgsm_perturb(&est, ex, 0.0).unwrap().input, ex.input);
        let eps = 0.01;
        let adv = fgsm_perturb(&est, ex, eps).unwrap();
        assert!(adv.meta.adversarial);
        assert_eq!(adv.target, ex.target);
        for (a, b) in adv.input.as_slice().iter().zip(ex.input.as_slice()) {
            for d in [a.re - b.re, a.im - b.im] {
                assert!(d.abs() < 1e-15 || (d.abs() - eps).abs() < 1e-12, "{d}");
            }
        }
        let loss = |e: &DatasetExample| mse(&est.predict(&e.input).unwrap(), &e.target).unwrap();
        assert!(loss(&adv) >= loss(ex));
    }

    #[test]
    fn loop_exits_and_monotone_validation() {
        let est = estimator("conv3x3:4,relu,dropout:0.1,conv3x3:2");
        let (d, v) = (toy(12, 5), toy(5, 6));
        let mc = McConfig { num_passes: 4, ..Default::default() };
        let mut cfg = RetrainConfig { max_iterations: 3, ..Default::default() };
        cfg.train.max_epochs = 3;
        cfg.train.batch_size = 4;
        cfg.train.learning_rate = 0.01;
        let (_, recs) = retrain_loop(&est, &d, &v, &cfg, &mc).unwrap();
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert!(r.val_mse_after <= r.val_mse_before);
            assert_eq!(r.selected.len(), 1);
            assert_eq!(r.trainset_size, 13);
        }
        assert_eq!(recs[1].val_mse_before, recs[0].val_mse_after);
        assert_eq!(recs[1].mean_uncertainty_before, recs[0].mean_uncertainty_after);
        let again = retrain_loop(&est, &d, &v, &cfg, &mc).unwrap().1;
        assert_eq!(again, recs);

        cfg.tolerance = f64::INFINITY;
        assert_eq!(retrain_loop(&est, &d, &v, &cfg, &mc).unwrap().1.len(), 1);
        cfg.tolerance = 1e-4;
        cfg.mode = AugmentationMode::Literal;
        let lit = retrain_loop(&est, &d, &v, &cfg, &mc).unwrap().1;
        assert!(lit.iter().all(|r| r.trainset_size == 17));
        assert!(retrain_loop(&est, &[], &v, &cfg, &mc).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("literal".parse::<AugmentationMode>().unwrap(), AugmentationMode::Literal);
        assert_eq!("adversarial".parse::<AugmentationMode>().unwrap(), AugmentationMode::AdversarialOnly);
        assert!("both".parse::<AugmentationMode>().is_err());
    }

    proptest! {
        #[test]
        fn selection_size_and_order(scores in proptest::collection::vec(0.0f64..1.0, 1..40), f in 0.01f64..=1.0) {
            let sel = select_uncertain(&scores, f).unwrap();
            let k = (f * scores.len() as f64).ceil() as usize;
            prop_assert_eq!(sel.len(), k.clamp(1, scores.len()));
            let min_sel = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
            for i in (0..scores.len()).filter(|i| !sel.contains(i)) {
                prop_assert!(scores[i] <= min_sel);
            }
        }
    }
}
