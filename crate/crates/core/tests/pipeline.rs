use chanest::dataset::*;
use chanest::error::Error;
use chanest::model::{input_sigma, ChannelEstimator, Checkpoint};
use chanest::nn::TrainConfig;
use chanest::report::{evaluate, mse};
use chanest::uncertainty::McConfig;

fn small(n: usize, seed: u64) -> Dataset {
    generate_dataset(&DatasetSpec { num_examples: n, master_seed: seed, ..Default::default() }).unwrap()
}

#[test]
fn dataset_roundtrip_and_determinism() {
    let ds = small(3, 21);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&ds, a.path()).unwrap();
    save_dataset(&small(3, 21), b.path()).unwrap();
    for f in [MANIFEST_FILE, EXAMPLES_FILE] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    assert_eq!(load_dataset(a.path()).unwrap(), ds);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    let first = &manifest["examples"][0];
    for key in ["index", "profile", "delay_spread_ns", "doppler_hz", "snr_db", "seed"] {
        assert!(!first[key].is_null(), "{key}");
    }
    assert_eq!(manifest["version"], 1);
}

#[test]
fn truncated_or_mismatched_files_are_format_errors() {
    let ds = small(2, 4);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let bin = dir.path().join(EXAMPLES_FILE);
    let bytes = std::fs::read(&bin).unwrap();

    std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));

    let mut extra = bytes.clone();
    extra.extend_from_slice(&bytes[..bytes.len() / 2]);
    std::fs::write(&bin, &extra).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    std::fs::write(&bin, &bad_magic).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));

    std::fs::write(&bin, &bytes).unwrap();
    std::fs::write(dir.path().join(MANIFEST_FILE), b"{ not json").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
}

#[test]
fn split_of_default_size() {
    let spec = DatasetSpec { num_examples: 256, ..Default::default() };
    let template = small(1, 0).examples.remove(0);
    let ds = Dataset {
        version: FORMAT_VERSION,
        spec,
        examples: (0..256)
            .map(|i| {
                let mut e = template.clone();
                e.meta.index = i;
                e
            })
            .collect(),
    };
    let (train, val) = split(&ds, 0.8, 9).unwrap();
    assert_eq!((train.len(), val.len()), (204, 52));
}

#[test]
fn evaluation_aggregates_and_perfect_predictor() {
    let ds = small(4, 8);
    let mut est = ChannelEstimator::new(&"conv3x3:4,relu,dropout:0.1,conv3x3:2".parse().unwrap(), 612, 14, 1).unwrap();
    est.sigma = input_sigma(&ds.examples).unwrap();
    let mc = McConfig { num_passes: 4, ..Default::default() };
    let r = evaluate(&est, &ds.examples, &mc).unwrap();
    assert_eq!(r.rows.len(), 4);
    let mean_nn = r.rows.iter().map(|x| x.nn_mse).sum::<f64>() / 4.0;
    let mean_base = r.rows.iter().map(|x| x.baseline_mse).sum::<f64>() / 4.0;
    assert!((r.mean_nn_mse - mean_nn).abs() < 1e-12);
    assert!((r.mean_baseline_mse - mean_base).abs() < 1e-12);
    for (row, ex) in r.rows.iter().zip(&ds.examples) {
        assert_eq!(row.baseline_mse, mse(&ex.input, &ex.target).unwrap());
    }

    // Identity 1x1 convolution fed the target: a perfect predictor.
    let mut ident = ChannelEstimator::new(&"conv1x1:2".parse().unwrap(), 612, 14, 1).unwrap();
    ident.sigma = est.sigma;
    let mut params = ident.net.params_mut();
    params[0].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    params[1].fill(0.0);
    let mut exact = ds.clone();
    for e in &mut exact.examples {
        e.input = e.target.clone();
    }
    let r = evaluate(&ident, &exact.examples, &McConfig { num_passes: 2, ..Default::default() }).unwrap();
    assert!(r.mean_nn_mse < 1e-24, "{}", r.mean_nn_mse);
    assert!(matches!(evaluate(&est, &[], &mc), Err(Error::InvalidParameter(_))));
}

#[test]
fn training_then_checkpoint_reload_predicts_identically() {
    let ds = small(6, 13);
    let (train, val) = split(&ds, 0.5, 1).unwrap();
    let mut est = ChannelEstimator::new(&"conv3x3:4,relu,dropout:0.1,conv3x3:2".parse().unwrap(), 612, 14, 2).unwrap();
    est.sigma = input_sigma(&train.examples).unwrap();
    let cfg = TrainConfig { max_epochs: 2, batch_size: 2, ..Default::default() };
    let (mut trained, report) = est.train(&train.examples, &val.examples, &cfg).unwrap();
    assert!(report.best_val_loss() <= report.initial_val_loss);
    trained.net.quantize_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.nnck");
    Checkpoint { estimator: trained.clone(), train_config: cfg, seed: 2 }.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().estimator;
    let x = &val.examples[0].input;
    assert_eq!(back.predict(x).unwrap(), trained.predict(x).unwrap());
}
