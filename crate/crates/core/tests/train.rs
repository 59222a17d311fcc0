use std::path::Path;

use rev2net::data::{gen_dataset, Domain, Split, SynthConfig};
use rev2net::flow::TvL1Params;
use rev2net::loss::{DdpMode, LossWeights};
use rev2net::model::{Rev2Net, Rev2NetConfig};
use rev2net::nn::ParamSet;
use rev2net::train::*;
use rev2net::Error;

fn tiny_model() -> Rev2NetConfig {
    Rev2NetConfig {
        frames: 4,
        height: 16,
        width: 16,
        encoder_widths: [2, 4, 4, 4],
        latent_dim: 2,
        decoder_width: 2,
        frame_decoder_width: 2,
        ..Default::default()
    }
}

/// A tiny two-domain dataset with flows for every clip.
fn setup(root: &Path, clips_per_cell: usize) -> (RunConfig, Dataset) {
    let data_dir = root.join("data");
    gen_dataset(clips_per_cell, 5, &data_dir, SynthConfig { frames: 4, height: 16, width: 16 }).unwrap();
    let run = RunConfig {
        model: tiny_model(),
        train: TrainConfig {
            epochs: 2,
            batch_size: 4,
            manifest: Some(data_dir),
            output_dir: Some(root.join("out")),
            ..Default::default()
        },
        flow: TvL1Params { warps: 1, iterations: 5, ..Default::default() },
        ..Default::default()
    };
    let (manifest, mut data) = run.load_dataset().unwrap();
    let all: Vec<usize> = (0..data.samples.len()).collect();
    run.attach_flows(&manifest, &mut data, &all).unwrap();
    (run, data)
}

fn read_steps(dir: &Path) -> Vec<StepRecord> {
    std::fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn same_seed_reproduces_losses() {
    let dir = tempfile::tempdir().unwrap();
    let (run, data) = setup(dir.path(), 2);
    let cfg = TrainConfig { output_dir: None, domain: Some(Domain::A), ..run.train.clone() };
    let sel = Selection::from_config(&data, &cfg).unwrap();

    let run64 = || {
        let mut m = Rev2Net::<f64>::build(&run.model, cfg.seed).unwrap();
        train(&mut m, &cfg, &data, &sel).unwrap()
    };
    let (a, b) = (run64(), run64());
    assert!((a.last().loss.total - b.last().loss.total).abs() <= 1e-6);
    assert_eq!(a.data_order, b.data_order);

    let (_, a) = train_variant(&run.model, &cfg, &data, &sel).unwrap();
    let (_, b) = train_variant(&run.model, &cfg, &data, &sel).unwrap();
    assert_eq!(a.last().loss.total.to_bits(), b.last().loss.total.to_bits());
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn ddp_off_never_evaluates_discrepancy_terms() {
    let dir = tempfile::tempdir().unwrap();
    let (run, data) = setup(dir.path(), 2);
    let model = Rev2NetConfig { ddp_mode: DdpMode::Off, ..run.model.clone() };
    let sel = Selection::from_config(&data, &run.train).unwrap();
    train_variant(&model, &run.train, &data, &sel).unwrap();
    let steps = read_steps(run.train.output_dir.as_ref().unwrap());
    assert!(!steps.is_empty());
    for s in steps {
        let b = s.loss;
        assert_eq!((b.ddp_high, b.ddp_low), (0.0, 0.0));
        assert_eq!(b.weights, LossWeights::default());
        assert!((b.total - (b.ce + 0.1 * b.flow + 0.1 * b.recon)).abs() <= 1e-6 * b.total.abs().max(1.0));
    }
}

#[test]
fn epoch_means_match_logged_steps() {
    let dir = tempfile::tempdir().unwrap();
    let (run, data) = setup(dir.path(), 2);
    let sel = Selection::from_config(&data, &run.train).unwrap();
    let (_, report) = train_variant(&run.model, &run.train, &data, &sel).unwrap();
    let out = run.train.output_dir.as_ref().unwrap();
    let steps = read_steps(out);
    assert_eq!(report.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2]);
    for e in &report.epochs {
        let mine: Vec<f64> = steps.iter().filter(|s| s.epoch == e.epoch).map(|s| s.loss.total).collect();
        assert_eq!(mine.len(), e.steps);
        let mean = mine.iter().sum::<f64>() / mine.len() as f64;
        assert!((mean - e.loss.total).abs() <= 1e-6);
        assert!((0.0..=1.0).contains(&e.train_accuracy));
        assert!((0.0..=1.0).contains(&e.test_accuracy.unwrap()));
    }
    // The report on disk round-trips.
    let text = std::fs::read_to_string(out.join(REPORT_FILE)).unwrap();
    let back: TrainReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back.epochs, report.epochs);
}

#[test]
fn checkpoint_and_export_reproduce_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (run, data) = setup(dir.path(), 2);
    let sel = Selection::from_config(&data, &run.train).unwrap();
    let (model, report) = train_variant(&run.model, &run.train, &data, &sel).unwrap();
    let recorded = report.last().test_accuracy.unwrap();
    let back = Rev2Net::<f32>::load(report.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(evaluate(&back, &data, Split::Test, None, Modality::Rgb).unwrap(), recorded);
    let exported = model.export_inference().unwrap();
    assert_eq!(evaluate(&exported, &data, Split::Test, None, Modality::Rgb).unwrap(), recorded);
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let manifest = gen_dataset(9, 11, &data_dir, SynthConfig { frames: 4, height: 16, width: 16 }).unwrap();
    let data = Dataset::from_manifest(&manifest).unwrap();
    let all: Vec<usize> = (0..data.samples.len()).collect();
    assert!(all.len() >= 100);
    let model = Rev2Net::<f32>::build(&tiny_model(), 3).unwrap();
    let acc = accuracy(&model, &data, &all, Modality::Rgb, 16).unwrap();
    assert!((acc - 1.0 / 6.0).abs() <= 0.15, "{acc}");
}

#[test]
fn empty_split_and_missing_flow_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let manifest = gen_dataset(2, 1, &data_dir, SynthConfig { frames: 4, height: 16, width: 16 }).unwrap();
    let data = Dataset::from_manifest(&manifest).unwrap();
    let model = Rev2Net::<f32>::build(&tiny_model(), 0).unwrap();
    assert!(matches!(accuracy(&model, &data, &[], Modality::Rgb, 4), Err(Error::InvalidInput(_))));

    // No flows were attached, so the flow decoder has no target.
    let sel = Selection::from_config(&data, &TrainConfig::default()).unwrap();
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let mut m = Rev2Net::<f32>::build(&tiny_model(), 0).unwrap();
    match train(&mut m, &cfg, &data, &sel) {
        Err(Error::Data(msg)) => assert!(msg.contains("missing flow target for clip"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn grid_structure_and_tie_break() {
    let mut calls = 0;
    let r = coordinate_search(LossWeights::default(), 1, |_| {
        calls += 1;
        Ok(0.5)
    })
    .unwrap();
    for w in WeightName::ALL {
        let coarse: Vec<f64> = r.stage_cells(1, w).iter().map(|c| c.value).collect();
        assert_eq!(coarse, COARSE_GRID.to_vec());
        assert_eq!(r.stage_cells(2, w).len(), 5);
    }
    // Every cell ties, so every weight settles on zero.
    assert_eq!(r.stage1_best, LossWeights { alpha: 0.0, beta: 0.0, lambda_flow: 0.0, lambda_im: 0.0 });
    assert_eq!(r.best, r.stage1_best);
    assert!(calls < r.cells.len());

    let dir = tempfile::tempdir().unwrap();
    let (mut run, data) = setup(dir.path(), 2);
    run.grid.epochs_per_cell = 0;
    let sel = Selection::from_config(&data, &run.train).unwrap();
    assert!(matches!(grid_search(&run, &data, &sel), Err(Error::InvalidInput(_))));
}

#[test]
fn ablation_rows_share_data_order() {
    let dir = tempfile::tempdir().unwrap();
    let (mut run, data) = setup(dir.path(), 2);
    run.train.epochs = 1;
    let sel = Selection::from_config(&data, &run.train).unwrap();
    let report = ablation_suite(&run, &data, &sel).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ABLATION_VARIANTS.to_vec());
    assert!(report.rows.iter().all(|r| r.data_order == report.rows[0].data_order));

    let no_frame = ParamSet::<f32>::load(report.rows[0].checkpoint.as_ref().unwrap()).unwrap();
    assert!(no_frame.names().all(|n| !n.starts_with("frame-decoder")));
    assert!(no_frame.names().any(|n| n.starts_with("flow-decoder")));
    let no_flow = ParamSet::<f32>::load(report.rows[1].checkpoint.as_ref().unwrap()).unwrap();
    assert!(no_flow.names().all(|n| !n.starts_with("flow-decoder")));

    let out = run.train.output_dir.as_ref().unwrap();
    assert!(out.join("ablation.json").exists());
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn cross_domain_grid_and_single_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let (mut run, data) = setup(dir.path(), 2);
    run.train.epochs = 1;
    let report = cross_domain(&run, &data).unwrap();
    assert_eq!(report.rows.len(), 6);
    for r in &report.rows {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_ne!(r.source, r.target);
        if r.variant == "Rev2Net" {
            assert_eq!(r.input, "RGB");
        }
    }
    assert_eq!(report.rows.iter().filter(|r| r.input == "Flow").count(), 2);
    assert!(!report.observation.is_empty());

    let only_a = Dataset {
        samples: data.samples.iter().filter(|s| s.clip.domain == Domain::A).cloned().collect(),
    };
    assert!(matches!(cross_domain(&run, &only_a), Err(Error::InvalidInput(_))));
}

#[test]
fn strict_config_parsing() {
    assert!(RunConfig::from_json("{}").is_ok());
    assert!(matches!(RunConfig::from_json(r#"{"train": {"epochz": 3}}"#), Err(Error::Config { .. })));
    match RunConfig::from_json(r#"{"model": {"weights": {"alpha": -1}}}"#) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "weights.alpha"),
        other => panic!("{other:?}"),
    }
    match RunConfig::from_json(r#"{"train": {"optimizer": {"lr": 0}}}"#) {
        Err(Error::Config { field, .. }) => assert!(field.contains("lr"), "{field}"),
        other => panic!("{other:?}"),
    }
}
