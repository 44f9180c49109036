mod common;

use std::fs;
use std::path::Path;

use cod_core::harness::dataset::{load_dataset, Manifest, Split};
use cod_core::harness::train::{
    evaluate, load_checkpoint, prepare_dataset, save_predictions, train, BEST_CHECKPOINT, LOG_FILE,
};
use cod_core::imageio;
use cod_core::metrics::evaluate_dataset;
use cod_core::Tensor;

use common::uniform;

fn write_pair(root: &Path, name: &str, seed: u64, side: usize) {
    let img = uniform([1, 3, side, side], seed, 0.0, 1.0);
    let mask = Tensor::from_fn([1, 1, side, side], |_, _, y, x| ((y + x + seed as usize) % 5 == 0) as u8 as f64);
    imageio::save_rgb(&root.join("Image").join(format!("{name}.png")), &img).unwrap();
    imageio::save_gray(&root.join("GT").join(format!("{name}.png")), &mask).unwrap();
}

fn folder(names: &[&str]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("Image")).unwrap();
    fs::create_dir_all(dir.path().join("GT")).unwrap();
    for (i, n) in names.iter().enumerate() {
        write_pair(dir.path(), n, i as u64, 12);
    }
    dir
}

#[test]
fn folder_pairs_by_stem_and_records_orphans() {
    let dir = folder(&["a", "b", "c"]);
    imageio::save_rgb(&dir.path().join("Image/orphan.png"), &uniform([1, 3, 12, 12], 9, 0.0, 1.0)).unwrap();
    imageio::save_gray(&dir.path().join("GT/lonely.png"), &Tensor::zeros([1, 1, 12, 12])).unwrap();
    let ds = load_dataset(dir.path(), None).unwrap();
    let names: Vec<_> = ds.samples().iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["a", "b", "c"]);
    assert_eq!(ds.unpaired, ["lonely", "orphan"]);
    let small = load_dataset(dir.path(), Some(8)).unwrap();
    assert_eq!(small.get(0).image.hw(), (8, 8));
    assert!(small.get(0).mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn mismatched_pair_is_an_error() {
    let dir = folder(&["a"]);
    imageio::save_gray(&dir.path().join("GT/a.png"), &Tensor::zeros([1, 1, 7, 12])).unwrap();
    assert!(load_dataset(dir.path(), None).is_err());
    assert!(load_dataset(&dir.path().join("missing"), None).is_err());
}

#[test]
fn published_split_sizes() {
    let rows: Vec<_> = ["CAMO", "COD10K", "CHAMELEON", "NC4K"]
        .iter()
        .map(|n| {
            let m = Manifest::by_name(n).unwrap();
            (m.expected(Split::Train), m.expected(Split::Test))
        })
        .collect();
    assert_eq!(rows, [(1000, 250), (3040, 2026), (0, 76), (0, 4121)]);
    assert!(Manifest::by_name("cod10k").unwrap().check(Split::Test, 2025).is_err());
    assert!(Manifest::by_name("imagenet").is_none());
}

#[test]
fn scoring_ground_truth_against_itself_is_perfect() {
    let dir = folder(&["a", "b"]);
    let gt = dir.path().join("GT");
    let report = evaluate_dataset(&gt, &gt).unwrap();
    assert_eq!(report.n_images, 2);
    assert_eq!(report.mae, 0.0);
    for v in [report.s_measure, report.f_beta, report.weighted_f, report.e_measure] {
        assert!((v - 1.0).abs() < 1e-9, "{report:?}");
    }
}

#[test]
fn training_writes_artifacts_and_checkpoints_round_trip() {
    let cfg = common::quick_config();
    let data = prepare_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &data, Some(dir.path())).unwrap();

    let train_len = data.len() - (cfg.val_fraction * data.len() as f64).round() as usize;
    assert_eq!(out.augment_calls, cfg.epochs * train_len);
    assert!(out.best_val_mae.is_some());
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), out.steps + cfg.epochs);
    assert!(dir.path().join("config.txt").is_file());

    let ck = load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(ck.config.to_text(), cfg.to_text());
    let a = evaluate(&out.net, &out.best, &data, 1).unwrap();
    let b = evaluate(&ck.net, &ck.store, &data, 1).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.report, b.report);

    let preds = dir.path().join("pred");
    save_predictions(&preds, &data, &a.predictions).unwrap();
    assert_eq!(fs::read_dir(&preds).unwrap().count(), data.len());
}

#[test]
fn evaluation_never_augments() {
    let mut cfg = common::quick_config();
    cfg.val_fraction = 0.5;
    let data = prepare_dataset(&cfg).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    assert_eq!(out.augment_calls, cfg.epochs * data.len() / 2);
    let a = evaluate(&out.net, &out.best, &data, 1).unwrap();
    let b = evaluate(&out.net, &out.best, &data, 2).unwrap();
    assert_eq!(a.predictions, b.predictions);
}
