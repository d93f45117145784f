use std::fs;
use std::path::{Path, PathBuf};

use armi_mtl::harness::synthetic::fixture_64;
use armi_mtl::harness::{
    ensemble_files, evaluate_checkpoint, predict_file, score, train, EncoderSettings,
    PredictionFile, Profile, TrainConfig, TrainData,
};
use armi_mtl::models::{Architecture, Category, TaskSelection, VERTICAL_LAYERS};
use armi_mtl::objectives::{Targets, Task2Loss};
use armi_mtl::text::{load_tsv, split_train_dev, write_tsv, RawExample};
use armi_mtl::ErrorKind;

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic_64.tsv")
}

fn small(arch: Architecture, seed: u64, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::profile(Profile::Toy);
    c.architecture = arch;
    c.seed = seed;
    c.epochs = epochs;
    c.encoder = EncoderSettings {
        num_layers: if arch.head() == armi_mtl::models::HeadKind::Vhatt { VERTICAL_LAYERS + 1 } else { 2 },
        model_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        max_len: 32,
    };
    c
}

fn data(train: Vec<RawExample>) -> TrainData {
    TrainData {
        train,
        ..TrainData::default()
    }
}

#[test]
fn bundled_fixture_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let fresh = dir.path().join("f.tsv");
    write_tsv(&fresh, &fixture_64()).unwrap();
    assert_eq!(fs::read(&fresh).unwrap(), fs::read(fixture_path()).unwrap());
    assert_eq!(load_tsv(&fixture_path()).unwrap(), fixture_64());
}

#[test]
fn last_epoch_loss_is_not_above_first() {
    for arch in Architecture::ALL {
        let (_, report) = train(&small(arch, 3, 6), &data(fixture_64())).unwrap();
        assert_eq!(report.epochs.len(), 6);
        let first = report.epochs[0].loss;
        let last = report.epochs[5].loss;
        assert!(report.epochs.iter().all(|e| e.loss.is_finite()));
        assert!(last <= first, "{arch}: {first} -> {last}");
    }
}

#[test]
fn reports_are_reproducible() {
    let c = small(Architecture::MtVhatt, 9, 2);
    let (a_ckpt, a) = train(&c, &data(fixture_64())).unwrap();
    let (b_ckpt, b) = train(&c, &data(fixture_64())).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a_ckpt.to_bytes(), b_ckpt.to_bytes());
}

#[test]
fn task1_only_training_has_no_task2_parameters() {
    let mut c = small(Architecture::StAtt, 1, 1);
    c.tasks = TaskSelection::Task1;
    let (ckpt, report) = train(&c, &data(fixture_64())).unwrap();
    assert!(ckpt.model.params().names().iter().all(|n| !n.contains("task2")));
    assert!(report.train.task2.is_none());
    assert!(report.epochs.iter().all(|e| e.task2_loss.is_none()));
}

#[test]
fn focal_loss_needs_every_category_in_training() {
    let rows: Vec<RawExample> = fixture_64()
        .into_iter()
        .filter(|e| e.task2_label != Some(Category::Dominance))
        .collect();
    let mut c = small(Architecture::MtCls, 0, 1);
    c.task2_loss = Task2Loss::Fl;
    let err = train(&c, &data(rows.clone())).unwrap_err();
    assert!(err.to_string().contains("Dominance"), "{err}");
    c.task2_loss = Task2Loss::Ce;
    train(&c, &data(rows)).unwrap();
}

#[test]
fn zero_epochs_are_rejected() {
    let mut c = small(Architecture::MtAtt, 0, 1);
    c.epochs = 0;
    assert_eq!(train(&c, &data(fixture_64())).unwrap_err().kind(), ErrorKind::Usage);
}

#[test]
fn evaluation_and_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(Architecture::StCls, 2, 2);
    c.tasks = TaskSelection::Task1;
    let (ckpt, _) = train(&c, &data(fixture_64())).unwrap();

    let three = dir.path().join("three.tsv");
    fs::write(&three, "id\ttext\nz\tصباح 😂\na\thttps://t.co/x\nm\t@user_1 كل يوم\n").unwrap();
    let preds = predict_file(&ckpt, &three).unwrap();
    assert_eq!(preds.ids, ["z", "a", "m"]);
    let out = dir.path().join("p.tsv");
    preds.write(&out).unwrap();
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().skip(1).all(|l| l.split('\t').nth(2) == Some("") && l.ends_with('\t')));
    assert_eq!(PredictionFile::load(&out).unwrap(), preds);

    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "id\ttext\tmisogyny\tcategory\n").unwrap();
    assert_eq!(evaluate_checkpoint(&ckpt, &empty).unwrap_err().kind(), ErrorKind::Data);

    let (mt, _) = train(&small(Architecture::MtCls, 2, 1), &data(fixture_64())).unwrap();
    let m = evaluate_checkpoint(&mt, &fixture_path()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    assert_eq!(json["task2"]["classes"].as_array().unwrap().len(), 8);
    assert_eq!(json["task1"]["classes"].as_array().unwrap().len(), 2);
}

#[test]
fn ensemble_of_seeded_runs_holds_up_on_dev() {
    let (train_rows, dev_rows) = split_train_dev(&fixture_64(), 0.9, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dev_path = dir.path().join("dev.tsv");
    write_tsv(&dev_path, &dev_rows).unwrap();

    let mut files = Vec::new();
    let mut best = [0.0f64; 2];
    for seed in [1, 2, 3] {
        let mut c = TrainConfig::profile(Profile::Toy);
        c.seed = seed;
        let (ckpt, _) = train(
            &c,
            &TrainData {
                train: train_rows.clone(),
                dev: Some(dev_rows.clone()),
                test: None,
            },
        )
        .unwrap();
        let m = evaluate_checkpoint(&ckpt, &dev_path).unwrap();
        best[0] = best[0].max(m.task1.unwrap().accuracy);
        best[1] = best[1].max(m.task2.unwrap().accuracy);
        files.push(predict_file(&ckpt, &dev_path).unwrap());
    }
    let merged = ensemble_files(&files, &[]).unwrap();

    let targets = Targets {
        task1: Some(dev_rows.iter().map(|e| e.task1_label.unwrap().index()).collect()),
        task2: Some(dev_rows.iter().map(|e| e.task2_label.unwrap().index()).collect()),
    };
    let m = score(&merged.logits, &targets).unwrap();
    let acc = [m.task1.unwrap().accuracy, m.task2.unwrap().accuracy];
    for t in 0..2 {
        assert!(acc[t] >= best[t] - 0.05, "task {}: ensemble {} vs best single {}", t + 1, acc[t], best[t]);
    }
}
