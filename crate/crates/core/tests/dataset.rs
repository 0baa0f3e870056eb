use std::path::Path;

use bitalign::data::{dataset_hash, generate, generate_synthetic, Dataset, SyntheticSpec};
use bitalign::pipeline::BitAlignModel;
use bitalign::{Error, ModelConfig};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        train: 6,
        val: 3,
        ..Default::default()
    }
}

fn write(dir: &Path, spec: &SyntheticSpec) {
    generate_synthetic(spec, dir).unwrap();
}

#[test]
fn written_dataset_reads_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    write(dir.path(), &spec);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.meta.classes, spec.labels());
    assert_eq!(ds.meta.mode.as_deref(), Some("both"));
    let (train, val) = generate(&spec).unwrap();
    for (split, rendered) in [("train", &train), ("val", &val)] {
        let loaded = ds.load_split(split).unwrap();
        assert_eq!(loaded.len(), rendered.len());
        for (a, b) in loaded.iter().zip(rendered.iter()) {
            assert_eq!(a, &b.sample, "{}", a.id);
        }
    }
}

#[test]
fn hash_is_stable_and_seed_sensitive() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write(a.path(), &small_spec());
    write(b.path(), &small_spec());
    write(c.path(), &SyntheticSpec { seed: 9, ..small_spec() });
    assert_eq!(dataset_hash(a.path()).unwrap(), dataset_hash(b.path()).unwrap());
    assert_ne!(dataset_hash(a.path()).unwrap(), dataset_hash(c.path()).unwrap());
}

#[test]
fn missing_depth_names_sample_and_file() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &small_spec());
    std::fs::remove_file(dir.path().join("train/train_00002.depth.pgm")).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let results: Vec<_> = ds.iter("train").unwrap().collect();
    assert!(results[0].is_ok() && results[1].is_ok() && results[3].is_ok());
    match &results[2] {
        Err(Error::Sample { id, path, .. }) => {
            assert_eq!(id, "train_00002");
            assert!(path.ends_with("train_00002.depth.pgm"));
        }
        other => panic!("expected a sample error, got {other:?}"),
    }
}

#[test]
fn unknown_label_and_wrong_size_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &small_spec());
    std::fs::write(dir.path().join("val/val_00000.label.txt"), "juggle\n").unwrap();
    let big = SyntheticSpec { side: 96, ..small_spec() };
    let other = tempfile::tempdir().unwrap();
    write(other.path(), &big);
    std::fs::copy(other.path().join("val/val_00001.rgb.ppm"), dir.path().join("val/val_00001.rgb.ppm")).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let msg = ds.load_sample("val", "val_00000").unwrap_err().to_string();
    assert!(msg.contains("juggle") && msg.contains("label.txt"), "{msg}");
    let msg = ds.load_sample("val", "val_00001").unwrap_err().to_string();
    assert!(msg.contains("rgb.ppm") && msg.contains("dimensions"), "{msg}");
    assert!(ds.load_split("nope").is_err());
}

#[test]
fn missing_ground_truth_is_optional() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &small_spec());
    std::fs::remove_file(dir.path().join("val/val_00001.gt.pgm")).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let val = ds.load_split("val").unwrap();
    assert!(val[0].gt.is_some() && val[1].gt.is_none());
    let model = BitAlignModel::build(&ModelConfig::toy()).unwrap();
    let report = bitalign::metrics::evaluate(&model, &val, 1).unwrap();
    assert_eq!((report.count, report.skipped), (2, 1));
}

#[test]
fn checkpoint_with_other_class_count_names_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k6.ckpt");
    BitAlignModel::build(&ModelConfig::toy()).unwrap().checkpoint().save(&path).unwrap();
    let ckpt = bitalign::Checkpoint::load(&path).unwrap();
    let four = ModelConfig {
        labels: ["hold", "cut", "pour", "press"].map(String::from).to_vec(),
        ..ModelConfig::toy()
    };
    let mut model = BitAlignModel::build(&four).unwrap();
    match model.load_state(&ckpt) {
        Err(Error::ShapeMismatch { name, expected, found }) => {
            assert!(name.starts_with("head."), "{name}");
            assert_eq!((expected.last(), found.last()), (Some(&4), Some(&6)));
        }
        other => panic!("expected a head shape mismatch, got {other:?}"),
    }
}
