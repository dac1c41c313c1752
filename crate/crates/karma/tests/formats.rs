use karma::config::{Config, ConfigError};
use karma::store::{load_checkpoint, read_dataset, save_checkpoint, write_dataset, StoreError};
use karma::tensor_file::{decode, encode, read_tensor, write_tensor, FormatError, TensorData};
use karma_core::synth::SynthSpec;
use karma_core::train::{evaluate, Dataset};
use karma_core::{Model, ModelConfig, Tensor, Variant};
use proptest::prelude::*;

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn f64_round_trip_is_bit_exact(shape in prop::collection::vec(0usize..4, 0..5), seed in any::<u64>()) {
        let mut s = karma_core::hash::SplitMix::new(seed);
        let n: usize = shape.iter().product();
        // include awkward values: signed zero, subnormals, extremes
        let special = [0.0, -0.0, f64::MIN_POSITIVE / 4.0, f64::MAX, -1e-300];
        let data: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { special[i % special.len()] } else { s.range(-1e6, 1e6) }).collect();
        let t = Tensor::new(&shape, data).unwrap();
        let back = decode(&encode(&TensorData::F64(t.clone()))).unwrap().into_f64().unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn u8_round_trip(data in prop::collection::vec(any::<u8>(), 0..64)) {
        let t = TensorData::U8 { shape: vec![data.len()], data };
        prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
    }

    #[test]
    fn truncation_is_always_reported(cut in 0usize..40) {
        let t = TensorData::F64(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = encode(&t);
        let cut = cut.min(b.len() - 1);
        let is_truncated = matches!(decode(&b[..cut]), Err(FormatError::Truncated { .. }));
        prop_assert!(is_truncated);
    }
}

#[test]
fn scalar_and_empty_shapes() {
    for t in [Tensor::scalar(2.5), Tensor::zeros(&[0]), Tensor::zeros(&[3, 0, 2])] {
        let back = decode(&encode(&TensorData::F64(t.clone()))).unwrap().into_f64().unwrap();
        assert_eq!(back, t);
    }
}

#[test]
fn decode_errors_are_distinct() {
    let good = encode(&TensorData::F64(Tensor::new(&[1], vec![1.0]).unwrap()));
    let mut v = good.clone();
    v[4] = 2;
    assert!(matches!(decode(&v), Err(FormatError::Version(2))));
    let mut v = good.clone();
    v.push(0);
    assert!(matches!(decode(&v), Err(FormatError::Trailing(1))));
    let u8s = encode(&TensorData::U8 { shape: vec![1], data: vec![3] });
    assert!(matches!(decode(&u8s).unwrap().into_f64(), Err(FormatError::WrongDtype { .. })));
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.tnsr");
    let t = TensorData::U8 { shape: vec![2, 3], data: vec![0, 1, 2, 3, 4, 5] };
    write_tensor(&p, &t).unwrap();
    assert_eq!(read_tensor(&p).unwrap(), t);
    assert!(matches!(read_tensor(&dir.path().join("missing")), Err(FormatError::Io(_))));
}

#[test]
fn config_file_overrides_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.ini");
    std::fs::write(&p, "# experiment\n[model]\nvariant = flash\nclasses = 5\n\n[train]\nepochs = 7\nlr = 5e-4\n[loss]\nl1_scope = kan\n").unwrap();
    let mut c = Config::load(&p).unwrap();
    c.set_dotted("train.batch_size=3").unwrap();
    let m = c.model(2).unwrap();
    assert_eq!(m.variant, Variant::Flash);
    assert_eq!(m.num_classes, 5);
    let t = c.train().unwrap();
    assert_eq!((t.epochs, t.batch_size), (7, 3));
    assert_eq!(t.optim.lr, 5e-4);
    assert_eq!(t.loss.l1_scope, karma_core::loss::L1Scope::Kan);

    assert!(matches!(c.set_dotted("train.nope=1"), Err(ConfigError::UnknownKey { .. })));
    assert!(matches!(c.set_dotted("no-dot"), Err(ConfigError::Syntax(_))));
    c.set_dotted("train.epochs=many").unwrap();
    assert!(matches!(c.train(), Err(ConfigError::BadValue { .. })));
    assert!(matches!(Config::parse("stray = 1\n"), Err(ConfigError::UnknownKey { .. })));
}

#[test]
fn seed_environment_override() {
    let mut c = Config::default();
    c.apply_seed_env(Some("42".into())).unwrap();
    assert_eq!(c.model(2).unwrap().seed, 42);
    assert_eq!(c.train().unwrap().seed, 42);
    assert_eq!(c.synth().unwrap().0.seed, 42);
    assert!(c.apply_seed_env(Some("x".into())).is_err());
}

fn small_dataset() -> (Dataset, SynthSpec) {
    let mut spec = SynthSpec::imbalanced(32, 32, 3, 0.4, 9);
    spec.cell = 4;
    (Dataset::synthetic(&spec, 5).unwrap(), spec)
}

#[test]
fn dataset_round_trip() {
    let (data, spec) = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, Some(&spec)).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.classes, data.classes);
    assert_eq!(back.masks, data.masks);
    for (a, b) in back.images.iter().zip(&data.images) {
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn dataset_shape_mismatch_is_rejected() {
    let (data, _) = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data, None).unwrap();
    let m = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&m).unwrap().replace("height = 32", "height = 64");
    std::fs::write(&m, text).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(StoreError::Manifest { .. })));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut cfg = ModelConfig::flash(3);
    cfg.seed = 4;
    cfg.kan_init = karma_core::kan::KanInit::Random;
    let model = Model::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.store.len(), model.store.len());
    for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    let (data, _) = small_dataset();
    let idx: Vec<usize> = (0..data.len()).collect();
    assert_eq!(evaluate(&model, &data, &idx, 2).unwrap(), evaluate(&back, &data, &idx, 2).unwrap());
}

#[test]
fn checkpoint_with_missing_tensor_fails() {
    let model = Model::new(ModelConfig::flash(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model).unwrap();
    std::fs::remove_file(dir.path().join("params").join("0003.tnsr")).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(StoreError::Format { .. })));
}
