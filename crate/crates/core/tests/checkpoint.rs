use mgdin::features::FeatureSchema;
use mgdin::gradcheck::random_batch;
use mgdin::model::{Model, ModelConfig, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use mgdin::Error;

fn model() -> Model<f32> {
    let schema = FeatureSchema::with_default_names(vec![20, 4, 4, 3, 2]).unwrap();
    let config = ModelConfig {
        granularities: vec![1, 3],
        layers: 2,
        d_embed: 3,
        d_model: 6,
        head_hidden: vec![4],
        ..ModelConfig::default()
    };
    Model::build(&config, &schema, 9).unwrap()
}

#[test]
fn round_trip_reproduces_predictions() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save_checkpoint(&path).unwrap();
    let back = Model::<f32>::load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    let batch = random_batch(back.schema(), 7, 1).unwrap();
    assert_eq!(back.predict(&batch).unwrap().y_hat, m.predict(&batch).unwrap().y_hat);
}

#[test]
fn layout_starts_with_magic_version_and_header() {
    let bytes = model().to_checkpoint_bytes().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), CHECKPOINT_VERSION);
    let h = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + h]).unwrap();
    assert_eq!(header["scalar"], "f32");
    assert_eq!(bytes.len(), 20 + h + 4 * model().params().num_scalars());
}

#[test]
fn f64_models_load_into_either_precision() {
    let schema = FeatureSchema::with_default_names(vec![5, 5]).unwrap();
    let config = ModelConfig {
        granularities: vec![1, 2],
        layers: 1,
        d_embed: 2,
        d_model: 4,
        head_hidden: vec![],
        ..ModelConfig::default()
    };
    let m = Model::<f64>::build(&config, &schema, 2).unwrap();
    let bytes = m.to_checkpoint_bytes().unwrap();
    let as32 = Model::<f32>::from_checkpoint_bytes(&bytes).unwrap();
    let batch = random_batch(&schema, 4, 3).unwrap();
    for (a, b) in m.predict(&batch).unwrap().y_hat.iter().zip(as32.predict(&batch).unwrap().y_hat) {
        assert!((a - b as f64).abs() < 1e-5);
    }
}

#[test]
fn damaged_files_are_rejected() {
    let bytes = model().to_checkpoint_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Model::<f32>::from_checkpoint_bytes(&bad_magic), Err(Error::Checkpoint(_))));
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    assert!(matches!(Model::<f32>::from_checkpoint_bytes(&bad_version), Err(Error::Checkpoint(_))));
    assert!(matches!(Model::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    assert!(matches!(Model::<f32>::from_checkpoint_bytes(&[]), Err(Error::Checkpoint(_))));
}
