//! Data on disk, a short training run, a checkpoint file, and evaluation of
//! the reloaded model, end to end through the public API.

use w2w_core::synth::{make_dataset, Dataset, DatasetSpec, WorldConfig};
use w2w_core::train::{evaluate, load_params, model_checkpoint};
use w2w_core::{Checkpoint, ModelConfig, TrainConfig, Trainer, W2wBev};

fn small_model() -> ModelConfig {
    ModelConfig {
        bev_h: 8,
        bev_w: 8,
        depth_bins: 8,
        blocks: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn train_save_reload_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        scenes: 12,
        fractions: [0.5, 0.0, 0.5],
        seed: 4,
        landmarks: 10,
    };
    let data = make_dataset(&spec, &WorldConfig::default()).unwrap();
    data.save(dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (6, 0, 6));

    let cfg = TrainConfig {
        steps: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(W2wBev::<f32>::new(&small_model(), 1).unwrap(), cfg).unwrap();
    for _ in 0..2 {
        assert!(t.next(&data.train).unwrap().is_finite());
    }

    let path = dir.path().join("model.w2wb");
    model_checkpoint(&t.model).save(&path).unwrap();
    let mut reloaded = W2wBev::<f32>::new(&small_model(), 99).unwrap();
    load_params(&mut reloaded, &Checkpoint::load(&path).unwrap()).unwrap();

    let before = evaluate(&t.model, &data.test, 90.0, 7).unwrap();
    let after = evaluate(&reloaded, &data.test, 90.0, 7).unwrap();
    assert_eq!(before, after);
    assert_eq!(after.queries, 6);
    assert!(after.rows.iter().all(|r| r.hits <= 6));
}
