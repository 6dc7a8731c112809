use csr_core::intrinsics::{dataset_loss, train, AblationConfig, TrainingExample};
use csr_core::net::NetState;
use csr_core::synthdata::{make_dataset, SceneSpec};

fn examples(n: usize, size: usize) -> Vec<TrainingExample> {
    let spec = SceneSpec { height: size, width: size, ..Default::default() };
    make_dataset(n, 11, &spec).unwrap().iter().map(|r| TrainingExample::from_scene(&r.scene).unwrap()).collect()
}

#[test]
fn training_reduces_the_nll() {
    let data = examples(20, 16);
    let cfg = AblationConfig { iterations: 2000, ..Default::default() };
    let model = train(&data, &cfg).unwrap();
    assert_eq!(model.loss_history.len(), 2000);
    let h = &model.loss_history;
    let head = h[..100].iter().sum::<f64>() / 100.0;
    let tail = h[h.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < head, "smoothed loss {head} -> {tail}");
    let before = dataset_loss(&NetState::desk_scale(cfg.seed), &data, &cfg.loss_config()).unwrap();
    let after = dataset_loss(&model.net, &data, &cfg.loss_config()).unwrap();
    assert!(after < before, "dataset NLL {before} -> {after}");
}

#[test]
fn checkpoint_round_trip_after_training() {
    let data = examples(2, 8);
    let model = train(&data, &AblationConfig { iterations: 3, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.net.save(&path).unwrap();
    let back = NetState::load(&path).unwrap();
    assert_eq!(back, model.net);
    assert_eq!(back.to_bytes(), model.net.to_bytes());
}
