use bcanet_core::model::{Model, ModelKind};
use bcanet_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 1;
    cfg.n_train = 100;
    cfg.n_val = 20;
    cfg.threads = 2;
    for kind in [ModelKind::BcaNet, ModelKind::NonLocal, ModelKind::Fcn] {
        let t0 = Instant::now();
        let r = train(&cfg, kind, None).unwrap();
        let dt = t0.elapsed();
        println!("{:?}: {:.2?} for 1 epoch of 100 train + 20 val (val_miou {:.3})", kind, dt, r.log[0].val_miou);
    }
    // extrapolate: full run = 40 epochs × 500 train + 100 val
    let _ = Model::init(ModelKind::Fcn, cfg.model.clone(), 0);
}
