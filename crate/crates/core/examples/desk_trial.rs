use std::env;
use std::time::Instant;

use fundus_t2d::augment::AugmentParams;
use fundus_t2d::data_model::split_cohort;
use fundus_t2d::model::ModelConfig;
use fundus_t2d::synthgen::{generate_cohort, latent_bayes_auc, SynthConfig};
use fundus_t2d::train::{evaluate_auc, train_strategy, SplitData, Strategy, TrainConfig, TrainInputs};

fn var<T: std::str::FromStr>(k: &str, d: T) -> T {
    env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        n_individuals: var("N", 600),
        latent_shift: var("SHIFT", 1.0),
        images_per_eye: [1, 2],
        image_size: 64,
        seed: var("DSEED", 7),
        ..SynthConfig::default()
    };
    let t = Instant::now();
    let manifest = generate_cohort(&synth, dir.path()).unwrap();
    let split = split_cohort(&manifest, [0.6, 0.2, 0.2], synth.seed).unwrap();
    let data = SplitData::load(&manifest, &split, dir.path(), 64).unwrap();
    println!("data {} imgs in {:.1}s, bayes {:.4}", manifest.len(), t.elapsed().as_secs_f64(), latent_bayes_auc(synth.latent_shift));
    let aug = AugmentParams {
        translate_px: var("TX", 2),
        rotate_deg: var("ROT", 360.0),
        ..AugmentParams::default()
    };
    let cfg = TrainConfig {
        epochs: var("EPOCHS", 20),
        lr0: var("LR", 1e-3),
        lambda_bio: var("LAMBDA", 0.25),
        seed: var("SEED", 1),
        ..TrainConfig::default()
    };
    let strategy = if var("MTL", 1) == 1 { Strategy::MtlRandom } else { Strategy::Random };
    let crop = var("CROP", 48);
    let base = ModelConfig { input_size: crop, ..ModelConfig::default() };
    let inputs = TrainInputs { train: &data.train, validation: &data.validation, augment: &aug, crop_size: crop };
    let t = Instant::now();
    let out = train_strategy(&strategy, &base, inputs, &cfg, None).unwrap();
    for e in &out.report.epochs {
        println!("{:>3} loss {:.4} bce {:.4} mse {:.4} val {:?}", e.epoch, e.train_loss, e.train_bce, e.train_mse, e.val_auc);
    }
    let auc = evaluate_auc(&out.best_model, &data.test, crop).unwrap();
    println!("best epoch {} test auc {:.4} in {:.0}s", out.report.best_epoch, auc, t.elapsed().as_secs_f64());
}
