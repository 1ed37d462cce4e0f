//! End-to-end training of the instance transformer on a small synthetic
//! dataset: generate ROIs, extract nucleus-centered patch bags, train with
//! warm-up plus step decay, restore the best-validation checkpoint, and
//! score the held-out test split. Runs in seconds at this scale.

use ivit::config::{Profile, RunConfig};
use ivit::model::ModelKind;
use ivit::pipeline::load_split;
use ivit::synth::{dataset_paths, generate_dataset_split, SynthParams};
use ivit::train::{build_bags, evaluate_set, train, TrainSet};

fn main() -> ivit::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    // a scaled-down profile that still has every moving part
    let mut config = RunConfig::from_profile(Profile::Desk);
    config.p = 16;
    config.n = 16;
    config.d = 16;
    config.heads = 2;
    config.layers = 2;
    config.roi_size = 200;
    config.epochs = 8;
    config.warmup_epochs = 2;
    config.decay_epoch = 6;
    config.synth = SynthParams { seed: 5, ..SynthParams::default_for_roi(200) };
    config.validate()?;

    let dir = tempfile::tempdir()?;
    generate_dataset_split(dir.path(), (20, 6, 6), &config.synth)?;
    let (_, train_m, val_m, test_m) = dataset_paths(dir.path());

    let mc = config.model_config();
    let train_bags = build_bags(&load_split(&train_m)?, &mc)?;
    let val_bags = build_bags(&load_split(&val_m)?, &mc)?;
    let test_bags = build_bags(&load_split(&test_m)?, &mc)?;
    println!("bags: {} train / {} val / {} test\n", train_bags.len(), val_bags.len(), test_bags.len());

    let outcome = train(
        ModelKind::Ivit,
        &mc,
        &TrainSet::Patches(&train_bags),
        &TrainSet::Patches(&val_bags),
        &config.schedule(ModelKind::Ivit),
        config.epochs,
        config.batch_size,
        config.seed,
    )?;
    println!("\nbest validation accuracy {:.3} at epoch {}", outcome.best_val_acc, outcome.best_epoch);

    let ckpt = dir.path().join("ivit.ckpt");
    outcome.model.save(&ckpt)?;
    println!("checkpoint: {} bytes\n", std::fs::metadata(&ckpt)?.len());

    let (_, report) = evaluate_set(&outcome.model, &TrainSet::Patches(&test_bags))?;
    println!("held-out test split:\n{}", report);
    Ok(())
}
