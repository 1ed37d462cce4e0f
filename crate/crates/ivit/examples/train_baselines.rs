//! The two handcrafted baselines on one dataset: a depth-limited decision
//! tree over aggregate feature vectors with grade statistics (DT-G), and the
//! feature-token transformer variant that swaps the patch CNN for the ten
//! raw per-nucleus measurements.

use ivit::config::{Profile, RunConfig};
use ivit::model::ModelKind;
use ivit::pipeline::{load_split, predict_dt_g, train_dt_g};
use ivit::synth::{dataset_paths, generate_dataset_split, SynthParams};
use ivit::train::{build_feature_bags, evaluate, evaluate_set, train, TrainSet};

fn main() -> ivit::Result<()> {
    let mut config = RunConfig::from_profile(Profile::Desk);
    config.p = 16;
    config.n = 16;
    config.d = 16;
    config.heads = 2;
    config.layers = 2;
    config.roi_size = 200;
    config.epochs = 6;
    config.warmup_epochs = 2;
    config.decay_epoch = 5;
    config.synth = SynthParams { seed: 13, ..SynthParams::default_for_roi(200) };

    let dir = tempfile::tempdir()?;
    generate_dataset_split(dir.path(), (20, 6, 6), &config.synth)?;
    let (_, train_m, val_m, test_m) = dataset_paths(dir.path());
    let train_rois = load_split(&train_m)?;
    let val_rois = load_split(&val_m)?;
    let test_rois = load_split(&test_m)?;

    // DT-G: 153-dim aggregate vectors, CART with Gini splits
    let tree = train_dt_g(&train_rois, config.tree_max_depth)?;
    let (preds, truth) = predict_dt_g(&tree, &test_rois)?;
    let dt_acc = evaluate(&preds, &truth, 2)?.accuracy;

    // feature-token transformer: same encoder, no CNN, raw 10-dim tokens
    let mc = config.model_config_h();
    let train_bags = build_feature_bags(&train_rois, &mc)?;
    let val_bags = build_feature_bags(&val_rois, &mc)?;
    let test_bags = build_feature_bags(&test_rois, &mc)?;
    let outcome = train(
        ModelKind::IvitH,
        &mc,
        &TrainSet::Features(&train_bags),
        &TrainSet::Features(&val_bags),
        &config.schedule(ModelKind::IvitH),
        config.epochs,
        config.batch_size,
        config.seed,
    )?;
    let (_, report) = evaluate_set(&outcome.model, &TrainSet::Features(&test_bags))?;

    println!("model    test accuracy");
    println!("DT-G     {:.3}", dt_acc);
    println!("i-ViT-H  {:.3}  (best val {:.3} at epoch {})", report.accuracy, outcome.best_val_acc, outcome.best_epoch);
    println!("\nfull patch-based training lives in examples/train_ivit.rs");
    Ok(())
}
