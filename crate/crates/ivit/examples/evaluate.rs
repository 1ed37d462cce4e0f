//! Checkpoint round trips: save a trained tree and a freshly initialized
//! transformer, then reload both through the format-sniffing loader and
//! score them on a manifest. Binary checkpoints carry the transformer's
//! config and parameters; trees serialize as JSON.

use ivit::config::{Profile, RunConfig};
use ivit::model::{IViT, ModelKind};
use ivit::pipeline::{evaluate_checkpoint, load_split, save_tree, train_dt_g};
use ivit::synth::{dataset_paths, generate_dataset_split, SynthParams};

fn main() -> ivit::Result<()> {
    let mut config = RunConfig::from_profile(Profile::Desk);
    config.roi_size = 200;
    config.p = 16;
    config.n = 16;
    config.d = 16;
    config.heads = 2;
    config.layers = 1;
    config.synth = SynthParams { seed: 17, ..SynthParams::default_for_roi(200) };

    let dir = tempfile::tempdir()?;
    generate_dataset_split(dir.path(), (16, 4, 6), &config.synth)?;
    let (_, train_m, _, test_m) = dataset_paths(dir.path());

    // a trained tree, saved as JSON
    let tree = train_dt_g(&load_split(&train_m)?, config.tree_max_depth)?;
    let tree_path = dir.path().join("dt_g.ckpt");
    save_tree(&tree, &tree_path)?;

    // an untrained transformer, saved in the binary format
    let net = IViT::new(ModelKind::Ivit, config.model_config(), config.seed)?;
    let net_path = dir.path().join("ivit.ckpt");
    net.save(&net_path)?;

    for (label, path) in [("trained tree", &tree_path), ("untrained net", &net_path)] {
        let (name, report) = evaluate_checkpoint(path, &test_m)?;
        println!("{} ({}, {} bytes):", label, name, std::fs::metadata(path)?.len());
        println!("{}", report);
    }
    println!("the untrained net sits near chance; examples/train_ivit.rs closes the gap.");
    Ok(())
}
