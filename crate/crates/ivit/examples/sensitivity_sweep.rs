//! Model-scale sensitivity: retrains across patch sizes, bag sizes, and the
//! three encoder scales (huge/medium/tiny), holding the hidden width at 128.
//! Uses a deliberately small dataset and epoch budget so the grid finishes
//! quickly; the CSV sorts by (scale, patch, bag) for stable diffs.

use ivit::config::{Profile, RunConfig};
use ivit::synth::{generate_dataset, SynthParams};

fn main() -> ivit::Result<()> {
    let mut config = RunConfig::from_profile(Profile::Desk);
    config.p = 16;
    config.n = 8;
    config.roi_size = 120;
    config.epochs = 2;
    config.warmup_epochs = 1;
    config.batch_size = 2;
    config.synth = SynthParams { seed: 3, ..SynthParams::default_for_roi(120) };

    let dir = tempfile::tempdir()?;
    generate_dataset(dir.path(), 6, &config.synth)?;

    let out = dir.path().join("sweep.csv");
    let csv = ivit::pipeline::run_sweep(&config, dir.path(), &out, &[16], &[4, 8])?;
    println!("{}", csv.trim_end());
    println!("\nthe toy budget keeps every cell near chance; the CLI `sweep` subcommand");
    println!("runs the same grid at full scale. cells that fail to train report NaN");
    println!("rather than aborting the grid.");
    Ok(())
}
