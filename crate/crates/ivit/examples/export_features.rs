//! Exports the handcrafted per-image feature vectors: ten per-nucleus
//! measurements (morphology, color, Delaunay neighbor distances) aggregated
//! into 15 distribution statistics each, plus the 3-dim grade mix. The CSV
//! is the input format for the decision-tree baselines.

use ivit::features::{AGGREGATE_DIM, EXPORT_DIM};
use ivit::pipeline::export_features;
use ivit::synth::{dataset_paths, generate_dataset, SynthParams};

fn main() -> ivit::Result<()> {
    let dir = tempfile::tempdir()?;
    let params = SynthParams { seed: 3, ..SynthParams::default_for_roi(200) };
    generate_dataset(dir.path(), 10, &params)?;
    let (_, train_m, _, _) = dataset_paths(dir.path());

    let csv_path = dir.path().join("features.csv");
    let rows = export_features(&train_m, 16, &csv_path)?;
    println!("exported {} rows of {} features each ({} aggregate + 3 grade fractions)", rows, EXPORT_DIM, AGGREGATE_DIM);

    let text = std::fs::read_to_string(&csv_path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let first = lines.next().unwrap_or_default();
    let head_cols: Vec<&str> = header.split(',').take(8).collect();
    let first_cols: Vec<&str> = first.split(',').take(8).collect();
    println!("\nfirst columns:  {} ...", head_cols.join(", "));
    println!("first row:      {} ...", first_cols.join(", "));

    // per feature: mean, std, skewness, kurtosis, entropy, then 10 histogram
    // bins; the grade fractions close out the row
    let tail: Vec<&str> = header.split(',').skip(2 + AGGREGATE_DIM).collect();
    println!("grade columns:  {}", tail.join(", "));
    Ok(())
}
