//! Acceptance gate for the whole pipeline. Each test covers one release
//! criterion, prints a single `criterion N: PASS/FAIL (...)` line, and
//! asserts it. Test names sort in criterion order; a shared lock keeps the
//! timed criteria from overlapping when the runner uses several threads.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use ivit::config::{Profile, RunConfig, Schedule};
use ivit::extraction::{InstanceBag, Subtype};
use ivit::features::aggregate_distribution;
use ivit::features::delaunay::delaunay_neighbors;
use ivit::model::{IViT, IViTConfig, ModelKind, ParameterStore, RAW_FEATURE_DIM};
use ivit::pipeline::{load_split, predict_dt_g, run_gradcheck, run_sweep, train_dt_g};
use ivit::synth::{dataset_paths, generate_dataset, generate_dataset_split, Ablation, SynthParams};
use ivit::train::{
    build_bags, evaluate, evaluate_set, lr_at_epoch, train, Adam, GradAccumulator, TrainSet,
    SWEEP_SCALES,
};
use ivit::{Graph, Tensor};

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: usize, pass: bool, detail: &str) {
    println!("criterion {}: {} ({})", criterion, if pass { "PASS" } else { "FAIL" }, detail);
    assert!(pass, "criterion {} failed: {}", criterion, detail);
}

// ---------------------------------------------------------------------------
// 1. Gradient soundness: finite differences over every op and through the
//    full model, inside the time budget.

#[test]
fn criterion_1_gradient_soundness() {
    let _g = gate();
    let t0 = Instant::now();
    let outcome = run_gradcheck().expect("gradcheck battery");
    let secs = t0.elapsed().as_secs_f64();
    let worst = outcome
        .rows
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("non-empty battery");
    let pass = outcome.passed() && secs < 120.0;
    verdict(
        1,
        pass,
        &format!(
            "{} checks, worst rel err {:.2e} at {}, {:.1}s of 120s budget",
            outcome.rows.len(),
            worst.max_rel_err,
            worst.name,
            secs
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Instance-order invariance of the classifier, and exact indifference to
//    the contents of padding slots.

fn tiny_cfg() -> IViTConfig {
    IViTConfig {
        p: 16,
        n: 8,
        d: 16,
        heads: 2,
        layers: 2,
        grid_w: 6,
        grid_h: 6,
        n_grades: 3,
        n_classes: 2,
        mlp_ratio: 4,
    }
}

fn random_bag(cfg: &IViTConfig, rng: &mut ChaCha12Rng, n_valid: usize) -> InstanceBag {
    let row = 3 * cfg.p * cfg.p;
    let mut patches = vec![0.0; cfg.n * row];
    for v in patches.iter_mut().take(n_valid * row) {
        *v = rng.random_range(0.0..1.0);
    }
    let mut grid_x = vec![cfg.grid_w + 1; cfg.n];
    let mut grid_y = vec![cfg.grid_h + 1; cfg.n];
    let mut grade_ids = vec![cfg.n_grades + 1; cfg.n];
    let mut valid = vec![false; cfg.n];
    for i in 0..n_valid {
        grid_x[i] = rng.random_range(0..cfg.grid_w);
        grid_y[i] = rng.random_range(0..cfg.grid_h);
        grade_ids[i] = rng.random_range(0..cfg.n_grades);
        valid[i] = true;
    }
    InstanceBag {
        roi_id: "synthetic".into(),
        patches: Tensor::from_vec(&[cfg.n, 3, cfg.p, cfg.p], patches).unwrap(),
        grid_x,
        grid_y,
        grade_ids,
        valid,
        n_valid,
        label: Subtype::Type1,
    }
}

fn permute_bag(bag: &InstanceBag, perm: &[usize]) -> InstanceBag {
    let shape = bag.patches.shape().to_vec();
    let row = shape[1..].iter().product::<usize>();
    let src = bag.patches.to_vec();
    let n = shape[0];
    let mut patches = vec![0.0; src.len()];
    let mut grid_x = vec![0; n];
    let mut grid_y = vec![0; n];
    let mut grade_ids = vec![0; n];
    let mut valid = vec![false; n];
    for (dst, &s) in perm.iter().enumerate() {
        patches[dst * row..(dst + 1) * row].copy_from_slice(&src[s * row..(s + 1) * row]);
        grid_x[dst] = bag.grid_x[s];
        grid_y[dst] = bag.grid_y[s];
        grade_ids[dst] = bag.grade_ids[s];
        valid[dst] = bag.valid[s];
    }
    InstanceBag {
        roi_id: bag.roi_id.clone(),
        patches: Tensor::from_vec(&shape, patches).unwrap(),
        grid_x,
        grid_y,
        grade_ids,
        valid,
        n_valid: bag.n_valid,
        label: bag.label,
    }
}

fn forward_logits(model: &IViT, bag: &InstanceBag) -> Vec<f64> {
    let mut g = Graph::inference();
    model.forward_classify(&mut g, bag).expect("forward").to_vec()
}

#[test]
fn criterion_2_permutation_invariance() {
    let _g = gate();
    let cfg = tiny_cfg();
    let model = IViT::new(ModelKind::Ivit, cfg.clone(), 42).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let row = 3 * cfg.p * cfg.p;
    let mut worst = 0.0f64;
    let mut pad_worst = 0.0f64;
    for _ in 0..100 {
        // keep at least one pad slot so the mutation check always has a target
        let n_valid = rng.random_range(2..cfg.n);
        let bag = random_bag(&cfg, &mut rng, n_valid);
        let base = forward_logits(&model, &bag);
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..cfg.n).collect();
            perm.shuffle(&mut rng);
            let permuted = forward_logits(&model, &permute_bag(&bag, &perm));
            for (a, b) in permuted.iter().zip(base.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        let mut data = bag.patches.to_vec();
        for v in data[n_valid * row..].iter_mut() {
            *v = 7.5;
        }
        let mutated = InstanceBag {
            patches: Tensor::from_vec(bag.patches.shape(), data).unwrap(),
            ..bag.clone()
        };
        for (a, b) in forward_logits(&model, &mutated).iter().zip(base.iter()) {
            pad_worst = pad_worst.max((a - b).abs());
        }
    }
    let pass = worst < 1e-9 && pad_worst == 0.0;
    verdict(
        2,
        pass,
        &format!(
            "100 bags x 100 permutations, max logit drift {:.2e} (tol 1e-9); pad mutation drift {:.2e} (must be 0)",
            worst, pad_worst
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Oracle equivalence: Delaunay vs an exhaustive empty-circumcircle search,
//    aggregation vs a single-pass reimplementation, Adam vs a scalar trace,
//    metrics vs hand counts.

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// Strictly inside the circumcircle of (a, b, c), by the sign-corrected
/// 3x3 lifted determinant.
fn in_circumdisk(a: (f64, f64), b: (f64, f64), c: (f64, f64), p: (f64, f64)) -> bool {
    let (ax, ay) = (a.0 - p.0, a.1 - p.1);
    let (bx, by) = (b.0 - p.0, b.1 - p.1);
    let (cx, cy) = (c.0 - p.0, c.1 - p.1);
    let (az, bz, cz) = (ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy);
    let det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx);
    det * orient(a, b, c).signum() > 0.0
}

/// O(n^4) Delaunay adjacency: (i, j) is an edge iff some third point closes
/// a triangle whose open circumdisk contains no other input point.
fn exhaustive_neighbors(points: &[(f64, f64)]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let mut witness = false;
            for k in 0..n {
                if k == i || k == j || orient(points[i], points[j], points[k]) == 0.0 {
                    continue;
                }
                let empty = (0..n)
                    .filter(|&m| m != i && m != j && m != k)
                    .all(|m| !in_circumdisk(points[i], points[j], points[k], points[m]));
                if empty {
                    witness = true;
                    break;
                }
            }
            if witness {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
    }
    adj
}

/// Aggregation oracle over raw power sums instead of centered passes.
fn aggregate_oracle(rows: &[[f64; RAW_FEATURE_DIM]]) -> Vec<f64> {
    const BINS: usize = 10;
    let n = rows.len() as f64;
    let mut out = Vec::new();
    for f in 0..RAW_FEATURE_DIM {
        let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in rows {
            let v = r[f];
            s1 += v;
            s2 += v * v;
            s3 += v * v * v;
            s4 += v * v * v * v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let mean = s1 / n;
        let m2 = s2 / n - mean * mean;
        let m3 = s3 / n - 3.0 * mean * s2 / n + 2.0 * mean.powi(3);
        let m4 = s4 / n - 4.0 * mean * s3 / n + 6.0 * mean * mean * s2 / n - 3.0 * mean.powi(4);
        let mut hist = vec![0.0; BINS];
        if lo == hi {
            hist[0] = 1.0;
        } else {
            for r in rows {
                let mut bin = BINS - 1;
                for k in 1..BINS {
                    if r[f] < lo + (hi - lo) * k as f64 / BINS as f64 {
                        bin = k - 1;
                        break;
                    }
                }
                hist[bin] += 1.0 / n;
            }
        }
        let entropy = -hist.iter().filter(|&&h| h > 0.0).map(|&h| h * h.ln()).sum::<f64>();
        out.push(mean);
        out.push(m2.max(0.0).sqrt());
        if m2 <= 0.0 {
            out.extend_from_slice(&[0.0, 0.0]);
        } else {
            out.push(m3 / (m2 * m2.sqrt()));
            out.push(m4 / (m2 * m2) - 3.0);
        }
        out.push(entropy);
        out.extend_from_slice(&hist);
    }
    out
}

#[test]
fn criterion_3_oracle_equivalence() {
    let _g = gate();
    let mut rng = ChaCha12Rng::seed_from_u64(77);

    // Delaunay: 200 random continuous point sets, n up to 10
    let mut delaunay_sets = 0;
    for _ in 0..200 {
        let n = rng.random_range(3..=10usize);
        let points: Vec<(f64, f64)> =
            (0..n).map(|_| (rng.random_range(0.0..50.0), rng.random_range(0.0..50.0))).collect();
        let got = delaunay_neighbors(&points).expect("triangulation");
        let want = exhaustive_neighbors(&points);
        assert_eq!(got, want, "neighbor mismatch on {:?}", points);
        delaunay_sets += 1;
    }

    // aggregation: 20 random feature matrices against the power-sum oracle
    let mut agg_worst = 0.0f64;
    for _ in 0..20 {
        let rows: Vec<[f64; RAW_FEATURE_DIM]> =
            (0..40).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..5.0))).collect();
        let got = aggregate_distribution(&rows).expect("aggregate");
        let want = aggregate_oracle(&rows);
        for (a, b) in got.iter().zip(want.iter()) {
            agg_worst = agg_worst.max((a - b).abs());
        }
    }

    // Adam: minimize w^2 from w = 1, against an independent scalar trace
    let w = Tensor::param(&[1, 1], vec![1.0]).unwrap();
    let store = ParameterStore::from_named(vec![("w".to_string(), w.clone())]).unwrap();
    let mut adam = Adam::new();
    let mut acc = GradAccumulator::new();
    let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 1.0f64);
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
    let mut adam_worst = 0.0f64;
    for t in 1..=10 {
        let mut g = Graph::new();
        let y = g.matmul(&w, &w).unwrap();
        let loss = g.sum(&y).unwrap();
        let grads = g.compute_gradients(&loss).unwrap();
        acc.absorb(&store, &grads).unwrap();
        adam.step(&store, &mut acc, lr).unwrap();

        let grad = 2.0 * w_ref;
        m = b1 * m + (1.0 - b1) * grad;
        v = b2 * v + (1.0 - b2) * grad * grad;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        w_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        adam_worst = adam_worst.max((w.to_vec()[0] - w_ref).abs());
    }

    // metrics: hand-counted confusion, including a zero-denominator class
    let report = evaluate(&[0, 0, 0, 1, 1, 0], &[0, 0, 0, 1, 0, 1], 2).unwrap();
    assert_eq!(report.accuracy, 4.0 / 6.0);
    assert_eq!(report.confusion, vec![vec![3, 1], vec![1, 1]]);
    assert_eq!(
        (report.per_class[0].precision, report.per_class[0].recall, report.per_class[0].f1),
        (0.75, 0.75, 0.75)
    );
    assert_eq!(
        (report.per_class[1].precision, report.per_class[1].recall, report.per_class[1].f1),
        (0.5, 0.5, 0.5)
    );
    let degenerate = evaluate(&[0, 0], &[0, 1], 2).unwrap();
    assert_eq!(
        (degenerate.per_class[1].precision, degenerate.per_class[1].recall, degenerate.per_class[1].f1),
        (0.0, 0.0, 0.0)
    );

    let pass = agg_worst < 1e-9 && adam_worst < 1e-12;
    verdict(
        3,
        pass,
        &format!(
            "{} Delaunay sets exact; aggregation drift {:.2e} (tol 1e-9); Adam drift {:.2e} (tol 1e-12); metrics exact",
            delaunay_sets, agg_worst, adam_worst
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Desk-scale end-to-end run: 200/60/60 ROIs, 30 epochs, accuracy and
//    wall-clock budgets.

struct DeskRun {
    test_accuracy: f64,
    best_epoch: usize,
}

fn desk_ivit_run(config: &RunConfig, params: &SynthParams) -> DeskRun {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset_split(dir.path(), (100, 30, 30), params).unwrap();
    let (_, train_m, val_m, test_m) = dataset_paths(dir.path());
    let mc = config.model_config();
    let train_bags = build_bags(&load_split(&train_m).unwrap(), &mc).unwrap();
    let val_bags = build_bags(&load_split(&val_m).unwrap(), &mc).unwrap();
    let test_bags = build_bags(&load_split(&test_m).unwrap(), &mc).unwrap();
    assert_eq!((train_bags.len(), val_bags.len(), test_bags.len()), (200, 60, 60));
    let outcome = train(
        ModelKind::Ivit,
        &mc,
        &TrainSet::Patches(&train_bags),
        &TrainSet::Patches(&val_bags),
        &config.schedule(ModelKind::Ivit),
        config.epochs,
        config.batch_size,
        config.seed,
    )
    .unwrap();
    let (_, report) = evaluate_set(&outcome.model, &TrainSet::Patches(&test_bags)).unwrap();
    DeskRun { test_accuracy: report.accuracy, best_epoch: outcome.best_epoch }
}

#[test]
fn criterion_4_desk_end_to_end() {
    let _g = gate();
    let t0 = Instant::now();
    let config = RunConfig::from_profile(Profile::Desk);
    assert_eq!((config.epochs, config.seed, config.synth.seed), (30, 1, 1));
    let run = desk_ivit_run(&config, &config.synth);
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    let pass = run.test_accuracy >= 0.90 && mins < 30.0;
    verdict(
        4,
        pass,
        &format!(
            "desk i-ViT test accuracy {:.1}% (need >= 90%), best epoch {}, {:.1} min of 30 min budget",
            run.test_accuracy * 100.0,
            run.best_epoch,
            mins
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Paired ablations: grade composition alone must be enough for the grade
//    tree, and spatial structure alone must be invisible to it but readable
//    by the transformer.

fn dt_g_accuracy(config: &RunConfig, params: &SynthParams) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset_split(dir.path(), (100, 30, 30), params).unwrap();
    let (_, train_m, _, test_m) = dataset_paths(dir.path());
    let tree = train_dt_g(&load_split(&train_m).unwrap(), config.tree_max_depth).unwrap();
    let (preds, truth) = predict_dt_g(&tree, &load_split(&test_m).unwrap()).unwrap();
    evaluate(&preds, &truth, 2).unwrap().accuracy
}

#[test]
fn criterion_5_ablation_contrast() {
    let _g = gate();
    let config = RunConfig::from_profile(Profile::Desk);

    let grade_params = SynthParams { ablation: Ablation::GradeOnly, ..config.synth.clone() };
    let grade_tree_acc = dt_g_accuracy(&config, &grade_params);

    let spatial_params = SynthParams { ablation: Ablation::SpatialOnly, ..config.synth.clone() };
    let spatial_tree_acc = dt_g_accuracy(&config, &spatial_params);
    let spatial_ivit = desk_ivit_run(&config, &spatial_params);

    let pass = grade_tree_acc >= 0.95 && spatial_tree_acc <= 0.65 && spatial_ivit.test_accuracy >= 0.85;
    verdict(
        5,
        pass,
        &format!(
            "grade-only DT-G {:.1}% (need >= 95%); spatial-only DT-G {:.1}% (need <= 65%), i-ViT {:.1}% (need >= 85%)",
            grade_tree_acc * 100.0,
            spatial_tree_acc * 100.0,
            spatial_ivit.test_accuracy * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Learning-rate schedule, exactly: linear warm-up over 10 epochs, base
//    rate to epoch 30, decayed rate after.

#[test]
fn criterion_6_learning_rate_schedule() {
    let _g = gate();
    let s = Schedule { base_lr: 1e-3, warmup_epochs: 10, decay_epoch: 30, decay_lr: 1e-4 };
    let mut checked = 0;
    for epoch in 0..50 {
        let expected = if epoch < 10 {
            s.base_lr * (epoch + 1) as f64 / 10.0
        } else if epoch < 30 {
            s.base_lr
        } else {
            s.decay_lr
        };
        let got = lr_at_epoch(&s, epoch);
        assert_eq!(got, expected, "epoch {}: {} vs {}", epoch, got, expected);
        checked += 1;
    }
    verdict(6, checked == 50, &format!("{} epochs match the published schedule exactly", checked));
}

// ---------------------------------------------------------------------------
// 7. Model-scale grid: every published (scale, P, N) cell constructs, runs a
//    forward/backward pass with sound shapes, and the sweep CSV comes out
//    sorted.

#[test]
fn criterion_7_scale_grid_and_sweep() {
    let _g = gate();
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let mut cells = 0;
    for &(scale, layers, heads) in SWEEP_SCALES.iter() {
        for p in [16usize, 32, 64] {
            for n in [16usize, 64] {
                let cfg = IViTConfig {
                    p,
                    n,
                    d: 128,
                    heads,
                    layers,
                    grid_w: 20,
                    grid_h: 20,
                    n_grades: 3,
                    n_classes: 2,
                    mlp_ratio: 4,
                };
                let model = IViT::new(ModelKind::Ivit, cfg.clone(), 1).unwrap();
                let bag = random_bag(&cfg, &mut rng, n / 2);
                let mut g = Graph::new();
                let logits = model.forward_classify(&mut g, &bag).unwrap();
                assert_eq!(logits.shape(), &[1, 2], "{} P={} N={}", scale, p, n);
                assert!(logits.to_vec().iter().all(|v| v.is_finite()));
                let loss = g.cross_entropy(&logits, &[1]).unwrap();
                let grads = g.compute_gradients(&loss).unwrap();
                for (name, t) in model.params.iter() {
                    let gr = grads
                        .get(t)
                        .unwrap_or_else(|| panic!("missing grad for {} in {}", name, scale));
                    assert_eq!(gr.len(), t.numel(), "{} grad shape in {}", name, scale);
                    assert!(gr.iter().all(|v| v.is_finite()), "{} grad finite in {}", name, scale);
                }
                cells += 1;
            }
        }
    }

    // sweep CSV on a small dataset: emitted, complete, and sorted
    let dir = tempfile::tempdir().unwrap();
    let mut tiny = RunConfig::from_profile(Profile::Desk);
    tiny.p = 16;
    tiny.n = 8;
    tiny.roi_size = 120;
    tiny.epochs = 2;
    tiny.warmup_epochs = 1;
    tiny.batch_size = 2;
    tiny.synth = SynthParams { seed: 3, ..SynthParams::default_for_roi(120) };
    generate_dataset(dir.path(), 5, &tiny.synth).unwrap();
    let out = dir.path().join("sweep.csv");
    let csv = run_sweep(&tiny, dir.path(), &out, &[16], &[4, 8]).unwrap();
    assert_eq!(csv, std::fs::read_to_string(&out).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "p,n,scale,accuracy");
    assert_eq!(lines.len(), 7);
    let keys: Vec<(String, usize, usize)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let acc: f64 = f[3].parse().unwrap();
            assert!(!acc.is_nan(), "cell failed: {}", l);
            (f[2].to_string(), f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted, "sweep rows must sort by (scale, p, n)");

    verdict(
        7,
        cells == 18,
        &format!("{} scale cells forward/backward clean; sweep CSV sorted with {} rows", cells, lines.len() - 1),
    );
}
