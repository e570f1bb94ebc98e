//! Acceptance suite: prints PASS/FAIL for criteria 1–11 and exits non-zero
//! if any criterion fails.
//!
//! Run with `cargo test -p augmix --test acceptance`. Pass criterion numbers
//! as arguments to run a subset, e.g. `-- 1 2 3`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use augmix::artifacts::read_duplicates;
use augmix::config::ExperimentConfig;
use augmix::dataset::save_idx_dataset;
use augmix::experiment::{build_attacks, prepare, run_experiment, train, Evaluator, ExperimentOutcome};
use augmix::sweep::{run_sweeps, SWEEP_HEADER};
use augmix::synth::{generate, SynthConfig};
use augmix_core::dfl::{build_topology, membership_query, membership_query_traced, TopologyKind};
use augmix_core::gateway::clip_confidence;
use augmix_core::mia::{
    correctness_attack, entropy, evaluate_f1, mean_deviation, modified_entropy, AttackSample, Confusion,
};
use augmix_core::nn::{init_model, loss_and_gradient, ArchKind, PredictionVector};
use augmix_core::pca::{first_principal_component, ClassMatrix};
use augmix_core::phash::{compute_phash, hash_input, HashIndex, PHash64, COEFF_EPSILON, DCT_SIZE, HASH_BLOCK};
use augmix_core::tuner::{TunerResult, F1_WINDOW};
use augmix_core::{seed, Image};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    format!("{e:#}")
}

// ---------------------------------------------------------------- helpers

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let j = (i..idx.len()).take_while(|&j| v[idx[j]] == v[idx[i]]).last().unwrap();
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn write_synth(dir: &Path, train: usize, test: usize, seed: u64) -> Result<(), String> {
    let (tr, te) = generate(&SynthConfig { train, test, difficulty: 1.0, seed });
    save_idx_dataset(dir, &tr, &te).map_err(err)
}

/// Small, fast experiment used by the determinism and sweep checks.
fn small_config(root: &Path, out: &str) -> Result<ExperimentConfig, String> {
    let data = root.join("small-data");
    if !data.exists() {
        write_synth(&data, 600, 700, 7)?;
    }
    let mut cfg = ExperimentConfig {
        dataset: data,
        train_limit: 400,
        rounds: 2,
        epochs: 1,
        eval_members: 100,
        eval_nonmembers: 100,
        aux_size: 300,
        k_shadows: 2,
        refinement_steps: 1,
        output_dir: root.join(out),
        seed: 11,
        ..ExperimentConfig::default()
    };
    cfg.sweep_weight_decay = vec![0.0, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2];
    Ok(cfg)
}

// ------------------------------------------------------------- criteria

/// 1. pHash equals a brute-force DCT-II hash on 100 images.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(101);
    let (garments, _) = generate(&SynthConfig { train: 50, test: 0, difficulty: 1.0, seed: 5 });
    let mut images: Vec<Image> = garments.images;
    while images.len() < 100 {
        let (h, w, c) = (rng.random_range(8..64), rng.random_range(8..64), if rng.random_bool(0.5) { 1 } else { 3 });
        let data = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
        images.push(Image::new(h, w, c, data).map_err(err)?);
    }
    let n = DCT_SIZE as f64;
    let mut mismatches = 0;
    for img in &images {
        let m = hash_input(img).map_err(err)?;
        let m = m.data();
        let mut block = [0.0; HASH_BLOCK * HASH_BLOCK];
        for u in 0..HASH_BLOCK {
            for v in 0..HASH_BLOCK {
                let cu = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                let cv = if v == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                let mut s = 0.0;
                for y in 0..DCT_SIZE {
                    for x in 0..DCT_SIZE {
                        s += m[y * DCT_SIZE + x]
                            * ((2 * y + 1) as f64 * u as f64 * PI / (2.0 * n)).cos()
                            * ((2 * x + 1) as f64 * v as f64 * PI / (2.0 * n)).cos();
                    }
                }
                let c = cu * cv * s;
                block[u * HASH_BLOCK + v] = if c.abs() < COEFF_EPSILON { 0.0 } else { c };
            }
        }
        let mut sorted = block;
        sorted.sort_by(f64::total_cmp);
        let median = sorted[31];
        let bits = (0..64).filter(|&i| block[i] > median).fold(0u64, |acc, i| acc | (1 << (63 - i)));
        if compute_phash(img).map_err(err)? != PHash64(bits) {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    Ok((mismatches == 0 && t < Duration::from_secs(30), format!("{mismatches}/100 mismatches in {t:.2?}")))
}

/// 2. First principal component against a dense symmetric eigensolver.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(202);
    let mut worst: f64 = 1.0;
    for case in 0..50 {
        let rows = rng.random_range(2..=20);
        let cols = rng.random_range(1..=50);
        let data: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random::<f64>()).collect()).collect();
        let x = ClassMatrix::from_rows(&data, case).map_err(err)?;
        let v = first_principal_component(&x).map_err(err)?;
        let means = x.column_means();
        let xc = DMatrix::from_fn(rows, cols, |i, j| data[i][j] - means[j]);
        let eig = SymmetricEigen::new(xc.transpose() * &xc);
        let top = eig.eigenvalues.iamax();
        let oracle = eig.eigenvectors.column(top);
        let cos: f64 = v.iter().zip(oracle.iter()).map(|(a, b)| a * b).sum::<f64>().abs();
        worst = worst.min(cos);
    }
    let t = start.elapsed();
    Ok((worst >= 1.0 - 1e-6 && t < Duration::from_secs(10), format!("min |cos| = {worst:.12} in {t:.2?}")))
}

/// 3. Flooded membership query equals the union oracle; messages ≤ 2|E|.
fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(303);
    let kinds = [TopologyKind::Fully, TopologyKind::Ring, TopologyKind::Star];
    let (mut wrong, mut over_budget, mut found) = (0, 0, 0);
    for case in 0..200 {
        let kind = kinds[case % 3];
        let n = rng.random_range(3..=8);
        let topo = build_topology(kind, n).map_err(err)?;
        let indexes: Vec<HashIndex> = (0..n)
            .map(|o| {
                let k = rng.random_range(0..6);
                HashIndex::from_hashes((0..k).map(|_| PHash64(rng.random_range(0..40))).collect(), o)
            })
            .collect();
        let h = PHash64(rng.random_range(0..40));
        let entry = rng.random_range(0..n);
        let oracle = indexes.iter().any(|i| i.lookup(h));
        let trace = membership_query_traced(&topo, &indexes, entry, h).map_err(err)?;
        found += usize::from(oracle);
        if trace.found != oracle || membership_query(&topo, &indexes, entry, h).map_err(err)? != oracle {
            wrong += 1;
        }
        if trace.messages > 2 * topo.edge_count() {
            over_budget += 1;
        }
    }
    let t = start.elapsed();
    Ok((
        wrong == 0 && over_budget == 0 && t < Duration::from_secs(5),
        format!("{wrong} wrong, {over_budget} over message budget, {found} positives, {t:.2?}"),
    ))
}

/// 4. Same seed → byte-identical report.csv; answer_query is bit-identical.
fn criterion_4(root: &Path) -> Outcome {
    let a = small_config(root, "det-a")?;
    let b = ExperimentConfig { output_dir: root.join("det-b"), ..a.clone() };
    run_experiment(&a).map_err(err)?;
    run_experiment(&b).map_err(err)?;
    let ra = fs::read(a.output_dir.join("report.csv")).map_err(err)?;
    let rb = fs::read(b.output_dir.join("report.csv")).map_err(err)?;

    let setup = prepare(&a).map_err(err)?;
    let trained = train(&setup, None).map_err(err)?;
    let attacks = build_attacks(&setup).map_err(err)?;
    let eval = Evaluator::new(&setup, &trained, &attacks).map_err(err)?;
    let defense = a.defense_config().map_err(err)?;
    let mut identical = true;
    for img in setup.members.images.iter().chain(&setup.nonmembers.images).take(60) {
        let (p1, d1) = eval.gateway().answer_query(img, &defense).map_err(err)?;
        let (p2, d2) = eval.gateway().answer_query(img, &defense).map_err(err)?;
        let bits = |p: &PredictionVector| p.probs().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        identical &= bits(&p1) == bits(&p2) && d1 == d2;
    }
    Ok((ra == rb && identical, format!("report.csv identical: {}, answer_query identical: {identical}", ra == rb)))
}

/// 5. Defended Acc2 moves by at most 0.5 pp, and only through hash collisions.
fn criterion_5(out: &ExperimentOutcome, dir: &Path) -> Outcome {
    let dup = read_duplicates(&dir.join("duplicates.csv")).map_err(err)?;
    let delta = (out.defended.acc_test - out.undefended.acc_test).abs();
    let explained = delta <= dup.test_fraction() + 1e-12;
    Ok((
        delta <= 0.005 && explained,
        format!(
            "|Δacc2| = {:.4} pp, collisions {}/{} ({:.4} pp)",
            delta * 100.0,
            dup.test_hits,
            dup.test_total,
            dup.test_fraction() * 100.0
        ),
    ))
}

/// 6. Desk-scale defense efficacy.
fn criterion_6(out: &ExperimentOutcome, elapsed: Duration) -> Outcome {
    let u = &out.undefended;
    let gap = (u.acc_train - u.acc_test) * 100.0;
    let dev = u.deviation();
    let tuned = out.defended.f1_vector();
    let in_window = tuned.iter().all(|f| (F1_WINDOW.0..=F1_WINDOW.1).contains(f));
    let fast = elapsed < Duration::from_secs(15 * 60);
    Ok((
        gap >= 15.0 && dev >= 0.08 && in_window && fast,
        format!(
            "gap {gap:.1} pts (Acc1 {:.3}, Acc2 {:.3}); undefended F1 {:?} mean dev {dev:.3}; tuned F1 {:?}; {elapsed:.0?}",
            u.acc_train,
            u.acc_test,
            u.f1_vector().map(|f| (f * 1000.0).round() / 1000.0),
            tuned.map(|f| (f * 1000.0).round() / 1000.0),
        ),
    ))
}

/// 7. F1 rises with α at fixed intensity and falls with the expected
/// augmentation count at fixed α. Both sweeps are read from the tuner's
/// grid pass on the criterion-6 run.
fn criterion_7(tuner: &TunerResult, cfg: &ExperimentConfig) -> Outcome {
    let fixed = cfg.defense_config().map_err(err)?;
    let grid: Vec<_> = tuner.evaluations.iter().filter(|e| e.phase == 1).collect();
    let by_alpha: Vec<_> = grid.iter().filter(|e| e.config.intensity == fixed.intensity).collect();
    let by_count: Vec<_> = grid.iter().filter(|e| e.config.alpha == fixed.alpha).collect();
    if by_alpha.len() < 3 || by_count.len() < 3 {
        return Err(format!("grid too small: {} α points, {} intensity points", by_alpha.len(), by_count.len()));
    }
    let alpha: Vec<f64> = by_alpha.iter().map(|e| e.config.alpha.alpha()).collect();
    let count: Vec<f64> = by_count.iter().map(|e| e.config.intensity.expected_count()).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, name) in ["binary", "m1", "m2", "m3"].iter().enumerate() {
        let fa: Vec<f64> = by_alpha.iter().map(|e| e.f1[k]).collect();
        let fc: Vec<f64> = by_count.iter().map(|e| e.f1[k]).collect();
        let (ra, rc) = (spearman(&alpha, &fa), spearman(&count, &fc));
        ok &= ra >= 0.0 && rc <= 0.0;
        parts.push(format!("{name}: ρ(α)={ra:.3} ρ(n)={rc:.3}"));
    }
    Ok((ok, format!("{} α points, {} intensity points; {}", alpha.len(), count.len(), parts.join(", "))))
}

/// 8. Analytic gradients match central finite differences.
fn criterion_8() -> Outcome {
    let mut rng = seed::rng(808);
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0;
    for (kind, shape) in [(ArchKind::SmallCnn, (12, 12, 3)), (ArchKind::Mlp { hidden: 12 }, (6, 5, 1))] {
        let mut model = init_model(kind, shape, 4, 3).map_err(err)?;
        let inputs: Vec<_> = (0..3)
            .map(|_| {
                let n = shape.0 * shape.1 * shape.2;
                let img = Image::new(shape.0, shape.1, shape.2, (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
                augmix_core::image::standardize(&img, &vec![0.5; shape.2], &vec![0.3; shape.2]).unwrap()
            })
            .collect();
        let refs: Vec<_> = inputs.iter().collect();
        let labels = [0, 3, 1];
        let wd = 1e-3;
        let (_, grad) = loss_and_gradient(&model, &refs, &labels, wd).map_err(err)?;
        let layout = model.layout().to_vec();
        for layer in &layout {
            for _ in 0..20 {
                let i = layer.offset + rng.random_range(0..layer.len());
                // Five-point central stencil: truncation O(h⁴), roundoff ≈ ε·loss/h.
                let h = 1e-4;
                let orig = model.theta()[i];
                let mut at = |d: f64| -> Result<f64, String> {
                    model.theta_mut()[i] = orig + d;
                    Ok(loss_and_gradient(&model, &refs, &labels, wd).map_err(err)?.0)
                };
                let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                model.theta_mut()[i] = orig;
                let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                let rel = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{kind} {} analytic {:.6e} numeric {:.6e}", layer.name, grad[i], numeric);
                }
                checked += 1;
            }
        }
    }
    Ok((worst <= 1e-4, format!("{checked} coordinates, max relative error {worst:.2e} ({worst_at})")))
}

/// 9. Metric identities.
fn criterion_9() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    for n in [2usize, 3, 10] {
        let uniform = PredictionVector::new(vec![1.0 / n as f64; n]).unwrap();
        check(close(entropy(&uniform), (n as f64).ln()), "entropy(uniform) = ln n");
        let mut one = vec![0.0; n];
        one[1] = 1.0;
        let onehot = PredictionVector::new(one).unwrap();
        check(close(entropy(&onehot), 0.0), "entropy(one-hot) = 0");
        check(close(modified_entropy(&onehot, 1), 0.0), "Mentr(correct one-hot) = 0");
        check(modified_entropy(&onehot, 0) > 10.0, "Mentr(wrong one-hot) is large");
        let s = AttackSample { probs: onehot.clone(), true_label: 1, is_member: true };
        check(correctness_attack(&s), "correct prediction → member");
        check(close(clip_confidence(&onehot, 0.7).unwrap().max(), 0.7), "clip caps the max");
        check(close(clip_confidence(&onehot, 0.7).unwrap().probs().iter().sum(), 1.0), "clip keeps a distribution");
    }
    let mut rng = seed::rng(909);
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let c = Confusion::from_predictions(&pred, &truth).unwrap();
        check(c.tp + c.fp + c.tn + c.fn_ == n, "confusion counts sum to n");
        let (p, r) = (c.precision(), c.recall());
        if p + r > 0.0 {
            check(close(c.f1(), 2.0 * p * r / (p + r)), "F1 = 2PR/(P+R)");
        }
        let inverted: Vec<bool> = pred.iter().map(|b| !b).collect();
        let ci = Confusion::from_predictions(&inverted, &truth).unwrap();
        if c.tp + c.fn_ > 0 && c.tn + c.fp > 0 {
            check(close(c.balanced_accuracy() + ci.balanced_accuracy(), 1.0), "BA(pred) + BA(¬pred) = 1");
        }
    }
    check(close(mean_deviation(&[0.5; 4]), 0.0), "deviation at 0.5 is 0");
    check(close(mean_deviation(&[0.0, 1.0, 0.25, 0.75]), 0.375), "mean |F1 − 0.5|");
    let n = failures.len();
    failures.dedup();
    Ok((n == 0, if n == 0 { "all identities hold".into() } else { failures.join("; ") }))
}

/// 10. evaluate_f1 against a brute-force confusion matrix.
fn criterion_10() -> Outcome {
    let mut rng = seed::rng(1010);
    let mut wrong = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..80);
        let bias = rng.random::<f64>();
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(bias)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for (p, t) in pred.iter().zip(&truth) {
            match (p, t) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let oracle = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        if (evaluate_f1(&pred, &truth).map_err(err)? - oracle).abs() > 1e-12 {
            wrong += 1;
        }
    }
    Ok((wrong == 0, format!("{wrong}/1000 mismatches")))
}

/// 11. Weight-decay and max_conf sweeps run and emit sweep.csv.
fn criterion_11(root: &Path) -> Outcome {
    let cfg = small_config(root, "sweep")?;
    let rows = run_sweeps(&cfg).map_err(err)?;
    let text = fs::read_to_string(cfg.output_dir.join("sweep.csv")).map_err(err)?;
    let mut lines = text.lines();
    let header_ok = lines.next() == Some(SWEEP_HEADER.join(",").as_str());
    let body: Vec<&str> = lines.collect();
    let wd = body.iter().filter(|l| l.starts_with("weight_decay,")).count();
    let mc = body.iter().filter(|l| l.starts_with("max_conf,")).count();
    let expected = (cfg.sweep_weight_decay.len(), cfg.sweep_max_conf.len());
    Ok((
        header_ok && (wd, mc) == expected && rows.len() == body.len(),
        format!("{wd} weight-decay rows, {mc} max_conf rows, header ok: {header_ok}"),
    ))
}

// ------------------------------------------------------------------ main

fn report(n: usize, outcome: Outcome, failed: &mut Vec<usize>) {
    match outcome {
        Ok((true, msg)) => println!("criterion {n:>2}: PASS  {msg}"),
        Ok((false, msg)) => {
            println!("criterion {n:>2}: FAIL  {msg}");
            failed.push(n);
        }
        Err(e) => {
            println!("criterion {n:>2}: FAIL  error: {e}");
            failed.push(n);
        }
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut failed = Vec::new();

    let simple: [(usize, fn() -> Outcome); 6] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (8, criterion_8), (9, criterion_9), (10, criterion_10)];
    for (n, f) in simple {
        if want(n) {
            report(n, f(), &mut failed);
        }
    }
    if want(4) {
        report(4, criterion_4(root), &mut failed);
    }
    if want(11) {
        report(11, criterion_11(root), &mut failed);
    }
    if want(5) || want(6) || want(7) {
        let data = root.join("desk-data");
        let cfg = ExperimentConfig {
            dataset: data.clone(),
            train_limit: 4000,
            n_participants: 4,
            topology: TopologyKind::Fully,
            arch: "cnn".into(),
            tune: true,
            output_dir: root.join("desk"),
            ..ExperimentConfig::default()
        };
        let run = write_synth(&data, 6000, 5000, 0).and_then(|_| {
            let start = Instant::now();
            run_experiment(&cfg).map(|o| (o, start.elapsed())).map_err(err)
        });
        match run {
            Ok((out, elapsed)) => {
                if want(5) {
                    report(5, criterion_5(&out, &cfg.output_dir), &mut failed);
                }
                if want(6) {
                    report(6, criterion_6(&out, elapsed), &mut failed);
                }
                if want(7) {
                    report(7, criterion_7(out.tuner.as_ref().expect("tuning enabled"), &cfg), &mut failed);
                }
            }
            Err(e) => {
                for n in [5, 6, 7].into_iter().filter(|n| want(*n)) {
                    report(n, Err(e.clone()), &mut failed);
                }
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
