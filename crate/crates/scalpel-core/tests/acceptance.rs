//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (visible with `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use scalpel_core::costs::CostPolicy;
use scalpel_core::curvature::KronCurvature;
use scalpel_core::harness::{
    build_model, evaluate_loss, forward_backward, save_model, sgd_train, Batch, Corpus, DataConfig,
    LayerKind, ModelCheckpoint, ModelConfig, Split,
};
use scalpel_core::linalg::{self, Mat, Vector};
use scalpel_core::oracle::{exhaustive_best_mask, MaskMode, QuadraticObjective};
use scalpel_core::report::{layer_csv, sparsity_by_layer, sparsity_by_type};
use scalpel_core::rng::Rng;
use scalpel_core::selection::{select_unstructured, PruneMask, PruneMode};
use scalpel_core::surgeon::{run, LayerShotStats, PruneSettings, ShotData, ShotReport};
use scalpel_core::updates::{general_update, UpdateKind, UpdatePolicy};
use scalpel_core::verify;

fn pass_line(criterion: usize, name: &str, detail: &str) {
    println!("ACCEPTANCE {criterion:>2}: PASS — {name} ({detail})");
}

// ---------------------------------------------------------------------------
// Toy char-LM fixtures
// ---------------------------------------------------------------------------

/// Word-structured byte stream over a 27-symbol alphabet (0 = separator,
/// 1..=26 = letters), so next-byte prediction has learnable structure.
fn synthetic_corpus(len: usize, seed: u64, alphabet: u8) -> Vec<u8> {
    let words: &[&[u8]] = &[
        b"abac", b"cadde", b"feg", b"hij", b"kalam", b"nopon", b"qarst", b"uvu", b"wyz", b"gag",
        b"ded", b"mimic", b"tot",
    ];
    let mut rng = Rng::seed_stream(seed, &[0xC0DE]);
    let mut out = Vec::with_capacity(len + 8);
    while out.len() < len {
        let w = words[rng.index(words.len())];
        for &ch in w {
            out.push(((ch - b'a') % (alphabet - 1)) + 1);
        }
        out.push(0);
    }
    out.truncate(len);
    out
}

struct ToyLm {
    model: ModelCheckpoint,
    train: Vec<Batch>,
    test: Vec<Batch>,
}

fn toy_char_lm(seed: u64, vocab: usize) -> ToyLm {
    let corpus = Corpus::from_bytes(synthetic_corpus(6000, seed, vocab as u8)).unwrap();
    let config = DataConfig {
        seq_len: 32,
        batch_size: 8,
        max_batches: 16,
        test_fraction: 0.15,
        seed,
    };
    let train = corpus.batches(Split::Train, &config).unwrap();
    let test = corpus.batches(Split::Test, &config).unwrap();
    let mut model = build_model(
        &ModelConfig::Mlp {
            vocab_size: vocab,
            hidden: vec![16],
        },
        seed,
    )
    .unwrap();
    sgd_train(&mut model, &train, 12, 0.5).unwrap();
    ToyLm { model, train, test }
}

fn settings(
    mode: PruneMode,
    alpha: f64,
    shots: usize,
    policy: CostPolicy,
    kind: UpdateKind,
    seed: u64,
) -> PruneSettings {
    let mut s = PruneSettings::defaults(mode, alpha);
    s.shots = shots;
    s.policy = policy;
    s.update = UpdatePolicy {
        kind,
        max_correlated: 64,
    };
    s.seed = seed;
    s
}

fn final_test_loss(toy: &ToyLm, settings: &PruneSettings) -> f64 {
    let data = ShotData {
        train: &toy.train,
        test: Some(&toy.test),
    };
    let (pruned, _) = run(&toy.model, &data, settings).unwrap();
    evaluate_loss(&pruned, &toy.test).unwrap()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_oracle_equivalence() {
    let started = Instant::now();
    let checks = verify::oracle_equivalence_suite(50, 0xACC_E01).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    for check in &checks {
        assert!(check.passed, "{}", check.line());
    }
    assert!(
        elapsed < 30.0,
        "oracle equivalence took {elapsed:.1}s (budget 30s)"
    );
    let worst = checks.iter().map(|c| c.worst).fold(0.0f64, f64::max);
    pass_line(
        1,
        "fast paths match the dense general solution to 1e-8",
        &format!("50 instances, worst rel err {worst:.2e}, {elapsed:.1}s"),
    );
}

#[test]
fn criterion_02_quadratic_exactness() {
    let started = Instant::now();
    let check = verify::quadratic_exactness_suite(100, 0xACC_E02).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(check.passed, "{}", check.line());
    assert!(
        elapsed < 10.0,
        "quadratic exactness took {elapsed:.1}s (budget 10s)"
    );
    pass_line(
        2,
        "predicted costs equal realized quadratic increases to 1e-8",
        &format!("100 removals, worst {:.2e}, {elapsed:.1}s", check.worst),
    );
}

#[test]
fn criterion_03_gradient_checks() {
    let started = Instant::now();
    let step = 1e-5;
    let mut checked_total = 0usize;
    let mut worst = 0.0f64;

    let cases: Vec<(ModelCheckpoint, Batch)> = vec![
        {
            let model = build_model(
                &ModelConfig::Mlp {
                    vocab_size: 13,
                    hidden: vec![10, 9],
                },
                11,
            )
            .unwrap();
            let mut rng = Rng::seed(1);
            let inputs = ndarray::Array2::from_shape_fn((3, 9), |_| rng.index(13) as u32);
            let targets = ndarray::Array2::from_shape_fn((3, 9), |_| rng.index(13) as u32);
            (model, Batch::Tokens { inputs, targets })
        },
        {
            let model = build_model(
                &ModelConfig::Transformer {
                    vocab_size: 11,
                    d_model: 8,
                    ff_dim: 12,
                },
                17,
            )
            .unwrap();
            let mut rng = Rng::seed(2);
            let inputs = ndarray::Array2::from_shape_fn((2, 7), |_| rng.index(11) as u32);
            let targets = ndarray::Array2::from_shape_fn((2, 7), |_| rng.index(11) as u32);
            (model, Batch::Tokens { inputs, targets })
        },
        {
            let model = build_model(
                &ModelConfig::Linear {
                    in_dim: 6,
                    out_dim: 5,
                },
                23,
            )
            .unwrap();
            let mut rng = Rng::seed(3);
            let features = Mat::from_shape_fn((8, 6), |_| rng.normal());
            let targets = Mat::from_shape_fn((8, 5), |_| rng.normal());
            (model, Batch::Regression { features, targets })
        },
    ];

    for (case_idx, (model, batch)) in cases.iter().enumerate() {
        let fb = forward_backward(model, batch).unwrap();
        let mut rng = Rng::seed_stream(0xACC_E03, &[case_idx as u64]);
        let per_case = 70usize;
        for _ in 0..per_case {
            let li = rng.index(model.layers.len());
            let (r, c) = {
                let w = &model.layers[li].weight;
                (rng.index(w.nrows()), rng.index(w.ncols()))
            };
            let mut plus = model.clone();
            plus.layers[li].weight[[r, c]] += step;
            let mut minus = model.clone();
            minus.layers[li].weight[[r, c]] -= step;
            let lp = evaluate_loss(&plus, std::slice::from_ref(batch)).unwrap();
            let lm = evaluate_loss(&minus, std::slice::from_ref(batch)).unwrap();
            let fd = (lp - lm) / (2.0 * step);
            let analytic = fb.weight_grads[li].1[[r, c]];
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(
                rel <= 1e-4,
                "case {case_idx} layer {li} ({r},{c}): rel {rel:.2e}"
            );
            worst = worst.max(rel);
            checked_total += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(checked_total >= 200);
    assert!(
        elapsed < 60.0,
        "gradient checks took {elapsed:.1}s (budget 60s)"
    );
    pass_line(3, "analytic gradients match central finite differences", &format!("{checked_total} weights across 3 layer families, worst rel err {worst:.2e}, {elapsed:.1}s"));
}

#[test]
fn criterion_04_nearest_kronecker() {
    let checks = verify::nkp_agreement_suite(20, 0xACC_E04).unwrap();
    for check in &checks {
        assert!(check.passed, "{}", check.line());
    }
    pass_line(
        4,
        "power method agrees with rearrangement SVD; sigma monotone; rank-2 residual no worse",
        &format!("20 Fishers, worst Frobenius gap {:.2e}", checks[0].worst),
    );
}

#[test]
fn criterion_05_mask_validity() {
    // Semi-structured at alpha 0.5: exactly 2 zeros per 4-block everywhere.
    let toy = toy_char_lm(5, 28);
    let semi = settings(
        PruneMode::Semi24,
        0.5,
        5,
        CostPolicy::KfacObs,
        UpdateKind::FullCorrelation,
        5,
    );
    let data = ShotData {
        train: &toy.train,
        test: None,
    };
    let (pruned, reports) = run(&toy.model, &data, &semi).unwrap();
    for layer in pruned.prunable_layers() {
        let w = &layer.weight;
        assert_eq!(w.ncols() % 4, 0);
        for r in 0..w.nrows() {
            for b in 0..w.ncols() / 4 {
                let zeros = (0..4).filter(|&k| w[[r, 4 * b + k]] == 0.0).count();
                assert_eq!(zeros, 2, "layer {} row {r} block {b}", layer.name);
            }
        }
    }
    assert!((reports.last().unwrap().realized_size - 0.5).abs() < 1e-12);

    // Structured: the zero pattern is exactly a union of whole rows/columns.
    let toy = toy_char_lm(6, 27);
    let structured = settings(
        PruneMode::Structured,
        0.7,
        10,
        CostPolicy::KfacObs,
        UpdateKind::FullCorrelation,
        6,
    );
    let (pruned, _) = run(
        &toy.model,
        &ShotData {
            train: &toy.train,
            test: None,
        },
        &structured,
    )
    .unwrap();
    for layer in pruned.prunable_layers() {
        let w = &layer.weight;
        let zero_rows: Vec<usize> = (0..w.nrows())
            .filter(|&r| (0..w.ncols()).all(|c| w[[r, c]] == 0.0))
            .collect();
        let zero_cols: Vec<usize> = (0..w.ncols())
            .filter(|&c| (0..w.nrows()).all(|r| w[[r, c]] == 0.0))
            .collect();
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                if w[[r, c]] == 0.0 {
                    assert!(
                        zero_rows.contains(&r) || zero_cols.contains(&c),
                        "stray zero at ({r},{c}) in {}",
                        layer.name
                    );
                }
            }
        }
    }

    // Unstructured: realized removal count is exactly floor((1-alpha)·P).
    let toy = toy_char_lm(7, 27);
    let alpha = 0.63;
    let unstructured = settings(
        PruneMode::Unstructured,
        alpha,
        5,
        CostPolicy::KfacObs,
        UpdateKind::FullCorrelation,
        7,
    );
    let (pruned, _) = run(
        &toy.model,
        &ShotData {
            train: &toy.train,
            test: None,
        },
        &unstructured,
    )
    .unwrap();
    let total = pruned.prunable_weight_count();
    let removed = total - pruned.live_weight_count();
    assert_eq!(removed, ((1.0 - alpha) * total as f64).floor() as usize);

    pass_line(
        5,
        "2:4, whole-structure, and exact-count masks are all valid",
        &format!("3 modes on the toy char-LM, {total} weights"),
    );
}

#[test]
fn criterion_06_multi_shot_benefit() {
    let mut single = Vec::new();
    let mut multi = Vec::new();
    for seed in [101u64, 202, 303, 404, 505] {
        let toy = toy_char_lm(seed, 27);
        let one = settings(
            PruneMode::Structured,
            0.5,
            1,
            CostPolicy::KfacObs,
            UpdateKind::FullCorrelation,
            seed,
        );
        let ten = settings(
            PruneMode::Structured,
            0.5,
            10,
            CostPolicy::KfacObs,
            UpdateKind::FullCorrelation,
            seed,
        );
        single.push(final_test_loss(&toy, &one));
        multi.push(final_test_loss(&toy, &ten));
    }
    let med_single = median(&mut single);
    let med_multi = median(&mut multi);
    assert!(
        med_multi <= med_single,
        "multi-shot median {med_multi:.4} worse than single-shot {med_single:.4}"
    );
    pass_line(
        6,
        "ten shots beat one shot at structured alpha 0.5",
        &format!(
            "median test loss {med_multi:.4} vs {med_single:.4}, gap {:.4}",
            med_single - med_multi
        ),
    );
}

#[test]
fn criterion_07_method_ordering() {
    let started = Instant::now();
    let seeds = [11u64, 22, 33, 44, 55];
    for alpha in [0.8, 0.7] {
        let mut magnitude = Vec::new();
        let mut kobd = Vec::new();
        let mut independent = Vec::new();
        let mut full = Vec::new();
        for &seed in &seeds {
            let toy = toy_char_lm(seed, 27);
            let shots = 10;
            magnitude.push(final_test_loss(
                &toy,
                &settings(
                    PruneMode::Structured,
                    alpha,
                    shots,
                    CostPolicy::Magnitude,
                    UpdateKind::None,
                    seed,
                ),
            ));
            kobd.push(final_test_loss(
                &toy,
                &settings(
                    PruneMode::Structured,
                    alpha,
                    shots,
                    CostPolicy::KObd,
                    UpdateKind::None,
                    seed,
                ),
            ));
            independent.push(final_test_loss(
                &toy,
                &settings(
                    PruneMode::Structured,
                    alpha,
                    shots,
                    CostPolicy::KfacObs,
                    UpdateKind::IndependentStructure,
                    seed,
                ),
            ));
            full.push(final_test_loss(
                &toy,
                &settings(
                    PruneMode::Structured,
                    alpha,
                    shots,
                    CostPolicy::KfacObs,
                    UpdateKind::FullCorrelation,
                    seed,
                ),
            ));
        }
        let m_mag = median(&mut magnitude);
        let m_kobd = median(&mut kobd);
        let m_ind = median(&mut independent);
        let m_full = median(&mut full);
        println!(
            "  alpha {alpha}: full {m_full:.4} | independent {m_ind:.4} | k-obd {m_kobd:.4} | magnitude {m_mag:.4}"
        );
        assert!(
            m_full <= m_kobd,
            "alpha {alpha}: full {m_full:.4} > k-obd {m_kobd:.4}"
        );
        assert!(
            m_kobd <= m_mag,
            "alpha {alpha}: k-obd {m_kobd:.4} > magnitude {m_mag:.4}"
        );
        assert!(
            m_full <= m_ind,
            "alpha {alpha}: full {m_full:.4} > independent {m_ind:.4}"
        );
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < 900.0,
        "method ordering took {elapsed:.0}s (budget 15min)"
    );
    pass_line(
        7,
        "full correlation <= k-obd <= magnitude, and full <= independent",
        &format!("structured alpha 0.8/0.7, medians over 5 seeds, {elapsed:.0}s"),
    );
}

#[test]
fn criterion_08_dynamic_allocation() {
    // Two identical layers, one with 100x-scaled curvature.
    let mut rng = Rng::seed(0xACC_E08);
    let base_g = {
        let b = Mat::from_shape_fn((6, 6), |_| rng.normal());
        b.dot(&b.t()) + Mat::eye(6) * 0.5
    };
    let base_a = {
        let b = Mat::from_shape_fn((6, 6), |_| rng.normal());
        b.dot(&b.t()) + Mat::eye(6) * 0.5
    };
    // Weight magnitudes bounded away from zero so the 100x curvature gap
    // dominates the per-element cost spread within each layer.
    let w = Mat::from_shape_fn((6, 6), |_| {
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        sign * rng.uniform_in(0.5, 1.5)
    });
    let robust = KronCurvature::from_factors("robust", base_g.clone(), base_a.clone());
    let sensitive = KronCurvature::from_factors("sensitive", &base_g * 10.0, &base_a * 10.0);
    let tables = vec![
        scalpel_core::costs::CostTable::compute(&w, Some(&sensitive), CostPolicy::KfacObs).unwrap(),
        scalpel_core::costs::CostTable::compute(&w, Some(&robust), CostPolicy::KfacObs).unwrap(),
    ];
    let masks = vec![
        PruneMask::empty("sensitive", 6, 6),
        PruneMask::empty("robust", 6, 6),
    ];
    let selection = select_unstructured(&tables, &masks, 0.6).unwrap();
    let removed_sensitive = selection.layers[0].elements.len();
    let removed_robust = selection.layers[1].elements.len();
    let share = removed_robust as f64 / (removed_robust + removed_sensitive) as f64;
    assert!(
        share >= 0.9,
        "only {share:.2} of removals hit the robust layer"
    );

    // The report machinery reproduces the allocation table.
    let stats = |name: &str, removed: usize| LayerShotStats {
        layer_name: name.into(),
        kind: LayerKind::Linear,
        weight_count: 36,
        rows_removed: 0,
        cols_removed: 0,
        elements_removed: removed,
        sparsity: removed as f64 / 36.0,
        update_frobenius: 0.0,
    };
    let report = ShotReport {
        shot: 1,
        alpha_t: 0.6,
        tau: selection.tau,
        realized_size: selection.realized_size,
        train_loss_before: 0.0,
        train_loss_after: 0.0,
        test_loss: None,
        lora_applied: false,
        layers: vec![
            stats("sensitive", removed_sensitive),
            stats("robust", removed_robust),
        ],
        wall_time_secs: 0.0,
    };
    let rows = sparsity_by_layer(&report);
    let csv = layer_csv(&rows);
    assert!(rows[1].sparsity > rows[0].sparsity * 5.0);
    assert!(csv.contains("robust"));
    let types = sparsity_by_type(&report);
    let total_removed: usize = types.iter().map(|t| t.elements_removed).sum();
    assert_eq!(total_removed, removed_robust + removed_sensitive);

    pass_line(
        8,
        "removals concentrate in the low-curvature layer and the report shows it",
        &format!("{:.0}% in the robust layer", share * 100.0),
    );
}

#[test]
fn criterion_09_greedy_vs_exhaustive() {
    let mut gaps = Vec::new();
    for seed in 0..25u64 {
        let mut rng = Rng::seed_stream(0xACC_E09, &[seed]);
        let bg = Mat::from_shape_fn((3, 3), |_| rng.normal());
        let ba = Mat::from_shape_fn((3, 3), |_| rng.normal());
        let g = bg.dot(&bg.t()) + Mat::eye(3) * 0.4;
        let a = ba.dot(&ba.t()) + Mat::eye(3) * 0.4;
        let fisher = scalpel_core::curvature::DenseCurvature {
            layer_name: "probe".into(),
            f: linalg::kron(&g, &a),
            out_dim: 3,
            in_dim: 3,
        };
        let theta = Vector::from_iter((0..9).map(|_| rng.normal()));
        let obj = QuadraticObjective::new(theta.clone(), fisher.clone()).unwrap();
        let w = obj.weight_matrix().unwrap();

        // Greedy: take the two cheapest independent single-element costs.
        let f_inv = linalg::spd_inverse(&fisher.f).unwrap();
        let mut order: Vec<usize> = (0..9).collect();
        order.sort_by(|&i, &j| {
            let ci = theta[i] * theta[i] / f_inv[[i, i]];
            let cj = theta[j] * theta[j] / f_inv[[j, j]];
            ci.partial_cmp(&cj).unwrap().then(i.cmp(&j))
        });
        let mut greedy = order[..2].to_vec();
        greedy.sort_unstable();
        let (_, greedy_loss) = general_update(&fisher, &greedy, &w).unwrap();
        let best = exhaustive_best_mask(&obj, 2, MaskMode::Elements).unwrap();
        let gap = greedy_loss - best.loss;
        assert!(
            gap >= -1e-9,
            "greedy beat the exhaustive optimum by {:.2e}",
            -gap
        );
        gaps.push(gap / best.loss.max(1e-12));
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let max_gap = gaps.iter().cloned().fold(0.0f64, f64::max);
    let exact = gaps.iter().filter(|g| **g < 1e-12).count();
    pass_line(
        9,
        "greedy never beats the exhaustive oracle; gap distribution recorded",
        &format!("25 instances: mean rel gap {mean_gap:.3}, max {max_gap:.3}, {exact} exact hits"),
    );
}

#[test]
fn criterion_10_determinism() {
    let toy = toy_char_lm(77, 27);
    let cfg = settings(
        PruneMode::Structured,
        0.7,
        6,
        CostPolicy::KfacObs,
        UpdateKind::FullCorrelation,
        77,
    );
    let data = ShotData {
        train: &toy.train,
        test: Some(&toy.test),
    };
    let (a, ra) = run(&toy.model, &data, &cfg).unwrap();
    let (b, rb) = run(&toy.model, &data, &cfg).unwrap();

    let dir = std::env::temp_dir().join("scalpel_acceptance_determinism");
    std::fs::create_dir_all(&dir).unwrap();
    save_model(&a, dir.join("a")).unwrap();
    save_model(&b, dir.join("b")).unwrap();
    assert_eq!(
        std::fs::read(dir.join("a.bin")).unwrap(),
        std::fs::read(dir.join("b.bin")).unwrap(),
        "checkpoint blobs differ"
    );
    assert_eq!(
        std::fs::read(dir.join("a.json")).unwrap(),
        std::fs::read(dir.join("b.json")).unwrap(),
        "checkpoint manifests differ"
    );
    let ja: Vec<String> = ra
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    let jb: Vec<String> = rb
        .iter()
        .map(|r| serde_json::to_string(r).unwrap())
        .collect();
    assert_eq!(ja, jb, "shot reports differ");
    pass_line(
        10,
        "identical runs produce byte-identical checkpoints and reports",
        &format!("{} shots compared", ja.len()),
    );
}
