//! Acceptance gate: ten end-to-end criteria covering gradient exactness,
//! update-rule arithmetic, density/selection semantics, graft/freeze
//! correctness, memorization, unlearning efficacy, attack recovery,
//! attack sanity, and determinism/persistence. Each test prints one
//! PASS/FAIL line (run with `--nocapture` to see them on success).

use kunbr::checkpoint::{self, Precision};
use kunbr::corpus::{generate_corpus, split, to_example, Tokenizer};
use kunbr::density::{
    block_eligibility, estimate_density, normalize, partition_blocks, score_blocks, select_blocks,
};
use kunbr::eval::{
    mcq_accuracy, prepare_seed, run_seed, Algorithm, ExperimentConfig, ExperimentReport,
};
use kunbr::loss::{
    finite_difference_gradients, loss_and_gradients, max_relative_error, Example, LossSpec,
};
use kunbr::model::{
    init_model, sgd_apply, Direction, FreezeMask, GradientMap, ModelConfig,
    ParameterStore,
};
use kunbr::pipeline::{build_graft, revert};
use kunbr::tensor::Tensor;
use kunbr::unlearn::{
    combine_gd, ga_step, gd_step, make_rmu_delta, npo_step, ria_step, rmu_step, rmu_target,
    Method, UnlearnConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn verdict(n: usize, what: &str, pass: bool) -> bool {
    println!(
        "[{}] criterion {n}: {what}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn tiny_config() -> ModelConfig {
    // 3,728 parameters — small enough for the finite-difference budget.
    ModelConfig {
        h_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 144,
        ctx: 16,
        seed: 77,
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        h_layers: 4,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab: 144,
        ctx: 16,
        seed: 5,
    }
}

fn examples(n: usize, seed: u64) -> Vec<Example> {
    let tok = Tokenizer::default();
    generate_corpus(n.max(8), seed)
        .unwrap()
        .iter()
        .take(n)
        .map(|r| to_example(&tok, r).unwrap())
        .collect()
}

// ── Criterion 1: gradient exactness ──────────────────────────────────

#[test]
fn criterion_01_gradient_exactness() {
    let start = Instant::now();
    let model = init_model(&tiny_config()).unwrap();
    assert!(model.num_params() <= 5000, "oracle config too large");
    let batch = examples(3, 1);
    let mask = FreezeMask::all(&model);
    let rmu_targets: Vec<Vec<f64>> = batch
        .iter()
        .map(|ex| {
            let mut seq = ex.prompt.clone();
            seq.extend_from_slice(&ex.target[..ex.target.len() - 1]);
            rmu_target(&model, &seq).unwrap()
        })
        .collect();
    // Perturb targets so the representation-distance loss has nonzero
    // gradients at the evaluation point.
    let rmu_targets: Vec<Vec<f64>> = rmu_targets
        .iter()
        .map(|t| t.iter().map(|v| v + 0.05).collect())
        .collect();
    let specs = vec![
        LossSpec::Nll,
        LossSpec::Npo { epsilon: 1e-6 },
        LossSpec::Ria,
        LossSpec::RepDistance {
            targets: rmu_targets,
        },
    ];
    let mut worst = 0.0f64;
    for spec in &specs {
        let (_, exact) = loss_and_gradients(&model, &batch, spec, &mask).unwrap();
        let fd = finite_difference_gradients(
            &model,
            &batch,
            spec,
            1e-5,
            &mask,
            kunbr::loss::DEFAULT_ORACLE_BUDGET,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&exact, &fd));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && elapsed < 120.0;
    assert!(
        verdict(
            1,
            &format!(
                "reverse-mode matches finite differences for all losses \
                 (max rel err {worst:.2e}, {elapsed:.1}s)"
            ),
            pass
        ),
        "worst error {worst}, elapsed {elapsed}s"
    );
}

// ── Criterion 2: update-rule oracles ─────────────────────────────────

#[test]
fn criterion_02_update_rule_oracles() {
    let model = init_model(&small_config()).unwrap();
    let forget = examples(6, 2);
    let retain = examples(6, 3);
    let mask = FreezeMask::all(&model);
    let lr = 3e-3;
    let alpha = 0.1;
    let eps = 1e-6;

    let mut max_err = 0.0f64;
    let mut check = |stepped: &ParameterStore, grads: &GradientMap, sign: f64| {
        for (name, p0) in &model.params {
            let g = &grads.0[name];
            let actual = &stepped.get(name).data;
            for i in 0..p0.data.len() {
                let expect = p0.data[i] + sign * lr * g.data[i];
                max_err = max_err.max((expect - actual[i]).abs());
            }
        }
    };

    // GA: ascent on the forget NLL.
    let (_, g) = loss_and_gradients(&model, &forget, &LossSpec::Nll, &mask).unwrap();
    let mut m = model.clone();
    ga_step(&mut m, &forget, lr, &mask).unwrap();
    check(&m, &g, 1.0);

    // GD: descent on α·∇retain − ∇forget.
    let (_, gf) = loss_and_gradients(&model, &forget, &LossSpec::Nll, &mask).unwrap();
    let (_, gr) = loss_and_gradients(&model, &retain, &LossSpec::Nll, &mask).unwrap();
    let combined = combine_gd(&gr, &gf, alpha);
    let mut m = model.clone();
    gd_step(&mut m, &forget, &retain, lr, alpha, &mask).unwrap();
    check(&m, &combined, -1.0);

    // NPO: descent on E[log(1 − p)].
    let (_, g) =
        loss_and_gradients(&model, &forget, &LossSpec::Npo { epsilon: eps }, &mask).unwrap();
    let mut m = model.clone();
    npo_step(&mut m, &forget, lr, eps, &mask).unwrap();
    check(&m, &g, -1.0);

    // RIA: descent on the summed incorrect-option NLL.
    let (_, g) = loss_and_gradients(&model, &forget, &LossSpec::Ria, &mask).unwrap();
    let mut m = model.clone();
    ria_step(&mut m, &forget, lr, &mask).unwrap();
    check(&m, &g, -1.0);

    // RMU: descent on the representation distance to the δ-perturbed model.
    let delta = make_rmu_delta(&model, 0.05, 9).unwrap();
    let mut perturbed = model.clone();
    for (name, d) in &delta {
        let p = perturbed.params.get_mut(name).unwrap();
        for (pv, dv) in p.data.iter_mut().zip(d.data.iter()) {
            *pv += dv;
        }
    }
    let targets: Vec<Vec<f64>> = forget
        .iter()
        .map(|ex| {
            let mut seq = ex.prompt.clone();
            seq.extend_from_slice(&ex.target[..ex.target.len() - 1]);
            rmu_target(&perturbed, &seq).unwrap()
        })
        .collect();
    let (_, g) =
        loss_and_gradients(&model, &forget, &LossSpec::RepDistance { targets }, &mask).unwrap();
    let mut m = model.clone();
    rmu_step(&mut m, &forget, lr, &delta, &mask).unwrap();
    check(&m, &g, -1.0);

    // Worked GD example: θ 1.0 → 1.015 under (η=0.1, α=0.1, ∇r=0.5, ∇f=0.2).
    let mut scalar_model = model.clone();
    let name = "head.b";
    scalar_model.params.get_mut(name).unwrap().data[0] = 1.0;
    let shape = scalar_model.get(name).shape.clone();
    let mut gr1 = Tensor::zeros(&shape);
    gr1.data[0] = 0.5;
    let mut gf1 = Tensor::zeros(&shape);
    gf1.data[0] = 0.2;
    let combined = combine_gd(
        &GradientMap([(name.to_string(), gr1)].into_iter().collect()),
        &GradientMap([(name.to_string(), gf1)].into_iter().collect()),
        0.1,
    );
    sgd_apply(&mut scalar_model, &combined, 0.1, Direction::Descend, &mask).unwrap();
    let worked = (scalar_model.get(name).data[0] - 1.015).abs();

    let pass = max_err < 1e-12 && worked < 1e-12;
    assert!(
        verdict(
            2,
            &format!(
                "all five update rules match the arithmetic oracle to 1e-12 \
                 (max err {max_err:.2e}); GD worked example 1.0 → 1.015 exact"
            ),
            pass
        ),
        "max step error {max_err}, worked example error {worked}"
    );
}

// ── Criterion 3: density invariants ──────────────────────────────────

#[test]
fn criterion_03_density_invariants() {
    let start = Instant::now();
    let model = init_model(&small_config()).unwrap();
    let batch = examples(8, 4);
    let before = model.digest();
    let density = estimate_density(&model, &[batch]).unwrap();
    let model_untouched = model.digest() == before;
    let k_norm = density.k_norm.clone().unwrap();
    let sum_err = (k_norm.iter().sum::<f64>() - 1.0).abs();

    // Selection invariant under positive rescaling of K.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rescale_ok = true;
    for _ in 0..50 {
        let h = 16;
        let k: Vec<f64> = (0..h).map(|_| rng.gen_range(0.0..1.0)).collect();
        let c: f64 = rng.gen_range(0.1..10.0);
        let scaled: Vec<f64> = k.iter().map(|v| v * c).collect();
        let p = partition_blocks(h, 4).unwrap();
        let s1 = score_blocks(&p, &normalize(&k).unwrap()).unwrap();
        let s2 = score_blocks(&p, &normalize(&scaled).unwrap()).unwrap();
        let sel1 = select_blocks(&s1, &p, 2, 2).unwrap();
        let sel2 = select_blocks(&s2, &p, 2, 2).unwrap();
        rescale_ok &= sel1 == sel2;
    }

    // Partition invariants, exhaustively for all M ≤ H ≤ 64.
    let mut partition_ok = true;
    for h in 1..=64usize {
        for m in 1..=h {
            let p = partition_blocks(h, m).unwrap();
            let n = h / m;
            partition_ok &= p.assignment.len() == h;
            partition_ok &= p.layers_per_block == n;
            // Contiguous, non-decreasing, covers exactly 0..m-1, and every
            // block except the last has exactly n layers.
            let mut counts = vec![0usize; m];
            for (l, &b) in p.assignment.iter().enumerate() {
                partition_ok &= b < m;
                if l > 0 {
                    let prev = p.assignment[l - 1];
                    partition_ok &= b == prev || b == prev + 1;
                }
                counts[b] += 1;
            }
            for (b, &c) in counts.iter().enumerate() {
                if b + 1 < m {
                    partition_ok &= c == n;
                } else {
                    partition_ok &= c >= n;
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass =
        model_untouched && sum_err < 1e-9 && rescale_ok && partition_ok && elapsed < 60.0;
    assert!(
        verdict(
            3,
            &format!(
                "density normalization, purity, rescale invariance, and \
                 partition invariants hold (ΣK_norm err {sum_err:.1e}, {elapsed:.1}s)"
            ),
            pass
        ),
        "untouched={model_untouched} sum_err={sum_err} rescale={rescale_ok} \
         partition={partition_ok} elapsed={elapsed}"
    );
}

// ── Criterion 4: selection semantics ─────────────────────────────────

#[test]
fn criterion_04_selection_semantics() {
    let partition = partition_blocks(32, 8).unwrap();
    let eligible = block_eligibility(&partition, 2);
    // Block 7 holds layers 28–31, which include layers 30 and 31.
    let head_block_excluded = !eligible[7] && eligible[..7].iter().all(|&e| e);

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ok = head_block_excluded;
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let selected = select_blocks(&scores, &partition, 6, 2).unwrap();
        ok &= !selected.contains(&7);
        ok &= selected.len() == 6;
        // Sort oracle: stable sort of the 7 eligible blocks by descending
        // score with ties toward the lower id.
        let mut oracle: Vec<usize> = (0..7).collect();
        oracle.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        ok &= selected == oracle[..6];
    }
    assert!(verdict(
        4,
        "head block never selected; top-6 of the 7 eligible blocks matches \
         the sort oracle over 1,000 random score vectors",
        ok
    ));
}

// ── Criterion 5: graft/freeze correctness ────────────────────────────

#[test]
fn criterion_05_graft_freeze_correctness() {
    let model = init_model(&small_config()).unwrap();
    let records = generate_corpus(16, 6).unwrap();
    let splits = split(&records, 0.5, 0.5, 6).unwrap();
    let partition = partition_blocks(4, 4).unwrap();

    // Identity graft is a bit-level no-op.
    let graft = build_graft(&model, &model, &partition, 1, false).unwrap();
    let identity_ok = graft.base.digest() == model.digest();

    // Block-local GD leaves frozen bytes unchanged.
    let mut unlearned = model.clone();
    for t in unlearned.params.values_mut() {
        for v in t.data.iter_mut() {
            *v *= 0.99;
        }
    }
    let mut graft = build_graft(&model, &unlearned, &partition, 2, false).unwrap();
    let frozen_before = graft.base.frozen_digest(&graft.mask);
    let cfg = UnlearnConfig {
        method: Method::Gd,
        lr: 1e-3,
        epochs: 3,
        batch_size: 8,
        ..Default::default()
    };
    kunbr::unlearn::run_unlearning(&mut graft.base, &splits, &cfg, &graft.mask).unwrap();
    let frozen_ok = graft.base.frozen_digest(&graft.mask) == frozen_before;

    // Graft→revert without training is a no-op on the unlearned model.
    let untrained = build_graft(&model, &unlearned, &partition, 1, false).unwrap();
    let mut u = unlearned.clone();
    revert(&mut u, &untrained, 1).unwrap();
    let noop_ok = u.digest() == unlearned.digest();

    // Disjoint-block reverts commute bitwise.
    let mut g1 = build_graft(&model, &unlearned, &partition, 1, false).unwrap();
    let mut g2 = build_graft(&model, &unlearned, &partition, 3, false).unwrap();
    kunbr::unlearn::run_unlearning(&mut g1.base, &splits, &cfg, &g1.mask).unwrap();
    kunbr::unlearn::run_unlearning(&mut g2.base, &splits, &cfg, &g2.mask).unwrap();
    let mut a = unlearned.clone();
    revert(&mut a, &g1, 1).unwrap();
    revert(&mut a, &g2, 3).unwrap();
    let mut b = unlearned.clone();
    revert(&mut b, &g2, 3).unwrap();
    revert(&mut b, &g1, 1).unwrap();
    let commute_ok = a.digest() == b.digest();

    let pass = identity_ok && frozen_ok && noop_ok && commute_ok;
    assert!(
        verdict(
            5,
            "identity graft, frozen-byte immutability, untrained revert \
             no-op, and disjoint revert commutation all hold bitwise",
            pass
        ),
        "identity={identity_ok} frozen={frozen_ok} noop={noop_ok} commute={commute_ok}"
    );
}

// ── Criteria 6–9: shared end-to-end experiment at defaults ───────────

struct Experiment {
    corpus_accuracy: Vec<f64>,
    memorize_secs: f64,
    gd: Vec<ExperimentReport>,
    kunbr: Vec<ExperimentReport>,
    total_secs: f64,
}

static EXPERIMENT: OnceLock<Experiment> = OnceLock::new();

fn experiment() -> &'static Experiment {
    EXPERIMENT.get_or_init(|| {
        let start = Instant::now();
        let config = ExperimentConfig::default();
        let seeds = [1u64, 2, 3, 4, 5];
        let mut corpus_accuracy = Vec::new();
        let mut memorize_secs = 0.0f64;
        let mut gd = Vec::new();
        let mut kunbr_reports = Vec::new();
        for &seed in &seeds {
            let t0 = Instant::now();
            let (model, splits) = prepare_seed(&config, seed).unwrap();
            memorize_secs = memorize_secs.max(t0.elapsed().as_secs_f64());
            let mut all = splits.retain.clone();
            all.extend(splits.forget_all());
            corpus_accuracy.push(mcq_accuracy(&model, &all).unwrap());
            gd.push(
                run_seed(&model, &splits, Algorithm::Baseline(Method::Gd), &config, seed)
                    .unwrap(),
            );
            kunbr_reports.push(
                run_seed(&model, &splits, Algorithm::BlockPipeline, &config, seed).unwrap(),
            );
        }
        Experiment {
            corpus_accuracy,
            memorize_secs,
            gd,
            kunbr: kunbr_reports,
            total_secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_06_memorization() {
    let exp = experiment();
    let min_acc = exp
        .corpus_accuracy
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let pass = min_acc >= 0.95 && exp.memorize_secs < 600.0;
    assert!(
        verdict(
            6,
            &format!(
                "default config memorizes 200 facts to ≥95% MCQ accuracy \
                 (min over seeds {:.1}%, slowest {:.0}s)",
                100.0 * min_acc,
                exp.memorize_secs
            ),
            pass
        ),
        "min accuracy {min_acc}, memorize {:.0}s",
        exp.memorize_secs
    );
}

#[test]
fn criterion_07_unlearning_efficacy() {
    let exp = experiment();
    // Pre-unlearning forget/retain accuracy is the memorized model's (≈1.0
    // by criterion 6); retain must stay ≥ 80% of it, V must drop to ≤ 40%.
    let over = |rs: &[ExperimentReport]| {
        let n = 3.min(rs.len());
        let v = mean(rs[..n].iter().map(|r| r.a_unlearn));
        let ret = mean(rs[..n].iter().map(|r| r.retain_accuracy));
        (v, ret)
    };
    let pre_retain = mean(exp.corpus_accuracy.iter().take(3).cloned());
    let (gd_v, gd_ret) = over(&exp.gd);
    let (k_v, k_ret) = over(&exp.kunbr);
    let pass = gd_v <= 0.40
        && k_v <= 0.40
        && gd_ret >= 0.80 * pre_retain
        && k_ret >= 0.80 * pre_retain;
    assert!(
        verdict(
            7,
            &format!(
                "3-seed means: V-accuracy GD {:.1}% / pipeline {:.1}% (≤40%), \
                 retain GD {:.1}% / pipeline {:.1}% (≥80% of pre)",
                100.0 * gd_v,
                100.0 * k_v,
                100.0 * gd_ret,
                100.0 * k_ret
            ),
            pass
        ),
        "gd_v={gd_v} k_v={k_v} gd_ret={gd_ret} k_ret={k_ret} pre={pre_retain}"
    );
}

#[test]
fn criterion_08_rtt_recovery() {
    let exp = experiment();
    let gd_rec = mean(exp.gd.iter().map(|r| r.a_recover));
    let k_rec = mean(exp.kunbr.iter().map(|r| r.a_recover));
    let gd_rtt = mean(exp.gd.iter().map(|r| r.a_rtt));
    let k_rtt = mean(exp.kunbr.iter().map(|r| r.a_rtt));
    let pass = k_rec < gd_rec && k_rtt < gd_rtt && exp.total_secs < 2700.0;
    assert!(
        verdict(
            8,
            &format!(
                "5-seed means: recovery pipeline {:.1}% < GD {:.1}%; \
                 post-attack accuracy pipeline {:.1}% < GD {:.1}% ({:.0}s total)",
                100.0 * k_rec,
                100.0 * gd_rec,
                100.0 * k_rtt,
                100.0 * gd_rtt,
                exp.total_secs
            ),
            pass
        ),
        "k_rec={k_rec} gd_rec={gd_rec} k_rtt={k_rtt} gd_rtt={gd_rtt} \
         elapsed={:.0}s",
        exp.total_secs
    );
}

#[test]
fn criterion_09_rtt_sanity() {
    let exp = experiment();
    let min_t = exp
        .gd
        .iter()
        .chain(exp.kunbr.iter())
        .map(|r| r.attack_t_accuracy)
        .fold(f64::INFINITY, f64::min);
    let pass = min_t >= 0.95;
    assert!(
        verdict(
            9,
            &format!(
                "every attacked model relearns its own training subset \
                 (min T accuracy {:.1}%)",
                100.0 * min_t
            ),
            pass
        ),
        "min T accuracy {min_t}"
    );
}

// ── Criterion 10: determinism & persistence ──────────────────────────

#[test]
fn criterion_10_determinism_and_persistence() {
    // Identical config + seed reproduce bit-identical models and reports.
    let config = ExperimentConfig {
        n_facts: 16,
        model: small_config(),
        train_max_steps: 1500,
        ..Default::default()
    };
    let run = || {
        let (model, splits) = prepare_seed(&config, 3).unwrap();
        let report =
            run_seed(&model, &splits, Algorithm::Baseline(Method::Gd), &config, 3).unwrap();
        (model.digest(), report)
    };
    let (d1, r1) = run();
    let (d2, r2) = run();
    let deterministic = d1 == d2 && r1 == r2;

    // Checkpoint round trip is byte-exact.
    let (model, _) = prepare_seed(&config, 3).unwrap();
    let bytes = checkpoint::to_bytes(&model, Precision::F64).unwrap();
    let loaded = checkpoint::from_bytes(&bytes).unwrap();
    let bytes2 = checkpoint::to_bytes(&loaded, Precision::F64).unwrap();
    let round_trip = bytes == bytes2 && loaded.digest() == model.digest();

    // Injected single-bit corruption is detected via manifest hashes.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.kunbr");
    checkpoint::save(&model, Precision::F64, &path).unwrap();
    let mut manifest = kunbr::manifest::RunManifest::new("test");
    manifest.register(dir.path(), "model", "model.kunbr").unwrap();
    let mut corrupted = std::fs::read(&path).unwrap();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 0b0001_0000;
    std::fs::write(&path, &corrupted).unwrap();
    let detected = manifest.verify(dir.path(), "model").is_err();

    let pass = deterministic && round_trip && detected;
    assert!(
        verdict(
            10,
            "replays are bit-identical; checkpoint round trip is byte-exact; \
             single-bit corruption is caught by manifest hashes",
            pass
        ),
        "deterministic={deterministic} round_trip={round_trip} detected={detected}"
    );
}
