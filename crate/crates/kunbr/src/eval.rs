//! Multiple-choice evaluation, the relearning fine-tuning attack, recovery
//! computation, and the seed-swept experiment driver that produces the
//! method-comparison table.

use crate::corpus::{
    generate_corpus, render_mcq, split, to_example, training_batches, DatasetSplits, FactRecord,
    Tokenizer,
};
use crate::error::{Error, Result};
use crate::loss::{loss_value, LossSpec};
use crate::model::{forward, init_model, ModelConfig, ParameterStore};
use crate::pipeline::{run_kunbr, KunbrConfig};
use crate::train::{adam_train, memorize, TrainRow};
use crate::unlearn::{run_unlearning, Method, UnlearnConfig};
use serde::{Deserialize, Serialize};

/// An unlearning algorithm under comparison: one of the five plain update
/// rules, or the block pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    Baseline(Method),
    BlockPipeline,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Baseline(m) => m.name(),
            Algorithm::BlockPipeline => "KUnBR",
        }
    }

    pub fn parse(s: &str) -> Result<Algorithm> {
        if s.eq_ignore_ascii_case("kunbr") {
            Ok(Algorithm::BlockPipeline)
        } else {
            Ok(Algorithm::Baseline(Method::parse(s)?))
        }
    }

    pub fn all() -> [Algorithm; 6] {
        [
            Algorithm::Baseline(Method::Ga),
            Algorithm::Baseline(Method::Gd),
            Algorithm::Baseline(Method::Npo),
            Algorithm::Baseline(Method::Ria),
            Algorithm::Baseline(Method::Rmu),
            Algorithm::BlockPipeline,
        ]
    }
}

/// Fraction of records whose correct year token is the model's most likely
/// choice given the prompt. Ties break toward the lowest choice index.
pub fn mcq_accuracy(model: &ParameterStore, records: &[FactRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Validation("mcq_accuracy on empty records".into()));
    }
    let tok = Tokenizer::default();
    let mut correct = 0usize;
    for record in records {
        let (prompt, choices, answer) = render_mcq(&tok, record)?;
        let logits = forward(model, &prompt)?;
        let last = &logits.data[(prompt.len() - 1) * model.config.vocab..];
        let mut best = 0usize;
        let mut best_logit = last[choices[0][0]];
        for (i, choice) in choices.iter().enumerate().skip(1) {
            let l = last[choice[0]];
            if l > best_logit {
                best = i;
                best_logit = l;
            }
        }
        if best == answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

/// Relearning attack: full-parameter adaptive-moment NLL descent on the
/// attacker-held subset, stopping once accuracy on that subset reaches
/// `target_acc` (checked per epoch) or the epoch cap runs out.
pub fn rtt_attack(
    model: &mut ParameterStore,
    t_records: &[FactRecord],
    lr: f64,
    epochs: usize,
    batch_size: usize,
    target_acc: f64,
    seed: u64,
) -> Result<Vec<TrainRow>> {
    if t_records.is_empty() {
        return Err(Error::Validation("attack set is empty".into()));
    }
    let tok = Tokenizer::default();
    let mut trace = Vec::new();
    for epoch in 0..epochs {
        if mcq_accuracy(model, t_records)? >= target_acc {
            break;
        }
        let batches = training_batches(&tok, t_records, batch_size, seed.wrapping_add(epoch as u64))?;
        let mut rows = adam_train(model, &batches, lr, batches.len())?;
        let base = trace.len();
        for (i, r) in rows.iter_mut().enumerate() {
            r.step = base + i;
        }
        trace.extend(rows);
    }
    Ok(trace)
}

/// A_Recover = A_RTT − A_Unlearn.
pub fn recovery(a_unlearn: f64, a_rtt: f64) -> f64 {
    a_rtt - a_unlearn
}

/// MCQ accuracy on retain facts plus perplexity = exp(mean NLL per target
/// token) over the retain answers.
pub fn utility_eval(model: &ParameterStore, retain_records: &[FactRecord]) -> Result<(f64, f64)> {
    let accuracy = mcq_accuracy(model, retain_records)?;
    let tok = Tokenizer::default();
    let examples: Result<Vec<_>> = retain_records.iter().map(|r| to_example(&tok, r)).collect();
    let nll = loss_value(model, &examples?, &LossSpec::Nll)?;
    Ok((accuracy, nll.exp()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_facts: usize,
    pub forget_fraction: f64,
    pub t_fraction: f64,
    pub model: ModelConfig,
    pub train_lr: f64,
    pub train_batch: usize,
    pub train_max_steps: usize,
    pub train_target_nll: f64,
    pub unlearn: UnlearnConfig,
    pub kunbr: KunbrConfig,
    pub attack_lr: f64,
    pub attack_epochs: usize,
    pub attack_batch: usize,
    pub attack_target_acc: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_facts: 200,
            forget_fraction: 0.25,
            t_fraction: 0.5,
            model: ModelConfig::default(),
            train_lr: 1e-3,
            train_batch: 32,
            train_max_steps: 4000,
            train_target_nll: 0.05,
            unlearn: UnlearnConfig::default(),
            kunbr: KunbrConfig::default(),
            attack_lr: 1e-3,
            attack_epochs: 200,
            attack_batch: 16,
            attack_target_acc: 0.95,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.unlearn.validate()?;
        self.kunbr.validate(self.model.h_layers)?;
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return Err(Error::Validation("forget_fraction must lie in (0,1)".into()));
        }
        if !(self.t_fraction > 0.0 && self.t_fraction < 1.0) {
            return Err(Error::Validation("t_fraction must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Per-seed measurement row. `a_recover` is exactly `a_rtt − a_unlearn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub seed: u64,
    pub a_unlearn: f64,
    pub a_rtt: f64,
    pub a_recover: f64,
    pub retain_accuracy: f64,
    pub retain_perplexity: f64,
    /// Post-attack accuracy on the attacker's own training subset
    /// (sanity: the attack must at least relearn what it trains on).
    pub attack_t_accuracy: f64,
    pub config_hash: String,
}

/// Mean and sample standard deviation for each reported metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub n_seeds: usize,
    pub mean_a_unlearn: f64,
    pub mean_a_rtt: f64,
    pub mean_a_recover: f64,
    pub mean_retain_accuracy: f64,
    pub mean_retain_perplexity: f64,
    pub std_a_unlearn: f64,
    pub std_a_rtt: f64,
    pub std_a_recover: f64,
    pub failed_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub reports: Vec<ExperimentReport>,
    pub aggregate: Aggregate,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Memorized starting model plus its splits, shared across methods for a
/// given seed.
pub fn prepare_seed(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(ParameterStore, DatasetSplits)> {
    let records = generate_corpus(config.n_facts, seed)?;
    let splits = split(
        &records,
        config.forget_fraction,
        config.t_fraction,
        seed.wrapping_add(1),
    )?;
    let mut model_cfg = config.model.clone();
    model_cfg.seed = model_cfg.seed.wrapping_add(seed);
    let mut model = init_model(&model_cfg)?;
    memorize(
        &mut model,
        &splits,
        config.train_lr,
        config.train_batch,
        config.train_max_steps,
        config.train_target_nll,
        seed.wrapping_add(2),
    )?;
    Ok((model, splits))
}

/// Applies one unlearning algorithm to a memorized model.
pub fn apply_algorithm(
    model: &ParameterStore,
    splits: &DatasetSplits,
    algorithm: Algorithm,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ParameterStore> {
    match algorithm {
        Algorithm::Baseline(method) => {
            let mut cfg = config.unlearn.clone();
            cfg.method = method;
            cfg.seed = seed;
            let mut out = model.clone();
            let mask = crate::model::FreezeMask::all(&out);
            run_unlearning(&mut out, splits, &cfg, &mask)?;
            Ok(out)
        }
        Algorithm::BlockPipeline => {
            let mut cfg = config.kunbr.clone();
            cfg.seed = seed;
            let (out, _) = run_kunbr(model, splits, &cfg)?;
            Ok(out)
        }
    }
}

/// One seed end to end: unlearn, measure V-set accuracy, attack on T,
/// re-measure, compute recovery and retain utility.
pub fn run_seed(
    memorized: &ParameterStore,
    splits: &DatasetSplits,
    algorithm: Algorithm,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    let unlearned = apply_algorithm(memorized, splits, algorithm, config, seed)?;
    let a_unlearn = mcq_accuracy(&unlearned, &splits.forget_v)?;
    let mut attacked = unlearned.clone();
    rtt_attack(
        &mut attacked,
        &splits.forget_t,
        config.attack_lr,
        config.attack_epochs,
        config.attack_batch,
        config.attack_target_acc,
        seed.wrapping_add(3),
    )?;
    let a_rtt = mcq_accuracy(&attacked, &splits.forget_v)?;
    let attack_t_accuracy = mcq_accuracy(&attacked, &splits.forget_t)?;
    let (retain_accuracy, retain_perplexity) = utility_eval(&unlearned, &splits.retain)?;
    Ok(ExperimentReport {
        method: algorithm.name().to_string(),
        seed,
        a_unlearn,
        a_rtt,
        a_recover: recovery(a_unlearn, a_rtt),
        retain_accuracy,
        retain_perplexity,
        attack_t_accuracy,
        config_hash: config_hash(config),
    })
}

/// Runs one algorithm across seeds; failures are collected per seed and
/// the aggregate covers the successes.
pub fn run_experiment(
    algorithm: Algorithm,
    seeds: &[u64],
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    if seeds.is_empty() {
        return Err(Error::Validation("at least one seed required".into()));
    }
    config.validate()?;
    let mut reports = Vec::new();
    let mut failed = Vec::new();
    for &seed in seeds {
        let result = prepare_seed(config, seed)
            .and_then(|(model, splits)| run_seed(&model, &splits, algorithm, config, seed));
        match result {
            Ok(report) => reports.push(report),
            Err(_) => failed.push(seed),
        }
    }
    if reports.is_empty() {
        return Err(Error::Validation(format!(
            "all {} seeds failed for {}",
            seeds.len(),
            algorithm.name()
        )));
    }
    let aggregate = aggregate_reports(algorithm.name(), &reports, failed);
    Ok(ExperimentOutcome { reports, aggregate })
}

pub fn aggregate_reports(
    method: &str,
    reports: &[ExperimentReport],
    failed_seeds: Vec<u64>,
) -> Aggregate {
    let col = |f: fn(&ExperimentReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    let a_u = col(|r| r.a_unlearn);
    let a_r = col(|r| r.a_rtt);
    let a_rec = col(|r| r.a_recover);
    let ret_a = col(|r| r.retain_accuracy);
    let ret_p = col(|r| r.retain_perplexity);
    Aggregate {
        method: method.to_string(),
        n_seeds: reports.len(),
        mean_a_unlearn: mean(&a_u),
        mean_a_rtt: mean(&a_r),
        mean_a_recover: mean(&a_rec),
        mean_retain_accuracy: mean(&ret_a),
        mean_retain_perplexity: mean(&ret_p),
        std_a_unlearn: sample_std(&a_u),
        std_a_rtt: sample_std(&a_r),
        std_a_recover: sample_std(&a_rec),
        failed_seeds,
    }
}

/// Per-seed rows as CSV; accuracies as percentages.
pub fn report_csv(reports: &[ExperimentReport]) -> String {
    let mut out =
        String::from("method,seed,a_unlearn_pct,a_rtt_pct,a_recover_pct,retain_acc_pct,retain_ppl\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2},{:.4}\n",
            r.method,
            r.seed,
            100.0 * r.a_unlearn,
            100.0 * r.a_rtt,
            100.0 * r.a_recover,
            100.0 * r.retain_accuracy,
            r.retain_perplexity
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model_with_scale;

    fn zero_model() -> ParameterStore {
        let cfg = ModelConfig {
            h_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab: 144,
            ctx: 16,
            seed: 0,
        };
        init_model_with_scale(&cfg, 0.0).unwrap()
    }

    #[test]
    fn recovery_matches_reference_values() {
        assert!((recovery(25.9, 36.0) - 10.1).abs() < 1e-9);
        assert!((recovery(30.5, 62.4) - 31.9).abs() < 1e-9);
        assert_eq!(recovery(0.4, 0.4), 0.0);
    }

    #[test]
    fn uniform_model_always_picks_choice_zero() {
        let model = zero_model();
        let records = generate_corpus(40, 11).unwrap();
        let acc = mcq_accuracy(&model, &records).unwrap();
        let frac_zero = records.iter().filter(|r| r.correct_choice == 0).count() as f64
            / records.len() as f64;
        assert_eq!(acc, frac_zero);
    }

    #[test]
    fn accuracy_is_a_simple_fraction() {
        // Hand-built: 3 of 4 correct means 0.75 regardless of model; check
        // by marking correct_choice to whatever the uniform model picks.
        let model = zero_model();
        let mut records = generate_corpus(8, 5).unwrap();
        records.truncate(4);
        for r in records.iter_mut().take(3) {
            r.correct_choice = 0;
        }
        records[3].correct_choice = 1;
        assert_eq!(mcq_accuracy(&model, &records).unwrap(), 0.75);
    }

    #[test]
    fn uniform_model_retain_perplexity_is_vocab() {
        let model = zero_model();
        let records = generate_corpus(8, 5).unwrap();
        let (_, ppl) = utility_eval(&model, &records).unwrap();
        assert!((ppl - 144.0).abs() < 1e-6);
    }

    #[test]
    fn attack_with_zero_epochs_is_identity() {
        let mut model = zero_model();
        let records = generate_corpus(8, 5).unwrap();
        let before = model.digest();
        let trace = rtt_attack(&mut model, &records, 1e-3, 0, 8, 0.95, 0).unwrap();
        assert!(trace.is_empty());
        assert_eq!(model.digest(), before);
    }

    #[test]
    fn attack_relearns_its_training_set() {
        let cfg = ModelConfig {
            h_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab: 144,
            ctx: 16,
            seed: 8,
        };
        let mut model = init_model(&cfg).unwrap();
        let records = generate_corpus(8, 6).unwrap();
        rtt_attack(&mut model, &records, 3e-3, 200, 8, 0.95, 1).unwrap();
        assert!(mcq_accuracy(&model, &records).unwrap() >= 0.95);
    }

    #[test]
    fn attack_never_sees_holdout_records() {
        // The attack API only receives T; batches are built from T alone,
        // so any prompt it trains on must decode to a T-set person.
        let records = generate_corpus(16, 9).unwrap();
        let splits = split(&records, 0.5, 0.5, 9).unwrap();
        let tok = Tokenizer::default();
        let batches = training_batches(&tok, &splits.forget_t, 4, 123).unwrap();
        let t_names: std::collections::BTreeSet<String> =
            splits.forget_t.iter().map(|r| r.person_name()).collect();
        let v_names: std::collections::BTreeSet<String> =
            splits.forget_v.iter().map(|r| r.person_name()).collect();
        for batch in &batches {
            for ex in batch {
                let words = tok.decode(&ex.prompt).unwrap();
                let name = words[2..words.len() - 2].join("");
                assert!(t_names.contains(&name));
                assert!(!v_names.contains(&name));
            }
        }
    }

    #[test]
    fn aggregate_mean_and_std() {
        let mk = |seed, v| ExperimentReport {
            method: "GD".into(),
            seed,
            a_unlearn: v,
            a_rtt: v,
            a_recover: 0.0,
            retain_accuracy: 1.0,
            retain_perplexity: 1.0,
            attack_t_accuracy: 1.0,
            config_hash: String::new(),
        };
        let agg = aggregate_reports("GD", &[mk(1, 0.2), mk(2, 0.4)], vec![]);
        assert!((agg.mean_a_unlearn - 0.3).abs() < 1e-12);
        let expect_std = (2.0 * 0.01f64 / 1.0).sqrt();
        assert!((agg.std_a_unlearn - expect_std).abs() < 1e-12);
    }

    #[test]
    fn report_identity_and_csv_shape() {
        let r = ExperimentReport {
            method: "NPO".into(),
            seed: 3,
            a_unlearn: 0.25,
            a_rtt: 0.5,
            a_recover: recovery(0.25, 0.5),
            retain_accuracy: 0.875,
            retain_perplexity: 1.25,
            attack_t_accuracy: 1.0,
            config_hash: "abc".into(),
        };
        assert_eq!(r.a_recover, r.a_rtt - r.a_unlearn);
        let csv = report_csv(&[r]);
        assert!(csv.starts_with("method,seed,"));
        assert!(csv.contains("NPO,3,25.00,50.00,25.00,87.50,1.2500\n"));
    }

    #[test]
    fn algorithm_parse_round_trip() {
        for a in Algorithm::all() {
            assert_eq!(Algorithm::parse(a.name()).unwrap(), a);
        }
        assert!(Algorithm::parse("nonsense").is_err());
    }
}
