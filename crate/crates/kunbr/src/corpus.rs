//! Synthetic random-birthdays corpus: generation, tokenization,
//! multiple-choice rendering, forget/retain and T/V partitioning.
//!
//! The vocabulary is closed and fixed up front (template words, name
//! syllables, one token per year), so every answer is a single token and
//! choice scoring is a one-position likelihood comparison.

use crate::error::{Error, Result};
use crate::loss::Example;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

pub const YEAR_MIN: u16 = 1900;
pub const YEAR_MAX: u16 = 1999;

const SYLLABLES: [&str; 24] = [
    "ka", "lu", "mi", "ro", "ta", "ve", "zo", "na", "pi", "su", "de", "fo", "gi", "ha", "je",
    "kyo", "lan", "mer", "nis", "ol", "pra", "quin", "rud", "sha",
];

const TEMPLATE: [&str; 5] = ["<pad>", "when", "was", "born", "?"];

/// One synthetic person → birth-year fact, rendered as a 4-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRecord {
    /// Syllabic name tokens, e.g. ["mer", "ka"].
    pub name_tokens: Vec<String>,
    pub birth_year: u16,
    pub distractor_years: [u16; 3],
    /// The 4 choice years in presentation order.
    pub choices: [u16; 4],
    /// Index of birth_year within `choices`.
    pub correct_choice: usize,
}

impl FactRecord {
    pub fn person_name(&self) -> String {
        self.name_tokens.join("")
    }

    pub fn validate(&self) -> Result<()> {
        let set: BTreeSet<u16> = self.choices.iter().copied().collect();
        if set.len() != 4 {
            return Err(Error::Validation(format!(
                "{}: choices not distinct: {:?}",
                self.person_name(),
                self.choices
            )));
        }
        if self.choices[self.correct_choice] != self.birth_year {
            return Err(Error::Validation(format!(
                "{}: correct_choice does not point at birth_year",
                self.person_name()
            )));
        }
        for y in self.choices {
            if !(YEAR_MIN..=YEAR_MAX).contains(&y) {
                return Err(Error::Validation(format!("year {y} out of range")));
            }
        }
        Ok(())
    }
}

/// Word-level tokenizer over the closed synthetic vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut tokens: Vec<String> = TEMPLATE.iter().map(|s| s.to_string()).collect();
        tokens.extend(SYLLABLES.iter().map(|s| s.to_string()));
        tokens.extend((YEAR_MIN..=YEAR_MAX).map(|y| y.to_string()));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Tokenizer { tokens, ids }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Validation(format!("token id {id} out of range")))
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| self.token(i).map(|s| s.to_string()))
            .collect()
    }

    pub fn year_id(&self, year: u16) -> Result<usize> {
        self.id(&year.to_string())
    }
}

/// D_retain plus the forget set split into the attacker's T and held-out V.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub retain: Vec<FactRecord>,
    pub forget_t: Vec<FactRecord>,
    pub forget_v: Vec<FactRecord>,
}

impl DatasetSplits {
    pub fn n_forget(&self) -> usize {
        self.forget_t.len() + self.forget_v.len()
    }

    /// Pairwise disjointness of retain/T/V by person name.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in self
            .retain
            .iter()
            .chain(self.forget_t.iter())
            .chain(self.forget_v.iter())
        {
            if !seen.insert(r.person_name()) {
                return Err(Error::Validation(format!(
                    "splits share person {}",
                    r.person_name()
                )));
            }
        }
        Ok(())
    }

    pub fn forget_all(&self) -> Vec<FactRecord> {
        let mut all = self.forget_t.clone();
        all.extend(self.forget_v.iter().cloned());
        all
    }
}

/// Deterministic corpus generation: unique syllabic names, uniform years,
/// shuffled 4-choice options.
pub fn generate_corpus(n_facts: usize, seed: u64) -> Result<Vec<FactRecord>> {
    if n_facts < 8 {
        return Err(Error::Validation(format!(
            "n_facts must be >= 8, got {n_facts}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = BTreeSet::new();
    let mut records = Vec::with_capacity(n_facts);
    let max_attempts = n_facts.saturating_mul(50);
    let mut attempts = 0;
    while records.len() < n_facts {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Validation(format!(
                "name collisions exhausted after {attempts} attempts; the syllable name \
                 space supports ~{} unique names",
                SYLLABLES.len().pow(2) + SYLLABLES.len().pow(3)
            )));
        }
        let n_syll = if rng.gen_bool(0.5) { 2 } else { 3 };
        let name_tokens: Vec<String> = (0..n_syll)
            .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())].to_string())
            .collect();
        let name = name_tokens.join("");
        if !names.insert(name) {
            continue;
        }
        let birth_year = rng.gen_range(YEAR_MIN..=YEAR_MAX);
        let mut distractors = [0u16; 3];
        let mut used: BTreeSet<u16> = [birth_year].into();
        for slot in distractors.iter_mut() {
            loop {
                let y = rng.gen_range(YEAR_MIN..=YEAR_MAX);
                if used.insert(y) {
                    *slot = y;
                    break;
                }
            }
        }
        let mut choices = [birth_year, distractors[0], distractors[1], distractors[2]];
        choices.shuffle(&mut rng);
        let correct_choice = choices.iter().position(|&y| y == birth_year).unwrap();
        let rec = FactRecord {
            name_tokens,
            birth_year,
            distractor_years: distractors,
            choices,
            correct_choice,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

/// Partition into retain / forget(T, V). Forget size is floor(n · fraction);
/// T size is floor(|forget| · t_fraction).
pub fn split(
    records: &[FactRecord],
    forget_fraction: f64,
    t_fraction: f64,
    seed: u64,
) -> Result<DatasetSplits> {
    if !(forget_fraction > 0.0 && forget_fraction < 1.0) || !(t_fraction > 0.0 && t_fraction < 1.0)
    {
        return Err(Error::Validation(
            "split fractions must lie in (0, 1)".into(),
        ));
    }
    let mut shuffled: Vec<FactRecord> = records.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_forget = (n as f64 * forget_fraction).floor() as usize;
    let n_t = (n_forget as f64 * t_fraction).floor() as usize;
    let n_v = n_forget - n_t;
    if n_forget == 0 || n_t == 0 || n_v == 0 || n_forget == n {
        return Err(Error::Validation(format!(
            "degenerate split: n={n}, forget={n_forget}, T={n_t}, V={n_v}"
        )));
    }
    let forget: Vec<FactRecord> = shuffled.drain(..n_forget).collect();
    let retain = shuffled;
    let splits = DatasetSplits {
        retain,
        forget_t: forget[..n_t].to_vec(),
        forget_v: forget[n_t..].to_vec(),
    };
    splits.check_disjoint()?;
    Ok(splits)
}

/// Prompt tokens, the 4 choice-token sequences, and the correct index.
pub fn render_mcq(
    tok: &Tokenizer,
    record: &FactRecord,
) -> Result<(Vec<usize>, [Vec<usize>; 4], usize)> {
    let mut words: Vec<&str> = vec!["when", "was"];
    for s in &record.name_tokens {
        words.push(s);
    }
    words.push("born");
    words.push("?");
    let prompt = tok.encode(&words)?;
    let mut choices: [Vec<usize>; 4] = Default::default();
    for (i, &y) in record.choices.iter().enumerate() {
        choices[i] = vec![tok.year_id(y)?];
    }
    Ok((prompt, choices, record.correct_choice))
}

/// A record as a training example: prompt → correct year token, with the
/// distractor year tokens attached as the incorrect options.
pub fn to_example(tok: &Tokenizer, record: &FactRecord) -> Result<Example> {
    let (prompt, choices, correct) = render_mcq(tok, record)?;
    let incorrect = (0..4)
        .filter(|&i| i != correct)
        .map(|i| choices[i][0])
        .collect();
    Ok(Example {
        prompt,
        target: choices[correct].clone(),
        incorrect,
    })
}

/// One epoch of deterministic batches; every record appears exactly once.
/// A batch size larger than the split yields a single smaller batch.
pub fn training_batches(
    tok: &Tokenizer,
    records: &[FactRecord],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Vec<Example>>> {
    if batch_size == 0 {
        return Err(Error::Validation("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let batch: Result<Vec<Example>> = chunk.iter().map(|&i| to_example(tok, &records[i])).collect();
        batches.push(batch?);
    }
    Ok(batches)
}

// ── Line-delimited JSON export/import ────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    name: Vec<String>,
    year: u16,
    distractors: [u16; 3],
    choices: [u16; 4],
    correct_choice: usize,
    split: String,
}

pub fn export_splits<W: Write>(splits: &DatasetSplits, mut w: W) -> Result<()> {
    let groups: [(&str, &[FactRecord]); 3] = [
        ("retain", &splits.retain),
        ("forget_t", &splits.forget_t),
        ("forget_v", &splits.forget_v),
    ];
    for (label, records) in groups {
        for r in records {
            let line = CorpusLine {
                name: r.name_tokens.clone(),
                year: r.birth_year,
                distractors: r.distractor_years,
                choices: r.choices,
                correct_choice: r.correct_choice,
                split: label.to_string(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn import_splits<R: BufRead>(r: R) -> Result<DatasetSplits> {
    let mut splits = DatasetSplits {
        retain: Vec::new(),
        forget_t: Vec::new(),
        forget_v: Vec::new(),
    };
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(&line)?;
        let rec = FactRecord {
            name_tokens: parsed.name,
            birth_year: parsed.year,
            distractor_years: parsed.distractors,
            choices: parsed.choices,
            correct_choice: parsed.correct_choice,
        };
        rec.validate()?;
        match parsed.split.as_str() {
            "retain" => splits.retain.push(rec),
            "forget_t" => splits.forget_t.push(rec),
            "forget_v" => splits.forget_v.push(rec),
            other => return Err(Error::Validation(format!("unknown split label {other:?}"))),
        }
    }
    splits.check_disjoint()?;
    Ok(splits)
}
