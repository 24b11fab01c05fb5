use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::eval::Evaluation;
use super::stats::{benjamini_hochberg, mcnemar, FdrReport, McNemarResult};
use crate::error::{Error, Result};

pub const COMPARE_CSV_HEADER: &str = "model_a,model_b,b,c,chi2,p,reject_at_fdr05";

/// Below this many discordant pairs the exact binomial test may replace the
/// chi-square approximation.
pub const EXACT_BELOW: u64 = 25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub preset: String,
    pub input_mode: String,
    pub n: usize,
    pub accuracy: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub model_a: String,
    pub model_b: String,
    #[serde(flatten)]
    pub test: McNemarResult,
    pub reject: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_checksum: String,
    pub q: f64,
    pub models: Vec<ModelSummary>,
    pub rows: Vec<PairRow>,
    pub fdr: FdrReport,
}

impl Comparison {
    /// One row per unordered pair. The last column is the BH decision at the
    /// comparison's `q`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{COMPARE_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.model_a, r.model_b, r.test.b, r.test.c, r.test.chi2, r.test.p, r.reject
            );
        }
        out
    }
}

/// Pairwise McNemar tests over all unordered model pairs, with the
/// Benjamini-Hochberg procedure applied across the whole family.
///
/// All evaluations must cover the same dataset, checked by checksum and by
/// sample ids. With `exact_small`, pairs with fewer than [`EXACT_BELOW`]
/// discordant samples use the exact binomial test.
pub fn compare_models(evals: &[Evaluation], q: f64, exact_small: bool) -> Result<Comparison> {
    if evals.len() < 2 {
        return Err(Error::Invalid("comparison needs at least two evaluations".into()));
    }
    let first = &evals[0];
    for e in &evals[1..] {
        if e.dataset_checksum != first.dataset_checksum {
            return Err(Error::ChecksumMismatch(first.dataset_checksum.clone(), e.dataset_checksum.clone()));
        }
        if e.ids != first.ids {
            return Err(Error::Invalid(format!("{} and {} cover different samples", first.model, e.model)));
        }
    }
    let mut rows = Vec::new();
    for i in 0..evals.len() {
        for j in i + 1..evals.len() {
            let (a, b) = (&evals[i], &evals[j]);
            let mut test = mcnemar(&a.correct, &b.correct, false)?;
            if exact_small && test.b + test.c < EXACT_BELOW {
                test = mcnemar(&a.correct, &b.correct, true)?;
            }
            rows.push(PairRow { model_a: a.model.clone(), model_b: b.model.clone(), test, reject: false });
        }
    }
    let p: Vec<f64> = rows.iter().map(|r| r.test.p).collect();
    let fdr = benjamini_hochberg(&p, q)?;
    for (r, &rej) in rows.iter_mut().zip(&fdr.reject) {
        r.reject = rej;
    }
    let models = evals
        .iter()
        .map(|e| ModelSummary {
            model: e.model.clone(),
            preset: e.preset.clone(),
            input_mode: e.input_mode.name().to_string(),
            n: e.len(),
            accuracy: e.accuracy(),
            error: e.error_rate(),
        })
        .collect();
    Ok(Comparison { dataset_checksum: first.dataset_checksum.clone(), q, models, rows, fdr })
}
