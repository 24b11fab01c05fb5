use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::eval::ProbDump;
use crate::error::Result;

/// How a sample's correctness evolves from the first to the last step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    /// Correct at every step.
    StableCorrect,
    /// Wrong at every step.
    StableWrong,
    /// Wrong at the first step, correct at the last.
    Corrected,
    /// Correct at the first step, wrong at the last.
    Reverted,
    /// Same correctness at both ends but not at every step in between.
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryCounts {
    pub stable_correct: usize,
    pub stable_wrong: usize,
    pub corrected: usize,
    pub reverted: usize,
    pub other: usize,
}

impl TrajectoryCounts {
    pub fn total(&self) -> usize {
        self.stable_correct + self.stable_wrong + self.corrected + self.reverted + self.other
    }

    fn add(&mut self, t: Trajectory) {
        match t {
            Trajectory::StableCorrect => self.stable_correct += 1,
            Trajectory::StableWrong => self.stable_wrong += 1,
            Trajectory::Corrected => self.corrected += 1,
            Trajectory::Reverted => self.reverted += 1,
            Trajectory::Other => self.other += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimecourseReport {
    pub n: usize,
    pub tau: usize,
    /// Set when the dump has a single step, so nothing can change over time.
    pub single_step: bool,
    pub counts: TrajectoryCounts,
    pub initially_wrong: usize,
    pub initially_correct: usize,
    pub corrected_over_all: f64,
    pub corrected_over_initially_wrong: f64,
    pub reverted_over_all: f64,
    pub reverted_over_initially_correct: f64,
    /// Argmax at every step, `n * tau` entries.
    #[serde(skip)]
    pub argmax: Vec<u16>,
    #[serde(skip)]
    pub classes: Vec<Trajectory>,
    /// Dump rows with the largest change in true-class probability between
    /// the first and last step, largest first.
    pub exemplars: Vec<usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classify(correct_by_step: &[bool]) -> Trajectory {
    let first = correct_by_step[0];
    let last = correct_by_step[correct_by_step.len() - 1];
    let constant = correct_by_step.iter().all(|&c| c == first);
    match (first, last) {
        (false, true) => Trajectory::Corrected,
        (true, false) => Trajectory::Reverted,
        (true, true) if constant => Trajectory::StableCorrect,
        (false, false) if constant => Trajectory::StableWrong,
        _ => Trajectory::Other,
    }
}

/// Corrected and reverted guesses over the unrolled steps of a softmax dump,
/// plus the `top_k` samples whose true-class probability moved the most.
pub fn timecourse(dump: &ProbDump, top_k: usize) -> Result<TimecourseReport> {
    dump.validate()?;
    let (n, tau) = (dump.len(), dump.tau);
    let mut argmax = Vec::with_capacity(n * tau);
    let mut classes = Vec::with_capacity(n);
    let mut counts = TrajectoryCounts::default();
    let mut initially_wrong = 0;
    let mut step_ok = vec![false; tau];
    for i in 0..n {
        let label = dump.labels[i] as usize;
        for (t, ok) in step_ok.iter_mut().enumerate() {
            let p = dump.predicted(i, t);
            argmax.push(p as u16);
            *ok = p == label;
        }
        if !step_ok[0] {
            initially_wrong += 1;
        }
        let c = classify(&step_ok);
        counts.add(c);
        classes.push(c);
    }
    let initially_correct = n - initially_wrong;

    let mut change: Vec<(usize, f64)> = (0..n)
        .map(|i| {
            let l = dump.labels[i] as usize;
            (i, (dump.step(i, tau - 1)[l] as f64 - dump.step(i, 0)[l] as f64).abs())
        })
        .collect();
    change.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let exemplars = change.into_iter().take(top_k).map(|(i, _)| i).collect();

    Ok(TimecourseReport {
        n,
        tau,
        single_step: tau == 1,
        counts,
        initially_wrong,
        initially_correct,
        corrected_over_all: ratio(counts.corrected, n),
        corrected_over_initially_wrong: ratio(counts.corrected, initially_wrong),
        reverted_over_all: ratio(counts.reverted, n),
        reverted_over_initially_correct: ratio(counts.reverted, initially_correct),
        argmax,
        classes,
        exemplars,
    })
}

/// Per-step probabilities of the exemplars as CSV:
/// `sample_id,label,t,p0,...`, one row per exemplar and step.
pub fn exemplar_csv(report: &TimecourseReport, dump: &ProbDump) -> String {
    let mut out = String::from("sample_id,label,t");
    for k in 0..dump.classes {
        let _ = write!(out, ",p{k}");
    }
    out.push('\n');
    for &i in &report.exemplars {
        for t in 0..dump.tau {
            let _ = write!(out, "{},{},{}", dump.ids[i], dump.labels[i], t);
            for p in dump.step(i, t) {
                let _ = write!(out, ",{p:.6}");
            }
            out.push('\n');
        }
    }
    out
}
