mod compare;
mod eval;
mod stats;
mod timecourse;

pub use compare::{compare_models, Comparison, ModelSummary, PairRow, COMPARE_CSV_HEADER, EXACT_BELOW};
pub use eval::{evaluate, Evaluation, ProbDump, CORRECTNESS_FILE, DUMP_FILE, EVAL_MANIFEST};
pub use stats::{benjamini_hochberg, chi2_sf_1df, mcnemar, FdrReport, McNemarResult};
pub use timecourse::{classify, exemplar_csv, timecourse, TimecourseReport, Trajectory, TrajectoryCounts};
