//! Evaluation harness for FEM code generation.
//!
//! A registry of problems is run under one strategy (the coder/executor
//! loop, the multi-agent group chat, or two independent zero-shot attempts).
//! Each run lands in a JSON Lines ledger, gets graded manually or by a
//! scalar comparator, and is summarised as overall and stratified accuracy.

pub mod baseline;
pub mod grade;
pub mod ledger;
pub mod registry;
pub mod report;
pub mod run;
pub mod scalars;

pub use baseline::{run_baseline_two_shot, BaselineOutcome};
pub use grade::{
    grade, grade_ledger, Comparator, Correctness, GradeError, ManualVerdict, ScalarComparator, Verdict, VerdictSource,
};
pub use ledger::{LedgerEntry, RunLedger};
pub use registry::{load_registry, load_registry_unchecked, Difficulty, Physics, ProblemSpec, Registry};
pub use report::{accuracy_report, comparison_csv, percent_2dp, Ratio, Report};
pub use run::{
    run_benchmark, Attempt, BaselineStrategy, BenchError, DuoStrategy, OrchestraStrategy, RunOptions, Strategy,
};
