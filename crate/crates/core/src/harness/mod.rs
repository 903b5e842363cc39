//! Evaluation protocol: equipment-disjoint splits, balanced binary tasks
//! under the three aggregation methods, fold statistics and curve tables.

mod eval;
mod report;
mod run;
mod split;
mod task;

pub use eval::{mean_std, random_folds, score, ConfusionMatrix, EvalReport, SetSizes, FOLDS};
pub use report::{emit_curves, table4, table4_csv, Table4Row, CURVE_HEADER};
pub use run::{average_accuracy, experiment_seed, run_experiment, run_suite, Detector, ExperimentData, ExperimentOutput};
pub use split::{check_disjoint, make_splits, FrameRef, SplitMode, SplitPlan, Splits, REFERENCE_SPLIT_SIZES};
pub use task::{
    build_task_set, method1_tasks, method2_tasks, stable_hash, water_fill, Aggregation, BinaryTask, LabeledFrames,
    TaskSet,
};
