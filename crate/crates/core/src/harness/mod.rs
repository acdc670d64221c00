//! End-to-end experiment harness: demonstration collection, policy and
//! selector training, method evaluation, ablations, latency benchmarks,
//! and report emission.

pub mod dataset;
pub mod eval;
pub mod report;
pub mod train;

pub use dataset::{collect_demos, episode_setup, windows_per_episode, Dataset, DemoSample};
pub use eval::{
    ablate, evaluate, evaluate_pipeline, latency_table, AblateKind, EvalArtifacts, EvalOutput,
    Method, MethodRow, PerSeed,
};
pub use report::{
    read_results_csv, read_trace, write_report_txt, write_results_csv, write_traces, TraceLine,
};
pub use train::{
    check_artifacts_match, knn_best_expert_labels, load_policy, load_selector, store_policy,
    store_selector, train_policy, train_selector, SelectorBundle,
};
