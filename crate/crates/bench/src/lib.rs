//! Dataset evaluation harness: prompt generation, per-image segmentation,
//! metric aggregation and (P, N) sweeps.

pub mod dataset;
pub mod run;
pub mod sweep;

pub use dataset::{image_id_for, load_sample, write_synth_dataset, EvalSample};
pub use run::{
    assemble_prediction, generate_records, run_eval, run_eval_with, BackendSpec, BenchError, EvalOptions, RunConfig,
};
pub use sweep::{ablation_sweep, ablation_sweep_with, parse_pairs, parse_sweep_csv, SweepMeta, SweepRow, SweepTable, DEFAULT_SWEEP};
