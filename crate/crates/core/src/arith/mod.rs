//! Multi-digit addition testbed.

mod dataset;
mod eval;
mod vocab;

pub use dataset::{
    generate_dataset, held_out, make_batch, read_dataset, sidecar, write_dataset, BatchSampler, DatasetSpec, Sample,
    MAX_DIGITS,
};
pub use eval::{
    eval_sweep, exact_match_eval, final_states, greedy_decode, trajectory_reports, DecodeMode, LanguageModel,
    SweepOptions, SweepRow, SWEEP_HEADER,
};
pub use vocab::ArithVocab;
