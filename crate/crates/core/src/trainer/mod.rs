//! The training loop and everything around it.

mod ablation;
mod config;
mod optim;
mod run;
mod step;

pub use ablation::{
    default_workers, run_ablation, AblationOptions, AblationTable, CellResult, GridCell, GridSpec, Layout, Stat,
};
pub use config::{check_keys, poly_lr, suggest_key, TrainConfig};
pub use optim::sgd_step;
pub use run::{
    checkpoint_file, evaluate_state, run_training, EvalRecord, LoadedData, RunOptions, RunOutcome, CONFIG_FILE,
    HISTORY_FILE, HISTORY_HEADER, LOG_FILE,
};
pub use step::{Learner, StepLog, StepOutput, TrainState};
