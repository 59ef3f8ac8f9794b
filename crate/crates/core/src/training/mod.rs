//! Losses, optimizers and training loops for rectified flow, Reflow and
//! the joint viscous-flow / noise-encoder objective.

mod loss;
mod optim;
mod train;

pub use loss::{
    interpolate, interpolate_rows, joint_loss_on, kl_loss, kl_on, rf_loss, squared_error_on, total_loss, total_on,
    vcl_loss, LossOptions, LossVars, StepNoise,
};
pub use optim::{OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    draw_times, reflow_generate_couplings, rf_train, rf_train_step, train_step_with, vrfno_train_step,
    write_loss_csv, BatchSource, LossRecord, Model, StepLoss, TrainConfig, Trainer,
};
