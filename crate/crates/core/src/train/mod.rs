//! Estimator training, the joint refiner objective and inference.

mod batch;
mod estimator;
mod loss;
mod refiner;
mod schedule;

pub use batch::{image_tensor, sample_batch, Batch, TargetSource};
pub use estimator::{
    calibrate_t, estimator_loss, fit_estimator, load_estimator, measure_mean_squares, moment_targets,
    save_estimator, scale_outputs, train_estimator, Calibration, EstimatorConfig, TrainedEstimator,
    ESTIMATOR_FILE, ESTIMATOR_META,
};
pub use loss::{
    loss_l1, loss_l1_value, loss_l2, loss_l2_value, match_norm, rescale_gradient,
    rescale_gradient_batched, LossBreakdown,
};
pub(crate) use refiner::split_channels;
pub use refiner::{
    consistency_file, consistency_means, infer, infer_on_aux, load_refiner, refiner_grads, save_refiner,
    train_refiner, RefinerConfig, RefinerOutcome, RefinerState, StepGrads, REFINER_FILE,
};
pub use schedule::{Piece, Schedule};

use crate::error::{Error, Result};

pub(crate) fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            msg: format!("{what} is {v}"),
        })
    }
}

/// Appends one JSON record and a newline.
pub(crate) fn append_log(w: &mut dyn std::io::Write, v: &serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *w, v).map_err(|e| Error::Io(e.into()))?;
    w.write_all(b"\n")?;
    Ok(())
}
