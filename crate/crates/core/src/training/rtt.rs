//! Repetitive Training Technique.
//!
//! A batch is re-trained (up to `max_reps` extra times) while its most
//! recent loss strictly exceeds the global minimum of completed-epoch
//! average losses. Epoch 1 therefore never repeats: nothing exceeds +inf.
//! Every repetition is a real optimization step and its loss counts toward
//! the running epoch average.

use crate::error::{Error, Result};

pub const RTT_DEFAULT_MAX_REPS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct RttState {
    /// Minimum over completed-epoch average losses; +inf before any epoch
    /// finishes and non-increasing afterwards.
    pub global_min_epoch_avg: f64,
    epoch_sum: f64,
    epoch_count: u64,
    /// reps_histogram[r] counts batches that took r extra repetitions.
    pub reps_histogram: Vec<u64>,
}

impl Default for RttState {
    fn default() -> Self {
        Self::new()
    }
}

impl RttState {
    pub fn new() -> Self {
        RttState {
            global_min_epoch_avg: f64::INFINITY,
            epoch_sum: 0.0,
            epoch_count: 0,
            reps_histogram: vec![0; RTT_DEFAULT_MAX_REPS + 1],
        }
    }

    fn record_loss(&mut self, loss: f64) {
        self.epoch_sum += loss;
        self.epoch_count += 1;
    }

    fn record_batch(&mut self, reps: usize) {
        if reps >= self.reps_histogram.len() {
            self.reps_histogram.resize(reps + 1, 0);
        }
        self.reps_histogram[reps] += 1;
    }

    /// Raw accumulator state, used by checkpointing.
    pub fn accumulators(&self) -> (f64, u64) {
        (self.epoch_sum, self.epoch_count)
    }

    pub fn restore(global_min: f64, epoch_sum: f64, epoch_count: u64, hist: Vec<u64>) -> Self {
        RttState {
            global_min_epoch_avg: global_min,
            epoch_sum,
            epoch_count,
            reps_histogram: hist,
        }
    }
}

/// Run one batch with repetitive training. `do_step` performs exactly one
/// optimization step on the same batch and returns its loss. Returns the
/// number of extra repetitions taken and the last loss.
pub fn rtt_apply<F>(
    state: &mut RttState,
    enabled: bool,
    max_reps: usize,
    mut do_step: F,
) -> Result<(usize, f64)>
where
    F: FnMut() -> Result<f64>,
{
    let mut loss = do_step()?;
    state.record_loss(loss);
    let mut reps = 0;
    if enabled {
        while loss > state.global_min_epoch_avg && reps < max_reps {
            loss = do_step()?;
            state.record_loss(loss);
            reps += 1;
        }
    }
    state.record_batch(reps);
    Ok((reps, loss))
}

/// Close the current epoch: fold its average into the global minimum and
/// reset the accumulators. Returns the epoch average.
pub fn end_epoch(state: &mut RttState) -> Result<f64> {
    if state.epoch_count == 0 {
        return Err(Error::config(
            "end_epoch called before any batch was processed",
        ));
    }
    let avg = state.epoch_sum / state.epoch_count as f64;
    state.global_min_epoch_avg = state.global_min_epoch_avg.min(avg);
    state.epoch_sum = 0.0;
    state.epoch_count = 0;
    Ok(avg)
}
