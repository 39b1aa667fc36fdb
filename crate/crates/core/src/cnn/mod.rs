//! All-convolutional networks on periodic grids, trained from scratch.
//!
//! Layers are 5x5 periodic convolutions with one bias per output channel,
//! ReLU on every layer but the last. Convolutions run in Fourier space on
//! zero-padded kernels; [`conv2d_periodic`] is the direct reference.

mod checkpoint;
mod conv;
mod model;
mod train;

pub use checkpoint::{checkpoint_container, load_checkpoint, model_from_container, save_checkpoint};
pub use conv::{conv2d_periodic, kernel_spectrum, pad_kernel, tap_position, KERNEL, KERNEL_TAPS};
pub use model::{
    loss_and_gradients, loss_and_gradients_normalized, Arch, CnnModel, ConvLayer, ForwardOutput, Gradients,
    Predictor,
};
pub use train::{
    adam_step, evaluate_loss, sanitize_stats, split_indices, train_bnn, transfer_learn, transfer_subset_len,
    AdamConfig, AdamState, EpochLog, Plateau, PlateauConfig, TlConfig, TrainConfig, Trained, TrainingLog,
};
