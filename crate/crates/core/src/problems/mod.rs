//! Non-stationary benchmark streams.

pub mod bitflip;
pub mod mnist;

pub use bitflip::{BitFlipConfig, BitFlipEnv};
pub use mnist::{load_mnist, MnistDataset, MnistStream};
