pub mod augment;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod labeler;
pub mod numerics;
pub mod oracles;
pub mod patchgen;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
