pub mod attention;
pub(crate) mod basic;
pub(crate) mod loss;
pub(crate) mod nn;

pub use loss::{giou_1d, RegPair};
pub use nn::Padding;
