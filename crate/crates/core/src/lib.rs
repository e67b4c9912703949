pub mod attacks;
pub mod compress;
pub mod data;
pub mod harness;
pub mod tensor;
pub mod variant;
pub mod vit;
