//! Visual-textual sentiment pipeline built from four feature branches
//! (learnable text/image encoders, visual experts, aligned image-text
//! encoders) fused by either a padded-sequence transformer or a
//! concatenation MLP.

pub mod dataset;
pub mod encoders;
pub mod evaluation;
pub mod featurestore;
pub mod fusion;
pub mod tensor;
pub mod textnorm;
pub mod training;
