pub mod adaptive;
pub mod assign;
pub mod bench;
pub mod cv;
pub mod data;
pub mod datagen;
pub mod error;
pub mod glm;
pub mod impute;
pub mod joint;
pub mod linalg;
pub mod predictors;
pub mod stats;
pub mod theory;
pub mod tree;

pub use data::{ColumnKind, MaskedMatrix, Pattern, TargetVector, Task};
pub use error::{Error, Result};
