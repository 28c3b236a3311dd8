//! Multi-teacher knowledge distillation on a small reverse-mode autodiff
//! engine: models, losses, adaptive teacher weighting, training loops,
//! synthetic data and binary file formats.

pub mod adapter;
pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use adapter::{AdapterParams, TeacherBundle};
pub use data::Dataset;
pub use error::{Error, Result};
pub use nn::{build_model, Model, SgdState};
pub use tensor::{Elementwise, Graph, Tensor, Var};
pub use trainer::{distill, evaluate, train_teacher, DistillConfig, MappingStrategy, Method, RunReport};
