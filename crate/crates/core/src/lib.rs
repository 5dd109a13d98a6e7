//! CKA-based layer importance and layer selection for LoRA-style
//! fine-tuning, with a desk-scale transformer to run the method end to end.
//!
//! Pipeline: capture `R_0..R_M` with [`model::ToyModel::forward_with_hooks`]
//! (or read a dump with [`repio`]), score layers with
//! [`importance::layer_importance`], pick layers with
//! [`importance::select_by_importance`], attach adapters with
//! [`model::apply_plan`] and fine-tune with [`model::train`].

pub mod arch;
pub mod error;
pub mod importance;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod repio;
pub mod report;
pub mod similarity;

pub use error::{Error, FormatError, Result};
