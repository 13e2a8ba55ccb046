//! Reversible lifelong model editing with per-edit frozen LoRA modules
//! selected by a semantic key memory.

pub mod adapters;
pub mod cli;
pub mod drift;
pub mod editor;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numerics;
pub mod routing;

pub use error::{Result, SolaError};
