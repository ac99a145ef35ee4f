//! Schema-driven generation of task-oriented dialogs with app contexts.

pub mod context;
pub mod dataset;
pub mod llm;
pub mod mr;
pub mod persona;
pub mod pipeline;
pub mod plot;
pub mod qc;
pub mod realizer;
pub mod sampler;
pub mod template;
pub mod schema;
pub mod util;
pub mod values;
