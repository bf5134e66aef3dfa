//! Core of the wee workflow engine: the workflow language, expression
//! evaluation, the supervised context store, the execution engine and the
//! handler wrappers that carry out call activities.

pub mod context;
pub mod dsl;
pub mod engine;
pub mod events;
pub mod expr;
pub mod handlers;
pub mod saved;
pub mod trace;
