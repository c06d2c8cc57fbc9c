//! Deterministic visualization design-rule checking for a Vega-Lite subset,
//! balanced rule-annotated dataset synthesis, and an evaluation harness that
//! scores language-model endpoints on violation detection.

pub mod bundled;
pub mod data;
pub mod eval;
pub mod genset;
pub mod io;
pub mod par;
pub mod rules;
pub mod spec;

pub use data::{DataError, DataTable, FieldKind, FieldProfile};
pub use rules::{lint, rule_catalog, Category, Linter, RuleDescriptor, ViolationSet};
pub use spec::{ChartSpec, Encoding, SpecError};
