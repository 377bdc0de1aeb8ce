//! Cost models, degrees-of-freedom accounting, symmetry diagnostics and attention export.

pub mod cost;
pub mod dof;
pub mod export;
pub mod gradient;
pub mod symmetry;

pub use cost::{analytic_params, flop_count, preset, scaling_table, CostReport, FlopConvention, ShapeSpec};
pub use dof::{dof_calc, DofReport};
pub use export::{export_attention, ExportSummary, PgmMode};
pub use symmetry::{symmetry_score, SymmetryReport};
