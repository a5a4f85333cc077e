//! Risk-premia estimation and identification-robust inference for linear
//! beta-representation asset-pricing models.
//!
//! The pipeline runs bottom-up:
//!
//! - [`panel_io`] loads and aligns return/factor panels and applies the
//!   zero-beta conventions (excess returns, reference-asset differencing,
//!   estimated intercept).
//! - [`first_pass`] runs the time-series regressions that produce the
//!   moment estimates everything else consumes.
//! - [`cross_section`] holds the Fama–MacBeth two-pass estimator, its plain
//!   and Shanken-corrected standard errors, and population pseudo-true values.
//! - [`cue_rank`] computes the continuous-updating estimator, the J
//!   (misspecification) and IS (identification strength) statistics through a
//!   symmetric-definite generalized eigenproblem.
//! - [`drlm`] evaluates the double robust LM statistic and inverts it over a
//!   grid into joint confidence sets and per-premium projections.
//! - [`sim_lab`] simulates calibrated factor models for size/power studies.
//! - [`zoo_scan`] sweeps every K-subset of a large factor panel using shared
//!   sufficient statistics.

pub mod chisq;
pub mod cross_section;
pub mod cue_rank;
pub mod drlm;
mod error;
pub mod first_pass;
pub mod linalg;
pub mod panel_io;
pub mod sim_lab;
pub mod zoo_scan;

pub use cross_section::{
    fm_pseudo_true, fm_tstats, fm_two_pass, Method, PopulationModel, PremiaResult, SeKind,
};
pub use cue_rank::{
    cue_estimate, cue_pseudo_true, diagnostics, effective_estimates, is_statistic, j_statistic,
    solve_pencil, DiagnosticPair, EigenSolution,
};
pub use drlm::{confidence_set, drlm_stat, power_improvement, project, CsGrid, ShapeClass};
pub use error::{Error, Result};
pub use first_pass::{estimate_first_pass, FirstPassEstimates};
pub use panel_io::{align, load_csv, AlignedDataset, PanelKind, RawPanel, ZeroBetaMode};
