//! Model uncertainty on three-choice multiple-choice questions, measured from
//! permutation-averaged first-token probabilities and choice-order
//! sensitivity, and compared against how students actually answered.
//!
//! The pipeline is `dataset` → `prompting` → `backend` (probe + cache) →
//! `uncertainty` (per-question profiles) → `analysis` (reports built on the
//! `stats` kernel). The numerical layers are generic over the floating-point
//! scalar; the aliases at the bottom of this file fix it to `f64`, which is
//! what the CLI uses.

pub mod analysis;
pub mod backend;
pub mod cli;
pub mod dataset;
pub mod prompting;
pub mod stats;
pub mod uncertainty;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar the metric and statistics code is written against.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` literal or wire value.
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Default
        + Serialize
        + DeserializeOwned
        + Send
        + Sync
        + 'static
{
}

pub use backend::{BackendIdentity, ChoiceProbe, ProbeCache, TokenDistribution};
pub use dataset::{ChoiceRole, ChoiceRoles, Dataset, Question, QuestionType};
pub use prompting::{LabelStyle, Permutation, Phrasing, RenderedPrompt};
pub use uncertainty::VariantSet;

pub type ChoiceProbabilities = uncertainty::ChoiceProbabilities<f64>;
pub type OrderSensitivity = uncertainty::OrderSensitivity<f64>;
pub type UncertaintyProfile = uncertainty::UncertaintyProfile<f64>;
pub type CorrelationResult = stats::CorrelationResult<f64>;
pub type ChiSquaredResult = stats::ChiSquaredResult<f64>;
pub type AnalysisReport = analysis::AnalysisReport<f64>;
pub type ReportRow = analysis::ReportRow<f64>;

pub type ChoiceProbabilitiesF32 = uncertainty::ChoiceProbabilities<f32>;
pub type UncertaintyProfileF32 = uncertainty::UncertaintyProfile<f32>;
pub type CorrelationResultF32 = stats::CorrelationResult<f32>;
