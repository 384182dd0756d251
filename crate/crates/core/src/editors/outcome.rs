use serde::{Deserialize, Serialize};

use crate::microlm::{ModelParams, WeightId};

/// Per-edit numbers recorded alongside the edited snapshot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditDiagnostics {
    pub steps: usize,
    pub final_loss: f64,
    /// `‖Λ‖₂` of a rank-one update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_norm: Option<f64>,
    /// `‖Ŵ − W‖∞` (largest entry magnitude) of a fine-tuning edit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_max_abs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_norm: Option<f64>,
    /// `‖v* − v₀‖₂` of a rank-one update.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_shift: Option<f64>,
    pub warnings: Vec<String>,
}

/// An edited snapshot plus the optimisation record that produced it.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub params: ModelParams,
    /// The single matrix that was rewritten.
    pub weight: WeightId,
    /// Objective value before each optimisation step.
    pub trajectory: Vec<f64>,
    pub diagnostics: EditDiagnostics,
}
