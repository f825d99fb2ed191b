// SPDX-License-Identifier: MIT OR Apache-2.0

//! Values observed with the full human dataset and 1B-70B Llama-3 models.
//!
//! They need the original data and model scale to reproduce, so reports
//! carry them next to the computed numbers for comparison only.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub human_model_transition_rho: f64,
    pub human_mean_switch_ratio: f64,
    pub model_mean_switch_ratio: f64,
    /// Effect sizes of the position -1 vs 0 contrast.
    pub aligned_d_within: f64,
    pub aligned_d_between: f64,
    pub aligned_d_actual: f64,
    pub late_non_switch_within: f64,
    pub late_non_switch_between: f64,
    pub late_switch_within: f64,
    pub late_switch_between: f64,
    pub human_sequence_probe_auroc: f64,
    pub nll_output_auroc: f64,
    pub contrastive_neutral_auroc: f64,
    pub contrastive_convergent_auroc: f64,
    pub contrastive_divergent_auroc: f64,
}

impl Default for ReferenceValues {
    fn default() -> Self {
        Self {
            human_model_transition_rho: 0.701,
            human_mean_switch_ratio: 0.55,
            model_mean_switch_ratio: 0.40,
            aligned_d_within: -0.158,
            aligned_d_between: 0.144,
            aligned_d_actual: -0.184,
            late_non_switch_within: 0.0035,
            late_non_switch_between: 0.0005,
            late_switch_within: 0.0008,
            late_switch_between: 0.0007,
            human_sequence_probe_auroc: 0.57,
            nll_output_auroc: 0.751,
            contrastive_neutral_auroc: 0.96,
            contrastive_convergent_auroc: 0.98,
            contrastive_divergent_auroc: 0.97,
        }
    }
}
