//! Case lifecycle from arrival to follow-up.

use brachy_core::archive::{ArtifactRef, Stage};
use brachy_core::planning::FeasibilityReport;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkflowStage {
    Arrival,
    Diagnosis,
    DeviceSelection,
    Preplan,
    Intraop,
    Postop,
    Closed,
}

impl WorkflowStage {
    pub const ALL: [WorkflowStage; 7] = [
        WorkflowStage::Arrival,
        WorkflowStage::Diagnosis,
        WorkflowStage::DeviceSelection,
        WorkflowStage::Preplan,
        WorkflowStage::Intraop,
        WorkflowStage::Postop,
        WorkflowStage::Closed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkflowStage::Arrival => "ARRIVAL",
            WorkflowStage::Diagnosis => "DIAGNOSIS",
            WorkflowStage::DeviceSelection => "DEVICE_SELECTION",
            WorkflowStage::Preplan => "PREPLAN",
            WorkflowStage::Intraop => "INTRAOP",
            WorkflowStage::Postop => "POSTOP",
            WorkflowStage::Closed => "CLOSED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str().eq_ignore_ascii_case(s))
    }

    /// Edges of the workflow graph. Ineligible patients leave after
    /// diagnosis.
    pub fn can_advance_to(self, next: WorkflowStage) -> bool {
        use WorkflowStage::*;
        matches!(
            (self, next),
            (Arrival, Diagnosis)
                | (Diagnosis, DeviceSelection)
                | (Diagnosis, Closed)
                | (DeviceSelection, Preplan)
                | (Preplan, Intraop)
                | (Intraop, Postop)
                | (Postop, Closed)
        )
    }

    /// Archive stage that artifacts produced in this workflow stage belong to.
    pub fn archive_stage(self) -> Option<Stage> {
        match self {
            WorkflowStage::Arrival | WorkflowStage::Diagnosis | WorkflowStage::DeviceSelection | WorkflowStage::Preplan => {
                Some(Stage::Pre)
            }
            WorkflowStage::Intraop => Some(Stage::Intra),
            WorkflowStage::Postop => Some(Stage::Post),
            WorkflowStage::Closed => None,
        }
    }

    pub fn allows_planning(self) -> bool {
        matches!(self, WorkflowStage::Preplan | WorkflowStage::Intraop)
    }
}

impl fmt::Display for WorkflowStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Eligibility {
    #[default]
    Undecided,
    Eligible,
    Ineligible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceComparison {
    pub candidates: Vec<String>,
    pub reports: Vec<FeasibilityReport>,
    pub selected: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prescription {
    pub ebrt_gy: f64,
    pub fractions: u32,
}

impl Default for Prescription {
    fn default() -> Self {
        Prescription { ebrt_gy: 50.0, fractions: 5 }
    }
}

/// Persisted per-case state. Artifact refs point into the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub case_id: String,
    pub stage: WorkflowStage,
    pub eligibility: Eligibility,
    pub comparison: Option<DeviceComparison>,
    pub device: Option<String>,
    pub prescription: Prescription,
    pub active_volume: Option<ArtifactRef>,
    pub active_labels: Option<ArtifactRef>,
    pub active_registration: Option<ArtifactRef>,
    pub active_plan: Option<ArtifactRef>,
    pub active_report: Option<ArtifactRef>,
    /// Incremented by every committed mutation.
    pub revision: u64,
}

impl WorkflowState {
    pub fn new(case_id: impl Into<String>) -> Self {
        WorkflowState {
            case_id: case_id.into(),
            stage: WorkflowStage::Arrival,
            eligibility: Eligibility::Undecided,
            comparison: None,
            device: None,
            prescription: Prescription::default(),
            active_volume: None,
            active_labels: None,
            active_registration: None,
            active_plan: None,
            active_report: None,
            revision: 0,
        }
    }
}
