//! Published accuracy tables from `fixtures/reference_tables.json`.

#![allow(dead_code)]

use std::path::PathBuf;

use pbf_rag_core::evaluation::{Exact, Ablation};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct Tables {
    pub datasets: Vec<DatasetTable>,
    pub mean_delta: String,
    pub mean_delta_tolerance: String,
}

#[derive(Debug, Deserialize)]
pub struct DatasetTable {
    pub dataset_id: String,
    pub printed_with_retrieval: String,
    pub printed_without_retrieval: String,
    pub tolerance: String,
    /// `[name, always-positive baseline, accuracy]`
    pub anomalies: Vec<(String, String, String)>,
}

pub fn d(s: &str) -> Exact {
    Exact::from_decimal_str(s).unwrap()
}

impl DatasetTable {
    pub fn accuracies(&self) -> Vec<Exact> {
        self.anomalies.iter().map(|(_, _, a)| d(a)).collect()
    }

    pub fn baselines(&self) -> Vec<Exact> {
        self.anomalies.iter().map(|(_, b, _)| d(b)).collect()
    }

    pub fn printed(&self) -> Ablation {
        Ablation::new(d(&self.printed_with_retrieval), d(&self.printed_without_retrieval))
    }
}

pub fn load() -> Tables {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/reference_tables.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

pub fn within(x: Exact, target: Exact, tol: Exact) -> bool {
    let diff = if x > target { x - target } else { target - x };
    diff <= tol
}
