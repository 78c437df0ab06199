//! Instance files and the per-arm models built from them.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::prior_dag::{ArmSpec, OutcomeDag, PriorSpec};

/// Largest martingale violation accepted when loading an explicit DAG.
pub const LOAD_MARTINGALE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(default)]
    pub name: Option<String>,
    pub horizon: u32,
    pub arms: Vec<ArmSpec>,
}

/// An arm together with its budget-folded posterior DAG.
#[derive(Debug, Clone)]
pub struct ArmModel {
    pub spec: ArmSpec,
    pub dag: Arc<OutcomeDag>,
}

impl ArmModel {
    pub fn new(spec: ArmSpec, depth: u32) -> Result<Self> {
        let dag = spec.build_dag(depth)?;
        Ok(ArmModel {
            spec,
            dag: Arc::new(dag),
        })
    }

    pub fn delay(&self) -> u32 {
        self.spec.delay
    }
}

impl Instance {
    pub fn new(name: impl Into<String>, horizon: u32, arms: Vec<ArmSpec>) -> Self {
        Instance {
            name: Some(name.into()),
            horizon,
            arms,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| "instance".into())
    }

    /// Parse and validate. Explicit DAGs violating the martingale property by
    /// more than [`LOAD_MARTINGALE_TOL`] are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let inst: Instance = serde_json::from_str(text)?;
        inst.validate()?;
        Ok(inst)
    }

    /// Parse without the martingale screen, for diagnostics.
    pub fn from_json_unchecked(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::InvalidInput(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() {
            return Err(invalid("instance has no arms"));
        }
        for arm in &self.arms {
            arm.validate()?;
            if let PriorSpec::Dag { dag } = &arm.prior {
                let built = OutcomeDag::from_explicit(dag, arm.bid)?;
                let worst = built.validate_martingale()?;
                if worst > LOAD_MARTINGALE_TOL {
                    return Err(invalid(format!(
                        "arm {}: martingale violation {worst:.3e} exceeds {LOAD_MARTINGALE_TOL:e}",
                        arm.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Build every arm's DAG to the depth the horizon needs.
    pub fn models(&self) -> Result<Vec<ArmModel>> {
        self.models_with_depth(self.horizon)
    }

    pub fn models_with_depth(&self, depth: u32) -> Result<Vec<ArmModel>> {
        self.arms.iter().map(|a| ArmModel::new(a.clone(), depth)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_beta_and_dag_priors() {
        let text = r#"{
            "horizon": 3,
            "arms": [
                {"id": "a", "prior": {"alpha1": 1, "alpha0": 2}, "delay": 1, "budget": 2.0, "bid": 1.0},
                {"id": "b", "prior": {"dag": {"root": "r", "states": [
                    {"id": "r", "mean": 0.5, "edges": [
                        {"outcome": "success", "prob": 0.5, "child": "s"},
                        {"outcome": "failure", "prob": 0.5, "child": "f"}]},
                    {"id": "s", "mean": 1.0},
                    {"id": "f", "mean": 0.0}]}}}
            ]
        }"#;
        let inst = Instance::from_json(text).unwrap();
        assert_eq!(inst.arms.len(), 2);
        assert_eq!(inst.arms[1].bid, 1.0);
        let models = inst.models().unwrap();
        assert_eq!(models[1].dag.len(), 3);
    }

    #[test]
    fn rejects_martingale_violation() {
        let text = r#"{"horizon": 1, "arms": [{"id": "b", "prior": {"dag": {"root": "r", "states": [
            {"id": "r", "mean": 0.6, "edges": [
                {"outcome": "success", "prob": 0.5, "child": "s"},
                {"outcome": "failure", "prob": 0.5, "child": "f"}]},
            {"id": "s", "mean": 1.0}, {"id": "f", "mean": 0.0}]}}}]}"#;
        assert!(Instance::from_json(text).is_err());
        assert!(Instance::from_json_unchecked(text).is_ok());
    }

    #[test]
    fn malformed_file_reports_position() {
        let err = Instance::from_json("{\n \"horizon\": 3,\n \"arms\": [\n").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }
}
