//! Declarative experiment configuration.
//!
//! One JSON document with sections `{plant, excitation, dictionary,
//! identify, ptab, simulate}` plus a global seed drives the whole pipeline;
//! a fixed seed makes every stage deterministic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use koopman_ptc::controller::{ControllerConfig, RegressorSpec};
use koopman_ptc::dictionary::{DictionaryKind, DictionarySpec};
use koopman_ptc::plants::{ExcitationKind, ExcitationSignal, Plant};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub excitation: ExcitationSection,
    #[serde(default)]
    pub dictionary: DictionarySection,
    #[serde(default)]
    pub identify: IdentifySection,
    #[serde(default)]
    pub ptab: ControllerSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct PlantSection {
    pub kind: PlantKindConfig,
    pub eps: f64,
    pub disturbance_amplitude: f64,
    pub escape_radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKindConfig {
    VanDerPol,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self {
            kind: PlantKindConfig::VanDerPol,
            eps: 1.0,
            disturbance_amplitude: 0.1,
            escape_radius: 50.0,
        }
    }
}

impl PlantSection {
    pub fn build(&self) -> Plant {
        match self.kind {
            PlantKindConfig::VanDerPol => {
                Plant::van_der_pol(self.eps, self.disturbance_amplitude)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSection {
    pub kind: ExcitationKind,
    pub amplitude: f64,
    pub period: f64,
    pub horizon: f64,
    pub dt: f64,
    pub x0: Vec<f64>,
    /// Excitation seed; the global seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for ExcitationSection {
    fn default() -> Self {
        Self {
            kind: ExcitationKind::Prbs,
            amplitude: 2.0,
            period: 0.1,
            horizon: 100.0,
            dt: 0.01,
            x0: vec![0.0, 0.0],
            seed: None,
        }
    }
}

impl ExcitationSection {
    pub fn signal(&self, global_seed: u64) -> ExcitationSignal {
        ExcitationSignal {
            kind: self.kind,
            amplitude: self.amplitude,
            period: self.period,
            seed: self.seed.unwrap_or(global_seed),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionarySection {
    pub kind: DictionaryKind,
    pub size: usize,
    #[serde(default = "default_true")]
    pub includes_identity: bool,
    #[serde(default)]
    pub width: Option<f64>,
    #[serde(default)]
    pub rbf_count: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl Default for DictionarySection {
    fn default() -> Self {
        Self {
            kind: DictionaryKind::Identity,
            size: 2,
            includes_identity: true,
            width: None,
            rbf_count: None,
        }
    }
}

impl DictionarySection {
    pub fn spec(&self, n: usize, global_seed: u64) -> DictionarySpec {
        DictionarySpec {
            kind: self.kind,
            n,
            size: self.size,
            includes_identity: self.includes_identity,
            centers: None,
            width: self.width,
            rbf_count: self.rbf_count,
            seed: global_seed.wrapping_add(1),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifySection {
    pub ridge: f64,
    pub split: f64,
}

impl Default for IdentifySection {
    fn default() -> Self {
        Self {
            ridge: 1e-8,
            split: 0.8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    #[serde(rename = "T")]
    pub prescribed_time: f64,
    /// Backstepping gains; a single entry is broadcast over the chain.
    pub c: Vec<f64>,
    #[serde(rename = "Gamma")]
    pub gamma: Vec<Vec<f64>>,
    pub guard_fraction: f64,
    pub theta_hat0: Vec<f64>,
    pub regressor: RegressorSpec,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            prescribed_time: 5.0,
            c: vec![3.0],
            gamma: vec![vec![5.0]],
            guard_fraction: 0.01,
            theta_hat0: vec![0.0],
            regressor: RegressorSpec::PlantPhi,
        }
    }
}

impl ControllerSection {
    pub fn build(&self, chain_len: usize) -> anyhow::Result<ControllerConfig> {
        let gains = if self.c.len() == chain_len {
            self.c.clone()
        } else if self.c.len() == 1 {
            vec![self.c[0]; chain_len]
        } else {
            anyhow::bail!(
                "ptab.c has {} entries for a chain of length {chain_len}",
                self.c.len()
            );
        };
        let p = self.theta_hat0.len();
        if self.gamma.len() != p || self.gamma.iter().any(|r| r.len() != p) {
            anyhow::bail!("ptab.Gamma must be a {p} x {p} matrix matching theta_hat0");
        }
        let cfg = ControllerConfig {
            prescribed_time: self.prescribed_time,
            gains: DVector::from_vec(gains),
            gamma: DMatrix::from_fn(p, p, |i, j| self.gamma[i][j]),
            guard_fraction: self.guard_fraction,
            regressor: self.regressor,
            theta_hat0: DVector::from_vec(self.theta_hat0.clone()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub dt: f64,
    pub t_end: f64,
    pub initial_conditions: Vec<Vec<f64>>,
    /// Residual-set radius for the settling metrics.
    pub radius: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 10.0,
            initial_conditions: vec![
                vec![2.0, 0.0],
                vec![-2.0, 0.0],
                vec![1.0, 1.5],
                vec![-1.0, -1.5],
                vec![0.5, -2.0],
            ],
            radius: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_partial_documents_fill_in() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.simulate.initial_conditions.len(), 5);

        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 7, "ptab": {"T": 2.0, "c": [4.0],
                "Gamma": [[1.0]], "guard_fraction": 0.01, "theta_hat0": [0.0],
                "regressor": "zero"}}"#)
            .unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.ptab.prescribed_time, 2.0);
        assert_eq!(partial.excitation.horizon, 100.0);
    }

    #[test]
    fn gain_broadcast_and_mismatch() {
        let section = ControllerSection::default();
        let cfg = section.build(4).unwrap();
        assert_eq!(cfg.gains.len(), 4);
        let mut bad = section;
        bad.c = vec![1.0, 2.0, 3.0];
        assert!(bad.build(4).is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"plnat": {}}"#);
        assert!(err.is_err());
    }
}
