use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which transformer layers (and whether the embedding / LM head) are trainable in one run.
///
/// `budget_k` only counts transformer layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlanRecord", into = "PlanRecord")]
pub struct TrainPlan {
    pub label: String,
    pub trainable_layers: BTreeSet<usize>,
    pub train_embedding: bool,
    pub train_lm_head: bool,
}

#[derive(Serialize, Deserialize)]
struct PlanRecord {
    label: String,
    layers: Vec<usize>,
    embed: bool,
    head: bool,
    k: usize,
}

impl TryFrom<PlanRecord> for TrainPlan {
    type Error = Error;

    fn try_from(r: PlanRecord) -> Result<Self> {
        let layers: BTreeSet<usize> = r.layers.iter().copied().collect();
        if layers.len() != r.layers.len() {
            return Err(Error::Plan(format!("plan `{}` lists a layer twice", r.label)));
        }
        if layers.len() != r.k {
            return Err(Error::Plan(format!(
                "plan `{}` declares k={} but lists {} layers",
                r.label,
                r.k,
                layers.len()
            )));
        }
        Ok(TrainPlan {
            label: r.label,
            trainable_layers: layers,
            train_embedding: r.embed,
            train_lm_head: r.head,
        })
    }
}

impl From<TrainPlan> for PlanRecord {
    fn from(p: TrainPlan) -> Self {
        PlanRecord {
            k: p.trainable_layers.len(),
            layers: p.trainable_layers.into_iter().collect(),
            label: p.label,
            embed: p.train_embedding,
            head: p.train_lm_head,
        }
    }
}

impl TrainPlan {
    pub fn new(
        label: impl Into<String>,
        layers: impl IntoIterator<Item = usize>,
        train_embedding: bool,
        train_lm_head: bool,
    ) -> Self {
        TrainPlan {
            label: label.into(),
            trainable_layers: layers.into_iter().collect(),
            train_embedding,
            train_lm_head,
        }
    }

    /// Every layer plus embedding and head.
    pub fn full(n_layers: usize) -> Self {
        TrainPlan::new("full", 0..n_layers, true, true)
    }

    /// Nothing trainable; evaluates the base model.
    pub fn frozen() -> Self {
        TrainPlan::new("base", [], false, false)
    }

    pub fn budget_k(&self) -> usize {
        self.trainable_layers.len()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if let Some(&bad) = self.trainable_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Plan(format!(
                "plan `{}` trains layer {bad} but the model has {n_layers} layers",
                self.label
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        self.trainable_layers.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_uses_short_field_names() {
        let p = TrainPlan::new("front-2", [0, 1], true, false);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"label":"front-2","layers":[0,1],"embed":true,"head":false,"k":2}"#);
        let back: TrainPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn record_with_wrong_k_is_rejected() {
        let s = r#"{"label":"x","layers":[0,1],"embed":true,"head":false,"k":3}"#;
        assert!(serde_json::from_str::<TrainPlan>(s).is_err());
    }

    #[test]
    fn out_of_range_layer_fails_validation() {
        let p = TrainPlan::new("bad", [8], false, false);
        assert!(matches!(p.validate(8), Err(Error::Plan(_))));
        assert!(p.validate(9).is_ok());
    }
}
