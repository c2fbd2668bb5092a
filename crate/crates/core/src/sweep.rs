//! Plan generators for every adaptation strategy.
//!
//! All functions are pure; the same arguments always give the same plans.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::TrainPlan;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Front,
    Rear,
    Cogsym,
    Positional,
    Sequential,
    Ranked,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Front => "front",
            Strategy::Rear => "rear",
            Strategy::Cogsym => "cogsym",
            Strategy::Positional => "positional",
            Strategy::Sequential => "sequential",
            Strategy::Ranked => "ranked",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "front" => Strategy::Front,
            "rear" => Strategy::Rear,
            "cogsym" => Strategy::Cogsym,
            "positional" => Strategy::Positional,
            "sequential" => Strategy::Sequential,
            "ranked" => Strategy::Ranked,
            other => return Err(Error::Spec(format!("unknown strategy `{other}`"))),
        })
    }
}

fn require_even(l: usize) -> Result<()> {
    if l < 2 || l % 2 != 0 {
        return Err(Error::Spec(format!("layer count {l} must be even and at least 2")));
    }
    Ok(())
}

/// Layers `[0, k)` plus the embedding, for k = 2, 4, ..., L.
pub fn front_sweep(l: usize) -> Result<Vec<TrainPlan>> {
    require_even(l)?;
    Ok((1..=l / 2)
        .map(|i| TrainPlan::new(format!("front-{}", 2 * i), 0..2 * i, true, false))
        .collect())
}

/// Layers `[L-k, L)` plus the LM head, for k = 2, 4, ..., L.
pub fn rear_sweep(l: usize) -> Result<Vec<TrainPlan>> {
    require_even(l)?;
    Ok((1..=l / 2)
        .map(|i| TrainPlan::new(format!("rear-{}", 2 * i), l - 2 * i..l, false, true))
        .collect())
}

fn split_plan(label: String, l: usize, k: usize) -> TrainPlan {
    let h = k / 2;
    TrainPlan::new(label, (0..h).chain(l - h..l), true, true)
}

/// Front and rear blocks of k/2 layers each, k = 4, 8, ..., L; embedding and head trainable.
pub fn cogsym_sweep(l: usize) -> Result<Vec<TrainPlan>> {
    if l < 4 || l % 4 != 0 {
        return Err(Error::Spec(format!("cogsym sweep needs L divisible by 4, got {l}")));
    }
    Ok((1..=l / 4)
        .map(|i| split_plan(format!("cogsym-{}", 4 * i), l, 4 * i))
        .collect())
}

/// The single CogSym plan training `round(fraction * L)` outermost layers.
pub fn cogsym_plan(l: usize, fraction: f64) -> Result<TrainPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Spec(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * l as f64).round() as usize;
    if k == 0 || k % 2 != 0 {
        return Err(Error::Spec(format!(
            "fraction {fraction} of {l} layers rounds to k={k}, which is not a positive even number"
        )));
    }
    Ok(split_plan(format!("cogsym-{k}"), l, k))
}

/// Two k/2 blocks shifted inward by `stride` until they meet at the center.
pub fn positional_plans(l: usize, k: usize, stride: usize) -> Result<Vec<TrainPlan>> {
    if k == 0 || k % 2 != 0 || k > l {
        return Err(Error::Spec(format!("positional budget k={k} must be even and in 1..={l}")));
    }
    if stride == 0 {
        return Err(Error::Spec("positional stride must be positive".into()));
    }
    require_even(l)?;
    let h = k / 2;
    let last_start = l / 2 - h;
    if last_start % stride != 0 {
        return Err(Error::Spec(format!(
            "stride {stride} does not reach the center block start {last_start}; blocks would overlap"
        )));
    }
    Ok((0..=last_start / stride)
        .map(|j| {
            let s = j * stride;
            TrainPlan::new(
                format!("positional-{j}"),
                (s..s + h).chain(l - s - h..l - s),
                true,
                true,
            )
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequentialOrder {
    BegEnd,
    EndBeg,
}

impl std::str::FromStr for SequentialOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beg_end" => Ok(SequentialOrder::BegEnd),
            "end_beg" => Ok(SequentialOrder::EndBeg),
            other => Err(Error::Spec(format!("unknown sequential order `{other}`"))),
        }
    }
}

/// Two consecutive phases: front block with embedding, rear block with head.
pub fn sequential_spec(order: SequentialOrder, l: usize, k: usize) -> Result<Vec<TrainPlan>> {
    if k == 0 || k % 2 != 0 || k > l {
        return Err(Error::Spec(format!("sequential budget k={k} must be even and in 1..={l}")));
    }
    let h = k / 2;
    let tag = match order {
        SequentialOrder::BegEnd => "beg_end",
        SequentialOrder::EndBeg => "end_beg",
    };
    let front = TrainPlan::new(format!("{tag}-{k}-front"), 0..h, true, false);
    let rear = TrainPlan::new(format!("{tag}-{k}-rear"), l - h..l, false, true);
    Ok(match order {
        SequentialOrder::BegEnd => vec![front, rear],
        SequentialOrder::EndBeg => vec![rear, front],
    })
}

/// The `k` highest-scoring layers; ties go to the lower index.
pub fn plan_from_scores(
    label: impl Into<String>,
    scores: &[f64],
    k: usize,
    train_embedding: bool,
    train_lm_head: bool,
) -> Result<TrainPlan> {
    if k > scores.len() {
        return Err(Error::Spec(format!("k={k} exceeds the {} scored layers", scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Spec(format!("score of layer {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(TrainPlan::new(label, order.into_iter().take(k), train_embedding, train_lm_head))
}

/// Ranked plans over the even budgets 2, 4, ..., L.
pub fn ranked_sweep(method: &str, scores: &[f64]) -> Result<Vec<TrainPlan>> {
    require_even(scores.len())?;
    (1..=scores.len() / 2)
        .map(|i| plan_from_scores(format!("{method}-{}", 2 * i), scores, 2 * i, true, true))
        .collect()
}
