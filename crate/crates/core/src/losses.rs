//! Per-domain transcription losses, the encoder consistency loss and their
//! weighted combination.

use serde::{Deserialize, Serialize};

use crate::numerics::{combine_values, Distance, Graph, NumericsError, Var};
use crate::synthdata::PAD;

/// Distance used for the consistency term.
pub type ConsistencyKind = Distance;

/// Which inputs a fine-tuning step consumes and how their losses combine.
///
/// Serialized as its [`id`](Strategy::id), e.g. `"voc"` or `"cns-l2-w1.0"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Separated vocals only.
    Voc,
    /// Mixtures only.
    Mix,
    /// One domain per sample, chosen by a fair coin.
    Random,
    /// Paired vocal and mixture, averaged transcription losses.
    Both,
    /// Paired inputs with the consistency term weighted by `weight`.
    Cns { kind: ConsistencyKind, weight: f64 },
}

impl Strategy {
    /// Stable identifier used for file and directory names.
    pub fn id(&self) -> String {
        match self {
            Self::Voc => "voc".into(),
            Self::Mix => "mix".into(),
            Self::Random => "random".into(),
            Self::Both => "both".into(),
            Self::Cns { kind, weight } => {
                let k = match kind {
                    Distance::L1 => "l1",
                    Distance::L2 => "l2",
                };
                format!("cns-{k}-w{weight:?}")
            }
        }
    }

    pub fn parse(id: &str) -> Option<Self> {
        match id {
            "voc" => Some(Self::Voc),
            "mix" => Some(Self::Mix),
            "random" => Some(Self::Random),
            "both" => Some(Self::Both),
            _ => {
                let rest = id.strip_prefix("cns-")?;
                let (k, w) = rest.split_once("-w")?;
                let kind = match k {
                    "l1" => Distance::L1,
                    "l2" => Distance::L2,
                    _ => return None,
                };
                let weight: f64 = w.parse().ok()?;
                (weight >= 0.0).then_some(Self::Cns { kind, weight })
            }
        }
    }

    pub fn is_paired(&self) -> bool {
        matches!(self, Self::Both | Self::Cns { .. })
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Self::Cns { weight, .. } if !(weight.is_finite() && *weight >= 0.0) => {
                Err(format!("consistency weight must be finite and non-negative, got {weight}"))
            }
            _ => Ok(()),
        }
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.id()
    }
}

impl TryFrom<String> for Strategy {
    type Error = String;

    fn try_from(id: String) -> Result<Self, String> {
        Strategy::parse(&id).ok_or_else(|| format!("unknown strategy id {id:?}"))
    }
}

/// Loss terms of one step. Missing terms were not computed for the strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub alt_vocal: Option<f64>,
    pub alt_mixture: Option<f64>,
    pub consistency: Option<f64>,
    pub total: f64,
}

/// Teacher-forced transcription loss: cross-entropy of `logits: [L×V]`
/// against the shifted targets, ignoring PAD positions.
pub fn alt_loss(graph: &Graph, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
    graph.cross_entropy(logits, targets, Some(PAD))
}

/// Mean L1 or L2 distance between paired encoder states over valid frames.
/// Gradient reaches both inputs.
pub fn consistency_loss(
    graph: &Graph,
    vocal: Var,
    mixture: Var,
    kind: ConsistencyKind,
    mask: &[bool],
) -> Result<Var, NumericsError> {
    graph.masked_distance(vocal, mixture, kind, mask)
}

/// `(vocal + mixture)/2 + weight·consistency`.
pub fn combined_loss(vocal: f64, mixture: f64, consistency: f64, weight: f64) -> f64 {
    combine_values(vocal, mixture, consistency, weight)
}

/// Graph version of [`combined_loss`].
pub fn combined_loss_var(
    graph: &Graph,
    vocal: Var,
    mixture: Var,
    consistency: Var,
    weight: f64,
) -> Result<Var, NumericsError> {
    graph.combine(vocal, mixture, consistency, weight)
}
