//! Classification losses and the gated total objective.

use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyConfig;
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp used by the direct (probability-space) formulas.
pub const PROB_EPS: f64 = 1e-7;

/// Positive-sample ratio r_j of each attribute, computed once from the
/// training labels.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AttributeStats {
    pub ratios: Vec<f64>,
}

impl AttributeStats {
    pub fn new(ratios: Vec<f64>) -> Self {
        debug_assert!(ratios.iter().all(|r| (0.0..=1.0).contains(r)));
        AttributeStats { ratios }
    }

    /// Imbalance weights ω[i,j] = y·e^{1−r_j} + (1−y)·e^{r_j}.
    pub fn weights_for(&self, labels: &Tensor) -> Tensor {
        let m = self.ratios.len();
        Tensor::from_fn(labels.shape(), |i| {
            let r = self.ratios[i % m];
            if labels.data()[i] == 1.0 {
                (1.0 - r).exp()
            } else {
                r.exp()
            }
        })
    }
}

/// Plain BCE from logits (mean over batch, summed over attributes),
/// numerically stable for large |z|.
pub fn bce_loss(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    tape.bce_with_logits(logits, labels, None)
}

/// Imbalance-weighted BCE from logits.
pub fn weighted_bce(
    tape: &mut Tape,
    logits: Var,
    labels: &Tensor,
    stats: &AttributeStats,
) -> Result<Var> {
    let weights = stats.weights_for(labels);
    tape.bce_with_logits(logits, labels, Some(&weights))
}

/// Direct probability-space BCE with clamping; the reference formula for
/// the stable implementation.
pub fn bce_from_probs(p: &Tensor, y: &Tensor) -> f64 {
    let batch = p.shape()[0] as f64;
    let mut total = 0.0;
    for (&pi, &yi) in p.data().iter().zip(y.data()) {
        let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
    }
    total / batch
}

/// Direct probability-space weighted BCE.
pub fn weighted_bce_from_probs(p: &Tensor, y: &Tensor, stats: &AttributeStats) -> f64 {
    let batch = p.shape()[0] as f64;
    let m = stats.ratios.len();
    let mut total = 0.0;
    for (i, (&pi, &yi)) in p.data().iter().zip(y.data()).enumerate() {
        let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let r = stats.ratios[i % m];
        let w = yi * (1.0 - r).exp() + (1.0 - yi) * r.exp();
        total -= w * (yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln());
    }
    total / batch
}

/// Scalar record of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub spac: f64,
    pub semc: f64,
    pub gated: bool,
}

impl LossBreakdown {
    /// total = cls + 1{e > i_e}·(λ₁·spac + λ₂·semc), strict gate.
    pub fn compute(cls: f64, spac: f64, semc: f64, epoch: usize, cfg: &ConsistencyConfig) -> Self {
        let gated = cfg.gate_open(epoch);
        let total = if gated {
            cls + cfg.lambda1 * spac + cfg.lambda2 * semc
        } else {
            cls
        };
        LossBreakdown {
            total,
            cls,
            spac,
            semc,
            gated,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.cls.is_finite() && self.spac.is_finite() && self.semc.is_finite()
    }
}

/// Graph-side combination matching [`LossBreakdown::compute`]: terms with a
/// closed gate or zero weight never enter the graph, so a zero-λ run is
/// structurally identical to one without the consistency branch.
pub fn total_loss_graph(
    tape: &mut Tape,
    cls: Var,
    spac: Option<Var>,
    semc: Option<Var>,
    epoch: usize,
    cfg: &ConsistencyConfig,
) -> Result<Var> {
    let mut total = cls;
    if cfg.gate_open(epoch) {
        if let Some(spac) = spac {
            if cfg.lambda1 != 0.0 {
                let term = tape.mul_scalar(spac, cfg.lambda1)?;
                total = tape.add(total, term)?;
            }
        }
        if let Some(semc) = semc {
            if cfg.lambda2 != 0.0 {
                let term = tape.mul_scalar(semc, cfg.lambda2)?;
                total = tape.add(total, term)?;
            }
        }
    }
    Ok(total)
}
