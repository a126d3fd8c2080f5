//! Training objectives: margin ranking over cosine distance, the
//! translation-consistency MSE and the semantic NLL over the tail table.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    axpy, cosine_distance, cosine_distance_grad, dot, log_sum_exp, softmax, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub transe: bool,
    pub tri: bool,
    pub sem: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            transe: true,
            tri: true,
            sem: true,
        }
    }
}

impl LossToggles {
    pub const NONE: LossToggles = LossToggles {
        transe: false,
        tri: false,
        sem: false,
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_transe: f64,
    pub l_tri: f64,
    pub l_sem: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_transe.is_finite() && self.l_tri.is_finite() && self.l_sem.is_finite()
    }
}

/// One training instance as seen by the loss.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub head: Vec<f64>,
    pub relation: Vec<f64>,
    pub positive: usize,
    pub weight: f64,
}

impl BatchItem {
    pub fn new(head: Vec<f64>, relation: Vec<f64>, positive: usize) -> Self {
        Self {
            head,
            relation,
            positive,
            weight: 1.0,
        }
    }

    fn query(&self) -> Vec<f64> {
        self.head
            .iter()
            .zip(&self.relation)
            .map(|(h, r)| h + r)
            .collect()
    }
}

/// Gradients of the batch loss.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    /// `dL/d(h + r)` per item; equal to both `dL/dh` and `dL/dr`.
    pub d_query: Vec<Vec<f64>>,
    pub d_tails: Tensor,
}

/// Distinct tail indices of other batch items whose answer differs from
/// item `instance`'s, ascending.
pub fn mine_negatives(positives: &[usize], instance: usize) -> Vec<usize> {
    let own = positives[instance];
    positives
        .iter()
        .copied()
        .filter(|&p| p != own)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn add(h: &[f64], r: &[f64]) -> Vec<f64> {
    h.iter().zip(r).map(|(a, b)| a + b).collect()
}

/// `Σ_{t+} Σ_{t−} max(0, γ + d(h + r, t+) − d(h + r, t−))`
pub fn transe_loss(
    h: &[f64],
    r: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    margin: f64,
) -> Result<f64> {
    check_margin(margin)?;
    let q = add(h, r);
    let dp = positives
        .iter()
        .map(|t| cosine_distance(&q, t))
        .collect::<Result<Vec<_>>>()?;
    let dn = negatives
        .iter()
        .map(|t| cosine_distance(&q, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(dp
        .iter()
        .flat_map(|p| dn.iter().map(move |n| (margin + p - n).max(0.0)))
        .sum())
}

/// Mean squared residual of `h + r − t`.
pub fn consistency_loss(h: &[f64], r: &[f64], t_pos: &[f64]) -> Result<f64> {
    if h.len() != r.len() || h.len() != t_pos.len() || h.is_empty() {
        return Err(Error::Shape(
            "consistency loss needs equal, non-empty dims".into(),
        ));
    }
    let sq: f64 = h
        .iter()
        .zip(r)
        .zip(t_pos)
        .map(|((a, b), t)| (a + b - t).powi(2))
        .sum();
    Ok(sq / h.len() as f64)
}

/// `−log softmax(T (h + r))[positive]`
pub fn semantic_loss(h: &[f64], r: &[f64], tails: &Tensor, positive: usize) -> Result<f64> {
    if positive >= tails.rows() {
        return Err(Error::Vocabulary(format!(
            "positive index {positive} outside table of {}",
            tails.rows()
        )));
    }
    let q = add(h, r);
    let logits: Vec<f64> = tails.row_iter().map(|t| dot(t, &q)).collect();
    Ok(log_sum_exp(&logits) - logits[positive])
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "margin must be positive, got {margin}"
        )))
    }
}

/// Weighted mean over items of the enabled terms, with gradients.
///
/// Negatives for each item are mined from the other items in the batch.
pub fn total_loss(
    items: &[BatchItem],
    tails: &Tensor,
    margin: f64,
    toggles: LossToggles,
) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    check_margin(margin)?;
    let embed = tails.cols();
    let vocab = tails.rows();
    let positives: Vec<usize> = items.iter().map(|i| i.positive).collect();
    if let Some(&p) = positives.iter().find(|&&p| p >= vocab) {
        return Err(Error::Vocabulary(format!(
            "positive index {p} outside table of {vocab}"
        )));
    }
    let weight_sum: f64 = items.iter().map(|i| i.weight).sum();
    if !(weight_sum > 0.0) {
        return Err(Error::Domain(
            "batch weights must sum to a positive value".into(),
        ));
    }

    let mut sums = LossBreakdown::default();
    let mut d_query = Vec::with_capacity(items.len());
    let mut d_tails = Tensor::zeros(vec![vocab, embed]);

    for (idx, item) in items.iter().enumerate() {
        let q = item.query();
        if q.len() != embed {
            return Err(Error::Shape(format!(
                "embedding width {} vs tail width {embed}",
                q.len()
            )));
        }
        let w = item.weight / weight_sum;
        let p = item.positive;
        let t_pos = tails.row(p).to_vec();
        let mut dq = vec![0.0; embed];

        if toggles.transe {
            let negatives = mine_negatives(&positives, idx);
            if !negatives.is_empty() {
                let d_pos = cosine_distance(&q, &t_pos)?;
                let gq_pos = cosine_distance_grad(&q, &t_pos);
                let gt_pos = cosine_distance_grad(&t_pos, &q);
                for n in negatives {
                    let t_neg = tails.row(n);
                    let d_neg = cosine_distance(&q, t_neg)?;
                    let hinge = margin + d_pos - d_neg;
                    if hinge > 0.0 {
                        sums.l_transe += w * hinge;
                        axpy(w, &gq_pos, &mut dq);
                        axpy(-w, &cosine_distance_grad(&q, t_neg), &mut dq);
                        axpy(w, &gt_pos, d_tails.row_mut(p));
                        axpy(-w, &cosine_distance_grad(t_neg, &q), d_tails.row_mut(n));
                    }
                }
            }
        }

        if toggles.tri {
            let resid: Vec<f64> = q.iter().zip(&t_pos).map(|(a, b)| a - b).collect();
            sums.l_tri += w * dot(&resid, &resid) / embed as f64;
            let scale = 2.0 * w / embed as f64;
            axpy(scale, &resid, &mut dq);
            axpy(-scale, &resid, d_tails.row_mut(p));
        }

        if toggles.sem {
            let logits: Vec<f64> = tails.row_iter().map(|t| dot(t, &q)).collect();
            sums.l_sem += w * (log_sum_exp(&logits) - logits[p]);
            let mut probs = softmax(&logits, 1.0)?;
            probs[p] -= 1.0;
            for (k, &g) in probs.iter().enumerate() {
                axpy(w * g, tails.row(k), &mut dq);
                axpy(w * g, &q, d_tails.row_mut(k));
            }
        }

        d_query.push(dq);
    }
    sums.total = sums.l_transe + sums.l_tri + sums.l_sem;
    Ok(BatchLoss {
        breakdown: sums,
        d_query,
        d_tails,
    })
}
