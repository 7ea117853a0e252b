use serde::{Deserialize, Serialize};

/// Loss maximized by the attack (cross-entropy is also what training
/// minimizes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// `−max(z_y − max_{j≠y} z_j + κ, 0)`: the attacker gains until some
    /// wrong logit leads the true one by `κ`, and nothing after.
    CarliniWagner {
        kappa: f64,
    },
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn best_wrong(logits: &[f64], label: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in logits.iter().enumerate() {
        if j != label && (best == usize::MAX || v > logits[best]) {
            best = j;
        }
    }
    best
}

pub fn loss(logits: &[f64], label: usize, kind: LossKind) -> f64 {
    match kind {
        LossKind::CrossEntropy => {
            let top = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = top + logits.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            lse - logits[label]
        }
        LossKind::CarliniWagner { kappa } => {
            let wrong = best_wrong(logits, label);
            -(logits[label] - logits[wrong] + kappa).max(0.0)
        }
    }
}

/// Derivative of [`loss`] with respect to the logits.
pub fn loss_gradient(logits: &[f64], label: usize, kind: LossKind) -> Vec<f64> {
    match kind {
        LossKind::CrossEntropy => {
            // p_y − 1 rounds to 0 once p_y is within an ulp of 1, so the
            // label entry is rebuilt from the other probabilities
            let mut g = softmax(logits);
            g[label] = 0.0;
            g[label] = -g.iter().sum::<f64>();
            g
        }
        LossKind::CarliniWagner { kappa } => {
            let mut g = vec![0.0; logits.len()];
            let wrong = best_wrong(logits, label);
            if logits[label] - logits[wrong] + kappa > 0.0 {
                g[label] = -1.0;
                g[wrong] = 1.0;
            }
            g
        }
    }
}
