use rand::Rng;
use serde::{Deserialize, Serialize};

/// Tabular softmax policy: one row of logits per discrete context, one
/// column per vocabulary token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    vocabulary: Vec<String>,
    num_contexts: usize,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(vocabulary: Vec<String>, num_contexts: usize) -> Self {
        let logits = vec![0.0; vocabulary.len() * num_contexts];
        Self {
            vocabulary,
            num_contexts,
            logits,
        }
    }

    pub fn from_logits(vocabulary: Vec<String>, num_contexts: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), vocabulary.len() * num_contexts, "logit table shape");
        Self {
            vocabulary,
            num_contexts,
            logits,
        }
    }

    /// Random logits in `[-scale, scale)`, for tests and gradient checks.
    pub fn random<R: Rng>(vocabulary: Vec<String>, num_contexts: usize, scale: f64, rng: &mut R) -> Self {
        let n = vocabulary.len() * num_contexts;
        let logits = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Self {
            vocabulary,
            num_contexts,
            logits,
        }
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn num_actions(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, context: usize) -> &[f64] {
        let a = self.num_actions();
        &self.logits[context * a..(context + 1) * a]
    }

    pub fn row_mut(&mut self, context: usize) -> &mut [f64] {
        let a = self.num_actions();
        &mut self.logits[context * a..(context + 1) * a]
    }

    pub fn log_probs(&self, context: usize) -> Vec<f64> {
        log_softmax(self.row(context))
    }

    pub fn probs(&self, context: usize) -> Vec<f64> {
        self.log_probs(context).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, context: usize, action: usize) -> f64 {
        self.log_probs(context)[action]
    }

    /// Gradient descent step: `params -= lr * grad`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        assert_eq!(grad.len(), self.logits.len(), "gradient shape");
        for (p, g) in self.logits.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Exact `KL(p || q)` between two categorical distributions given as log-probs.
pub fn categorical_kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

pub fn categorical_entropy(log_p: &[f64]) -> f64 {
    -log_p.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}
