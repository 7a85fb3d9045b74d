use super::log_sum_exp;

/// Multiclass logistic regression: `scores = W x + b`, softmax cross-entropy.
///
/// Parameter layout: `W` row-major (`classes x features`), then `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub features: usize,
    pub classes: usize,
    pub weight_decay: f64,
}

impl LogisticModel {
    pub fn new(features: usize, classes: usize, weight_decay: f64) -> Self {
        LogisticModel {
            features,
            classes,
            weight_decay,
        }
    }

    pub fn dim(&self) -> usize {
        self.classes * self.features + self.classes
    }

    pub(crate) fn scores(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let p = self.features;
        let bias = &params[self.classes * p..];
        (0..self.classes)
            .map(|c| {
                let w = &params[c * p..(c + 1) * p];
                w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[c]
            })
            .collect()
    }

    pub(crate) fn sample_loss(&self, params: &[f64], x: &[f64], y: usize) -> f64 {
        let z = self.scores(params, x);
        log_sum_exp(&z) - z[y]
    }

    /// Adds this sample's gradient to `grad`; returns its loss.
    pub(crate) fn sample_loss_grad(&self, params: &[f64], x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let p = self.features;
        let mut z = self.scores(params, x);
        let lse = log_sum_exp(&z);
        let loss = lse - z[y];
        for (c, zc) in z.iter_mut().enumerate() {
            let g = (*zc - lse).exp() - if c == y { 1.0 } else { 0.0 };
            for (gw, xi) in grad[c * p..(c + 1) * p].iter_mut().zip(x) {
                *gw += g * xi;
            }
            grad[self.classes * p + c] += g;
        }
        loss
    }

    /// Upper bound on the loss curvature: softmax cross-entropy has Hessian
    /// `≼ ½ mean ||[x; 1]||² I`, plus weight decay.
    pub fn smoothness_bound(&self, shard: &super::DataShard) -> f64 {
        if shard.is_empty() {
            return self.weight_decay;
        }
        let total: f64 = (0..shard.len())
            .map(|i| 1.0 + shard.row(i).iter().map(|v| v * v).sum::<f64>())
            .sum();
        0.5 * total / shard.len() as f64 + self.weight_decay
    }
}
