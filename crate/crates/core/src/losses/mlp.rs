use super::log_sum_exp;

/// One hidden ReLU layer followed by a softmax cross-entropy output.
///
/// Parameter layout: `W1` (`hidden x features`), `b1`, `W2`
/// (`classes x hidden`), `b2`, all row-major and concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
    pub weight_decay: f64,
}

pub(crate) struct Scratch {
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl MlpModel {
    pub fn new(features: usize, hidden: usize, classes: usize, weight_decay: f64) -> Self {
        MlpModel {
            features,
            hidden,
            classes,
            weight_decay,
        }
    }

    pub fn dim(&self) -> usize {
        self.hidden * self.features + self.hidden + self.classes * self.hidden + self.classes
    }

    pub(crate) fn scratch(&self) -> Scratch {
        Scratch {
            pre: vec![0.0; self.hidden],
            act: vec![0.0; self.hidden],
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.features;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.classes * self.hidden;
        (w1, b1, w2)
    }

    pub(crate) fn scores(&self, params: &[f64], x: &[f64], s: &mut Scratch) -> Vec<f64> {
        let (p, h) = (self.features, self.hidden);
        let (o_b1, o_w2, o_b2) = self.offsets();
        for j in 0..h {
            let w = &params[j * p..(j + 1) * p];
            let a = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + params[o_b1 + j];
            s.pre[j] = a;
            s.act[j] = a.max(0.0);
        }
        (0..self.classes)
            .map(|c| {
                let w = &params[o_w2 + c * h..o_w2 + (c + 1) * h];
                w.iter().zip(&s.act).map(|(a, b)| a * b).sum::<f64>() + params[o_b2 + c]
            })
            .collect()
    }

    pub(crate) fn sample_loss(&self, params: &[f64], x: &[f64], y: usize, s: &mut Scratch) -> f64 {
        let z = self.scores(params, x, s);
        log_sum_exp(&z) - z[y]
    }

    pub(crate) fn sample_loss_grad(
        &self,
        params: &[f64],
        x: &[f64],
        y: usize,
        grad: &mut [f64],
        s: &mut Scratch,
    ) -> f64 {
        let (p, h) = (self.features, self.hidden);
        let (o_b1, o_w2, o_b2) = self.offsets();
        let z = self.scores(params, x, s);
        let lse = log_sum_exp(&z);
        let loss = lse - z[y];

        let mut back = vec![0.0; h];
        for (c, zc) in z.iter().enumerate() {
            let g = (zc - lse).exp() - if c == y { 1.0 } else { 0.0 };
            let row = o_w2 + c * h;
            for j in 0..h {
                grad[row + j] += g * s.act[j];
                back[j] += g * params[row + j];
            }
            grad[o_b2 + c] += g;
        }
        for j in 0..h {
            if s.pre[j] <= 0.0 {
                continue;
            }
            let g = back[j];
            for (gw, xi) in grad[j * p..(j + 1) * p].iter_mut().zip(x) {
                *gw += g * xi;
            }
            grad[o_b1 + j] += g;
        }
        loss
    }
}
