//! A stack of SMoE layers followed by a dense task head, with batch loss and
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Rng};
use crate::smoe::{phi_regularization_loss, smoe_backward_accumulate, smoe_forward, LayerGradients, RoutingDecision, SmoeLayerParams};

/// Prediction, per-layer inputs and per-layer routing decisions.
pub type ForwardTrace = (Vec<f64>, Vec<Vec<f64>>, Vec<RoutingDecision>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Mean of `½‖ŷ − y‖²`.
    Regression,
    /// Softmax cross-entropy; targets are one-hot.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]

pub struct ModelParams {
    pub layers: Vec<SmoeLayerParams>,
    /// `out × l_last`
    pub head: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGradients {
    pub layers: Vec<LayerGradients>,
    pub head: Matrix,
}

impl ModelGradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self {
            layers: p.layers.iter().map(LayerGradients::zeros_like).collect(),
            head: Matrix::zeros(p.head.rows(), p.head.cols()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.layers.iter_mut().for_each(|l| l.scale(s));
        self.head.scale(s);
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(LayerGradients::is_finite) && self.head.is_finite()
    }
}

/// Shape of a model stack: layer 0 maps `d → l`, later layers `l → l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub num_layers: usize,
    pub num_experts: usize,
    pub rank: usize,
    pub alpha: f64,
}

/// Routing and loss summary of one batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    /// Mean task loss (without regularization).
    pub loss: f64,
    pub grads: ModelGradients,
    /// `[layer][expert]` activation counts over the batch.
    pub activation_counts: Vec<Vec<u64>>,
    pub tokens: u64,
    /// Largest `|Σγ − 1|` over every routing decision in the batch.
    pub max_gate_error: f64,
}

impl BatchOutcome {
    /// Experts activated by at least one token, per layer.
    pub fn coverage(&self) -> Vec<Vec<bool>> {
        self.activation_counts
            .iter()
            .map(|c| c.iter().map(|&n| n > 0).collect())
            .collect()
    }
}

impl ModelParams {
    pub fn init(dims: &StackDims, router_std: f64, rng: &mut Rng) -> Result<Self> {
        if dims.num_layers == 0 {
            return Err(Error::Config("model needs at least one SMoE layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.num_layers);
        for li in 0..dims.num_layers {
            let d_in = if li == 0 { dims.input_dim } else { dims.hidden_dim };
            layers.push(SmoeLayerParams::init(
                d_in,
                dims.hidden_dim,
                dims.num_experts,
                dims.rank,
                dims.alpha,
                router_std,
                li,
                rng,
            )?);
        }
        let std = 1.0 / (dims.hidden_dim as f64).sqrt();
        let head = Matrix::random_normal(dims.output_dim, dims.hidden_dim, std, rng);
        let p = Self { layers, head };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::dim("ModelParams layer chain", w[0].output_dim(), w[1].input_dim()));
            }
        }
        for l in &self.layers {
            l.validate()?;
        }
        let last = self.layers.last().ok_or_else(|| Error::Config("empty layer stack".into()))?;
        if self.head.cols() != last.output_dim() {
            return Err(Error::dim("ModelParams head", last.output_dim(), self.head.cols()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head.rows()
    }

    pub fn num_experts(&self) -> usize {
        self.layers[0].num_experts()
    }

    /// Runs the stack on one input, returning the prediction, the per-layer
    /// inputs and the routing decisions.
    pub fn forward(&self, x: &[f64], k_c: usize, n_p: usize) -> Result<ForwardTrace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut decisions = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let (y, d) = smoe_forward(layer, &h, k_c, n_p)?;
            inputs.push(std::mem::replace(&mut h, y));
            decisions.push(d);
        }
        let out = self.head.matvec(&h)?;
        inputs.push(h);
        Ok((out, inputs, decisions))
    }

    pub fn predict(&self, x: &[f64], k_c: usize, n_p: usize) -> Result<Vec<f64>> {
        Ok(self.forward(x, k_c, n_p)?.0)
    }

    /// Mean task loss and gradients over a batch of `(x, y)` pairs.
    pub fn loss_and_grad(&self, batch: &[(&[f64], &[f64])], kind: TaskKind, k_c: usize, n_p: usize) -> Result<BatchOutcome> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let m = self.num_experts();
        let mut grads = ModelGradients::zeros_like(self);
        let mut counts = vec![vec![0u64; m]; self.layers.len()];
        let mut max_gate_error = 0.0f64;
        let mut total = 0.0;
        for (x, y) in batch {
            let (out, inputs, decisions) = self.forward(x, k_c, n_p)?;
            let (loss, mut g) = sample_loss(&out, y, kind)?;
            total += loss;
            for (c, d) in counts.iter_mut().zip(&decisions) {
                for &i in &d.activation_set {
                    c[i] += 1;
                }
                max_gate_error = max_gate_error.max((d.gate_sum() - 1.0).abs());
            }
            let h_last = inputs.last().expect("head input recorded");
            grads.head.add_outer(1.0, &g, h_last)?;
            g = self.head.tmatvec(&g)?;
            for li in (0..self.layers.len()).rev() {
                g = smoe_backward_accumulate(&self.layers[li], &inputs[li], &decisions[li], &g, &mut grads.layers[li])?;
            }
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        Ok(BatchOutcome {
            loss: total / n,
            grads,
            activation_counts: counts,
            tokens: batch.len() as u64,
            max_gate_error,
        })
    }

    /// Mean task loss with no gradient work.
    pub fn eval_loss(&self, samples: &[(&[f64], &[f64])], kind: TaskKind, k_c: usize, n_p: usize) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty evaluation set".into()));
        }
        let mut total = 0.0;
        for (x, y) in samples {
            let out = self.predict(x, k_c, n_p)?;
            total += sample_loss(&out, y, kind)?.0;
        }
        Ok(total / samples.len() as f64)
    }

    /// Adds the φ range penalty to `grads`, returning its value.
    pub fn add_phi_regularization(&self, grads: &mut ModelGradients, phi_min: f64, phi_max: f64, lambda: f64) -> f64 {
        let mut total = 0.0;
        for (layer, lg) in self.layers.iter().zip(&mut grads.layers) {
            let (loss, g) = phi_regularization_loss(&layer.phi, phi_min, phi_max, lambda);
            total += loss;
            for (a, b) in lg.phi.iter_mut().zip(g) {
                *a += b;
            }
        }
        total
    }

    /// Plain SGD step on every trainable tensor; frozen bases are untouched.
    pub fn sgd_step(&mut self, grads: &ModelGradients, eta: f64, train_phi: bool) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::dim("sgd_step", self.layers.len(), grads.layers.len()));
        }
        for (layer, lg) in self.layers.iter_mut().zip(&grads.layers) {
            if lg.experts.len() != layer.experts.len() {
                return Err(Error::dim("sgd_step experts", layer.experts.len(), lg.experts.len()));
            }
            for (e, g) in layer.experts.iter_mut().zip(&lg.experts) {
                e.adapter.b.axpy(-eta, &g.b)?;
                e.adapter.a.axpy(-eta, &g.a)?;
            }
            layer.router_w.axpy(-eta, &lg.router)?;
            if train_phi {
                for (p, g) in layer.phi.iter_mut().zip(&lg.phi) {
                    *p -= eta * g;
                }
            }
        }
        self.head.axpy(-eta, &grads.head)?;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.head.is_finite()
            && self.layers.iter().all(|l| {
                l.router_w.is_finite()
                    && l.phi.iter().all(|v| v.is_finite())
                    && l.experts.iter().all(|e| e.adapter.a.is_finite() && e.adapter.b.is_finite())
            })
    }
}

/// Loss of one prediction and its gradient with respect to the prediction.
pub fn sample_loss(out: &[f64], target: &[f64], kind: TaskKind) -> Result<(f64, Vec<f64>)> {
    if out.len() != target.len() {
        return Err(Error::dim("sample_loss", out.len(), target.len()));
    }
    match kind {
        TaskKind::Regression => {
            let diff: Vec<f64> = out.iter().zip(target).map(|(o, t)| o - t).collect();
            let loss = 0.5 * diff.iter().map(|v| v * v).sum::<f64>();
            Ok((loss, diff))
        }
        TaskKind::Classification => {
            let p = softmax(out)?;
            let label = target
                .iter()
                .position(|&t| t == 1.0)
                .ok_or_else(|| Error::InvalidInput("classification target is not one-hot".into()))?;
            let loss = -p[label].max(f64::MIN_POSITIVE).ln();
            let grad = p.iter().zip(target).map(|(pi, ti)| pi - ti).collect();
            Ok((loss, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> StackDims {
        StackDims {
            input_dim: 4,
            hidden_dim: 3,
            output_dim: 2,
            num_layers: 2,
            num_experts: 4,
            rank: 2,
            alpha: 2.0,
        }
    }

    #[test]
    fn init_shapes_chain() {
        let mut rng = Rng::new(3);
        let p = ModelParams::init(&dims(), 0.5, &mut rng).unwrap();
        assert_eq!(p.layers[0].input_dim(), 4);
        assert_eq!(p.layers[1].input_dim(), 3);
        assert_eq!(p.head.shape(), (2, 3));
        assert!(p.layers.iter().all(|l| l.experts.iter().all(|e| e.adapter.b.is_zero())));
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let mut p = ModelParams::init(&dims(), 0.8, &mut rng).unwrap();
        for l in &mut p.layers {
            for e in &mut l.experts {
                e.adapter.b = Matrix::random_normal(e.adapter.b.rows(), e.adapter.b.cols(), 0.4, &mut rng);
            }
        }
        let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let ys: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.normal()).collect()).collect();
        let batch: Vec<(&[f64], &[f64])> = xs.iter().zip(&ys).map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
        let out = p.loss_and_grad(&batch, TaskKind::Regression, 2, 3).unwrap();

        // head entries and router entries of layer 1 via central differences;
        // routing must not flip at this step size for the test to be valid
        let h = 1e-6;
        for (i, j) in [(0, 0), (1, 2)] {
            let mut up = p.clone();
            let mut dn = p.clone();
            up.head.set(i, j, p.head.get(i, j) + h);
            dn.head.set(i, j, p.head.get(i, j) - h);
            let fd = (up.eval_loss(&batch, TaskKind::Regression, 2, 3).unwrap() - dn.eval_loss(&batch, TaskKind::Regression, 2, 3).unwrap()) / (2.0 * h);
            assert!((fd - out.grads.head.get(i, j)).abs() < 1e-6);
        }
        let mut up = p.clone();
        let mut dn = p.clone();
        let v = p.layers[0].experts[1].adapter.b.get(1, 0);
        up.layers[0].experts[1].adapter.b.set(1, 0, v + h);
        dn.layers[0].experts[1].adapter.b.set(1, 0, v - h);
        let fd = (up.eval_loss(&batch, TaskKind::Regression, 2, 3).unwrap() - dn.eval_loss(&batch, TaskKind::Regression, 2, 3).unwrap()) / (2.0 * h);
        assert!((fd - out.grads.layers[0].experts[1].b.get(1, 0)).abs() < 1e-6);
    }

    #[test]
    fn counts_cover_k_per_token() {
        let mut rng = Rng::new(2);
        let p = ModelParams::init(&dims(), 1.0, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let y = vec![0.0, 0.0];
        let batch: Vec<(&[f64], &[f64])> = xs.iter().map(|x| (x.as_slice(), y.as_slice())).collect();
        let out = p.loss_and_grad(&batch, TaskKind::Regression, 2, 2).unwrap();
        for c in &out.activation_counts {
            assert_eq!(c.iter().sum::<u64>(), 5 * 2);
        }
        assert!(out.max_gate_error < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient() {
        let (l, g) = sample_loss(&[0.0, 0.0], &[1.0, 0.0], TaskKind::Classification).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        assert!(sample_loss(&[0.0, 0.0], &[0.5, 0.5], TaskKind::Classification).is_err());
    }
}
