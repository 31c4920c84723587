//! Model assembly: patch embedder, masked hidden layers, dense classifier.

mod builder;
mod embedder;

pub use builder::{build_model, fc_v1_width, NetworkConfig};
pub use embedder::{EmbedderGeometry, EmbedderGrads, PatchEmbedder};

use crate::error::{Error, Result};
use crate::tensor::{
    adam_step, matmul, matmul_at, matmul_bt, relu_backward, relu_forward, softmax_cross_entropy,
    AdamState, Matrix,
};
use crate::topology::ConnectivityMask;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    G2g,
    FcV1,
    FcV2,
    Er,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingStrategy {
    Index,
    Random,
    Mixer,
}

/// A linear layer whose weight matrix is gated by a connectivity mask.
///
/// Invariant: every inactive position of `weight` (and of both Adam moments)
/// is exactly zero, so the forward/backward hot paths can use plain dense
/// products.
#[derive(Debug, Clone)]
pub struct SparseLinearLayer {
    /// `in_dim × out_dim`; inactive entries exactly 0.
    pub weight: Matrix,
    /// `1 × out_dim`.
    pub bias: Matrix,
    pub mask: ConnectivityMask,
    pub adam_w: AdamState,
    pub adam_b: AdamState,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub grad_x: Matrix,
    pub grad_w: Matrix,
    pub grad_b: Matrix,
}

impl SparseLinearLayer {
    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `x·W + bias`. Valid because the mask invariant keeps inactive
    /// weights at zero, making `W ⊙ mask == W`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        debug_assert!(self.mask.permits(&self.weight));
        let mut y = matmul(x, &self.weight)?;
        crate::tensor::ops_internal::add_bias_rows(&mut y, self.bias.row(0));
        Ok(y)
    }

    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<LayerGrads> {
        let mut grad_w = matmul_at(x, upstream)?;
        self.mask.zero_inactive(&mut grad_w);
        let grad_x = matmul_bt(upstream, &self.weight)?;
        let grad_b = Matrix::from_vec(
            1,
            upstream.cols(),
            crate::tensor::ops_internal::column_sums(upstream),
        )?;
        Ok(LayerGrads {
            grad_x,
            grad_w,
            grad_b,
        })
    }

    pub fn step(&mut self, grads: &LayerGrads) -> Result<()> {
        adam_step(&mut self.weight, &grads.grad_w, &mut self.adam_w, Some(&self.mask))?;
        adam_step(&mut self.bias, &grads.grad_b, &mut self.adam_b, None)
    }

    /// True when no nonzero weight or moment sits on an inactive edge.
    pub fn mask_invariant_holds(&self) -> bool {
        self.mask.permits(&self.weight)
            && self.mask.permits(&self.adam_w.first_moment)
            && self.mask.permits(&self.adam_w.second_moment)
    }
}

/// The unmasked final classifier.
#[derive(Debug, Clone)]
pub struct DenseLinear {
    pub weight: Matrix,
    pub bias: Matrix,
    pub adam_w: AdamState,
    pub adam_b: AdamState,
}

impl DenseLinear {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul(x, &self.weight)?;
        crate::tensor::ops_internal::add_bias_rows(&mut y, self.bias.row(0));
        Ok(y)
    }

    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<LayerGrads> {
        Ok(LayerGrads {
            grad_x: matmul_bt(upstream, &self.weight)?,
            grad_w: matmul_at(x, upstream)?,
            grad_b: Matrix::from_vec(
                1,
                upstream.cols(),
                crate::tensor::ops_internal::column_sums(upstream),
            )?,
        })
    }

    pub fn step(&mut self, grads: &LayerGrads) -> Result<()> {
        adam_step(&mut self.weight, &grads.grad_w, &mut self.adam_w, None)?;
        adam_step(&mut self.bias, &grads.grad_b, &mut self.adam_b, None)
    }
}

/// The assembled model: embedder → masked hidden stack → dense classifier.
#[derive(Debug, Clone)]
pub struct G2GModel {
    pub embedder: PatchEmbedder,
    pub hidden: Vec<SparseLinearLayer>,
    pub classifier: DenseLinear,
    pub kind: ModelKind,
    pub grouping: Option<GroupingStrategy>,
}

/// Activations retained from one forward pass. `post` feeds both the
/// backward pass and the rewiring criterion.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Embedder output (no nonlinearity), `B × embedding_len`.
    pub embedding: Matrix,
    /// Per hidden layer: pre-activation `z`.
    pub pre: Vec<Matrix>,
    /// Per hidden layer: `relu(z)`.
    pub post: Vec<Matrix>,
    pub logits: Matrix,
}

impl G2GModel {
    pub fn class_count(&self) -> usize {
        self.classifier.weight.cols()
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ForwardTrace> {
        let embedding = self.embedder.forward(batch)?;
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut post = Vec::with_capacity(self.hidden.len());
        let mut x = embedding.clone();
        for layer in &self.hidden {
            let z = layer.forward(&x)?;
            let a = relu_forward(&z);
            pre.push(z);
            x = a.clone();
            post.push(a);
        }
        let logits = self.classifier.forward(&x)?;
        Ok(ForwardTrace {
            embedding,
            pre,
            post,
            logits,
        })
    }

    /// Active parameters on the masked path plus everything else.
    pub fn param_counts(&self) -> ParamCounts {
        let masked_active = self.hidden.iter().map(|l| l.mask.active_count()).sum();
        let masked_total = self
            .hidden
            .iter()
            .map(|l| l.mask.rows() * l.mask.cols())
            .sum();
        let biases = self
            .hidden
            .iter()
            .map(|l| l.bias.cols())
            .sum::<usize>()
            + self.classifier.bias.cols()
            + self.embedder.bias.cols();
        ParamCounts {
            masked_active,
            masked_total,
            classifier: self.classifier.weight.rows() * self.classifier.weight.cols(),
            embedder: self.embedder.weight_param_count(),
            biases,
        }
    }

    /// JSON description: shapes, densities, grouping, parameter counts.
    pub fn describe(&self) -> serde_json::Value {
        let layers: Vec<serde_json::Value> = self
            .hidden
            .iter()
            .map(|l| {
                let stats = crate::topology::mask_stats(&l.mask);
                serde_json::json!({
                    "in_dim": l.in_dim(),
                    "out_dim": l.out_dim(),
                    "active": stats.active_count,
                    "density": stats.density,
                    "per_block_density": stats.per_block,
                })
            })
            .collect();
        let counts = self.param_counts();
        serde_json::json!({
            "kind": self.kind,
            "grouping": self.grouping,
            "embedder": self.embedder.geom,
            "hidden_layers": layers,
            "classifier": {
                "in_dim": self.classifier.weight.rows(),
                "out_dim": self.classifier.weight.cols(),
            },
            "params": counts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Active weights across the masked hidden matrices.
    pub masked_active: usize,
    /// Dense size of those matrices.
    pub masked_total: usize,
    pub classifier: usize,
    pub embedder: usize,
    pub biases: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f32,
    pub accuracy: f32,
    pub trace: ForwardTrace,
}

/// One optimizer step: forward, softmax cross-entropy, full backward through
/// classifier, hidden stack and embedder, then one Adam update per tensor.
///
/// A non-finite loss aborts before any parameter is touched.
pub fn train_step(model: &mut G2GModel, batch: &Matrix, labels: &[usize]) -> Result<StepOutput> {
    let trace = model.forward(batch)?;
    let ce = softmax_cross_entropy(&trace.logits, labels)?;
    if !ce.loss.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            loss: ce.loss,
        });
    }

    let last_post = trace.post.last().expect("model has hidden layers");
    let cls_grads = model.classifier.backward(last_post, &ce.grad_logits)?;

    let mut upstream = cls_grads.grad_x.clone();
    let mut layer_grads: Vec<LayerGrads> = Vec::with_capacity(model.hidden.len());
    for l in (0..model.hidden.len()).rev() {
        let gz = relu_backward(&trace.pre[l], &upstream)?;
        let x = if l == 0 {
            &trace.embedding
        } else {
            &trace.post[l - 1]
        };
        let grads = model.hidden[l].backward(x, &gz)?;
        upstream = grads.grad_x.clone();
        layer_grads.push(grads);
    }
    layer_grads.reverse();

    let emb_grads = model.embedder.backward(batch, &upstream)?;

    model.classifier.step(&cls_grads)?;
    for (layer, grads) in model.hidden.iter_mut().zip(&layer_grads) {
        layer.step(grads)?;
    }
    model.embedder.step(&emb_grads)?;

    Ok(StepOutput {
        loss: ce.loss,
        accuracy: ce.correct as f32 / labels.len() as f32,
        trace,
    })
}

/// Classification accuracy of `model` over `(images, labels)` evaluated in
/// chunks of `batch_size`.
pub fn evaluate(
    model: &G2GModel,
    images: &Matrix,
    labels: &[usize],
    batch_size: usize,
) -> Result<f32> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let n = images.rows();
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let rows = end - start;
        let mut chunk = Matrix::zeros(rows, images.cols());
        for r in 0..rows {
            chunk.row_mut(r).copy_from_slice(images.row(start + r));
        }
        let trace = model.forward(&chunk)?;
        for r in 0..rows {
            let row = trace.logits.row(r);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if argmax == labels[start + r] {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f32 / n as f32)
}
