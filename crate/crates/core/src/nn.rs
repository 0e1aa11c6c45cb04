//! Two-layer perceptron (ReLU extractor + linear classifier) with hand-derived
//! gradients for the cross-entropy task loss and the contrastive alignment loss,
//! plus SGD with momentum and weight decay.
//!
//! All arithmetic is f64. The extractor maps `input_dim -> hidden_dim`, the
//! classifier maps `hidden_dim -> class_count`. Row c of the classifier weight
//! matrix together with `classifier_bias[c]` is the class classifier for c.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

const COSINE_GUARD: f64 = 1e-12;

/// Extractor and classifier parameters; the unit of federation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// hidden_dim x input_dim
    pub extractor_weights: Array2<f64>,
    /// hidden_dim
    pub extractor_bias: Array1<f64>,
    /// class_count x hidden_dim
    pub classifier_weights: Array2<f64>,
    /// class_count
    pub classifier_bias: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, class_count: usize) -> Self {
        Self {
            extractor_weights: Array2::zeros((hidden_dim, input_dim)),
            extractor_bias: Array1::zeros(hidden_dim),
            classifier_weights: Array2::zeros((class_count, hidden_dim)),
            classifier_bias: Array1::zeros(class_count),
        }
    }

    /// Uniform He-style init, deterministic in the supplied rng.
    pub fn random_init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        class_count: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Self::zeros(input_dim, hidden_dim, class_count);
        let bound_ext = (6.0 / (input_dim as f64)).sqrt();
        for v in params.extractor_weights.iter_mut() {
            *v = rng.gen_range(-bound_ext..bound_ext);
        }
        let bound_clf = (6.0 / (hidden_dim as f64)).sqrt();
        for v in params.classifier_weights.iter_mut() {
            *v = rng.gen_range(-bound_clf..bound_clf);
        }
        params
    }

    pub fn input_dim(&self) -> usize {
        self.extractor_weights.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.extractor_weights.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.classifier_weights.nrows()
    }

    pub fn all_finite(&self) -> bool {
        self.extractor_weights.iter().all(|v| v.is_finite())
            && self.extractor_bias.iter().all(|v| v.is_finite())
            && self.classifier_weights.iter().all(|v| v.is_finite())
            && self.classifier_bias.iter().all(|v| v.is_finite())
    }

    /// self += scale * other, elementwise over all four blocks.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        self.extractor_weights.scaled_add(scale, &other.extractor_weights);
        self.extractor_bias.scaled_add(scale, &other.extractor_bias);
        self.classifier_weights.scaled_add(scale, &other.classifier_weights);
        self.classifier_bias.scaled_add(scale, &other.classifier_bias);
    }

    pub fn scale(&mut self, factor: f64) {
        self.extractor_weights *= factor;
        self.extractor_bias *= factor;
        self.classifier_weights *= factor;
        self.classifier_bias *= factor;
    }

    /// Frobenius norm of the extractor blocks only (weights and bias concatenated).
    pub fn extractor_frobenius_distance(&self, other: &ModelParams) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self
            .extractor_weights
            .iter()
            .zip(other.extractor_weights.iter())
        {
            acc += (a - b) * (a - b);
        }
        for (a, b) in self.extractor_bias.iter().zip(other.extractor_bias.iter()) {
            acc += (a - b) * (a - b);
        }
        acc.sqrt()
    }
}

/// Momentum buffers plus the scalar hyperparameters of SGD.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub momentum: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
}

impl OptimizerState {
    pub fn new(shape_like: &ModelParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: ModelParams::zeros(
                shape_like.input_dim(),
                shape_like.hidden_dim(),
                shape_like.class_count(),
            ),
            momentum,
            weight_decay,
            learning_rate,
        }
    }
}

/// Which parameter blocks an SGD step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateMask {
    pub extractor: bool,
    pub classifier: bool,
}

impl UpdateMask {
    pub const EXTRACTOR: UpdateMask = UpdateMask { extractor: true, classifier: false };
    pub const CLASSIFIER: UpdateMask = UpdateMask { extractor: false, classifier: true };
    pub const ALL: UpdateMask = UpdateMask { extractor: true, classifier: true };
}

/// A minibatch of inputs with class labels.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    /// batch_size x input_dim
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "batch rows {} vs labels {}",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_class_labels(labels: &[usize], class_count: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(Error::DimensionMismatch(format!(
            "label {bad} out of range for {class_count} classes"
        )));
    }
    Ok(())
}

/// features = relu(inputs . W_ext^T + b_ext)
pub fn forward_extractor(params: &ModelParams, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    if inputs.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "input columns {} vs input_dim {}",
            inputs.ncols(),
            params.input_dim()
        )));
    }
    let mut pre = inputs.dot(&params.extractor_weights.t());
    pre += &params.extractor_bias;
    pre.mapv_inplace(|v| v.max(0.0));
    Ok(pre)
}

/// logits = features . W_clf^T + b_clf
pub fn forward_classifier(params: &ModelParams, features: &Array2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != params.hidden_dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature columns {} vs hidden_dim {}",
            features.ncols(),
            params.hidden_dim()
        )));
    }
    let mut logits = features.dot(&params.classifier_weights.t());
    logits += &params.classifier_bias;
    Ok(logits)
}

/// Row-wise softmax, numerically stabilized by max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    probs
}

/// Mean cross-entropy over the batch and its gradients.
///
/// Gradients for a frozen block (flag false) are identically zero. At least one
/// flag must be set.
pub fn task_loss_grad(
    params: &ModelParams,
    batch: &FeatureBatch,
    train_extractor: bool,
    train_classifier: bool,
) -> Result<(f64, ModelParams)> {
    if !train_extractor && !train_classifier {
        return Err(Error::DimensionMismatch(
            "task_loss_grad requires at least one trainable block".into(),
        ));
    }
    check_class_labels(&batch.labels, params.class_count())?;
    let batch_size = batch.len() as f64;

    // forward, keeping pre-activation for the ReLU mask
    let mut pre = batch.inputs.dot(&params.extractor_weights.t());
    pre += &params.extractor_bias;
    let features = pre.mapv(|v| v.max(0.0));
    let logits = forward_classifier(params, &features)?;
    let probs = softmax(&logits);

    let mut loss = 0.0;
    for (i, &label) in batch.labels.iter().enumerate() {
        loss -= probs[[i, label]].max(f64::MIN_POSITIVE).ln();
    }
    loss /= batch_size;

    // d loss / d logits = (softmax - onehot) / B
    let mut dlogits = probs;
    for (i, &label) in batch.labels.iter().enumerate() {
        dlogits[[i, label]] -= 1.0;
    }
    dlogits /= batch_size;

    let mut grads = ModelParams::zeros(params.input_dim(), params.hidden_dim(), params.class_count());
    if train_classifier {
        grads.classifier_weights = dlogits.t().dot(&features);
        grads.classifier_bias = dlogits.sum_axis(Axis(0));
    }
    if train_extractor {
        let dfeatures = dlogits.dot(&params.classifier_weights);
        // ReLU subgradient at 0 is 0
        let dpre = &dfeatures * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        grads.extractor_weights = dpre.t().dot(&batch.inputs);
        grads.extractor_bias = dpre.sum_axis(Axis(0));
    }
    Ok((loss, grads))
}

fn cosine_similarity_and_grad(
    feature: &[f64],
    anchor: &[f64],
) -> (f64, Vec<f64>) {
    let dot: f64 = feature.iter().zip(anchor).map(|(a, b)| a * b).sum();
    let norm_f = feature.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_a = anchor.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = (norm_f * norm_a).max(COSINE_GUARD);
    let sim = dot / denom;
    // d sim / d feature = anchor/denom - sim * feature / |feature|^2
    let inv_f2 = if norm_f > COSINE_GUARD { 1.0 / (norm_f * norm_f) } else { 0.0 };
    let grad = feature
        .iter()
        .zip(anchor)
        .map(|(&f, &a)| a / denom - sim * f * inv_f2)
        .collect();
    (sim, grad)
}

/// Contrastive alignment loss against per-class anchors (rows of `anchors`,
/// one per class) and its gradients. Only extractor gradients are produced;
/// anchors are constants within a round.
pub fn alignment_loss_grad(
    params: &ModelParams,
    batch: &FeatureBatch,
    anchors: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, ModelParams)> {
    let class_count = params.class_count();
    if anchors.nrows() != class_count || anchors.ncols() != params.hidden_dim() {
        return Err(Error::DimensionMismatch(format!(
            "anchors {}x{} vs {}x{}",
            anchors.nrows(),
            anchors.ncols(),
            class_count,
            params.hidden_dim()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::DimensionMismatch("temperature must be positive".into()));
    }
    check_class_labels(&batch.labels, class_count)?;
    for (c, row) in anchors.rows().into_iter().enumerate() {
        if row.iter().map(|v| v * v).sum::<f64>().sqrt() <= COSINE_GUARD {
            return Err(Error::DegenerateSimilarity(format!(
                "anchor for class {c} has zero norm"
            )));
        }
    }

    let batch_size = batch.len() as f64;
    let mut pre = batch.inputs.dot(&params.extractor_weights.t());
    pre += &params.extractor_bias;
    let features = pre.mapv(|v| v.max(0.0));
    let anchor_rows: Vec<Vec<f64>> = anchors.rows().into_iter().map(|r| r.to_vec()).collect();

    let mut loss = 0.0;
    let mut dfeatures = Array2::<f64>::zeros(features.raw_dim());
    for (i, &label) in batch.labels.iter().enumerate() {
        let feature: Vec<f64> = features.row(i).to_vec();
        let mut sims = Vec::with_capacity(class_count);
        let mut sim_grads = Vec::with_capacity(class_count);
        for anchor in &anchor_rows {
            let (sim, grad) = cosine_similarity_and_grad(&feature, anchor);
            sims.push(sim / temperature);
            sim_grads.push(grad);
        }
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (exps[label] / sum).ln();

        // d loss_i / d sim_c = (p_c - 1[c=label]) / temperature
        for c in 0..class_count {
            let coeff = (exps[c] / sum - if c == label { 1.0 } else { 0.0 })
                / (temperature * batch_size);
            for (j, g) in sim_grads[c].iter().enumerate() {
                dfeatures[[i, j]] += coeff * g;
            }
        }
    }
    loss /= batch_size;

    let dpre = &dfeatures * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut grads = ModelParams::zeros(params.input_dim(), params.hidden_dim(), class_count);
    grads.extractor_weights = dpre.t().dot(&batch.inputs);
    grads.extractor_bias = dpre.sum_axis(Axis(0));
    Ok((loss, grads))
}

/// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v,
/// applied only to the masked blocks.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    mask: UpdateMask,
) {
    let lr = state.learning_rate;
    let momentum = state.momentum;
    let wd = state.weight_decay;
    let step_block = |param: &mut Array2<f64>, grad: &Array2<f64>, vel: &mut Array2<f64>| {
        azip_block2(param, grad, vel, momentum, wd, lr);
    };
    if mask.extractor {
        step_block(
            &mut params.extractor_weights,
            &grads.extractor_weights,
            &mut state.velocity.extractor_weights,
        );
        azip_block1(
            &mut params.extractor_bias,
            &grads.extractor_bias,
            &mut state.velocity.extractor_bias,
            momentum,
            wd,
            lr,
        );
    }
    if mask.classifier {
        step_block(
            &mut params.classifier_weights,
            &grads.classifier_weights,
            &mut state.velocity.classifier_weights,
        );
        azip_block1(
            &mut params.classifier_bias,
            &grads.classifier_bias,
            &mut state.velocity.classifier_bias,
            momentum,
            wd,
            lr,
        );
    }
}

fn azip_block2(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    vel: &mut Array2<f64>,
    momentum: f64,
    wd: f64,
    lr: f64,
) {
    ndarray::Zip::from(param).and(grad).and(vel).for_each(|p, &g, v| {
        *v = momentum * *v + (g + wd * *p);
        *p -= lr * *v;
    });
}

fn azip_block1(
    param: &mut Array1<f64>,
    grad: &Array1<f64>,
    vel: &mut Array1<f64>,
    momentum: f64,
    wd: f64,
    lr: f64,
) {
    ndarray::Zip::from(param).and(grad).and(vel).for_each(|p, &g, v| {
        *v = momentum * *v + (g + wd * *p);
        *p -= lr * *v;
    });
}
