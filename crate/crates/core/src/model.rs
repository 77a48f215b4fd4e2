//! Fully connected ReLU network with softmax cross-entropy, hand-written
//! backpropagation and momentum SGD.
//!
//! Parameters live in one flat buffer so that federated aggregation is plain
//! vector arithmetic. Layer `l` occupies `W_l` (fan_out × fan_in, row-major)
//! followed by its bias `b_l`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::scalar::Scalar;
use crate::seed::{rng_from, stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[d, h1, ..., S]`
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(invalid(
                "a model needs at least an input and an output width",
            ));
        }
        if self.widths.contains(&0) {
            return Err(invalid(format!(
                "layer widths must be positive: {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights<T> {
    widths: Vec<usize>,
    params: Vec<T>,
}

impl<T: Scalar> Weights<T> {
    pub fn zeros(widths: &[usize]) -> Self {
        let p = ModelSpec {
            widths: widths.to_vec(),
            seed: 0,
        }
        .param_count();
        Self {
            widths: widths.to_vec(),
            params: vec![T::zero(); p],
        }
    }

    pub fn from_params(widths: &[usize], params: Vec<T>) -> Result<Self> {
        let w = Self::zeros(widths);
        if w.params.len() != params.len() {
            return Err(Error::DimensionMismatch {
                context: "weight buffer",
                expected: w.params.len(),
                found: params.len(),
            });
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    /// Offsets of `(W_l, b_l)` in the flat buffer.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    pub fn layer(&self, l: usize) -> (&[T], &[T]) {
        let (w, b) = self.layer_offsets(l);
        let out = self.widths[l + 1];
        (&self.params[w..b], &self.params[b..b + out])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.widths == other.widths
    }

    /// Raw logits for every row of `x`.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        let mut acts = Activations::new(&self.widths);
        for (i, row) in x.row_iter().enumerate() {
            self.forward(row, &mut acts)?;
            out.row_mut(i).copy_from_slice(acts.logits());
        }
        Ok(out)
    }

    fn forward(&self, x: &[T], acts: &mut Activations<T>) -> Result<()> {
        acts.layers[0].copy_from_slice(x);
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let fan_in = self.widths[l];
            let (before, after) = acts.layers.split_at_mut(l + 1);
            let input = &before[l];
            let z = &mut after[0];
            for (k, zk) in z.iter_mut().enumerate() {
                let row = &w[k * fan_in..(k + 1) * fan_in];
                let mut s = b[k];
                for (&wi, &xi) in row.iter().zip(input.iter()) {
                    s += wi * xi;
                }
                if !s.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("activation in layer {l}"),
                    });
                }
                *zk = if l < last { s.max(T::zero()) } else { s };
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let layers = (0..self.num_layers())
            .map(|l| {
                let (w, b) = self.layer(l);
                CheckpointLayer {
                    rows: self.widths[l + 1],
                    cols: self.widths[l],
                    weights: w.iter().map(|v| v.as_f64()).collect(),
                    bias: b.iter().map(|v| v.as_f64()).collect(),
                }
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            widths: self.widths.clone(),
            layers,
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        if c.layers.len() + 1 != c.widths.len() {
            return Err(Error::Format("layer count does not match widths".into()));
        }
        let mut params = Vec::new();
        for (l, layer) in c.layers.iter().enumerate() {
            let (cols, rows) = (c.widths[l], c.widths[l + 1]);
            if layer.rows != rows
                || layer.cols != cols
                || layer.weights.len() != rows * cols
                || layer.bias.len() != rows
            {
                return Err(Error::Format(format!("layer {l} has inconsistent shape")));
            }
            params.extend(layer.weights.iter().map(|&v| T::lit(v)));
            params.extend(layer.bias.iter().map(|&v| T::lit(v)));
        }
        Self::from_params(&c.widths, params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "distillfed-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON weight checkpoint: layer shapes plus row-major coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

struct Activations<T> {
    /// `layers[0]` is the input; `layers[l]` is the output of layer `l - 1`.
    layers: Vec<Vec<T>>,
}

impl<T: Scalar> Activations<T> {
    fn new(widths: &[usize]) -> Self {
        Self {
            layers: widths.iter().map(|&w| vec![T::zero(); w]).collect(),
        }
    }

    fn logits(&self) -> &[T] {
        self.layers.last().expect("nonempty")
    }
}

/// He-initialized weights (`N(0, 2/fan_in)`), zero biases.
pub fn mlp_init<T: Scalar>(spec: &ModelSpec) -> Result<Weights<T>> {
    spec.validate()?;
    let mut w = Weights::zeros(&spec.widths);
    let mut rng = rng_from(spec.seed, &[stream::MODEL_INIT]);
    for l in 0..w.num_layers() {
        let fan_in = spec.widths[l];
        let std = (2.0 / fan_in as f64).sqrt();
        let (start, bias) = w.layer_offsets(l);
        for p in &mut w.params[start..bias] {
            *p = T::lit(std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(w)
}

/// Optional per-step additions to the plain cross-entropy objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct Regularizer<'a, T> {
    /// FedProx: `(μ/2)‖w − anchor‖²` added to the loss.
    pub prox: Option<(f64, &'a Weights<T>)>,
    /// SCAFFOLD: `c − c_k`, added to every stochastic gradient.
    pub correction: Option<&'a [T]>,
}

impl<'a, T> Regularizer<'a, T> {
    pub fn none() -> Self {
        Self {
            prox: None,
            correction: None,
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient.
///
/// Labels may be soft; each row is a distribution over classes.
pub fn loss_grad<T: Scalar>(
    weights: &Weights<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    reg: &Regularizer<'_, T>,
) -> Result<(T, Vec<T>)> {
    let mut grad = vec![T::zero(); weights.param_count()];
    let rows: Vec<usize> = (0..x.rows()).collect();
    let loss = accumulate_batch(weights, x, y, &rows, &mut grad)?;
    let loss = apply_regularizer(weights, loss, &mut grad, reg)?;
    Ok((loss, grad))
}

fn apply_regularizer<T: Scalar>(
    weights: &Weights<T>,
    mut loss: T,
    grad: &mut [T],
    reg: &Regularizer<'_, T>,
) -> Result<T> {
    if let Some((mu, anchor)) = reg.prox {
        if !weights.same_shape(anchor) {
            return Err(invalid("prox anchor shape differs from the model"));
        }
        if mu != 0.0 {
            let mu = T::lit(mu);
            let mut sq = T::zero();
            for ((g, &w), &a) in grad.iter_mut().zip(&weights.params).zip(&anchor.params) {
                let d = w - a;
                *g += mu * d;
                sq += d * d;
            }
            loss += T::lit(0.5) * mu * sq;
        }
    }
    if let Some(c) = reg.correction {
        if c.len() != grad.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient correction",
                expected: grad.len(),
                found: c.len(),
            });
        }
        for (g, &ci) in grad.iter_mut().zip(c) {
            *g += ci;
        }
    }
    Ok(loss)
}

/// Adds the batch-mean gradient over `rows` into `grad`; returns the mean loss.
fn accumulate_batch<T: Scalar>(
    weights: &Weights<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    rows: &[usize],
    grad: &mut [T],
) -> Result<T> {
    if x.cols() != weights.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "model input",
            expected: weights.input_dim(),
            found: x.cols(),
        });
    }
    if y.cols() != weights.output_dim() || y.rows() != x.rows() {
        return Err(Error::DimensionMismatch {
            context: "model targets",
            expected: weights.output_dim(),
            found: y.cols(),
        });
    }
    if rows.is_empty() {
        return Err(invalid("empty batch"));
    }
    let inv_b = T::one() / T::lit(rows.len() as f64);
    let widths = weights.widths();
    let nl = weights.num_layers();
    let mut acts = Activations::new(widths);
    let mut deltas: Vec<Vec<T>> = widths[1..].iter().map(|&w| vec![T::zero(); w]).collect();
    let mut loss = T::zero();

    for &r in rows {
        weights.forward(x.row(r), &mut acts)?;
        let logits = acts.logits();
        let target = y.row(r);
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        let out = &mut deltas[nl - 1];
        for ((o, &z), &t) in out.iter_mut().zip(logits).zip(target) {
            let logp = z - lse;
            loss -= t * logp;
            *o = (logp.exp() - t) * inv_b;
        }

        for l in (0..nl).rev() {
            let fan_in = widths[l];
            let (w_off, b_off) = weights.layer_offsets(l);
            let input = &acts.layers[l];
            {
                let delta = &deltas[l];
                for (k, &dk) in delta.iter().enumerate() {
                    if dk == T::zero() {
                        continue;
                    }
                    let gw = &mut grad[w_off + k * fan_in..w_off + (k + 1) * fan_in];
                    for (g, &a) in gw.iter_mut().zip(input.iter()) {
                        *g += dk * a;
                    }
                    grad[b_off + k] += dk;
                }
            }
            if l > 0 {
                let (w, _) = weights.layer(l);
                let (lower, upper) = deltas.split_at_mut(l);
                let prev = &mut lower[l - 1];
                let delta = &upper[0];
                for (j, p) in prev.iter_mut().enumerate() {
                    // ReLU derivative, zero at the kink
                    if input[j] > T::zero() {
                        let mut s = T::zero();
                        for (k, &dk) in delta.iter().enumerate() {
                            s += w[k * fan_in + j] * dk;
                        }
                        *p = s;
                    } else {
                        *p = T::zero();
                    }
                }
            }
        }
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "cross-entropy loss".into(),
        });
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    50
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64) -> Self {
        Self {
            epochs,
            lr,
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T> {
    pub weights: Weights<T>,
    /// Mean minibatch loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Optimizer steps taken.
    pub steps: usize,
}

/// Momentum SGD (`v ← βv + g`, `w ← w − ηv`) with a fresh seeded shuffle
/// every epoch.
pub fn sgd_train<T: Scalar>(
    weights: &Weights<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
    cfg: &TrainConfig,
    reg: &Regularizer<'_, T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if x.rows() == 0 {
        return Err(invalid("cannot train on an empty dataset"));
    }
    let mut w = weights.clone();
    let mut velocity = vec![T::zero(); w.param_count()];
    let mut grad = vec![T::zero(); w.param_count()];
    let lr = T::lit(cfg.lr);
    let beta = T::lit(cfg.momentum);
    let mut rng = rng_from(cfg.seed, &[stream::LOCAL_TRAIN]);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = T::zero());
            let loss = accumulate_batch(&w, x, y, chunk, &mut grad)?;
            let loss = apply_regularizer(&w, loss, &mut grad, reg)?;
            for ((p, v), &g) in w.params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = beta * *v + g;
                *p -= lr * *v;
            }
            total += loss.as_f64();
            batches += 1;
            steps += 1;
        }
        trace.push(total / batches as f64);
    }
    if !w.is_finite() {
        return Err(Error::NonFinite {
            context: "weights after training".into(),
        });
    }
    Ok(TrainOutcome {
        weights: w,
        loss_trace: trace,
        steps,
    })
}

/// Exact fraction of rows whose argmax logit equals the label.
pub fn evaluate<T: Scalar>(weights: &Weights<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let logits = weights.predict(data.features())?;
    let hits = logits
        .row_iter()
        .zip(data.labels())
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: &[usize], seed: u64) -> ModelSpec {
        ModelSpec {
            widths: widths.to_vec(),
            seed,
        }
    }

    #[test]
    fn param_count_matches_shapes() {
        assert_eq!(spec(&[4, 3, 2], 0).param_count(), 23);
        let w: Weights<f64> = mlp_init(&spec(&[4, 3, 2], 0)).unwrap();
        assert_eq!(w.param_count(), 23);
        assert_eq!(
            mlp_init::<f64>(&spec(&[4, 3, 2], 9)).unwrap(),
            mlp_init(&spec(&[4, 3, 2], 9)).unwrap()
        );
    }

    #[test]
    fn equal_logits_give_log_s() {
        let w = Weights::<f64>::zeros(&[3, 5]);
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let y = crate::data::one_hot(&[2], 5);
        let (loss, _) = loss_grad(&w, &x, &y, &Regularizer::none()).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_mu_prox_is_bitwise_plain() {
        let w: Weights<f64> = mlp_init(&spec(&[3, 4, 2], 1)).unwrap();
        let anchor: Weights<f64> = mlp_init(&spec(&[3, 4, 2], 2)).unwrap();
        let x = Matrix::from_rows(&[[0.1, -0.2, 0.3], [1.0, 0.5, -0.5]]).unwrap();
        let y = crate::data::one_hot(&[0, 1], 2);
        let plain = loss_grad(&w, &x, &y, &Regularizer::none()).unwrap();
        let prox = loss_grad(
            &w,
            &x,
            &y,
            &Regularizer {
                prox: Some((0.0, &anchor)),
                correction: None,
            },
        )
        .unwrap();
        assert_eq!(plain.0.to_bits(), prox.0.to_bits());
        assert!(plain
            .1
            .iter()
            .zip(&prox.1)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_lr_leaves_weights() {
        let w: Weights<f64> = mlp_init(&spec(&[2, 4, 2], 3)).unwrap();
        let x = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let y = crate::data::one_hot(&[0, 1], 2);
        let out = sgd_train(&w, &x, &y, &TrainConfig::new(3, 0.0), &Regularizer::none()).unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.steps, 3);
    }

    #[test]
    fn memorizes_a_single_point() {
        let w: Weights<f64> = mlp_init(&spec(&[3, 8, 4], 4)).unwrap();
        let x = Matrix::from_rows(&[[0.5, -0.2, 0.9]]).unwrap();
        let d = Dataset::new(x.clone(), vec![2], 4).unwrap();
        let out = sgd_train(
            &w,
            &x,
            &d.one_hot(),
            &TrainConfig::new(500, 0.1),
            &Regularizer::none(),
        )
        .unwrap();
        assert!(*out.loss_trace.last().unwrap() < 1e-3);
        assert_eq!(evaluate(&out.weights, &d).unwrap(), 1.0);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let w = Weights::<f64>::zeros(&[2, 2]);
        let d = Dataset::new(Matrix::zeros(0, 2), vec![], 2).unwrap();
        assert!(evaluate(&w, &d).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let w: Weights<f64> = mlp_init(&spec(&[5, 7, 3], 11)).unwrap();
        let back = Weights::<f64>::from_json(&w.to_json().unwrap()).unwrap();
        assert!(w
            .params()
            .iter()
            .zip(back.params())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.widths(), w.widths());
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let w: Weights<f64> = mlp_init(&spec(&[2, 2], 0)).unwrap();
        let mut c = w.to_checkpoint();
        c.layers[0].bias.pop();
        assert!(Weights::<f64>::from_checkpoint(&c).is_err());
        let mut c = w.to_checkpoint();
        c.version = 99;
        assert!(Weights::<f64>::from_checkpoint(&c).is_err());
    }
}
