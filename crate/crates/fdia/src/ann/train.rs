//! Training: mini-batch Adam on the measurement-residual loss, with
//! gradients flowing analytically through the network and through the
//! measurement function itself.
//!
//! The residual loss is badly conditioned (meters with near-zero nominal
//! readings carry very large weights), which stalls plain momentum
//! descent; per-parameter step adaptation recovers it while staying
//! dependency-free and bit-reproducible.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::model::AnnModel;
use crate::error::{Error, Result};
use crate::grid::admittance::AdmittanceMatrix;
use crate::grid::measurement::{eval_h_into, eval_h_jacobian_into, MeasurementModel};
use crate::grid::state::StateVector;
use crate::powerflow::{Dataset, Split};

/// Which loss drives the descent.
///
/// `Wls` is the mean weighted residual of the predicted state against
/// the input measurements. `WlsPlusMse` adds a state-error penalty with
/// balance constant `c`; the penalty is measured in normalized state
/// units so both terms share a scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Wls,
    WlsPlusMse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub loss_kind: LossKind,
    pub c: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            loss_kind: LossKind::Wls,
            c: 100.0,
            epochs: 1500,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c < 0.0 {
            return Err(Error::Config("penalty constant c must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
}

/// Mean weighted residual over a batch of (measurement, predicted state)
/// pairs: `(1/N) sum (z - h(x))^T W (z - h(x))`.
pub fn loss_wls(
    batch: &[(&DVector<f64>, &StateVector)],
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
) -> f64 {
    assert!(!batch.is_empty(), "loss over an empty batch");
    let mut h = DVector::zeros(model.n_meters());
    let mut total = 0.0;
    for (z, x_pred) in batch {
        eval_h_into(x_pred, model, adm, &mut h);
        let mut j = 0.0;
        for i in 0..model.n_meters() {
            let r = z[i] - h[i];
            j += model.w[i] * r * r;
        }
        total += j;
    }
    total / batch.len() as f64
}

/// The penalized loss: `loss_wls` plus `c` times the mean squared state
/// error, the latter in normalized units (see [`LossKind`]).
#[allow(clippy::too_many_arguments)]
pub fn loss_penalized(
    batch: &[(&DVector<f64>, &StateVector, &StateVector)],
    c: f64,
    ann: &AnnModel,
    model: &MeasurementModel,
    adm: &AdmittanceMatrix,
) -> f64 {
    assert!(!batch.is_empty(), "loss over an empty batch");
    let wls_batch: Vec<(&DVector<f64>, &StateVector)> =
        batch.iter().map(|(z, x_pred, _)| (*z, *x_pred)).collect();
    let base = loss_wls(&wls_batch, model, adm);
    let mut mse = 0.0;
    for (_, x_pred, x_true) in batch {
        let d = ann.normalize_output(&x_pred.to_free()) - ann.normalize_output(&x_true.to_free());
        mse += d.norm_squared();
    }
    base + c * mse / batch.len() as f64
}

struct GradBuffers {
    d_weights: Vec<DMatrix<f64>>,
    d_biases: Vec<DVector<f64>>,
    loss: f64,
    // batched activations/deltas, one column per sample in the chunk
    activations: Vec<DMatrix<f64>>,
    deltas: Vec<DMatrix<f64>>,
    // per-sample scratch
    h: DVector<f64>,
    jac: DMatrix<f64>,
    wr: DVector<f64>,
    grad_phys: DVector<f64>,
}

impl GradBuffers {
    fn new(ann: &AnnModel, n_meters: usize, chunk_capacity: usize) -> Self {
        GradBuffers {
            d_weights: ann
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            d_biases: ann.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            loss: 0.0,
            activations: ann
                .layer_sizes
                .iter()
                .map(|&width| DMatrix::zeros(width, chunk_capacity))
                .collect(),
            deltas: ann
                .layer_sizes
                .iter()
                .map(|&width| DMatrix::zeros(width, chunk_capacity))
                .collect(),
            h: DVector::zeros(n_meters),
            jac: DMatrix::zeros(n_meters, *ann.layer_sizes.last().unwrap()),
            wr: DVector::zeros(n_meters),
            grad_phys: DVector::zeros(*ann.layer_sizes.last().unwrap()),
        }
    }

    fn reset(&mut self) {
        for w in &mut self.d_weights {
            w.fill(0.0);
        }
        for b in &mut self.d_biases {
            b.fill(0.0);
        }
        self.loss = 0.0;
    }
}

/// Accumulates the loss gradient of a chunk of samples into `buf`.
///
/// The network passes run batched (samples as matrix columns); the
/// measurement function and its Jacobian are evaluated per sample. The
/// WLS term differentiates to `-2 H^T W r` with respect to the physical
/// state prediction; the optional penalty adds `2c (y - y_true)` in
/// normalized coordinates.
#[allow(clippy::too_many_arguments)]
fn accumulate_chunk(
    ann: &AnnModel,
    meas: &MeasurementModel,
    adm: &AdmittanceMatrix,
    data: &Dataset,
    chunk: &[usize],
    x_true_free: &[DVector<f64>],
    loss_kind: LossKind,
    c: f64,
    buf: &mut GradBuffers,
) {
    let cols = chunk.len();
    let layers = ann.n_layers();
    let m = meas.n_meters();

    // forward, batched: activations[0] holds normalized inputs
    for (col, &idx) in chunk.iter().enumerate() {
        let z = &data.records[idx].z_noisy;
        let mut a0 = buf.activations[0].column_mut(col);
        for i in 0..z.len() {
            a0[i] = (z[i] - ann.input_mean[i]) / ann.input_scale[i];
        }
    }
    for l in 0..layers {
        let (lower, upper) = buf.activations.split_at_mut(l + 1);
        let input = lower[l].columns(0, cols);
        let mut output = upper[0].columns_mut(0, cols);
        output.gemm(1.0, &ann.weights[l], &input, 0.0);
        let hidden = l + 1 < layers;
        for col in 0..cols {
            let mut column = output.column_mut(col);
            column += &ann.biases[l];
            if hidden {
                column.apply(|v| *v = v.tanh());
            }
        }
    }

    // per-sample residual gradients, written into the top delta block
    for (col, &idx) in chunk.iter().enumerate() {
        let z = &data.records[idx].z_noisy;
        let y = buf.activations[layers].column(col);
        let x_free = DVector::from_fn(y.len(), |i, _| {
            y[i] * ann.output_scale[i] + ann.output_mean[i]
        });
        let state = StateVector::from_free(&x_free, ann.n_buses, ann.slack);
        eval_h_into(&state, meas, adm, &mut buf.h);
        eval_h_jacobian_into(&state, meas, adm, &mut buf.jac);

        let mut j_value = 0.0;
        for i in 0..m {
            let r = z[i] - buf.h[i];
            j_value += meas.w[i] * r * r;
            buf.wr[i] = meas.w[i] * r;
        }
        buf.loss += j_value;
        buf.grad_phys.gemv_tr(-2.0, &buf.jac, &buf.wr, 0.0);

        let mut delta = buf.deltas[layers].column_mut(col);
        for i in 0..delta.len() {
            delta[i] = buf.grad_phys[i] * ann.output_scale[i];
        }
        if loss_kind == LossKind::WlsPlusMse {
            let truth = &x_true_free[idx];
            for i in 0..delta.len() {
                let diff = y[i] - (truth[i] - ann.output_mean[i]) / ann.output_scale[i];
                buf.loss += c * diff * diff;
                delta[i] += 2.0 * c * diff;
            }
        }
    }

    // backward, batched
    for l in (0..layers).rev() {
        {
            let delta = buf.deltas[l + 1].columns(0, cols);
            let input = buf.activations[l].columns(0, cols);
            buf.d_weights[l].gemm(1.0, &delta, &input.transpose(), 1.0);
            for col in 0..cols {
                buf.d_biases[l] += delta.column(col);
            }
        }
        if l > 0 {
            let (lower, upper) = buf.deltas.split_at_mut(l + 1);
            let delta = upper[0].columns(0, cols);
            let mut down = lower[l].columns_mut(0, cols);
            down.gemm_tr(1.0, &ann.weights[l], &delta, 0.0);
            let acts = buf.activations[l].columns(0, cols);
            for col in 0..cols {
                let mut d = down.column_mut(col);
                let a = acts.column(col);
                for i in 0..d.len() {
                    d[i] *= 1.0 - a[i] * a[i];
                }
            }
        }
    }
}

/// Number of deterministic gradient chunks per batch. Fixed (rather than
/// tied to the thread count) so results are bit-identical on any machine.
const GRAD_CHUNKS: usize = 4;

/// Global-norm gradient clip. The residual loss is stiff along meters
/// with near-zero nominal readings; clipping keeps early steps bounded.
const MAX_GRAD_NORM: f64 = 1e3;

/// Trains the network in place and returns the loss history.
///
/// Mini-batch Adam with a cosine-decayed learning rate; the batch
/// gradient is averaged over samples. Fails if the loss turns
/// non-finite.
pub fn train(
    ann: &mut AnnModel,
    data: &Dataset,
    config: &TrainingConfig,
    meas: &MeasurementModel,
    adm: &AdmittanceMatrix,
) -> Result<TrainHistory> {
    train_with_normalization(ann, data, config, meas, adm, None)
}

/// [`train`] with an explicit output-scale override for the normalization,
/// used to experiment with preconditioned output parametrizations.
pub fn train_with_normalization(
    ann: &mut AnnModel,
    data: &Dataset,
    config: &TrainingConfig,
    meas: &MeasurementModel,
    adm: &AdmittanceMatrix,
    output_scale_override: Option<DVector<f64>>,
) -> Result<TrainHistory> {
    config.validate()?;
    if data.split != Split::Train {
        return Err(Error::Config("training requires the train split".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    ann.fit_normalization(data)?;
    if let Some(scales) = output_scale_override {
        ann.output_scale = scales;
    }

    let n = data.len();
    let x_true_free: Vec<DVector<f64>> = data.records.iter().map(|r| r.x_true.to_free()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();

    // Adam moment estimates
    let zeros_w: Vec<DMatrix<f64>> = ann
        .weights
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let zeros_b: Vec<DVector<f64>> =
        ann.biases.iter().map(|b| DVector::zeros(b.len())).collect();
    let mut m1_w = zeros_w.clone();
    let mut m2_w = zeros_w.clone();
    let mut m1_b = zeros_b.clone();
    let mut m2_b = zeros_b.clone();
    let mut mean_w = zeros_w.clone();
    let mut mean_b = zeros_b;
    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let chunk_capacity = config.batch_size.div_ceil(GRAD_CHUNKS).max(1);
    let mut buffers: Vec<GradBuffers> = (0..GRAD_CHUNKS)
        .map(|_| GradBuffers::new(ann, meas.n_meters(), chunk_capacity))
        .collect();

    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut step = 0usize;

    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(config.epochs),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;

        for batch in order.chunks(config.batch_size) {
            // cosine decay from lr to lr/100 across all steps
            let progress = step as f64 / total_steps as f64;
            let lr = config.learning_rate
                * (0.505 + 0.495 * (std::f64::consts::PI * progress).cos());
            step += 1;

            let chunk_len = batch.len().div_ceil(GRAD_CHUNKS);
            let chunks: Vec<&[usize]> = batch.chunks(chunk_len.max(1)).collect();
            let ann_ref = &*ann;
            buffers[..chunks.len()]
                .par_iter_mut()
                .zip(chunks.par_iter())
                .for_each(|(buf, chunk)| {
                    buf.reset();
                    accumulate_chunk(
                        ann_ref,
                        meas,
                        adm,
                        data,
                        chunk,
                        &x_true_free,
                        config.loss_kind,
                        config.c,
                        buf,
                    );
                });

            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for buf in buffers.iter().take(chunks.len()) {
                batch_loss += buf.loss;
            }
            batch_loss *= inv;
            epoch_loss += batch_loss * batch.len() as f64;

            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("loss became non-finite ({batch_loss})"),
                });
            }

            let mut norm_sq = 0.0;
            for l in 0..ann.n_layers() {
                mean_w[l].fill(0.0);
                mean_b[l].fill(0.0);
                for buf in buffers.iter().take(chunks.len()) {
                    mean_w[l].zip_apply(&buf.d_weights[l], |v, g| *v += inv * g);
                    mean_b[l].zip_apply(&buf.d_biases[l], |v, g| *v += inv * g);
                }
                norm_sq += mean_w[l].norm_squared() + mean_b[l].norm_squared();
            }
            let clip = if norm_sq.sqrt() > MAX_GRAD_NORM {
                MAX_GRAD_NORM / norm_sq.sqrt()
            } else {
                1.0
            };

            // Adam with bias correction; `step` is already incremented
            let correction1 = 1.0 - beta1.powi(step as i32);
            let correction2 = 1.0 - beta2.powi(step as i32);
            let denom_scale = correction2.sqrt() / correction1;
            for l in 0..ann.n_layers() {
                m1_w[l].zip_apply(&mean_w[l], |m, g| *m = beta1 * *m + (1.0 - beta1) * clip * g);
                m2_w[l].zip_apply(&mean_w[l], |m, g| {
                    let cg = clip * g;
                    *m = beta2 * *m + (1.0 - beta2) * cg * cg;
                });
                {
                    let (m1, m2) = (&m1_w[l], &m2_w[l]);
                    let w = &mut ann.weights[l];
                    for (idx, value) in w.iter_mut().enumerate() {
                        let update = m1[idx] * denom_scale / (m2[idx].sqrt() + adam_eps);
                        *value -= lr * update;
                    }
                }

                m1_b[l].zip_apply(&mean_b[l], |m, g| *m = beta1 * *m + (1.0 - beta1) * clip * g);
                m2_b[l].zip_apply(&mean_b[l], |m, g| {
                    let cg = clip * g;
                    *m = beta2 * *m + (1.0 - beta2) * cg * cg;
                });
                {
                    let (m1, m2) = (&m1_b[l], &m2_b[l]);
                    let b = &mut ann.biases[l];
                    for (idx, value) in b.iter_mut().enumerate() {
                        let update = m1[idx] * denom_scale / (m2[idx].sqrt() + adam_eps);
                        *value -= lr * update;
                    }
                }
            }
        }
        history.epoch_loss.push(epoch_loss / n as f64);
    }
    Ok(history)
}

/// Digest of the network parameters, for determinism checks.
pub fn weights_digest(ann: &AnnModel) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for w in &ann.weights {
        for v in w.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    for b in &ann.biases {
        for v in b.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|byte| format!("{byte:02x}"))
        .collect()
}
