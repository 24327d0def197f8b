//! The multilayer-perceptron state estimator: measurements in, free
//! state out, with exact reverse-mode input gradients for the attacker.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::state::StateVector;
use crate::powerflow::Dataset;

/// Feed-forward network with tanh hidden layers and an identity output
/// layer. Inputs and outputs are standardized with statistics captured
/// from the training data; the slack angle is appended as zero when a
/// full [`StateVector`] is requested.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnModel {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input_mean: DVector<f64>,
    pub input_scale: DVector<f64>,
    pub output_mean: DVector<f64>,
    pub output_scale: DVector<f64>,
    pub n_buses: usize,
    pub slack: usize,
}

impl AnnModel {
    /// Xavier-initialized network. `layer_sizes` runs from the meter
    /// count to the free state dimension `2n - 1`.
    pub fn new(layer_sizes: Vec<usize>, n_buses: usize, slack: usize, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("network needs at least two layers".into()));
        }
        let out_dim = *layer_sizes.last().unwrap();
        if out_dim != 2 * n_buses - 1 {
            return Err(Error::Config(format!(
                "output dimension {} does not match the free state dimension {}",
                out_dim,
                2 * n_buses - 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-limit..limit));
            weights.push(w);
            biases.push(DVector::zeros(fan_out));
        }
        let in_dim = layer_sizes[0];
        Ok(AnnModel {
            layer_sizes,
            weights,
            biases,
            input_mean: DVector::zeros(in_dim),
            input_scale: DVector::from_element(in_dim, 1.0),
            output_mean: DVector::zeros(out_dim),
            output_scale: DVector::from_element(out_dim, 1.0),
            n_buses,
            slack,
        })
    }

    /// Default architecture: two tanh hidden layers of width `4 * (2n-1)`.
    pub fn with_default_architecture(
        n_meters: usize,
        n_buses: usize,
        slack: usize,
        seed: u64,
    ) -> Result<Self> {
        let free = 2 * n_buses - 1;
        Self::new(vec![n_meters, 4 * free, 4 * free, free], n_buses, slack, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Captures per-component standardization statistics from a dataset:
    /// noisy measurements for the inputs, true free states for the outputs.
    pub fn fit_normalization(&mut self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Config("cannot normalize on an empty dataset".into()));
        }
        let n = data.len() as f64;
        let m = self.input_dim();
        let d = self.output_dim();

        let mut in_mean = DVector::zeros(m);
        let mut out_mean = DVector::zeros(d);
        for record in &data.records {
            in_mean += &record.z_noisy;
            out_mean += record.x_true.to_free();
        }
        in_mean /= n;
        out_mean /= n;

        let mut in_var = DVector::zeros(m);
        let mut out_var = DVector::zeros(d);
        for record in &data.records {
            let di = &record.z_noisy - &in_mean;
            in_var += di.component_mul(&di);
            let dx = record.x_true.to_free() - &out_mean;
            out_var += dx.component_mul(&dx);
        }
        in_var /= n;
        out_var /= n;

        // the scale floor keeps degenerate components (constant over the
        // dataset) from collapsing the normalized space
        self.input_mean = in_mean;
        self.input_scale = in_var.map(|v| v.sqrt().max(1e-4));
        self.output_mean = out_mean;
        self.output_scale = out_var.map(|v| v.sqrt().max(1e-4));
        Ok(())
    }

    pub fn normalize_input(&self, z: &DVector<f64>) -> DVector<f64> {
        (z - &self.input_mean).component_div(&self.input_scale)
    }

    pub fn normalize_output(&self, x_free: &DVector<f64>) -> DVector<f64> {
        (x_free - &self.output_mean).component_div(&self.output_scale)
    }

    pub fn denormalize_output(&self, y: &DVector<f64>) -> DVector<f64> {
        y.component_mul(&self.output_scale) + &self.output_mean
    }

    /// Forward pass returning the physical free state vector.
    pub fn forward_free(&self, z: &DVector<f64>) -> DVector<f64> {
        let trace = self.forward_traced(z);
        self.denormalize_output(trace.output_normalized())
    }

    /// Forward pass returning a full state with the slack angle pinned.
    pub fn forward(&self, z: &DVector<f64>) -> Result<StateVector> {
        if z.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        let free = self.forward_free(z);
        Ok(StateVector::from_free(&free, self.n_buses, self.slack))
    }

    /// Forward pass that keeps every activation so gradients can be
    /// propagated back to the input afterwards.
    pub fn forward_traced(&self, z: &DVector<f64>) -> ForwardTrace<'_> {
        assert_eq!(z.len(), self.input_dim(), "input dimension mismatch");
        let mut activations = Vec::with_capacity(self.n_layers() + 1);
        activations.push(self.normalize_input(z));
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut pre = b.clone();
            pre.gemv(1.0, w, activations.last().unwrap(), 1.0);
            if l + 1 < self.n_layers() {
                pre.apply(|v| *v = v.tanh());
            }
            activations.push(pre);
        }
        ForwardTrace {
            model: self,
            activations,
        }
    }

    /// Exact gradient of a scalar objective with respect to the raw input
    /// `z`. The closure receives the physical free output and returns the
    /// objective gradient with respect to it.
    pub fn input_gradient<F>(&self, z: &DVector<f64>, objective_grad: F) -> DVector<f64>
    where
        F: FnOnce(&DVector<f64>) -> DVector<f64>,
    {
        let trace = self.forward_traced(z);
        let output = self.denormalize_output(trace.output_normalized());
        let grad_out = objective_grad(&output);
        trace.input_gradient(&grad_out)
    }
}

/// Activations of one forward pass; index 0 is the normalized input.
pub struct ForwardTrace<'a> {
    model: &'a AnnModel,
    pub(crate) activations: Vec<DVector<f64>>,
}

impl ForwardTrace<'_> {
    pub fn output_normalized(&self) -> &DVector<f64> {
        self.activations.last().unwrap()
    }

    pub fn output_physical(&self) -> DVector<f64> {
        self.model.denormalize_output(self.output_normalized())
    }

    /// Backpropagates a gradient on the physical output down to the raw
    /// input. Hidden layers apply the tanh derivative `1 - a^2`.
    pub fn input_gradient(&self, grad_output_physical: &DVector<f64>) -> DVector<f64> {
        let model = self.model;
        let mut delta = grad_output_physical.component_mul(&model.output_scale);
        for l in (0..model.n_layers()).rev() {
            let mut down = DVector::zeros(model.layer_sizes[l]);
            down.gemv_tr(1.0, &model.weights[l], &delta, 0.0);
            if l > 0 {
                let a = &self.activations[l];
                down.zip_apply(a, |d, a| *d *= 1.0 - a * a);
            }
            delta = down;
        }
        delta.component_div(&model.input_scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_model(seed: u64) -> AnnModel {
        // 2 buses: 3 free outputs, 5 meters
        let mut model = AnnModel::new(vec![5, 8, 3], 2, 0, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        model.input_mean = DVector::from_fn(5, |_, _| rng.gen_range(-0.5..0.5));
        model.input_scale = DVector::from_fn(5, |_, _| rng.gen_range(0.5..2.0));
        model.output_mean = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5));
        model.output_scale = DVector::from_fn(3, |_, _| rng.gen_range(0.5..2.0));
        model
    }

    #[test]
    fn constant_network_outputs_the_output_mean() {
        let mut model = small_model(1);
        for w in &mut model.weights {
            w.fill(0.0);
        }
        let z = DVector::from_element(5, 0.3);
        let state = model.forward(&z).unwrap();
        let free = state.to_free();
        for i in 0..3 {
            assert!((free[i] - model.output_mean[i]).abs() < 1e-15);
        }
        assert_eq!(state.va[0], 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = small_model(2);
        let z = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.7, -1.1]);
        let a = model.forward_free(&z);
        let b = model.forward_free(&z);
        assert_eq!(a, b);
    }

    #[test]
    fn constant_network_has_zero_input_gradient() {
        let mut model = small_model(3);
        for w in &mut model.weights {
            w.fill(0.0);
        }
        let z = DVector::from_element(5, 0.25);
        let grad = model.input_gradient(&z, |out| DVector::from_element(out.len(), 1.0));
        assert!(grad.amax() < 1e-15);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = small_model(4);
        let z0 = DVector::from_vec(vec![0.2, -0.4, 0.6, 0.1, -0.3]);
        // objective: weighted sum of outputs, gradient is the weights
        let coef = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let obj = |out: &DVector<f64>| out.dot(&coef);
        let grad = model.input_gradient(&z0, |_| coef.clone());

        let h = 1e-6;
        for i in 0..5 {
            let mut zp = z0.clone();
            let mut zm = z0.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (obj(&model.forward_free(&zp)) - obj(&model.forward_free(&zm))) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-9);
            assert!(
                (fd - grad[i]).abs() / scale <= 1e-4,
                "component {i}: fd {fd} vs analytic {}",
                grad[i]
            );
        }
    }

    #[test]
    fn linear_network_gradient_is_composed_matrix_row() {
        // identity normalization, single linear layer: f(z) = W z + b
        let model = AnnModel::new(vec![4, 3], 2, 0, 7).unwrap();
        let w = model.weights[0].clone();
        let z = DVector::from_vec(vec![0.5, -0.1, 0.2, 0.9]);
        // objective gradient selecting output 1
        let mut e1 = DVector::zeros(3);
        e1[1] = 1.0;
        let grad = model.input_gradient(&z, |_| e1.clone());
        for j in 0..4 {
            assert!((grad[j] - w[(1, j)]).abs() < 1e-14);
        }
    }

    #[test]
    fn normalization_roundtrip_is_exact() {
        let model = small_model(5);
        let x = DVector::from_vec(vec![0.3, -0.7, 1.4]);
        let back = model.denormalize_output(&model.normalize_output(&x));
        for i in 0..3 {
            assert!((back[i] - x[i]).abs() <= 1e-12);
        }
    }
}
