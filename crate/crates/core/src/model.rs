//! Sequential stacks of linear layers and their calibration inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    /// Derivative of [`Activation::apply`]; relu uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = inner.tanh();
                let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Gelu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageDtype {
    F32,
    F16,
}

/// A dense layer computing `act(W x + b)` with `W` of shape `n_o x n_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weights: Matrix,
    pub bias: Option<Vec<f32>>,
    pub activation: Activation,
}

impl LinearLayer {
    pub fn new(weights: Matrix, bias: Option<Vec<f32>>, activation: Activation) -> Result<Self> {
        let layer = Self {
            weights,
            bias,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    #[inline]
    pub fn n_o(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn n_i(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_o() == 0 || self.n_i() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "layer must be at least 1x1, got {}x{}",
                self.n_o(),
                self.n_i()
            )));
        }
        if !self.weights.is_finite() {
            return Err(Error::NonFinite("layer weights".into()));
        }
        if let Some(bias) = &self.bias {
            if bias.len() != self.n_o() {
                return Err(Error::DimensionMismatch(format!(
                    "bias has length {}, layer has {} outputs",
                    bias.len(),
                    self.n_o()
                )));
            }
            if bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite("layer bias".into()));
            }
        }
        Ok(())
    }

    /// Pre-activation `x W^T + b` for a batch of row vectors, accumulated in f64.
    pub fn preactivation(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        if inputs.cols() != self.n_i() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have width {}, layer expects {}",
                inputs.cols(),
                self.n_i()
            )));
        }
        let (batch, n_o) = (inputs.rows(), self.n_o());
        let mut out = Vec::with_capacity(batch * n_o);
        for b in 0..batch {
            let x = inputs.row(b);
            for o in 0..n_o {
                let w = self.weights.row(o);
                let mut acc = self.bias.as_ref().map_or(0.0, |bias| bias[o] as f64);
                for (wi, xi) in w.iter().zip(x) {
                    acc += *wi as f64 * *xi as f64;
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        let z = self.preactivation(inputs)?;
        let data = z
            .into_iter()
            .map(|v| self.activation.apply(v) as f32)
            .collect();
        Matrix::from_vec(inputs.rows(), self.n_o(), data)
    }
}

/// Which tensor [`ModelContainer::forward`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capture {
    /// Input features of the requested layer.
    PreLayerInput,
    /// Post-activation output of the requested layer.
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContainer {
    pub name: String,
    pub dtype_stored: StorageDtype,
    pub layers: Vec<LinearLayer>,
}

impl ModelContainer {
    pub fn new(name: impl Into<String>, layers: Vec<LinearLayer>) -> Result<Self> {
        let model = Self {
            name: name.into(),
            dtype_stored: StorageDtype::F32,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, LinearLayer::n_i)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LinearLayer::num_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::MalformedHeader("model has no layers".into()));
        }
        for layer in &self.layers {
            layer.validate()?;
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].n_o() != pair[1].n_i() {
                return Err(Error::DimensionIncompatibility {
                    layer: l + 1,
                    expected: pair[0].n_o(),
                    found: pair[1].n_i(),
                });
            }
        }
        Ok(())
    }

    /// Run the stack on a batch of row-vector inputs up to `upto_layer`.
    pub fn forward(&self, inputs: &Matrix, upto_layer: usize, capture: Capture) -> Result<Matrix> {
        if upto_layer >= self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "layer index {upto_layer} out of range for {} layers",
                self.layers.len()
            )));
        }
        if inputs.cols() != self.input_width() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have width {}, model expects {}",
                inputs.cols(),
                self.input_width()
            )));
        }
        let stop = match capture {
            Capture::PreLayerInput => upto_layer,
            Capture::Output => upto_layer + 1,
        };
        let mut x = inputs.clone();
        for layer in &self.layers[..stop] {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Output of the full stack.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs, self.layers.len() - 1, Capture::Output)
    }

    /// Move output neuron `i` of `layer` to position `sigma[i]`, permuting the
    /// successor's input columns identically so the network function is unchanged.
    pub fn apply_permutation(&self, layer: usize, sigma: &[usize]) -> Result<ModelContainer> {
        if layer >= self.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "layer index {layer} out of range"
            )));
        }
        if layer + 1 == self.layers.len() {
            return Err(Error::NoSuccessor(layer));
        }
        let n_o = self.layers[layer].n_o();
        validate_permutation(sigma, n_o)?;

        let mut out = self.clone();
        let cur = &self.layers[layer];
        let dst = &mut out.layers[layer];
        for (old, &new) in sigma.iter().enumerate() {
            dst.weights.row_mut(new).copy_from_slice(cur.weights.row(old));
        }
        if let (Some(src), Some(bias)) = (&cur.bias, dst.bias.as_mut()) {
            for (old, &new) in sigma.iter().enumerate() {
                bias[new] = src[old];
            }
        }

        let next = &self.layers[layer + 1];
        let dst = &mut out.layers[layer + 1].weights;
        for r in 0..next.n_o() {
            let src = next.weights.row(r);
            let row = dst.row_mut(r);
            for (old, &new) in sigma.iter().enumerate() {
                row[new] = src[old];
            }
        }
        Ok(out)
    }
}

pub fn validate_permutation(sigma: &[usize], n: usize) -> Result<()> {
    if sigma.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} does not match {n}",
            sigma.len()
        )));
    }
    let mut seen = vec![false; n];
    for &s in sigma {
        if s >= n || seen[s] {
            return Err(Error::InvalidPermutation(format!(
                "{s} is out of range or repeated"
            )));
        }
        seen[s] = true;
    }
    Ok(())
}

/// Inverse of a permutation given as old-index -> new-position.
pub fn invert_permutation(sigma: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; sigma.len()];
    for (old, &new) in sigma.iter().enumerate() {
        inv[new] = old;
    }
    inv
}

/// A batch of inputs for the first layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub inputs: Matrix,
}

impl CalibrationSet {
    pub fn new(inputs: Matrix) -> Result<Self> {
        if inputs.rows() == 0 || inputs.cols() == 0 {
            return Err(Error::DimensionMismatch(
                "calibration set must hold at least one non-empty row".into(),
            ));
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite("calibration inputs".into()));
        }
        Ok(Self { inputs })
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }

    pub fn check_against(&self, model: &ModelContainer) -> Result<()> {
        if self.inputs.cols() != model.input_width() {
            return Err(Error::DimensionMismatch(format!(
                "calibration width {} does not match model input width {}",
                self.inputs.cols(),
                model.input_width()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(rows: usize, cols: usize, data: &[f32], act: Activation) -> LinearLayer {
        LinearLayer::new(Matrix::from_vec(rows, cols, data.to_vec()).unwrap(), None, act).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let model =
            ModelContainer::new("id", vec![LinearLayer::new(Matrix::identity(3), None, Activation::Identity).unwrap()])
                .unwrap();
        let x = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(model.predict(&x).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_layer_hand_evaluation() {
        let model = ModelContainer::new("r", vec![layer(2, 2, &[1.0, 1.0, 1.0, -1.0], Activation::Relu)]).unwrap();
        let x = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(model.predict(&x).unwrap().as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn pre_layer_capture_equals_previous_output() {
        let model = ModelContainer::new(
            "two",
            vec![
                layer(2, 2, &[0.5, -1.0, 2.0, 0.25], Activation::Relu),
                layer(1, 2, &[1.0, 1.0], Activation::Identity),
            ],
        )
        .unwrap();
        let x = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let first = model.forward(&x, 0, Capture::Output).unwrap();
        let captured = model.forward(&x, 1, Capture::PreLayerInput).unwrap();
        assert_eq!(first, captured);
        assert_eq!(model.forward(&x, 0, Capture::PreLayerInput).unwrap(), x);
    }

    #[test]
    fn incompatible_layers_rejected() {
        let err = ModelContainer::new(
            "bad",
            vec![
                LinearLayer::new(Matrix::zeros(8, 4), None, Activation::Relu).unwrap(),
                LinearLayer::new(Matrix::zeros(3, 8), None, Activation::Relu).unwrap(),
                LinearLayer::new(Matrix::zeros(2, 4), None, Activation::Relu).unwrap(),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionIncompatibility { layer: 2, .. }));
    }

    #[test]
    fn non_finite_weights_rejected() {
        let w = Matrix::from_vec(1, 2, vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(
            LinearLayer::new(w, None, Activation::Identity),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn permutation_on_last_layer_is_rejected() {
        let model = ModelContainer::new("one", vec![layer(2, 2, &[1.0, 0.0, 0.0, 1.0], Activation::Identity)]).unwrap();
        assert!(matches!(
            model.apply_permutation(0, &[1, 0]),
            Err(Error::NoSuccessor(0))
        ));
    }

    #[test]
    fn identity_permutation_is_a_no_op_and_inverse_restores() {
        let model = ModelContainer::new(
            "two",
            vec![
                LinearLayer::new(
                    Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
                    Some(vec![0.1, 0.2, 0.3]),
                    Activation::Gelu,
                )
                .unwrap(),
                layer(2, 3, &[1.0, -1.0, 0.5, 2.0, 0.0, -3.0], Activation::Identity),
            ],
        )
        .unwrap();
        assert_eq!(model.apply_permutation(0, &[0, 1, 2]).unwrap(), model);

        let sigma = [2, 0, 1];
        let permuted = model.apply_permutation(0, &sigma).unwrap();
        assert_ne!(permuted, model);
        assert_eq!(permuted.layers[0].weights.row(2), model.layers[0].weights.row(0));
        assert_eq!(permuted.layers[0].bias.as_ref().unwrap()[2], 0.1);
        let restored = permuted.apply_permutation(0, &invert_permutation(&sigma)).unwrap();
        assert_eq!(restored, model);
    }

    #[test]
    fn bad_permutation_rejected() {
        let model = ModelContainer::new(
            "two",
            vec![
                layer(2, 2, &[1.0, 0.0, 0.0, 1.0], Activation::Identity),
                layer(1, 2, &[1.0, 1.0], Activation::Identity),
            ],
        )
        .unwrap();
        assert!(model.apply_permutation(0, &[0, 0]).is_err());
        assert!(model.apply_permutation(0, &[0]).is_err());
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8, "x = {x}");
        }
    }
}
