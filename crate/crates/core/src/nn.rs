//! Feature encoder and linear classifier.
//!
//! The model is a small fully connected network split into two parts: an
//! [`Encoder`] mapping inputs to a feature vector, and a linear
//! [`Classifier`] on top of those features. The split matters because the
//! adaptation pipelines train the encoder while holding the classifier
//! frozen, and several objectives operate directly on the feature vector.
//!
//! The final encoder layer acts as a feature bottleneck: it belongs to the
//! fast parameter group together with the classifier, while earlier layers
//! form the slow "backbone" group (see [`ParamRole`]).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// One dense layer. `weight` is `[in x out]` so a batch multiplies from the
/// left; `bias` is `[1 x out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Fan-in scaled uniform init: both weight and bias drawn from
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Tensor::new(
            vec![fan_in, fan_out],
            (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        )
        .expect("weight buffer sized by construction");
        let bias = Tensor::new(
            vec![1, fan_out],
            (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
        )
        .expect("bias buffer sized by construction");
        Linear { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Multi-layer feature extractor. The activation applies after every layer
/// except the last, so features live in an unbounded space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Encoder {
    /// `widths` runs input dim, hidden dims, feature dim. At least an input
    /// and a feature width are required.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config(
                "encoder needs at least [input_dim, feature_dim] widths",
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("encoder layer widths must be positive"));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Ok(Encoder { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("encoder has layers").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }
}

/// Linear classification head over encoder features. While `frozen` is set
/// the optimizer must not touch its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub linear: Linear,
    pub frozen: bool,
}

impl Classifier {
    pub fn class_count(&self) -> usize {
        self.linear.out_dim()
    }
}

/// Parameter grouping used for per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Encoder layers before the last one.
    Backbone,
    /// The final encoder layer.
    Bottleneck,
    /// The classifier.
    Head,
}

/// Encoder plus classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: Encoder,
    pub classifier: Classifier,
}

/// Tape handles for one inserted copy of the model parameters.
pub struct TapeParams {
    pub enc: Vec<(Var, Var)>,
    pub cls: (Var, Var),
}

/// Gradients laid out like the model parameters.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub enc: Vec<(Tensor, Tensor)>,
    pub cls: (Tensor, Tensor),
}

impl Model {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        classes: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("model needs at least one class"));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let encoder = Encoder::new(&widths, activation, rng)?;
        let classifier = Classifier {
            linear: Linear::init(feature_dim, classes, rng),
            frozen: false,
        };
        Ok(Model {
            encoder,
            classifier,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.feature_dim()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.class_count()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.classifier.linear.param_count()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape {
                context: "Model::forward input".into(),
                expected: vec![x.rows(), self.input_dim()],
                got: x.shape().to_vec(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::EmptyData {
                context: "Model::forward input".into(),
            });
        }
        x.ensure_finite("Model::forward input")
    }

    /// Inserts one copy of every parameter as tape leaves.
    pub fn insert_params(&self, tape: &mut Tape) -> TapeParams {
        let enc = self
            .encoder
            .layers
            .iter()
            .map(|l| (tape.leaf(&l.weight), tape.leaf(&l.bias)))
            .collect();
        let cls = (
            tape.leaf(&self.classifier.linear.weight),
            tape.leaf(&self.classifier.linear.bias),
        );
        TapeParams { enc, cls }
    }

    /// Records the forward pass on `tape`, returning feature and logit nodes.
    pub fn forward_on(&self, tape: &mut Tape, params: &TapeParams, x: Var) -> (Var, Var) {
        let last = self.encoder.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in params.enc.iter().enumerate() {
            let lin = tape.matmul(h, *w);
            h = tape.add_bias(lin, *b);
            if i < last {
                h = match self.encoder.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        let features = h;
        let lin = tape.matmul(features, params.cls.0);
        let logits = tape.add_bias(lin, params.cls.1);
        (features, logits)
    }

    /// Plain forward pass: `(features, logits)` for a `[batch x input_dim]`
    /// batch. Runs through the same tape ops as the differentiable path so
    /// the two can never drift apart numerically.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let params = self.insert_params(&mut tape);
        let xv = tape.leaf(x);
        let (f, l) = self.forward_on(&mut tape, &params, xv);
        Ok((tape.value_tensor(f), tape.value_tensor(l)))
    }

    /// Collects parameter gradients after a backward pass.
    pub fn read_grads(&self, tape: &Tape, params: &TapeParams) -> ModelGrads {
        let enc = self
            .encoder
            .layers
            .iter()
            .zip(&params.enc)
            .map(|(l, (w, b))| {
                (
                    Tensor::new(l.weight.shape().to_vec(), tape.grad(*w).to_vec())
                        .expect("weight grad shape matches"),
                    Tensor::new(l.bias.shape().to_vec(), tape.grad(*b).to_vec())
                        .expect("bias grad shape matches"),
                )
            })
            .collect();
        let cls = (
            Tensor::new(
                self.classifier.linear.weight.shape().to_vec(),
                tape.grad(params.cls.0).to_vec(),
            )
            .expect("classifier weight grad shape matches"),
            Tensor::new(
                self.classifier.linear.bias.shape().to_vec(),
                tape.grad(params.cls.1).to_vec(),
            )
            .expect("classifier bias grad shape matches"),
        );
        ModelGrads { enc, cls }
    }

    /// SHA-256 over the classifier parameter bits. Training phases that
    /// promise not to touch the head compare this before and after.
    pub fn classifier_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in [
            &self.classifier.linear.weight,
            &self.classifier.linear.bias,
        ] {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// SHA-256 over every parameter bit, encoder included.
    pub fn params_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in self
            .encoder
            .layers
            .iter()
            .chain(std::iter::once(&self.classifier.linear))
        {
            for t in [&l.weight, &l.bias] {
                for v in t.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
