//! Parameterised vector fields `f(args, θ)`.
//!
//! Every field is a multilayer perceptron applied to the concatenation of its
//! arguments. The activation acts on hidden layers only, so a single layer
//! with [`Activation::Identity`] is an affine map; the linear field
//! `f(z) = a z + b` is represented that way.
//!
//! Two evaluation routes exist. [`MlpParams::forward_cached`] and
//! [`MlpParams::backward_cached`] are the allocation-free hot path used by the
//! solvers. [`MlpParams::record`] records the same network on an
//! [`autodiff::Tape`](crate::autodiff::Tape) and serves as its oracle.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer, `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpDoc", into = "MlpDoc")]
pub struct MlpParams {
    layers: Vec<Layer>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    w: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MlpDoc {
    layers: Vec<LayerDoc>,
    activation: Activation,
}

impl TryFrom<MlpDoc> for MlpParams {
    type Error = Error;

    fn try_from(doc: MlpDoc) -> Result<Self> {
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                Ok(Layer {
                    weight: Tensor::from_rows(&l.w)?,
                    bias: l.b.map(Tensor::vector),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpParams::new(layers, doc.activation)
    }
}

impl From<MlpParams> for MlpDoc {
    fn from(p: MlpParams) -> Self {
        MlpDoc {
            layers: p
                .layers
                .into_iter()
                .map(|l| LayerDoc {
                    w: (0..l.weight.rows()).map(|i| l.weight.row(i).to_vec()).collect(),
                    b: l.bias.map(Tensor::into_data),
                })
                .collect(),
            activation: p.activation,
        }
    }
}

/// Scratch space for one cached forward pass and its VJP.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// `acts[0]` is the input, `acts[i]` the output of layer `i - 1`.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    /// Start of each layer's block in the flat parameter layout.
    offsets: Vec<usize>,
}

impl MlpCache {
    pub fn input_mut(&mut self) -> &mut [f64] {
        &mut self.acts[0]
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache has an output slot")
    }

    /// Appends every activation to `out`.
    pub(crate) fn save_acts(&self, out: &mut Vec<f64>) {
        for a in &self.acts {
            out.extend_from_slice(a);
        }
    }

    /// Restores activations written by `save_acts`.
    pub(crate) fn load_acts(&mut self, src: &[f64]) {
        let mut at = 0;
        for a in &mut self.acts {
            let n = a.len();
            a.copy_from_slice(&src[at..at + n]);
            at += n;
        }
    }
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("an MLP needs at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.rank() != 2 {
                return Err(Error::InvalidModel(format!("layer {i}: weight must be a matrix")));
            }
            if let Some(b) = &layer.bias {
                if b.rank() != 1 || b.len() != layer.out_dim() {
                    return Err(Error::InvalidModel(format!(
                        "layer {i}: bias length {} does not match {} outputs",
                        b.len(),
                        layer.out_dim()
                    )));
                }
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(Error::InvalidModel(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.in_dim(),
                    i - 1,
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    /// Single affine layer with identity activation.
    pub fn affine(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        Self::new(vec![Layer { weight, bias }], Activation::Identity)
    }

    /// Scalar linear field `f(z) = a z + b`.
    pub fn linear(a: f64, b: f64) -> Self {
        Self::affine(
            Tensor::matrix(1, 1, vec![a]).expect("1x1"),
            Some(Tensor::scalar(b)),
        )
        .expect("valid 1x1 affine map")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameters in layer order, each layer as row-major weight then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b.data());
            }
        }
    }

    /// Overwrites the parameters from a flat slice in [`flatten`](Self::flatten) order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidModel(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            if let Some(b) = &mut l.bias {
                let n = b.len();
                b.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Same architecture, parameters taken from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        for l in &mut p.layers {
            l.weight.data_mut().fill(0.0);
            if let Some(b) = &mut l.bias {
                b.data_mut().fill(0.0);
            }
        }
        p
    }

    pub fn cache(&self) -> MlpCache {
        let mut acts = vec![vec![0.0; self.in_dim()]];
        acts.extend(self.layers.iter().map(|l| vec![0.0; l.out_dim()]));
        let widest = acts.iter().map(Vec::len).max().unwrap_or(0);
        let offsets = self
            .layers
            .iter()
            .scan(0, |off, l| {
                let start = *off;
                *off += l.param_count();
                Some(start)
            })
            .collect();
        MlpCache {
            acts,
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
            offsets,
        }
    }

    /// Evaluates the network on `cache.input_mut()`, leaving every activation
    /// in the cache for a following [`backward_cached`](Self::backward_cached).
    pub fn forward_cached<'c>(&self, cache: &'c mut MlpCache) -> &'c [f64] {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (before, after) = cache.acts.split_at_mut(i + 1);
            let input = &before[i];
            let out = &mut after[0];
            let cols = layer.in_dim();
            let w = layer.weight.data();
            match &layer.bias {
                Some(b) => out.copy_from_slice(b.data()),
                None => out.fill(0.0),
            }
            for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
                *o += row.iter().zip(input.iter()).map(|(wi, xi)| wi * xi).sum::<f64>();
            }
            if i < last {
                for o in out.iter_mut() {
                    *o = self.activation.apply(*o);
                }
            }
        }
        cache.output()
    }

    /// Pulls `cotangent` back through the cached forward pass. The input
    /// gradient overwrites `grad_input`; parameter gradients are added into
    /// `grad_params` (flat layout) so callers can accumulate over many calls.
    pub fn backward_cached(
        &self,
        cache: &mut MlpCache,
        cotangent: &[f64],
        grad_input: &mut [f64],
        grad_params: &mut [f64],
    ) {
        let last = self.layers.len() - 1;
        let MlpCache {
            acts,
            delta,
            delta_prev,
            offsets,
        } = cache;
        delta[..cotangent.len()].copy_from_slice(cotangent);

        for i in (0..=last).rev() {
            let layer = &self.layers[i];
            let (rows, cols) = (layer.out_dim(), layer.in_dim());
            let input = &acts[i];
            let d = &delta[..rows];
            let base = offsets[i];
            let gw = &mut grad_params[base..base + rows * cols];
            for r in 0..rows {
                let dr = d[r];
                if dr != 0.0 {
                    for (g, x) in gw[r * cols..(r + 1) * cols].iter_mut().zip(input.iter()) {
                        *g += dr * x;
                    }
                }
            }
            if layer.bias.is_some() {
                let gb = &mut grad_params[base + rows * cols..base + rows * cols + rows];
                for (g, dr) in gb.iter_mut().zip(d) {
                    *g += dr;
                }
            }
            let target: &mut [f64] = if i == 0 {
                &mut grad_input[..cols]
            } else {
                &mut delta_prev[..cols]
            };
            target.fill(0.0);
            let w = layer.weight.data();
            for r in 0..rows {
                let dr = d[r];
                if dr != 0.0 {
                    for (t, wv) in target.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                        *t += dr * wv;
                    }
                }
            }
            if i > 0 {
                for (t, y) in delta_prev[..cols].iter_mut().zip(input.iter()) {
                    *t *= self.activation.slope_from_output(*y);
                }
                std::mem::swap(delta, delta_prev);
            }
        }
    }

    /// Convenience evaluation on a slice.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        let mut cache = self.cache();
        cache.input_mut().copy_from_slice(input);
        self.forward_cached(&mut cache).to_vec()
    }

    /// Registers every weight and bias as a tape input.
    pub fn register(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.input(l.weight.clone()),
                bias: l.bias.as_ref().map(|b| tape.input(b.clone())),
            })
            .collect()
    }

    /// Records the network applied to `input` using the parameter handles
    /// returned by [`register`](Self::register).
    pub fn record(&self, tape: &mut Tape, vars: &[LayerVars], input: Var) -> Result<Var> {
        let last = vars.len() - 1;
        let mut h = input;
        for (i, lv) in vars.iter().enumerate() {
            h = tape.matmul(lv.weight, h)?;
            if let Some(b) = lv.bias {
                h = tape.add(h, b)?;
            }
            if i < last && self.activation == Activation::Tanh {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// What each argument of a vector field refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgRole {
    /// The current state `z(t)`.
    Current,
    /// The frozen grid state `z(⌊(t - lag·τ)/τ⌋ τ)`.
    Grid(usize),
    /// The continuously delayed state `z(t - τ)`.
    Delayed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSignature {
    pub state_dim: usize,
    pub roles: Vec<ArgRole>,
}

impl FieldSignature {
    pub fn new(state_dim: usize, roles: Vec<ArgRole>) -> Self {
        Self { state_dim, roles }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim * self.roles.len()
    }

    pub fn has_current(&self) -> bool {
        self.roles.contains(&ArgRole::Current)
    }

    pub fn position(&self, role: ArgRole) -> Option<usize> {
        self.roles.iter().position(|r| *r == role)
    }

    /// Checks that `params` maps `input_dim` inputs to `state_dim` outputs.
    pub fn check(&self, params: &MlpParams) -> Result<()> {
        if params.in_dim() != self.input_dim() {
            return Err(Error::InvalidModel(format!(
                "field takes {} inputs but the signature has {} arguments of dimension {}",
                params.in_dim(),
                self.roles.len(),
                self.state_dim
            )));
        }
        if params.out_dim() != self.state_dim {
            return Err(Error::InvalidModel(format!(
                "field returns {} components, state has {}",
                params.out_dim(),
                self.state_dim
            )));
        }
        Ok(())
    }

    fn check_args(&self, args: &[Tensor]) -> Result<()> {
        if args.len() != self.roles.len() {
            return Err(Error::Argument {
                index: args.len().min(self.roles.len()),
                reason: format!("expected {} arguments, got {}", self.roles.len(), args.len()),
            });
        }
        for (i, a) in args.iter().enumerate() {
            if a.rank() != 1 || a.len() != self.state_dim {
                return Err(Error::Argument {
                    index: i,
                    reason: format!("shape {:?}, expected [{}]", a.shape(), self.state_dim),
                });
            }
        }
        Ok(())
    }
}

/// `f(concat(args), θ)`.
pub fn field_eval(params: &MlpParams, signature: &FieldSignature, args: &[Tensor]) -> Result<Tensor> {
    signature.check(params)?;
    signature.check_args(args)?;
    let input: Vec<f64> = args.iter().flat_map(|a| a.data().iter().copied()).collect();
    Ok(Tensor::vector(params.eval(&input)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldVjp {
    /// One gradient per argument, the slices of the concatenated-input gradient.
    pub args: Vec<Tensor>,
    pub params: MlpParams,
}

pub fn field_vjp(
    params: &MlpParams,
    signature: &FieldSignature,
    args: &[Tensor],
    cotangent: &Tensor,
) -> Result<FieldVjp> {
    signature.check(params)?;
    signature.check_args(args)?;
    if cotangent.rank() != 1 || cotangent.len() != signature.state_dim {
        return Err(Error::ShapeMismatch {
            op: "field_vjp cotangent",
            lhs: cotangent.shape().to_vec(),
            rhs: vec![signature.state_dim],
        });
    }
    let mut cache = params.cache();
    let mut off = 0;
    for a in args {
        cache.input_mut()[off..off + a.len()].copy_from_slice(a.data());
        off += a.len();
    }
    params.forward_cached(&mut cache);
    let mut grad_in = vec![0.0; signature.input_dim()];
    let mut grad_params = vec![0.0; params.param_count()];
    params.backward_cached(&mut cache, cotangent.data(), &mut grad_in, &mut grad_params);
    let d = signature.state_dim;
    Ok(FieldVjp {
        args: grad_in.chunks(d).map(|c| Tensor::vector(c.to_vec())).collect(),
        params: params.with_flat(&grad_params)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    Zeros,
    #[default]
    XavierUniform,
}

/// Hidden widths and layer options; the output layer is implied by the
/// signature's state dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub biases: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    /// Two hidden tanh layers of the given width and no biases,
    /// `W_out tanh(W tanh(W_in x))`.
    pub fn two_hidden(width: usize) -> Self {
        Self {
            hidden: vec![width, width],
            biases: false,
            activation: Activation::Tanh,
        }
    }

    pub fn with_biases(mut self, biases: bool) -> Self {
        self.biases = biases;
        self
    }
}

pub fn init_params(
    signature: &FieldSignature,
    arch: &Architecture,
    scheme: InitScheme,
    seed: u64,
) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![signature.input_dim()];
    dims.extend(&arch.hidden);
    dims.push(signature.state_dim);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let data = match scheme {
                InitScheme::Zeros => vec![0.0; fan_in * fan_out],
                InitScheme::XavierUniform => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound);
                    (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            Layer {
                weight: Tensor::matrix(fan_out, fan_in, data).expect("layer shape"),
                bias: arch.biases.then(|| Tensor::zeros(&[fan_out])),
            }
        })
        .collect();
    MlpParams::new(layers, arch.activation).expect("chained dimensions")
}
