use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::linalg::{add_bias, column_sums_acc, matmul, matmul_a_bt, matmul_at_b_acc};
use super::tensor::Tensor;
use super::transformer;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Activation(Activation),
    Dropout(f64),
    /// Pre-norm block: `x + Drop(MHA(LN(x)))`, then `x + Drop(FF(LN(x)))`
    /// with a LeakyReLU feed-forward.
    TransformerEncoder {
        hidden: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
    },
    LinearProjection {
        input: usize,
        output: usize,
    },
}

/// An ordered, dimension-checked layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    output_dim: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut input_dim = None;
        let mut current: Option<usize> = None;
        for (idx, layer) in layers.iter().enumerate() {
            let (need, produce) = match *layer {
                LayerSpec::Dense { input, output } | LayerSpec::LinearProjection { input, output } => {
                    if input == 0 || output == 0 {
                        return Err(Error::InvalidSpec(format!("layer {idx}: zero dimension")));
                    }
                    (Some(input), output)
                }
                LayerSpec::TransformerEncoder {
                    hidden,
                    heads,
                    ff_dim,
                    dropout,
                } => {
                    if hidden == 0 || heads == 0 || ff_dim == 0 || hidden % heads != 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {idx}: {heads} heads must divide hidden size {hidden}"
                        )));
                    }
                    check_rate(idx, dropout)?;
                    (Some(hidden), hidden)
                }
                LayerSpec::Activation(act) => {
                    if let Activation::LeakyRelu(s) = act {
                        if !s.is_finite() {
                            return Err(Error::InvalidSpec(format!("layer {idx}: bad slope")));
                        }
                    }
                    let d = current.ok_or_else(|| Error::InvalidSpec(format!("layer {idx}: activation has no input size")))?;
                    (None, d)
                }
                LayerSpec::Dropout(rate) => {
                    check_rate(idx, rate)?;
                    let d = current.ok_or_else(|| Error::InvalidSpec(format!("layer {idx}: dropout has no input size")))?;
                    (None, d)
                }
            };
            if let Some(need) = need {
                match current {
                    Some(have) if have != need => {
                        return Err(Error::InvalidSpec(format!(
                            "layer {idx} expects {need} inputs, previous layer yields {have}"
                        )))
                    }
                    None => input_dim = Some(need),
                    _ => {}
                }
            }
            current = Some(produce);
        }
        match (input_dim, current) {
            (Some(input_dim), Some(output_dim)) => Ok(Self {
                layers,
                input_dim,
                output_dim,
            }),
            _ => Err(Error::InvalidSpec("empty network".into())),
        }
    }

    /// Dense stack: `hidden` widths each followed by `act` (and dropout if
    /// given), then a linear output layer.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, act: Activation, dropout: Option<f64>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(LayerSpec::Dense { input: prev, output: h });
            layers.push(LayerSpec::Activation(act));
            if let Some(rate) = dropout {
                layers.push(LayerSpec::Dropout(rate));
            }
            prev = h;
        }
        layers.push(LayerSpec::Dense { input: prev, output });
        NetworkSpec::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| match *l {
            LayerSpec::Dropout(r) => r > 0.0,
            LayerSpec::TransformerEncoder { dropout, .. } => dropout > 0.0,
            _ => false,
        })
    }
}

fn check_rate(idx: usize, rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("layer {idx}: dropout rate {rate} not in [0, 1)")))
    }
}

/// Dropout behaviour. `Train` and `McDropout` both sample masks; they are
/// kept apart so call sites say which one they mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    McDropout,
}

impl Mode {
    pub(crate) fn stochastic(self) -> bool {
        self != Mode::Eval
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Slot {
    Dense { offset: usize, input: usize, output: usize },
    Stateless,
    Transformer(transformer::Layout),
}

#[derive(Debug, Clone)]
enum Cache {
    Dense { input: Vec<f64> },
    Activation { pre: Vec<f64> },
    Dropout { mask: Option<Vec<f64>> },
    Transformer(Box<transformer::Cache>),
}

/// Everything backward needs from one forward pass, including dropout masks.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    param_count: usize,
    rows: usize,
    output_width: usize,
    caches: Vec<Cache>,
}

pub struct Forward {
    pub output: Tensor,
    pub tape: Tape,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<f64>,
    slots: Vec<Slot>,
}

impl Network {
    /// Dense layers get a He-uniform fan-in init, transformer projections the
    /// narrower `1/sqrt(fan_in)` bound; biases start at zero.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let slot = match *layer {
                LayerSpec::Dense { input, output } | LayerSpec::LinearProjection { input, output } => {
                    let offset = params.len();
                    let bound = (6.0 / input as f64).sqrt();
                    params.extend((0..input * output).map(|_| rng.random_range(-bound..bound)));
                    params.extend(std::iter::repeat_n(0.0, output));
                    Slot::Dense { offset, input, output }
                }
                LayerSpec::TransformerEncoder {
                    hidden,
                    heads,
                    ff_dim,
                    dropout,
                } => {
                    let layout = transformer::Layout::new(params.len(), hidden, heads, ff_dim, dropout);
                    params.resize(params.len() + layout.size(), 0.0);
                    layout.init(&mut params, rng);
                    Slot::Transformer(layout)
                }
                LayerSpec::Activation(_) | LayerSpec::Dropout(_) => Slot::Stateless,
            };
            slots.push(slot);
        }
        Self { spec, params, slots }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params = values;
        Ok(())
    }

    /// Forward pass recording a [`Tape`]. Dropout masks are drawn from `rng`
    /// in layer order, so replaying the same stream reproduces them exactly.
    pub fn forward<R: Rng + ?Sized>(&self, input: &Tensor, mode: Mode, rng: &mut R) -> Result<Forward> {
        let (output, caches) = self.run(input, mode, rng, true)?;
        let tape = Tape {
            param_count: self.params.len(),
            rows: output.rows(),
            output_width: output.width(),
            caches,
        };
        Ok(Forward { output, tape })
    }

    /// Eval-mode forward without a tape.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut unused = RngStream::new(0, 0);
        Ok(self.run(input, Mode::Eval, &mut unused, false)?.0)
    }

    /// Forward without a tape in any mode.
    pub fn infer<R: Rng + ?Sized>(&self, input: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        Ok(self.run(input, mode, rng, false)?.0)
    }

    fn run<R: Rng + ?Sized>(&self, input: &Tensor, mode: Mode, rng: &mut R, record: bool) -> Result<(Tensor, Vec<Cache>)> {
        if input.width() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "network expects width {}, input has shape {:?}",
                self.spec.input_dim,
                input.shape()
            )));
        }
        input.ensure_finite("network input")?;
        let shape = input.shape();
        let seq = if shape.len() >= 3 { shape[shape.len() - 2] } else { 1 };
        let rows = input.rows();
        let mut x = input.values().to_vec();
        let mut width = input.width();
        let mut caches = Vec::with_capacity(if record { self.slots.len() } else { 0 });

        for (layer, slot) in self.spec.layers.iter().zip(&self.slots) {
            match (layer, slot) {
                (_, Slot::Dense { offset, input, output }) => {
                    let (w, b) = dense_params(&self.params, *offset, *input, *output);
                    let mut y = vec![0.0; rows * output];
                    matmul(&x, w, &mut y, rows, *input, *output, false);
                    add_bias(&mut y, b);
                    if record {
                        caches.push(Cache::Dense { input: x });
                    }
                    x = y;
                    width = *output;
                }
                (LayerSpec::Activation(act), _) => {
                    let y: Vec<f64> = x.iter().map(|&z| act.apply(z)).collect();
                    if record {
                        caches.push(Cache::Activation { pre: x });
                    }
                    x = y;
                }
                (LayerSpec::Dropout(rate), _) => {
                    let mask = if mode.stochastic() && *rate > 0.0 {
                        let mask = dropout_mask(x.len(), *rate, rng);
                        x.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                        Some(mask)
                    } else {
                        None
                    };
                    if record {
                        caches.push(Cache::Dropout { mask });
                    }
                }
                (_, Slot::Transformer(layout)) => {
                    if !rows.is_multiple_of(seq) {
                        return Err(Error::shape("rows not divisible by sequence length"));
                    }
                    let (y, cache) = layout.forward(&self.params, x, rows, seq, mode, rng, record);
                    if let Some(cache) = cache {
                        caches.push(Cache::Transformer(Box::new(cache)));
                    }
                    x = y;
                }
                _ => unreachable!("slot kinds mirror layer kinds"),
            }
        }
        let out = input.with_width(width, x);
        out.ensure_finite("network output")?;
        Ok((out, caches))
    }

    /// Parameter gradients (fresh buffer) and the gradient w.r.t. the input.
    pub fn backward(&self, tape: &Tape, grad_output: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut grads = vec![0.0; self.params.len()];
        let gx = self.backward_into(tape, grad_output, &mut grads)?;
        Ok((grads, gx))
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(&self, tape: &Tape, grad_output: &Tensor, grads: &mut [f64]) -> Result<Tensor> {
        if tape.caches.len() != self.slots.len() || tape.param_count != self.params.len() {
            return Err(Error::NoForwardRecord);
        }
        if grads.len() != self.params.len() {
            return Err(Error::shape("gradient buffer size"));
        }
        if grad_output.rows() != tape.rows || grad_output.width() != tape.output_width {
            return Err(Error::shape(format!(
                "output gradient shape {:?} does not match recorded output",
                grad_output.shape()
            )));
        }
        let rows = tape.rows;
        let mut g = grad_output.values().to_vec();
        for ((layer, slot), cache) in self.spec.layers.iter().zip(&self.slots).zip(&tape.caches).rev() {
            match (layer, slot, cache) {
                (_, Slot::Dense { offset, input, output }, Cache::Dense { input: x }) => {
                    let (w, _) = dense_params(&self.params, *offset, *input, *output);
                    let (gw, gb) = grads[*offset..*offset + input * output + output].split_at_mut(input * output);
                    matmul_at_b_acc(x, &g, gw, rows, *input, *output);
                    column_sums_acc(&g, gb);
                    let mut gx = vec![0.0; rows * input];
                    matmul_a_bt(&g, w, &mut gx, rows, *output, *input, false);
                    g = gx;
                }
                (LayerSpec::Activation(act), _, Cache::Activation { pre }) => {
                    g.iter_mut().zip(pre).for_each(|(gv, &z)| *gv *= act.derivative(z));
                }
                (LayerSpec::Dropout(_), _, Cache::Dropout { mask }) => {
                    if let Some(mask) = mask {
                        g.iter_mut().zip(mask).for_each(|(gv, m)| *gv *= m);
                    }
                }
                (_, Slot::Transformer(layout), Cache::Transformer(cache)) => {
                    g = layout.backward(&self.params, cache, &g, grads);
                }
                _ => return Err(Error::NoForwardRecord),
            }
        }
        let in_shape = grad_output.with_width(self.spec.input_dim, g);
        Ok(in_shape)
    }
}

fn dense_params(params: &[f64], offset: usize, input: usize, output: usize) -> (&[f64], &[f64]) {
    params[offset..offset + input * output + output].split_at(input * output)
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub(crate) fn dropout_mask<R: RngCore + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net_with(spec: NetworkSpec, params: Vec<f64>) -> Network {
        let mut net = Network::new(spec, &mut RngStream::new(0, 0));
        net.set_params(params).unwrap();
        net
    }

    #[test]
    fn identity_dense() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense { input: 2, output: 2 }]).unwrap();
        let net = net_with(spec, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let y = net.predict(&Tensor::row_vector(vec![3.0, -1.0])).unwrap();
        assert_eq!(y.values(), &[3.0, -1.0]);
    }

    #[test]
    fn hand_matmul() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense { input: 2, output: 1 }]).unwrap();
        let net = net_with(spec, vec![1.0, 1.0, 0.5]);
        let y = net.predict(&Tensor::row_vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.values(), &[3.5]);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense { input: 3, output: 3 }, LayerSpec::Dropout(0.1)]).unwrap();
        let net = net_with(spec, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let x = Tensor::row_vector(vec![0.3, -2.0, 7.5]);
        let y = net.forward(&x, Mode::Eval, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(y.output.values(), x.values());
    }

    #[test]
    fn scalar_gradient() {
        // y = w * x with x = 2 and L = y: dL/dw = 2.
        let spec = NetworkSpec::new(vec![LayerSpec::Dense { input: 1, output: 1 }]).unwrap();
        let net = net_with(spec, vec![0.7, 0.0]);
        let fwd = net
            .forward(&Tensor::row_vector(vec![2.0]), Mode::Train, &mut RngStream::new(0, 0))
            .unwrap();
        let (grads, gx) = net.backward(&fwd.tape, &Tensor::row_vector(vec![1.0])).unwrap();
        assert_eq!(grads[0], 2.0);
        assert_eq!(grads[1], 1.0);
        assert_eq!(gx.values(), &[0.7]);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        // The second output unit never reaches the loss.
        let spec = NetworkSpec::new(vec![LayerSpec::Dense { input: 2, output: 2 }]).unwrap();
        let net = Network::new(spec, &mut RngStream::new(3, 0));
        let fwd = net
            .forward(&Tensor::row_vector(vec![0.4, -1.2]), Mode::Train, &mut RngStream::new(0, 0))
            .unwrap();
        let (grads, _) = net.backward(&fwd.tape, &Tensor::row_vector(vec![1.0, 0.0])).unwrap();
        // w is [in][out]; column 1 and bias[1] only feed the dropped output.
        assert_eq!(grads[1], 0.0);
        assert_eq!(grads[3], 0.0);
        assert_eq!(grads[5], 0.0);
    }

    #[test]
    fn backward_needs_a_tape() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense { input: 1, output: 1 }]).unwrap();
        let net = Network::new(spec, &mut RngStream::new(0, 0));
        let err = net.backward(&Tape::default(), &Tensor::row_vector(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::NoForwardRecord));
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![
            LayerSpec::Dense { input: 2, output: 3 },
            LayerSpec::Dense { input: 4, output: 1 },
        ])
        .is_err());
        assert!(NetworkSpec::new(vec![LayerSpec::TransformerEncoder {
            hidden: 10,
            heads: 3,
            ff_dim: 4,
            dropout: 0.0
        }])
        .is_err());
        assert!(NetworkSpec::new(vec![LayerSpec::Dense { input: 2, output: 2 }, LayerSpec::Dropout(1.0)]).is_err());
        assert!(NetworkSpec::new(vec![LayerSpec::Dropout(0.1)]).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let spec = NetworkSpec::new(vec![LayerSpec::Dense { input: 2, output: 1 }]).unwrap();
        let net = Network::new(spec, &mut RngStream::new(0, 0));
        assert!(matches!(net.predict(&Tensor::row_vector(vec![1.0])), Err(Error::Shape(_))));
        assert!(matches!(
            net.predict(&Tensor::row_vector(vec![1.0, f64::INFINITY])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dropout_rate_and_rescaling() {
        let mut rng = RngStream::new(11, 0);
        let rate = 0.1;
        let mask = dropout_mask(10_000, rate, &mut rng);
        let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64 / 1e4;
        assert!((dropped - rate).abs() <= 0.02, "dropped fraction {dropped}");
        let keep = 1.0 / (1.0 - rate);
        assert!(mask.iter().all(|&m| m == 0.0 || m == keep));
    }

    #[test]
    fn mc_dropout_passes_differ() {
        let spec = NetworkSpec::mlp(4, &[32], 2, Activation::Relu, Some(0.1)).unwrap();
        let net = Network::new(spec, &mut RngStream::new(5, 0));
        let x = Tensor::row_vector(vec![0.1, 0.2, 0.3, 0.4]);
        let a = net.infer(&x, Mode::McDropout, &mut RngStream::new(9, 0)).unwrap();
        let b = net.infer(&x, Mode::McDropout, &mut RngStream::new(9, 1)).unwrap();
        let c = net.infer(&x, Mode::McDropout, &mut RngStream::new(9, 0)).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
