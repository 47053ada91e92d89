//! Stacked recurrent classifier: recurrent layers with dropout, a dense
//! softmax head, a cached forward pass, and reverse-mode gradients through
//! every solver sub-step (backpropagation through time).

use ndarray::{
    s, Array, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewD,
    ArrayViewMutD, Axis, Dimension, Zip,
};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cell::{
    self, fused_rows, lstm_rows, LstmCellParams, LstmStep, LtcCellParams, OpCounter, SolverConfig,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Version written into model files by this build.
pub const FORMAT_VERSION: u64 = 1;

/// Lower clipping bound applied to probabilities inside the cross-entropy.
pub const PROB_CLIP: f64 = 1e-7;

/// Rows per chunk when predicting on a whole dataset.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Ltc,
    Lstm,
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ltc" => Ok(CellKind::Ltc),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell kind `{other}` (expected ltc or lstm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub cell_kind: CellKind,
    pub units: usize,
    pub return_sequences: bool,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_features: usize,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub solver: SolverConfig,
}

impl NetworkSpec {
    /// `depth` recurrent layers of `units` each; every layer but the last
    /// returns sequences.
    pub fn stacked(
        cell_kind: CellKind,
        depth: usize,
        units: usize,
        dropout_rate: f64,
        input_features: usize,
        num_classes: usize,
        solver: SolverConfig,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| LayerSpec {
                cell_kind,
                units,
                return_sequences: i + 1 < depth,
                dropout_rate,
            })
            .collect();
        Self {
            input_features,
            layers,
            num_classes,
            solver,
        }
    }

    /// Two LTC layers of 128 units, dropout 0.2, two output classes.
    pub fn reference(input_features: usize) -> Self {
        Self::stacked(CellKind::Ltc, 2, 128, 0.2, input_features, 2, SolverConfig::default())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_features == 0 {
            return Err(Error::Config("input_features must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::Config("network needs at least one recurrent layer".into()));
        };
        if last.return_sequences {
            return Err(Error::Config(
                "the last recurrent layer must not return sequences".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.units == 0 {
                return Err(Error::Config(format!("layer {i} has zero units")));
            }
            check_dropout_rate(layer.dropout_rate)?;
            if i + 1 < self.layers.len() && !layer.return_sequences {
                return Err(Error::Config(format!(
                    "layer {i} feeds another recurrent layer and must return sequences"
                )));
            }
        }
        self.solver.validate()
    }

    pub fn output_units(&self) -> usize {
        self.layers.last().map_or(0, |l| l.units)
    }
}

/// Size-independent description of a stacked network; combined with the
/// data's feature and class counts to give a [`NetworkSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub cell_kind: CellKind,
    pub depth: usize,
    pub units: usize,
    pub dropout_rate: f64,
    pub solver: SolverConfig,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            cell_kind: CellKind::Ltc,
            depth: 2,
            units: 128,
            dropout_rate: 0.2,
            solver: SolverConfig::default(),
        }
    }
}

impl Architecture {
    pub fn spec(&self, input_features: usize, num_classes: usize) -> NetworkSpec {
        NetworkSpec::stacked(
            self.cell_kind,
            self.depth,
            self.units,
            self.dropout_rate,
            input_features,
            num_classes,
            self.solver,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum LayerParams<S> {
    Ltc(LtcCellParams<S>),
    Lstm(LstmCellParams<S>),
}

impl<S: Scalar> LayerParams<S> {
    pub fn units(&self) -> usize {
        match self {
            LayerParams::Ltc(p) => p.units(),
            LayerParams::Lstm(p) => p.units(),
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            LayerParams::Ltc(p) => p.inputs(),
            LayerParams::Lstm(p) => p.inputs(),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            LayerParams::Ltc(_) => CellKind::Ltc,
            LayerParams::Lstm(_) => CellKind::Lstm,
        }
    }

    fn macs_per_timestep(&self) -> u64 {
        match self {
            LayerParams::Ltc(p) => p.macs_per_timestep(),
            LayerParams::Lstm(p) => p.macs_per_timestep(),
        }
    }
}

/// Full set of trainable parameters plus the spec they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams<S>>,
    /// num_classes x N_last
    pub output_weights: Array2<S>,
    pub output_bias: Array1<S>,
    pub format_version: u64,
}

impl<S: Scalar> ModelParams<S> {
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut inputs = spec.input_features;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            layers.push(match layer.cell_kind {
                CellKind::Ltc => {
                    LayerParams::Ltc(LtcCellParams::init(layer.units, inputs, spec.solver, rng)?)
                }
                CellKind::Lstm => LayerParams::Lstm(LstmCellParams::init(layer.units, inputs, rng)),
            });
            inputs = layer.units;
        }
        let output_weights = cell::glorot_uniform(spec.num_classes, inputs, rng);
        let output_bias = Array1::zeros(spec.num_classes);
        Ok(Self {
            spec,
            layers,
            output_weights,
            output_bias,
            format_version: FORMAT_VERSION,
        })
    }

    /// Checks every shape against the spec and every entry for finiteness.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.layers.len() != self.spec.layers.len() {
            return Err(Error::shape("layer count", self.spec.layers.len(), self.layers.len()));
        }
        let mut inputs = self.spec.input_features;
        for (i, (params, spec)) in self.layers.iter().zip(&self.spec.layers).enumerate() {
            if params.kind() != spec.cell_kind {
                return Err(Error::Contract(format!("layer {i} cell kind differs from spec")));
            }
            if params.units() != spec.units || params.inputs() != inputs {
                return Err(Error::shape(
                    format!("layer {i}"),
                    format!("{} units x {} inputs", spec.units, inputs),
                    format!("{} units x {} inputs", params.units(), params.inputs()),
                ));
            }
            match params {
                LayerParams::Ltc(p) => p.validate()?,
                LayerParams::Lstm(p) => p.validate()?,
            }
            inputs = spec.units;
        }
        let expected = (self.spec.num_classes, inputs);
        if self.output_weights.dim() != expected || self.output_bias.len() != expected.0 {
            return Err(Error::shape(
                "output layer",
                format!("{}x{} weights, {} bias", expected.0, expected.1, expected.0),
                format!(
                    "{}x{} weights, {} bias",
                    self.output_weights.nrows(),
                    self.output_weights.ncols(),
                    self.output_bias.len()
                ),
            ));
        }
        if !(cell::all_finite(self.output_weights.iter()) && cell::all_finite(self.output_bias.iter())) {
            return Err(Error::Numeric("output layer has non-finite entries".into()));
        }
        Ok(())
    }

    /// Names of the trainable tensors, in the order used by [`Gradients`]
    /// and the optimizer.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerParams::Ltc(_) => {
                    for field in LTC_FIELDS {
                        names.push(format!("layers.{i}.{field}"));
                    }
                }
                LayerParams::Lstm(_) => {
                    for gate in LSTM_GATES {
                        for field in ["input", "recurrent", "bias"] {
                            names.push(format!("layers.{i}.{gate}.{field}"));
                        }
                    }
                }
            }
        }
        names.push("output_weights".into());
        names.push("output_bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<ArrayViewD<'_, S>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerParams::Ltc(p) => {
                    out.push(p.recurrent_weights.view().into_dyn());
                    out.push(p.input_weights.view().into_dyn());
                    out.push(p.gate_bias.view().into_dyn());
                    out.push(p.attractor.view().into_dyn());
                    out.push(p.time_constants.view().into_dyn());
                }
                LayerParams::Lstm(p) => {
                    for g in [&p.input_gate, &p.forget_gate, &p.candidate, &p.output_gate] {
                        out.push(g.input.view().into_dyn());
                        out.push(g.recurrent.view().into_dyn());
                        out.push(g.bias.view().into_dyn());
                    }
                }
            }
        }
        out.push(self.output_weights.view().into_dyn());
        out.push(self.output_bias.view().into_dyn());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerParams::Ltc(p) => {
                    out.push(p.recurrent_weights.view_mut().into_dyn());
                    out.push(p.input_weights.view_mut().into_dyn());
                    out.push(p.gate_bias.view_mut().into_dyn());
                    out.push(p.attractor.view_mut().into_dyn());
                    out.push(p.time_constants.view_mut().into_dyn());
                }
                LayerParams::Lstm(p) => {
                    let LstmCellParams {
                        input_gate,
                        forget_gate,
                        candidate,
                        output_gate,
                    } = p;
                    for g in [input_gate, forget_gate, candidate, output_gate] {
                        out.push(g.input.view_mut().into_dyn());
                        out.push(g.recurrent.view_mut().into_dyn());
                        out.push(g.bias.view_mut().into_dyn());
                    }
                }
            }
        }
        out.push(self.output_weights.view_mut().into_dyn());
        out.push(self.output_bias.view_mut().into_dyn());
        out
    }

    /// Keeps every time constant at or above [`cell::MIN_TIME_CONSTANT`].
    pub(crate) fn project_constraints(&mut self) {
        let floor = S::lit(cell::MIN_TIME_CONSTANT);
        for layer in &mut self.layers {
            if let LayerParams::Ltc(p) = layer {
                p.time_constants.mapv_inplace(|t| if t < floor { floor } else { t });
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

const LTC_FIELDS: [&str; 5] = [
    "recurrent_weights",
    "input_weights",
    "gate_bias",
    "attractor",
    "time_constants",
];
const LSTM_GATES: [&str; 4] = ["input_gate", "forget_gate", "candidate", "output_gate"];

/// Gradient of the loss, one tensor per entry of [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub names: Vec<String>,
    pub tensors: Vec<ArrayD<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&ArrayD<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Euclidean norm over all tensors.
    pub fn norm(&self) -> S {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(S::zero(), |acc, &g| acc + g * g)
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row softmax with max-subtraction.
pub fn softmax<S: Scalar>(logits: ArrayView1<S>) -> Array1<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let total = out.sum();
    out.mapv_inplace(|e| e / total);
    out
}

fn softmax_rows<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut dst, src) in out.rows_mut().into_iter().zip(logits.rows()) {
        dst.assign(&softmax(src));
    }
    out
}

fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`. `None` means identity (eval mode or rate 0).
fn dropout_mask<S: Scalar, D: Dimension, R: Rng + ?Sized>(
    shape: D,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Option<Array<S, D>>> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(None);
    }
    let keep = S::lit(1.0 / (1.0 - rate));
    Ok(Some(Array::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            S::zero()
        } else {
            keep
        }
    })))
}

/// Applies inverted dropout in train mode; identity in eval mode.
pub fn dropout_apply<S: Scalar, D: Dimension, R: Rng + ?Sized>(
    activations: &Array<S, D>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Array<S, D>> {
    Ok(match dropout_mask(activations.raw_dim(), rate, mode, rng)? {
        Some(mask) => activations * &mask,
        None => activations.clone(),
    })
}

#[derive(Debug, Clone)]
enum Recurrence<S> {
    Ltc {
        /// Hidden state before each sub-step, plus the final one: T*k + 1 entries of B x N.
        states: Vec<Array2<S>>,
        /// Gate values at each sub-step: T*k entries of B x N.
        gates: Vec<Array2<S>>,
        dt: S,
    },
    Lstm {
        /// T + 1 entries each.
        hiddens: Vec<Array2<S>>,
        cells: Vec<Array2<S>>,
        steps: Vec<LstmStep<S>>,
    },
}

#[derive(Debug, Clone)]
struct LayerTrace<S> {
    /// B x T x M input seen by this layer.
    input: Array3<S>,
    recurrence: Recurrence<S>,
    mask: Option<OutputMask<S>>,
}

/// Dropout mask over a layer's output.
#[derive(Debug, Clone)]
enum OutputMask<S> {
    /// B x T x N, for layers that return sequences.
    Sequence(Array3<S>),
    /// B x N, over the final state only.
    Final(Array2<S>),
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    layers: Vec<LayerTrace<S>>,
    /// B x N_last after dropout; input of the dense head.
    head_input: Array2<S>,
    pub logits: Array2<S>,
    pub probabilities: Array2<S>,
    pub mode: Mode,
}

impl<S> ForwardTrace<S> {
    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }
}

/// Forward pass over a B x T x M batch. Returns class probabilities (B x C)
/// and the cached trace.
pub fn forward<S: Scalar, R: Rng + ?Sized>(
    model: &ModelParams<S>,
    batch: ArrayView3<S>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Array2<S>, ForwardTrace<S>)> {
    let mut counter = OpCounter::new();
    forward_counted(model, batch, mode, rng, &mut counter)
}

/// [`forward`] that also accumulates recurrent multiply-accumulates.
pub fn forward_counted<S: Scalar, R: Rng + ?Sized>(
    model: &ModelParams<S>,
    batch: ArrayView3<S>,
    mode: Mode,
    rng: &mut R,
    counter: &mut OpCounter,
) -> Result<(Array2<S>, ForwardTrace<S>)> {
    let (b, t, m) = batch.dim();
    if m != model.spec.input_features {
        return Err(Error::shape("batch feature dimension", model.spec.input_features, m));
    }
    if t == 0 || b == 0 {
        return Err(Error::shape("batch", "at least 1 sample and 1 timestep", format!("{b}x{t}x{m}")));
    }
    if !cell::all_finite(batch.iter()) {
        return Err(Error::Numeric("batch contains non-finite values".into()));
    }

    let mut layer_input = batch.to_owned();
    let mut traces = Vec::with_capacity(model.layers.len());
    let mut head_input = None;
    for (params, spec) in model.layers.iter().zip(&model.spec.layers) {
        let (recurrence, seq) = run_recurrence(params, layer_input.view());
        counter.add(params.macs_per_timestep() * (b * t) as u64);
        if spec.return_sequences {
            let mask = dropout_mask(seq.raw_dim(), spec.dropout_rate, mode, rng)?;
            let out = match &mask {
                Some(mask) => &seq * mask,
                None => seq,
            };
            traces.push(LayerTrace {
                input: layer_input,
                recurrence,
                mask: mask.map(OutputMask::Sequence),
            });
            layer_input = out;
        } else {
            let last = seq.index_axis(Axis(1), t - 1).to_owned();
            let mask = dropout_mask(last.raw_dim(), spec.dropout_rate, mode, rng)?;
            let out = match &mask {
                Some(mask) => &last * mask,
                None => last,
            };
            traces.push(LayerTrace {
                input: layer_input,
                recurrence,
                mask: mask.map(OutputMask::Final),
            });
            head_input = Some(out);
            break;
        }
    }
    let head_input = head_input.ok_or_else(|| Error::Contract("no final recurrent layer".into()))?;
    let mut logits = head_input.dot(&model.output_weights.t());
    logits += &model.output_bias;
    let probabilities = softmax_rows(&logits);
    let trace = ForwardTrace {
        layers: traces,
        head_input,
        logits,
        probabilities: probabilities.clone(),
        mode,
    };
    Ok((probabilities, trace))
}

/// Eval-mode class probabilities for a whole dataset, in fixed-size chunks.
pub fn predict_proba<S: Scalar>(model: &ModelParams<S>, features: ArrayView3<S>) -> Result<Array2<S>> {
    let n = features.dim().0;
    let mut out = Array2::zeros((n, model.spec.num_classes));
    // Eval mode never draws from the generator.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut start = 0;
    while start < n {
        let end = (start + PREDICT_CHUNK).min(n);
        let (probs, _) = forward(model, features.slice(s![start..end, .., ..]), Mode::Eval, &mut rng)?;
        out.slice_mut(s![start..end, ..]).assign(&probs);
        start = end;
    }
    Ok(out)
}

/// Runs one recurrent layer from the zero state; returns the trace and the
/// B x T x N sequence of hidden states.
fn run_recurrence<S: Scalar>(params: &LayerParams<S>, input: ArrayView3<S>) -> (Recurrence<S>, Array3<S>) {
    let (b, t_len, _) = input.dim();
    let n = params.units();
    let mut seq = Array3::zeros((b, t_len, n));
    match params {
        LayerParams::Ltc(p) => {
            let k = p.unfold_steps;
            let dt = p.step_size / S::lit(k as f64);
            let mut states = Vec::with_capacity(t_len * k + 1);
            let mut gates = Vec::with_capacity(t_len * k);
            let mut x = Array2::zeros((b, n));
            for t in 0..t_len {
                let u = input.index_axis(Axis(1), t);
                for _ in 0..k {
                    let (next, gate) = fused_rows(p, x.view(), u, dt);
                    states.push(x);
                    gates.push(gate);
                    x = next;
                }
                seq.index_axis_mut(Axis(1), t).assign(&x);
            }
            states.push(x);
            (Recurrence::Ltc { states, gates, dt }, seq)
        }
        LayerParams::Lstm(p) => {
            let mut hiddens = vec![Array2::zeros((b, n))];
            let mut cells = vec![Array2::zeros((b, n))];
            let mut steps = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let u = input.index_axis(Axis(1), t);
                let step = lstm_rows(p, hiddens[t].view(), cells[t].view(), u);
                seq.index_axis_mut(Axis(1), t).assign(&step.hidden);
                hiddens.push(step.hidden.clone());
                cells.push(step.cell.clone());
                steps.push(step);
            }
            (Recurrence::Lstm { hiddens, cells, steps }, seq)
        }
    }
}

/// Mean clipped categorical cross-entropy and its gradient w.r.t. the logits.
fn loss_logit_grad<S: Scalar>(probs: &Array2<S>, onehot: ArrayView2<S>) -> Array2<S> {
    let b = S::lit(probs.nrows() as f64);
    let lo = S::lit(PROB_CLIP);
    let hi = S::one() - lo;
    let mut grad = Array2::zeros(probs.raw_dim());
    for ((mut g, p), y) in grad.rows_mut().into_iter().zip(probs.rows()).zip(onehot.rows()) {
        let p_true: S = p.iter().zip(y.iter()).fold(S::zero(), |acc, (&p, &y)| acc + p * y);
        // Inside the clip range d(-ln p_true)/dz = p - y; outside it the loss is constant.
        if p_true > lo && p_true < hi {
            Zip::from(&mut g).and(&p).and(&y).for_each(|g, &p, &y| *g = (p - y) / b);
        }
    }
    grad
}

/// Exact gradients of the mean clipped cross-entropy for the batch that
/// produced `trace`.
pub fn backward<S: Scalar>(
    model: &ModelParams<S>,
    trace: &ForwardTrace<S>,
    onehot: ArrayView2<S>,
) -> Result<Gradients<S>> {
    let (b, c) = onehot.dim();
    if b != trace.batch_size() || c != model.spec.num_classes {
        return Err(Error::shape(
            "one-hot labels",
            format!("{}x{}", trace.batch_size(), model.spec.num_classes),
            format!("{b}x{c}"),
        ));
    }
    if trace.layers.len() != model.layers.len()
        || trace.head_input.ncols() != model.output_weights.ncols()
    {
        return Err(Error::Contract("trace was not produced by this model".into()));
    }
    for row in onehot.rows() {
        let ones = row.iter().filter(|&&v| v == S::one()).count();
        let zeros = row.iter().filter(|&&v| v == S::zero()).count();
        if ones != 1 || ones + zeros != c {
            return Err(Error::Data("label rows must be one-hot".into()));
        }
    }

    let d_logits = loss_logit_grad(&trace.probabilities, onehot);
    let d_out_w = d_logits.t().dot(&trace.head_input);
    let d_out_b = d_logits.sum_axis(Axis(0));
    let mut d_head = Some(d_logits.dot(&model.output_weights));

    let mut layer_grads: Vec<Vec<ArrayD<S>>> = Vec::with_capacity(model.layers.len());
    // Gradient w.r.t. the (post-dropout) output of the layer being processed.
    let mut d_seq: Option<Array3<S>> = None;
    for (idx, (params, lt)) in model.layers.iter().zip(&trace.layers).enumerate().rev() {
        let spec = &model.spec.layers[idx];
        let (b, t_len, _) = lt.input.dim();
        let n = params.units();
        let mut d_states = Array3::<S>::zeros((b, t_len, n));
        if spec.return_sequences {
            let upstream = d_seq
                .take()
                .ok_or_else(|| Error::Contract("missing upstream sequence gradient".into()))?;
            d_states.assign(&upstream);
        } else {
            let d_final = d_head
                .take()
                .ok_or_else(|| Error::Contract("only the last layer may drop sequences".into()))?;
            d_states.index_axis_mut(Axis(1), t_len - 1).assign(&d_final);
        }
        match &lt.mask {
            Some(OutputMask::Sequence(m)) => d_states *= m,
            Some(OutputMask::Final(m)) => {
                let mut last = d_states.index_axis_mut(Axis(1), t_len - 1);
                last *= m;
            }
            None => {}
        }
        let (grads, d_input) = match (params, &lt.recurrence) {
            (LayerParams::Ltc(p), Recurrence::Ltc { states, gates, dt }) => {
                ltc_backward(p, lt.input.view(), states, gates, *dt, &d_states)
            }
            (LayerParams::Lstm(p), Recurrence::Lstm { hiddens, cells, steps }) => {
                lstm_backward(p, lt.input.view(), hiddens, cells, steps, &d_states)
            }
            _ => return Err(Error::Contract(format!("layer {idx} trace has the wrong cell kind"))),
        };
        layer_grads.push(grads);
        d_seq = Some(d_input);
    }
    layer_grads.reverse();

    let mut tensors: Vec<ArrayD<S>> = layer_grads.into_iter().flatten().collect();
    tensors.push(d_out_w.into_dyn());
    tensors.push(d_out_b.into_dyn());
    Ok(Gradients {
        names: model.tensor_names(),
        tensors,
    })
}

/// BPTT through all T*k fused steps of one LTC layer.
fn ltc_backward<S: Scalar>(
    p: &LtcCellParams<S>,
    input: ArrayView3<S>,
    states: &[Array2<S>],
    gates: &[Array2<S>],
    dt: S,
    d_states: &Array3<S>,
) -> (Vec<ArrayD<S>>, Array3<S>) {
    let (b, t_len, m) = input.dim();
    let n = p.units();
    let k = p.unfold_steps;
    let one = S::one();

    let mut g_rec = Array2::<S>::zeros((n, n));
    let mut g_in = Array2::<S>::zeros((n, m));
    let mut g_bias = Array1::<S>::zeros(n);
    let mut g_attr = Array1::<S>::zeros(n);
    let mut g_tau = Array1::<S>::zeros(n);
    let mut d_input = Array3::<S>::zeros((b, t_len, m));

    let mut dx = Array2::<S>::zeros((b, n));
    let mut d_pre = Array2::<S>::zeros((b, n));
    for t in (0..t_len).rev() {
        dx += &d_states.index_axis(Axis(1), t);
        let u = input.index_axis(Axis(1), t);
        for s in (0..k).rev() {
            let step = t * k + s;
            let x_next = &states[step + 1];
            let f = &gates[step];
            for r in 0..b {
                for i in 0..n {
                    let tau = p.time_constants[i];
                    let fi = f[[r, i]];
                    let den = one + dt * (one / tau + fi);
                    let g = dx[[r, i]];
                    let xn = x_next[[r, i]];
                    let df = g * dt * (p.attractor[i] - xn) / den;
                    g_attr[i] += g * dt * fi / den;
                    g_tau[i] += g * xn * dt / (tau * tau * den);
                    d_pre[[r, i]] = df * fi * (one - fi);
                    dx[[r, i]] = g / den;
                }
            }
            g_rec += &d_pre.t().dot(&states[step]);
            g_in += &d_pre.t().dot(&u);
            g_bias += &d_pre.sum_axis(Axis(0));
            let mut du = d_input.index_axis_mut(Axis(1), t);
            du += &d_pre.dot(&p.input_weights);
            dx += &d_pre.dot(&p.recurrent_weights);
        }
    }
    (
        vec![
            g_rec.into_dyn(),
            g_in.into_dyn(),
            g_bias.into_dyn(),
            g_attr.into_dyn(),
            g_tau.into_dyn(),
        ],
        d_input,
    )
}

/// BPTT through one LSTM layer.
fn lstm_backward<S: Scalar>(
    p: &LstmCellParams<S>,
    input: ArrayView3<S>,
    hiddens: &[Array2<S>],
    cells: &[Array2<S>],
    steps: &[LstmStep<S>],
    d_states: &Array3<S>,
) -> (Vec<ArrayD<S>>, Array3<S>) {
    let (b, t_len, m) = input.dim();
    let n = p.units();
    let one = S::one();
    let gates = [&p.input_gate, &p.forget_gate, &p.candidate, &p.output_gate];
    let mut g_input: Vec<Array2<S>> = (0..4).map(|_| Array2::zeros((n, m))).collect();
    let mut g_rec: Vec<Array2<S>> = (0..4).map(|_| Array2::zeros((n, n))).collect();
    let mut g_bias: Vec<Array1<S>> = (0..4).map(|_| Array1::zeros(n)).collect();
    let mut d_input = Array3::<S>::zeros((b, t_len, m));

    let mut dh = Array2::<S>::zeros((b, n));
    let mut dc = Array2::<S>::zeros((b, n));
    for t in (0..t_len).rev() {
        dh += &d_states.index_axis(Axis(1), t);
        let st = &steps[t];
        let c_prev = &cells[t];
        let h_prev = &hiddens[t];
        let u = input.index_axis(Axis(1), t);

        let d_o = &dh * &st.cell_tanh;
        let dc_total = &dc + &(&dh * &st.output_gate * &st.cell_tanh.mapv(|v| one - v * v));
        let d_i = &dc_total * &st.candidate;
        let d_g = &dc_total * &st.input_gate;
        let d_f = &dc_total * c_prev;
        dc = &dc_total * &st.forget_gate;

        let sig_grad = |d: Array2<S>, a: &Array2<S>| d * &a.mapv(|v| v * (one - v));
        let pre = [
            sig_grad(d_i, &st.input_gate),
            sig_grad(d_f, &st.forget_gate),
            d_g * &st.candidate.mapv(|v| one - v * v),
            sig_grad(d_o, &st.output_gate),
        ];

        let mut dh_prev = Array2::<S>::zeros((b, n));
        let mut du = d_input.index_axis_mut(Axis(1), t);
        for (j, (da, w)) in pre.iter().zip(gates).enumerate() {
            g_input[j] += &da.t().dot(&u);
            g_rec[j] += &da.t().dot(h_prev);
            g_bias[j] += &da.sum_axis(Axis(0));
            du += &da.dot(&w.input);
            dh_prev += &da.dot(&w.recurrent);
        }
        dh = dh_prev;
    }
    let mut out = Vec::with_capacity(12);
    for j in 0..4 {
        out.push(std::mem::take(&mut g_input[j]).into_dyn());
        out.push(std::mem::take(&mut g_rec[j]).into_dyn());
        out.push(std::mem::take(&mut g_bias[j]).into_dyn());
    }
    (out, d_input)
}
