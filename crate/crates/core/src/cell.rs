//! Recurrent cells: the liquid time-constant (LTC) cell integrated with a
//! fused semi-implicit solver, and a standard LSTM cell.
//!
//! The LTC hidden state follows
//!
//! ```text
//! dx/dt = -(1/tau + f(x, u)) * x + f(x, u) * A
//! f(x, u) = logistic(W_rec x + W_in u + b)
//! ```
//!
//! and one solver step of size `dt` is
//!
//! ```text
//! x' = (x + dt * f * A) / (1 + dt * (1/tau + f))
//! ```
//!
//! The denominator is always greater than one, so the step is stable for any
//! positive `dt` and `|x'| <= max(|x|, |A|)`.
//!
//! Every function here also has a batched form (rows = samples) that the
//! network module uses; the single-vector API is a thin wrapper around it.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smallest time constant the optimizer is allowed to produce.
pub const MIN_TIME_CONSTANT: f64 = 1e-3;

/// Solver settings shared by all LTC layers of a network.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    /// Integration time covered by one input timestep.
    pub step_size: f64,
    /// Number of fused steps per input timestep (k).
    pub unfold_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            unfold_steps: 6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "step_size must be positive and finite, got {}",
                self.step_size
            )));
        }
        if self.unfold_steps == 0 {
            return Err(Error::Config("unfold_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Counts multiply-accumulate operations spent in gate matrix products.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounter {
    multiply_accumulate_count: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> u64 {
        self.multiply_accumulate_count
    }

    pub(crate) fn add(&mut self, macs: u64) {
        self.multiply_accumulate_count += macs;
    }
}

/// Hidden state of one sample. `cell` is present only for LSTM layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState<S> {
    pub hidden: Array1<S>,
    pub cell: Option<Array1<S>>,
}

impl<S: Scalar> NeuronState<S> {
    /// All-zeros LTC state.
    pub fn zeros(units: usize) -> Self {
        Self {
            hidden: Array1::zeros(units),
            cell: None,
        }
    }

    /// All-zeros LSTM state (hidden and cell).
    pub fn zeros_lstm(units: usize) -> Self {
        Self {
            hidden: Array1::zeros(units),
            cell: Some(Array1::zeros(units)),
        }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(self.hidden.iter()) && self.cell.as_ref().is_none_or(|c| all_finite(c.iter()))
    }
}

/// Parameters of one LTC cell with N units and M inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LtcCellParams<S> {
    /// N x N
    pub recurrent_weights: Array2<S>,
    /// N x M
    pub input_weights: Array2<S>,
    pub gate_bias: Array1<S>,
    /// Per-neuron target the gate pulls the state towards (A).
    pub attractor: Array1<S>,
    /// Per-neuron time constant tau, strictly positive.
    pub time_constants: Array1<S>,
    pub step_size: S,
    pub unfold_steps: usize,
}

impl<S: Scalar> LtcCellParams<S> {
    /// Builds and validates a parameter set.
    pub fn new(
        recurrent_weights: Array2<S>,
        input_weights: Array2<S>,
        gate_bias: Array1<S>,
        attractor: Array1<S>,
        time_constants: Array1<S>,
        step_size: S,
        unfold_steps: usize,
    ) -> Result<Self> {
        let params = Self {
            recurrent_weights,
            input_weights,
            gate_bias,
            attractor,
            time_constants,
            step_size,
            unfold_steps,
        };
        params.validate()?;
        Ok(params)
    }

    /// Cell whose gate weights and bias are all zero (so every gate is 0.5).
    pub fn zero_gates(
        units: usize,
        inputs: usize,
        attractor: Array1<S>,
        time_constants: Array1<S>,
        solver: SolverConfig,
    ) -> Result<Self> {
        Self::new(
            Array2::zeros((units, units)),
            Array2::zeros((units, inputs)),
            Array1::zeros(units),
            attractor,
            time_constants,
            S::lit(solver.step_size),
            solver.unfold_steps,
        )
    }

    /// Random initialization: Glorot-uniform gate weights, zero gate bias,
    /// attractor uniform in [-1, 1], time constants uniform in [0.5, 2].
    pub fn init<R: Rng + ?Sized>(
        units: usize,
        inputs: usize,
        solver: SolverConfig,
        rng: &mut R,
    ) -> Result<Self> {
        solver.validate()?;
        Self::new(
            glorot_uniform(units, units, rng),
            glorot_uniform(units, inputs, rng),
            Array1::zeros(units),
            uniform_vec(units, -1.0, 1.0, rng),
            uniform_vec(units, 0.5, 2.0, rng),
            S::lit(solver.step_size),
            solver.unfold_steps,
        )
    }

    pub fn units(&self) -> usize {
        self.gate_bias.len()
    }

    pub fn inputs(&self) -> usize {
        self.input_weights.ncols()
    }

    /// Dimension and range checks.
    pub fn validate(&self) -> Result<()> {
        let n = self.gate_bias.len();
        if n == 0 {
            return Err(Error::Config("LTC cell needs at least one unit".into()));
        }
        check_dims("recurrent_weights", self.recurrent_weights.dim(), (n, n))?;
        if self.input_weights.nrows() != n {
            return Err(Error::shape(
                "input_weights rows",
                n,
                self.input_weights.nrows(),
            ));
        }
        check_len("attractor", self.attractor.len(), n)?;
        check_len("time_constants", self.time_constants.len(), n)?;
        if !(self.step_size.is_finite() && self.step_size > S::zero()) {
            return Err(Error::Config(format!(
                "step_size must be positive and finite, got {}",
                self.step_size
            )));
        }
        if self.unfold_steps == 0 {
            return Err(Error::Config("unfold_steps must be at least 1".into()));
        }
        if self.time_constants.iter().any(|&t| !(t > S::zero())) {
            return Err(Error::Config("time constants must be strictly positive".into()));
        }
        let finite = all_finite(self.recurrent_weights.iter())
            && all_finite(self.input_weights.iter())
            && all_finite(self.gate_bias.iter())
            && all_finite(self.attractor.iter())
            && all_finite(self.time_constants.iter());
        if !finite {
            return Err(Error::Numeric("LTC cell parameters contain non-finite entries".into()));
        }
        Ok(())
    }

    /// Multiply-accumulates of one input timestep, `k * (N^2 + N*M)`.
    pub fn macs_per_timestep(&self) -> u64 {
        let n = self.units() as u64;
        let m = self.inputs() as u64;
        self.unfold_steps as u64 * (n * n + n * m)
    }
}

/// Weights of one LSTM gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights<S> {
    /// N x M
    pub input: Array2<S>,
    /// N x N
    pub recurrent: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> GateWeights<S> {
    fn init<R: Rng + ?Sized>(units: usize, inputs: usize, bias: f64, rng: &mut R) -> Self {
        Self {
            input: glorot_uniform(units, inputs, rng),
            recurrent: glorot_uniform(units, units, rng),
            bias: Array1::from_elem(units, S::lit(bias)),
        }
    }

    fn zeros(units: usize, inputs: usize) -> Self {
        Self {
            input: Array2::zeros((units, inputs)),
            recurrent: Array2::zeros((units, units)),
            bias: Array1::zeros(units),
        }
    }

    /// `input_rows * W_in^T + hidden_rows * W_rec^T + b`
    pub(crate) fn preactivation(&self, hidden: ArrayView2<S>, input: ArrayView2<S>) -> Array2<S> {
        let mut pre = input.dot(&self.input.t());
        pre += &hidden.dot(&self.recurrent.t());
        pre += &self.bias;
        pre
    }

    fn validate(&self, name: &str, units: usize, inputs: usize) -> Result<()> {
        check_dims(&format!("{name}.input"), self.input.dim(), (units, inputs))?;
        check_dims(&format!("{name}.recurrent"), self.recurrent.dim(), (units, units))?;
        check_len(&format!("{name}.bias"), self.bias.len(), units)?;
        if !(all_finite(self.input.iter())
            && all_finite(self.recurrent.iter())
            && all_finite(self.bias.iter()))
        {
            return Err(Error::Numeric(format!("LSTM gate `{name}` has non-finite entries")));
        }
        Ok(())
    }
}

/// Standard LSTM cell parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams<S> {
    pub input_gate: GateWeights<S>,
    pub forget_gate: GateWeights<S>,
    pub candidate: GateWeights<S>,
    pub output_gate: GateWeights<S>,
}

impl<S: Scalar> LstmCellParams<S> {
    /// Glorot-uniform weights, zero biases except the forget gate (bias 1).
    pub fn init<R: Rng + ?Sized>(units: usize, inputs: usize, rng: &mut R) -> Self {
        Self {
            input_gate: GateWeights::init(units, inputs, 0.0, rng),
            forget_gate: GateWeights::init(units, inputs, 1.0, rng),
            candidate: GateWeights::init(units, inputs, 0.0, rng),
            output_gate: GateWeights::init(units, inputs, 0.0, rng),
        }
    }

    pub fn zeros(units: usize, inputs: usize) -> Self {
        Self {
            input_gate: GateWeights::zeros(units, inputs),
            forget_gate: GateWeights::zeros(units, inputs),
            candidate: GateWeights::zeros(units, inputs),
            output_gate: GateWeights::zeros(units, inputs),
        }
    }

    pub fn units(&self) -> usize {
        self.input_gate.bias.len()
    }

    pub fn inputs(&self) -> usize {
        self.input_gate.input.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.units(), self.inputs());
        if n == 0 {
            return Err(Error::Config("LSTM cell needs at least one unit".into()));
        }
        self.input_gate.validate("input_gate", n, m)?;
        self.forget_gate.validate("forget_gate", n, m)?;
        self.candidate.validate("candidate", n, m)?;
        self.output_gate.validate("output_gate", n, m)
    }

    pub fn macs_per_timestep(&self) -> u64 {
        let n = self.units() as u64;
        let m = self.inputs() as u64;
        4 * (n * n + n * m)
    }
}

/// Gate activations `logistic(W_rec x + W_in u + b)`, every entry in (0, 1).
pub fn gate<S: Scalar>(
    params: &LtcCellParams<S>,
    state: &NeuronState<S>,
    input: ArrayView1<S>,
) -> Result<Array1<S>> {
    check_single(params, state, input)?;
    let hidden = state.hidden.view().insert_axis(Axis(0));
    let input = input.insert_axis(Axis(0));
    Ok(gate_rows(params, hidden, input).index_axis_move(Axis(0), 0))
}

/// One fused semi-implicit step of size `dt`.
pub fn fused_step<S: Scalar>(
    params: &LtcCellParams<S>,
    state: &NeuronState<S>,
    input: ArrayView1<S>,
    dt: S,
) -> Result<NeuronState<S>> {
    check_single(params, state, input)?;
    check_dt(dt)?;
    check_finite_inputs(state, input)?;
    let hidden = state.hidden.view().insert_axis(Axis(0));
    let input = input.insert_axis(Axis(0));
    let (next, _) = fused_rows(params, hidden, input, dt);
    Ok(NeuronState {
        hidden: next.index_axis_move(Axis(0), 0),
        cell: None,
    })
}

/// Advances one input timestep: `unfold_steps` fused steps of size
/// `step_size / unfold_steps` with the input held constant.
pub fn ltc_unfold<S: Scalar>(
    params: &LtcCellParams<S>,
    state: &NeuronState<S>,
    input: ArrayView1<S>,
    counter: &mut OpCounter,
) -> Result<NeuronState<S>> {
    check_single(params, state, input)?;
    check_finite_inputs(state, input)?;
    let dt = params.step_size / S::lit(params.unfold_steps as f64);
    let input_row = input.insert_axis(Axis(0));
    let mut hidden = state.hidden.clone().insert_axis(Axis(0));
    for _ in 0..params.unfold_steps {
        let (next, _) = fused_rows(params, hidden.view(), input_row, dt);
        hidden = next;
    }
    counter.add(params.macs_per_timestep());
    Ok(NeuronState {
        hidden: hidden.index_axis_move(Axis(0), 0),
        cell: None,
    })
}

/// Runs an LTC cell over a `T x M` input sequence from the all-zeros state,
/// returning the state after every timestep.
pub fn ltc_sequence<S: Scalar>(
    params: &LtcCellParams<S>,
    inputs: ArrayView2<S>,
    counter: &mut OpCounter,
) -> Result<Vec<NeuronState<S>>> {
    let mut state = NeuronState::zeros(params.units());
    let mut states = Vec::with_capacity(inputs.nrows());
    for row in inputs.rows() {
        state = ltc_unfold(params, &state, row, counter)?;
        states.push(state.clone());
    }
    Ok(states)
}

/// One LSTM recurrence step.
pub fn lstm_step<S: Scalar>(
    params: &LstmCellParams<S>,
    state: &NeuronState<S>,
    input: ArrayView1<S>,
) -> Result<NeuronState<S>> {
    let n = params.units();
    check_len("LSTM state", state.hidden.len(), n)?;
    check_len("LSTM input", input.len(), params.inputs())?;
    let cell = match &state.cell {
        Some(c) => {
            check_len("LSTM cell state", c.len(), n)?;
            c.clone()
        }
        None => Array1::zeros(n),
    };
    let step = lstm_rows(
        params,
        state.hidden.view().insert_axis(Axis(0)),
        cell.view().insert_axis(Axis(0)),
        input.insert_axis(Axis(0)),
    );
    Ok(NeuronState {
        hidden: step.hidden.index_axis_move(Axis(0), 0),
        cell: Some(step.cell.index_axis_move(Axis(0), 0)),
    })
}

// ---- batched kernels --------------------------------------------------------

pub(crate) fn gate_rows<S: Scalar>(
    params: &LtcCellParams<S>,
    hidden: ArrayView2<S>,
    input: ArrayView2<S>,
) -> Array2<S> {
    let mut pre = hidden.dot(&params.recurrent_weights.t());
    pre += &input.dot(&params.input_weights.t());
    pre += &params.gate_bias;
    pre.mapv_inplace(open_logistic);
    pre
}

/// Logistic kept strictly inside (0, 1): in floating point it otherwise
/// rounds to exactly 1 for arguments above ~37.
fn open_logistic<S: Scalar>(a: S) -> S {
    let upper = S::one() - S::epsilon() / S::lit(2.0);
    a.logistic().max(S::min_positive_value()).min(upper)
}

/// Returns `(next_state, gate)` for a batch of rows.
pub(crate) fn fused_rows<S: Scalar>(
    params: &LtcCellParams<S>,
    hidden: ArrayView2<S>,
    input: ArrayView2<S>,
    dt: S,
) -> (Array2<S>, Array2<S>) {
    let gate = gate_rows(params, hidden, input);
    let one = S::one();
    let mut next = Array2::zeros(hidden.raw_dim());
    for ((mut out, x), f) in next
        .rows_mut()
        .into_iter()
        .zip(hidden.rows())
        .zip(gate.rows())
    {
        for i in 0..out.len() {
            let num = x[i] + dt * f[i] * params.attractor[i];
            let den = one + dt * (one / params.time_constants[i] + f[i]);
            out[i] = num / den;
        }
    }
    (next, gate)
}

/// Intermediate values of one batched LSTM step, kept for backprop.
#[derive(Debug, Clone)]
pub(crate) struct LstmStep<S> {
    pub input_gate: Array2<S>,
    pub forget_gate: Array2<S>,
    pub candidate: Array2<S>,
    pub output_gate: Array2<S>,
    pub cell: Array2<S>,
    pub cell_tanh: Array2<S>,
    pub hidden: Array2<S>,
}

pub(crate) fn lstm_rows<S: Scalar>(
    params: &LstmCellParams<S>,
    hidden: ArrayView2<S>,
    cell: ArrayView2<S>,
    input: ArrayView2<S>,
) -> LstmStep<S> {
    let sigmoid = |a: Array2<S>| a.mapv_into(Scalar::logistic);
    let input_gate = sigmoid(params.input_gate.preactivation(hidden, input));
    let forget_gate = sigmoid(params.forget_gate.preactivation(hidden, input));
    let output_gate = sigmoid(params.output_gate.preactivation(hidden, input));
    let candidate = params
        .candidate
        .preactivation(hidden, input)
        .mapv_into(|v| v.tanh());
    let new_cell = &forget_gate * &cell + &input_gate * &candidate;
    let cell_tanh = new_cell.mapv(|v| v.tanh());
    let new_hidden = &output_gate * &cell_tanh;
    LstmStep {
        input_gate,
        forget_gate,
        candidate,
        output_gate,
        cell: new_cell,
        cell_tanh,
        hidden: new_hidden,
    }
}

// ---- helpers ----------------------------------------------------------------

pub(crate) fn all_finite<'a, S: Scalar + 'a>(mut values: impl Iterator<Item = &'a S>) -> bool {
    values.all(|v| v.is_finite())
}

pub(crate) fn glorot_uniform<S: Scalar, R: Rng + ?Sized>(
    fan_out: usize,
    fan_in: usize,
    rng: &mut R,
) -> Array2<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_out, fan_in), || {
        S::lit(rng.random_range(-limit..=limit))
    })
}

fn uniform_vec<S: Scalar, R: Rng + ?Sized>(len: usize, lo: f64, hi: f64, rng: &mut R) -> Array1<S> {
    Array1::from_shape_simple_fn(len, || S::lit(rng.random_range(lo..=hi)))
}

fn check_dims(what: &str, actual: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if actual != expected {
        return Err(Error::shape(
            what,
            format!("{}x{}", expected.0, expected.1),
            format!("{}x{}", actual.0, actual.1),
        ));
    }
    Ok(())
}

fn check_len(what: &str, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::shape(what, expected, actual));
    }
    Ok(())
}

fn check_single<S: Scalar>(
    params: &LtcCellParams<S>,
    state: &NeuronState<S>,
    input: ArrayView1<S>,
) -> Result<()> {
    check_len("LTC state", state.hidden.len(), params.units())?;
    check_len("LTC input", input.len(), params.inputs())
}

fn check_dt<S: Scalar>(dt: S) -> Result<()> {
    if !(dt.is_finite() && dt > S::zero()) {
        return Err(Error::Numeric(format!("step size must be positive and finite, got {dt}")));
    }
    Ok(())
}

fn check_finite_inputs<S: Scalar>(state: &NeuronState<S>, input: ArrayView1<S>) -> Result<()> {
    if !state.is_finite() || !all_finite(input.iter()) {
        return Err(Error::Numeric("non-finite state or input".into()));
    }
    Ok(())
}
