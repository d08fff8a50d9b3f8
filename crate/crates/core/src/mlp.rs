//! Timestep-conditioned MLP used for both the base noise predictors and the
//! pair discriminator.
//!
//! Each hidden layer is `Linear -> LayerNorm -> (1 + scale(t)) * h + shift(t)
//! -> SiLU`. The per-layer `(scale, shift)` come from a shared projection of a
//! sinusoidal embedding of `t`. Timestep work is done once per distinct `t`
//! in a batch and gathered onto the rows.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{linear, silu, Eager, Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_channels: Vec<usize>,
    pub output_dim: usize,
    /// Width of the sinusoidal timestep embedding.
    pub timestep_embed_dim: usize,
    /// Width of the projection shared by all per-layer scale/shift heads.
    pub time_hidden_dim: usize,
    /// Largest timestep the network accepts (`T`).
    pub max_timestep: usize,
    /// Start the output layer at exactly zero.
    pub zero_init_output: bool,
}

impl MlpSpec {
    /// Base noise predictor: 1 -> [16, 64, 256, 64, 16] -> 1, embedding 256.
    pub fn base(max_timestep: usize) -> Self {
        Self {
            input_dim: 1,
            hidden_channels: vec![16, 64, 256, 64, 16],
            output_dim: 1,
            timestep_embed_dim: 256,
            time_hidden_dim: 32,
            max_timestep,
            zero_init_output: false,
        }
    }

    /// Pair discriminator: 2 -> [64, 32, 8] -> 1, embedding 64, zero output
    /// layer. The time path is 4x the embedding width.
    pub fn discriminator(max_timestep: usize) -> Self {
        Self {
            input_dim: 2,
            hidden_channels: vec![64, 32, 8],
            output_dim: 1,
            timestep_embed_dim: 64,
            time_hidden_dim: 256,
            max_timestep,
            zero_init_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid network spec: {m}")));
        if self.hidden_channels.is_empty() {
            return bad("hidden_channels is empty");
        }
        if self.input_dim == 0
            || self.output_dim == 0
            || self.time_hidden_dim == 0
            || self.hidden_channels.contains(&0)
        {
            return bad("all dimensions must be positive");
        }
        if self.timestep_embed_dim < 2 || self.timestep_embed_dim % 2 != 0 {
            return bad("timestep_embed_dim must be a positive even number");
        }
        if self.max_timestep == 0 {
            return bad("max_timestep must be positive");
        }
        Ok(())
    }

    /// `(name, rows, cols, fan_in)` for every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, usize, usize, usize)> {
        let (e, h) = (self.timestep_embed_dim, self.time_hidden_dim);
        let mut out = vec![
            ("time.w".to_string(), e, h, e),
            ("time.b".to_string(), 1, h, e),
        ];
        let mut prev = self.input_dim;
        for (l, &c) in self.hidden_channels.iter().enumerate() {
            out.push((format!("layer{l}.w"), prev, c, prev));
            out.push((format!("layer{l}.b"), 1, c, prev));
            out.push((format!("layer{l}.scale.w"), h, c, h));
            out.push((format!("layer{l}.scale.b"), 1, c, h));
            out.push((format!("layer{l}.shift.w"), h, c, h));
            out.push((format!("layer{l}.shift.b"), 1, c, h));
            prev = c;
        }
        out.push(("out.w".to_string(), prev, self.output_dim, prev));
        out.push(("out.b".to_string(), 1, self.output_dim, prev));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, r, c, _)| r * c).sum()
    }
}

/// Flat list of parameter tensors laid out per [`MlpSpec::param_layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams(pub Vec<Tensor>);

impl NetworkParams {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.0
    }

    pub fn scalar_count(&self) -> usize {
        self.0.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }
}

/// Sinusoidal embedding rows for each timestep in `ts`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10_000f64).ln() * k as f64 / half as f64).exp())
        .collect();
    Tensor::from_fn(ts.len(), dim, |r, c| {
        let t = ts[r] as f64;
        if c < half {
            (t * freqs[c]).sin()
        } else {
            (t * freqs[c - half]).cos()
        }
    })
}

/// Distinct timesteps of a batch and, per row, the index of its timestep.
fn dedup_timesteps(ts: &[usize], rows: usize) -> (Vec<usize>, Rc<[usize]>) {
    if ts.len() == 1 {
        return (vec![ts[0]], Rc::from(vec![0; rows]));
    }
    let mut slot = BTreeMap::new();
    for &t in ts {
        let next = slot.len();
        slot.entry(t).or_insert(next);
    }
    let mut unique = vec![0; slot.len()];
    for (&t, &i) in &slot {
        unique[i] = t;
    }
    let index: Vec<usize> = ts.iter().map(|t| slot[t]).collect();
    (unique, Rc::from(index))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: NetworkParams,
}

impl Mlp {
    /// Fan-in uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases; the output layer is zero when requested.
    pub fn build(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, "mlp-init", 0);
        let n_layout = spec.param_layout().len();
        let tensors = spec
            .param_layout()
            .into_iter()
            .enumerate()
            .map(|(i, (_, r, c, fan_in))| {
                let is_output = i >= n_layout - 2;
                if is_output && spec.zero_init_output {
                    Tensor::zeros(r, c)
                } else {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(r, c, |_, _| rng.gen_range(-bound..bound))
                }
            })
            .collect();
        Ok(Self {
            spec,
            params: NetworkParams(tensors),
        })
    }

    pub fn from_params(spec: MlpSpec, params: NetworkParams) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != params.0.len() {
            return Err(Error::shape(
                "Mlp::from_params",
                format!("expected {} tensors, got {}", layout.len(), params.0.len()),
            ));
        }
        for ((name, r, c, _), t) in layout.iter().zip(&params.0) {
            if t.shape() != [*r, *c] {
                return Err(Error::shape(
                    "Mlp::from_params",
                    format!("{name}: expected [{r}, {c}], got {:?}", t.shape()),
                ));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    /// Checks an `[rows, input_dim]` input and its timesteps (one per row,
    /// or a single shared one).
    pub fn check_input(&self, input: &Tensor, ts: &[usize]) -> Result<()> {
        if input.shape().len() != 2 || input.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "mlp forward",
                format!(
                    "expected [batch, {}], got {:?}",
                    self.spec.input_dim,
                    input.shape()
                ),
            ));
        }
        if ts.len() != 1 && ts.len() != input.rows() {
            return Err(Error::shape(
                "mlp forward",
                format!("{} timesteps for {} rows", ts.len(), input.rows()),
            ));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.spec.max_timestep) {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.spec.max_timestep
            )));
        }
        Ok(())
    }

    /// Network evaluation on any backend, with parameters already lifted
    /// into it. Shapes are assumed checked.
    pub fn forward_graph<G: Graph>(
        spec: &MlpSpec,
        g: &G,
        params: &[G::Value],
        input: &G::Value,
        ts: &[usize],
    ) -> G::Value {
        let (rows, _) = g.dims(input);
        let (unique, index) = dedup_timesteps(ts, rows);
        let emb = g.constant(timestep_embedding(&unique, spec.timestep_embed_dim));
        let th = silu(g, &linear(g, &emb, &params[0], &params[1]));

        let mut h = input.clone();
        for l in 0..spec.hidden_channels.len() {
            let p = &params[2 + 6 * l..2 + 6 * (l + 1)];
            let scale = linear(g, &th, &p[2], &p[3]);
            let shift = linear(g, &th, &p[4], &p[5]);
            h = g.adaptive_block(&h, &p[0], &p[1], &scale, &shift, index.clone(), LAYER_NORM_EPS);
        }
        let n = params.len();
        linear(g, &h, &params[n - 2], &params[n - 1])
    }

    pub fn forward(&self, input: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.check_input(input, ts)?;
        let out = Self::forward_graph(&self.spec, &Eager, self.params.tensors(), input, ts);
        finite(out, "network output")
    }

    /// Records the parameters as leaves of `tape`.
    pub fn param_leaves(&self, tape: &Tape) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect()
    }

    pub fn forward_on(&self, tape: &Tape, params: &[Var], input: Var, ts: &[usize]) -> Var {
        Self::forward_graph(&self.spec, tape, params, &input, ts)
    }

    fn require_scalar_output(&self) -> Result<()> {
        if self.spec.output_dim != 1 {
            return Err(Error::Contract(format!(
                "input gradient needs a scalar-output network, output_dim = {}",
                self.spec.output_dim
            )));
        }
        Ok(())
    }

    /// Derivative of each row's scalar output with respect to that row's
    /// input coordinates. Rows are independent, so differentiating the batch
    /// sum gives every row's gradient at once.
    pub fn grad_input(&self, input: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.require_scalar_output()?;
        self.check_input(input, ts)?;
        let tape = Tape::new();
        let params = self.param_leaves(&tape);
        let x = tape.leaf(input.clone());
        let out = self.forward_on(&tape, &params, x, ts);
        let total = tape.sum_all(&out);
        let g = tape.grad(total, &[x])?[0];
        finite(tape.value(g), "input gradient")
    }

    /// First-order parameter gradients of `loss_fn(output)`.
    pub fn grad_params(
        &self,
        input: &Tensor,
        ts: &[usize],
        loss_fn: impl FnOnce(&Tape, Var) -> Var,
    ) -> Result<(f64, NetworkParams)> {
        self.check_input(input, ts)?;
        let tape = Tape::new();
        let params = self.param_leaves(&tape);
        let x = tape.leaf(input.clone());
        let out = self.forward_on(&tape, &params, x, ts);
        let loss = loss_fn(&tape, out);
        collect_grads(&tape, loss, &params)
    }

    /// Parameter gradients of a scalar loss built from the network's input
    /// gradient (and optionally its output). `loss_fn` receives
    /// `(tape, grad_input, output)`.
    pub fn grad_params_through_input_grad(
        &self,
        input: &Tensor,
        ts: &[usize],
        loss_fn: impl FnOnce(&Tape, Var, Var) -> Var,
    ) -> Result<(f64, NetworkParams)> {
        self.require_scalar_output()?;
        self.check_input(input, ts)?;
        let tape = Tape::new();
        let params = self.param_leaves(&tape);
        let x = tape.leaf(input.clone());
        let out = self.forward_on(&tape, &params, x, ts);
        let total = tape.sum_all(&out);
        let gx = tape.grad(total, &[x])?[0];
        let loss = loss_fn(&tape, gx, out);
        collect_grads(&tape, loss, &params)
    }
}

/// Value of `loss` and its gradients with respect to `params`.
pub fn collect_grads(tape: &Tape, loss: Var, params: &[Var]) -> Result<(f64, NetworkParams)> {
    let grads = tape.grad(loss, params)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = NetworkParams(grads.into_iter().map(|g| tape.value(g)).collect());
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite parameter gradient".into()));
    }
    Ok((value, grads))
}

fn finite(t: Tensor, what: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Numeric(format!("{what} is not finite")))
    }
}
