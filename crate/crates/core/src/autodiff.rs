//! The differentiability contract.
//!
//! Every differentiable operation implements [`DiffOp`]: a pure forward map
//! plus a hand-written vector-Jacobian product. [`grad_check`] validates a
//! VJP against central finite differences, and [`Chain`] composes ops over a
//! fixed DAG, accumulating cotangents additively where a value fans out to
//! several consumers.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// A differentiable operation: tensors in, tensors out, with a reverse-mode
/// gradient. `vjp` receives the same inputs the forward saw plus one
/// cotangent per output, and returns one cotangent per input. It must be
/// linear in the output cotangents.
pub trait DiffOp {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>>;

    fn vjp(&self, inputs: &[Tensor], cotangents: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Absolute-error fallback: a coordinate with both analytic and numeric
/// gradient this close is accepted regardless of relative error.
pub const ABS_FLOOR: f64 = 1e-8;

/// Floor inside the relative-error denominator, guarding near-zero gradients.
pub const REL_DENOM_FLOOR: f64 = 1e-8;

/// Per-input summary from a finite-difference check.
#[derive(Clone, Debug, Serialize)]
pub struct GradEntry {
    pub input: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

/// Result of checking one op's VJP against central finite differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub op: String,
    pub h: f64,
    pub tol: f64,
    pub entries: Vec<GradEntry>,
    pub pass: bool,
}

/// Flat record shape used for machine-readable output.
#[derive(Serialize)]
struct FlatRecord<'a> {
    op: &'a str,
    input: usize,
    max_rel_err: f64,
    max_abs_err: f64,
    h: f64,
    pass: bool,
}

impl GradReport {
    /// One line per checked input.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "op={} input={} max_rel_err={:.3e} max_abs_err={:.3e} h={:.1e} pass={}\n",
                self.op, e.input, e.max_rel_err, e.max_abs_err, self.h, e.pass
            ));
        }
        out
    }

    /// JSON array with keys op, input, max_rel_err, max_abs_err, h, pass.
    pub fn to_json(&self) -> String {
        let records: Vec<FlatRecord> = self
            .entries
            .iter()
            .map(|e| FlatRecord {
                op: &self.op,
                input: e.input,
                max_rel_err: e.max_rel_err,
                max_abs_err: e.max_abs_err,
                h: self.h,
                pass: e.pass,
            })
            .collect();
        serde_json::to_string(&records).expect("grad report serializes")
    }
}

fn bumped(t: &Tensor, coord: usize, delta: f64) -> Result<Tensor> {
    let mut data = t.as_f64()?.to_vec();
    data[coord] += delta;
    Tensor::from_f64(t.shape(), data)
}

fn dot_all(cotangents: &[Tensor], outputs: &[Tensor]) -> Result<f64> {
    let mut acc = 0.0;
    for (v, o) in cotangents.iter().zip(outputs) {
        for (a, b) in v.as_f64()?.iter().zip(o.as_f64()?) {
            acc += a * b;
        }
    }
    Ok(acc)
}

/// Compare an op's VJP against central finite differences.
///
/// Draws a random cotangent for every output (seeded), then for each input
/// coordinate x_i compares the analytic cotangent with
/// `(<v, f(x+h e_i)> - <v, f(x-h e_i)>) / 2h`. The relative error uses a
/// floored denominator `max(|analytic|, |numeric|, 1e-8)`; a coordinate also
/// passes if the absolute error is below [`ABS_FLOOR`].
pub fn grad_check(
    op: &dyn DiffOp,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradReport> {
    for (i, t) in inputs.iter().enumerate() {
        if t.as_f64().is_err() {
            return Err(Error::value(
                "gradcheck",
                format!("input {i} of op {} must be float64", op.name()),
            ));
        }
    }
    let base_outputs = op.forward(inputs)?;
    for (i, o) in base_outputs.iter().enumerate() {
        if o.as_f64()?.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteForward {
                op: op.name().to_string(),
                input: i,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cotangents: Vec<Tensor> = base_outputs
        .iter()
        .map(|o| {
            let data = (0..o.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_f64(o.shape(), data)
        })
        .collect::<Result<_>>()?;

    let analytic = op.vjp(inputs, &cotangents)?;
    if analytic.len() != inputs.len() {
        return Err(Error::shape(
            "gradcheck",
            format!(
                "op {} returned {} cotangents for {} inputs",
                op.name(),
                analytic.len(),
                inputs.len()
            ),
        ));
    }

    let mut entries = Vec::with_capacity(inputs.len());
    for (idx, input) in inputs.iter().enumerate() {
        let grad = analytic[idx].as_f64()?;
        if grad.len() != input.numel() {
            return Err(Error::shape(
                "gradcheck",
                format!("cotangent {idx} of op {} has wrong size", op.name()),
            ));
        }
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut pass = true;
        for coord in 0..input.numel() {
            let mut probe = inputs.to_vec();
            probe[idx] = bumped(input, coord, h)?;
            let plus = dot_all(&cotangents, &op.forward(&probe)?)?;
            probe[idx] = bumped(input, coord, -h)?;
            let minus = dot_all(&cotangents, &op.forward(&probe)?)?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[coord];
            if !numeric.is_finite() {
                return Err(Error::NonFiniteForward {
                    op: op.name().to_string(),
                    input: idx,
                });
            }
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_DENOM_FLOOR);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            if rel >= tol && abs >= ABS_FLOOR {
                pass = false;
            }
        }
        entries.push(GradEntry {
            input: idx,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            pass,
        });
    }

    let pass = entries.iter().all(|e| e.pass);
    Ok(GradReport {
        op: op.name().to_string(),
        h,
        tol,
        entries,
        pass,
    })
}

/// Source of a node input inside a [`Chain`]: either one of the chain's
/// external inputs or an output of an earlier node.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Wire {
    Input(usize),
    Node { node: usize, output: usize },
}

struct ChainNode {
    op: Box<dyn DiffOp>,
    inputs: Vec<Wire>,
}

/// Saved forward values for every node, consumed by [`Chain::backward`].
pub struct ChainTrace {
    node_outputs: Vec<Vec<Tensor>>,
}

/// An explicit fixed DAG of [`DiffOp`]s. Nodes are evaluated in insertion
/// order; wires may only reference earlier nodes.
#[derive(Default)]
pub struct Chain {
    nodes: Vec<ChainNode>,
    outputs: Vec<Wire>,
}

impl Chain {
    pub fn new() -> Self {
        Chain::default()
    }

    /// Append a node; returns its index for later wiring.
    pub fn push(&mut self, op: Box<dyn DiffOp>, inputs: Vec<Wire>) -> usize {
        let idx = self.nodes.len();
        for w in &inputs {
            if let Wire::Node { node, .. } = w {
                assert!(*node < idx, "chain wires must reference earlier nodes");
            }
        }
        self.nodes.push(ChainNode { op, inputs });
        idx
    }

    /// Declare the chain's final outputs.
    pub fn set_outputs(&mut self, outputs: Vec<Wire>) {
        self.outputs = outputs;
    }

    fn resolve<'a>(
        &self,
        wire: Wire,
        inputs: &'a [Tensor],
        trace: &'a ChainTrace,
    ) -> Result<&'a Tensor> {
        match wire {
            Wire::Input(i) => inputs
                .get(i)
                .ok_or_else(|| Error::value("chain", format!("external input {i} out of range"))),
            Wire::Node { node, output } => trace
                .node_outputs
                .get(node)
                .and_then(|outs| outs.get(output))
                .ok_or_else(|| Error::value("chain", format!("wire to node {node}:{output} out of range"))),
        }
    }

    pub fn forward(&self, inputs: &[Tensor]) -> Result<ChainTrace> {
        let mut trace = ChainTrace {
            node_outputs: Vec::with_capacity(self.nodes.len()),
        };
        for node in &self.nodes {
            let args: Vec<Tensor> = node
                .inputs
                .iter()
                .map(|&w| self.resolve(w, inputs, &trace).cloned())
                .collect::<Result<_>>()?;
            let outs = node.op.forward(&args)?;
            trace.node_outputs.push(outs);
        }
        Ok(trace)
    }

    pub fn output_tensors(&self, inputs: &[Tensor], trace: &ChainTrace) -> Result<Vec<Tensor>> {
        self.outputs
            .iter()
            .map(|&w| self.resolve(w, inputs, trace).cloned())
            .collect()
    }

    /// Reverse pass: seeds the declared outputs with `out_cotangents`,
    /// applies each node's VJP in reverse order, and accumulates additively
    /// whenever a tensor feeds several consumers. Returns one cotangent per
    /// external input (zero tensors for inputs nothing depended on).
    pub fn backward(
        &self,
        inputs: &[Tensor],
        trace: &ChainTrace,
        out_cotangents: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        if out_cotangents.len() != self.outputs.len() {
            return Err(Error::shape(
                "chain",
                format!(
                    "got {} cotangents for {} chain outputs",
                    out_cotangents.len(),
                    self.outputs.len()
                ),
            ));
        }
        let mut node_cots: Vec<Vec<Option<Tensor>>> = trace
            .node_outputs
            .iter()
            .map(|outs| vec![None; outs.len()])
            .collect();
        let mut input_cots: Vec<Option<Tensor>> = vec![None; inputs.len()];

        let seed = |wire: Wire, cot: Tensor, node_cots: &mut Vec<Vec<Option<Tensor>>>, input_cots: &mut Vec<Option<Tensor>>| -> Result<()> {
            let target = self.resolve(wire, inputs, trace)?;
            if target.shape() != cot.shape() {
                return Err(Error::shape(
                    "chain",
                    format!(
                        "cotangent shape {:?} does not match forward output shape {:?}",
                        cot.shape(),
                        target.shape()
                    ),
                ));
            }
            let slot = match wire {
                Wire::Input(i) => &mut input_cots[i],
                Wire::Node { node, output } => &mut node_cots[node][output],
            };
            accumulate(slot, cot)?;
            Ok(())
        };

        for (wire, cot) in self.outputs.iter().zip(out_cotangents) {
            seed(*wire, cot.clone(), &mut node_cots, &mut input_cots)?;
        }

        for (idx, node) in self.nodes.iter().enumerate().rev() {
            if node_cots[idx].iter().all(Option::is_none) {
                continue; // nothing consumed this node's outputs
            }
            let cots: Vec<Tensor> = trace.node_outputs[idx]
                .iter()
                .zip(node_cots[idx].iter())
                .map(|(out, c)| match c {
                    Some(t) => Ok(t.clone()),
                    None => Tensor::zeros_f64(out.shape()),
                })
                .collect::<Result<_>>()?;
            let args: Vec<Tensor> = node
                .inputs
                .iter()
                .map(|&w| self.resolve(w, inputs, trace).cloned())
                .collect::<Result<_>>()?;
            let arg_cots = node.op.vjp(&args, &cots)?;
            if arg_cots.len() != node.inputs.len() {
                return Err(Error::shape(
                    "chain",
                    format!("op {} returned wrong number of cotangents", node.op.name()),
                ));
            }
            for (&wire, cot) in node.inputs.iter().zip(arg_cots) {
                seed(wire, cot, &mut node_cots, &mut input_cots)?;
            }
        }

        inputs
            .iter()
            .zip(input_cots)
            .map(|(input, c)| match c {
                Some(t) => Ok(t),
                None => Tensor::zeros_f64(input.shape()),
            })
            .collect()
    }
}

fn accumulate(slot: &mut Option<Tensor>, add: Tensor) -> Result<()> {
    match slot.take() {
        None => *slot = Some(add),
        Some(acc) => {
            if acc.shape() != add.shape() {
                return Err(Error::shape(
                    "chain",
                    format!(
                        "cotangent accumulation shape {:?} vs {:?}",
                        acc.shape(),
                        add.shape()
                    ),
                ));
            }
            let summed: Vec<f64> = acc
                .as_f64()?
                .iter()
                .zip(add.as_f64()?)
                .map(|(a, b)| a + b)
                .collect();
            *slot = Some(Tensor::from_f64(acc.shape(), summed)?);
        }
    }
    Ok(())
}

/// Run a linear chain of single-input, single-output ops forward and then
/// backward from `final_cotangent`, returning the cotangent of the first
/// op's input.
pub fn backprop_chain(
    ops: &[Box<dyn DiffOp>],
    input: &Tensor,
    final_cotangent: &Tensor,
) -> Result<Tensor> {
    let mut values = vec![input.clone()];
    for op in ops {
        let out = op.forward(std::slice::from_ref(values.last().unwrap()))?;
        if out.len() != 1 {
            return Err(Error::shape(
                "chain",
                format!("op {} is not single-output", op.name()),
            ));
        }
        values.push(out.into_iter().next().unwrap());
    }
    let last = values.last().unwrap();
    if last.shape() != final_cotangent.shape() {
        return Err(Error::shape(
            "chain",
            format!(
                "cotangent shape {:?} does not match forward output shape {:?}",
                final_cotangent.shape(),
                last.shape()
            ),
        ));
    }
    let mut cot = final_cotangent.clone();
    for (i, op) in ops.iter().enumerate().rev() {
        let arg = &values[i];
        let cots = op.vjp(std::slice::from_ref(arg), std::slice::from_ref(&cot))?;
        cot = cots.into_iter().next().ok_or_else(|| {
            Error::shape("chain", format!("op {} returned no cotangent", op.name()))
        })?;
    }
    Ok(cot)
}
