//! The learnable similarity metric.
//!
//! The bilinear form scores every query position against an exemplar
//! vector: `S_ij = (P x_ij + b_x)^T (Q z + b_z)`. The dynamic variant
//! additionally gates the exemplar branch with a channel-attention vector
//! `a = tanh(W2 relu(W1 (Q z + b_z) + c1) + c2)`, applied as a Hadamard
//! product. Multi-exemplar similarity maps are averaged elementwise.
//!
//! P and Q start at the identity plus small Gaussian noise and biases at
//! zero, so an untrained metric is close to the plain inner product.

use crate::error::{Error, Result};
use crate::representation::FeatureField;
use crate::tensor::{Parameter, Tape, TensorId};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

/// Build the bilinear metric parameters for embedding width `d`.
pub fn metric_parameters(d: usize, seed: u64) -> Vec<Parameter> {
    let mut rng = StdRng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).expect("valid stddev");
    let mut near_identity = |n: usize| -> Vec<f64> {
        (0..n * n)
            .map(|i| {
                let eye = if i % (n + 1) == 0 { 1.0 } else { 0.0 };
                eye + noise.sample(&mut rng)
            })
            .collect()
    };
    vec![
        Parameter::new("metric.p", vec![d, d], near_identity(d), true),
        Parameter::new("metric.q", vec![d, d], near_identity(d), true),
        Parameter::new("metric.b_x", vec![d], vec![0.0; d], false),
        Parameter::new("metric.b_z", vec![d], vec![0.0; d], false),
    ]
}

/// Build the channel-attention MLP parameters (hidden width d/2).
pub fn attention_mlp_parameters(d: usize, seed: u64) -> Vec<Parameter> {
    let mut rng = StdRng::seed_from_u64(seed);
    let hidden = d / 2;
    let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    };
    vec![
        Parameter::new("metric.mlp.w1", vec![hidden, d], uniform(hidden * d, d), true),
        Parameter::new("metric.mlp.b1", vec![hidden], vec![0.0; hidden], false),
        Parameter::new("metric.mlp.w2", vec![d, hidden], uniform(d * hidden, hidden), true),
        Parameter::new("metric.mlp.b2", vec![d], vec![0.0; d], false),
    ]
}

/// Tape-side handles for the bilinear metric.
#[derive(Debug, Clone, Copy)]
pub struct MetricBinding {
    pub p: TensorId,
    pub q: TensorId,
    pub b_x: TensorId,
    pub b_z: TensorId,
}

/// Tape-side handles for the channel-attention MLP.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMlpBinding {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

fn check_dims(tape: &Tape, field: &FeatureField, z: TensorId, metric: &MetricBinding) -> Result<usize> {
    let d = tape.shape(field.id)[0];
    let zs = tape.shape(z);
    let ps = tape.shape(metric.p);
    if zs != [d] || ps != [d, d] {
        return Err(Error::Contract(format!(
            "metric dimension mismatch: field d={d}, z {zs:?}, P {ps:?}"
        )));
    }
    Ok(d)
}

/// Query branch of the metric: rows of `(P x_ij + b_x)` as `[h*w, d]`.
fn query_branch(tape: &mut Tape, field: &FeatureField, metric: &MetricBinding) -> Result<TensorId> {
    let tokens = tape.field_to_tokens(field.id)?;
    let pt = tape.transpose(metric.p)?;
    let projected = tape.matmul(tokens, pt)?;
    tape.add_row_broadcast(projected, metric.b_x)
}

/// Exemplar branch of the metric: `Q z + b_z` as `[d]`.
fn exemplar_branch(tape: &mut Tape, z: TensorId, metric: &MetricBinding) -> Result<TensorId> {
    let qz = tape.matvec(metric.q, z)?;
    tape.add(qz, metric.b_z)
}

fn similarity_from_branches(
    tape: &mut Tape,
    field: &FeatureField,
    rows: TensorId,
    exemplar: TensorId,
) -> Result<TensorId> {
    let flat = tape.matvec(rows, exemplar)?;
    tape.reshape(flat, vec![field.h, field.w])
}

/// Bilinear similarity map `S_ij = (P x_ij + b_x)^T (Q z + b_z)`, `[h,w]`.
pub fn bilinear_similarity(
    tape: &mut Tape,
    field: &FeatureField,
    z: TensorId,
    metric: &MetricBinding,
) -> Result<TensorId> {
    check_dims(tape, field, z, metric)?;
    let rows = query_branch(tape, field, metric)?;
    let ex = exemplar_branch(tape, z, metric)?;
    similarity_from_branches(tape, field, rows, ex)
}

/// Exemplar-conditioned channel attention `a = tanh(W2 relu(W1 e + c1) + c2)`
/// where `e = Q z + b_z`. Every entry lies in (-1, 1).
pub fn channel_attention(
    tape: &mut Tape,
    z: TensorId,
    metric: &MetricBinding,
    mlp: &AttentionMlpBinding,
) -> Result<TensorId> {
    let e = exemplar_branch(tape, z, metric)?;
    channel_attention_from_branch(tape, e, mlp)
}

fn channel_attention_from_branch(
    tape: &mut Tape,
    exemplar_branch: TensorId,
    mlp: &AttentionMlpBinding,
) -> Result<TensorId> {
    let h = tape.matvec(mlp.w1, exemplar_branch)?;
    let h = tape.add(h, mlp.b1)?;
    let h = tape.relu(h);
    let o = tape.matvec(mlp.w2, h)?;
    let o = tape.add(o, mlp.b2)?;
    Ok(tape.tanh(o))
}

/// Dynamic similarity `S_ij = (P x_ij + b_x)^T (a o (Q z + b_z))`.
pub fn dynamic_similarity(
    tape: &mut Tape,
    field: &FeatureField,
    z: TensorId,
    metric: &MetricBinding,
    mlp: &AttentionMlpBinding,
) -> Result<TensorId> {
    check_dims(tape, field, z, metric)?;
    let rows = query_branch(tape, field, metric)?;
    let e = exemplar_branch(tape, z, metric)?;
    let a = channel_attention_from_branch(tape, e, mlp)?;
    let gated = tape.hadamard(a, e)?;
    similarity_from_branches(tape, field, rows, gated)
}

/// Dynamic similarity with an externally supplied gate vector, used by
/// tests to inject `a` directly.
#[cfg(test)]
fn dynamic_similarity_with_gate(
    tape: &mut Tape,
    field: &FeatureField,
    z: TensorId,
    metric: &MetricBinding,
    gate: TensorId,
) -> Result<TensorId> {
    check_dims(tape, field, z, metric)?;
    let rows = query_branch(tape, field, metric)?;
    let e = exemplar_branch(tape, z, metric)?;
    let gated = tape.hadamard(gate, e)?;
    similarity_from_branches(tape, field, rows, gated)
}

/// Elementwise mean of per-exemplar similarity maps.
pub fn aggregate_exemplars(tape: &mut Tape, maps: &[TensorId]) -> Result<TensorId> {
    if maps.is_empty() {
        return Err(Error::Contract("aggregate_exemplars requires at least one map".into()));
    }
    let mut acc = maps[0];
    for &m in &maps[1..] {
        acc = tape.add(acc, m)?;
    }
    Ok(tape.scale(acc, 1.0 / maps.len() as f64))
}
