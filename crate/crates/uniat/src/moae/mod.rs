//! Mixture-of-Attribute-Experts sublayer.
//!
//! Each scenario owns n experts; expert j of scenario s is the two-layer
//! FFN a₁(gelu(a₂(·))) composed from shared attribute layers: one keyed
//! to the scenario's time moment (DT/NT/AD) and one to its time interval
//! (ST/LT). Five attribute kinds × n instances give 5n attribute layers
//! per MoAE layer, shared by reference across the 6n experts. Routing is
//! per-token: softmax gate logits, then all but the top-k entries are
//! zeroed and the survivors keep their softmax values (no
//! renormalization); only selected experts are evaluated.

use crate::backbone::{Bound, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scenario::{Scenario, TimeInterval, TimeMoment};
use crate::tensor::{Tape, TensorId};

fn tm_tag(tm: TimeMoment) -> &'static str {
    match tm {
        TimeMoment::Daytime => "DT",
        TimeMoment::Nighttime => "NT",
        TimeMoment::AllDay => "AD",
    }
}

fn ti_tag(ti: TimeInterval) -> &'static str {
    match ti {
        TimeInterval::ShortTerm => "ST",
        TimeInterval::LongTerm => "LT",
    }
}

/// Parameter names of the time-moment attribute instance `j` at `layer`.
pub fn tm_attr_names(layer: usize, tm: TimeMoment, j: usize) -> (String, String) {
    let base = format!("layer{layer}.moae.tm.{}.{j}", tm_tag(tm));
    (format!("{base}.w"), format!("{base}.b"))
}

/// Parameter names of the time-interval attribute instance `j` at `layer`.
pub fn ti_attr_names(layer: usize, ti: TimeInterval, j: usize) -> (String, String) {
    let base = format!("layer{layer}.moae.ti.{}.{j}", ti_tag(ti));
    (format!("{base}.w"), format!("{base}.b"))
}

pub fn gate_name(layer: usize, s: Scenario) -> String {
    format!("layer{layer}.moae.gate.{s}")
}

/// Which attribute instances expert (s, j) is composed of. Instances are
/// aliased by parameter name: experts of scenarios sharing a time-moment
/// kind resolve to the same tensors (and likewise for time-interval).
#[derive(Debug, Clone)]
pub struct ExpertTable {
    layer: usize,
    pub n: usize,
    /// Time-moment attribute plays the input d→h projection a₂ when true;
    /// otherwise the roles are swapped.
    pub tm_is_input: bool,
}

impl ExpertTable {
    pub fn new(layer: usize, cfg: &ModelConfig) -> Self {
        ExpertTable {
            layer,
            n: cfg.moae_experts_per_scenario,
            tm_is_input: cfg.moae_tm_is_input,
        }
    }

    /// (input-projection names, output-projection names) for expert (s, j).
    pub fn expert(&self, s: Scenario, j: usize) -> Result<((String, String), (String, String))> {
        if j >= self.n {
            return Err(Error::Config(format!(
                "expert index {j} out of range for n={}",
                self.n
            )));
        }
        let tm = tm_attr_names(self.layer, s.tm, j);
        let ti = ti_attr_names(self.layer, s.ti, j);
        Ok(if self.tm_is_input { (tm, ti) } else { (ti, tm) })
    }
}

/// Instrumentation counters for gating sparsity checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MoaeStats {
    /// Total (token, expert) evaluations performed.
    pub expert_token_evals: usize,
    /// Tokens routed through a MoAE layer.
    pub tokens_routed: usize,
}

/// Gate weights for a block of same-scenario tokens: softmax of W_g^s·t,
/// then top-k zeroing with no renormalization. Returns the (B,n) gate
/// tensor and the selected expert indices per token.
pub fn gate<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &mut Bound<F>,
    layer: usize,
    s: Scenario,
    tokens: TensorId,
    k: usize,
) -> Result<(TensorId, Vec<Vec<usize>>)> {
    let w = bound.get(tape, &gate_name(layer, s))?;
    let logits = tape.matmul(tokens, w)?;
    let probs = tape.softmax(logits, 1)?;
    tape.topk_mask_with_selection(probs, k)
}

/// Evaluate expert (s, j) on a block of tokens: a₁(gelu(a₂(t))).
pub fn expert_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &mut Bound<F>,
    table: &ExpertTable,
    s: Scenario,
    j: usize,
    tokens: TensorId,
) -> Result<TensorId> {
    let ((in_w, in_b), (out_w, out_b)) = table.expert(s, j)?;
    let w1 = bound.get(tape, &in_w)?;
    let b1 = bound.get(tape, &in_b)?;
    let w2 = bound.get(tape, &out_w)?;
    let b2 = bound.get(tape, &out_b)?;
    let h = tape.matmul(tokens, w1)?;
    let h = tape.row_bias_add(h, b1)?;
    let h = tape.gelu(h);
    let y = tape.matmul(h, w2)?;
    tape.row_bias_add(y, b2)
}

/// Hidden activation of expert (s, j) before the output projection:
/// gelu(a₂(t)). Exposes the shared pre-a₁ state for aliasing checks.
pub fn expert_hidden<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &mut Bound<F>,
    table: &ExpertTable,
    s: Scenario,
    j: usize,
    tokens: TensorId,
) -> Result<TensorId> {
    let ((in_w, in_b), _) = table.expert(s, j)?;
    let w1 = bound.get(tape, &in_w)?;
    let b1 = bound.get(tape, &in_b)?;
    let h = tape.matmul(tokens, w1)?;
    let h = tape.row_bias_add(h, b1)?;
    Ok(tape.gelu(h))
}

/// MoAE forward for a (B,d) block of CLS tokens that all carry scenario
/// `s`: y = Σ_j gate_j · expert_j(t). Experts with zero gate weight are
/// not evaluated.
pub fn moae_forward<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &mut Bound<F>,
    table: &ExpertTable,
    s: Scenario,
    tokens: TensorId,
    k: usize,
    stats: &mut MoaeStats,
) -> Result<TensorId> {
    let layer = table.layer;
    let batch = tape.shape(tokens)[0];
    let d = tape.shape(tokens)[1];
    let n = table.n;
    let (gates, selection) = gate(tape, bound, layer, s, tokens, k)?;
    stats.tokens_routed += batch;

    let mut pieces: Vec<TensorId> = Vec::new();
    for j in 0..n {
        let rows: Vec<usize> = (0..batch)
            .filter(|&i| selection[i].contains(&j))
            .collect();
        if rows.is_empty() {
            continue;
        }
        stats.expert_token_evals += rows.len();
        let mut gather = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            for c in 0..d {
                gather.push(r * d + c);
            }
        }
        let block = tape.reindex(tokens, gather, vec![rows.len(), d])?;
        let out = expert_forward(tape, bound, table, s, j, block)?;
        let weight_map: Vec<usize> = rows.iter().map(|&r| r * n + j).collect();
        let weights = tape.reindex(gates, weight_map, vec![rows.len()])?;
        let scaled = tape.row_scale(out, weights)?;
        pieces.push(tape.scatter_rows(scaled, rows, batch)?);
    }

    match pieces.len() {
        0 => unreachable!("top-k selects at least one expert per token"),
        1 => Ok(pieces[0]),
        _ => {
            let mut acc = pieces[0];
            for &p in &pieces[1..] {
                acc = tape.add(acc, p)?;
            }
            Ok(acc)
        }
    }
}

/// Per-layer parameter counts: attribute-shared MoAE versus 6n
/// independent two-layer experts, both including the gating matrices.
/// Sharing keeps 5n (3 input-sized + 2 output-sized) attribute layers
/// where the unshared construction would hold 6n of each.
pub fn param_count(cfg: &ModelConfig) -> (usize, usize) {
    let (d, h, n) = (
        cfg.embed_dim,
        cfg.ffn_hidden,
        cfg.moae_experts_per_scenario,
    );
    if n == 0 {
        return (0, 0);
    }
    let gating = 6 * n * d;
    let shared = n * (3 * (d * h + h) + 2 * (h * d + d)) + gating;
    let unshared = 6 * n * ((d * h + h) + (h * d + d)) + gating;
    (shared, unshared)
}

#[cfg(test)]
mod tests;
