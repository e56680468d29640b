//! Performance / compression / efficiency accounting: accuracy, perplexity,
//! length reduction, the P-L F1 trade-off score, perplexity normalization,
//! the attention FLOP-ratio estimate, and the embedding bit-redundancy report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction and gold lists differ in length: {preds} vs {golds}")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("empty input")]
    Empty,
    #[error("{0}")]
    Contract(String),
}

/// Evaluation summary serialized as JSON and as a CSV row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub method: String,
    /// Normalized performance score in [0, 1].
    pub performance: f64,
    /// Length reduction ratio in [0, 1).
    pub length_reduction: f64,
    pub pl_f1: f64,
    /// Raw metric backing `performance` (accuracy, or perplexity for LM eval).
    pub raw_metric: f64,
    pub flop_ratio: f64,
    pub samples: usize,
    pub tokens_original: usize,
    pub tokens_compressed: usize,
}

impl EvalReport {
    pub fn csv_header() -> &'static str {
        "method,performance,length_reduction,pl_f1,raw_metric,flop_ratio,samples,tokens_original,tokens_compressed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.method,
            self.performance,
            self.length_reduction,
            self.pl_f1,
            self.raw_metric,
            self.flop_ratio,
            self.samples,
            self.tokens_original,
            self.tokens_compressed
        )
    }
}

/// Fraction of exact matches.
pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `L = 1 - compressed_slots / original_tokens`.
pub fn length_reduction(original_tokens: usize, compressed_slots: usize) -> Result<f64, MetricError> {
    if original_tokens == 0 || compressed_slots == 0 {
        return Err(MetricError::Empty);
    }
    if compressed_slots > original_tokens {
        return Err(MetricError::Contract(format!(
            "compressed slot count {compressed_slots} exceeds original token count {original_tokens}"
        )));
    }
    Ok(1.0 - compressed_slots as f64 / original_tokens as f64)
}

/// Harmonic mean of performance and length reduction; 0 when both are 0.
pub fn pl_f1(p: f64, l: f64) -> Result<f64, MetricError> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&l) {
        return Err(MetricError::Contract(format!("P={p}, L={l} outside [0,1]")));
    }
    if p + l == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * l / (p + l))
}

/// Relative perplexity ratio `P_i = ppl_min / ppl_i`.
pub fn normalize_ppl(ppl_i: f64, ppl_min: f64) -> Result<f64, MetricError> {
    if ppl_min < 1.0 || ppl_i < 1.0 {
        return Err(MetricError::Contract(format!(
            "perplexities must be >= 1 (got ppl={ppl_i}, ppl_min={ppl_min})"
        )));
    }
    if ppl_i < ppl_min {
        return Err(MetricError::Contract(format!(
            "ppl {ppl_i} below ppl_min {ppl_min}"
        )));
    }
    Ok(ppl_min / ppl_i)
}

/// Attention score/value FLOP count for a prefill of `prefill_len` slots
/// followed by `decode_steps` single-slot steps.
fn attn_flops(prefill_len: f64, decode_steps: usize) -> f64 {
    let mut total = prefill_len * prefill_len;
    for j in 1..=decode_steps {
        total += prefill_len + j as f64;
    }
    total
}

/// Ratio of compressed to uncompressed attention FLOPs for `n` compressed
/// slots standing in for `k*n` tokens, plus `m` generated tokens.
/// At `m = 0` this is exactly `1/k^2`.
pub fn flop_ratio(k: usize, n: usize, m: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let compressed = attn_flops(n as f64, m);
    let uncompressed = attn_flops((k * n) as f64, m);
    if uncompressed == 0.0 {
        1.0
    } else {
        compressed / uncompressed
    }
}

/// Bits consumed by one embedding vs. the information-theoretic minimum for
/// identifying a K-gram from a vocabulary of size `v`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BitsReport {
    pub embedding_bits: u64,
    pub minimal_bits: f64,
}

pub fn bits_report(v: usize, d: usize, bits_per_component: u32, k: usize) -> BitsReport {
    BitsReport {
        embedding_bits: d as u64 * bits_per_component as u64,
        minimal_bits: k as f64 * (v as f64).log2(),
    }
}

/// A Pareto-table row; `pareto_optimal` is set when no other row strictly
/// dominates it in both performance and length reduction.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ParetoRow {
    pub method: String,
    pub performance: f64,
    pub length_reduction: f64,
    pub pl_f1: f64,
    pub pareto_optimal: bool,
}

/// Sort rows by length reduction and flag the Pareto-optimal ones.
pub fn pareto_table(entries: &[(String, f64, f64)]) -> Result<Vec<ParetoRow>, MetricError> {
    if entries.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut rows: Vec<ParetoRow> = entries
        .iter()
        .map(|(m, p, l)| {
            Ok(ParetoRow {
                method: m.clone(),
                performance: *p,
                length_reduction: *l,
                pl_f1: pl_f1(*p, *l)?,
                pareto_optimal: false,
            })
        })
        .collect::<Result<_, MetricError>>()?;
    for i in 0..rows.len() {
        let dominated = rows.iter().enumerate().any(|(j, other)| {
            j != i
                && other.performance > rows[i].performance
                && other.length_reduction > rows[i].length_reduction
        });
        rows[i].pareto_optimal = !dominated;
    }
    rows.sort_by(|a, b| a.length_reduction.partial_cmp(&b.length_reduction).unwrap());
    Ok(rows)
}
