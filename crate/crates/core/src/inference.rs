//! Entropy-threshold early exit and the evaluation built on it.
//!
//! An example leaves the network at the first exit whose predictive entropy
//! (softmax at temperature 1) is strictly below the threshold `S`; the last
//! layer always exits. Running time is accounted with the layer-cost model:
//! exiting at layer `i` of `k` costs `i/k` of a full pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Dataset, Metric};
use crate::error::{bail, Result};
use crate::model::{forward_all_exits, Encoder, ParamStore, TokenBatch};
use crate::tensor::{argmax, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyUnit {
    #[default]
    Nats,
    Bits,
}

impl EntropyUnit {
    fn from_nats(self, h: f64) -> f64 {
        match self {
            EntropyUnit::Nats => h,
            EntropyUnit::Bits => h / std::f64::consts::LN_2,
        }
    }
}

/// `-Σ p ln p` with `0 ln 0 = 0`, clamped to `[0, ln n]`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if let Some(p) = probs.iter().find(|&&p| p < 0.0 || p.is_nan()) {
        bail!(Contract, "negative probability {}", p);
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-4 {
        bail!(Contract, "probabilities sum to {}", total);
    }
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok(h.clamp(0.0, (probs.len() as f64).ln()))
}

/// Entropy (nats) of `softmax(logits)`, evaluated in f64.
pub fn logits_entropy<T: Scalar>(logits: &[T]) -> f64 {
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    entropy(&probs).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    /// 1-based.
    pub exit_layer: usize,
    /// In the unit the decision was made in.
    pub entropy_at_exit: f64,
    pub prediction: usize,
}

/// Runs one example layer by layer and stops at the first confident exit.
pub fn infer_adaptive<T: Scalar>(store: &ParamStore<T>, ids: &[u32], threshold: f64) -> Result<ExitDecision> {
    infer_adaptive_in(store, ids, threshold, EntropyUnit::Nats)
}

pub fn infer_adaptive_in<T: Scalar>(
    store: &ParamStore<T>,
    ids: &[u32],
    threshold: f64,
    unit: EntropyUnit,
) -> Result<ExitDecision> {
    if !(threshold >= 0.0) {
        bail!(Contract, "threshold must be non-negative, got {}", threshold);
    }
    let tokens = TokenBatch::from_sequences(&[ids.to_vec()])?;
    let tape = Tape::new();
    let bound = store.bind(&tape, |_| false);
    let mut enc = Encoder::new(store, &tape, &bound, &tokens)?;
    let k = store.config().layers;
    loop {
        enc.advance()?;
        let logits = enc.exit()?;
        let row = tape.value(logits);
        let h = unit.from_nats(logits_entropy(row.data()));
        if h < threshold || enc.depth() == k {
            return Ok(ExitDecision {
                exit_layer: enc.depth(),
                entropy_at_exit: h,
                prediction: argmax(row.data()),
            });
        }
    }
}

/// Per-example entropies and predictions at every exit, from one batched
/// forward pass per chunk. Exit decisions for any threshold are read off
/// this table without re-running the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitProfile {
    pub layers: usize,
    /// `[n][k]`, nats.
    pub entropies: Vec<Vec<f64>>,
    /// `[n][k]`.
    pub predictions: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub metric: Metric,
}

pub const EVAL_BATCH: usize = 256;

impl ExitProfile {
    pub fn compute<T: Scalar>(store: &ParamStore<T>, data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            bail!(Data, "empty evaluation set");
        }
        let indices: Vec<usize> = (0..data.len()).collect();
        let chunks: Vec<Result<Vec<(Vec<f64>, Vec<usize>)>>> = indices
            .par_chunks(EVAL_BATCH)
            .map(|chunk| {
                let (tokens, _) = data.batch(chunk)?;
                let tape = Tape::new();
                let bound = store.bind(&tape, |_| false);
                let out = forward_all_exits(store, &tape, &bound, &tokens)?;
                let values: Vec<_> = out.logits.iter().map(|&v| tape.value(v).clone()).collect();
                Ok((0..chunk.len())
                    .map(|r| {
                        let ent = values.iter().map(|l| logits_entropy(l.row(r))).collect();
                        let pred = values.iter().map(|l| argmax(l.row(r))).collect();
                        (ent, pred)
                    })
                    .collect())
            })
            .collect();
        let mut entropies = Vec::with_capacity(data.len());
        let mut predictions = Vec::with_capacity(data.len());
        for c in chunks {
            for (e, p) in c? {
                entropies.push(e);
                predictions.push(p);
            }
        }
        Ok(Self {
            layers: store.config().layers,
            entropies,
            predictions,
            labels: data.labels(),
            metric: data.metric,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// 1-based exit layer of example `n` under `threshold`.
    pub fn exit_layer(&self, n: usize, threshold: f64, unit: EntropyUnit) -> usize {
        self.entropies[n]
            .iter()
            .position(|&h| unit.from_nats(h) < threshold)
            .map_or(self.layers, |i| i + 1)
    }

    pub fn decision(&self, n: usize, threshold: f64, unit: EntropyUnit) -> ExitDecision {
        let layer = self.exit_layer(n, threshold, unit);
        ExitDecision {
            exit_layer: layer,
            entropy_at_exit: unit.from_nats(self.entropies[n][layer - 1]),
            prediction: self.predictions[n][layer - 1],
        }
    }

    pub fn histogram(&self, threshold: f64, unit: EntropyUnit) -> Vec<usize> {
        let mut counts = vec![0; self.layers];
        for n in 0..self.len() {
            counts[self.exit_layer(n, threshold, unit) - 1] += 1;
        }
        counts
    }

    pub fn record(&self, threshold: f64, unit: EntropyUnit) -> SweepRecord {
        let preds: Vec<usize> = (0..self.len())
            .map(|n| self.decision(n, threshold, unit).prediction)
            .collect();
        let histogram = self.histogram(threshold, unit);
        SweepRecord {
            threshold,
            metric: score(&preds, &self.labels, self.metric),
            expected_time_pct: expected_time_pct(&histogram),
            histogram,
        }
    }

    /// Metric of every exit with exiting disabled.
    pub fn fixed_layers(&self) -> Vec<f64> {
        (0..self.layers)
            .map(|i| {
                let preds: Vec<usize> = self.predictions.iter().map(|p| p[i]).collect();
                score(&preds, &self.labels, self.metric)
            })
            .collect()
    }
}

/// One point of an accuracy/time sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub threshold: f64,
    /// Accuracy or F1 as a fraction.
    pub metric: f64,
    pub expected_time_pct: f64,
    /// Exit counts for layers `1..=k`.
    pub histogram: Vec<usize>,
}

/// `Σ_i count_i · (i/k) / N · 100`.
pub fn expected_time_pct(histogram: &[usize]) -> f64 {
    let k = histogram.len() as f64;
    let n: usize = histogram.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let weighted: f64 = histogram
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * (i + 1) as f64 / k)
        .sum();
    weighted / n as f64 * 100.0
}

/// Accuracy, or binary F1 with class 1 as positive.
pub fn score(preds: &[usize], labels: &[usize], metric: Metric) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    match metric {
        Metric::Accuracy => {
            preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
        }
        Metric::F1 => {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (&p, &l) in preds.iter().zip(labels) {
                match (p == 1, l == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
            }
        }
    }
}

pub fn sweep<T: Scalar>(store: &ParamStore<T>, data: &Dataset, thresholds: &[f64]) -> Result<Vec<SweepRecord>> {
    let profile = ExitProfile::compute(store, data)?;
    Ok(thresholds
        .iter()
        .map(|&s| profile.record(s, EntropyUnit::Nats))
        .collect())
}

pub fn eval_fixed_layers<T: Scalar>(store: &ParamStore<T>, data: &Dataset) -> Result<Vec<f64>> {
    Ok(ExitProfile::compute(store, data)?.fixed_layers())
}

pub fn exit_histogram<T: Scalar>(store: &ParamStore<T>, data: &Dataset, threshold: f64) -> Result<Vec<usize>> {
    Ok(ExitProfile::compute(store, data)?.histogram(threshold, EntropyUnit::Nats))
}

/// `threshold,metric,expected_time_pct,count_layer_1..count_layer_k`.
pub fn sweep_csv(records: &[SweepRecord], layers: usize) -> String {
    let mut out = String::from("threshold,metric,expected_time_pct");
    for i in 1..=layers {
        out.push_str(&format!(",count_layer_{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{:.6},{:.6}", r.threshold, r.metric, r.expected_time_pct));
        for c in &r.histogram {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

pub fn layerwise_csv(metrics: &[f64]) -> String {
    let mut out = String::from("layer,metric\n");
    for (i, m) in metrics.iter().enumerate() {
        out.push_str(&format!("{},{:.6}\n", i + 1, m));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub threshold: f64,
    pub layers: usize,
    pub total: usize,
    pub counts: Vec<usize>,
    pub expected_time_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

impl HistogramReport {
    pub fn new(threshold: f64, counts: Vec<usize>) -> Self {
        Self {
            threshold,
            layers: counts.len(),
            total: counts.iter().sum(),
            expected_time_pct: expected_time_pct(&counts),
            counts,
            manifest: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((entropy(&[0.9, 0.1]).unwrap() - 0.325_083).abs() < 1e-6);
        assert!(entropy(&[1.2, -0.2]).is_err());
        assert!(entropy(&[0.3, 0.3]).is_err());
    }

    #[test]
    fn time_formula() {
        assert_eq!(expected_time_pct(&[0, 0, 5, 0, 0, 5]), 75.0);
        assert_eq!(expected_time_pct(&[0, 0, 0, 0, 0, 9]), 100.0);
        assert!((expected_time_pct(&[4, 0, 0]) - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_positive_class() {
        // tp=2 fp=1 fn=1 -> 4/6
        let f = score(&[1, 1, 1, 0, 0], &[1, 1, 0, 1, 0], Metric::F1);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(score(&[0, 0], &[1, 0], Metric::F1), 0.0);
        assert_eq!(score(&[0, 1], &[1, 1], Metric::Accuracy), 0.5);
    }

    #[test]
    fn csv_header() {
        let r = SweepRecord {
            threshold: 0.3,
            metric: 0.5,
            expected_time_pct: 75.0,
            histogram: vec![1, 0, 1],
        };
        let csv = sweep_csv(&[r], 3);
        assert_eq!(
            csv,
            "threshold,metric,expected_time_pct,count_layer_1,count_layer_2,count_layer_3\n0.3,0.500000,75.000000,1,0,1\n"
        );
    }

    #[test]
    fn bits_unit() {
        assert_eq!(EntropyUnit::Bits.from_nats(std::f64::consts::LN_2), 1.0);
    }
}
