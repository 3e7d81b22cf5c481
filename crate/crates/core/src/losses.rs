//! Exit losses: cross-entropy, temperature softmax, the per-exit
//! distillation divergence and the combined self-distillation objective
//!
//! ```text
//! L_sd = Σ_{i<k} (1-γ)·CE(y, f_i) + γ·KL(p_k^T ‖ p_i^T)
//! ```
//!
//! where `p^T` is the softmax of logits divided by `T`. The final exit only
//! appears as a detached teacher inside the divergence.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{bail, Result};
use crate::model::ExitOutputs;
use crate::tensor::{softmax_in_place, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdConfig {
    pub gamma: f64,
    pub temperature: f64,
}

impl Default for SdConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            temperature: 3.0,
        }
    }
}

impl SdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            bail!(Config, "gamma must lie in [0, 1], got {}", self.gamma);
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            bail!(Config, "temperature must be positive, got {}", self.temperature);
        }
        Ok(())
    }
}

/// Scalar values of every loss term for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub final_loss: f64,
    pub multi: f64,
    pub kld: f64,
    pub sd: f64,
    /// `(ce_i, kld_i)` for exits `1..k-1`.
    pub per_exit: Vec<(f64, f64)>,
}

/// The loss graph of one batch.
#[derive(Debug, Clone)]
pub struct SdLosses {
    pub final_loss: Var,
    pub multi: Var,
    pub kld: Var,
    pub sd: Var,
    pub per_exit: Vec<(Var, Var)>,
}

impl SdLosses {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown {
            final_loss: v(self.final_loss),
            multi: v(self.multi),
            kld: v(self.kld),
            sd: v(self.sd),
            per_exit: self.per_exit.iter().map(|&(c, k)| (v(c), v(k))).collect(),
        }
    }
}

/// Batch-mean cross-entropy (natural log).
pub fn cross_entropy<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Per-row `softmax(logits / T)`.
pub fn temp_softmax<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0) {
        bail!(Config, "temperature must be positive, got {}", temperature);
    }
    let t = T::from_f64_lossy(temperature);
    let (m, n) = logits.dims2()?;
    let mut out: Vec<T> = logits.data().iter().map(|&v| v / t).collect();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Tensor::new(vec![m, n], out)
}

/// Distillation divergence from the (detached) final exit to exit `i`.
pub fn kld_exit<T: Scalar>(tape: &Tape<T>, teacher: Var, student: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        bail!(Config, "temperature must be positive, got {}", temperature);
    }
    tape.kld(teacher, student, T::from_f64_lossy(temperature))
}

/// Builds `L_final` and `L_sd` with all intermediate terms.
pub fn sd_loss<T: Scalar>(tape: &Tape<T>, outputs: &ExitOutputs, labels: &[usize], cfg: &SdConfig) -> Result<SdLosses> {
    cfg.validate()?;
    let k = outputs.num_exits();
    if k < 2 {
        bail!(Contract, "self-distillation needs at least two exits, got {}", k);
    }
    let teacher = outputs.final_exit();
    let final_loss = cross_entropy(tape, teacher, labels)?;
    let ce_w = T::from_f64_lossy(1.0 - cfg.gamma);
    let kl_w = T::from_f64_lossy(cfg.gamma);

    let mut per_exit = Vec::with_capacity(k - 1);
    let mut multi: Option<Var> = None;
    let mut kld: Option<Var> = None;
    for &student in &outputs.logits[..k - 1] {
        let ce = cross_entropy(tape, student, labels)?;
        let kl = kld_exit(tape, teacher, student, cfg.temperature)?;
        per_exit.push((ce, kl));
        let ce_term = tape.scale(ce, ce_w);
        let kl_term = tape.scale(kl, kl_w);
        multi = Some(match multi {
            Some(acc) => tape.add(acc, ce_term)?,
            None => ce_term,
        });
        kld = Some(match kld {
            Some(acc) => tape.add(acc, kl_term)?,
            None => kl_term,
        });
    }
    let (multi, kld) = (multi.expect("k >= 2"), kld.expect("k >= 2"));
    let sd = tape.add(multi, kld)?;
    Ok(SdLosses {
        final_loss,
        multi,
        kld,
        sd,
        per_exit,
    })
}

/// Unweighted `Σ_{i<k} CE(y, f_i)`, the second-stage objective of the
/// two-stage baseline.
pub fn multi_exit_ce<T: Scalar>(tape: &Tape<T>, outputs: &ExitOutputs, labels: &[usize]) -> Result<Var> {
    let k = outputs.num_exits();
    let mut acc: Option<Var> = None;
    for &l in &outputs.logits[..k - 1] {
        let ce = cross_entropy(tape, l, labels)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    acc.ok_or_else(|| crate::Error::Contract("need at least two exits".into()))
}
