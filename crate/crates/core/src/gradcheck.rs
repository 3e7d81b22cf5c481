//! Central finite-difference check of the analytic gradients in f64.
//!
//! `L_final`, `L_multi` and `L_kld` are checked separately over every scalar
//! parameter of a small random model. The distillation teacher is held at
//! its unperturbed value, matching the detached teacher of the analytic
//! gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::Result;
use crate::gradreg::{flatten_tape, Layout};
use crate::losses::{cross_entropy, kld_exit, SdConfig};
use crate::model::{forward_all_exits, ModelConfig, ParamStore, TokenBatch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub sd: SdConfig,
    /// Standard deviation of the random parameters (larger than the training
    /// init so that every nonlinearity is exercised).
    pub param_std: f64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub lengths: Vec<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                layers: 3,
                hidden: 32,
                heads: 2,
                ffn: 64,
                vocab: 24,
                classes: 3,
                max_len: 8,
                seed: 0,
            },
            sd: SdConfig::default(),
            param_std: 0.3,
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-4,
            lengths: vec![8, 5, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tolerance)
    }
}

const LOSSES: [&str; 3] = ["L_final", "L_multi", "L_kld"];

/// `[L_final, L_multi, L_kld]`; the distillation term uses `teacher` when
/// given and the live final exit otherwise.
fn losses(
    store: &ParamStore<f64>,
    trainable: bool,
    tokens: &TokenBatch,
    labels: &[usize],
    sd: &SdConfig,
    teacher: Option<&Tensor<f64>>,
) -> Result<(Tape<f64>, [crate::autograd::Var; 3])> {
    let tape = Tape::new();
    let bound = store.bind(&tape, |_| trainable);
    let out = forward_all_exits(store, &tape, &bound, tokens)?;
    let k = out.num_exits();
    let t = match teacher {
        Some(t) => tape.constant(t.clone()),
        None => out.final_exit(),
    };
    let final_loss = cross_entropy(&tape, out.final_exit(), labels)?;
    let mut multi = None;
    let mut kld = None;
    for &s in &out.logits[..k - 1] {
        let ce = tape.scale(cross_entropy(&tape, s, labels)?, 1.0 - sd.gamma);
        let kl = tape.scale(kld_exit(&tape, t, s, sd.temperature)?, sd.gamma);
        multi = Some(match multi {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
        kld = Some(match kld {
            Some(a) => tape.add(a, kl)?,
            None => kl,
        });
    }
    let vars = [final_loss, multi.expect("k >= 2"), kld.expect("k >= 2")];
    Ok((tape, vars))
}

fn values(store: &ParamStore<f64>, tokens: &TokenBatch, labels: &[usize], sd: &SdConfig, teacher: &Tensor<f64>) -> Result<[f64; 3]> {
    let (tape, vars) = losses(store, false, tokens, labels, sd, Some(teacher))?;
    Ok(vars.map(|v| tape.value(v).item()))
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    cfg.model.validate()?;
    cfg.sd.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    let normal = Normal::new(0.0, cfg.param_std).expect("valid std");
    let mut store = ParamStore::<f64>::init(&cfg.model)?;
    for p in store.params_mut() {
        let gain = p.name.ends_with(".gain");
        for w in p.value.data_mut() {
            *w = normal.sample(&mut rng) + if gain { 1.0 } else { 0.0 };
        }
    }
    let seqs: Vec<Vec<u32>> = cfg
        .lengths
        .iter()
        .map(|&n| (0..n).map(|_| rand::Rng::gen_range(&mut rng, 1..cfg.model.vocab as u32)).collect())
        .collect();
    let tokens = TokenBatch::from_sequences(&seqs)?;
    let labels: Vec<usize> = (0..seqs.len()).map(|i| i % cfg.model.classes).collect();

    let layout = Layout::of_store(&store);
    let (tape, vars) = losses(&store, true, &tokens, &labels, &cfg.sd, None)?;
    let teacher = {
        let out = crate::model::eval_all_exits(&store, &tokens)?;
        out.last().expect("k >= 1").clone()
    };
    let analytic = vars
        .iter()
        .map(|&v| flatten_tape(&tape.backward(v)?, &layout).map(|g| g.into_values()))
        .collect::<Result<Vec<_>>>()?;
    drop(tape);

    let mut checks: Vec<LossCheck> = LOSSES
        .iter()
        .map(|name| LossCheck {
            loss: name.to_string(),
            max_rel_err: 0.0,
            worst_param: String::new(),
            checked: 0,
        })
        .collect();
    let mut flat = 0;
    for pi in 0..store.len() {
        for j in 0..store.params()[pi].value.len() {
            let orig = store.params()[pi].value.data()[j];
            store.params_mut()[pi].value.data_mut()[j] = orig + cfg.step;
            let plus = values(&store, &tokens, &labels, &cfg.sd, &teacher)?;
            store.params_mut()[pi].value.data_mut()[j] = orig - cfg.step;
            let minus = values(&store, &tokens, &labels, &cfg.sd, &teacher)?;
            store.params_mut()[pi].value.data_mut()[j] = orig;
            for (l, check) in checks.iter_mut().enumerate() {
                let numeric = (plus[l] - minus[l]) / (2.0 * cfg.step);
                let a = analytic[l][flat];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
                check.checked += 1;
                if err > check.max_rel_err {
                    check.max_rel_err = err;
                    check.worst_param = format!("{}[{}]", store.params()[pi].name, j);
                }
            }
            flat += 1;
        }
    }
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        checks,
    })
}
