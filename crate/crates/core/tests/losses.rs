use mext::autograd::Tape;
use mext::losses::{kld_exit, multi_exit_ce, sd_loss, temp_softmax, SdConfig};
use mext::model::{forward_all_exits, ModelConfig, Ownership, ParamStore, TokenBatch};
use mext::tensor::Tensor;
use proptest::prelude::*;

fn store() -> ParamStore<f64> {
    let mut s = ParamStore::<f64>::init(&ModelConfig {
        layers: 4,
        hidden: 12,
        heads: 2,
        ffn: 16,
        vocab: 20,
        classes: 3,
        max_len: 8,
        seed: 9,
    })
    .unwrap();
    // Spread the logits so the terms are not all near ln 3.
    for p in s.params_mut() {
        if matches!(p.owner, Ownership::OffRamp(_) | Ownership::FinalClassifier) {
            for v in p.value.data_mut() {
                *v *= 40.0;
            }
        }
    }
    s
}

fn tokens() -> TokenBatch {
    TokenBatch::from_sequences(&[vec![2, 4, 5, 6], vec![2, 9, 8], vec![2, 17, 3, 3, 12]]).unwrap()
}

/// `(sd, Σ ce_i, Σ kld_i)` for the given config.
fn terms(gamma: f64, temperature: f64, labels: &[usize]) -> (f64, f64, f64) {
    let s = store();
    let tape = Tape::new();
    let bound = s.bind(&tape, |_| false);
    let out = forward_all_exits(&s, &tape, &bound, &tokens()).unwrap();
    let l = sd_loss(&tape, &out, labels, &SdConfig { gamma, temperature }).unwrap();
    let b = l.breakdown(&tape);
    let ce: f64 = b.per_exit.iter().map(|p| p.0).sum();
    let kl: f64 = b.per_exit.iter().map(|p| p.1).sum();
    (b.sd, ce, kl)
}

#[test]
fn gamma_zero_is_multi_exit_ce() {
    let s = store();
    let tape = Tape::new();
    let bound = s.bind(&tape, |_| false);
    let out = forward_all_exits(&s, &tape, &bound, &tokens()).unwrap();
    let plain = multi_exit_ce(&tape, &out, &[0, 2, 1]).unwrap();
    let sd = sd_loss(&tape, &out, &[0, 2, 1], &SdConfig { gamma: 0.0, temperature: 3.0 }).unwrap();
    let (a, b) = (tape.value(plain).item(), tape.value(sd.sd).item());
    assert!((a - b).abs() < 1e-6);
}

#[test]
fn gamma_one_is_pure_kld_and_ignores_labels() {
    let (sd, _, kl) = terms(1.0, 3.0, &[0, 2, 1]);
    assert!((sd - kl).abs() < 1e-6);
    let (other, _, _) = terms(1.0, 3.0, &[1, 1, 0]);
    assert_eq!(sd, other);
}

#[test]
fn per_exit_kld_is_non_negative() {
    let s = store();
    let tape = Tape::new();
    let bound = s.bind(&tape, |_| false);
    let out = forward_all_exits(&s, &tape, &bound, &tokens()).unwrap();
    let l = sd_loss(&tape, &out, &[0, 1, 2], &SdConfig::default()).unwrap();
    for (_, kl) in l.breakdown(&tape).per_exit {
        assert!(kl >= -1e-9);
    }
}

#[test]
fn sd_is_continuous_in_gamma() {
    let eps = 1e-3;
    for g in [0.0, 0.3, 0.9] {
        let (a, ce, kl) = terms(g, 3.0, &[0, 2, 1]);
        let (b, _, _) = terms(g + eps, 3.0, &[0, 2, 1]);
        assert!((a - b).abs() <= eps * (ce + kl) + 1e-6);
    }
}

#[test]
fn teacher_parameters_get_no_kld_gradient() {
    let s = store();
    let tape = Tape::new();
    let bound = s.bind(&tape, |_| true);
    let out = forward_all_exits(&s, &tape, &bound, &tokens()).unwrap();
    let l = sd_loss(&tape, &out, &[0, 1, 2], &SdConfig::default()).unwrap();
    let g = tape.backward(l.kld).unwrap();
    for (i, p) in s.params().iter().enumerate() {
        if p.owner == Ownership::FinalClassifier {
            assert!(g.get(i).is_none(), "{}", p.name);
        }
    }
}

#[test]
fn temp_softmax_equal_logits_is_uniform() {
    let t = Tensor::new(vec![1, 4], vec![3.0f64; 4]).unwrap();
    for temp in [0.5, 1.0, 7.0] {
        let p = temp_softmax(&t, temp).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}

proptest! {
    #[test]
    fn kld_of_identical_logits_is_zero(
        row in prop::collection::vec(-20.0f64..20.0, 2..6),
        temperature in 0.1f64..10.0,
    ) {
        let a = Tensor::new(vec![1, row.len()], row).unwrap();
        let tape = Tape::new();
        let (t, s) = (tape.constant(a.clone()), tape.constant(a));
        let v = tape.value(kld_exit(&tape, t, s, temperature).unwrap()).item();
        prop_assert!(v.abs() < 1e-12);
    }

    #[test]
    fn kld_is_non_negative(
        a in prop::collection::vec(-30.0f64..30.0, 3),
        b in prop::collection::vec(-30.0f64..30.0, 3),
        temperature in 0.2f64..5.0,
    ) {
        let tape = Tape::new();
        let t = tape.constant(Tensor::new(vec![1, 3], a).unwrap());
        let s = tape.constant(Tensor::new(vec![1, 3], b).unwrap());
        let v = tape.value(kld_exit(&tape, t, s, temperature).unwrap()).item();
        prop_assert!(v >= -1e-9);
    }
}
