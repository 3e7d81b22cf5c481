use mext::autograd::Tape;
use mext::checkpoint;
use mext::data::{gen_synthetic, Dataset, SyntheticSpec};
use mext::gradreg::{flatten_tape, ConflictRecord, Layout};
use mext::losses::cross_entropy;
use mext::model::{forward_all_exits, ModelConfig, OwnerClass, Ownership, ParamStore, TokenBatch};
use mext::train::{combine, train, train_from, Regime, RegimeConfig, Stage, TrainOutcome, Trainer};
use mext::Error;

fn model() -> ModelConfig {
    ModelConfig {
        layers: 3,
        hidden: 16,
        heads: 2,
        ffn: 32,
        vocab: 40,
        classes: 2,
        max_len: 8,
        seed: 5,
    }
}

fn data(easy_fraction: f64, distractors: usize) -> (Dataset, Dataset) {
    gen_synthetic(&SyntheticSpec {
        easy_fraction,
        seq_len: 8,
        vocab_size: 40,
        size: 400,
        distractors,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

fn batches(d: &Dataset, size: usize) -> Vec<(TokenBatch, Vec<usize>)> {
    let idx: Vec<usize> = (0..d.len()).collect();
    idx.chunks(size).map(|c| d.batch(c).unwrap()).collect()
}

fn regime(r: Regime) -> RegimeConfig {
    RegimeConfig {
        batch_size: 16,
        lr: 1e-3,
        eval_each_epoch: false,
        ..RegimeConfig::for_regime(r, 1)
    }
}

fn owned_by<T: mext::tensor::Scalar>(s: &ParamStore<T>, class: OwnerClass) -> Vec<(String, Vec<T>)> {
    s.params()
        .iter()
        .filter(|p| p.owner.class() == class)
        .map(|p| (p.name.clone(), p.value.data().to_vec()))
        .collect()
}

#[test]
fn stage_one_freezes_off_ramps_and_fits_a_separable_task() {
    let (train_set, _) = data(1.0, 0);
    let store = ParamStore::<f32>::init(&model()).unwrap();
    let ramps = owned_by(&store, OwnerClass::OffRamp);
    let backbone = owned_by(&store, OwnerClass::Backbone);
    let mut t = Trainer::new(store, regime(Regime::Deebert)).unwrap();
    t.begin_stage(Stage::DeebertStage1, 200);
    let bs = batches(&train_set, 16);
    let mut last = Vec::new();
    for step in 0..200 {
        let (tokens, labels) = &bs[step % bs.len()];
        let b = t.step_deebert_stage1(tokens, labels).unwrap();
        if step == 99 {
            assert_eq!(owned_by(t.store(), OwnerClass::OffRamp), ramps);
        }
        if step >= 190 {
            last.push(b.final_loss);
        }
    }
    assert_eq!(owned_by(t.store(), OwnerClass::OffRamp), ramps);
    assert_ne!(owned_by(t.store(), OwnerClass::Backbone), backbone);
    let mean = last.iter().sum::<f64>() / last.len() as f64;
    assert!(mean < 0.1, "final loss {mean}");
}

#[test]
fn stage_one_gradient_has_no_off_ramp_support() {
    let (train_set, _) = data(0.7, 3);
    let store = ParamStore::<f32>::init(&model()).unwrap();
    let layout = Layout::of_store(&store);
    let (tokens, labels) = train_set.batch(&[0, 1, 2, 3]).unwrap();
    let tape = Tape::new();
    let bound = store.bind(&tape, |o| o.class() != OwnerClass::OffRamp);
    let out = forward_all_exits(&store, &tape, &bound, &tokens).unwrap();
    let loss = cross_entropy(&tape, out.final_exit(), &labels).unwrap();
    let g = flatten_tape(&tape.backward(loss).unwrap(), &layout).unwrap();
    for p in store.params() {
        if let Ownership::OffRamp(_) = p.owner {
            assert!(g.segment_values(&p.name).unwrap().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn stage_two_freezes_backbone_and_ignores_gamma_without_sd() {
    let (train_set, _) = data(0.7, 3);
    let base = ParamStore::<f32>::init(&model()).unwrap();
    let frozen = |s: &ParamStore<f32>| {
        let mut v = owned_by(s, OwnerClass::Backbone);
        v.extend(owned_by(s, OwnerClass::FinalClassifier));
        v
    };
    let before = frozen(&base);
    let run = |gamma: f64, with_sd: bool| {
        let mut cfg = regime(if with_sd { Regime::DeebertSd } else { Regime::Deebert });
        cfg.sd.gamma = gamma;
        let mut t = Trainer::new(base.clone(), cfg).unwrap();
        let bs = batches(&train_set, 16);
        t.begin_stage(Stage::DeebertStage2, bs.len() as u64);
        for (tokens, labels) in &bs {
            let b = t.step_deebert_stage2(tokens, labels, with_sd).unwrap();
            assert!(b.per_exit.iter().all(|&(_, kl)| kl >= 0.0));
        }
        t.into_store()
    };
    let a = run(0.3, false);
    let b = run(0.9, false);
    assert_eq!(frozen(&a), before);
    assert_eq!(a, b);
    let c = run(0.9, true);
    assert_eq!(frozen(&c), before);
    assert_ne!(owned_by(&c, OwnerClass::OffRamp), owned_by(&a, OwnerClass::OffRamp));
}

#[test]
fn steps_check_their_stage() {
    let (train_set, _) = data(0.7, 3);
    let (tokens, labels) = train_set.batch(&[0, 1]).unwrap();
    let mut t = Trainer::new(ParamStore::<f32>::init(&model()).unwrap(), regime(Regime::Deebert)).unwrap();
    assert!(matches!(t.step_romebert(&tokens, &labels, true), Err(Error::Contract(_))));
    assert!(matches!(t.step_deebert_stage2(&tokens, &labels, false), Err(Error::Contract(_))));
    let mut j = Trainer::new(ParamStore::<f32>::init(&model()).unwrap(), regime(Regime::Romebert)).unwrap();
    assert!(matches!(j.step_deebert_stage1(&tokens, &labels), Err(Error::Contract(_))));
}

#[test]
fn gr_off_and_on_agree_until_the_first_conflict() {
    let (train_set, _) = data(0.7, 3);
    let store = ParamStore::<f32>::init(&model()).unwrap();
    let mut on = Trainer::new(store.clone(), regime(Regime::Romebert)).unwrap();
    let mut off = Trainer::new(store, regime(Regime::SdOnly)).unwrap();
    on.begin_stage(Stage::Joint, 100);
    off.begin_stage(Stage::Joint, 100);
    let mut compared = 0;
    for (tokens, labels) in batches(&train_set, 16) {
        let (_, d_on) = on.step_romebert(&tokens, &labels, true).unwrap();
        let (_, d_off) = off.step_romebert(&tokens, &labels, false).unwrap();
        assert_eq!(d_on.dot, d_off.dot);
        if d_on.conflicted {
            break;
        }
        assert_eq!(on.store(), off.store());
        compared += 1;
    }
    assert!(compared > 0);
}

#[test]
fn scalar_toy_reproduces_hand_projection() {
    // L_f = 2·w1 and L_s = −w1 + w2 give g_f = (2, 0), g_s = (−1, 1).
    let layout = Layout::new(vec![("w1".to_string(), vec![1]), ("w2".to_string(), vec![1])]);
    let tape = Tape::<f64>::new();
    let one = mext::tensor::Tensor::new(vec![1], vec![0.7]).unwrap();
    let (w1, w2) = (tape.param(0, &one), tape.param(1, &one));
    let l_f = tape.sum(tape.scale(w1, 2.0));
    let l_s = tape.sum(tape.add(tape.scale(w1, -1.0), w2).unwrap());
    let g_f = flatten_tape(&tape.backward(l_f).unwrap(), &layout).unwrap();
    let g_s = flatten_tape(&tape.backward(l_s).unwrap(), &layout).unwrap();
    let (g, diag) = combine(&g_f, &g_s, true).unwrap();
    assert_eq!(g.values(), &[0.0, 2.0]);
    assert!(diag.conflicted);
    assert_eq!(diag.dot, -2.0);
    let (plain, _) = combine(&g_f, &g_s, false).unwrap();
    assert_eq!(plain.values(), &[1.0, 1.0]);
}

#[test]
fn every_group_moves_within_fifty_steps() {
    let (train_set, _) = data(0.7, 3);
    let store = ParamStore::<f32>::init(&model()).unwrap();
    let before = store.clone();
    let mut t = Trainer::new(store, regime(Regime::Romebert)).unwrap();
    t.begin_stage(Stage::Joint, 50);
    let bs = batches(&train_set, 16);
    for step in 0..50 {
        let (tokens, labels) = &bs[step % bs.len()];
        t.step_romebert(tokens, labels, true).unwrap();
    }
    let moved = |owner: Ownership| {
        t.store()
            .params()
            .iter()
            .zip(before.params())
            .filter(|(p, _)| p.owner == owner)
            .any(|(p, q)| p.value != q.value)
    };
    assert!(moved(Ownership::Embedding));
    for l in 1..=3 {
        assert!(moved(Ownership::Layer(l)), "layer {l}");
    }
    for i in 1..3 {
        assert!(moved(Ownership::OffRamp(i)), "off-ramp {i}");
    }
    assert!(moved(Ownership::FinalClassifier));
}

#[test]
fn gamma_zero_without_gr_is_joint_cross_entropy() {
    let (train_set, _) = data(0.7, 3);
    let store = ParamStore::<f64>::init(&model()).unwrap();
    let (tokens, labels) = train_set.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let mut cfg = regime(Regime::SdOnly);
    cfg.sd.gamma = 0.0;

    let mut a = Trainer::new(store.clone(), cfg.clone()).unwrap();
    a.begin_stage(Stage::Joint, 10);
    a.step_romebert(&tokens, &labels, false).unwrap();

    // Oracle: one backward pass of Σ_i CE(y, f_i) over all k exits.
    let mut b = Trainer::new(store.clone(), cfg).unwrap();
    b.begin_stage(Stage::Joint, 10);
    let tape = Tape::new();
    let bound = store.bind(&tape, |_| true);
    let out = forward_all_exits(&store, &tape, &bound, &tokens).unwrap();
    let mut total = cross_entropy(&tape, out.logits[0], &labels).unwrap();
    for &l in &out.logits[1..] {
        let ce = cross_entropy(&tape, l, &labels).unwrap();
        total = tape.add(total, ce).unwrap();
    }
    let g = flatten_tape(&tape.backward(total).unwrap(), b.layout()).unwrap();
    drop(tape);
    b.apply(g);

    for (p, q) in a.store().params().iter().zip(b.store().params()) {
        for (x, y) in p.value.data().iter().zip(q.value.data()) {
            assert!((x - y).abs() < 1e-6, "{}", p.name);
        }
    }
}

#[test]
fn conflict_rate_counts_conflicted_steps() {
    let rec = |dot: f64| ConflictRecord {
        step: 0,
        dot,
        norm_f: 1.0,
        norm_s: 1.0,
        conflicted: dot < 0.0,
    };
    let mut o = TrainOutcome {
        store: ParamStore::<f32>::init(&model()).unwrap(),
        log: Vec::new(),
        conflicts: vec![rec(0.5), rec(0.0), rec(2.0)],
    };
    assert_eq!(o.conflict_rate(), 0.0);
    o.conflicts.push(rec(-1.0));
    assert_eq!(o.conflict_rate(), 0.25);
}

#[test]
fn regimes_run_their_stages_in_order_and_deterministically() {
    let (train_set, dev_set) = data(0.7, 3);
    let deebert = train::<f32>(&model(), &regime(Regime::Deebert), &train_set, &dev_set).unwrap();
    let stages: Vec<Stage> = deebert.log.iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec![Stage::DeebertStage1, Stage::DeebertStage2]);
    assert!(deebert.conflicts.is_empty());

    let a = train::<f32>(&model(), &regime(Regime::Romebert), &train_set, &dev_set).unwrap();
    assert!(a.log.iter().all(|r| r.stage == Stage::Joint));
    assert_eq!(a.log.len(), 1);
    assert_eq!(a.log[0].per_layer_dev_acc.len(), 3);
    let b = train_from(ParamStore::<f32>::init(&model()).unwrap(), &regime(Regime::Romebert), &train_set, &dev_set, |_| {}).unwrap();
    assert_eq!(checkpoint::to_bytes(&a.store, None), checkpoint::to_bytes(&b.store, None));
    assert_eq!(a.log, b.log);
}

#[test]
fn empty_data_is_rejected() {
    let (train_set, dev_set) = data(0.7, 3);
    let empty = Dataset {
        examples: Vec::new(),
        ..dev_set.clone()
    };
    assert!(matches!(
        train::<f32>(&model(), &regime(Regime::Romebert), &train_set, &empty),
        Err(Error::Data(_))
    ));
}
