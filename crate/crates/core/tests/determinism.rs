use std::collections::HashSet;

use shortcut_core::attribution::identify_shortcuts;
use shortcut_core::dataset::{build_vocabulary, encode_corpus, generate_corpus, EncodedExample, PoolSizes, ShortcutSpec};
use shortcut_core::models::{BiasOnlyConfig, ClassifierConfig};
use shortcut_core::shortcut::{build_bias_features, compute_profiles, train_bias_only, BiasTrainConfig};
use shortcut_core::training::{train_debiased, train_identification, DebiasPlan, EvalSets, TrainConfig, Variant};

fn data(seed: u64) -> (usize, Vec<EncodedExample>, Vec<EncodedExample>) {
    let mut spec = ShortcutSpec::new(3, &PoolSizes::default());
    spec.train_size = 200;
    spec.dev_size = 50;
    spec.ood_size = 50;
    spec.seed = seed;
    let s = generate_corpus(&spec).unwrap();
    let vocab = build_vocabulary(&[&s.train, &s.dev, &s.ood]);
    let train = encode_corpus(&s.train, &vocab, 24).unwrap();
    let dev = encode_corpus(&s.dev, &vocab, 24).unwrap();
    (vocab.len(), train, dev)
}

fn config(vocab: usize) -> ClassifierConfig {
    let mut c = ClassifierConfig::new(vocab, 3);
    c.dim = 16;
    c
}

#[test]
fn corpus_generation_is_seeded() {
    let mut spec = ShortcutSpec::new(3, &PoolSizes::default());
    spec.train_size = 100;
    let a = generate_corpus(&spec).unwrap();
    assert_eq!(a, generate_corpus(&spec).unwrap());
    spec.seed += 1;
    assert_ne!(a.train, generate_corpus(&spec).unwrap().train);
}

#[test]
fn whole_chain_repeats_bit_for_bit() {
    let run = || {
        let (v, train, dev) = data(4);
        let tc = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let eval = EvalSets { dev: &dev, ood: &dev };
        let id = train_identification(config(v), &train, eval, &tc).unwrap();
        let none = HashSet::new();
        let items: Vec<_> = train
            .iter()
            .map(|ex| {
                let r = identify_shortcuts(&id.model, &ex.ids, ex.label, 8, 3, &none).unwrap();
                let f = build_bias_features(&id.model, &ex.ids, &r.selected, 3).unwrap();
                (ex.id.clone(), r.selected, f)
            })
            .collect();
        let feats: Vec<Vec<f64>> = items.iter().map(|i| i.2.clone()).collect();
        let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
        let (bias, _) = train_bias_only(&feats, &labels, BiasOnlyConfig::new(3, 16, 3), &BiasTrainConfig::default()).unwrap();
        let profiles = compute_profiles(&bias, &items, 18, 2).unwrap();
        let plan = DebiasPlan {
            profiles: &profiles,
            excluded: &none,
        };
        let dc = TrainConfig {
            variant: Variant::DbrSoft,
            ..tc
        };
        let out = train_debiased(config(v), &train, plan, eval, &dc).unwrap();
        (id.model, profiles, out.model, out.log)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.3.to_jsonl(), b.3.to_jsonl());
}

#[test]
fn training_seed_changes_the_result() {
    let (v, train, _) = data(4);
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let a = train_identification(config(v), &train, EvalSets::default(), &tc).unwrap();
    let other = TrainConfig { seed: 99, ..tc };
    let b = train_identification(config(v), &train, EvalSets::default(), &other).unwrap();
    assert_ne!(a.model, b.model);
}
