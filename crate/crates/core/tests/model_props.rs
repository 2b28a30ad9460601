//! Toy model: output simplex, determinism and state round-trips.

mod common;

use common::fixture;
use hyperedit::model::{ModelConfig, ToyModel, Vocab};
use hyperedit::request::Prompt;
use proptest::prelude::*;

fn prompts() -> Vec<Prompt> {
    let f = fixture();
    f.data
        .triples
        .iter()
        .flat_map(|t| {
            [
                Prompt::new(t.subject.as_str(), t.relation.as_str()),
                Prompt::new(t.subject.as_str(), hyperedit::bench::paraphrase_of(&t.relation)),
                Prompt::new(t.object.as_str(), hyperedit::bench::portability_of(&t.relation)),
            ]
        })
        .collect()
}

#[test]
fn round_trip_preserves_outputs() {
    let f = fixture();
    let mut model = f.model.clone();
    let ps: Vec<Prompt> = prompts().into_iter().take(100).collect();
    let before: Vec<Vec<f64>> = ps.iter().map(|p| model.forward(p).unwrap()).collect();
    let state = model.snapshot();
    let (m, n) = model.dims();
    model.set_weights(ndarray::Array2::from_elem((m, n), 0.01)).unwrap();
    model.restore(&state).unwrap();
    model.restore(&state).unwrap();
    for (p, b) in ps.iter().zip(&before) {
        let a = model.forward(p).unwrap();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let back = ToyModel::from_json(&model.to_json().unwrap()).unwrap();
    assert_eq!(back.snapshot(), state);
}

#[test]
fn seeds_give_different_models() {
    let f = fixture();
    let vocab = Vocab::from_triples(&f.data.triples, 0.1, 0.3).unwrap();
    let base = ModelConfig { hidden: 8, key_dim: 12, embed_dim: 6, ..ModelConfig::default() };
    for s in 0..20u64 {
        let a = ToyModel::new(vocab.clone(), ModelConfig { seed: s, ..base.clone() }).unwrap();
        let b = ToyModel::new(vocab.clone(), ModelConfig { seed: s + 100, ..base.clone() }).unwrap();
        assert_ne!(a.weights(), b.weights());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_distributions(i in 0usize..10_000) {
        let ps = prompts();
        let p = &ps[i % ps.len()];
        let model = &fixture().model;
        let probs = model.forward(p).unwrap();
        prop_assert!(probs.iter().all(|&x| x >= 0.0));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let again = model.forward(p).unwrap();
        prop_assert_eq!(probs, again);
    }
}
