//! The library used end to end through its public API: corpus, training,
//! checkpoints, translation, fusion and scoring on a very small model.

use molalign_core::data::{build_triples, gen_toy_corpus, split_dataset, template, CorruptionGenerator, Direction, LmPair};
use molalign_core::eval::{evaluate, LexicalBaseline, NliScorer, PairRecord};
use molalign_core::merge::{load_checkpoint, merge, round_to_f32, save_checkpoint, Algorithm, MergeConfig};
use molalign_core::policy::{init_params, ModelConfig, PolicyParams, Vocab};
use molalign_core::train::{preference_margin, train, translate_all, Method, TrainConfig, TrainSet};

fn vocab_for(pairs: &[LmPair]) -> Vocab {
    let mut texts: Vec<&str> = pairs.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]).collect();
    let templates = [template(Direction::Mol2Lang), template(Direction::Lang2Mol)];
    texts.extend(templates.iter().map(|t| t.text));
    Vocab::from_corpus(texts)
}

/// Batches never mix directions, so an epoch has ceil(n/4) steps per direction.
fn fit(init: &PolicyParams, reference: Option<&PolicyParams>, data: &TrainSet, method: Method, per_direction: [usize; 2]) -> PolicyParams {
    let cfg = TrainConfig { lr: 1e-2, epochs: 2, batch_size: 4, ..TrainConfig::new(method, 3) };
    let mut steps = 0;
    let out = train(init, reference, data, &cfg, &mut |_| steps += 1).unwrap();
    assert_eq!(steps, 2 * per_direction.iter().map(|n| n.div_ceil(4)).sum::<usize>());
    out
}

#[test]
fn corpus_to_report() {
    let corpus = gen_toy_corpus(24, 11).unwrap();
    let (train_pairs, _, test_pairs) = split_dataset(&corpus, [0.75, 0.125, 0.125], 11).unwrap();
    assert_eq!((train_pairs.len(), test_pairs.len()), (18, 3));

    let cfg = ModelConfig { vocab: vocab_for(&corpus), d_model: 8, blocks: 1, heads: 2, context: 640, seed: 5 };
    let init = init_params(&cfg).unwrap();
    let sft_data = TrainSet::from_pairs(init.vocab(), &train_pairs).unwrap();
    let l2m = train_pairs.iter().filter(|p| p.direction == Direction::Lang2Mol).count();
    let sizes = [l2m, train_pairs.len() - l2m];
    let sft = fit(&init, None, &sft_data, Method::Sft, sizes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.ckpt");
    save_checkpoint(&sft, &path).unwrap();
    let reloaded = load_checkpoint(&path).unwrap();
    assert_eq!(reloaded.tensors(), round_to_f32(&sft).tensors());

    let triples = build_triples(&train_pairs, &mut CorruptionGenerator::new(0.5, 11)).triples;
    assert_eq!(triples.len(), train_pairs.len());
    let pref = TrainSet::from_triples(sft.vocab(), &triples).unwrap();
    let cpo = fit(&sft, None, &pref, Method::Cpo, sizes);
    let dpo = fit(&sft, Some(&sft), &pref, Method::Dpo, sizes);
    let TrainSet::Pref(items) = &pref else { panic!("triples encode as preference items") };
    let before = preference_margin(&sft, items).unwrap();
    assert!(preference_margin(&cpo, items).unwrap() > before);
    assert!(preference_margin(&dpo, items).unwrap() > before);

    let fused = merge(&MergeConfig::new(Algorithm::Slerp, vec![1.0, 1.0]), None, &[&cpo, &dpo]).unwrap();
    let ties = MergeConfig { density: 0.5, ..MergeConfig::new(Algorithm::Ties, vec![1.0, 1.0]) };
    let tied = merge(&ties, Some(&sft), &[&cpo, &dpo]).unwrap();

    let sources: Vec<(Direction, &str)> = test_pairs.iter().map(|p| (p.direction, p.source.as_str())).collect();
    for model in [&sft, &fused, &tied] {
        let preds = translate_all(model, &sources, 12).unwrap();
        let records: Vec<PairRecord> = test_pairs
            .iter()
            .zip(&preds)
            .map(|(p, pred)| PairRecord {
                id: p.id.clone(),
                direction: p.direction,
                prediction: pred.clone(),
                reference: p.target.clone(),
            })
            .collect();
        let mut scorer = LexicalBaseline;
        let scored = evaluate(&records, Some(&mut scorer as &mut dyn NliScorer), 2).unwrap();
        assert_eq!(scored.len(), test_pairs.len());
        for (s, p) in scored.iter().zip(&test_pairs) {
            assert_eq!(s.id, p.id);
            if p.direction == Direction::Mol2Lang {
                assert!(s.nli.is_some());
            }
        }
    }
}
