mod common;

use common::{randomize, tiny_config};
use mmkp_core::data::vocab::{LabelVocab, TokenVocab, Vocabulary, EOS_ID, RESERVED};
use mmkp_core::data::{encode_post, EncodedPost, Post};
use mmkp_core::eval::{beam_search, exhaustive, greedy, predict, predict_greedy, DecodeOptions, ModelScorer};
use mmkp_core::{Aggregation, Model, ModelConfig};

/// Ten generation tokens, one out-of-vocabulary source token and one
/// out-of-vocabulary label token: twelve extended ids.
fn small_world() -> (Vocabulary, EncodedPost, ModelConfig) {
    let mut gen: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    gen.extend(["cat", "sun"].map(String::from));
    let vocab = Vocabulary {
        gen: TokenVocab::from_tokens(gen).unwrap(),
        cls: LabelVocab::new(vec!["cat".into(), "blat".into()], vec![1, 1]).unwrap(),
    };
    let post = Post {
        id: "p".into(),
        text: ["sun", "zorp", "cat"].map(String::from).to_vec(),
        ocr: vec![],
        attributes: vec!["cat".into()],
        visual_features: Some(vec![vec![0.5; 6], vec![-0.25; 6]]),
        keyphrases: vec!["cat".into()],
    };
    let encoded = encode_post(&post, &vocab).unwrap();
    let config = ModelConfig {
        max_decode_len: 3,
        ..tiny_config()
    };
    (vocab, encoded, config)
}

fn model(seed: u64, vocab: &Vocabulary, config: &ModelConfig, scale: f64) -> Model<f64> {
    let mut m = Model::new(config.clone(), vocab.gen.len(), vocab.cls.len(), seed).unwrap();
    randomize(&mut m, seed, scale);
    m
}

#[test]
fn beam_top_hypothesis_matches_enumeration() {
    let (vocab, post, config) = small_world();
    let mut mismatches = Vec::new();
    for seed in 0..50 {
        let m = model(seed, &vocab, &config, 1.0);
        let scorer = ModelScorer::new(&m, &vocab, &post, Aggregation::BALANCED).unwrap();
        assert_eq!(scorer.prepared().ext.len(), 12);
        let beam = beam_search(&scorer, 10, 3, EOS_ID).unwrap();
        let best = exhaustive(&scorer, 3, EOS_ID).unwrap().unwrap();
        if beam[0].tokens != best.tokens || (beam[0].score - best.score).abs() > 1e-9 {
            mismatches.push((seed, beam[0].clone(), best));
        }
    }
    assert!(mismatches.is_empty(), "{mismatches:?}");
}

#[test]
fn beam_of_one_is_greedy() {
    let (vocab, post, config) = small_world();
    for seed in 0..20 {
        let m = model(seed, &vocab, &config, 1.0);
        let scorer = ModelScorer::new(&m, &vocab, &post, Aggregation::BALANCED).unwrap();
        let b = beam_search(&scorer, 1, 3, EOS_ID).unwrap();
        let g = greedy(&scorer, 3, EOS_ID).unwrap().unwrap();
        assert_eq!(b, vec![g]);

        let opts = DecodeOptions {
            beam: 1,
            top_k: 10,
            max_len: 3,
            agg: Aggregation::BALANCED,
        };
        let p = predict(&m, &vocab, &post, opts).unwrap();
        let q = predict_greedy(&m, &vocab, &post, 3, Aggregation::BALANCED).unwrap();
        assert_eq!(p, q);
    }
}

#[test]
fn prediction_lists_are_bounded_ranked_and_stem_unique() {
    let (vocab, post, config) = small_world();
    for seed in 0..10 {
        let m = model(seed, &vocab, &config, 2.0);
        for (beam, top_k) in [(10, 10), (10, 3), (4, 10)] {
            let opts = DecodeOptions {
                beam,
                top_k,
                max_len: 3,
                agg: Aggregation::BALANCED,
            };
            let p = predict(&m, &vocab, &post, opts).unwrap();
            assert!(p.keyphrases.len() <= beam.min(top_k));
            assert_eq!(p.keyphrases.len(), p.scores.len());
            assert!(p.scores.windows(2).all(|w| w[0] >= w[1]));
            let stems: std::collections::HashSet<_> =
                p.keyphrases.iter().map(|k| mmkp_core::eval::stem_phrase(k)).collect();
            assert_eq!(stems.len(), p.keyphrases.len());
            assert!(p.keyphrases.iter().all(|k| !k.is_empty() && !k.contains("<eos>")));
        }
    }
}
