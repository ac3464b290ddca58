//! Helpers shared by integration tests: a tiny hand-built vocabulary and
//! random posts over it.
#![allow(dead_code)]

use mmkp_core::data::vocab::{LabelVocab, TokenVocab, Vocabulary, RESERVED};
use mmkp_core::data::{encode_post, EncodedPost, Label, Post};
use mmkp_core::{Model, ModelConfig, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 12] = [
    "cat", "dog", "sun", "sea", "red", "blue", "run", "jump", "tree", "rain", "wind", "star",
];
/// Tokens outside the generation vocabulary.
pub const OOV: [&str; 3] = ["zorp", "quix", "blat"];
pub const LABELS: [&str; 4] = ["cat", "blue sea", "zorp", "red quix"];
pub const VISUAL_DIM: usize = 6;

/// Model at the dimensions used by the gradient oracle.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_emb: 4,
        heads: 2,
        d_head: 4,
        visual_dim: VISUAL_DIM,
        top_k: 2,
        max_decode_len: 3,
        ..ModelConfig::default()
    }
}

/// 20 generation tokens (8 reserved) and 4 labels.
pub fn tiny_vocab() -> Vocabulary {
    let mut gen: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    gen.extend(WORDS.iter().map(|s| s.to_string()));
    Vocabulary {
        gen: TokenVocab::from_tokens(gen).unwrap(),
        cls: LabelVocab::new(LABELS.iter().map(|s| s.to_string()).collect(), vec![3, 2, 2, 1]).unwrap(),
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs[rng.gen_range(0..xs.len())]
}

/// A random post with up to five text tokens (some out of vocabulary),
/// three visual rows and two attributes.
pub fn random_post<R: Rng>(rng: &mut R, id: usize) -> Post {
    let len = rng.gen_range(1..=5);
    let text = (0..len)
        .map(|_| {
            if rng.gen_bool(0.25) {
                pick(rng, &OOV).to_string()
            } else {
                pick(rng, &WORDS).to_string()
            }
        })
        .collect();
    let visual = (0..3)
        .map(|_| (0..VISUAL_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    Post {
        id: format!("p{id}"),
        text,
        ocr: vec![],
        attributes: vec![pick(rng, &WORDS).to_string(), pick(rng, &WORDS).to_string()],
        visual_features: Some(visual),
        keyphrases: vec![pick(rng, &LABELS).to_string()],
    }
}

pub struct Case {
    pub post: EncodedPost,
    pub target: Vec<String>,
    pub label: Label,
}

pub fn random_case<R: Rng>(rng: &mut R, vocab: &Vocabulary, id: usize) -> Case {
    let post = random_post(rng, id);
    let kp = post.keyphrases[0].clone();
    Case {
        post: encode_post(&post, vocab).unwrap(),
        target: kp.split_whitespace().map(String::from).collect(),
        label: Label::Known(vocab.cls.id(&kp).unwrap()),
    }
}

/// Overwrites every parameter with uniform values in `[-scale, scale]`,
/// layer-norm gains included, so no gradient is trivially zero.
pub fn randomize<T: Scalar>(model: &mut Model<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let shape = model.params().get(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of_f64(rng.gen_range(-scale..=scale))).collect();
        model.params_mut().set(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

/// Sets every parameter to zero.
pub fn zero_params<T: Scalar>(model: &mut Model<T>) {
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let shape = model.params().get(id).shape().to_vec();
        model.params_mut().set(id, Tensor::zeros(shape)).unwrap();
    }
}

pub fn tiny_model<T: Scalar>(seed: u64) -> (Model<T>, Vocabulary) {
    let vocab = tiny_vocab();
    let mut model = Model::new(tiny_config(), vocab.gen.len(), vocab.cls.len(), seed).unwrap();
    randomize(&mut model, seed + 1000, 0.5);
    (model, vocab)
}
