//! Deterministic synthetic corpora with three planted keyphrase sources.
//!
//! Posts rotate through three populations:
//! * `text`: a unique trigger word sits in the text and is the keyphrase.
//! * `attr`: a topic word among the attributes determines a keyphrase
//!   that never appears in the post.
//! * `ocr`: a two-word phrase inside the OCR tokens is the keyphrase.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::post::Post;
use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const GENERIC_ATTRIBUTES: [&str; 5] = ["photo", "people", "outdoor", "indoor", "screenshot"];

pub const VISUAL_ROWS: usize = 4;
pub const VISUAL_DIM: usize = 8;

/// Sub-population a synthetic post belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Population {
    Text,
    Attribute,
    Ocr,
}

impl Population {
    pub fn of_index(i: usize) -> Self {
        match i % 3 {
            0 => Population::Text,
            1 => Population::Attribute,
            _ => Population::Ocr,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Population::Text => "text",
            Population::Attribute => "attr",
            Population::Ocr => "ocr",
        }
    }

    /// Recovers the population from a synthetic post id.
    pub fn of_id(id: &str) -> Option<Self> {
        match id.rsplit('-').next()? {
            "text" => Some(Population::Text),
            "attr" => Some(Population::Attribute),
            "ocr" => Some(Population::Ocr),
            _ => None,
        }
    }
}

/// Pronounceable word for `i`: two or more consonant-vowel syllables.
fn word(mut i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let mut out = String::new();
    for k in 0.. {
        let s = i % n;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        i /= n;
        if i == 0 && k >= 1 {
            break;
        }
    }
    out
}

fn count_of(n_posts: usize, pop: Population) -> usize {
    (0..n_posts).filter(|&i| Population::of_index(i) == pop).count()
}

/// Generates `n_posts` posts over `vocab_size` filler words.
pub fn synth_corpus(n_posts: usize, vocab_size: usize, seed: u64) -> Result<Vec<Post>> {
    if n_posts == 0 {
        return Err(Error::validation("n", "need at least one post"));
    }
    let n_attr_topics = count_of(n_posts, Population::Attribute).div_ceil(4).max(1);
    let n_ocr_topics = count_of(n_posts, Population::Ocr).div_ceil(6).max(1);
    if vocab_size <= n_attr_topics {
        return Err(Error::validation(
            "vocab",
            format!("need more than {n_attr_topics} filler words"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers: Vec<String> = (0..vocab_size).map(word).collect();
    // the first fillers double as topic attributes and never occur in
    // attribute-population texts
    let plain = &fillers[n_attr_topics..];

    let (mut attr_seen, mut ocr_seen) = (0usize, 0usize);
    let mut posts = Vec::with_capacity(n_posts);
    for i in 0..n_posts {
        let pop = Population::of_index(i);
        let len = rng.gen_range(6..=9);
        let pool: &[String] = if pop == Population::Attribute { plain } else { &fillers };
        let mut text: Vec<String> = (0..len)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect();
        let n_generic = rng.gen_range(2..=3);
        let mut attributes: Vec<String> = GENERIC_ATTRIBUTES
            .choose_multiple(&mut rng, n_generic)
            .map(|s| s.to_string())
            .collect();
        let mut ocr = Vec::new();
        let mut visual: Vec<Vec<f32>> = (0..VISUAL_ROWS)
            .map(|_| {
                (0..VISUAL_DIM)
                    .map(|_| rng.gen_range(-16..=16) as f32 / 64.0)
                    .collect()
            })
            .collect();
        let keyphrase = match pop {
            Population::Text => {
                let trigger = format!("zq{}", word(i));
                let at = rng.gen_range(0..=text.len());
                text.insert(at, trigger.clone());
                trigger
            }
            Population::Attribute => {
                let topic = attr_seen % n_attr_topics;
                attr_seen += 1;
                attributes.truncate(2);
                let at = rng.gen_range(0..=attributes.len());
                attributes.insert(at, fillers[topic].clone());
                visual[0][topic % VISUAL_DIM] += 1.0;
                format!("xk{}", word(topic))
            }
            Population::Ocr => {
                let topic = ocr_seen % n_ocr_topics;
                ocr_seen += 1;
                let phrase = [format!("vy{}", word(2 * topic)), format!("vy{}", word(2 * topic + 1))];
                ocr.push(fillers[rng.gen_range(0..fillers.len())].clone());
                ocr.extend(phrase.iter().cloned());
                ocr.push(fillers[rng.gen_range(0..fillers.len())].clone());
                phrase.join(" ")
            }
        };
        posts.push(Post {
            id: format!("synth-{i:05}-{}", pop.tag()),
            text,
            ocr,
            attributes,
            visual_features: Some(visual),
            keyphrases: vec![keyphrase],
        });
    }
    Ok(posts)
}
