//! Deterministic synthetic text for smoke runs and tests.
//!
//! The generator strings together short sentences from a small grammar with
//! Zipf-weighted word choice, which gives a character-level model plenty of
//! structure to learn without shipping a real corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBJECTS: &[&str] = &[
    "the model", "a layer", "the optimizer", "each head", "the network", "a neuron", "the gradient",
    "this run", "the residual stream", "a small model", "the large model", "every block",
];
const VERBS: &[&str] = &[
    "learns", "writes", "reads", "updates", "converges", "saturates", "forgets", "stores", "mixes",
    "projects", "tracks", "shifts", "encodes", "predicts",
];
const OBJECTS: &[&str] = &[
    "the signal", "its weights", "a pattern", "the next token", "the loss", "new features",
    "a low rank map", "the attention scores", "old memories", "the embedding", "a direction",
];
const ADVERBS: &[&str] = &["quickly", "slowly", "early", "late", "steadily", "again", "twice", "rarely"];
const CLOSERS: &[&str] = &[".", ".", ".", "!", "?", ";"];

struct Zipf {
    cumulative: Vec<f64>,
}

impl Zipf {
    fn new(n: usize) -> Self {
        let mut acc = 0.0;
        let cumulative = (1..=n)
            .map(|k| {
                acc += 1.0 / k as f64;
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(0.0);
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

/// At least `min_bytes` of ASCII text, reproducible from `seed`.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tables = [SUBJECTS, VERBS, OBJECTS, ADVERBS].map(|t| (t, Zipf::new(t.len())));
    let pick = |rng: &mut ChaCha8Rng, i: usize| {
        let (words, zipf) = &tables[i];
        words[zipf.sample(rng)]
    };
    let mut out = String::with_capacity(min_bytes + 128);
    let mut sentences = 0usize;
    while out.len() < min_bytes {
        let subject = pick(&mut rng, 0);
        let verb = pick(&mut rng, 1);
        let object = pick(&mut rng, 2);
        let mut sentence = format!("{subject} {verb} {object}");
        if rng.random_bool(0.4) {
            sentence.push(' ');
            sentence.push_str(pick(&mut rng, 3));
        }
        if let Some(first) = sentence.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        out.push_str(&sentence);
        out.push_str(CLOSERS[rng.random_range(0..CLOSERS.len())]);
        sentences += 1;
        out.push(if sentences % 6 == 0 { '\n' } else { ' ' });
    }
    out
}
