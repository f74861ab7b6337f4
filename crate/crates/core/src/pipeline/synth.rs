//! Deterministic synthetic corpora: a copy task (reply == query) and a
//! templated symptom/advice QA task with a small, bounded vocabulary.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocab, DialoguePair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthTask {
    Copy,
    TemplateQa,
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SynthTask::Copy),
            "template-qa" | "template_qa" => Ok(SynthTask::TemplateQa),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected copy or template-qa)"
            ))),
        }
    }
}

const BODY_PARTS: [&str; 5] = ["back", "neck", "shoulder", "knee", "hip"];
const TRIGGERS: [&str; 5] = ["sitting", "lifting", "running", "sleeping", "standing"];
const SYMPTOMS: [&str; 4] = ["pain", "stiffness", "soreness", "aching"];
const ACTIVITIES: [&str; 4] = ["stretching", "walking", "swimming", "cycling"];
const ADVICE: [&str; 4] = ["heat", "ice", "light exercise", "short walks"];
const WEEKS: [&str; 4] = ["two", "three", "four", "six"];

/// Deterministic corpus generation. The copy task sets reply = query over a
/// small word pool; the template task draws symptom/advice sentence patterns.
/// The tokenized vocabulary (including the four specials) stays within
/// `vocab_size_bound`.
pub fn generate_synthetic_corpus(
    n_pairs: usize,
    vocab_size_bound: usize,
    seed: u64,
    task: SynthTask,
) -> Result<Vec<DialoguePair>> {
    if n_pairs < 2 {
        return Err(Error::Config(format!(
            "n_pairs must be at least 2, got {n_pairs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = match task {
        SynthTask::Copy => copy_corpus(n_pairs, vocab_size_bound, &mut rng)?,
        SynthTask::TemplateQa => template_corpus(n_pairs, vocab_size_bound, &mut rng)?,
    };
    debug_assert!(build_vocab(&pairs, 1).size() <= vocab_size_bound);
    Ok(pairs)
}

fn copy_corpus(
    n_pairs: usize,
    vocab_size_bound: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DialoguePair>> {
    if vocab_size_bound < 8 {
        return Err(Error::Config(format!(
            "copy task needs a vocab bound of at least 8, got {vocab_size_bound}"
        )));
    }
    // a small pool and short repetition-free sentences keep the copy rule
    // easy to induce from few examples
    let pool: Vec<String> = (0..(vocab_size_bound - 4).min(8))
        .map(|i| format!("w{i:02}"))
        .collect();
    Ok((0..n_pairs)
        .map(|_| {
            let len = rng.random_range(3..=5).min(pool.len());
            let mut indices: Vec<usize> = (0..pool.len()).collect();
            indices.shuffle(rng);
            let words: Vec<&str> = indices[..len].iter().map(|&i| pool[i].as_str()).collect();
            let text = words.join(" ");
            DialoguePair {
                query: text.clone(),
                reply: text,
            }
        })
        .collect())
}

fn template_corpus(
    n_pairs: usize,
    vocab_size_bound: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DialoguePair>> {
    // the fixed template vocabulary is ~70 tokens after tokenization
    if vocab_size_bound < 80 {
        return Err(Error::Config(format!(
            "template-qa needs a vocab bound of at least 80, got {vocab_size_bound}"
        )));
    }
    let pairs = (0..n_pairs)
        .map(|_| {
            let part = BODY_PARTS[rng.random_range(0..BODY_PARTS.len())];
            let trigger = TRIGGERS[rng.random_range(0..TRIGGERS.len())];
            let symptom = SYMPTOMS[rng.random_range(0..SYMPTOMS.len())];
            let activity = ACTIVITIES[rng.random_range(0..ACTIVITIES.len())];
            let advice = ADVICE[rng.random_range(0..ADVICE.len())];
            let weeks = WEEKS[rng.random_range(0..WEEKS.len())];
            let (query, reply) = match rng.random_range(0..5) {
                0 => (
                    format!("my {part} {symptom} gets worse after {trigger}, what should i do?"),
                    format!("try {advice} and gentle {activity} for a few days."),
                ),
                1 => (
                    format!("why does my {part} ache when {trigger}?"),
                    format!("{trigger} often strains the {part}; regular {activity} helps."),
                ),
                2 => (
                    format!("is {symptom} in my {part} serious?"),
                    format!("see a clinician if the {symptom} lasts more than {weeks} weeks."),
                ),
                3 => (
                    format!("how long will the {symptom} in my {part} last?"),
                    format!("with {advice} and rest it usually settles within {weeks} weeks."),
                ),
                _ => (
                    format!("can {activity} help with {part} {symptom}?"),
                    format!("yes, gentle {activity} eases {symptom} if you start slowly."),
                ),
            };
            DialoguePair { query, reply }
        })
        .collect();
    Ok(pairs)
}
