//! Generated two-class review task with a matching generator and a
//! pre-trained classifier.
//!
//! Sentences look like `the plot was really superb honestly`; the sentiment
//! word decides the class. The generator is a tabular model in which every
//! input, whatever its class, most likely continues with one generic two-word
//! phrase; each class also has a label word that is likely after that class's
//! inputs and unlikely after the other's. The classifier is a tiny
//! encoder-decoder pre-trained on a separate corpus, so it starts out knowing
//! the label words but not any particular mapping. Its corpus mixes
//! continuations sampled from the generator with one-word "topic"
//! continuations whose distribution depends only on the sentence's subject
//! noun, which makes the score of an arbitrary word vary from sentence to
//! sentence independently of the class.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, MetricKind, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::lm::tiny::TinyTrainer;
use crate::lm::{
    FineTuneConfig, ModelHandle, TabularModel, TinyConfig, TinyModel, TokenId, TrainPair, TrainSession, Vocab,
};
use crate::scoring::{LabelMapping, MappingEntry};
use crate::templating::{builtin_template, RenderedInput};

const DETS: [&str; 3] = ["the", "this", "that"];
const SUBJECTS: [&str; 10] = [
    "movie", "film", "plot", "story", "acting", "cast", "script", "ending", "score", "pacing",
];
const VERBS: [&str; 4] = ["was", "is", "felt", "seemed"];
const ADVERBS: [&str; 6] = ["really", "quite", "very", "truly", "rather", "so"];
const POSITIVE: [&str; 8] = [
    "good",
    "great",
    "excellent",
    "wonderful",
    "superb",
    "brilliant",
    "lovely",
    "fine",
];
const NEGATIVE: [&str; 8] = ["bad", "awful", "terrible", "dreadful", "boring", "poor", "weak", "dull"];
const TAILS: [&str; 5] = ["overall", "indeed", "honestly", "today", "again"];
/// Words that never occur in inputs; they only show up as topic
/// continuations, so most of the vocabulary is unrelated to the task, as in
/// a real language model.
const FILLER: [&str; 64] = [
    "apple", "river", "window", "garden", "pencil", "candle", "bridge", "forest", "engine", "blanket", "mirror",
    "ladder", "basket", "island", "pocket", "valley", "kettle", "harbor", "saddle", "lantern", "meadow", "button",
    "castle", "feather", "hammer", "jacket", "marble", "needle", "orchard", "pillow", "rocket", "shovel", "tunnel",
    "violin", "wagon", "barrel", "cactus", "desert", "falcon", "glacier", "helmet", "insect", "jungle", "kitten",
    "lemon", "magnet", "napkin", "oyster", "parrot", "quilt", "saucer", "tablet", "umbrella", "vessel", "walnut",
    "anchor", "bucket", "carpet", "dolphin", "elbow", "fossil", "goblet", "hollow", "icicle",
];
const GENERIC: [[&str; 2]; 4] = [["thank", "you"], ["well", "said"], ["of", "course"], ["i", "see"]];

pub const LABELS: [&str; 2] = ["positive", "negative"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Labeled examples generated per class.
    pub per_class: usize,
    pub tiny: TinyConfig,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Pairs drawn for pre-training.
    pub pretrain_pairs: usize,
    /// Share of pre-training targets that are topic continuations.
    pub topic_share: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            per_class: 64,
            tiny: TinyConfig {
                d_model: 16,
                d_ff: 32,
                max_src: 16,
                max_tgt: 24,
            },
            pretrain_steps: 3000,
            pretrain_batch: 16,
            pretrain_lr: 0.1,
            pretrain_pairs: 8000,
            topic_share: 0.35,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub task: TaskSpec,
    pub data: Vec<Example>,
    pub vocab: Vocab,
    pub generator: TabularModel,
    /// The generic phrase every input favours.
    pub generic: String,
    /// Class → the word the generator ties to that class.
    pub label_words: IndexMap<String, String>,
    pub seed: u64,
}

pub fn vocabulary() -> Result<Vocab> {
    let groups: [&[&str]; 8] = [
        &DETS, &SUBJECTS, &VERBS, &ADVERBS, &POSITIVE, &NEGATIVE, &TAILS, &FILLER,
    ];
    let generic = GENERIC.iter().flatten().copied();
    Vocab::with_specials(groups.into_iter().flatten().copied().chain(generic))
}

fn sentence(rng: &mut ChaCha8Rng, cues: &[&str]) -> String {
    let subject = rng.gen_range(0..SUBJECTS.len());
    sentence_about(rng, subject, cues)
}

fn sentence_about(rng: &mut ChaCha8Rng, subject: usize, cues: &[&str]) -> String {
    [
        *DETS.choose(rng).unwrap(),
        SUBJECTS[subject],
        *VERBS.choose(rng).unwrap(),
        *ADVERBS.choose(rng).unwrap(),
        *cues.choose(rng).unwrap(),
        *TAILS.choose(rng).unwrap(),
    ]
    .join(" ")
}

fn id(v: &Vocab, w: &str) -> TokenId {
    v.id(w).expect("synthetic words are in the vocabulary")
}

pub fn build_world(config: &SyntheticConfig) -> Result<SyntheticWorld> {
    if config.per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab = vocabulary()?;
    let eos = vocab.special().eos_id;
    let generic = *GENERIC.choose(&mut rng).unwrap();
    let (g1, g2) = (id(&vocab, generic[0]), id(&vocab, generic[1]));
    let label_pos = *POSITIVE.choose(&mut rng).unwrap();
    let label_neg = *NEGATIVE.choose(&mut rng).unwrap();

    let mut gen = TabularModel::uniform(&format!("synthetic-generator-{}", config.seed), vocab.clone());
    for w in POSITIVE {
        gen.add_trigger(w, "positive");
    }
    for w in NEGATIVE {
        gen.add_trigger(w, "negative");
    }
    // Most words may end a sequence right away.
    for t in vocab.content_ids() {
        gen.set_probs(None, &[t], &[(eos, 0.5)])?;
    }
    for (sig, own, other) in [("positive", label_pos, label_neg), ("negative", label_neg, label_pos)] {
        let p_generic = rng.gen_range(0.30..0.45);
        let p_own = rng.gen_range(0.15..0.22);
        let p_other = rng.gen_range(0.02..0.04);
        let (own, other) = (id(&vocab, own), id(&vocab, other));
        gen.set_probs(Some(sig), &[], &[(g1, p_generic), (own, p_own), (other, p_other)])?;
        gen.set_probs(Some(sig), &[g1], &[(g2, 0.9)])?;
        gen.set_probs(Some(sig), &[g1, g2], &[(eos, 0.9)])?;
        gen.set_probs(Some(sig), &[own], &[(eos, 0.8)])?;
        gen.set_probs(Some(sig), &[other], &[(eos, 0.8)])?;
    }

    let mut data = Vec::with_capacity(2 * config.per_class);
    for _ in 0..config.per_class {
        for (label, cues) in [(LABELS[0], &POSITIVE), (LABELS[1], &NEGATIVE)] {
            data.push(Example::labeled(vec![sentence(&mut rng, cues)], label)?);
        }
    }
    let task = TaskSpec::new(
        TaskKind::SingleSentence,
        LABELS.iter().map(|s| s.to_string()).collect(),
        MetricKind::Accuracy,
    )?;
    Ok(SyntheticWorld {
        task,
        data,
        vocab,
        generator: gen,
        generic: generic.join(" "),
        label_words: [
            (LABELS[0].to_string(), label_pos.to_string()),
            (LABELS[1].to_string(), label_neg.to_string()),
        ]
        .into_iter()
        .collect(),
        seed: config.seed,
    })
}

/// Ancestral sample of at most `max_len` tokens, stopping after EOS.
fn sample_target(
    model: &ModelHandle,
    input: &RenderedInput,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>> {
    let eos = model.special().eos_id;
    let mut seq = Vec::new();
    while seq.len() < max_len {
        let row = model.next_token_logprobs(input, &seq)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        for (t, lp) in row.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                pick = Some(t);
                break;
            }
        }
        let t = pick.unwrap_or_else(|| row.iter().rposition(|lp| lp.is_finite()).unwrap_or(eos));
        if seq.is_empty() && t == eos {
            continue;
        }
        seq.push(t);
        if t == eos {
            break;
        }
    }
    Ok(seq)
}

/// Tiny encoder-decoder trained on sentences from a fresh corpus. Sentences
/// come in pairs, one per class, about the same subject. A pair either shares
/// one topic target (a word drawn from the subject's distribution, then EOS),
/// so words outside the generator's class-specific rows appear equally often
/// after both classes, or each sentence gets a generator sample whose first
/// token is the generic phrase or a label word.
pub fn pretrain_classifier(world: &SyntheticWorld, config: &SyntheticConfig) -> Result<TinyModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_cafe);
    let generator = ModelHandle::new(world.generator.clone());
    let template = builtin_template(TaskKind::SingleSentence);
    let content = world.vocab.content_ids();
    let eos = world.vocab.special().eos_id;
    let mut informative: Vec<TokenId> = world.label_words.values().map(|w| id(&world.vocab, w)).collect();
    informative.push(id(&world.vocab, world.generic.split(' ').next().unwrap_or_default()));
    let topics: Vec<Vec<f64>> = SUBJECTS
        .iter()
        .map(|_| content.iter().map(|_| (3.0 * rng.gen::<f64>()).exp()).collect())
        .collect();
    let mut pairs = Vec::with_capacity(config.pretrain_pairs);
    while pairs.len() < config.pretrain_pairs {
        let subject = rng.gen_range(0..SUBJECTS.len());
        let inputs = [&POSITIVE, &NEGATIVE]
            .map(|cues| template.render(&Example::new(vec![sentence_about(&mut rng, subject, cues)], None)?));
        let topic = rng.gen::<f64>() < config.topic_share;
        let shared = if topic {
            let weights = &topics[subject];
            let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
            let mut pick = content[content.len() - 1];
            for (&t, &w) in content.iter().zip(weights) {
                if u < w {
                    pick = t;
                    break;
                }
                u -= w;
            }
            Some(vec![pick, eos])
        } else {
            None
        };
        for input in inputs {
            let input = input?;
            let target = match &shared {
                Some(t) => t.clone(),
                None => loop {
                    let t = sample_target(&generator, &input, 3, &mut rng)?;
                    if informative.contains(&t[0]) {
                        break t;
                    }
                },
            };
            pairs.push(TrainPair {
                input,
                target: target.into(),
            });
        }
    }
    let model = TinyModel::init(
        &format!("synthetic-classifier-{}", config.seed),
        world.vocab.clone(),
        config.tiny,
        config.seed,
    )?;
    // A random output projection would leave every word with a random slope
    // along the class direction, so it starts at zero instead.
    let mut flat = model.flat_params();
    let (v, d) = (world.vocab.len(), config.tiny.d_model);
    let end = flat.len() - v;
    flat[end - d * v..end].fill(0.0);
    let model = model.with_flat_params(&flat)?;
    let ft = FineTuneConfig {
        steps: config.pretrain_steps,
        batch_size: config.pretrain_batch,
        learning_rate: config.pretrain_lr,
        validate_every: config.pretrain_steps.max(1),
        seed: config.seed,
    };
    let mut trainer = TinyTrainer::new(&model, &pairs, &ft)?;
    trainer.train_steps(config.pretrain_steps)?;
    Ok(trainer.model())
}

/// Mapping with the same sequence lengths as `like`, with every content token
/// drawn uniformly (EOS kept where `like` has it), distinct from `like`'s
/// sequences and injective.
pub fn random_mapping(task: &TaskSpec, model: &ModelHandle, like: &LabelMapping, seed: u64) -> Result<LabelMapping> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content = model.content_ids();
    let eos = model.special().eos_id;
    let taken: Vec<_> = like.iter().map(|(_, e)| e.tokens.clone()).collect();
    for _ in 0..1000 {
        let mut entries = IndexMap::new();
        for (class, e) in like.iter() {
            let seq: Vec<TokenId> = e
                .tokens
                .iter()
                .map(|&t| {
                    if t == eos {
                        eos
                    } else {
                        *content.choose(&mut rng).unwrap()
                    }
                })
                .collect();
            let text = model.detokenize(&seq)?;
            entries.insert(
                class.clone(),
                MappingEntry {
                    text,
                    tokens: seq.into(),
                },
            );
        }
        if entries.values().any(|e| taken.contains(&e.tokens)) {
            continue;
        }
        if let Ok(m) = LabelMapping::new(task, entries) {
            return Ok(m);
        }
    }
    Err(Error::Search("could not draw a distinct random mapping".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_is_deterministic_and_balanced() {
        let cfg = SyntheticConfig::default();
        let a = build_world(&cfg).unwrap();
        let b = build_world(&cfg).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.data.len(), 128);
        assert_eq!(
            a.data.iter().filter(|e| e.label.as_deref() == Some("positive")).count(),
            64
        );
        a.task.check_examples(&a.data).unwrap();
        let c = build_world(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn generator_prefers_generic_then_label_word() {
        let w = build_world(&SyntheticConfig::default()).unwrap();
        let g = ModelHandle::new(w.generator.clone());
        let x = RenderedInput::from_text(format!("the film was so {} today [MASK]", POSITIVE[0])).unwrap();
        let generic = g.tokenize(&format!("{} </s>", w.generic)).unwrap();
        let label = g.tokenize(&format!("{} </s>", w.label_words["positive"])).unwrap();
        let other = g.tokenize(&format!("{} </s>", w.label_words["negative"])).unwrap();
        let s = |t: &[usize]| g.sequence_logprob(&x, t).unwrap();
        assert!(s(&generic) > s(&label));
        assert!(s(&label) > s(&other));
    }

    #[test]
    fn random_mapping_keeps_shape() {
        let w = build_world(&SyntheticConfig::default()).unwrap();
        let g = ModelHandle::new(w.generator.clone());
        let texts: IndexMap<String, String> = w
            .label_words
            .iter()
            .map(|(c, l)| (c.clone(), format!("{l} </s>")))
            .collect();
        let like = LabelMapping::from_texts(&w.task, &g, &texts).unwrap();
        let r = random_mapping(&w.task, &g, &like, 3).unwrap();
        for ((_, a), (_, b)) in like.iter().zip(r.iter()) {
            assert_eq!(a.tokens.len(), b.tokens.len());
            assert_eq!(a.tokens.last(), b.tokens.last());
            assert_ne!(a.tokens, b.tokens);
        }
        assert_eq!(r, random_mapping(&w.task, &g, &like, 3).unwrap());
    }
}
