#![allow(dead_code)]

use autoseq::corpus::{Example, MetricKind, TaskKind, TaskSpec};
use autoseq::lm::{log_softmax, ModelHandle, TabularModel, TokenId, Vocab};
use autoseq::templating::RenderedInput;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIGNATURES: [&str; 2] = ["alpha", "beta"];

pub fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

/// Tabular model over `n` content words with random rows for the wildcard and
/// both signatures at every context of up to two content tokens. Each entry
/// is `-inf` with probability `sparsity` (at least one content token stays
/// finite); pad and mask are always `-inf`.
pub fn random_tabular(seed: u64, n: usize, sparsity: f64) -> TabularModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::with_specials(words(n)).unwrap();
    let sp = vocab.special();
    let content = vocab.content_ids();
    let mut m = TabularModel::uniform(&format!("random-{seed}"), vocab.clone());
    for s in SIGNATURES {
        m.add_trigger(s, s);
    }
    let mut contexts: Vec<Vec<TokenId>> = vec![vec![]];
    for &a in &content {
        contexts.push(vec![a]);
        for &b in &content {
            contexts.push(vec![a, b]);
        }
    }
    for sig in [None, Some("alpha"), Some("beta")] {
        for ctx in &contexts {
            let mut logits = vec![f64::NEG_INFINITY; vocab.len()];
            for (t, l) in logits.iter_mut().enumerate() {
                if t == sp.pad_id || t == sp.mask_id || (t == sp.eos_id && ctx.is_empty()) {
                    continue;
                }
                if rng.gen::<f64>() >= sparsity {
                    *l = rng.gen_range(-3.0..3.0);
                }
            }
            if content.iter().all(|&t| logits[t] == f64::NEG_INFINITY) {
                logits[content[rng.gen_range(0..content.len())]] = 0.0;
            }
            m.set_logprobs(sig, ctx, log_softmax(&logits)).unwrap();
        }
    }
    m
}

/// Rendered inputs carrying signature `sig` (or none).
pub fn inputs(sig: Option<&str>, count: usize) -> Vec<RenderedInput> {
    (0..count)
        .map(|i| {
            let head = sig.unwrap_or("plain");
            RenderedInput::from_text(format!("{head} item{i} [MASK]")).unwrap()
        })
        .collect()
}

/// Two-class task whose examples trigger the two signatures.
pub fn two_class_data(per_class: usize) -> (TaskSpec, Vec<Example>) {
    let task = TaskSpec::new(
        TaskKind::SingleSentence,
        vec!["a".into(), "b".into()],
        MetricKind::Accuracy,
    )
    .unwrap();
    let mut data = Vec::new();
    for i in 0..per_class {
        data.push(Example::labeled(vec![format!("alpha item{i}")], "a").unwrap());
        data.push(Example::labeled(vec![format!("beta item{i}")], "b").unwrap());
    }
    (task, data)
}

/// Straight chain-rule sum, one row request per position.
pub fn naive_sequence_logprob(m: &ModelHandle, x: &RenderedInput, seq: &[TokenId]) -> f64 {
    (0..seq.len())
        .map(|j| m.next_token_logprobs(x, &seq[..j]).unwrap()[seq[j]])
        .sum()
}
