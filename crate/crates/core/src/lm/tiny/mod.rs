//! Tiny trainable encoder-decoder.
//!
//! One encoder layer (single-head self-attention + GELU feed-forward) and one
//! decoder layer (single-head causal self-attention, single-head
//! cross-attention, feed-forward), residual connections, learned token and
//! position embeddings shared between encoder and decoder, and an output
//! projection. The decoder starts from the pad token. Everything is `f64` and
//! trained with plain mini-batch SGD.
//!
//! Input text is split on whitespace; words missing from the vocabulary are
//! dropped from the encoder input and the first `max_src` tokens are kept.

pub mod autodiff;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::autodiff::{Mat, Params, Tape, Var};
use super::{
    Backend, ConditionalModel, FineTuneConfig, SpecialTokens, TokenId, TokenSeq, TrainPair, TrainSession, Vocab,
};
use crate::error::{Error, Result};
use crate::lm::{log_softmax, ModelHandle};
use crate::templating::RenderedInput;

pub const CHECKPOINT_FORMAT: &str = "autoseq-tiny/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyConfig {
    pub d_model: usize,
    pub d_ff: usize,
    /// Encoder positions.
    pub max_src: usize,
    /// Decoder positions, including the start token.
    pub max_tgt: usize,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            d_model: 32,
            d_ff: 64,
            max_src: 64,
            max_tgt: 24,
        }
    }
}

impl TinyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model > 64 {
            return Err(Error::Config("d_model must be in 1..=64".into()));
        }
        if self.d_ff == 0 || self.max_src == 0 || self.max_tgt < 2 {
            return Err(Error::Config(
                "d_ff, max_src must be positive and max_tgt at least 2".into(),
            ));
        }
        Ok(())
    }
}

// Parameter slots, in checkpoint order.
const TOK: usize = 0;
const ENC_POS: usize = 1;
const DEC_POS: usize = 2;
const ENC_ATT: usize = 3; // q, k, v, o
const ENC_FF: usize = 7; // w1, b1, w2, b2
const DEC_SELF: usize = 11; // q, k, v, o
const DEC_CROSS: usize = 15; // q, k, v, o
const DEC_FF: usize = 19; // w1, b1, w2, b2
const OUT_W: usize = 23;
const OUT_B: usize = 24;
const N_PARAMS: usize = 25;

fn param_shapes(cfg: &TinyConfig, vocab: usize) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let mut shapes = vec![
        ("tok_emb".to_string(), vocab, d),
        ("enc_pos".to_string(), cfg.max_src, d),
        ("dec_pos".to_string(), cfg.max_tgt, d),
    ];
    let att = |p: &str| ["q", "k", "v", "o"].map(|w| (format!("{p}.w{w}"), d, d));
    let ff = |p: &str| {
        [
            (format!("{p}.w1"), d, cfg.d_ff),
            (format!("{p}.b1"), 1, cfg.d_ff),
            (format!("{p}.w2"), cfg.d_ff, d),
            (format!("{p}.b2"), 1, d),
        ]
    };
    shapes.extend(att("enc.attn"));
    shapes.extend(ff("enc.ff"));
    shapes.extend(att("dec.self"));
    shapes.extend(att("dec.cross"));
    shapes.extend(ff("dec.ff"));
    shapes.push(("out.w".to_string(), d, vocab));
    shapes.push(("out.b".to_string(), 1, vocab));
    debug_assert_eq!(shapes.len(), N_PARAMS);
    shapes
}

#[derive(Debug, Clone)]
pub struct TinyModel {
    name: String,
    config: TinyConfig,
    vocab: Vocab,
    params: Arc<Params>,
}

impl TinyModel {
    /// Fresh model with uniform(-a, a) weights where `a = sqrt(3 / fan_in)`;
    /// biases start at zero.
    pub fn init(name: &str, vocab: Vocab, config: TinyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut mats = Vec::new();
        for (n, rows, cols) in param_shapes(&config, vocab.len()) {
            let is_bias = n.ends_with(".b1") || n.ends_with(".b2") || n == "out.b";
            let fan_in = if n.contains("emb") || n.contains("pos") {
                config.d_model
            } else {
                rows
            };
            let a = (3.0 / fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| if is_bias { 0.0 } else { rng.gen_range(-a..a) })
                .collect();
            names.push(n);
            mats.push(Mat { rows, cols, data });
        }
        Ok(TinyModel {
            name: name.to_string(),
            config,
            vocab,
            params: Arc::new(Params { names, mats }),
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// All parameters flattened in checkpoint order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.mats.iter().flat_map(|m| m.data.iter().copied()).collect()
    }

    pub fn with_flat_params(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(Error::Model(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut params = (*self.params).clone();
        let mut off = 0;
        for m in &mut params.mats {
            let n = m.data.len();
            m.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(TinyModel {
            params: Arc::new(params),
            ..self.clone()
        })
    }

    fn encode_ids(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.split_whitespace().filter_map(|w| self.vocab.id(w)).collect();
        ids.truncate(self.config.max_src);
        if ids.is_empty() {
            ids.push(self.vocab.special().mask_id);
        }
        ids
    }

    fn decoder_input(&self, prefix: &[TokenId]) -> Result<Vec<TokenId>> {
        if prefix.len() + 1 > self.config.max_tgt {
            return Err(Error::Model(format!(
                "prefix of {} tokens exceeds decoder length {}",
                prefix.len(),
                self.config.max_tgt - 1
            )));
        }
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(self.vocab.special().pad_id);
        ids.extend_from_slice(prefix);
        Ok(ids)
    }

    /// Mean per-pair cross-entropy (summed over target tokens).
    pub fn loss(&self, pairs: &[TrainPair]) -> Result<f64> {
        let batch = self.prepare(pairs)?;
        let mut tape = Tape::new(&self.params);
        let root = batch_loss(&mut tape, &self.config, &batch);
        Ok(tape.value(root).data[0])
    }

    /// Loss and its gradient, flattened in checkpoint order.
    pub fn loss_and_gradient(&self, pairs: &[TrainPair]) -> Result<(f64, Vec<f64>)> {
        let batch = self.prepare(pairs)?;
        let mut tape = Tape::new(&self.params);
        let root = batch_loss(&mut tape, &self.config, &batch);
        let loss = tape.value(root).data[0];
        let grads = tape.backward(root);
        Ok((loss, grads.into_iter().flat_map(|m| m.data).collect()))
    }

    fn prepare(&self, pairs: &[TrainPair]) -> Result<Vec<Prepared>> {
        pairs
            .iter()
            .map(|p| {
                if p.target.is_empty() {
                    return Err(Error::EmptyLabelSequence);
                }
                if let Some(&id) = p.target.iter().find(|&&t| t >= self.vocab.len()) {
                    return Err(Error::InvalidTokenId {
                        id,
                        size: self.vocab.len(),
                    });
                }
                Ok(Prepared {
                    src: self.encode_ids(&p.input.text),
                    dec_in: self.decoder_input(&p.target[..p.target.len() - 1])?,
                    target: p.target.to_vec(),
                })
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.try_into()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint::from(self))?)
    }
}

struct Prepared {
    src: Vec<TokenId>,
    dec_in: Vec<TokenId>,
    target: Vec<TokenId>,
}

fn attention(tape: &mut Tape, query_src: Var, kv_src: Var, base: usize, d: usize, causal: bool) -> Var {
    let wq = tape.param(base);
    let wk = tape.param(base + 1);
    let wv = tape.param(base + 2);
    let wo = tape.param(base + 3);
    let q = tape.matmul(query_src, wq);
    let k = tape.matmul(kv_src, wk);
    let v = tape.matmul(kv_src, wv);
    let s = tape.matmul_bt(q, k);
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let p = tape.softmax(s, causal);
    let o = tape.matmul(p, v);
    tape.matmul(o, wo)
}

fn feed_forward(tape: &mut Tape, x: Var, base: usize) -> Var {
    let w1 = tape.param(base);
    let b1 = tape.param(base + 1);
    let w2 = tape.param(base + 2);
    let b2 = tape.param(base + 3);
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2);
    tape.add_row(o, b2)
}

fn embed(tape: &mut Tape, ids: &[TokenId], pos_table: usize) -> Var {
    let tok = tape.param(TOK);
    let pos = tape.param(pos_table);
    let e = tape.gather(tok, ids);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let p = tape.gather(pos, &positions);
    tape.add(e, p)
}

fn encode(tape: &mut Tape, cfg: &TinyConfig, src: &[TokenId]) -> Var {
    let x = embed(tape, src, ENC_POS);
    let a = attention(tape, x, x, ENC_ATT, cfg.d_model, false);
    let h = tape.add(x, a);
    let f = feed_forward(tape, h, ENC_FF);
    tape.add(h, f)
}

/// Logits for every decoder position: `dec_in.len() × vocab`.
fn decode(tape: &mut Tape, cfg: &TinyConfig, memory: Var, dec_in: &[TokenId]) -> Var {
    let g = embed(tape, dec_in, DEC_POS);
    let s = attention(tape, g, g, DEC_SELF, cfg.d_model, true);
    let g = tape.add(g, s);
    let c = attention(tape, g, memory, DEC_CROSS, cfg.d_model, false);
    let g = tape.add(g, c);
    let f = feed_forward(tape, g, DEC_FF);
    let g = tape.add(g, f);
    let w = tape.param(OUT_W);
    let b = tape.param(OUT_B);
    let logits = tape.matmul(g, w);
    tape.add_row(logits, b)
}

fn batch_loss(tape: &mut Tape, cfg: &TinyConfig, batch: &[Prepared]) -> Var {
    let mut total: Option<Var> = None;
    for ex in batch {
        let mem = encode(tape, cfg, &ex.src);
        let logits = decode(tape, cfg, mem, &ex.dec_in);
        let l = tape.nll(logits, &ex.target);
        total = Some(match total {
            Some(t) => tape.add(t, l),
            None => l,
        });
    }
    let total = total.expect("non-empty batch");
    tape.scale(total, 1.0 / batch.len() as f64)
}

impl ConditionalModel for TinyModel {
    fn backend(&self) -> Backend {
        Backend::TinyNeural
    }

    fn identifier(&self) -> String {
        self.name.clone()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn special(&self) -> SpecialTokens {
        self.vocab.special()
    }

    fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        self.vocab.tokenize(text)
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        self.vocab.detokenize(ids)
    }

    fn next_token_logprobs(&self, input: &RenderedInput, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.next_token_logprobs_batch(input, &[prefix])?.remove(0))
    }

    fn next_token_logprobs_batch(&self, input: &RenderedInput, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let src = self.encode_ids(&input.text);
        let mut tape = Tape::new(&self.params);
        let mem = encode(&mut tape, &self.config, &src);
        prefixes
            .iter()
            .map(|p| {
                let dec_in = self.decoder_input(p)?;
                let logits = decode(&mut tape, &self.config, mem, &dec_in);
                Ok(log_softmax(tape.value(logits).row(dec_in.len() - 1)))
            })
            .collect()
    }

    fn sequence_logprob(&self, input: &RenderedInput, target: &[TokenId]) -> Result<f64> {
        let src = self.encode_ids(&input.text);
        let dec_in = self.decoder_input(&target[..target.len() - 1])?;
        let mut tape = Tape::new(&self.params);
        let mem = encode(&mut tape, &self.config, &src);
        let logits = decode(&mut tape, &self.config, mem, &dec_in);
        let l = tape.value(logits);
        Ok(target
            .iter()
            .enumerate()
            .map(|(j, &t)| l.at(j, t) - crate::lm::logsumexp(l.row(j)))
            .sum())
    }

    fn trainable(&self) -> bool {
        true
    }

    fn start_training(&self, pairs: &[TrainPair], config: &FineTuneConfig) -> Result<Box<dyn TrainSession>> {
        Ok(Box::new(TinyTrainer::new(self, pairs, config)?))
    }

    fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Mini-batch SGD over a private copy of the parameters. Batches are drawn
/// from a ChaCha-shuffled permutation of the pairs, reshuffled every epoch.
pub struct TinyTrainer {
    base: TinyModel,
    params: Params,
    data: Vec<Prepared>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    batch_size: usize,
    learning_rate: f64,
    steps_done: usize,
}

impl TinyTrainer {
    pub fn new(model: &TinyModel, pairs: &[TrainPair], config: &FineTuneConfig) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("fine-tuning needs at least one pair".into()));
        }
        let data = model.prepare(pairs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        Ok(TinyTrainer {
            base: model.clone(),
            params: (*model.params).clone(),
            data,
            order,
            cursor: 0,
            rng,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            steps_done: 0,
        })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.batch_size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// One SGD step; returns the batch loss before the update.
    pub fn step(&mut self) -> f64 {
        let idx = self.next_batch();
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &self.data[i]).collect();
        let mut tape = Tape::new(&self.params);
        let mut total: Option<Var> = None;
        for ex in &batch {
            let mem = encode(&mut tape, &self.base.config, &ex.src);
            let logits = decode(&mut tape, &self.base.config, mem, &ex.dec_in);
            let l = tape.nll(logits, &ex.target);
            total = Some(match total {
                Some(t) => tape.add(t, l),
                None => l,
            });
        }
        let root = tape.scale(total.expect("batch_size >= 1"), 1.0 / batch.len() as f64);
        let loss = tape.value(root).data[0];
        let grads = tape.backward(root);
        for (p, g) in self.params.mats.iter_mut().zip(grads) {
            for (w, dw) in p.data.iter_mut().zip(g.data) {
                *w -= self.learning_rate * dw;
            }
        }
        self.steps_done += 1;
        loss
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    pub fn model(&self) -> TinyModel {
        TinyModel {
            params: Arc::new(self.params.clone()),
            ..self.base.clone()
        }
    }

    /// Replaces the parameters being trained, keeping the batch schedule.
    pub fn load_params(&mut self, model: &TinyModel) -> Result<()> {
        if model.param_count() != self.params.count() || model.vocab != self.base.vocab {
            return Err(Error::Model("parameter layout differs from the trainer's model".into()));
        }
        self.params = (*model.params).clone();
        Ok(())
    }
}

impl TrainSession for TinyTrainer {
    fn train_steps(&mut self, steps: usize) -> Result<f64> {
        if steps == 0 {
            return Ok(f64::NAN);
        }
        let total: f64 = (0..steps).map(|_| self.step()).sum();
        Ok(total / steps as f64)
    }

    fn snapshot(&mut self) -> Result<ModelHandle> {
        Ok(ModelHandle::new(self.model()))
    }
}

/// On-disk checkpoint layout (JSON):
///
/// ```text
/// { "format": "autoseq-tiny/1", "name": ..., "config": {d_model, d_ff, max_src, max_tgt},
///   "vocab": {"tokens": [...], "mask_id", "eos_id", "pad_id"},
///   "params": [{"name", "rows", "cols", "data": [row-major f64 ...]}, ...] }
/// ```
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    name: String,
    config: TinyConfig,
    vocab: Vocab,
    params: Vec<NamedMat>,
}

#[derive(Serialize, Deserialize)]
struct NamedMat {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&TinyModel> for Checkpoint {
    fn from(m: &TinyModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            name: m.name.clone(),
            config: m.config,
            vocab: m.vocab.clone(),
            params: m
                .params
                .names
                .iter()
                .zip(&m.params.mats)
                .map(|(n, mat)| NamedMat {
                    name: n.clone(),
                    rows: mat.rows,
                    cols: mat.cols,
                    data: mat.data.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<Checkpoint> for TinyModel {
    type Error = Error;

    fn try_from(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT}",
                ck.format
            )));
        }
        ck.config.validate()?;
        let shapes = param_shapes(&ck.config, ck.vocab.len());
        if shapes.len() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                ck.params.len()
            )));
        }
        let mut names = Vec::new();
        let mut mats = Vec::new();
        for ((name, rows, cols), p) in shapes.into_iter().zip(ck.params) {
            if p.name != name || p.rows != rows || p.cols != cols || p.data.len() != rows * cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} ({}x{}) does not match expected {name:?} ({rows}x{cols})",
                    p.name, p.rows, p.cols
                )));
            }
            names.push(name);
            mats.push(Mat {
                rows,
                cols,
                data: p.data,
            });
        }
        Ok(TinyModel {
            name: ck.name,
            config: ck.config,
            vocab: ck.vocab,
            params: Arc::new(Params { names, mats }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{fine_tune, logsumexp};

    fn small() -> TinyModel {
        let vocab = Vocab::with_specials("good bad movie film great awful yes no".split(' ')).unwrap();
        let cfg = TinyConfig {
            d_model: 8,
            d_ff: 12,
            max_src: 16,
            max_tgt: 6,
        };
        TinyModel::init("t", vocab, cfg, 3).unwrap()
    }

    fn pair(m: &TinyModel, text: &str, target: &str) -> TrainPair {
        TrainPair {
            input: RenderedInput::from_text(text).unwrap(),
            target: m.vocab().tokenize(target).unwrap(),
        }
    }

    #[test]
    fn distributions_normalise_and_chain() {
        let m = ModelHandle::new(small());
        let x = RenderedInput::from_text("good movie [MASK]").unwrap();
        for prefix in [&[][..], &[3], &[3, 4, 5]] {
            let row = m.next_token_logprobs(&x, prefix).unwrap();
            assert!(logsumexp(&row).abs() < 1e-9);
        }
        let target = [3, 7, 1];
        let one_pass = m.sequence_logprob(&x, &target).unwrap();
        let stepwise: f64 = (0..3)
            .map(|j| m.next_token_logprobs(&x, &target[..j]).unwrap()[target[j]])
            .sum();
        assert!((one_pass - stepwise).abs() < 1e-12);
        assert!(one_pass < 0.0);
    }

    #[test]
    fn overfits_four_pairs() {
        let m = small();
        let pairs = vec![
            pair(&m, "good movie [MASK]", "yes </s>"),
            pair(&m, "bad film [MASK]", "no </s>"),
            pair(&m, "great film [MASK]", "yes </s>"),
            pair(&m, "awful movie [MASK]", "no </s>"),
        ];
        let before = m.loss(&pairs).unwrap();
        let cfg = FineTuneConfig {
            steps: 500,
            batch_size: 4,
            learning_rate: 0.1,
            validate_every: 100,
            seed: 1,
        };
        let mut tr = TinyTrainer::new(&m, &pairs, &cfg).unwrap();
        tr.train_steps(500).unwrap();
        let after = tr.model().loss(&pairs).unwrap();
        assert!(after < before, "loss {before} -> {after}");
        assert!(after < 0.5 * before, "loss {before} -> {after}");
    }

    #[test]
    fn fine_tune_keeps_input_and_is_deterministic() {
        let m = small();
        let before = m.flat_params();
        let h = ModelHandle::new(m.clone());
        let pairs = vec![pair(&m, "good movie [MASK]", "yes"), pair(&m, "bad film [MASK]", "no")];
        let cfg = FineTuneConfig {
            steps: 30,
            batch_size: 2,
            learning_rate: 0.05,
            validate_every: 10,
            seed: 9,
        };
        let probe = pairs.clone();
        let eval = |mh: &ModelHandle| -> Result<f64> {
            let x = &probe[0];
            mh.sequence_logprob(&x.input, &x.target)
        };
        let a = fine_tune(&h, &pairs, &cfg, &eval).unwrap();
        let b = fine_tune(&h, &pairs, &cfg, &eval).unwrap();
        assert_eq!(m.flat_params(), before);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        assert_eq!(a.best_metric, eval(&a.model).unwrap());

        let zero = FineTuneConfig { steps: 0, ..cfg };
        let z = fine_tune(&h, &pairs, &zero, &eval).unwrap();
        assert!(z.model.ptr_eq(&h));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let json = m.to_json().unwrap();
        let back = TinyModel::from_json(&json).unwrap();
        assert_eq!(back.flat_params(), m.flat_params());
        assert_eq!(back.vocab(), m.vocab());
        let bad = json.replace(CHECKPOINT_FORMAT, "autoseq-tiny/0");
        assert!(matches!(TinyModel::from_json(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn prefix_length_is_bounded() {
        let m = ModelHandle::new(small());
        let x = RenderedInput::from_text("[MASK]").unwrap();
        assert!(m.next_token_logprobs(&x, &[3; 5]).is_ok());
        assert!(m.next_token_logprobs(&x, &[3; 6]).is_err());
    }
}
