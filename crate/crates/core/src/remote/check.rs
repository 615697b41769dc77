//! Conformance suite a server must pass before the engine relies on it.

use serde::Serialize;
use serde_json::Value;

use super::*;
use crate::lm::{logprob_serde, logsumexp};

/// Tolerance on `|Σ exp(row) - 1|` for the normalization check.
pub const CHECK_NORMALIZATION_TOL: f64 = 1e-4;
/// Tolerance on score differences after a checkpoint round trip.
pub const CHECK_RESTORE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub checks: Vec<CheckOutcome>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("protocol payloads serialize")
}

fn one<T: for<'de> serde::Deserialize<'de>, P: Serialize>(s: &Session, kind: Kind, p: &P) -> Result<T> {
    s.call(kind, p)?.parse()
}

fn logprobs(s: &Session, input: &str, prefixes: &[Vec<TokenId>], checkpoint: Option<&str>) -> Result<Vec<Vec<f64>>> {
    let r: LogprobsResponse = one(
        s,
        Kind::Logprobs,
        &LogprobsRequest {
            input: input.to_string(),
            prefixes: prefixes.to_vec(),
            checkpoint: checkpoint.map(str::to_string),
        },
    )?;
    Ok(r.rows.into_iter().map(logprob_serde::decode).collect())
}

/// Largest absolute difference; positions must agree on being `-inf`.
fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        if ra.len() != rb.len() {
            return f64::INFINITY;
        }
        for (&x, &y) in ra.iter().zip(rb) {
            let d = if x == y { 0.0 } else { (x - y).abs() };
            worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
        }
    }
    worst
}

struct Probe {
    info: HelloResponse,
    content: Vec<TokenId>,
    words: Vec<String>,
}

impl Probe {
    fn prompt(&self) -> String {
        let mut w: Vec<&str> = self.words.iter().take(3).map(String::as_str).collect();
        w.push(crate::templating::MASK);
        w.join(" ")
    }

    fn prefixes(&self) -> Vec<Vec<TokenId>> {
        let c = &self.content;
        vec![vec![], vec![c[0]], vec![c[0], c[c.len().min(2) - 1]]]
    }
}

fn hello(s: &Session) -> Result<(HelloResponse, String)> {
    let info: HelloResponse = one(
        s,
        Kind::Hello,
        &HelloRequest {
            version: PROTOCOL_VERSION.to_string(),
            client: "autoseq serve-check".into(),
        },
    )?;
    let sp = info.special;
    let ids = [sp.mask_id, sp.eos_id, sp.pad_id];
    let mut problems = Vec::new();
    if info.version != PROTOCOL_VERSION {
        problems.push(format!("version {:?}, expected {PROTOCOL_VERSION:?}", info.version));
    }
    if ids.iter().any(|&i| i >= info.vocab_size) {
        problems.push("special id out of range".into());
    }
    if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
        problems.push("special ids are not distinct".into());
    }
    if info.vocab_size < 5 {
        problems.push(format!(
            "vocabulary of {} leaves fewer than 2 content tokens",
            info.vocab_size
        ));
    }
    if problems.is_empty() {
        Ok((info, String::new()))
    } else {
        Err(Error::Protocol(problems.join("; ")))
    }
}

fn id_correlation(s: &Session, p: &Probe) -> Result<String> {
    let reqs: Vec<(Kind, Value)> = p
        .content
        .iter()
        .take(8)
        .map(|&i| (Kind::Detokenize, to_value(&DetokenizeRequest { ids: vec![i] })))
        .collect();
    let n = reqs.len();
    let got = s.call_many(reqs)?;
    for (r, w) in got.into_iter().zip(&p.words) {
        let t: DetokenizeResponse = r?.parse()?;
        if t.text != *w {
            return Err(Error::Protocol(format!(
                "pipelined answer {:?} differs from {w:?}",
                t.text
            )));
        }
    }
    Ok(format!("{n} pipelined requests answered by id"))
}

fn round_trip(s: &Session, p: &Probe) -> Result<String> {
    let mut texts: Vec<String> = p.words.clone();
    texts.extend(p.words.chunks(3).filter(|c| c.len() > 1).map(|c| c.join(" ")));
    for t in &texts {
        let ids: TokenizeResponse = one(s, Kind::Tokenize, &TokenizeRequest { text: t.clone() })?;
        let back: DetokenizeResponse = one(s, Kind::Detokenize, &DetokenizeRequest { ids: ids.ids.clone() })?;
        if back.text != *t {
            return Err(Error::Protocol(format!(
                "{t:?} came back as {:?} via {:?}",
                back.text, ids.ids
            )));
        }
    }
    Ok(format!("{} ASCII strings", texts.len()))
}

fn normalization(s: &Session, p: &Probe) -> Result<String> {
    let rows = logprobs(s, &p.prompt(), &p.prefixes(), None)?;
    if rows.len() != p.prefixes().len() {
        return Err(Error::Protocol(format!(
            "{} rows for {} prefixes",
            rows.len(),
            p.prefixes().len()
        )));
    }
    let mut worst: f64 = 0.0;
    for r in &rows {
        if r.len() != p.info.vocab_size {
            return Err(Error::Protocol(format!(
                "row of {} for vocabulary of {}",
                r.len(),
                p.info.vocab_size
            )));
        }
        let dev = (logsumexp(r).exp() - 1.0).abs();
        worst = worst.max(if dev.is_nan() { f64::INFINITY } else { dev });
    }
    if worst > CHECK_NORMALIZATION_TOL {
        return Err(Error::Protocol(format!("mass off by {worst:e}")));
    }
    Ok(format!("max |mass - 1| = {worst:e}"))
}

fn checkpoint_restore(s: &Session, p: &Probe) -> Result<String> {
    let (prompt, prefixes) = (p.prompt(), p.prefixes());
    let before = logprobs(s, &prompt, &prefixes, None)?;
    let c: CheckpointResponse = one(s, Kind::Checkpoint, &Empty {})?;
    let mut trained = "";
    if p.info.trainable {
        let start = FinetuneStart {
            from: None,
            pairs: vec![WirePair {
                input: prompt.clone(),
                target: vec![p.content[0], p.info.special.eos_id],
            }],
            config: FineTuneConfig {
                steps: 3,
                batch_size: 1,
                learning_rate: 0.1,
                validate_every: 3,
                seed: 0,
            },
        };
        let _: FinetuneResponse = one(
            s,
            Kind::Finetune,
            &FinetuneRequest {
                start: Some(start),
                steps: 3,
            },
        )?;
        let _: CheckpointResponse = one(s, Kind::Checkpoint, &Empty {})?;
        trained = " after 3 training steps";
    }
    let _: Empty = one(
        s,
        Kind::Restore,
        &RestoreRequest {
            checkpoint: c.checkpoint.clone(),
        },
    )?;
    let active = logprobs(s, &prompt, &prefixes, None)?;
    let pinned = logprobs(s, &prompt, &prefixes, Some(&c.checkpoint))?;
    let d = max_diff(&before, &active).max(max_diff(&before, &pinned));
    if d > CHECK_RESTORE_TOL {
        return Err(Error::Protocol(format!("restored scores differ by {d:e}{trained}")));
    }
    Ok(format!("max |diff| = {d:e}{trained}"))
}

fn error_surfacing(s: &Session, p: &Probe) -> Result<String> {
    let bad = vec![vec![p.info.vocab_size]];
    match logprobs(s, &p.prompt(), &bad, None) {
        Err(Error::Server(m)) => {
            let _: DetokenizeResponse = one(
                s,
                Kind::Detokenize,
                &DetokenizeRequest {
                    ids: vec![p.content[0]],
                },
            )?;
            Ok(format!("out-of-range prefix rejected: {m}"))
        }
        Err(e) => Err(e),
        Ok(_) => Err(Error::Protocol("out-of-range prefix id was accepted".into())),
    }
}

fn outcome(name: &'static str, r: Result<String>) -> CheckOutcome {
    match r {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Runs every check in order. A transport failure or a failed `hello` skips
/// the remaining checks, which are reported as failed.
pub fn serve_check(session: &Session) -> CheckReport {
    const LATER: [&str; 5] = [
        "id-correlation",
        "round-trip",
        "normalization",
        "checkpoint-restore",
        "error-surfacing",
    ];
    let mut checks = Vec::new();
    let skip_rest = |checks: &mut Vec<CheckOutcome>, why: &str| {
        for name in LATER.iter().skip(checks.len() - 1) {
            checks.push(CheckOutcome {
                name,
                passed: false,
                detail: format!("skipped: {why}"),
            });
        }
    };
    let info = match hello(session) {
        Ok((info, _)) => {
            checks.push(CheckOutcome {
                name: "hello",
                passed: true,
                detail: format!("model {:?}, vocabulary {}", info.model, info.vocab_size),
            });
            info
        }
        Err(e) => {
            checks.push(outcome("hello", Err(e)));
            skip_rest(&mut checks, "hello failed");
            return CheckReport { checks };
        }
    };
    let sp = info.special;
    let content: Vec<TokenId> = (0..info.vocab_size).filter(|&i| !sp.contains(i)).collect();
    let mut probe = Probe {
        info,
        content: Vec::new(),
        words: Vec::new(),
    };
    // Content tokens whose text is plain ASCII, so round trips are well defined.
    for &id in content.iter().take(64) {
        if probe.words.len() == 12 {
            break;
        }
        if let Ok(t) = one::<DetokenizeResponse, _>(session, Kind::Detokenize, &DetokenizeRequest { ids: vec![id] }) {
            let t = t.text;
            if !t.is_empty() && t.is_ascii() && !t.contains(char::is_whitespace) && t != crate::templating::MASK {
                probe.content.push(id);
                probe.words.push(t);
            }
        }
    }
    if probe.content.is_empty() {
        checks.push(outcome(
            "id-correlation",
            Err(Error::Protocol(
                "no content token detokenizes to a plain ASCII word".into(),
            )),
        ));
        skip_rest(&mut checks, "no usable probe tokens");
        return CheckReport { checks };
    }
    type Check = fn(&Session, &Probe) -> Result<String>;
    let suite: [(&'static str, Check); 5] = [
        (LATER[0], id_correlation),
        (LATER[1], round_trip),
        (LATER[2], normalization),
        (LATER[3], checkpoint_restore),
        (LATER[4], error_surfacing),
    ];
    for (name, f) in suite {
        let r = f(session, &probe);
        let fatal = matches!(r, Err(Error::Transport(_)));
        checks.push(outcome(name, r));
        if fatal {
            skip_rest(&mut checks, "transport failed");
            break;
        }
    }
    CheckReport { checks }
}
