mod common;

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;

use autoseq::lm::{fine_tune, ConditionalModel, FineTuneConfig, ModelHandle, TinyConfig, TinyModel, TrainPair, Vocab};
use autoseq::remote::*;
use autoseq::templating::RenderedInput;
use autoseq::Error;
use serde_json::{json, Value};

/// Session to a thread that answers each request line with `respond`;
/// `None` closes the connection.
fn scripted<F>(mut respond: F) -> Arc<Session>
where
    F: FnMut(&str) -> Option<String> + Send + 'static,
{
    let (req_r, req_w) = std::io::pipe().unwrap();
    let (resp_r, mut resp_w) = std::io::pipe().unwrap();
    thread::spawn(move || {
        for line in BufReader::new(req_r).lines() {
            let Ok(line) = line else { break };
            match respond(&line) {
                Some(out) => {
                    if resp_w.write_all(format!("{out}\n").as_bytes()).is_err() {
                        break;
                    }
                }
                None => break,
            }
        }
    });
    Arc::new(Session::from_streams(BufReader::new(resp_r), req_w))
}

fn reply(line: &str, payload: Value) -> String {
    let m = Message::from_line(line).unwrap();
    json!({"id": m.id, "kind": m.kind, "payload": payload}).to_string()
}

fn hello_payload(version: &str, vocab: usize) -> Value {
    json!({"version": version, "model": "fake", "vocab_size": vocab,
           "special": {"mask_id": 2, "eos_id": 1, "pad_id": 0}, "trainable": false})
}

fn tabular() -> ModelHandle {
    ModelHandle::new(common::random_tabular(1, 5, 0.2))
}

fn tiny() -> ModelHandle {
    let vocab = Vocab::with_specials(["alpha", "beta", "item0", "item1", "w0", "w1", "w2"]).unwrap();
    let cfg = TinyConfig {
        d_model: 8,
        d_ff: 16,
        max_src: 8,
        max_tgt: 6,
    };
    ModelHandle::new(TinyModel::init("tiny-remote", vocab, cfg, 3).unwrap())
}

fn x(text: &str) -> RenderedInput {
    RenderedInput::from_text(text).unwrap()
}

#[test]
fn hello_reports_server_vocabulary() {
    let local = tabular();
    let remote = RemoteModel::new(in_process(local.clone()).unwrap()).unwrap();
    assert_eq!(remote.vocab_size(), local.vocab_size());
    assert_eq!(remote.special(), local.special());
    assert_eq!(remote.identifier(), "remote:random-1");
    assert!(!remote.trainable());
}

#[test]
fn remote_rows_equal_local_rows_bit_for_bit() {
    for local in [tabular(), tiny()] {
        let remote = ModelHandle::new(RemoteModel::new(in_process(local.clone()).unwrap()).unwrap());
        let c = local.content_ids();
        let prefixes: Vec<Vec<usize>> = vec![vec![], vec![c[0]], vec![c[1], c[0]], vec![c[2], c[2], c[1]]];
        let refs: Vec<&[usize]> = prefixes.iter().map(Vec::as_slice).collect();
        for text in ["alpha item0 [MASK]", "beta item1 [MASK]", "[MASK] plain"] {
            let a = local.next_token_logprobs_batch(&x(text), &refs).unwrap();
            let b = remote.next_token_logprobs_batch(&x(text), &refs).unwrap();
            for (ra, rb) in a.iter().zip(&b) {
                let bits = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(ra), bits(rb));
            }
            let seq = [c[0], c[1], local.special().eos_id];
            assert_eq!(
                remote.sequence_logprob(&x(text), &seq).unwrap(),
                common::naive_sequence_logprob(&local, &x(text), &seq)
            );
        }
    }
}

#[test]
fn remote_backend_passes_the_model_property_suite() {
    for local in [tabular(), tiny()] {
        let remote = ModelHandle::new(RemoteModel::new(in_process(local).unwrap()).unwrap());
        let c = remote.content_ids();
        let eos = remote.special().eos_id;
        for text in ["alpha item0 [MASK]", "beta [MASK] item1"] {
            for prefix in [vec![], vec![c[0]], vec![c[1], c[2]]] {
                let row = remote.next_token_logprobs(&x(text), &prefix).unwrap();
                let mass: f64 = row.iter().map(|v| v.exp()).sum();
                assert!((mass - 1.0).abs() < 1e-9);
            }
            let seq = [c[2], c[0], eos];
            let chain = common::naive_sequence_logprob(&remote, &x(text), &seq);
            let batched = remote.sequence_logprob(&x(text), &seq).unwrap();
            assert!(
                batched == chain || (batched - chain).abs() < 1e-12,
                "{batched} vs {chain}"
            );
        }
    }
}

#[test]
fn uniform_echo_server_gives_log_one_over_v() {
    let session = scripted(|line| {
        let m = Message::from_line(line).unwrap();
        Some(match m.kind {
            Kind::Hello => reply(line, hello_payload(PROTOCOL_VERSION, 6)),
            Kind::Logprobs => {
                let n = m.payload["prefixes"].as_array().unwrap().len();
                reply(line, json!({"rows": vec![vec![-(6f64).ln(); 6]; n]}))
            }
            _ => reply(line, json!({})),
        })
    });
    let m = ModelHandle::new(RemoteModel::new(session).unwrap());
    let rows = m.next_token_logprobs_batch(&x("a [MASK]"), &[&[], &[3]]).unwrap();
    assert_eq!(rows, vec![vec![-(6f64).ln(); 6]; 2]);
}

#[test]
fn connection_failures_are_transport_errors() {
    assert!(matches!(
        RemoteModel::connect("tcp://127.0.0.1:9"),
        Err(Error::Transport(_))
    ));
    assert!(matches!(
        RemoteModel::connect("exec:/nonexistent/autoseq-server"),
        Err(Error::Transport(_))
    ));
    assert!(matches!(RemoteModel::connect("udp://x"), Err(Error::Config(_))));
    let closed = scripted(|_| None);
    assert!(matches!(RemoteModel::new(closed), Err(Error::Transport(_))));
}

#[test]
fn version_mismatch_names_both_versions() {
    let session = scripted(|line| Some(reply(line, hello_payload("autoseq-proto/0", 6))));
    let err = RemoteModel::new(session).unwrap_err();
    assert!(matches!(err, Error::VersionMismatch { .. }));
    let msg = err.to_string();
    assert!(
        msg.contains("autoseq-proto/1") && msg.contains("autoseq-proto/0"),
        "{msg}"
    );
}

type Responder = Box<dyn Fn(&str) -> String + Send>;

#[test]
fn malformed_responses_are_protocol_errors() {
    let cases: Vec<Responder> = vec![
        Box::new(|_| "this is not json".to_string()),
        Box::new(|l| reply(l, json!({"rows": "nope"}))),
        Box::new(|l| reply(l, json!({"rows": [[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]}))),
        Box::new(|l| reply(l, json!({"rows": [[-1.0, -1.0]]}))),
        Box::new(|l| reply(l, json!({"rows": []}))),
        Box::new(|l| {
            let m = Message::from_line(l).unwrap();
            json!({"id": m.id + 100, "kind": "logprobs", "payload": {}}).to_string()
        }),
        Box::new(|l| {
            let m = Message::from_line(l).unwrap();
            json!({"id": m.id, "kind": "tokenize", "payload": {"ids": []}}).to_string()
        }),
    ];
    for (i, bad) in cases.into_iter().enumerate() {
        let session = scripted(move |line| {
            let m = Message::from_line(line).unwrap();
            Some(if m.kind == Kind::Hello {
                reply(line, hello_payload(PROTOCOL_VERSION, 6))
            } else {
                bad(line)
            })
        });
        let m = ModelHandle::new(RemoteModel::new(session).unwrap());
        let r = m.next_token_logprobs(&x("a [MASK]"), &[]);
        assert!(matches!(r, Err(Error::Protocol(_))), "case {i}: {r:?}");
    }
}

#[test]
fn server_errors_surface_verbatim() {
    let session = in_process(tabular()).unwrap();
    let m = RemoteModel::new(session.clone()).unwrap();
    let err = m
        .at_checkpoint("ckpt-7")
        .next_token_logprobs(&x("a [MASK]"), &[])
        .unwrap_err();
    assert_eq!(
        err.to_string(),
        "server error: checkpoint error: unknown checkpoint \"ckpt-7\""
    );
    let start = json!({"start": {"pairs": [{"input": "a [MASK]", "target": [3, 1]}],
                                 "config": FineTuneConfig::default()}, "steps": 1});
    match session.call(Kind::Finetune, &start) {
        Err(Error::Server(msg)) => assert_eq!(msg, "backend tabular is not trainable"),
        other => panic!("{other:?}"),
    }
    // The session survives errors.
    assert_eq!(m.tokenize("w0").unwrap().0, vec![3]);
}

#[test]
fn out_of_order_responses_are_reordered() {
    let mut held: Vec<String> = Vec::new();
    let (req_r, req_w) = std::io::pipe().unwrap();
    let (resp_r, mut resp_w) = std::io::pipe().unwrap();
    thread::spawn(move || {
        for line in BufReader::new(req_r).lines() {
            let Ok(line) = line else { break };
            held.push(line);
            if held.len() == 4 {
                for l in held.drain(..).rev() {
                    let m = Message::from_line(&l).unwrap();
                    let r = reply(&l, json!({"text": format!("t{}", m.payload["ids"][0])}));
                    resp_w.write_all(format!("{r}\n").as_bytes()).unwrap();
                }
            }
        }
    });
    let session = Session::from_streams(BufReader::new(resp_r), req_w).with_window(4);
    let reqs = (0..8).map(|i| (Kind::Detokenize, json!({"ids": [i]}))).collect();
    let got: Vec<String> = session
        .call_many(reqs)
        .unwrap()
        .into_iter()
        .map(|r| r.unwrap().parse::<DetokenizeResponse>().unwrap().text)
        .collect();
    assert_eq!(got, (0..8).map(|i| format!("t{i}")).collect::<Vec<_>>());
}

#[test]
fn remote_fine_tuning_matches_local_fine_tuning() {
    let local = tiny();
    let remote = ModelHandle::new(RemoteModel::new(in_process(local.clone()).unwrap()).unwrap());
    let c = local.content_ids();
    let eos = local.special().eos_id;
    let pairs = vec![
        TrainPair {
            input: x("alpha item0 [MASK]"),
            target: vec![c[4], eos].into(),
        },
        TrainPair {
            input: x("beta item1 [MASK]"),
            target: vec![c[5], eos].into(),
        },
    ];
    let cfg = FineTuneConfig {
        steps: 6,
        batch_size: 2,
        learning_rate: 0.05,
        validate_every: 2,
        seed: 11,
    };
    let eval = |m: &ModelHandle| -> autoseq::Result<f64> {
        pairs.iter().map(|p| m.sequence_logprob(&p.input, &p.target)).sum()
    };
    let a = fine_tune(&local, &pairs, &cfg, &eval).unwrap();
    let b = fine_tune(&remote, &pairs, &cfg, &eval).unwrap();
    assert_eq!(a.history.len(), 3);
    for (ha, hb) in a.history.iter().zip(&b.history) {
        assert_eq!(ha.0, hb.0);
        assert_eq!(ha.1.to_bits(), hb.1.to_bits());
        assert_eq!(ha.2.to_bits(), hb.2.to_bits());
    }
    assert_eq!(a.best_step, b.best_step);
    assert!(b.model.identifier().starts_with("remote:tiny-remote@ckpt-"));
    // The base model on the server is untouched.
    assert_eq!(
        remote.sequence_logprob(&pairs[0].input, &pairs[0].target).unwrap(),
        local.sequence_logprob(&pairs[0].input, &pairs[0].target).unwrap()
    );
}

#[test]
fn reference_server_passes_serve_check() {
    for local in [tabular(), tiny()] {
        let report = serve_check(&in_process(local).unwrap());
        assert!(report.passed(), "{report:#?}");
        assert_eq!(report.checks.len(), 6);
    }
}

#[test]
fn serve_check_flags_unnormalized_rows() {
    let mut server = Server::new(tabular());
    let session = scripted(move |line| {
        let (mut r, _) = server.handle(&Message::from_line(line).unwrap());
        if r.kind == Kind::Logprobs {
            for row in r.payload["rows"].as_array_mut().unwrap() {
                for v in row.as_array_mut().unwrap() {
                    if let Some(f) = v.as_f64() {
                        *v = json!(f + 0.01);
                    }
                }
            }
        }
        Some(r.to_line().unwrap().trim_end().to_string())
    });
    let report = serve_check(&session);
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    assert_eq!(failed, vec!["normalization"]);
}

#[test]
fn serve_check_reports_a_bad_hello() {
    let session = scripted(|line| Some(reply(line, hello_payload("autoseq-proto/9", 6))));
    let report = serve_check(&session);
    assert!(!report.passed());
    assert_eq!(report.checks.len(), 6);
    assert!(report.checks.iter().all(|c| !c.passed));
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/remote_transcript.ndjson")
}

/// Fixed client conversation; returns what the client observed.
fn golden_conversation(session: Arc<Session>) -> Vec<String> {
    let mut seen = Vec::new();
    let m = RemoteModel::new(session.clone()).unwrap();
    let h = ModelHandle::new(m.clone());
    seen.push(format!("{:?}", h.tokenize("w0 w2 </s>").unwrap()));
    seen.push(h.detokenize(&[3, 5, 1]).unwrap());
    let rows = h
        .next_token_logprobs_batch(&x("alpha item0 [MASK]"), &[&[], &[3], &[3, 4]])
        .unwrap();
    seen.push(format!("{rows:?}"));
    seen.push(format!(
        "{:?}",
        h.sequence_logprob(&x("beta item1 [MASK]"), &[4, 1]).unwrap()
    ));
    let start = json!({"start": {"pairs": [{"input": "alpha [MASK]", "target": [3, 1]}],
                                 "config": FineTuneConfig::default()}, "steps": 2});
    seen.push(format!("{:?}", session.call(Kind::Finetune, &start).map(|_| ())));
    let c: CheckpointResponse = session.call(Kind::Checkpoint, &Empty {}).unwrap().parse().unwrap();
    seen.push(format!(
        "{:?}",
        m.at_checkpoint(c.checkpoint.clone())
            .next_token_logprobs(&x("[MASK]"), &[4])
    ));
    session
        .call(
            Kind::Restore,
            &RestoreRequest {
                checkpoint: c.checkpoint,
            },
        )
        .unwrap();
    seen.push(format!(
        "{:?}",
        m.at_checkpoint("ckpt-5").next_token_logprobs(&x("[MASK]"), &[])
    ));
    session.close().unwrap();
    seen
}

fn golden_model() -> ModelHandle {
    ModelHandle::new(common::random_tabular(7, 4, 0.25))
}

/// Runs the conversation against the reference server and records both
/// directions, `> ` for requests and `< ` for responses.
fn record() -> (String, Vec<String>) {
    let log = Arc::new(Mutex::new(String::new()));
    let mut server = Server::new(golden_model());
    let sink = log.clone();
    let session = scripted(move |line| {
        let (r, _) = server.handle(&Message::from_line(line).unwrap());
        let out = r.to_line().unwrap().trim_end().to_string();
        let mut l = sink.lock().unwrap();
        l.push_str(&format!("> {line}\n< {out}\n"));
        Some(out)
    });
    let seen = golden_conversation(session);
    let text = log.lock().unwrap().clone();
    (text, seen)
}

#[test]
fn live_conversation_matches_golden_transcript() {
    let (text, _) = record();
    if std::env::var_os("AUTOSEQ_BLESS").is_some() {
        std::fs::create_dir_all(fixture().parent().unwrap()).unwrap();
        std::fs::write(fixture(), &text).unwrap();
    }
    let golden = std::fs::read_to_string(fixture()).expect("fixture present (set AUTOSEQ_BLESS=1 to create)");
    assert_eq!(text, golden);
}

#[test]
fn golden_transcript_replays_byte_identically() {
    let golden = std::fs::read_to_string(fixture()).unwrap();
    let mut script: Vec<(char, String)> = golden
        .lines()
        .map(|l| (l.chars().next().unwrap(), l[2..].to_string()))
        .collect();
    script.reverse();
    let mismatches = Arc::new(Mutex::new(Vec::new()));
    let bad = mismatches.clone();
    let session = scripted(move |line| {
        match script.pop() {
            Some(('>', want)) if want == line => {}
            other => {
                bad.lock().unwrap().push(format!("got {line}, expected {other:?}"));
                return None;
            }
        }
        match script.pop() {
            Some(('<', resp)) => Some(resp),
            other => {
                bad.lock().unwrap().push(format!("no response recorded: {other:?}"));
                None
            }
        }
    });
    let replayed = golden_conversation(session);
    assert!(
        mismatches.lock().unwrap().is_empty(),
        "{:?}",
        mismatches.lock().unwrap()
    );
    let (_, live) = record();
    assert_eq!(replayed, live);
}
