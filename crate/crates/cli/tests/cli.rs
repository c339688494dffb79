mod support;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::thread;

use bioserc::corpus::{write_dataset, Conversation, Split, Utterance};
use support::{bioserc, run, stderr, stdout, toy_config};

fn two_speaker_conversations() -> Vec<Conversation> {
    (0..2)
        .map(|c| Conversation {
            conversation_id: format!("c{c}"),
            split: Split::Train,
            utterances: ["hi there", "hello", "how are you", "fine thanks"]
                .iter()
                .enumerate()
                .map(|(i, t)| Utterance {
                    index: i,
                    speaker_id: ["A", "B"][i % 2].into(),
                    text: (*t).into(),
                    gold_label: Some("neutral".into()),
                })
                .collect(),
        })
        .collect()
}

/// A config over the two-conversation corpus with empty dev and test splits.
fn small_config(dir: &Path, llm: &str) -> String {
    write_dataset(dir.join("train.jsonl"), &two_speaker_conversations()).unwrap();
    std::fs::write(dir.join("empty.jsonl"), "").unwrap();
    bioserc::corpus::synthetic::vocabulary().to_file(dir.join("labels.json")).unwrap();
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!(
            "[data]\ntrain = \"train.jsonl\"\ndev = \"empty.jsonl\"\ntest = \"empty.jsonl\"\nlabels = \"labels.json\"\n\n\
             [llm]\n{llm}\n\n[output]\ndir = \"out\"\n"
        ),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn stats_on_empty_file_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = run(bioserc(dir.path()), &["stats", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no conversations"), "{}", stderr(&o));
}

#[test]
fn stats_json_carries_the_tsv_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let files = support::write_stats_fixtures(dir.path());
    let (_, iemocap) = &files[0];
    let tsv = run(bioserc(dir.path()), &["stats", iemocap.to_str().unwrap()]);
    let json = run(bioserc(dir.path()), &["stats", "--format", "json", iemocap.to_str().unwrap()]);
    assert!(tsv.status.success() && json.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v[0]["dialogues"], serde_json::json!([108, 12, 31]));
    assert_eq!(v[0]["utterances"], serde_json::json!([5163, 647, 1623]));
    assert!(stdout(&tsv).contains("\t108\t12\t31\t5163\t647\t1623\t2.00"));
}

#[test]
fn extract_bios_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "backend = \"mock\"");
    let first = run(bioserc(dir.path()), &["extract-bios", "--config", &cfg]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("speakers=4 new=4 cached=0 failures=0"), "{}", stdout(&first));
    let second = run(bioserc(dir.path()), &["extract-bios", "--config", &cfg]);
    assert!(stdout(&second).contains("new=0 cached=4"), "{}", stdout(&second));
    let lines = std::fs::read_to_string(dir.path().join("biographies.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
}

/// Answers the first `ok` requests and returns 503 to the next `fail`.
fn flaky_server(ok: usize, fail: usize) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    thread::spawn(move || {
        for k in 0..ok + fail {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut payload = vec![0; length];
            reader.read_exact(&mut payload).unwrap();
            let (status, body) = if k < ok {
                (200, r#"{"choices":[{"text":"Calm and friendly.","finish_reason":"stop"}]}"#)
            } else {
                (503, "busy")
            };
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    url
}

#[test]
fn endpoint_down_keeps_partial_output_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let url = flaky_server(2, 2);
    let cfg = small_config(
        dir.path(),
        &format!("backend = \"http\"\nurl = \"{url}\"\nmax_in_flight = 1\nmax_retries = 0\nbackoff_ms = 0"),
    );
    let o = run(bioserc(dir.path()), &["extract-bios", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("new=2 cached=0 failures=2"), "{}", stderr(&o));
    let lines = std::fs::read_to_string(dir.path().join("biographies.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
}

#[test]
fn missing_biographies_stop_training_before_it_starts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    for variant in ["bios_mlp", "bios_attention", "ft-llm"] {
        let mut cmd = bioserc(dir.path());
        cmd.env("BIOSERC__MODEL__VARIANT", variant);
        let o = run(cmd, &["train", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{variant}");
        assert!(stderr(&o).contains("extract-bios"), "{variant}: {}", stderr(&o));
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bioserc(dir.path());
    cmd.env("BIOSERC__MODEL__WINDOW_SIZE", "3");
    let o = run(cmd, &["train", "--config", toy_config().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("window_size"), "{}", stderr(&o));
}

#[test]
fn baseline_trains_and_predicts_without_biographies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    let with = |args: &[&str]| {
        let mut cmd = bioserc(dir.path());
        cmd.env("BIOSERC__MODEL__VARIANT", "baseline")
            .env("BIOSERC__MODEL__SEEDS", "[0]")
            .env("BIOSERC__MODEL__WINDOWS", "[2]")
            .env("BIOSERC__MODEL__EPOCHS", "3");
        let o = run(cmd, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        o
    };
    with(&["train", "--config", cfg]);
    with(&["predict", "--config", cfg]);
    let dump = std::fs::read_to_string(dir.path().join("out/baseline/predictions_test_s0.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = dump.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 21);
    for r in &rows {
        let dist = r["distribution"].as_object().unwrap();
        assert_eq!(dist.len(), 4);
        let total: f64 = dist.values().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(r["gold"].is_string() && r["predicted"].is_string());
    }
    let ckpt: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/baseline/runs/baseline-w2-lr0.5-s0/checkpoint.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(ckpt["meta"]["config"]["model"]["variant"], "baseline");
}
