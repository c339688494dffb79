#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bioserc::corpus::{write_dataset, Conversation, Split, Utterance};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn toy_config() -> PathBuf {
    fixtures().join("toy/toy.toml")
}

/// The CLI with every output redirected under `work`.
pub fn bioserc(work: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bioserc"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("BIOSERC")) {
        cmd.env_remove(k);
    }
    cmd.env("BIOSERC__OUTPUT__DIR", work.join("out"))
        .env("BIOSERC__BIOS__PATH", work.join("biographies.jsonl"));
    cmd
}

pub fn run(mut cmd: Command, args: &[&str]) -> Output {
    cmd.args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub struct CountRow {
    pub dataset: String,
    pub split: Split,
    pub dialogues: usize,
    pub utterances: usize,
    pub speakers: usize,
}

pub fn read_count_sheet(path: &Path) -> Vec<CountRow> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("dataset"))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            CountRow {
                dataset: f[0].into(),
                split: f[1].parse().unwrap(),
                dialogues: f[2].parse().unwrap(),
                utterances: f[3].parse().unwrap(),
                speakers: f[4].parse().unwrap(),
            }
        })
        .collect()
}

/// Conversations whose lengths and speaker counts spread the row totals as
/// evenly as possible.
pub fn conversations_for(row: &CountRow) -> Vec<Conversation> {
    let n = row.dialogues;
    (0..n)
        .map(|c| {
            let len = row.utterances / n + usize::from(c < row.utterances % n);
            let speakers = row.speakers / n + usize::from(c < row.speakers % n);
            assert!(speakers >= 1 && speakers <= len);
            Conversation {
                conversation_id: format!("{}-{}-{c}", row.dataset, row.split.as_str()),
                split: row.split,
                utterances: (0..len)
                    .map(|i| Utterance {
                        index: i,
                        speaker_id: format!("S{}", i % speakers),
                        text: format!("utterance {i}"),
                        gold_label: Some("neutral".into()),
                    })
                    .collect(),
            }
        })
        .collect()
}

/// One JSONL file per dataset under `dir`, in sheet order.
pub fn write_stats_fixtures(dir: &Path) -> Vec<(String, PathBuf)> {
    let rows = read_count_sheet(&fixtures().join("table2_counts.tsv"));
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    for row in &rows {
        if !out.iter().any(|(d, _)| d == &row.dataset) {
            out.push((row.dataset.clone(), dir.join(format!("{}.jsonl", row.dataset))));
        }
    }
    for (name, path) in &out {
        let convs: Vec<Conversation> = rows
            .iter()
            .filter(|r| &r.dataset == name)
            .flat_map(conversations_for)
            .collect();
        write_dataset(path, &convs).unwrap();
    }
    out
}
