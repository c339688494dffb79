#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use bioserc::bios::{extract_biographies, mock_biography, BiographyStore, ExtractOptions, SpeakerBiography};
use bioserc::corpus::{Conversation, Split, Utterance};
use bioserc::llm::mock::FnTransport;
use bioserc::llm::{EndpointConfig, LlmClient};
use bioserc::{CompletionRequest, ToyEncoder, ToyEncoderConfig};

pub fn conversation(id: &str, turns: &[(&str, &str, &str)]) -> Conversation {
    Conversation {
        conversation_id: id.into(),
        split: Split::Train,
        utterances: turns
            .iter()
            .enumerate()
            .map(|(i, (s, t, l))| Utterance {
                index: i,
                speaker_id: (*s).into(),
                text: (*t).into(),
                gold_label: Some((*l).into()),
            })
            .collect(),
    }
}

/// Five turns, three speakers.
pub fn small_conversation() -> Conversation {
    conversation(
        "g1",
        &[
            ("A", "great news today", "joy"),
            ("B", "stop that now", "anger"),
            ("A", "sorry I lost it", "sadness"),
            ("C", "okay fine", "neutral"),
            ("B", "I hate this", "anger"),
        ],
    )
}

pub fn mock_client() -> LlmClient {
    let t = FnTransport::new(|req: &CompletionRequest| Ok(mock_biography(&req.prompt)));
    LlmClient::new(Arc::new(t), EndpointConfig::new("mock://"))
}

pub fn mock_bios(conv: &Conversation) -> HashMap<String, SpeakerBiography> {
    let mut store = BiographyStore::in_memory();
    extract_biographies(conv, &mock_client(), &mut store, &ExtractOptions::new("mock"))
        .unwrap()
        .biographies
        .into_iter()
        .map(|b| (b.speaker_id.clone(), b))
        .collect()
}

pub fn toy_encoder(d: usize) -> ToyEncoder<f64> {
    ToyEncoder::new(ToyEncoderConfig {
        hidden_dim: d,
        vocab_size: 97,
        seed: 3,
    })
    .unwrap()
}
pub mod oracles;
