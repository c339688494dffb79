use std::collections::HashMap;
use std::sync::Arc;

use bioserc::bios::{extract_biographies, mock_biography, BiographyStore, ExtractOptions, SpeakerBiography};
use bioserc::corpus::{synthetic, Conversation, Split};
use bioserc::llm::mock::FnTransport;
use bioserc::llm::{EndpointConfig, LlmClient};
use bioserc::model::{ErcModel, ModelConfig, Variant};
use bioserc::train::{score, train};
use bioserc::{ToyEncoder, ToyEncoderConfig};

fn mock_client() -> LlmClient {
    let t = FnTransport::new(|req: &bioserc::CompletionRequest| Ok(mock_biography(&req.prompt)));
    LlmClient::new(Arc::new(t), EndpointConfig::new("mock://"))
}

fn bios_for(convs: &[Conversation]) -> Vec<HashMap<String, SpeakerBiography>> {
    let client = mock_client();
    let mut store = BiographyStore::in_memory();
    let opts = ExtractOptions::new("mock");
    convs
        .iter()
        .map(|c| {
            extract_biographies(c, &client, &mut store, &opts)
                .unwrap()
                .biographies
                .into_iter()
                .map(|b| (b.speaker_id.clone(), b))
                .collect()
        })
        .collect()
}

fn overfit(variant: Variant, trainable: usize) -> f64 {
    let convs = synthetic::generate(5, 6, Split::Train, 11);
    let vocab = synthetic::vocabulary();
    let enc = ToyEncoder::<f64>::new(ToyEncoderConfig::default()).unwrap();
    let mut cfg = ModelConfig::new(variant, enc.config().hidden_dim, vocab.len());
    cfg.max_steps = Some(200);
    cfg.epochs = 1000;
    cfg.trainable_encoder_layers = trainable;
    let model = ErcModel::init(cfg, &vocab, &enc).unwrap();
    let bios = bios_for(&convs);
    let inputs: Vec<_> = convs
        .iter()
        .zip(&bios)
        .map(|(c, b)| model.prepare(c, &enc, Some(b), &vocab).unwrap())
        .collect();
    let out = train(model, &inputs, &[]).unwrap();
    assert!(out.steps <= 200);
    score(&out.best, &inputs).unwrap()
}

#[test]
fn every_variant_overfits_a_small_set() {
    for v in [Variant::Baseline, Variant::BiosMlp, Variant::BiosAttention] {
        let f1 = overfit(v, 0);
        assert!(f1 >= 0.95, "{v:?} reached {f1}");
    }
}

#[test]
fn fine_tuned_encoder_overfits() {
    let f1 = overfit(Variant::BiosAttention, 1);
    assert!(f1 >= 0.95, "reached {f1}");
}
