//! A small model trained to memorize a small corpus, shared across tests.

use std::sync::OnceLock;

use forgetedit::corpus::{generate_corpus, CorpusConfig, QaRecord};
use forgetedit::dataset::{build_vocabulary, CurriculumConfig};
use forgetedit::model::{train, ModelConfig, ModelState, TrainHyper};
use forgetedit::targets::AvoidantTemplateBank;

pub struct Fixture {
    pub records: Vec<QaRecord>,
    pub model: ModelState,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let records = generate_corpus(&CorpusConfig {
            seed: 11,
            n_authors: 4,
            questions_per_author: 5,
            forget_fraction: 0.25,
            n_world_records: 4,
            perturbed_per_record: 3,
        })
        .unwrap();
        let vocab = build_vocabulary(&records, &AvoidantTemplateBank::default());
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ffn: 64,
            context_len: 96,
            seed: 1,
        };
        let hyper = TrainHyper {
            epochs: 60,
            batch: 8,
            lr: 1e-2,
            curriculum: CurriculumConfig::disabled(),
            ..TrainHyper::default()
        };
        let (model, _) = train(&ModelState::new(cfg, vocab).unwrap(), &records, &hyper).unwrap();
        Fixture { records, model }
    })
}

