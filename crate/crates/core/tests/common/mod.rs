#![allow(dead_code)]

use std::sync::OnceLock;

use actionguide::corpus::{generate_corpus, CorpusEntry, GrammarConfig};
use actionguide::embedding::EmbedderConfig;
use actionguide::pipeline::{train_models, DenoiserConfig, Models, PipelineConfig, PipelineReport};
use actionguide::vae::VaeConfig;

/// Narrow widths and a handful of epochs: enough to exercise every code
/// path, not to produce good motions.
pub fn tiny_config() -> PipelineConfig {
    PipelineConfig {
        embedder: EmbedderConfig { width: 16, layers: 1, heads: 2, eval_dim: 8, epochs: 4, batch_size: 16, ..Default::default() },
        vae: VaeConfig { latent_dim: 8, width: 16, layers: 1, heads: 2, epochs: 2, ..Default::default() },
        denoiser: DenoiserConfig { width: 16, layers: 1, heads: 2, epochs: 3, ..Default::default() },
    }
}

pub struct Fixture {
    pub corpus: Vec<CorpusEntry>,
    pub models: Models,
    pub report: PipelineReport,
}

pub fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = generate_corpus(3, 60, &GrammarConfig::default()).unwrap();
        let (models, report) = train_models(&corpus, &tiny_config()).unwrap();
        Fixture { corpus, models, report }
    })
}
