//! Fixtures shared by the benchmarks.

use actionguide::corpus::{generate_corpus, CorpusEntry, GrammarConfig};
use actionguide::embedding::EmbedderConfig;
use actionguide::pipeline::{train_models, DenoiserConfig, Models, PipelineConfig};
use actionguide::vae::VaeConfig;

/// Small models trained for a few epochs; fast to build, realistic shapes.
pub fn small_models() -> (Vec<CorpusEntry>, Models) {
    let corpus = generate_corpus(5, 80, &GrammarConfig::default()).expect("corpus");
    let config = PipelineConfig {
        embedder: EmbedderConfig { epochs: 2, ..Default::default() },
        vae: VaeConfig { epochs: 1, ..Default::default() },
        denoiser: DenoiserConfig { epochs: 2, ..Default::default() },
    };
    let (models, _) = train_models(&corpus, &config).expect("training");
    (corpus, models)
}
