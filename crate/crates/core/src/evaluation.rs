//! Repeated evaluation of generated motions against a held-out corpus split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_validation, CorpusEntry};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, RepeatMetrics, DEFAULT_POOL};
use crate::pipeline::{Models, SamplingPlan};
use crate::rng::{stream, stream_seed};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub repeats: usize,
    pub pool: usize,
    /// Rows per diversity subset.
    pub diversity_subset: usize,
    /// Descriptions used for multimodality; 0 disables it.
    pub mm_descriptions: usize,
    /// Pairs per multimodality description.
    pub mm_pairs: usize,
    pub validation_fraction: f64,
    /// Cap on evaluated entries, taken in corpus order.
    pub max_entries: Option<usize>,
    /// Per-sample seeds are derived from `seed`; `plan.seed` is ignored.
    pub plan: SamplingPlan,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repeats: 20,
            pool: DEFAULT_POOL,
            diversity_subset: 16,
            mm_descriptions: 8,
            mm_pairs: 5,
            validation_fraction: 0.25,
            max_entries: None,
            plan: SamplingPlan::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub generated: MetricReport,
    /// The same protocol applied to the corpus motions themselves.
    pub ground_truth: MetricReport,
    pub entries: usize,
    pub repeats: usize,
}

fn rows(features: Vec<Vec<f64>>) -> Mat {
    Mat::from_rows(&features)
}

/// Held-out entries, falling back to the whole corpus when the split is too
/// small for the retrieval pool.
pub fn evaluation_entries<'a>(corpus: &'a [CorpusEntry], config: &EvalConfig) -> Vec<&'a CorpusEntry> {
    let held: Vec<&CorpusEntry> = corpus.iter().filter(|e| is_validation(&e.id, config.validation_fraction)).collect();
    let mut chosen = if held.len() >= config.pool { held } else { corpus.iter().collect() };
    if let Some(cap) = config.max_entries {
        chosen.truncate(cap);
    }
    chosen
}

struct Protocol<'a> {
    config: &'a EvalConfig,
    text: &'a Mat,
    real: &'a Mat,
}

impl Protocol<'_> {
    fn metrics(&self, repeat_seed: u64, generated: &Mat, mm: Option<f64>) -> Result<RepeatMetrics> {
        Ok(RepeatMetrics {
            r_precision: metrics::r_precision(self.text, generated, self.config.pool, &mut stream(repeat_seed, 1))?,
            fid: metrics::fid(self.real, generated)?,
            mm_dist: metrics::mm_dist(self.text, generated)?,
            diversity: metrics::diversity(generated, self.config.diversity_subset, &mut stream(repeat_seed, 2))?,
            multimodality: mm,
        })
    }
}

/// Generates one motion per evaluation entry in each repeat and scores it.
/// Repeats run in parallel with seeds derived from `(config.seed, repeat)`.
pub fn evaluate(models: &Models, corpus: &[CorpusEntry], config: &EvalConfig) -> Result<Evaluation> {
    if config.repeats == 0 {
        return Err(Error::InvalidArgument("at least one repeat is required".into()));
    }
    let entries = evaluation_entries(corpus, config);
    if entries.len() < config.pool.max(2 * config.diversity_subset) {
        return Err(Error::InsufficientRows { needed: config.pool.max(2 * config.diversity_subset), got: entries.len() });
    }
    if config.mm_descriptions > entries.len() {
        return Err(Error::InsufficientRows { needed: config.mm_descriptions, got: entries.len() });
    }
    let max_frames = models.vaes.specific.config.max_frames;
    let text = rows(entries.iter().map(|e| models.embedder.text_feature(&e.description)).collect::<Result<_>>()?);
    let real = rows(entries.iter().map(|e| models.embedder.motion_feature(&e.motion)).collect::<Result<_>>()?);
    let protocol = Protocol { config, text: &text, real: &real };

    let sample_feature = |description: &str, frames: usize, seed: u64| -> Result<Vec<f64>> {
        let plan = SamplingPlan { seed, frames: Some(frames.min(max_frames)), ..config.plan.clone() };
        let out = models.sample(description, &plan, None)?;
        models.embedder.motion_feature(&out.motion)
    };

    let per_repeat: Vec<(RepeatMetrics, RepeatMetrics)> = (0..config.repeats)
        .into_par_iter()
        .map(|r| -> Result<_> {
            let repeat_seed = stream_seed(config.seed, r as u64);
            let generated = rows(
                entries
                    .iter()
                    .enumerate()
                    .map(|(i, e)| sample_feature(&e.description, e.motion.len(), stream_seed(repeat_seed, 0x1000 + i as u64)))
                    .collect::<Result<_>>()?,
            );
            let mm = if config.mm_descriptions > 0 && config.mm_pairs > 0 {
                let groups = entries[..config.mm_descriptions]
                    .iter()
                    .enumerate()
                    .map(|(j, e)| {
                        let feats = (0..2 * config.mm_pairs)
                            .map(|k| sample_feature(&e.description, e.motion.len(), stream_seed(repeat_seed, 0x4D_0000 + (j * 1000 + k) as u64)))
                            .collect::<Result<_>>()?;
                        Ok(rows(feats))
                    })
                    .collect::<Result<Vec<Mat>>>()?;
                Some(metrics::multimodality(&groups, config.mm_pairs)?)
            } else {
                None
            };
            let gen = protocol.metrics(repeat_seed, &generated, mm)?;
            let truth = protocol.metrics(repeat_seed, &real, None)?;
            Ok((gen, truth))
        })
        .collect::<Result<_>>()?;

    let (gen, truth): (Vec<_>, Vec<_>) = per_repeat.into_iter().unzip();
    Ok(Evaluation { generated: metrics::summarize(&gen), ground_truth: metrics::summarize(&truth), entries: entries.len(), repeats: config.repeats })
}
