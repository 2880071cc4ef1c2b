//! Token-level text encoder for graph-node features, plus the paired
//! text/motion evaluation extractor, trained with a symmetric contrastive
//! objective on the corpus.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::corpus::{is_validation, CorpusEntry};
use crate::error::{Error, Result};
use crate::graph::{tokenize, SemanticGraph};
use crate::metrics::{r_precision, DEFAULT_POOL};
use crate::motion::{FeatureNorm, MotionSequence};
use crate::nn::{sinusoidal, AdamW, AdamWConfig, Linear, TransformerStack};
use crate::rng::stream;
use crate::tensor::Mat;

pub const OOV_TOKEN: &str = "<oov>";

/// Closed vocabulary; index 0 is the out-of-vocabulary token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = words.into_iter().filter(|w| w != OOV_TOKEN).collect();
        let mut words = vec![OOV_TOKEN.to_string()];
        words.extend(set);
        let mut v = Self { words, index: HashMap::new() };
        v.reindex();
        v
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::new(texts.into_iter().flat_map(tokenize))
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub eval_dim: usize,
    pub motion_patch: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
            max_tokens: 96,
            eval_dim: 32,
            motion_patch: 4,
            temperature: 0.1,
            epochs: 300,
            batch_size: 32,
            learning_rate: 1e-3,
            validation_fraction: 0.25,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
struct Handles {
    token_embedding: ParamId,
    positions: ParamId,
    summary: ParamId,
    text: TransformerStack,
    text_head: Linear,
    motion_in: Linear,
    motion_summary: ParamId,
    motion: TransformerStack,
    motion_head: Linear,
}

impl Handles {
    fn build(ps: &mut ParamSet, config: &EmbedderConfig, vocab: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let d = config.width;
        Self {
            token_embedding: ps.add_normal("text.tokens", vocab, d, 0.5, rng),
            positions: ps.add_normal("text.positions", config.max_tokens + 1, d, 0.1, rng),
            summary: ps.add_normal("text.summary", 1, d, 0.5, rng),
            text: TransformerStack::new(ps, "text.encoder", d, config.heads, config.layers, false, rng),
            text_head: Linear::new(ps, "eval.text_head", d, config.eval_dim, rng),
            motion_in: Linear::new(ps, "eval.motion_in", feature_dim * config.motion_patch, d, rng),
            motion_summary: ps.add_normal("eval.motion_summary", 1, d, 0.5, rng),
            motion: TransformerStack::new(ps, "eval.motion_encoder", d, config.heads, config.layers, false, rng),
            motion_head: Linear::new(ps, "eval.motion_head", d, config.eval_dim, rng),
        }
    }
}

/// Per-token vectors and the summary vector of one text.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEncoding {
    pub tokens: Vec<String>,
    /// `n × D`, one row per token.
    pub token_vectors: Mat,
    pub summary: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub config: EmbedderConfig,
    pub vocab: Vocabulary,
    pub norm: FeatureNorm,
    pub params: ParamSet,
    handles: Handles,
}

/// Patches `frames` into rows of `patch` consecutive frames, repeating the
/// last frame to fill the final patch.
pub fn patchify(frames: &Mat, patch: usize) -> Mat {
    let (l, f) = frames.shape();
    let padded = l.div_ceil(patch) * patch;
    let mut data = Vec::with_capacity(padded * f);
    for r in 0..padded {
        data.extend_from_slice(frames.row(r.min(l - 1)));
    }
    Mat::from_vec(padded / patch, patch * f, data)
}

/// Scaled sinusoidal features for positions `0..rows`.
pub fn positional_table(rows: usize, width: usize, scale: f64) -> Mat {
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        data.extend(sinusoidal(r as f64, width).into_iter().map(|v| v * scale));
    }
    Mat::from_vec(rows, width, data)
}

impl Embedder {
    pub fn new(config: EmbedderConfig, vocab: Vocabulary, norm: FeatureNorm) -> Self {
        let mut rng = stream(config.seed, 0xE3B);
        let mut params = ParamSet::new();
        let handles = Handles::build(&mut params, &config, vocab.len(), norm.mean.len(), &mut rng);
        Self { config, vocab, norm, params, handles }
    }

    /// Rebuilds an embedder around stored parameters.
    pub fn from_parts(config: EmbedderConfig, mut vocab: Vocabulary, norm: FeatureNorm, params: ParamSet) -> Result<Self> {
        vocab.reindex();
        let fresh = Self::new(config, vocab, norm);
        crate::nn::check_compatible(&fresh.params, &params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn feature_dim(&self) -> usize {
        self.norm.mean.len()
    }

    fn token_ids(&self, text: &str) -> Result<(Vec<String>, Vec<usize>)> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        if tokens.len() > self.config.max_tokens {
            return Err(Error::InvalidArgument(format!("text has {} tokens, limit is {}", tokens.len(), self.config.max_tokens)));
        }
        let ids = self.vocab.ids(&tokens);
        Ok((tokens, ids))
    }

    /// `(n + 1) × D` encoder output; row 0 is the summary position.
    fn text_forward(&self, t: &Tape, ids: &[usize]) -> Var {
        let h = &self.handles;
        let tokens = t.gather_rows(t.param(h.token_embedding), ids);
        let seq = t.concat_rows(&[t.param(h.summary), tokens]);
        let seq = t.add(seq, t.slice_rows(t.param(h.positions), 0, ids.len() + 1));
        h.text.forward(t, seq, None)
    }

    fn text_feature_var(&self, t: &Tape, ids: &[usize]) -> Var {
        let out = self.text_forward(t, ids);
        let summary = t.slice_rows(out, 0, 1);
        t.l2_normalize_rows(self.handles.text_head.forward(t, summary))
    }

    fn motion_feature_var(&self, t: &Tape, motion: &MotionSequence) -> Var {
        let h = &self.handles;
        let patches = patchify(&self.norm.normalize(&motion.frames), self.config.motion_patch);
        let n = patches.rows();
        let x = h.motion_in.forward(t, t.constant(patches));
        let pos = positional_table(n + 1, self.config.width, 0.1);
        let seq = t.add(t.concat_rows(&[t.param(h.motion_summary), x]), t.constant(pos));
        let out = h.motion.forward(t, seq, None);
        t.l2_normalize_rows(h.motion_head.forward(t, t.slice_rows(out, 0, 1)))
    }

    pub fn encode_tokens(&self, text: &str) -> Result<TokenEncoding> {
        let (tokens, ids) = self.token_ids(text)?;
        let t = Tape::new(&self.params);
        let out = t.value(self.text_forward(&t, &ids));
        let summary = out.row(0).to_vec();
        let token_vectors = out.slice_rows(1, tokens.len());
        Ok(TokenEncoding { tokens, token_vectors, summary })
    }

    /// Node features in graph order: summary for the motion node, the verb
    /// token vector for actions, the phrase mean for specifics.
    pub fn init_graph_nodes(&self, graph: &SemanticGraph) -> Result<Mat> {
        let text = graph.tokens.join(" ");
        let enc = self.encode_tokens(&text)?;
        if enc.tokens != graph.tokens {
            return Err(Error::SpanMisalignment { span: (0, graph.tokens.len()), tokens: enc.tokens.len() });
        }
        let d = self.width();
        let mut out = Mat::zeros(graph.nodes.len(), d);
        for (i, node) in graph.nodes.iter().enumerate() {
            let (s, e) = node.token_span;
            if s >= e || e > enc.tokens.len() {
                return Err(Error::SpanMisalignment { span: (s, e), tokens: enc.tokens.len() });
            }
            let row = out.row_mut(i);
            match node.kind {
                crate::graph::NodeKind::Motion => row.copy_from_slice(&enc.summary),
                crate::graph::NodeKind::Action => row.copy_from_slice(enc.token_vectors.row(s)),
                crate::graph::NodeKind::Specific => {
                    for r in s..e {
                        for (o, v) in row.iter_mut().zip(enc.token_vectors.row(r)) {
                            *o += v;
                        }
                    }
                    let n = (e - s) as f64;
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        Ok(out)
    }

    /// Unit-norm evaluation feature of a text.
    pub fn text_feature(&self, text: &str) -> Result<Vec<f64>> {
        let (_, ids) = self.token_ids(text)?;
        let t = Tape::new(&self.params);
        Ok(t.value(self.text_feature_var(&t, &ids)).into_vec())
    }

    /// Unit-norm evaluation feature of a motion.
    pub fn motion_feature(&self, motion: &MotionSequence) -> Result<Vec<f64>> {
        if motion.frames.cols() != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!("motion has {} features, extractor expects {}", motion.frames.cols(), self.feature_dim())));
        }
        let t = Tape::new(&self.params);
        Ok(t.value(self.motion_feature_var(&t, motion)).into_vec())
    }

    /// Fraction of query tokens that are in the vocabulary.
    pub fn known_fraction(&self, text: &str) -> f64 {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return 0.0;
        }
        tokens.iter().filter(|t| self.vocab.id(t) != 0).count() as f64 / tokens.len() as f64
    }

    /// Symmetric InfoNCE over a batch of (text ids, motion) pairs.
    pub fn contrastive_loss(&self, t: &Tape, batch: &[(Vec<usize>, &MotionSequence)]) -> Var {
        let texts: Vec<Var> = batch.iter().map(|(ids, _)| self.text_feature_var(t, ids)).collect();
        let motions: Vec<Var> = batch.iter().map(|(_, m)| self.motion_feature_var(t, m)).collect();
        let tf = t.concat_rows(&texts);
        let mf = t.concat_rows(&motions);
        let logits = t.scale(t.matmul_t(tf, mf), 1.0 / self.config.temperature);
        let eye = t.constant(Mat::identity(batch.len()));
        let rows = t.sum(t.mul(t.log_softmax_rows(logits), eye));
        let cols = t.sum(t.mul(t.log_softmax_rows(t.transpose(logits)), eye));
        t.scale(t.add(rows, cols), -0.5 / batch.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub epoch_losses: Vec<f64>,
    pub validation_top1: f64,
    pub validation_size: usize,
    pub train_size: usize,
}

impl EmbedderReport {
    pub const TARGET_TOP1: f64 = 0.6;

    pub fn meets_target(&self) -> bool {
        self.validation_top1 >= Self::TARGET_TOP1
    }
}

/// Trains on the non-validation split and reports 32-way validation top-1.
pub fn train_contrastive(corpus: &[CorpusEntry], config: &EmbedderConfig) -> Result<(Embedder, EmbedderReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = Vocabulary::from_texts(corpus.iter().flat_map(|e| std::iter::once(e.description.as_str()).chain(e.local_actions.iter().map(|a| a.description.as_str()))));
    let (val, train): (Vec<&CorpusEntry>, Vec<&CorpusEntry>) = corpus.iter().partition(|e| is_validation(&e.id, config.validation_fraction));
    let train = if train.is_empty() { val.clone() } else { train };
    let norm = FeatureNorm::fit(train.iter().map(|e| &e.motion))?;
    let mut embedder = Embedder::new(config.clone(), vocab, norm);

    let examples: Vec<(Vec<usize>, &MotionSequence)> = train
        .iter()
        .map(|e| Ok((embedder.token_ids(&e.description)?.1, &e.motion)))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(&embedder.params, AdamWConfig { lr: config.learning_rate, ..Default::default() });
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let batch = config.batch_size.clamp(2, examples.len().max(2));
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(config.seed, 1_000 + epoch as u64));
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let items: Vec<(Vec<usize>, &MotionSequence)> = chunk.iter().map(|&i| (examples[i].0.clone(), examples[i].1)).collect();
            let t = Tape::new(&embedder.params);
            let loss = embedder.contrastive_loss(&t, &items);
            let value = t.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("contrastive loss {value} at epoch {epoch}")));
            }
            let grads = t.backward(loss).into_param_grads();
            opt.step(&mut embedder.params, &grads);
            total += value;
            count += 1;
        }
        epoch_losses.push(total / count.max(1) as f64);
    }

    let eval_set = if val.len() >= 2 { &val } else { &train };
    let validation_top1 = retrieval_top1(&embedder, eval_set, config.seed)?;
    let report = EmbedderReport { epoch_losses, validation_top1, validation_size: val.len(), train_size: train.len() };
    Ok((embedder, report))
}

/// Text→motion top-1 over pools of up to 32 (smaller sets use every entry).
pub fn retrieval_top1(embedder: &Embedder, entries: &[&CorpusEntry], seed: u64) -> Result<f64> {
    let n = entries.len();
    let e = embedder.config.eval_dim;
    let mut text = Mat::zeros(n, e);
    let mut motion = Mat::zeros(n, e);
    for (i, entry) in entries.iter().enumerate() {
        text.row_mut(i).copy_from_slice(&embedder.text_feature(&entry.description)?);
        motion.row_mut(i).copy_from_slice(&embedder.motion_feature(&entry.motion)?);
    }
    let pool = DEFAULT_POOL.min(n);
    // Motions retrieve texts in `r_precision`; swap roles for text queries.
    Ok(r_precision(&motion, &text, pool, &mut stream(seed, 0xEA1))?[0])
}
