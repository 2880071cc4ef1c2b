//! Hierarchical latent denoisers (motion → action → specific) with a shared
//! graph-attention layer, joint training and three-stage guided sampling.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::corpus::{is_validation, CorpusEntry};
use crate::diffusion::{
    cfg_combine, clip_prediction, ddim_grid, energy, guided_step, make_schedule, q_sample, step_pairs, EnergyKind, GuidanceMode, GuidanceSpec, NoiseSchedule,
    ReverseMode, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_CFG_ALPHA, DEFAULT_CLIP_X0, DEFAULT_STEPS,
};
use crate::embedding::{train_contrastive, Embedder, EmbedderConfig, EmbedderReport};
use crate::error::{Error, Result};
use crate::gat::{self, EdgeCoefficient, GatLayer};
use crate::graph::{parse, Lexicon, SemanticGraph};
use crate::motion::MotionSequence;
use crate::nn::{sinusoidal, AdamW, AdamWConfig, Linear, TransformerStack};
use crate::rng::{normal_mat, stream};
use crate::tensor::Mat;
use crate::vae::{train_vae_set, LatentEmbedding, Level, VaeConfig, VaeReport, VaeSet};

pub const DEFAULT_RHO: f64 = 0.01;
pub const FRAMES_PER_ACTION: usize = 60;

const TYPE_TIME: usize = 0;
const TYPE_MOTION: usize = 1;
const TYPE_ACTION: usize = 2;
const TYPE_SPECIFIC: usize = 3;
const TYPE_LATENT: usize = 4;
const TYPE_NOISY: usize = 5;
const TYPE_NULL: usize = 6;
const TOKEN_TYPES: usize = 7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[default]
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("precision must be 32 or 64, got {other}"))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn apply(self, m: Mat) -> Mat {
        match self {
            Precision::F32 => m.round_f32(),
            Precision::F64 => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub cond_dropout: f64,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
            cond_dropout: 0.1,
            train_steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 1,
        }
    }
}

/// Scalar affine map from VAE latents to unit-scale diffusion latents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: f64,
    pub std: f64,
}

impl LatentStats {
    pub fn fit(latents: &[&Mat]) -> Self {
        let n: usize = latents.iter().map(|m| m.len()).sum();
        if n < 2 {
            return Self { mean: 0.0, std: 1.0 };
        }
        let mean = latents.iter().map(|m| m.sum()).sum::<f64>() / n as f64;
        let var = latents.iter().map(|m| m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>()).sum::<f64>() / (n - 1) as f64;
        Self { mean, std: var.sqrt().max(1e-6) }
    }

    pub fn normalize(&self, m: &Mat) -> Mat {
        m.map(|v| (v - self.mean) / self.std)
    }

    pub fn denormalize(&self, m: &Mat) -> Mat {
        m.map(|v| v * self.std + self.mean)
    }
}

#[derive(Clone, Debug)]
struct LevelHandles {
    time_in: Linear,
    node_in: Linear,
    latent_in: Option<(Linear, ParamId)>,
    z_in: Linear,
    z_positions: ParamId,
    types: ParamId,
    stack: TransformerStack,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Handles {
    gat: GatLayer,
    null: ParamId,
    levels: Vec<LevelHandles>,
}

impl Handles {
    fn build(ps: &mut ParamSet, c: &DenoiserConfig, node_dim: usize, latent_dim: usize, rng: &mut impl Rng) -> Self {
        let w = c.width;
        let gat = GatLayer::new(ps, "gat", node_dim, rng);
        let null = ps.add_normal("null", 1, w, 0.5, rng);
        let levels = Level::ALL
            .iter()
            .map(|&level| {
                let p = format!("den.{level}");
                let latent_in = previous(level).map(|prev| {
                    (
                        Linear::new(ps, &format!("{p}.latent_in"), latent_dim, w, rng),
                        ps.add_normal(format!("{p}.latent_positions"), prev.tokens(), w, 0.1, rng),
                    )
                });
                LevelHandles {
                    time_in: Linear::new(ps, &format!("{p}.time_in"), w, w, rng),
                    node_in: Linear::new(ps, &format!("{p}.node_in"), node_dim, w, rng),
                    latent_in,
                    z_in: Linear::new(ps, &format!("{p}.z_in"), latent_dim, w, rng),
                    z_positions: ps.add_normal(format!("{p}.z_positions"), level.tokens(), w, 0.1, rng),
                    types: ps.add_normal(format!("{p}.types"), TOKEN_TYPES, w, 0.1, rng),
                    stack: TransformerStack::new(ps, &format!("{p}.layers"), w, c.heads, c.layers, false, rng),
                    out: Linear::new_scaled(ps, &format!("{p}.out"), w, latent_dim, 0.1, rng),
                }
            })
            .collect();
        Self { gat, null, levels }
    }
}

fn previous(level: Level) -> Option<Level> {
    match level {
        Level::Motion => None,
        Level::Action => Some(Level::Motion),
        Level::Specific => Some(Level::Action),
    }
}

/// Conditioning tokens for one level, as node features after graph attention.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    Null,
    Nodes {
        motion: Mat,
        actions: Option<Mat>,
        specifics: Option<Mat>,
        /// Previous-level latent (unit-scale).
        latent: Option<Mat>,
    },
}

impl Conditioning {
    /// `[V^m]`, `[V^m, V^a, z^m]` or `[V^m, V^a, V^s, z^a]`.
    pub fn for_level(level: Level, updated: &Mat, graph: &SemanticGraph, latent: Option<&Mat>) -> Self {
        let (m, a, s) = gat::level_indices(graph);
        let pick = |idx: &[usize]| (!idx.is_empty()).then(|| Mat::from_fn(idx.len(), updated.cols(), |r, c| updated.get(idx[r], c)));
        let motion = pick(&m).unwrap_or_else(|| Mat::zeros(1, updated.cols()));
        match level {
            Level::Motion => Conditioning::Nodes { motion, actions: None, specifics: None, latent: None },
            Level::Action => Conditioning::Nodes { motion, actions: pick(&a), specifics: None, latent: latent.cloned() },
            Level::Specific => Conditioning::Nodes { motion, actions: pick(&a), specifics: pick(&s), latent: latent.cloned() },
        }
    }
}

enum CondVars {
    Null,
    Nodes { motion: Var, actions: Option<Var>, specifics: Option<Var>, latent: Option<Var> },
}

/// Deterministic randomness for one level of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelDraw {
    pub t: usize,
    pub eps: Mat,
    pub drop: bool,
}

/// A corpus entry prepared for denoiser training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub graph: SemanticGraph,
    /// Initial node features from the frozen text encoder.
    pub nodes: Mat,
    /// Unit-scale latents at the motion, action and specific levels.
    pub latents: [Mat; 3],
}

#[derive(Clone, Debug)]
pub struct HierarchicalDenoiser {
    pub config: DenoiserConfig,
    pub node_dim: usize,
    pub latent_dim: usize,
    pub stats: [LatentStats; 3],
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
    handles: Handles,
}

impl HierarchicalDenoiser {
    pub fn new(config: DenoiserConfig, node_dim: usize, latent_dim: usize, stats: [LatentStats; 3]) -> Result<Self> {
        if config.width == 0 || config.heads == 0 || !config.width.is_multiple_of(config.heads) {
            return Err(Error::InvalidArgument(format!("denoiser width {} not divisible by {} heads", config.width, config.heads)));
        }
        if !(0.0..=1.0).contains(&config.cond_dropout) {
            return Err(Error::InvalidParameterRange("condition dropout".into()));
        }
        let schedule = make_schedule(config.train_steps, config.beta_start, config.beta_end)?;
        let mut rng = stream(config.seed, 0xDE0);
        let mut params = ParamSet::new();
        let handles = Handles::build(&mut params, &config, node_dim, latent_dim, &mut rng);
        Ok(Self { config, node_dim, latent_dim, stats, params, schedule, handles })
    }

    pub fn from_parts(config: DenoiserConfig, node_dim: usize, latent_dim: usize, stats: [LatentStats; 3], params: ParamSet) -> Result<Self> {
        let fresh = Self::new(config, node_dim, latent_dim, stats)?;
        crate::nn::check_compatible(&fresh.params, &params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn gat_params(&self) -> gat::GatParams {
        self.handles.gat.params(&self.params)
    }

    pub fn null_param(&self) -> ParamId {
        self.handles.null
    }

    pub fn gat_layer(&self) -> GatLayer {
        self.handles.gat
    }

    fn check_cond(&self, level: Level, cond: &Conditioning) -> Result<()> {
        let Conditioning::Nodes { motion, actions, specifics, latent } = cond else {
            return Ok(());
        };
        let arity = |what: &str| Err(Error::InvalidArgument(format!("{what} conditioning for the {level} level")));
        if motion.shape() != (1, self.node_dim) {
            return arity("malformed motion-node");
        }
        for m in [actions, specifics].into_iter().flatten() {
            if m.cols() != self.node_dim || m.rows() == 0 {
                return arity("malformed node");
            }
        }
        match (level, actions, specifics, latent) {
            (Level::Motion, None, None, None) => Ok(()),
            (Level::Action, Some(_), None, Some(z)) if z.shape() == (Level::Motion.tokens(), self.latent_dim) => Ok(()),
            (Level::Specific, Some(_), _, Some(z)) if z.shape() == (Level::Action.tokens(), self.latent_dim) => Ok(()),
            _ => arity("wrong"),
        }
    }

    fn level_forward(&self, t: &Tape, level: Level, z_t: Var, step: usize, cond: &CondVars) -> Var {
        let h = &self.handles.levels[level.index()];
        let w = self.config.width;
        let types = t.param(h.types);
        let typed = |x: Var, k: usize| t.add_row(x, t.slice_rows(types, k, 1));
        let time = h.time_in.forward(t, t.constant(Mat::row_vector(&sinusoidal(step as f64, w))));
        let mut parts = vec![typed(time, TYPE_TIME)];
        match cond {
            CondVars::Null => parts.push(typed(t.param(self.handles.null), TYPE_NULL)),
            CondVars::Nodes { motion, actions, specifics, latent } => {
                parts.push(typed(h.node_in.forward(t, *motion), TYPE_MOTION));
                if let Some(a) = actions {
                    parts.push(typed(h.node_in.forward(t, *a), TYPE_ACTION));
                }
                if let Some(s) = specifics {
                    parts.push(typed(h.node_in.forward(t, *s), TYPE_SPECIFIC));
                }
                if let (Some(z), Some((proj, pos))) = (latent, &h.latent_in) {
                    parts.push(typed(t.add(proj.forward(t, *z), t.param(*pos)), TYPE_LATENT));
                }
            }
        }
        parts.push(typed(t.add(h.z_in.forward(t, z_t), t.param(h.z_positions)), TYPE_NOISY));
        let seq = t.concat_rows(&parts);
        let n = t.shape(seq).0;
        let out = h.stack.forward(t, seq, None);
        h.out.forward(t, t.slice_rows(out, n - level.tokens(), level.tokens()))
    }

    /// `ε̂ = φ_ℓ(z_t, t, cond)`.
    pub fn predict_eps(&self, level: Level, z_t: &Mat, step: usize, cond: &Conditioning) -> Result<Mat> {
        if z_t.shape() != (level.tokens(), self.latent_dim) {
            return Err(Error::ShapeMismatch(format!("{level} latent {:?}", z_t.shape())));
        }
        if step == 0 || step > self.schedule.len() {
            return Err(Error::TimestepOutOfRange { t: step, max: self.schedule.len() });
        }
        self.check_cond(level, cond)?;
        let t = Tape::new(&self.params);
        let vars = match cond {
            Conditioning::Null => CondVars::Null,
            Conditioning::Nodes { motion, actions, specifics, latent } => CondVars::Nodes {
                motion: t.constant(motion.clone()),
                actions: actions.as_ref().map(|m| t.constant(m.clone())),
                specifics: specifics.as_ref().map(|m| t.constant(m.clone())),
                latent: latent.as_ref().map(|m| t.constant(m.clone())),
            },
        };
        let out = self.level_forward(&t, level, t.constant(z_t.clone()), step, &vars);
        Ok(t.value(out))
    }

    /// The three per-level mean-squared ε losses for one example.
    pub fn loss_terms(&self, t: &Tape, example: &TrainingExample, draws: &[LevelDraw; 3]) -> Result<[Var; 3]> {
        let (updated, _) = self.handles.gat.forward(t, &example.graph, t.constant(example.nodes.clone()));
        let (m, a, s) = gat::level_indices(&example.graph);
        let motion = t.gather_rows(updated, &m);
        let actions = t.gather_rows(updated, &a);
        let specifics = (!s.is_empty()).then(|| t.gather_rows(updated, &s));
        let mut out = Vec::with_capacity(3);
        for level in Level::ALL {
            let d = &draws[level.index()];
            let z0 = &example.latents[level.index()];
            let z_t = q_sample(z0, d.t, &d.eps, &self.schedule)?;
            let cond = if d.drop {
                CondVars::Null
            } else {
                let latent = previous(level).map(|p| t.constant(example.latents[p.index()].clone()));
                match level {
                    Level::Motion => CondVars::Nodes { motion, actions: None, specifics: None, latent: None },
                    Level::Action => CondVars::Nodes { motion, actions: Some(actions), specifics: None, latent },
                    Level::Specific => CondVars::Nodes { motion, actions: Some(actions), specifics, latent },
                }
            };
            let eps_hat = self.level_forward(t, level, t.constant(z_t), d.t, &cond);
            let diff = t.sub(eps_hat, t.constant(d.eps.clone()));
            out.push(t.scale(t.sum_squares(diff), 1.0 / d.eps.len() as f64));
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn draw(&self, rng: &mut impl Rng, dropout: f64) -> [LevelDraw; 3] {
        Level::ALL.map(|level| LevelDraw {
            t: rng.random_range(1..=self.schedule.len()),
            eps: normal_mat(rng, level.tokens(), self.latent_dim),
            drop: rng.random::<f64>() < dropout,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    /// Mean total loss (sum of the three levels) per epoch.
    pub epoch_losses: Vec<f64>,
    pub epoch_level_losses: Vec<[f64; 3]>,
    pub train_size: usize,
}

/// Encodes graphs, node features and unit-scale latents for training.
pub fn prepare_examples(entries: &[&CorpusEntry], embedder: &Embedder, vaes: &VaeSet, stats: Option<[LatentStats; 3]>) -> Result<(Vec<TrainingExample>, [LatentStats; 3])> {
    let mut raw = Vec::with_capacity(entries.len());
    for e in entries {
        let nodes = embedder.init_graph_nodes(&e.gold_graph)?;
        let latents = Level::ALL.map(|l| vaes.get(l).encode(&e.motion).map(|p| p.mean));
        let [m, a, s] = latents;
        raw.push((e.gold_graph.clone(), nodes, [m?, a?, s?]));
    }
    let stats = stats.unwrap_or_else(|| Level::ALL.map(|l| LatentStats::fit(&raw.iter().map(|r| &r.2[l.index()]).collect::<Vec<_>>())));
    let examples = raw
        .into_iter()
        .map(|(graph, nodes, lat)| TrainingExample { graph, nodes, latents: Level::ALL.map(|l| stats[l.index()].normalize(&lat[l.index()])) })
        .collect();
    Ok((examples, stats))
}

/// Trains the three denoisers and the shared graph attention on the
/// non-validation split with condition dropout.
pub fn train_denoisers(corpus: &[CorpusEntry], embedder: &Embedder, vaes: &VaeSet, config: &DenoiserConfig, validation_fraction: f64) -> Result<(HierarchicalDenoiser, DenoiserReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    vaes.validate()?;
    let mut train: Vec<&CorpusEntry> = corpus.iter().filter(|e| !is_validation(&e.id, validation_fraction)).collect();
    if train.is_empty() {
        train = corpus.iter().collect();
    }
    let (examples, stats) = prepare_examples(&train, embedder, vaes, None)?;
    let mut den = HierarchicalDenoiser::new(config.clone(), embedder.width(), vaes.latent_dim(), stats)?;
    let mut opt = AdamW::new(&den.params, AdamWConfig { lr: config.learning_rate, ..Default::default() });
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_level_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = stream(config.seed, 0xD1F_0000 + epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for chunk in order.chunks(config.batch_size.max(1)) {
            let t = Tape::new(&den.params);
            let mut terms = Vec::with_capacity(chunk.len() * 3);
            for &i in chunk {
                let draws = den.draw(&mut rng, config.cond_dropout);
                terms.extend(den.loss_terms(&t, &examples[i], &draws)?);
            }
            for (k, v) in terms.iter().enumerate() {
                sums[k % 3] += t.scalar(*v);
            }
            let loss = t.scale(t.sum(t.concat_rows(&terms)), 1.0 / chunk.len() as f64);
            let value = t.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("denoiser loss {value} at epoch {epoch}")));
            }
            let grads = t.backward(loss).into_param_grads();
            opt.step(&mut den.params, &grads);
        }
        let n = examples.len() as f64;
        let level = sums.map(|s| s / n);
        epoch_losses.push(level.iter().sum());
        epoch_level_losses.push(level);
    }
    Ok((den, DenoiserReport { epoch_losses, epoch_level_losses, train_size: examples.len() }))
}

/// Configs for every trained component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub embedder: EmbedderConfig,
    pub vae: VaeConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { embedder: EmbedderConfig { epochs: 60, ..Default::default() }, vae: VaeConfig::default(), denoiser: DenoiserConfig::default() }
    }
}

impl PipelineConfig {
    /// Same seed for every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.embedder.seed = seed;
        self.vae.seed = seed;
        self.denoiser.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub embedder: EmbedderReport,
    pub vae: [VaeReport; 3],
    pub denoiser: DenoiserReport,
}

/// Embedder, then the three VAEs, then the denoisers and exemplar bank.
pub fn train_models(corpus: &[CorpusEntry], config: &PipelineConfig) -> Result<(Models, PipelineReport)> {
    let (embedder, er) = train_contrastive(corpus, &config.embedder)?;
    let (vaes, vr) = train_vae_set(corpus, &config.vae)?;
    let (denoiser, dr) = train_denoisers(corpus, &embedder, &vaes, &config.denoiser, config.embedder.validation_fraction)?;
    let exemplars = build_exemplars(corpus, &embedder, &vaes)?;
    let models = Models { embedder, vaes, denoiser, exemplars, lexicon: Lexicon::default() };
    Ok((models, PipelineReport { embedder: er, vae: vr, denoiser: dr }))
}

/// A corpus local-action segment with its retrieval key and action latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub description: String,
    pub entry_id: String,
    pub segment: usize,
    pub text_feature: Vec<f64>,
    /// Raw action-level VAE posterior mean.
    pub latent: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub exemplar: Exemplar,
    pub similarity: f64,
    /// Fraction of query tokens in the vocabulary.
    pub confidence: f64,
}

pub fn build_exemplars(corpus: &[CorpusEntry], embedder: &Embedder, vaes: &VaeSet) -> Result<Vec<Exemplar>> {
    let mut out = Vec::new();
    for e in corpus {
        for (k, a) in e.local_actions.iter().enumerate() {
            let seg = e.segment(k);
            out.push(Exemplar {
                description: a.description.clone(),
                entry_id: e.id.clone(),
                segment: k,
                text_feature: embedder.text_feature(&a.description)?,
                latent: vaes.action.encode(&seg)?.mean,
            });
        }
    }
    Ok(out)
}

/// Nearest exemplar by text-feature cosine similarity; ties keep the first.
pub fn nearest_exemplar(query: &str, exemplars: &[Exemplar], embedder: &Embedder) -> Result<Retrieval> {
    if exemplars.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let confidence = embedder.known_fraction(query);
    if confidence == 0.0 {
        return Err(Error::OutOfVocabulary(query.to_string()));
    }
    let q = embedder.text_feature(query)?;
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, e) in exemplars.iter().enumerate() {
        let s = crate::tensor::dot(&q, &e.text_feature);
        if s > best.0 {
            best = (s, i);
        }
    }
    Ok(Retrieval { exemplar: exemplars[best.1].clone(), similarity: best.0, confidence })
}

/// Corpus segment nearest to `query`, with its action-level latent.
pub fn retrieve_exemplar(query: &str, corpus: &[CorpusEntry], embedder: &Embedder, vaes: &VaeSet) -> Result<(MotionSequence, LatentEmbedding, Retrieval)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let confidence = embedder.known_fraction(query);
    if confidence == 0.0 {
        return Err(Error::OutOfVocabulary(query.to_string()));
    }
    let q = embedder.text_feature(query)?;
    let mut best: Option<(f64, &CorpusEntry, usize, Vec<f64>)> = None;
    for e in corpus {
        for (k, a) in e.local_actions.iter().enumerate() {
            let f = embedder.text_feature(&a.description)?;
            let s = crate::tensor::dot(&q, &f);
            if best.as_ref().is_none_or(|b| s > b.0) {
                best = Some((s, e, k, f));
            }
        }
    }
    let (similarity, entry, k, text_feature) = best.ok_or(Error::EmptyCorpus)?;
    let segment = entry.segment(k);
    let post = vaes.action.encode(&segment)?;
    let exemplar = Exemplar {
        description: entry.local_actions[k].description.clone(),
        entry_id: entry.id.clone(),
        segment: k,
        text_feature,
        latent: post.mean.clone(),
    };
    Ok((segment, post.mean_latent(), Retrieval { exemplar, similarity, confidence }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// Generate each local action with the first two stages.
    Sampled,
    /// Nearest corpus exemplar.
    #[default]
    Retrieved,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingPlan {
    /// DDIM step counts for the motion, action and specific stages.
    pub steps: [usize; 3],
    pub cfg_alpha: f64,
    /// Clamp bound for the clean-latent prediction (unit-scale latents); `None` disables it.
    pub clip_x0: Option<f64>,
    pub rho: f64,
    /// Scale ρ by `t / T` at each step.
    pub rho_decay: bool,
    pub weight_multipliers: Option<Vec<f64>>,
    pub guidance_mode: GuidanceMode,
    pub energy: EnergyKind,
    pub mode: ReverseMode,
    pub reference_source: ReferenceSource,
    /// Output length; defaults to a fixed budget per parsed action.
    pub frames: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            steps: [50, 50, 50],
            cfg_alpha: DEFAULT_CFG_ALPHA,
            clip_x0: Some(DEFAULT_CLIP_X0),
            rho: DEFAULT_RHO,
            rho_decay: false,
            weight_multipliers: None,
            guidance_mode: GuidanceMode::ScaledReference,
            energy: EnergyKind::SquaredL2,
            mode: ReverseMode::Deterministic,
            reference_source: ReferenceSource::Retrieved,
            frames: None,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self, total: usize) -> Result<()> {
        if self.steps.iter().any(|&s| s == 0 || s > total) {
            return Err(Error::InvalidArgument(format!("step counts {:?} outside 1..={total}", self.steps)));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be finite and non-negative, got {}", self.rho)));
        }
        if !self.cfg_alpha.is_finite() {
            return Err(Error::InvalidArgument("cfg alpha must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub coefficients: Vec<EdgeCoefficient>,
    /// Motion-node coefficients over its actions.
    pub action_coefficients: Vec<f64>,
    pub lambda: Vec<f64>,
    pub reference_descriptions: Vec<String>,
    /// Mean energy of `z_t` to the scaled references after each action step.
    pub action_energy_trace: Vec<f64>,
    /// Energy of the final action latent to each (unit-scale) reference.
    pub final_action_energies: Vec<f64>,
}

impl Diagnostics {
    pub fn mean_final_energy(&self) -> Option<f64> {
        (!self.final_action_energies.is_empty()).then(|| self.final_action_energies.iter().sum::<f64>() / self.final_action_energies.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub motion: MotionSequence,
    /// Final unit-scale latents of the three stages.
    pub latents: [Mat; 3],
    pub diagnostics: Diagnostics,
}

/// Everything needed for inference.
#[derive(Clone, Debug)]
pub struct Models {
    pub embedder: Embedder,
    pub vaes: VaeSet,
    pub denoiser: HierarchicalDenoiser,
    pub exemplars: Vec<Exemplar>,
    pub lexicon: Lexicon,
}

struct Prepared {
    graph: SemanticGraph,
    updated: Mat,
    diagnostics: Diagnostics,
}

impl Models {
    pub fn validate(&self) -> Result<()> {
        self.vaes.validate()?;
        if self.denoiser.node_dim != self.embedder.width() || self.denoiser.latent_dim != self.vaes.latent_dim() {
            return Err(Error::Checkpoint("denoiser dimensions do not match the embedder and vaes".into()));
        }
        Ok(())
    }

    /// Rounds every parameter through `f32` when `precision` is 32-bit.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        if precision == Precision::F32 {
            let round = |ps: &mut ParamSet| {
                for id in ps.ids().collect::<Vec<_>>() {
                    let m = ps.get(id).round_f32();
                    *ps.get_mut(id) = m;
                }
            };
            round(&mut self.embedder.params);
            round(&mut self.vaes.motion.params);
            round(&mut self.vaes.action.params);
            round(&mut self.vaes.specific.params);
            round(&mut self.denoiser.params);
            for e in &mut self.exemplars {
                e.latent = e.latent.round_f32();
            }
        }
        self
    }

    pub fn parse(&self, description: &str) -> Result<SemanticGraph> {
        parse(description, &self.lexicon)
    }

    fn prepare(&self, graph: SemanticGraph) -> Result<Prepared> {
        let nodes = self.embedder.init_graph_nodes(&graph)?;
        let att = gat::forward(&self.denoiser.gat_params(), &graph, &nodes)?;
        let action_coefficients = gat::action_coefficients(&graph, &att)?;
        let diagnostics = Diagnostics { coefficients: att.coefficients, action_coefficients, ..Default::default() };
        Ok(Prepared { graph, updated: att.updated, diagnostics })
    }

    /// Parsed graph, edge coefficients and λ preview without sampling.
    pub fn attention_preview(&self, description: &str, rho: f64, multipliers: Option<&[f64]>) -> Result<(SemanticGraph, Diagnostics)> {
        let mut p = self.prepare(self.parse(description)?)?;
        if rho > 0.0 {
            p.diagnostics.lambda = gat::guiding_weights(&p.diagnostics.action_coefficients, rho, multipliers)?;
        } else {
            p.diagnostics.lambda = vec![0.0; p.diagnostics.action_coefficients.len()];
        }
        Ok((p.graph, p.diagnostics))
    }

    fn default_frames(&self, graph: &SemanticGraph, plan: &SamplingPlan) -> Result<usize> {
        let max = self.vaes.specific.config.max_frames;
        let frames = plan.frames.unwrap_or((FRAMES_PER_ACTION * graph.num_actions()).min(max));
        if frames == 0 || frames > max {
            return Err(Error::InvalidArgument(format!("frame count {frames} outside 1..={max}")));
        }
        Ok(frames)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stage(
        &self,
        level: Level,
        cond: &Conditioning,
        plan: &SamplingPlan,
        guidance: Option<(&[Mat], &[f64])>,
        rng: &mut ChaCha8Rng,
        trace: &mut Vec<f64>,
    ) -> Result<Mat> {
        let den = &self.denoiser;
        let schedule = &den.schedule;
        let shape = (level.tokens(), den.latent_dim);
        let mut z = plan.precision.apply(normal_mat(rng, shape.0, shape.1));
        let grid = ddim_grid(schedule.len(), plan.steps[level.index()])?;
        for (t, t_prev) in step_pairs(&grid) {
            let cond_eps = den.predict_eps(level, &z, t, cond)?;
            let eps = if plan.cfg_alpha == 1.0 {
                cond_eps
            } else {
                let uncond = den.predict_eps(level, &z, t, &Conditioning::Null)?;
                cfg_combine(&cond_eps, &uncond, plan.cfg_alpha)
            };
            let eps = match plan.clip_x0 {
                Some(bound) => clip_prediction(&z, &eps, t, schedule, bound),
                None => eps,
            };
            let noise = (plan.mode == ReverseMode::Ancestral).then(|| normal_mat(rng, shape.0, shape.1));
            let spec = match guidance {
                Some((refs, lambda)) => {
                    let decay = if plan.rho_decay { t as f64 / schedule.len() as f64 } else { 1.0 };
                    GuidanceSpec { references: refs.to_vec(), weights: lambda.iter().map(|l| l * decay).collect(), mode: plan.guidance_mode, energy: plan.energy }
                }
                None => GuidanceSpec::none(),
            };
            let next = guided_step(&z, &eps, t, t_prev, schedule, &spec, plan.mode, noise.as_ref())?;
            if let Some((refs, _)) = guidance {
                let scale = schedule.alpha_bar(t_prev).sqrt();
                let total: f64 = refs.iter().map(|c| next.sub(&c.scale(scale)).sum_squares()).sum();
                trace.push(total / refs.len() as f64);
            }
            z = plan.precision.apply(next);
            if !z.is_finite() {
                return Err(Error::NonFinite(format!("{level} stage latent")));
            }
        }
        Ok(z)
    }

    /// Stages 1 and 2 without guidance, decoded with the action-level VAE.
    pub fn sample_local_action(&self, description: &str, plan: &SamplingPlan) -> Result<(MotionSequence, LatentEmbedding)> {
        if description.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        plan.validate(self.denoiser.schedule.len())?;
        let p = self.prepare(self.parse(description)?)?;
        let mut trace = Vec::new();
        let cm = Conditioning::for_level(Level::Motion, &p.updated, &p.graph, None);
        let z_m = self.run_stage(Level::Motion, &cm, plan, None, &mut stream(plan.seed, 0x51), &mut trace)?;
        let ca = Conditioning::for_level(Level::Action, &p.updated, &p.graph, Some(&z_m));
        let z_a = self.run_stage(Level::Action, &ca, plan, None, &mut stream(plan.seed, 0x52), &mut trace)?;
        let latent = LatentEmbedding { level: Level::Action, tokens: plan.precision.apply(self.denoiser.stats[1].denormalize(&z_a)) };
        let frames = plan.frames.unwrap_or((FRAMES_PER_ACTION * p.graph.num_actions()).min(self.vaes.action.config.max_frames));
        let motion = self.vaes.action.decode(&latent, frames, self.embedder_fps())?;
        Ok((motion, latent))
    }

    fn embedder_fps(&self) -> f64 {
        crate::motion::DEFAULT_FPS
    }

    /// One reference latent per parsed local action.
    pub fn default_references(&self, graph: &SemanticGraph, plan: &SamplingPlan) -> Result<(Vec<LatentEmbedding>, Vec<String>)> {
        let descriptions = graph.local_action_descriptions();
        let mut refs = Vec::with_capacity(descriptions.len());
        let mut labels = Vec::with_capacity(descriptions.len());
        for (k, d) in descriptions.iter().enumerate() {
            match plan.reference_source {
                ReferenceSource::Sampled => {
                    let sub = SamplingPlan { seed: crate::rng::stream_seed(plan.seed, 0x10CA1 + k as u64), frames: None, ..plan.clone() };
                    refs.push(self.sample_local_action(d, &sub)?.1);
                    labels.push(d.clone());
                }
                ReferenceSource::Retrieved => {
                    let r = nearest_exemplar(d, &self.exemplars, &self.embedder)?;
                    refs.push(LatentEmbedding { level: Level::Action, tokens: r.exemplar.latent.clone() });
                    labels.push(r.exemplar.description);
                }
            }
        }
        Ok((refs, labels))
    }

    /// Three-stage sampling with local-action guidance at the action stage.
    pub fn sample(&self, description: &str, plan: &SamplingPlan, refs: Option<&[LatentEmbedding]>) -> Result<SampleOutput> {
        plan.validate(self.denoiser.schedule.len())?;
        let p = self.prepare(self.parse(description)?)?;
        let mut diagnostics = p.diagnostics;
        let k = diagnostics.action_coefficients.len();
        let frames = self.default_frames(&p.graph, plan)?;

        let guided = plan.rho > 0.0;
        let mut references = Vec::new();
        if guided {
            let lambda = gat::guiding_weights(&diagnostics.action_coefficients, plan.rho, plan.weight_multipliers.as_deref())?;
            let (raw, labels) = match refs {
                Some(r) => (r.to_vec(), (0..r.len()).map(|i| format!("reference {i}")).collect()),
                None => self.default_references(&p.graph, plan)?,
            };
            if raw.len() != k {
                return Err(if raw.is_empty() { Error::MissingReferences } else { Error::InvalidArgument(format!("{} references for {k} actions", raw.len())) });
            }
            for r in &raw {
                r.expect_level(Level::Action)?;
            }
            references = raw.iter().map(|r| plan.precision.apply(self.denoiser.stats[1].normalize(&r.tokens))).collect();
            diagnostics.lambda = lambda;
            diagnostics.reference_descriptions = labels;
        } else {
            diagnostics.lambda = vec![0.0; k];
        }

        let mut trace = Vec::new();
        let cm = Conditioning::for_level(Level::Motion, &p.updated, &p.graph, None);
        let z_m = self.run_stage(Level::Motion, &cm, plan, None, &mut stream(plan.seed, 0x51), &mut trace)?;
        let ca = Conditioning::for_level(Level::Action, &p.updated, &p.graph, Some(&z_m));
        let guidance = guided.then_some((references.as_slice(), diagnostics.lambda.as_slice()));
        let z_a = self.run_stage(Level::Action, &ca, plan, guidance, &mut stream(plan.seed, 0x52), &mut trace)?;
        let cs = Conditioning::for_level(Level::Specific, &p.updated, &p.graph, Some(&z_a));
        let z_s = self.run_stage(Level::Specific, &cs, plan, None, &mut stream(plan.seed, 0x53), &mut trace)?;

        diagnostics.action_energy_trace = trace;
        diagnostics.final_action_energies = references.iter().map(|c| energy(c, &z_a)).collect::<Result<_>>()?;
        let latent = LatentEmbedding { level: Level::Specific, tokens: plan.precision.apply(self.denoiser.stats[2].denormalize(&z_s)) };
        let motion = self.vaes.specific.decode(&latent, frames, self.embedder_fps())?;
        let motion = MotionSequence { frames: plan.precision.apply(motion.frames), fps: motion.fps };
        Ok(SampleOutput { motion, latents: [z_m, z_a, z_s], diagnostics })
    }

    /// Energy of a raw action-level latent against a reference, in unit scale.
    pub fn action_energy(&self, z: &LatentEmbedding, reference: &LatentEmbedding) -> Result<f64> {
        z.expect_level(Level::Action)?;
        reference.expect_level(Level::Action)?;
        let s = &self.denoiser.stats[1];
        energy(&s.normalize(&reference.tokens), &s.normalize(&z.tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_round_trip() {
        assert_eq!(Precision::from_bits(32).unwrap(), Precision::F32);
        assert!(Precision::from_bits(16).is_err());
        assert_eq!(serde_json::to_string(&Precision::F64).unwrap(), "\"64\"");
        let m = Mat::row_vector(&[0.1]);
        assert_eq!(Precision::F32.apply(m.clone()).get(0, 0), 0.1f32 as f64);
        assert_eq!(Precision::F64.apply(m.clone()), m);
    }

    #[test]
    fn latent_stats_normalize() {
        let a = Mat::row_vector(&[1.0, 3.0]);
        let b = Mat::row_vector(&[5.0, 7.0]);
        let s = LatentStats::fit(&[&a, &b]);
        assert_eq!(s.mean, 4.0);
        let n = s.normalize(&a);
        assert!(s.denormalize(&n).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn plan_validation() {
        assert!(SamplingPlan::default().validate(1000).is_ok());
        assert!(SamplingPlan { steps: [0, 50, 50], ..Default::default() }.validate(1000).is_err());
        assert!(SamplingPlan { rho: -1.0, ..Default::default() }.validate(1000).is_err());
        let json = serde_json::to_string(&SamplingPlan::default()).unwrap();
        assert_eq!(serde_json::from_str::<SamplingPlan>(&json).unwrap(), SamplingPlan::default());
    }
}
