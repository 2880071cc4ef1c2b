//! Transformer VAEs that compress a motion into a `Q × D′` latent token grid.
//!
//! The encoder prepends `Q` learnable query tokens to patched frames; the
//! decoder cross-attends patch-position queries to the latent tokens.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Var};
use crate::corpus::CorpusEntry;
use crate::embedding::{patchify, positional_table};
use crate::error::{Error, Result};
use crate::motion::{FeatureNorm, MotionSequence};
use crate::nn::{AdamW, AdamWConfig, Linear, TransformerStack};
use crate::rng::{normal_mat, stream};
use crate::tensor::Mat;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Motion,
    Action,
    Specific,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Motion, Level::Action, Level::Specific];

    pub fn tokens(self) -> usize {
        match self {
            Level::Motion => 2,
            Level::Action => 4,
            Level::Specific => 8,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Motion => "motion",
            Level::Action => "action",
            Level::Specific => "specific",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch: usize,
    pub max_frames: usize,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Also train on every local-action segment, not only whole motions.
    pub include_segments: bool,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            width: 32,
            layers: 2,
            heads: 4,
            patch: 4,
            max_frames: 240,
            kl_weight: 1e-4,
            epochs: 25,
            batch_size: 16,
            learning_rate: 2e-3,
            include_segments: true,
            seed: 1,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.width == 0 || self.patch == 0 || self.max_frames == 0 {
            return Err(Error::InvalidArgument("vae dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!("vae width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// Latent tokens tagged with their level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub level: Level,
    pub tokens: Mat,
}

impl LatentEmbedding {
    pub fn expect_level(&self, level: Level) -> Result<()> {
        if self.level != level {
            return Err(Error::LevelMismatch { expected: level.to_string(), got: self.level.to_string() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub level: Level,
    pub mean: Mat,
    pub logvar: Mat,
}

impl Posterior {
    pub fn mean_latent(&self) -> LatentEmbedding {
        LatentEmbedding { level: self.level, tokens: self.mean.clone() }
    }
}

/// `mean + exp(logvar / 2) ⊙ ε` with `ε` drawn from `stream(seed, 0)`.
pub fn sample_latent(posterior: &Posterior, seed: u64) -> Result<LatentEmbedding> {
    sample_latent_with(posterior, &mut stream(seed, 0))
}

pub fn sample_latent_with(posterior: &Posterior, rng: &mut impl Rng) -> Result<LatentEmbedding> {
    if !posterior.mean.is_finite() || !posterior.logvar.is_finite() {
        return Err(Error::NonFinite("posterior".into()));
    }
    let (q, d) = posterior.mean.shape();
    let eps = normal_mat(rng, q, d);
    let tokens = Mat::from_fn(q, d, |i, j| {
        let lv = posterior.logvar.get(i, j).clamp(LOGVAR_MIN, LOGVAR_MAX);
        posterior.mean.get(i, j) + (0.5 * lv).exp() * eps.get(i, j)
    });
    Ok(LatentEmbedding { level: posterior.level, tokens })
}

#[derive(Clone, Debug)]
struct Handles {
    queries: ParamId,
    input: Linear,
    encoder: TransformerStack,
    posterior: Linear,
    latent_in: Linear,
    position_in: Linear,
    decoder: TransformerStack,
    output: Linear,
}

impl Handles {
    fn build(ps: &mut ParamSet, c: &VaeConfig, level: Level, features: usize, rng: &mut impl Rng) -> Self {
        let w = c.width;
        Self {
            queries: ps.add_normal("enc.queries", level.tokens(), w, 0.5, rng),
            input: Linear::new(ps, "enc.input", features * c.patch, w, rng),
            encoder: TransformerStack::new(ps, "enc.layers", w, c.heads, c.layers, false, rng),
            posterior: Linear::new_scaled(ps, "enc.posterior", w, 2 * c.latent_dim, 0.5, rng),
            latent_in: Linear::new(ps, "dec.latent_in", c.latent_dim, w, rng),
            position_in: Linear::new(ps, "dec.position_in", w, w, rng),
            decoder: TransformerStack::new(ps, "dec.layers", w, c.heads, c.layers, true, rng),
            output: Linear::new_scaled(ps, "dec.output", w, features * c.patch, 0.5, rng),
        }
    }
}

/// Per-sample loss terms.
pub struct VaeLoss {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub struct MotionVae {
    pub level: Level,
    pub config: VaeConfig,
    pub norm: FeatureNorm,
    pub params: ParamSet,
    handles: Handles,
}

impl MotionVae {
    pub fn new(level: Level, config: VaeConfig, norm: FeatureNorm) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, 0xAE0 + level.index() as u64);
        let mut params = ParamSet::new();
        let handles = Handles::build(&mut params, &config, level, norm.mean.len(), &mut rng);
        Ok(Self { level, config, norm, params, handles })
    }

    pub fn from_parts(level: Level, config: VaeConfig, norm: FeatureNorm, params: ParamSet) -> Result<Self> {
        let fresh = Self::new(level, config, norm)?;
        crate::nn::check_compatible(&fresh.params, &params)?;
        Ok(Self { params, ..fresh })
    }

    pub fn tokens(&self) -> usize {
        self.level.tokens()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.norm.mean.len()
    }

    fn check_motion(&self, motion: &MotionSequence) -> Result<()> {
        if motion.is_empty() {
            return Err(Error::TooFewFrames { needed: 1, got: 0 });
        }
        if motion.len() > self.config.max_frames {
            return Err(Error::MotionTooLong { got: motion.len(), max: self.config.max_frames });
        }
        if motion.frames.cols() != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!("motion has {} features, vae expects {}", motion.frames.cols(), self.feature_dim())));
        }
        if !motion.frames.is_finite() {
            return Err(Error::NonFinite("motion".into()));
        }
        Ok(())
    }

    /// `(mean, clamped logvar)`, each `Q × D′`.
    fn encode_var(&self, t: &Tape, normalized: &Mat) -> (Var, Var) {
        let h = &self.handles;
        let patches = patchify(normalized, self.config.patch);
        let x = h.input.forward(t, t.constant(patches));
        let q = self.tokens();
        let n = t.shape(x).0;
        let seq = t.concat_rows(&[t.param(h.queries), x]);
        let seq = t.add(seq, t.constant(positional_table(q + n, self.config.width, 0.1)));
        let out = h.encoder.forward(t, seq, None);
        let stats = h.posterior.forward(t, t.slice_rows(out, 0, q));
        let d = self.latent_dim();
        (t.slice_cols(stats, 0, d), t.clamp(t.slice_cols(stats, d, d), LOGVAR_MIN, LOGVAR_MAX))
    }

    /// Normalized `length × F` reconstruction.
    fn decode_var(&self, t: &Tape, z: Var, length: usize) -> Var {
        let h = &self.handles;
        let p = self.config.patch;
        let patches = length.div_ceil(p);
        let memory = h.latent_in.forward(t, z);
        let queries = h.position_in.forward(t, t.constant(positional_table(patches, self.config.width, 1.0)));
        let out = h.decoder.forward(t, queries, Some(memory));
        let y = h.output.forward(t, out);
        let frames = t.reshape(y, patches * p, self.feature_dim());
        t.slice_rows(frames, 0, length)
    }

    pub fn encode(&self, motion: &MotionSequence) -> Result<Posterior> {
        self.check_motion(motion)?;
        let t = Tape::new(&self.params);
        let (mean, logvar) = self.encode_var(&t, &self.norm.normalize(&motion.frames));
        let post = Posterior { level: self.level, mean: t.value(mean), logvar: t.value(logvar) };
        if !post.mean.is_finite() || !post.logvar.is_finite() {
            return Err(Error::NonFinite("posterior".into()));
        }
        Ok(post)
    }

    /// Decoded features with contacts snapped and rotations re-orthonormalized.
    pub fn decode(&self, z: &LatentEmbedding, length: usize, fps: f64) -> Result<MotionSequence> {
        let frames = self.decode_features(z, length)?;
        Ok(MotionSequence { frames, fps }.sanitize())
    }

    /// Raw decoder output in feature units.
    pub fn decode_features(&self, z: &LatentEmbedding, length: usize) -> Result<Mat> {
        z.expect_level(self.level)?;
        if z.tokens.shape() != (self.tokens(), self.latent_dim()) {
            return Err(Error::ShapeMismatch(format!("latent {:?}, vae expects {:?}", z.tokens.shape(), (self.tokens(), self.latent_dim()))));
        }
        if length == 0 || length > self.config.max_frames {
            return Err(Error::InvalidArgument(format!("decode length {length} outside 1..={}", self.config.max_frames)));
        }
        let t = Tape::new(&self.params);
        let y = self.decode_var(&t, t.constant(z.tokens.clone()), length);
        let frames = self.norm.denormalize(&t.value(y));
        if !frames.is_finite() {
            return Err(Error::NonFinite("decoded motion".into()));
        }
        Ok(frames)
    }

    /// Reconstruction (mean smooth-L1 on normalized features) plus weighted
    /// KL (mean over latent entries), with the reparameterization noise given.
    pub fn loss(&self, t: &Tape, motion: &MotionSequence, eps: &Mat) -> VaeLoss {
        let target = self.norm.normalize(&motion.frames);
        let (mean, logvar) = self.encode_var(t, &target);
        let z = t.add(mean, t.mul(t.exp(t.scale(logvar, 0.5)), t.constant(eps.clone())));
        let recon = self.decode_var(t, z, motion.len());
        let reconstruction = t.mean(t.smooth_l1(t.sub(recon, t.constant(target)), SMOOTH_L1_BETA));
        // KL(N(μ, σ²) ‖ N(0, 1)) per entry = ½(μ² + σ² − 1 − log σ²).
        let ones = t.constant(Mat::filled(self.tokens(), self.latent_dim(), 1.0));
        let kl_terms = t.sub(t.add(t.mul(mean, mean), t.exp(logvar)), t.add(ones, logvar));
        let kl = t.scale(t.mean(kl_terms), 0.5);
        let total = t.add(reconstruction, t.scale(kl, self.config.kl_weight));
        VaeLoss { total, reconstruction, kl }
    }

    /// Mean squared error of the posterior-mean reconstruction in normalized units.
    pub fn reconstruction_error(&self, motion: &MotionSequence) -> Result<f64> {
        let post = self.encode(motion)?;
        let recon = self.decode_features(&post.mean_latent(), motion.len())?;
        let a = self.norm.normalize(&recon);
        let b = self.norm.normalize(&motion.frames);
        Ok(a.sub(&b).sum_squares() / a.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeReport {
    pub level: Level,
    pub epoch_losses: Vec<f64>,
    pub epoch_kl: Vec<f64>,
    pub final_reconstruction: f64,
}

/// Whole motions and, optionally, their local-action segments.
pub fn training_motions(corpus: &[CorpusEntry], include_segments: bool, max_frames: usize) -> Vec<MotionSequence> {
    let mut out = Vec::new();
    for e in corpus {
        if e.motion.len() <= max_frames {
            out.push(e.motion.clone());
        }
        if include_segments && e.local_actions.len() > 1 {
            out.extend(e.segments().map(|(_, s)| s).filter(|s| !s.is_empty() && s.len() <= max_frames));
        }
    }
    out
}

pub fn train_vae(corpus: &[CorpusEntry], level: Level, config: &VaeConfig) -> Result<(MotionVae, VaeReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let motions = training_motions(corpus, config.include_segments, config.max_frames);
    if motions.is_empty() {
        return Err(Error::MotionTooLong { got: corpus[0].motion.len(), max: config.max_frames });
    }
    let norm = FeatureNorm::fit(&motions)?;
    let mut vae = MotionVae::new(level, config.clone(), norm)?;
    let mut opt = AdamW::new(&vae.params, AdamWConfig { lr: config.learning_rate, ..Default::default() });
    let mut order: Vec<usize> = (0..motions.len()).collect();
    let (q, d) = (level.tokens(), config.latent_dim);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_kl = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = stream(config.seed, 0x7AE_0000 + (level.index() as u64) * 100_000 + epoch as u64);
        order.shuffle(&mut rng);
        let (mut total, mut kl_total) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let t = Tape::new(&vae.params);
            let mut losses = Vec::with_capacity(chunk.len());
            let mut kls = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let eps = normal_mat(&mut rng, q, d);
                let l = vae.loss(&t, &motions[i], &eps);
                losses.push(l.total);
                kls.push(l.kl);
            }
            let loss = t.scale(t.sum(t.concat_rows(&losses)), 1.0 / chunk.len() as f64);
            let value = t.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence(format!("{level} vae loss {value} at epoch {epoch}")));
            }
            kl_total += kls.iter().map(|&k| t.scalar(k)).sum::<f64>();
            total += value * chunk.len() as f64;
            let grads = t.backward(loss).into_param_grads();
            opt.step(&mut vae.params, &grads);
        }
        epoch_losses.push(total / motions.len() as f64);
        epoch_kl.push(kl_total / motions.len() as f64);
    }
    let whole: Vec<&MotionSequence> = corpus.iter().map(|e| &e.motion).filter(|m| m.len() <= config.max_frames).collect();
    let errors = whole.iter().map(|m| vae.reconstruction_error(m)).collect::<Result<Vec<_>>>()?;
    let final_reconstruction = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    Ok((vae, VaeReport { level, epoch_losses, epoch_kl, final_reconstruction }))
}

/// The three level VAEs.
#[derive(Clone, Debug)]
pub struct VaeSet {
    pub motion: MotionVae,
    pub action: MotionVae,
    pub specific: MotionVae,
}

impl VaeSet {
    pub fn get(&self, level: Level) -> &MotionVae {
        match level {
            Level::Motion => &self.motion,
            Level::Action => &self.action,
            Level::Specific => &self.specific,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.motion.latent_dim()
    }

    pub fn validate(&self) -> Result<()> {
        for level in Level::ALL {
            let vae = self.get(level);
            if vae.level != level {
                return Err(Error::LevelMismatch { expected: level.to_string(), got: vae.level.to_string() });
            }
            if vae.latent_dim() != self.latent_dim() {
                return Err(Error::ShapeMismatch("vae levels disagree on latent width".into()));
            }
        }
        Ok(())
    }
}

pub fn train_vae_set(corpus: &[CorpusEntry], config: &VaeConfig) -> Result<(VaeSet, [VaeReport; 3])> {
    let (motion, rm) = train_vae(corpus, Level::Motion, config)?;
    let (action, ra) = train_vae(corpus, Level::Action, config)?;
    let (specific, rs) = train_vae(corpus, Level::Specific, config)?;
    Ok((VaeSet { motion, action, specific }, [rm, ra, rs]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GrammarConfig};

    fn tiny(level: Level) -> (Vec<CorpusEntry>, MotionVae) {
        let corpus = generate_corpus(5, 4, &GrammarConfig::default()).unwrap();
        let norm = FeatureNorm::fit(corpus.iter().map(|e| &e.motion)).unwrap();
        let config = VaeConfig { width: 8, heads: 2, layers: 1, latent_dim: 4, ..Default::default() };
        (corpus, MotionVae::new(level, config, norm).unwrap())
    }

    #[test]
    fn shapes_and_determinism() {
        let (corpus, vae) = tiny(Level::Motion);
        let post = vae.encode(&corpus[0].motion).unwrap();
        assert_eq!(post.mean.shape(), (2, 4));
        assert_eq!(post, vae.encode(&corpus[0].motion).unwrap());
        let z = post.mean_latent();
        let one = vae.decode(&z, 1, 20.0).unwrap();
        assert_eq!(one.frames.shape(), (1, 104));
        assert_eq!(vae.decode(&z, 37, 20.0).unwrap(), vae.decode(&z, 37, 20.0).unwrap());
        assert_eq!(vae.decode(&z, 37, 20.0).unwrap().len(), 37);
    }

    #[test]
    fn errors() {
        let (corpus, vae) = tiny(Level::Action);
        let long = MotionSequence::new(Mat::zeros(241, 104), 20.0).unwrap();
        assert!(matches!(vae.encode(&long), Err(Error::MotionTooLong { got: 241, max: 240 })));
        let z = LatentEmbedding { level: Level::Motion, tokens: Mat::zeros(2, 4) };
        assert!(matches!(vae.decode(&z, 10, 20.0), Err(Error::LevelMismatch { .. })));
        let z = vae.encode(&corpus[0].motion).unwrap().mean_latent();
        assert!(vae.decode(&z, 0, 20.0).is_err());
    }

    #[test]
    fn degenerate_variance_sample_is_the_mean() {
        let mean = Mat::from_fn(2, 3, |i, j| i as f64 - j as f64 * 0.3);
        let post = Posterior { level: Level::Motion, mean: mean.clone(), logvar: Mat::filled(2, 3, -1e9) };
        let z = sample_latent(&post, 4).unwrap();
        assert!(z.tokens.max_abs_diff(&mean) < 1e-6);
        assert_eq!(sample_latent(&post, 4).unwrap(), z);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = generate_corpus(5, 3, &GrammarConfig::default()).unwrap();
        let config = VaeConfig { width: 8, heads: 2, layers: 1, latent_dim: 4, epochs: 0, ..Default::default() };
        let (vae, report) = train_vae(&corpus, Level::Specific, &config).unwrap();
        let fresh = MotionVae::new(Level::Specific, config, vae.norm.clone()).unwrap();
        assert_eq!(vae.params.values(), fresh.params.values());
        assert!(report.epoch_losses.is_empty());
    }
}
