//! Request handling shared by the command line and the HTTP service, so both
//! produce identical motions for identical inputs.

use actionguide::diffusion::{EnergyKind, GuidanceMode, ReverseMode};
use actionguide::gat::EdgeCoefficient;
use actionguide::graph::SemanticGraph;
use actionguide::motion::{MotionExport, SkeletonSpec};
use actionguide::pipeline::{Diagnostics, Models, Precision, ReferenceSource, SamplingPlan, DEFAULT_RHO};
use actionguide::vae::LatentEmbedding;
use actionguide::{Error, Result};
use serde::{Deserialize, Serialize};

/// Body of a generation request. Unset fields fall back to the sampling
/// plan defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateRequest {
    pub text: String,
    /// Candidate ids from `/actions/sample`, one per parsed action.
    pub selected_action_ids: Option<Vec<String>>,
    pub refs: Option<Vec<LatentEmbedding>>,
    /// One non-negative multiplier per parsed action.
    pub weight_multipliers: Option<Vec<f64>>,
    pub rho: Option<f64>,
    pub steps: Option<[usize; 3]>,
    pub seed: u64,
    pub frames: Option<usize>,
    pub cfg_alpha: Option<f64>,
    pub mode: Option<ReverseMode>,
    pub guidance_mode: Option<GuidanceMode>,
    pub energy: Option<EnergyKind>,
    pub reference_source: Option<ReferenceSource>,
    /// Run inline and return the finished job.
    pub wait: bool,
}

impl GenerateRequest {
    pub fn plan(&self, precision: Precision) -> SamplingPlan {
        let d = SamplingPlan::default();
        SamplingPlan {
            steps: self.steps.unwrap_or(d.steps),
            cfg_alpha: self.cfg_alpha.unwrap_or(d.cfg_alpha),
            clip_x0: d.clip_x0,
            rho: self.rho.unwrap_or(DEFAULT_RHO),
            rho_decay: false,
            weight_multipliers: self.weight_multipliers.clone(),
            guidance_mode: self.guidance_mode.unwrap_or(d.guidance_mode),
            energy: self.energy.unwrap_or(d.energy),
            mode: self.mode.unwrap_or(d.mode),
            reference_source: self.reference_source.unwrap_or(d.reference_source),
            frames: self.frames,
            seed: self.seed,
            precision,
        }
    }
}

/// A generated motion as features, playback positions and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionDocument {
    pub description: String,
    pub seed: u64,
    pub precision: Precision,
    pub fps: f64,
    /// Per-frame feature vectors.
    pub frames: Vec<Vec<f64>>,
    pub export: MotionExport,
    pub diagnostics: Option<Diagnostics>,
}

impl MotionDocument {
    pub fn new(description: &str, seed: u64, precision: Precision, motion: &actionguide::MotionSequence, diagnostics: Option<Diagnostics>) -> Self {
        Self {
            description: description.to_string(),
            seed,
            precision,
            fps: motion.fps,
            frames: motion.frames.to_rows(),
            export: MotionExport::from_motion(motion, &SkeletonSpec::desk()),
            diagnostics,
        }
    }
}

pub fn generate(models: &Models, request: &GenerateRequest, refs: Option<&[LatentEmbedding]>, precision: Precision) -> Result<MotionDocument> {
    if request.text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let plan = request.plan(precision);
    let out = models.sample(&request.text, &plan, refs)?;
    Ok(MotionDocument::new(&request.text, request.seed, precision, &out.motion, Some(out.diagnostics)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPreview {
    pub coefficients: Vec<EdgeCoefficient>,
    pub action_coefficients: Vec<f64>,
    pub lambda: Vec<f64>,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseResponse {
    pub graph: SemanticGraph,
    pub local_actions: Vec<String>,
    pub attention: Option<AttentionPreview>,
}

pub fn parse_text(models: Option<&Models>, text: &str, rho: f64, multipliers: Option<&[f64]>) -> Result<ParseResponse> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let (graph, attention) = match models {
        Some(m) => {
            let (graph, d) = m.attention_preview(text, rho, multipliers)?;
            (graph, Some(AttentionPreview { coefficients: d.coefficients, action_coefficients: d.action_coefficients, lambda: d.lambda, rho }))
        }
        None => (actionguide::graph::parse(text, &Default::default())?, None),
    };
    Ok(ParseResponse { local_actions: graph.local_action_descriptions(), graph, attention })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub seed: u64,
    pub latent: LatentEmbedding,
    /// Root-space joint positions for preview playback.
    pub preview: MotionExport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionCandidates {
    pub index: usize,
    pub description: String,
    pub candidates: Vec<Candidate>,
}

/// `count` candidates for every local action of `text`, with seeds
/// `seed, seed + 1, ...`. `next_id` names each candidate.
pub fn sample_actions(
    models: &Models,
    text: &str,
    count: usize,
    seed: u64,
    steps: Option<[usize; 3]>,
    precision: Precision,
    mut next_id: impl FnMut() -> String,
) -> Result<Vec<ActionCandidates>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    if count == 0 {
        return Err(Error::InvalidArgument("at least one candidate per action is required".into()));
    }
    let graph = models.parse(text)?;
    let skeleton = SkeletonSpec::desk();
    graph
        .local_action_descriptions()
        .into_iter()
        .enumerate()
        .map(|(index, description)| {
            let candidates = (0..count as u64)
                .map(|k| {
                    let plan = SamplingPlan { seed: seed + k, steps: steps.unwrap_or(SamplingPlan::default().steps), precision, ..Default::default() };
                    let (motion, latent) = models.sample_local_action(&description, &plan)?;
                    Ok(Candidate { id: next_id(), seed: seed + k, latent, preview: MotionExport::from_motion(&motion, &skeleton) })
                })
                .collect::<Result<_>>()?;
            Ok(ActionCandidates { index, description, candidates })
        })
        .collect()
}

/// Resolves `key=value` multipliers where a key is a 0-based action index
/// or an action verb; unnamed actions keep 1.
pub fn resolve_weights(graph: &SemanticGraph, pairs: &[(String, f64)]) -> Result<Vec<f64>> {
    let verbs: Vec<&str> = graph.action_nodes().map(|n| n.text.as_str()).collect();
    let mut out = vec![1.0; verbs.len()];
    for (key, value) in pairs {
        let index = match key.parse::<usize>() {
            Ok(i) if i < verbs.len() => i,
            Ok(i) => return Err(Error::InvalidArgument(format!("action index {i} out of range for {} actions", verbs.len()))),
            Err(_) => verbs.iter().position(|v| v == key).ok_or_else(|| Error::InvalidArgument(format!("no action named {key:?}")))?,
        };
        out[index] = *value;
    }
    Ok(out)
}

/// `{"error": {"code", "message"}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into() }
    }
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

#[derive(Serialize)]
pub struct ErrorEnvelope<'a> {
    pub error: &'a ErrorBody,
}
