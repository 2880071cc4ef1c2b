//! Single-layer relational graph attention over semantic graphs.
//!
//! Attention neighborhoods are incoming edges. The motion node's
//! coefficients over its action neighbors double as guiding weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{elu, leaky_relu, softmax_in_place, ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeType, GraphEdge, NodeKind, SemanticGraph};
use crate::tensor::{dot, Mat};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Plain-matrix parameters: `w` is `D × D`, `m` is `2D × 1`, `m_r` is `2D × N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    pub w: Mat,
    pub m: Mat,
    pub m_r: Mat,
}

impl GatParams {
    pub fn width(&self) -> usize {
        self.w.rows()
    }

    fn check(&self, v: &Mat) -> Result<()> {
        let d = self.width();
        if self.w.shape() != (d, d) || self.m.shape() != (2 * d, 1) || self.m_r.shape() != (2 * d, EdgeType::COUNT) {
            return Err(Error::ShapeMismatch("graph attention parameter shapes".into()));
        }
        if v.cols() != d {
            return Err(Error::ShapeMismatch(format!("node features have width {}, projection expects {d}", v.cols())));
        }
        Ok(())
    }
}

/// Coefficient of edge `from → to` within `to`'s neighborhood.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeCoefficient {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    pub coefficients: Vec<EdgeCoefficient>,
    pub updated: Mat,
}

/// `h = v Wᵀ`, one row per node.
pub fn project(params: &GatParams, v: &Mat) -> Mat {
    v.matmul_t(&params.w)
}

/// `[W v_to, W v_from]` for every edge, one row per edge.
pub fn project_pairs(params: &GatParams, v: &Mat, edges: &[GraphEdge]) -> Result<Mat> {
    params.check(v)?;
    let h = project(params, v);
    let d = params.width();
    let mut out = Mat::zeros(edges.len(), 2 * d);
    for (k, e) in edges.iter().enumerate() {
        if e.from >= v.rows() || e.to >= v.rows() {
            return Err(Error::InvalidArgument(format!("edge {} -> {} outside {} nodes", e.from, e.to, v.rows())));
        }
        let row = out.row_mut(k);
        row[..d].copy_from_slice(h.row(e.to));
        row[d..].copy_from_slice(h.row(e.from));
    }
    Ok(out)
}

/// Unnormalized scores `LeakyReLU(Mᵀh̃) + LeakyReLU(M_r[:, type]ᵀh̃)`.
pub fn edge_scores(params: &GatParams, pairs: &Mat, edges: &[GraphEdge]) -> Vec<f64> {
    let m_r_t = params.m_r.transpose();
    edges
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let h = pairs.row(k);
            leaky_relu(dot(params.m.data(), h), LEAKY_SLOPE) + leaky_relu(dot(m_r_t.row(e.edge_type.index()), h), LEAKY_SLOPE)
        })
        .collect()
}

/// Normalized attention coefficient for every edge.
pub fn attention_coefficients(params: &GatParams, pairs: &Mat, edges: &[GraphEdge]) -> Result<Vec<f64>> {
    if edges.is_empty() {
        return Err(Error::InvalidArgument("attention over an empty neighborhood".into()));
    }
    let scores = edge_scores(params, pairs, edges);
    Ok(normalize_neighborhoods(&scores, edges))
}

/// Softmax of `scores` within each target node's incoming edges.
pub fn normalize_neighborhoods(scores: &[f64], edges: &[GraphEdge]) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    let mut targets: Vec<usize> = edges.iter().map(|e| e.to).collect();
    targets.sort_unstable();
    targets.dedup();
    for target in targets {
        let idx: Vec<usize> = (0..edges.len()).filter(|&k| edges[k].to == target).collect();
        let mut vals: Vec<f64> = idx.iter().map(|&k| scores[k]).collect();
        softmax_in_place(&mut vals);
        for (&k, v) in idx.iter().zip(vals) {
            out[k] = v;
        }
    }
    out
}

/// `V_i = ELU(Σ_j ẽ_ij h_j) + v_i`; nodes without incoming edges pass through.
pub fn update_nodes(params: &GatParams, v: &Mat, coefficients: &[f64], edges: &[GraphEdge]) -> Mat {
    let h = project(params, v);
    let mut agg = Mat::zeros(v.rows(), v.cols());
    let mut has_neighbors = vec![false; v.rows()];
    for (e, &c) in edges.iter().zip(coefficients) {
        has_neighbors[e.to] = true;
        for (o, x) in agg.row_mut(e.to).iter_mut().zip(h.row(e.from)) {
            *o += c * x;
        }
    }
    Mat::from_fn(v.rows(), v.cols(), |i, c| if has_neighbors[i] { elu(agg.get(i, c)) + v.get(i, c) } else { v.get(i, c) })
}

pub fn forward(params: &GatParams, graph: &SemanticGraph, v: &Mat) -> Result<AttentionResult> {
    if v.rows() != graph.nodes.len() {
        return Err(Error::ShapeMismatch(format!("{} feature rows for {} nodes", v.rows(), graph.nodes.len())));
    }
    let pairs = project_pairs(params, v, &graph.edges)?;
    let coeffs = attention_coefficients(params, &pairs, &graph.edges)?;
    let updated = update_nodes(params, v, &coeffs, &graph.edges);
    let coefficients = graph.edges.iter().zip(&coeffs).map(|(e, &w)| EdgeCoefficient { from: e.from, to: e.to, weight: w }).collect();
    Ok(AttentionResult { coefficients, updated })
}

/// The motion node's coefficients over its action neighbors, in action order.
pub fn action_coefficients(graph: &SemanticGraph, result: &AttentionResult) -> Result<Vec<f64>> {
    let motion = graph.motion_node().ok_or_else(|| Error::InvalidArgument("graph has no motion node".into()))?.id;
    let out: Vec<f64> = graph
        .action_nodes()
        .map(|a| result.coefficients.iter().find(|c| c.from == a.id && c.to == motion).map_or(0.0, |c| c.weight))
        .collect();
    if out.is_empty() {
        return Err(Error::InvalidArgument("motion node has no action neighbors".into()));
    }
    Ok(out)
}

/// `λ_k = ρ · ẽ_k`, then scaled by optional non-negative user multipliers.
pub fn guiding_weights(coefficients: &[f64], rho: f64, multipliers: Option<&[f64]>) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("guidance strength must be positive, got {rho}")));
    }
    let mut lambda: Vec<f64> = coefficients.iter().map(|c| rho * c).collect();
    if let Some(m) = multipliers {
        if m.len() != lambda.len() {
            return Err(Error::InvalidArgument(format!("{} weight multipliers for {} actions", m.len(), lambda.len())));
        }
        if m.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument("weight multipliers must be finite and non-negative".into()));
        }
        lambda.iter_mut().zip(m).for_each(|(l, x)| *l *= x);
    }
    Ok(lambda)
}

/// Trainable layer registered in a shared parameter set.
#[derive(Clone, Copy, Debug)]
pub struct GatLayer {
    pub w: ParamId,
    pub m: ParamId,
    pub m_r: ParamId,
}

impl GatLayer {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (width as f64).sqrt();
        let mut w = crate::rng::normal_mat(rng, width, width).scale(0.5 * scale);
        for i in 0..width {
            w.set(i, i, w.get(i, i) + 0.5);
        }
        Self {
            w: ps.add(format!("{name}.w"), w),
            m: ps.add_normal(format!("{name}.m"), 2 * width, 1, scale, rng),
            m_r: ps.add_normal(format!("{name}.m_r"), 2 * width, EdgeType::COUNT, scale, rng),
        }
    }

    pub fn params(&self, ps: &ParamSet) -> GatParams {
        GatParams { w: ps.get(self.w).clone(), m: ps.get(self.m).clone(), m_r: ps.get(self.m_r).clone() }
    }

    /// Updated node features (`n × D`) and edge coefficients (`E × 1`).
    pub fn forward(&self, t: &Tape, graph: &SemanticGraph, v: Var) -> (Var, Var) {
        let n = graph.nodes.len();
        let edges = &graph.edges;
        let h = t.matmul_t(v, t.param(self.w));
        let targets: Vec<usize> = edges.iter().map(|e| e.to).collect();
        let sources: Vec<usize> = edges.iter().map(|e| e.from).collect();
        let pairs = t.concat_cols(&[t.gather_rows(h, &targets), t.gather_rows(h, &sources)]);
        let shared = t.leaky_relu(t.matmul(pairs, t.param(self.m)), LEAKY_SLOPE);
        let one_hot = Mat::from_fn(edges.len(), EdgeType::COUNT, |k, c| f64::from(edges[k].edge_type.index() == c));
        let typed = t.mul(t.matmul(pairs, t.param(self.m_r)), t.constant(one_hot));
        let typed = t.matmul(typed, t.constant(Mat::filled(EdgeType::COUNT, 1, 1.0)));
        let scores = t.add(shared, t.leaky_relu(typed, LEAKY_SLOPE));
        let coeffs = t.softmax_groups(scores, &targets);

        let width = t.shape(v).1;
        let spread = t.matmul(coeffs, t.constant(Mat::filled(1, width, 1.0)));
        let weighted = t.mul(t.gather_rows(h, &sources), spread);
        let incidence = Mat::from_fn(n, edges.len(), |i, k| f64::from(edges[k].to == i));
        let agg = t.matmul(t.constant(incidence), weighted);
        // ELU(0) = 0, so nodes without neighbors pass through unchanged.
        (t.add(t.elu(agg), v), coeffs)
    }
}

/// Node indices by level: (motion, actions, specifics).
pub fn level_indices(graph: &SemanticGraph) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let pick = |k: NodeKind| graph.nodes.iter().filter(|n| n.kind == k).map(|n| n.id).collect::<Vec<_>>();
    (pick(NodeKind::Motion), pick(NodeKind::Action), pick(NodeKind::Specific))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse, Lexicon};
    use crate::rng::{normal_mat, stream};

    fn random_params(d: usize, seed: u64) -> GatParams {
        let mut rng = stream(seed, 0);
        GatParams { w: normal_mat(&mut rng, d, d), m: normal_mat(&mut rng, 2 * d, 1), m_r: normal_mat(&mut rng, 2 * d, EdgeType::COUNT) }
    }

    #[test]
    fn identity_projection_concatenates_features() {
        let mut p = random_params(3, 1);
        p.w = Mat::identity(3);
        let v = Mat::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let e = [GraphEdge { from: 1, to: 0, edge_type: EdgeType::Arg0 }];
        let pairs = project_pairs(&p, &v, &e).unwrap();
        assert_eq!(pairs.row(0), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn single_and_symmetric_neighborhoods() {
        let p = random_params(4, 2);
        let g = parse("a person walks forward and raises both arms", &Lexicon::default()).unwrap();
        let mut v = normal_mat(&mut stream(3, 0), g.nodes.len(), 4);
        // Make both actions identical so their scores tie.
        let a1: Vec<f64> = v.row(1).to_vec();
        v.row_mut(2).copy_from_slice(&a1);
        let r = forward(&p, &g, &v).unwrap();
        let lam = action_coefficients(&g, &r).unwrap();
        assert!((lam[0] - 0.5).abs() < 1e-15 && (lam[1] - 0.5).abs() < 1e-15);
        let g1 = parse("jump", &Lexicon::default()).unwrap();
        let v1 = normal_mat(&mut stream(4, 0), 2, 4);
        assert_eq!(action_coefficients(&g1, &forward(&p, &g1, &v1).unwrap()).unwrap(), [1.0]);
    }

    #[test]
    fn guiding_weight_examples() {
        assert_eq!(guiding_weights(&[1.0], 0.01, None).unwrap(), [0.01]);
        assert_eq!(guiding_weights(&[0.5, 0.5], 0.01, None).unwrap(), [0.005, 0.005]);
        assert_eq!(guiding_weights(&[0.5, 0.5], 0.01, Some(&[2.0, 0.5])).unwrap(), [0.01, 0.0025]);
        assert!(guiding_weights(&[1.0], 0.0, None).is_err());
        assert!(guiding_weights(&[1.0], 0.01, Some(&[1.0, 1.0])).is_err());
    }

    #[test]
    fn tape_layer_matches_plain_functions() {
        let mut ps = ParamSet::new();
        let layer = GatLayer::new(&mut ps, "gat", 6, &mut stream(5, 0));
        let g = parse("someone turns left slowly, then waves with the right hand", &Lexicon::default()).unwrap();
        let v = normal_mat(&mut stream(6, 0), g.nodes.len(), 6);
        let t = Tape::new(&ps);
        let (upd, coeffs) = layer.forward(&t, &g, t.constant(v.clone()));
        let plain = forward(&layer.params(&ps), &g, &v).unwrap();
        assert!(t.value(upd).max_abs_diff(&plain.updated) < 1e-12);
        for (c, p) in t.value(coeffs).data().iter().zip(&plain.coefficients) {
            assert!((c - p.weight).abs() < 1e-12);
        }
    }
}
