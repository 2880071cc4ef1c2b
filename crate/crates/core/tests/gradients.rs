//! Analytic gradients against central finite differences (64-bit, tiny configs).

use actionguide::autodiff::{gradient_check, value_and_grad, ParamSet, Tape};
use actionguide::corpus::{generate_corpus, CorpusEntry, GrammarConfig};
use actionguide::embedding::{Embedder, EmbedderConfig, Vocabulary};
use actionguide::gat::GatLayer;
use actionguide::graph::{parse, Lexicon};
use actionguide::motion::{FeatureNorm, MotionSequence};
use actionguide::pipeline::{HierarchicalDenoiser, DenoiserConfig, LatentStats, LevelDraw, TrainingExample};
use actionguide::rng::{normal_mat, stream};
use actionguide::tensor::Mat;
use actionguide::vae::{Level, MotionVae, VaeConfig};

const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const PROBES: usize = 6;

fn assert_report(what: &str, report: &[(String, f64)]) {
    let worst = report.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    assert!(worst.1 < TOLERANCE, "{what}: {} relative error {:.3e}", worst.0, worst.1);
}

fn corpus() -> Vec<CorpusEntry> {
    generate_corpus(11, 6, &GrammarConfig::default()).unwrap()
}

#[test]
fn embedder_contrastive_loss() {
    let corpus = corpus();
    let vocab = Vocabulary::from_texts(corpus.iter().map(|e| e.description.as_str()));
    let norm = FeatureNorm::fit(corpus.iter().map(|e| &e.motion)).unwrap();
    let config = EmbedderConfig { width: 8, heads: 2, layers: 1, eval_dim: 4, motion_patch: 16, ..Default::default() };
    let emb = Embedder::new(config, vocab.clone(), norm);
    let batch: Vec<(Vec<usize>, &MotionSequence)> = corpus[..4]
        .iter()
        .map(|e| (vocab.ids(&actionguide::graph::tokenize(&e.description)), &e.motion))
        .collect();
    let loss = |ps: &ParamSet| {
        let mut e = emb.clone();
        e.params = ps.clone();
        let t = Tape::new(&e.params);
        let v = e.contrastive_loss(&t, &batch);
        t.scalar(v)
    };
    let (_, grads) = value_and_grad(&emb.params, |t| emb.contrastive_loss(t, &batch));
    assert_report("embedder", &gradient_check(&emb.params, &grads, PROBES, STEP, loss));
}

#[test]
fn vae_reconstruction_and_kl() {
    let corpus = corpus();
    let motion = corpus[0].motion.slice(0, 10);
    let norm = FeatureNorm::fit(corpus.iter().map(|e| &e.motion)).unwrap();
    let config = VaeConfig { width: 8, heads: 2, layers: 1, latent_dim: 4, ..Default::default() };
    let vae = MotionVae::new(Level::Action, config, norm).unwrap();
    let eps = normal_mat(&mut stream(2, 0), 4, 4);
    let loss = |ps: &ParamSet| {
        let mut v = vae.clone();
        v.params = ps.clone();
        let t = Tape::new(&v.params);
        let l = v.loss(&t, &motion, &eps);
        t.scalar(l.total)
    };
    let (_, grads) = value_and_grad(&vae.params, |t| vae.loss(t, &motion, &eps).total);
    assert_report("vae", &gradient_check(&vae.params, &grads, PROBES, STEP, loss));
}

#[test]
fn graph_attention_layer() {
    let graph = parse("a person walks forward slowly and then raises the left arm high", &Lexicon::default()).unwrap();
    let mut ps = ParamSet::new();
    let layer = GatLayer::new(&mut ps, "gat", 6, &mut stream(3, 0));
    let nodes = normal_mat(&mut stream(4, 0), graph.nodes.len(), 6);
    let w_nodes = normal_mat(&mut stream(5, 0), graph.nodes.len(), 6);
    let w_edges = normal_mat(&mut stream(6, 0), graph.edges.len(), 1);
    let build = |t: &Tape<'_>| {
        let (v, c) = layer.forward(t, &graph, t.constant(nodes.clone()));
        t.add(t.sum(t.mul(v, t.constant(w_nodes.clone()))), t.sum(t.mul(c, t.constant(w_edges.clone()))))
    };
    let (_, grads) = value_and_grad(&ps, build);
    let report = gradient_check(&ps, &grads, 64, STEP, |p| value_and_grad(p, build).0);
    assert_report("gat", &report);
}

fn tiny_denoiser() -> (HierarchicalDenoiser, TrainingExample, [LevelDraw; 3]) {
    let graph = parse("someone crouches down slowly, then jumps forward", &Lexicon::default()).unwrap();
    let stats = [LatentStats { mean: 0.0, std: 1.0 }; 3];
    let config = DenoiserConfig { width: 8, heads: 2, layers: 1, ..Default::default() };
    let den = HierarchicalDenoiser::new(config, 6, 4, stats).unwrap();
    let mut rng = stream(7, 0);
    let example = TrainingExample {
        nodes: normal_mat(&mut rng, graph.nodes.len(), 6),
        graph,
        latents: Level::ALL.map(|l| normal_mat(&mut rng, l.tokens(), 4)),
    };
    let draws = Level::ALL.map(|l| LevelDraw { t: 100 + 300 * l.index(), eps: normal_mat(&mut rng, l.tokens(), 4), drop: false });
    (den, example, draws)
}

fn check_denoiser_level(level: Level) {
    let (den, example, draws) = tiny_denoiser();
    let build = |t: &Tape<'_>| den.loss_terms(t, &example, &draws).unwrap()[level.index()];
    let (_, grads) = value_and_grad(&den.params, build);
    let report = gradient_check(&den.params, &grads, PROBES, STEP, |p| value_and_grad(p, build).0);
    assert_report(&format!("{level} denoiser"), &report);
}

#[test]
fn motion_denoiser() {
    check_denoiser_level(Level::Motion);
}

#[test]
fn action_denoiser() {
    check_denoiser_level(Level::Action);
}

#[test]
fn specific_denoiser() {
    check_denoiser_level(Level::Specific);
}

#[test]
fn cross_check_helper_is_not_vacuous() {
    // A deliberately wrong gradient must be flagged.
    let mut ps = ParamSet::new();
    let x = ps.add("x", Mat::row_vector(&[0.3, -1.2]));
    let build = |t: &Tape<'_>| t.sum_squares(t.param(x));
    let (_, mut grads) = value_and_grad(&ps, build);
    grads[0] = grads[0].scale(1.01);
    let report = gradient_check(&ps, &grads, 8, STEP, |p| value_and_grad(p, build).0);
    assert!(report[0].1 > TOLERANCE);
}
