//! Seeded procedural corpus: composed local-action primitives, templated
//! descriptions and gold semantic graphs, plus the JSONL corpus file format.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{render_tokens, tokenize, ActionFrame, EdgeType, SemanticGraph};
use crate::motion::{extract_features, rotate_y, MotionSequence, SkeletonSpec, Vec3, DEFAULT_CONTACT_THRESHOLD, DEFAULT_FPS, ROOT_HEIGHT};
use crate::rng::stream;
use crate::tensor::Mat;

pub const CORPUS_FORMAT: &str = "actionguide-corpus";
pub const CORPUS_VERSION: u32 = 1;
const CROSSFADE_FRAMES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    WalkForward,
    WalkCircle,
    Turn,
    RaiseArms,
    Wave,
    Crouch,
    Jump,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 7] = [
        PrimitiveKind::WalkForward,
        PrimitiveKind::WalkCircle,
        PrimitiveKind::Turn,
        PrimitiveKind::RaiseArms,
        PrimitiveKind::Wave,
        PrimitiveKind::Crouch,
        PrimitiveKind::Jump,
    ];

    /// Default `(frames, amplitude)` ranges. Amplitude is walking speed in
    /// m/frame, turn angle in rad, hand height in m, wave rate in
    /// cycles/frame, crouch depth in m or jump height in m.
    fn default_ranges(self) -> ((usize, usize), (f64, f64)) {
        match self {
            PrimitiveKind::WalkForward => ((28, 40), (0.04, 0.06)),
            PrimitiveKind::WalkCircle => ((32, 40), (0.04, 0.06)),
            PrimitiveKind::Turn => ((24, 32), (1.2, 1.8)),
            PrimitiveKind::RaiseArms => ((24, 36), (1.7, 1.95)),
            PrimitiveKind::Wave => ((28, 40), (0.08, 0.14)),
            PrimitiveKind::Crouch => ((24, 36), (0.25, 0.4)),
            PrimitiveKind::Jump => ((24, 32), (0.2, 0.35)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveConfig {
    pub kind: PrimitiveKind,
    /// Inclusive frame-count range.
    pub frames: (usize, usize),
    pub amplitude: (f64, f64),
}

impl PrimitiveConfig {
    pub fn default_for(kind: PrimitiveKind) -> Self {
        let (frames, amplitude) = kind.default_ranges();
        Self { kind, frames, amplitude }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub primitives: Vec<PrimitiveConfig>,
    pub min_actions: usize,
    pub max_actions: usize,
    pub subjects: Vec<String>,
    pub connectives: Vec<String>,
    pub fps: f64,
    pub contact_threshold: f64,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            primitives: PrimitiveKind::ALL.iter().map(|&k| PrimitiveConfig::default_for(k)).collect(),
            min_actions: 1,
            max_actions: 4,
            subjects: vec!["a person".into()],
            connectives: ["and", "then", "and then", ", then"].iter().map(|s| s.to_string()).collect(),
            fps: DEFAULT_FPS,
            contact_threshold: DEFAULT_CONTACT_THRESHOLD,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::EmptyPrimitiveSet);
        }
        for p in &self.primitives {
            let (lo, hi) = p.frames;
            if lo < CROSSFADE_FRAMES + 1 || lo > hi {
                return Err(Error::InvalidParameterRange(format!("{:?} frames {lo}..={hi}", p.kind)));
            }
            let (a, b) = p.amplitude;
            if !(a.is_finite() && b.is_finite() && a > 0.0 && a <= b) {
                return Err(Error::InvalidParameterRange(format!("{:?} amplitude {a}..={b}", p.kind)));
            }
        }
        if self.min_actions == 0 || self.min_actions > self.max_actions || self.max_actions > 4 {
            return Err(Error::InvalidParameterRange(format!("actions {}..={}", self.min_actions, self.max_actions)));
        }
        if self.subjects.is_empty() || self.connectives.is_empty() {
            return Err(Error::InvalidParameterRange("subjects and connectives must be non-empty".into()));
        }
        if !(self.fps > 0.0 && self.contact_threshold > 0.0) {
            return Err(Error::InvalidParameterRange("fps and contact threshold must be positive".into()));
        }
        Ok(())
    }
}

/// Frame range `[start, end)` of one composed primitive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalAction {
    pub description: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub id: String,
    pub description: String,
    pub gold_graph: SemanticGraph,
    pub motion: MotionSequence,
    pub local_actions: Vec<LocalAction>,
}

impl CorpusEntry {
    pub fn segment(&self, k: usize) -> MotionSequence {
        let a = &self.local_actions[k];
        self.motion.slice(a.start, a.end)
    }

    pub fn segments(&self) -> impl Iterator<Item = (&str, MotionSequence)> + '_ {
        self.local_actions.iter().map(|a| (a.description.as_str(), self.motion.slice(a.start, a.end)))
    }
}

/// Deterministic train/validation split keyed on the entry id.
pub fn is_validation(id: &str, fraction: f64) -> bool {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let u = (crate::rng::stream_seed(h, 0) >> 11) as f64 / (1u64 << 53) as f64;
    u < fraction
}

pub fn generate_corpus(seed: u64, size: usize, config: &GrammarConfig) -> Result<Vec<CorpusEntry>> {
    config.validate()?;
    if size == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    (0..size).map(|i| generate_entry(seed, i, config)).collect()
}

/// One primitive instance chosen for an entry.
#[derive(Clone, Debug)]
struct Clause {
    kind: PrimitiveKind,
    frames: usize,
    amplitude: f64,
    /// Words after the verb, as `(phrase, role)`.
    phrases: Vec<(String, EdgeType)>,
    verb: &'static str,
    /// +1 left / -1 right where relevant.
    side: f64,
    speed_scale: f64,
}

fn choose_clause(p: &PrimitiveConfig, rng: &mut impl Rng) -> Clause {
    let frames = rng.random_range(p.frames.0..=p.frames.1);
    let amplitude = if p.amplitude.0 < p.amplitude.1 { rng.random_range(p.amplitude.0..=p.amplitude.1) } else { p.amplitude.0 };
    let mut c = Clause { kind: p.kind, frames, amplitude, phrases: Vec::new(), verb: "", side: 1.0, speed_scale: 1.0 };
    let ph = |s: &str, r: EdgeType| (s.to_string(), r);
    match p.kind {
        PrimitiveKind::WalkForward => {
            c.verb = "walks";
            c.phrases.push(ph("forward", EdgeType::Direction));
            match rng.random_range(0..3) {
                1 => {
                    c.phrases.push(ph("slowly", EdgeType::Manner));
                    c.speed_scale = 0.6;
                }
                2 => {
                    c.phrases.push(ph("quickly", EdgeType::Manner));
                    c.speed_scale = 1.5;
                }
                _ => {}
            }
        }
        PrimitiveKind::WalkCircle => {
            c.verb = "walks";
            match rng.random_range(0..3) {
                0 => c.side = if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                1 => {
                    c.phrases.push(ph("clockwise", EdgeType::Direction));
                    c.side = -1.0;
                }
                _ => c.phrases.push(ph("counterclockwise", EdgeType::Direction)),
            }
            c.phrases.push(ph("in a circle", EdgeType::Location));
        }
        PrimitiveKind::Turn => {
            c.verb = "turns";
            match rng.random_range(0..3) {
                0 => c.phrases.push(ph("left", EdgeType::Direction)),
                1 => {
                    c.phrases.push(ph("right", EdgeType::Direction));
                    c.side = -1.0;
                }
                _ => {
                    c.phrases.push(ph("around", EdgeType::Direction));
                    c.amplitude = PI;
                }
            }
            if rng.random_bool(0.3) {
                c.phrases.push(ph("slowly", EdgeType::Manner));
                c.amplitude *= 0.7;
            }
        }
        PrimitiveKind::RaiseArms => {
            c.verb = "raises";
            let (np, side) = *[("both arms", 0.0), ("the left arm", 1.0), ("the right arm", -1.0)].choose(rng).expect("non-empty");
            c.phrases.push(ph(np, EdgeType::Arg1));
            c.side = side;
            if rng.random_bool(0.3) {
                c.phrases.push(ph("high", EdgeType::Manner));
                c.amplitude += 0.15;
            }
        }
        PrimitiveKind::Wave => {
            c.verb = "waves";
            if rng.random_bool(0.5) {
                c.phrases.push(ph("with the right hand", EdgeType::Arg2));
                c.side = -1.0;
            } else {
                c.phrases.push(ph("with the left hand", EdgeType::Arg2));
            }
        }
        PrimitiveKind::Crouch => {
            c.verb = "crouches";
            if rng.random_bool(0.5) {
                c.phrases.push(ph("down", EdgeType::Direction));
            }
            if rng.random_bool(0.3) {
                c.phrases.push(ph("slowly", EdgeType::Manner));
                c.amplitude *= 0.8;
            }
        }
        PrimitiveKind::Jump => {
            c.verb = "jumps";
            match rng.random_range(0..3) {
                0 => c.phrases.push(ph("forward", EdgeType::Direction)),
                1 => {
                    c.phrases.push(ph("high", EdgeType::Manner));
                    c.amplitude *= 1.4;
                }
                _ => {}
            }
        }
    }
    c
}

fn generate_entry(seed: u64, index: usize, config: &GrammarConfig) -> Result<CorpusEntry> {
    let mut rng = stream(seed, index as u64);
    let count = rng.random_range(config.min_actions..=config.max_actions);
    let mut clauses: Vec<Clause> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut p = config.primitives.choose(&mut rng).expect("validated non-empty");
        if config.primitives.len() > 1 {
            while clauses.last().is_some_and(|c| c.kind == p.kind) {
                p = config.primitives.choose(&mut rng).expect("validated non-empty");
            }
        }
        clauses.push(choose_clause(p, &mut rng));
    }
    let subject = config.subjects.choose(&mut rng).expect("validated non-empty").clone();

    // Description tokens and gold role spans.
    let mut tokens = tokenize(&subject);
    let subject_span = (0, tokens.len());
    let mut frames = Vec::with_capacity(count);
    for (k, c) in clauses.iter().enumerate() {
        if k > 0 {
            tokens.extend(tokenize(config.connectives.choose(&mut rng).expect("validated non-empty")));
        }
        let verb = tokens.len();
        tokens.push(c.verb.to_string());
        let mut arguments = vec![(subject_span.0, subject_span.1, EdgeType::Arg0)];
        for (phrase, role) in &c.phrases {
            let start = tokens.len();
            tokens.extend(tokenize(phrase));
            arguments.push((start, tokens.len(), *role));
        }
        frames.push(ActionFrame { verb, arguments });
    }
    let description = render_tokens(&tokens);
    let gold_graph = SemanticGraph::assemble(tokens, frames);
    let local_descriptions = gold_graph.local_action_descriptions();

    let raw = synthesize(&clauses);
    let motion = extract_features(&raw, &SkeletonSpec::desk(), config.contact_threshold, config.fps)?;
    let mut local_actions = Vec::with_capacity(count);
    let mut start = 0;
    for (c, d) in clauses.iter().zip(local_descriptions) {
        local_actions.push(LocalAction { description: d, start, end: start + c.frames });
        start += c.frames;
    }
    Ok(CorpusEntry { id: format!("s{seed}-{index:05}"), description, gold_graph, motion, local_actions })
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Rises over the first `attack` fraction and holds.
fn envelope(u: f64, attack: f64) -> f64 {
    smoothstep(u / attack)
}

#[derive(Clone, Copy)]
enum FootMode {
    Planted,
    Gait { half: usize, lead: f64 },
    Flight { takeoff: usize, landing: usize },
}

/// Upper body in the heading frame: head, left hand, right hand, with y
/// relative to the root height.
type Upper = [Vec3; 3];

const REST_UPPER: Upper = [[0.0, 0.70, 0.02], [0.22, -0.10, 0.05], [-0.22, -0.10, 0.05]];

struct Track {
    roots: Vec<(f64, f64, f64)>,
    height: Vec<f64>,
    upper: Vec<Upper>,
    modes: Vec<(usize, usize, FootMode)>,
}

fn synthesize(clauses: &[Clause]) -> Vec<Vec<Vec3>> {
    let mut track = Track { roots: Vec::new(), height: Vec::new(), upper: Vec::new(), modes: Vec::new() };
    let (mut x, mut z, mut yaw) = (0.0, 0.0, 0.0);
    for c in clauses {
        let start = track.roots.len();
        let n = c.frames;
        let mut dyaw = vec![0.0; n];
        let mut forward = vec![0.0; n];
        let mut height = vec![ROOT_HEIGHT; n];
        let mut upper = vec![REST_UPPER; n];
        let mode;
        match c.kind {
            PrimitiveKind::WalkForward | PrimitiveKind::WalkCircle => {
                let speed = c.amplitude * c.speed_scale;
                let period = 16usize;
                for i in 0..n {
                    forward[i] = speed;
                    let phase = 2.0 * PI * i as f64 / period as f64;
                    height[i] = ROOT_HEIGHT - 0.015 * (1.0 - (2.0 * phase).cos()) / 2.0;
                    upper[i][1][2] += 0.12 * phase.sin();
                    upper[i][2][2] -= 0.12 * phase.sin();
                    if c.kind == PrimitiveKind::WalkCircle {
                        dyaw[i] = c.side * speed / 0.8;
                    }
                }
                mode = FootMode::Gait { half: period / 2, lead: speed * period as f64 / 4.0 };
            }
            PrimitiveKind::Turn => {
                for (i, d) in dyaw.iter_mut().enumerate() {
                    let u0 = i as f64 / n as f64;
                    let u1 = (i + 1) as f64 / n as f64;
                    *d = c.side * c.amplitude * (smoothstep(u1) - smoothstep(u0));
                }
                mode = FootMode::Gait { half: 6, lead: 0.0 };
            }
            PrimitiveKind::RaiseArms => {
                for (i, u) in upper.iter_mut().enumerate() {
                    let e = envelope(i as f64 / (n - 1) as f64, 0.45);
                    for (hand, side) in [(1, 1.0), (2, -1.0)] {
                        if c.side == 0.0 || c.side == side {
                            u[hand][0] = side * (0.22 - 0.04 * e);
                            u[hand][1] = -0.10 + e * (c.amplitude - ROOT_HEIGHT + 0.10);
                            u[hand][2] = 0.05 + 0.05 * e;
                        }
                    }
                }
                mode = FootMode::Planted;
            }
            PrimitiveKind::Wave => {
                let hand = if c.side > 0.0 { 1 } else { 2 };
                for (i, u) in upper.iter_mut().enumerate() {
                    let e = envelope(i as f64 / (n - 1) as f64, 0.3);
                    let osc = 0.12 * (2.0 * PI * c.amplitude * i as f64).sin() * e;
                    u[hand][0] = c.side * (0.22 + 0.13 * e) + osc;
                    u[hand][1] = -0.10 + 0.9 * e;
                    u[hand][2] = 0.05 + 0.1 * e;
                }
                mode = FootMode::Planted;
            }
            PrimitiveKind::Crouch => {
                for i in 0..n {
                    let u = i as f64 / (n - 1) as f64;
                    let e = (PI * u).sin().powi(2).max(envelope(u, 0.4) * (u < 0.6) as i32 as f64);
                    height[i] = ROOT_HEIGHT - c.amplitude * e;
                    upper[i][0][2] += 0.15 * e;
                    upper[i][1][2] += 0.2 * e;
                    upper[i][2][2] += 0.2 * e;
                }
                mode = FootMode::Planted;
            }
            PrimitiveKind::Jump => {
                let takeoff = (n as f64 * 0.35) as usize;
                let landing = (n as f64 * 0.7) as usize;
                let travel = if c.phrases.iter().any(|(p, _)| p == "forward") { 0.5 } else { 0.0 };
                for i in 0..n {
                    let u = i as f64 / n as f64;
                    let prep = 0.12 * (PI * (u / 0.35)).sin().max(0.0) * (i < takeoff) as i32 as f64;
                    let land = 0.1 * (PI * ((u - 0.7) / 0.3)).sin().max(0.0) * (i >= landing) as i32 as f64;
                    let flight = if (takeoff..landing).contains(&i) {
                        let q = (i - takeoff) as f64 / (landing - takeoff) as f64;
                        forward[i] = travel / (landing - takeoff) as f64;
                        c.amplitude * (PI * q).sin()
                    } else {
                        0.0
                    };
                    height[i] = ROOT_HEIGHT - prep - land + flight;
                    let arms = if (takeoff..landing).contains(&i) { 0.5 } else { -0.1 * (prep + land) / 0.12 };
                    upper[i][1][1] += arms;
                    upper[i][2][1] += arms;
                }
                mode = FootMode::Flight { takeoff: start + takeoff, landing: start + landing };
            }
        }
        for i in 0..n {
            track.roots.push((x, z, yaw));
            let (dx, dz) = rotate_y(yaw, 0.0, forward[i]);
            x += dx;
            z += dz;
            yaw += dyaw[i];
        }
        if start > 0 {
            let prev_h = track.height[start - 1];
            let prev_u = track.upper[start - 1];
            for i in 0..CROSSFADE_FRAMES.min(n) {
                let w = (i + 1) as f64 / (CROSSFADE_FRAMES + 1) as f64;
                height[i] = (1.0 - w) * prev_h + w * height[i];
                for (a, b) in upper[i].iter_mut().flatten().zip(prev_u.iter().flatten()) {
                    *a = (1.0 - w) * b + w * *a;
                }
            }
        }
        track.height.extend(height);
        track.upper.extend(upper);
        track.modes.push((start, start + n, mode));
    }
    assemble_positions(&track)
}

#[derive(Clone, Copy)]
struct Foot {
    x: f64,
    z: f64,
    yaw: f64,
}

fn nominal(root: (f64, f64, f64), side: f64, lead: f64) -> Foot {
    let (dx, dz) = rotate_y(root.2, 0.1 * side, 0.05 + lead);
    Foot { x: root.0 + dx, z: root.1 + dz, yaw: root.2 }
}

fn lerp_foot(a: Foot, b: Foot, w: f64) -> Foot {
    Foot { x: a.x + (b.x - a.x) * w, z: a.z + (b.z - a.z) * w, yaw: a.yaw + (b.yaw - a.yaw) * w }
}

fn assemble_positions(track: &Track) -> Vec<Vec<Vec3>> {
    let len = track.roots.len();
    // feet[side][frame] = (foot, lift); side 0 = left
    let mut feet = vec![vec![(Foot { x: 0.0, z: 0.0, yaw: 0.0 }, 0.0); len]; 2];
    let mut anchors = [nominal(track.roots[0], 1.0, 0.0), nominal(track.roots[0], -1.0, 0.0)];
    for &(s, e, mode) in &track.modes {
        match mode {
            FootMode::Planted => {
                for g in s..e {
                    feet[0][g] = (anchors[0], 0.0);
                    feet[1][g] = (anchors[1], 0.0);
                }
            }
            FootMode::Gait { half, lead } => {
                for g in s..e {
                    let i = g - s;
                    let swinging = if (i / half) % 2 == 0 { 1 } else { 0 };
                    let a = s + (i / half) * half;
                    let b = (a + half).min(e);
                    let sign = if swinging == 0 { 1.0 } else { -1.0 };
                    let target = nominal(track.roots[b - 1], sign, lead);
                    let q = (g - a + 1) as f64 / (b - a) as f64;
                    feet[swinging][g] = (lerp_foot(anchors[swinging], target, smoothstep(q)), 0.06 * (PI * q).sin());
                    let planted = 1 - swinging;
                    feet[planted][g] = (anchors[planted], 0.0);
                    if g + 1 == b {
                        anchors[swinging] = target;
                    }
                }
            }
            FootMode::Flight { takeoff, landing } => {
                let base = ROOT_HEIGHT;
                for g in s..e {
                    for (side, sign) in [(0, 1.0), (1, -1.0)] {
                        if (takeoff..landing).contains(&g) {
                            let target = nominal(track.roots[landing - 1], sign, 0.0);
                            let q = (g - takeoff + 1) as f64 / (landing - takeoff) as f64;
                            let lift = (track.height[g] - base).max(0.0);
                            feet[side][g] = (lerp_foot(anchors[side], target, smoothstep(q)), lift);
                            if g + 1 == landing {
                                anchors[side] = target;
                            }
                        } else {
                            feet[side][g] = (anchors[side], 0.0);
                        }
                    }
                }
            }
        }
    }

    (0..len)
        .map(|g| {
            let (x, z, yaw) = track.roots[g];
            let h = track.height[g];
            let mut frame = vec![[x, h, z]];
            for off in &track.upper[g] {
                let (dx, dz) = rotate_y(yaw, off[0], off[2]);
                frame.push([x + dx, h + off[1], z + dz]);
            }
            let heel_toe = |(f, lift): (Foot, f64), dz: f64, y: f64| {
                let (ox, oz) = rotate_y(f.yaw, 0.0, dz);
                [f.x + ox, y + lift, f.z + oz]
            };
            frame.push(heel_toe(feet[0][g], -0.08, 0.06));
            frame.push(heel_toe(feet[1][g], -0.08, 0.06));
            frame.push(heel_toe(feet[0][g], 0.08, 0.02));
            frame.push(heel_toe(feet[1][g], 0.08, 0.02));
            frame
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    description: String,
    gold_graph: SemanticGraph,
    fps: f64,
    frames: Vec<Vec<f64>>,
    local_actions: Vec<LocalAction>,
}

pub fn save_corpus(entries: &[CorpusEntry], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(entries, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_corpus(entries: &[CorpusEntry], w: &mut impl Write) -> Result<()> {
    serde_json::to_writer(&mut *w, &Header { format: CORPUS_FORMAT.into(), version: CORPUS_VERSION })?;
    w.write_all(b"\n")?;
    for e in entries {
        let record = Record {
            id: e.id.clone(),
            description: e.description.clone(),
            gold_graph: e.gold_graph.clone(),
            fps: e.motion.fps,
            frames: e.motion.frames.to_rows(),
            local_actions: e.local_actions.clone(),
        };
        serde_json::to_writer(&mut *w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn read_corpus(mut r: impl BufRead) -> Result<Vec<CorpusEntry>> {
    let mut offset = 0usize;
    let mut line = String::new();
    let mut entries = Vec::new();
    let mut header_seen = false;
    loop {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        let start = offset;
        offset += n;
        let text = line.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse { offset: start + e.column().saturating_sub(1), message: e.to_string() };
        if !header_seen {
            let header: Header = serde_json::from_str(text).map_err(parse_err)?;
            if header.format != CORPUS_FORMAT {
                return Err(Error::Parse { offset: start, message: format!("unknown format {:?}", header.format) });
            }
            if header.version != CORPUS_VERSION {
                return Err(Error::Version { found: header.version, expected: CORPUS_VERSION });
            }
            header_seen = true;
            continue;
        }
        let rec: Record = serde_json::from_str(text).map_err(parse_err)?;
        let rows = rec.frames.len();
        if rec.frames.iter().any(|r| r.len() != rec.frames[0].len()) {
            return Err(Error::Parse { offset: start, message: "ragged frame matrix".into() });
        }
        let frames = Mat::from_rows(&rec.frames);
        let motion = MotionSequence::new(frames, rec.fps).map_err(|e| Error::Parse { offset: start, message: e.to_string() })?;
        if rec.local_actions.iter().any(|a| a.start >= a.end || a.end > rows) {
            return Err(Error::Parse { offset: start, message: "local action segment out of range".into() });
        }
        entries.push(CorpusEntry { id: rec.id, description: rec.description, gold_graph: rec.gold_graph, motion, local_actions: rec.local_actions });
    }
    if !header_seen {
        return Err(Error::Parse { offset, message: "missing corpus header".into() });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_walk_forward_entry() {
        let config = GrammarConfig {
            primitives: vec![PrimitiveConfig::default_for(PrimitiveKind::WalkForward)],
            max_actions: 1,
            ..Default::default()
        };
        let c = generate_corpus(7, 1, &config).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c[0].description.starts_with("a person walks forward"), "{}", c[0].description);
        assert_eq!(c[0].gold_graph.num_actions(), 1);
    }

    #[test]
    fn segment_lengths_add_up() {
        let primitives = PrimitiveKind::ALL
            .iter()
            .map(|&kind| PrimitiveConfig { kind, frames: (60, 60), amplitude: kind.default_ranges().1 })
            .collect();
        let config = GrammarConfig { primitives, min_actions: 3, max_actions: 3, ..Default::default() };
        for e in generate_corpus(3, 5, &config).unwrap() {
            assert_eq!(e.motion.len(), 180);
            assert_eq!(e.local_actions.len(), 3);
            assert_eq!(e.local_actions.last().unwrap().end, 180);
        }
    }

    #[test]
    fn invalid_configs() {
        let empty = GrammarConfig { primitives: vec![], ..Default::default() };
        assert!(matches!(generate_corpus(0, 1, &empty), Err(Error::EmptyPrimitiveSet)));
        let mut bad = GrammarConfig::default();
        bad.primitives[0].amplitude = (0.5, 0.1);
        assert!(matches!(generate_corpus(0, 1, &bad), Err(Error::InvalidParameterRange(_))));
    }

    #[test]
    fn walking_has_planted_and_swinging_feet() {
        let config = GrammarConfig {
            primitives: vec![PrimitiveConfig::default_for(PrimitiveKind::WalkForward)],
            max_actions: 1,
            ..Default::default()
        };
        let e = &generate_corpus(1, 1, &config).unwrap()[0];
        let layout = e.motion.layout();
        let contacts: Vec<f64> = (0..e.motion.len()).map(|r| e.motion.frames.get(r, layout.contacts())).collect();
        assert!(contacts.contains(&0.0) && contacts.contains(&1.0));
        let rz: f64 = (0..e.motion.len() - 1).map(|r| e.motion.frames.get(r, 2)).sum();
        assert!(rz > 0.5, "forward travel {rz}");
    }

    #[test]
    fn turn_left_has_positive_root_rotation() {
        let config = GrammarConfig {
            primitives: vec![PrimitiveConfig::default_for(PrimitiveKind::Turn)],
            max_actions: 1,
            ..Default::default()
        };
        for e in generate_corpus(5, 12, &config).unwrap() {
            let total: f64 = (0..e.motion.len()).map(|r| e.motion.frames.get(r, 0)).sum();
            if e.description.contains("left") {
                assert!(total > 0.5, "{}: {total}", e.description);
            } else if e.description.contains("right") {
                assert!(total < -0.5, "{}: {total}", e.description);
            }
        }
    }
}
