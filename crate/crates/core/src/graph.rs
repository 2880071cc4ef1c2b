//! Three-level semantic graphs (motion → action → specific) and a
//! deterministic semantic-role parser for motion descriptions.
//!
//! The parser is exact on the corpus grammar and best-effort on free text:
//! verbs come from a lexicon, argument phrases are chunked by prepositions,
//! adverbs and direction words, and roles come from a preposition table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic-role edge types (closed set of twelve).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    #[serde(rename = "ARG0")]
    Arg0,
    #[serde(rename = "ARG1")]
    Arg1,
    #[serde(rename = "ARG2")]
    Arg2,
    #[serde(rename = "ARG3")]
    Arg3,
    #[serde(rename = "ARG4")]
    Arg4,
    #[serde(rename = "ARGM-LOC")]
    Location,
    #[serde(rename = "ARGM-MNR")]
    Manner,
    #[serde(rename = "ARGM-TMP")]
    Temporal,
    #[serde(rename = "ARGM-DIR")]
    Direction,
    #[serde(rename = "ARGM-ADV")]
    Adverbial,
    #[serde(rename = "ARGM-MA")]
    MotionAction,
    #[serde(rename = "OTHERS")]
    Others,
}

impl EdgeType {
    pub const ALL: [EdgeType; 12] = [
        EdgeType::Arg0,
        EdgeType::Arg1,
        EdgeType::Arg2,
        EdgeType::Arg3,
        EdgeType::Arg4,
        EdgeType::Location,
        EdgeType::Manner,
        EdgeType::Temporal,
        EdgeType::Direction,
        EdgeType::Adverbial,
        EdgeType::MotionAction,
        EdgeType::Others,
    ];
    pub const COUNT: usize = 12;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            EdgeType::Arg0 => "ARG0",
            EdgeType::Arg1 => "ARG1",
            EdgeType::Arg2 => "ARG2",
            EdgeType::Arg3 => "ARG3",
            EdgeType::Arg4 => "ARG4",
            EdgeType::Location => "ARGM-LOC",
            EdgeType::Manner => "ARGM-MNR",
            EdgeType::Temporal => "ARGM-TMP",
            EdgeType::Direction => "ARGM-DIR",
            EdgeType::Adverbial => "ARGM-ADV",
            EdgeType::MotionAction => "ARGM-MA",
            EdgeType::Others => "OTHERS",
        }
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Motion,
    Action,
    Specific,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub kind: NodeKind,
    pub text: String,
    /// Half-open token range `[start, end)`.
    pub token_span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    #[serde(rename = "type")]
    pub edge_type: EdgeType,
}

/// Node ids are positions in `nodes`: the motion node first, then actions
/// in surface order, then specifics grouped by action.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticGraph {
    pub tokens: Vec<String>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// One action and its argument phrases, used to assemble graphs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionFrame {
    pub verb: usize,
    /// `(start, end, role)` token spans.
    pub arguments: Vec<(usize, usize, EdgeType)>,
}

impl SemanticGraph {
    /// Canonical assembly shared by the parser and the corpus grammar.
    pub fn assemble(tokens: Vec<String>, mut actions: Vec<ActionFrame>) -> Self {
        let text = |s: usize, e: usize| render_tokens(&tokens[s..e]);
        let mut nodes = vec![GraphNode { id: 0, kind: NodeKind::Motion, text: render_tokens(&tokens), token_span: (0, tokens.len()) }];
        let mut edges = Vec::new();
        actions.sort_by_key(|a| a.verb);
        for (k, a) in actions.iter().enumerate() {
            nodes.push(GraphNode { id: k + 1, kind: NodeKind::Action, text: tokens[a.verb].clone(), token_span: (a.verb, a.verb + 1) });
            edges.push(GraphEdge { from: k + 1, to: 0, edge_type: EdgeType::MotionAction });
        }
        for (k, a) in actions.iter_mut().enumerate() {
            a.arguments.sort_by_key(|&(s, _, _)| s);
            for &(s, e, role) in &a.arguments {
                let id = nodes.len();
                nodes.push(GraphNode { id, kind: NodeKind::Specific, text: text(s, e), token_span: (s, e) });
                edges.push(GraphEdge { from: id, to: k + 1, edge_type: role });
            }
        }
        Self { tokens, nodes, edges }
    }

    pub fn motion_node(&self) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Motion)
    }

    pub fn action_nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Action)
    }

    pub fn specific_nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.iter().filter(|n| n.kind == NodeKind::Specific)
    }

    pub fn num_actions(&self) -> usize {
        self.action_nodes().count()
    }

    /// Incoming neighbors of `node` with the edge type.
    pub fn neighbors(&self, node: usize) -> Vec<(usize, EdgeType)> {
        self.edges.iter().filter(|e| e.to == node).map(|e| (e.from, e.edge_type)).collect()
    }

    /// Specific nodes attached to action `action` with their roles.
    pub fn specifics_of(&self, action: usize) -> Vec<(&GraphNode, EdgeType)> {
        self.edges
            .iter()
            .filter(|e| e.to == action && self.nodes.get(e.from).is_some_and(|n| n.kind == NodeKind::Specific))
            .map(|e| (&self.nodes[e.from], e.edge_type))
            .collect()
    }

    /// Every invariant violation; empty when the graph is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let motions: Vec<_> = self.nodes.iter().filter(|n| n.kind == NodeKind::Motion).collect();
        match motions.len() {
            0 => v.push("missing motion node".to_string()),
            1 => {}
            _ => v.push("multiple motion nodes".to_string()),
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                v.push(format!("node {i} has id {}", n.id));
            }
            if n.token_span.0 > n.token_span.1 || n.token_span.1 > self.tokens.len() {
                v.push(format!("node {i} span out of range"));
            }
        }
        for e in &self.edges {
            if e.from >= self.nodes.len() || e.to >= self.nodes.len() {
                v.push(format!("dangling edge {} -> {}", e.from, e.to));
            }
        }
        if self.num_actions() == 0 {
            v.push("no action nodes".to_string());
        }
        let kind = |i: usize| self.nodes.get(i).map(|n| n.kind);
        for a in self.action_nodes() {
            let to_motion = self.edges.iter().any(|e| e.from == a.id && kind(e.to) == Some(NodeKind::Motion));
            if !to_motion {
                v.push(format!("action {} has no edge to the motion node", a.id));
            }
        }
        for s in self.specific_nodes() {
            let targets = self.edges.iter().filter(|e| e.from == s.id && kind(e.to) == Some(NodeKind::Action)).count();
            match targets {
                0 => v.push(format!("orphan specific {}", s.id)),
                1 => {}
                _ => v.push(format!("specific {} attached to multiple actions", s.id)),
            }
        }
        v
    }

    /// One description per action: ARG0 phrase (default "a person"), then the
    /// verb and its other specifics in original word order.
    pub fn local_action_descriptions(&self) -> Vec<String> {
        self.action_nodes()
            .map(|a| {
                let specifics = self.specifics_of(a.id);
                let subject = specifics.iter().find(|(_, r)| *r == EdgeType::Arg0).map(|(n, _)| n.text.clone());
                let mut pieces: Vec<(usize, String)> = vec![(a.token_span.0, a.text.clone())];
                for (n, r) in &specifics {
                    if *r != EdgeType::Arg0 {
                        pieces.push((n.token_span.0, n.text.clone()));
                    }
                }
                pieces.sort_by_key(|(s, _)| *s);
                let mut words = vec![subject.unwrap_or_else(|| "a person".to_string())];
                words.extend(pieces.into_iter().map(|(_, t)| t));
                words.join(" ")
            })
            .collect()
    }
}

fn is_punct(t: &str) -> bool {
    matches!(t, "," | "." | ";" | "!" | "?" | ":")
}

/// Joins tokens with single spaces, attaching punctuation to the previous word.
pub fn render_tokens(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        if !out.is_empty() && !is_punct(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Lowercasing word/punctuation tokenizer.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if is_punct(ch.encode_utf8(&mut [0; 4])) {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Word lists driving the parser. Immutable once built.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lexicon {
    /// Surface form → lemma.
    pub verbs: BTreeMap<String, String>,
    pub prepositions: BTreeMap<String, EdgeType>,
    pub directions: BTreeSet<String>,
    pub manner_adverbs: BTreeSet<String>,
    pub temporal_adverbs: BTreeSet<String>,
    pub connectives: BTreeSet<String>,
    pub determiners: BTreeSet<String>,
    pub subject_words: BTreeSet<String>,
}

fn set(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|s| s.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        let lemmas = [
            "walk", "run", "jog", "turn", "raise", "lift", "wave", "crouch", "squat", "jump", "hop", "kick", "punch", "step", "spin",
            "bend", "sit", "stand", "look", "throw", "climb", "dance", "stumble", "stretch", "lower", "swing", "shake", "clap",
            "march", "skip", "lean", "reach", "rotate", "pick", "move", "kneel", "crawl", "sprint", "stroll", "pace",
        ];
        let mut verbs = BTreeMap::new();
        for lemma in lemmas {
            for form in verb_forms(lemma) {
                verbs.insert(form, lemma.to_string());
            }
        }
        let mut prepositions = BTreeMap::new();
        for p in ["towards", "toward", "to", "into", "onto"] {
            prepositions.insert(p.to_string(), EdgeType::Arg4);
        }
        prepositions.insert("from".into(), EdgeType::Arg3);
        for p in ["in", "on", "around", "at", "inside", "near", "across", "along", "over", "through", "behind", "under"] {
            prepositions.insert(p.to_string(), EdgeType::Location);
        }
        for p in ["with", "using"] {
            prepositions.insert(p.to_string(), EdgeType::Arg2);
        }
        for p in ["for", "during", "until", "after", "before"] {
            prepositions.insert(p.to_string(), EdgeType::Temporal);
        }
        Self {
            verbs,
            prepositions,
            directions: set(&[
                "forward", "forwards", "backward", "backwards", "back", "left", "right", "up", "down", "around", "sideways", "clockwise",
                "counterclockwise", "away", "upward", "downward",
            ]),
            manner_adverbs: set(&["slowly", "quickly", "fast", "high", "carefully", "gently", "briskly", "happily", "steadily", "rapidly", "low"]),
            temporal_adverbs: set(&["twice", "again", "once", "repeatedly", "briefly"]),
            connectives: set(&["and", "then", "while", "also", "finally", "first", "afterwards", "next", ",", ".", ";", "!", "?", ":"]),
            determiners: set(&["a", "an", "the", "both", "his", "her", "their", "its", "one", "each", "this", "that"]),
            subject_words: set(&["a", "an", "the", "he", "she", "they", "someone", "somebody", "person", "man", "woman", "figure", "human"]),
        }
    }
}

fn verb_forms(lemma: &str) -> Vec<String> {
    let third = if lemma.ends_with("ch") || lemma.ends_with("sh") || lemma.ends_with('s') {
        format!("{lemma}es")
    } else {
        format!("{lemma}s")
    };
    let stem = if lemma.ends_with('e') && lemma != "see" { lemma[..lemma.len() - 1].to_string() } else { lemma.to_string() };
    let doubled = matches!(lemma, "run" | "jog" | "hop" | "step" | "skip" | "spin" | "sit" | "swing" | "clap");
    let ing = if doubled && !lemma.ends_with("ng") {
        format!("{lemma}{}ing", &lemma[lemma.len() - 1..])
    } else {
        format!("{stem}ing")
    };
    vec![lemma.to_string(), third, ing]
}

impl Lexicon {
    fn is_connective(&self, t: &str) -> bool {
        self.connectives.contains(t)
    }

    fn is_sentence_end(t: &str) -> bool {
        matches!(t, "." | "!" | "?" | ";")
    }

    fn is_manner(&self, t: &str) -> bool {
        self.manner_adverbs.contains(t) || (t.len() > 4 && t.ends_with("ly") && !matches!(t, "only" | "family" | "belly"))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum ChunkKind {
    Noun,
    Prepositional,
    Single,
}

/// Parses a description into a semantic graph.
pub fn parse(description: &str, lexicon: &Lexicon) -> Result<SemanticGraph> {
    let tokens = tokenize(description);
    if tokens.iter().all(|t| is_punct(t)) {
        return Err(Error::EmptyText);
    }
    let verbs: Vec<usize> = (0..tokens.len())
        .filter(|&i| lexicon.verbs.contains_key(&tokens[i]) && !(i > 0 && lexicon.determiners.contains(&tokens[i - 1])))
        .collect();
    if verbs.is_empty() {
        return Err(Error::NoActionFound(description.to_string()));
    }

    let mut frames: Vec<ActionFrame> = verbs.iter().map(|&v| ActionFrame { verb: v, arguments: Vec::new() }).collect();
    let mut subject: Option<(usize, usize)> = None;

    for k in 0..verbs.len() {
        let lo = if k == 0 { 0 } else { verbs[k - 1] + 1 };
        let hi = verbs[k];
        // Split the gap into: trailing arguments of the previous verb,
        // a connective run, and a pre-verbal run for this verb.
        let mut pre_start = hi;
        while pre_start > lo && !lexicon.is_connective(&tokens[pre_start - 1]) {
            pre_start -= 1;
        }
        let mut conn_start = pre_start;
        while conn_start > lo && lexicon.is_connective(&tokens[conn_start - 1]) {
            conn_start -= 1;
        }
        let has_connective = conn_start < pre_start;
        let (prev_args, pre) = if k == 0 {
            ((lo, lo), (pre_start, hi))
        } else if has_connective {
            ((lo, conn_start), (pre_start, hi))
        } else {
            ((lo, hi), (hi, hi))
        };
        if k > 0 {
            frames[k - 1].arguments.extend(chunk_arguments(&tokens, prev_args.0, prev_args.1, lexicon, false));
            if tokens[conn_start..pre_start].iter().any(|t| Lexicon::is_sentence_end(t)) {
                subject = None;
            }
        }
        if pre.0 < pre.1 {
            if lexicon.subject_words.contains(&tokens[pre.0]) && !tokens[pre.0..pre.1].iter().any(|t| lexicon.is_manner(t)) {
                subject = Some(pre);
            } else {
                frames[k].arguments.extend(chunk_arguments(&tokens, pre.0, pre.1, lexicon, true));
            }
        }
        if let Some((s, e)) = subject {
            frames[k].arguments.push((s, e, EdgeType::Arg0));
        }
    }
    let last = *verbs.last().expect("at least one verb");
    let mut end = tokens.len();
    while end > last + 1 && is_punct(&tokens[end - 1]) {
        end -= 1;
    }
    let tail = chunk_arguments(&tokens, last + 1, end, lexicon, false);
    frames.last_mut().expect("at least one frame").arguments.extend(tail);

    Ok(SemanticGraph::assemble(tokens, frames))
}

/// Splits `tokens[lo..hi]` into role-labelled phrases.
fn chunk_arguments(tokens: &[String], lo: usize, hi: usize, lexicon: &Lexicon, pre_verbal: bool) -> Vec<(usize, usize, EdgeType)> {
    let mut out: Vec<(usize, usize, EdgeType)> = Vec::new();
    let mut current: Option<(usize, usize, EdgeType, ChunkKind)> = None;
    let mut seen_object = false;

    let close = |cur: &mut Option<(usize, usize, EdgeType, ChunkKind)>, out: &mut Vec<(usize, usize, EdgeType)>| {
        if let Some((s, mut e, role, _)) = cur.take() {
            while e > s && lexicon.is_connective(&tokens[e - 1]) {
                e -= 1;
            }
            if e > s {
                out.push((s, e, role));
            }
        }
    };

    let mut i = lo;
    while i < hi {
        let t = tokens[i].as_str();
        let next = tokens.get(i + 1).filter(|_| i + 1 < hi).map(String::as_str);
        let takes_object = next.is_some_and(|n| {
            !lexicon.is_manner(n)
                && !lexicon.temporal_adverbs.contains(n)
                && !lexicon.prepositions.contains_key(n)
                && !lexicon.is_connective(n)
                && !(lexicon.directions.contains(n) && !lexicon.determiners.contains(n))
                || lexicon.determiners.contains(n)
        });
        let in_phrase = matches!(current, Some((_, _, _, ChunkKind::Noun | ChunkKind::Prepositional)));

        if lexicon.prepositions.contains_key(t) && (takes_object || !lexicon.directions.contains(t)) {
            close(&mut current, &mut out);
            current = Some((i, i + 1, lexicon.prepositions[t], ChunkKind::Prepositional));
        } else if lexicon.is_manner(t) {
            close(&mut current, &mut out);
            out.push((i, i + 1, EdgeType::Manner));
        } else if lexicon.temporal_adverbs.contains(t) {
            close(&mut current, &mut out);
            out.push((i, i + 1, EdgeType::Temporal));
        } else if lexicon.directions.contains(t) && !in_phrase {
            close(&mut current, &mut out);
            out.push((i, i + 1, EdgeType::Direction));
        } else if lexicon.is_connective(t) && !in_phrase {
            // stray connective between phrases
        } else if let Some(cur) = current.as_mut().filter(|c| c.3 != ChunkKind::Single) {
            cur.1 = i + 1;
        } else {
            close(&mut current, &mut out);
            let role = if pre_verbal {
                EdgeType::Others
            } else if !seen_object {
                seen_object = true;
                EdgeType::Arg1
            } else {
                EdgeType::Others
            };
            current = Some((i, i + 1, role, ChunkKind::Noun));
        }
        i += 1;
    }
    close(&mut current, &mut out);
    out
}
