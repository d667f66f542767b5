//! Token vocabulary, the reflective trajectory grammar, and parsing.
//!
//! A well-formed trajectory is
//!
//! ```text
//! <CAUSAL> chain <VERIFY> chain ANSWER DIAG(m) <EOS>
//! chain = BOX(r,c,h,w) SEP PATH(k) SEP DIAG(m)
//! ```
//!
//! Parsing is total: malformed token lists produce a [`Trajectory`] with
//! `well_formed = false` and a best-effort segmentation.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scm::{CausalWorld, Step};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Causal,
    Verify,
    Eos,
    Sep,
    Answer,
    Box(BBox),
    Path(usize),
    Diag(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Causal,
    Verify,
    Eos,
    Sep,
    Answer,
    Box,
    Path,
    Diag,
}

impl TokenKind {
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_structural(self) -> bool {
        matches!(
            self,
            TokenKind::Causal | TokenKind::Verify | TokenKind::Eos | TokenKind::Answer
        )
    }
}

impl Token {
    pub fn kind(&self) -> TokenKind {
        match self {
            Token::Causal => TokenKind::Causal,
            Token::Verify => TokenKind::Verify,
            Token::Eos => TokenKind::Eos,
            Token::Sep => TokenKind::Sep,
            Token::Answer => TokenKind::Answer,
            Token::Box(_) => TokenKind::Box,
            Token::Path(_) => TokenKind::Path,
            Token::Diag(_) => TokenKind::Diag,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Causal => f.write_str("<CAUSAL>"),
            Token::Verify => f.write_str("<VERIFY>"),
            Token::Eos => f.write_str("<EOS>"),
            Token::Sep => f.write_str("SEP"),
            Token::Answer => f.write_str("ANSWER"),
            Token::Box(b) => write!(
                f,
                "BOX({},{},{},{})",
                b.y_min,
                b.x_min,
                b.height(),
                b.width()
            ),
            Token::Path(k) => write!(f, "PATH({k})"),
            Token::Diag(m) => write!(f, "DIAG({m})"),
        }
    }
}

const N_STRUCTURAL: u32 = 5;

/// Dense token ids: five structural tokens, then boxes, pathologies, diagnoses.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    boxes: Vec<BBox>,
    box_index: HashMap<BBox, TokenId>,
    n_path: usize,
    n_diag: usize,
}

impl Vocabulary {
    pub const CAUSAL: TokenId = 0;
    pub const VERIFY: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const SEP: TokenId = 3;
    pub const ANSWER: TokenId = 4;

    /// Boxes of every height and width in `side_min..=side_max` that fit the grid.
    pub fn new(world: &CausalWorld, side_min: usize, side_max: usize) -> Self {
        let mut boxes = Vec::new();
        for h in side_min.max(1)..=side_max.min(world.grid_h) {
            for w in side_min.max(1)..=side_max.min(world.grid_w) {
                for row in 0..=(world.grid_h - h) {
                    for col in 0..=(world.grid_w - w) {
                        boxes.push(BBox::from_rchw(row as i32, col as i32, h as i32, w as i32));
                    }
                }
            }
        }
        let box_index = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| (*b, N_STRUCTURAL + i as TokenId))
            .collect();
        Self {
            boxes,
            box_index,
            n_path: world.n_path,
            n_diag: world.n_diag,
        }
    }

    /// Box sides cover the lesion size under the default `[0.8, 1.2]` scale jitter.
    pub fn for_world(world: &CausalWorld) -> Self {
        let (lo, hi) = Self::side_range(world, (0.8, 1.2));
        Self::new(world, lo, hi)
    }

    pub fn side_range(world: &CausalWorld, scale: (f64, f64)) -> (usize, usize) {
        let small = world.lesion_h.min(world.lesion_w) as f64;
        let large = world.lesion_h.max(world.lesion_w) as f64;
        let lo = ((small * scale.0).round() as usize).max(1);
        let hi = ((large * scale.1).round() as usize).min(world.grid_h.max(world.grid_w));
        (lo, hi.max(lo))
    }

    pub fn len(&self) -> usize {
        N_STRUCTURAL as usize + self.boxes.len() + self.n_path + self.n_diag
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_boxes(&self) -> usize {
        self.boxes.len()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn n_path(&self) -> usize {
        self.n_path
    }

    pub fn n_diag(&self) -> usize {
        self.n_diag
    }

    pub fn box_range(&self) -> std::ops::Range<usize> {
        let start = N_STRUCTURAL as usize;
        start..start + self.boxes.len()
    }

    pub fn path_id(&self, k: usize) -> TokenId {
        (N_STRUCTURAL as usize + self.boxes.len() + k) as TokenId
    }

    pub fn diag_id(&self, m: usize) -> TokenId {
        (N_STRUCTURAL as usize + self.boxes.len() + self.n_path + m) as TokenId
    }

    pub fn encode(&self, token: &Token) -> Result<TokenId> {
        let id = match *token {
            Token::Causal => Self::CAUSAL,
            Token::Verify => Self::VERIFY,
            Token::Eos => Self::EOS,
            Token::Sep => Self::SEP,
            Token::Answer => Self::ANSWER,
            Token::Box(b) => *self
                .box_index
                .get(&b)
                .ok_or_else(|| Error::NotEncodable(token.to_string()))?,
            Token::Path(k) if k < self.n_path => self.path_id(k),
            Token::Diag(m) if m < self.n_diag => self.diag_id(m),
            _ => return Err(Error::NotEncodable(token.to_string())),
        };
        Ok(id)
    }

    pub fn decode(&self, id: TokenId) -> Result<Token> {
        let i = id as usize;
        let nb = self.boxes.len();
        let base = N_STRUCTURAL as usize;
        Ok(match id {
            Self::CAUSAL => Token::Causal,
            Self::VERIFY => Token::Verify,
            Self::EOS => Token::Eos,
            Self::SEP => Token::Sep,
            Self::ANSWER => Token::Answer,
            _ if i < base + nb => Token::Box(self.boxes[i - base]),
            _ if i < base + nb + self.n_path => Token::Path(i - base - nb),
            _ if i < self.len() => Token::Diag(i - base - nb - self.n_path),
            _ => return Err(Error::TokenOutOfRange(id)),
        })
    }

    /// Kind of a token id; `None` for ids outside the vocabulary.
    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        let i = id as usize;
        let nb = self.boxes.len();
        let base = N_STRUCTURAL as usize;
        Some(match id {
            Self::CAUSAL => TokenKind::Causal,
            Self::VERIFY => TokenKind::Verify,
            Self::EOS => TokenKind::Eos,
            Self::SEP => TokenKind::Sep,
            Self::ANSWER => TokenKind::Answer,
            _ if i < base + nb => TokenKind::Box,
            _ if i < base + nb + self.n_path => TokenKind::Path,
            _ if i < self.len() => TokenKind::Diag,
            _ => return None,
        })
    }

    pub fn encode_step(&self, step: &Step) -> Result<TokenId> {
        match *step {
            Step::Locate(b) => self.encode(&Token::Box(b)),
            Step::Characterize(k) => self.encode(&Token::Path(k)),
            Step::Conclude(m) => self.encode(&Token::Diag(m)),
        }
    }

    /// `BOX SEP PATH SEP DIAG` for a three-step chain.
    pub fn encode_chain(&self, chain: &[Step]) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(chain.len() * 2);
        for (i, step) in chain.iter().enumerate() {
            if i > 0 {
                out.push(Self::SEP);
            }
            out.push(self.encode_step(step)?);
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| match self.decode(id) {
                Ok(t) => t.to_string(),
                Err(_) => format!("?{id}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token kinds of a well-formed trajectory, in order.
pub const TEMPLATE: [TokenKind; 15] = [
    TokenKind::Causal,
    TokenKind::Box,
    TokenKind::Sep,
    TokenKind::Path,
    TokenKind::Sep,
    TokenKind::Diag,
    TokenKind::Verify,
    TokenKind::Box,
    TokenKind::Sep,
    TokenKind::Path,
    TokenKind::Sep,
    TokenKind::Diag,
    TokenKind::Answer,
    TokenKind::Diag,
    TokenKind::Eos,
];

/// Number of tokens in one encoded chain.
pub const CHAIN_TOKENS: usize = 5;
/// Tokens outside the two chains: `<CAUSAL> <VERIFY> ANSWER DIAG <EOS>`.
pub const TEMPLATE_OVERHEAD: usize = TEMPLATE.len() - 2 * CHAIN_TOKENS;

/// Grammar automaton over token kinds. Invalid tokens do not advance the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Grammar {
    state: usize,
}

impl Grammar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn expected(&self) -> Option<TokenKind> {
        TEMPLATE.get(self.state).copied()
    }

    pub fn is_accepting(&self) -> bool {
        self.state == TEMPLATE.len()
    }

    /// Feed one token kind; returns whether it was valid at this position.
    pub fn feed(&mut self, kind: Option<TokenKind>) -> bool {
        match (self.expected(), kind) {
            (Some(e), Some(k)) if e == k => {
                self.state += 1;
                true
            }
            _ => false,
        }
    }
}

/// Count of positionally valid tokens and whether the list ends in `<EOS>`.
pub fn positional_validity(tokens: &[TokenId], vocab: &Vocabulary) -> (usize, bool) {
    let mut grammar = Grammar::new();
    let valid = tokens
        .iter()
        .filter(|&&t| grammar.feed(vocab.kind(t)))
        .count();
    (valid, tokens.last() == Some(&Vocabulary::EOS))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Reasoning stage index: 1 = preliminary causal analysis, 2 = verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Causal,
    Verify,
}

impl Stage {
    pub fn from_index(t: usize) -> Result<Stage> {
        match t {
            1 => Ok(Stage::Causal),
            2 => Ok(Stage::Verify),
            other => Err(Error::UnknownStage(other)),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Stage::Causal => 1,
            Stage::Verify => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<TokenId>,
    /// Tokens before the first stage marker.
    pub preamble: Span,
    pub causal_marker: Option<usize>,
    pub causal: Option<Span>,
    pub verify_marker: Option<usize>,
    pub verify: Option<Span>,
    pub answer_marker: Option<usize>,
    pub answer: Option<Span>,
    pub eos: Option<usize>,
    /// Tokens after `<EOS>`.
    pub trailing: Span,
    pub causal_steps: Vec<Step>,
    pub verify_steps: Vec<Step>,
    pub answer_pred: Option<usize>,
    pub well_formed: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn span(&self, stage: Stage) -> Option<Span> {
        match stage {
            Stage::Causal => self.causal,
            Stage::Verify => self.verify,
        }
    }

    pub fn marker(&self, stage: Stage) -> Option<usize> {
        match stage {
            Stage::Causal => self.causal_marker,
            Stage::Verify => self.verify_marker,
        }
    }

    /// Content tokens of a stage; empty when the stage is absent.
    pub fn stage_tokens(&self, stage: Stage) -> &[TokenId] {
        match self.span(stage) {
            Some(s) => &self.tokens[s.start..s.end],
            None => &[],
        }
    }

    pub fn steps(&self, stage: Stage) -> &[Step] {
        match stage {
            Stage::Causal => &self.causal_steps,
            Stage::Verify => &self.verify_steps,
        }
    }

    /// Segments partitioning `0..len`: spans plus single-token markers.
    pub fn segments(&self) -> Vec<Span> {
        let mut out = vec![self.preamble];
        let single = |p: Option<usize>| p.map(|i| Span::new(i, i + 1));
        out.extend(single(self.causal_marker));
        out.extend(self.causal);
        out.extend(single(self.verify_marker));
        out.extend(self.verify);
        out.extend(single(self.answer_marker));
        out.extend(self.answer);
        out.extend(single(self.eos));
        out.push(self.trailing);
        out
    }
}

fn find(tokens: &[TokenId], from: usize, to: usize, id: TokenId) -> Option<usize> {
    (from..to).find(|&i| tokens[i] == id)
}

/// Longest valid `BOX SEP PATH SEP DIAG` prefix, as steps.
fn chain_prefix(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<Step> {
    const PATTERN: [TokenKind; CHAIN_TOKENS] = [
        TokenKind::Box,
        TokenKind::Sep,
        TokenKind::Path,
        TokenKind::Sep,
        TokenKind::Diag,
    ];
    let mut steps = Vec::with_capacity(3);
    for (pos, &id) in tokens.iter().take(CHAIN_TOKENS).enumerate() {
        if vocab.kind(id) != Some(PATTERN[pos]) {
            break;
        }
        match vocab.decode(id) {
            Ok(Token::Box(b)) => steps.push(Step::Locate(b)),
            Ok(Token::Path(k)) => steps.push(Step::Characterize(k)),
            Ok(Token::Diag(m)) => steps.push(Step::Conclude(m)),
            _ => {}
        }
    }
    steps
}

pub fn parse(tokens: &[TokenId], vocab: &Vocabulary) -> Trajectory {
    let len = tokens.len();
    let eos = find(tokens, 0, len, Vocabulary::EOS);
    let limit = eos.unwrap_or(len);

    let causal_marker = find(tokens, 0, limit, Vocabulary::CAUSAL);
    let after_causal = causal_marker.map_or(0, |c| c + 1);
    let verify_marker = find(tokens, after_causal, limit, Vocabulary::VERIFY);
    let after_verify = verify_marker.map_or(after_causal, |v| v + 1);
    let answer_marker = find(tokens, after_verify, limit, Vocabulary::ANSWER);

    let first_marker = [causal_marker, verify_marker, answer_marker]
        .into_iter()
        .flatten()
        .min()
        .unwrap_or(limit);
    let preamble = Span::new(0, first_marker);

    let next_after = |m: usize| {
        [verify_marker, answer_marker]
            .into_iter()
            .flatten()
            .filter(|&p| p > m)
            .min()
            .unwrap_or(limit)
    };
    let causal = causal_marker.map(|c| Span::new(c + 1, next_after(c)));
    let verify = verify_marker.map(|v| Span::new(v + 1, next_after(v)));
    let answer = answer_marker.map(|a| Span::new(a + 1, limit));
    let trailing = eos.map_or(Span::new(len, len), |e| Span::new(e + 1, len));

    let slice = |s: Option<Span>| s.map_or(&tokens[0..0], |s| &tokens[s.start..s.end]);
    let causal_steps = chain_prefix(slice(causal), vocab);
    let verify_steps = chain_prefix(slice(verify), vocab);

    let answer_pred = match (eos, answer) {
        (Some(e), Some(span)) if span.len() == 1 => {
            let n_markers = tokens[..e]
                .iter()
                .filter(|&&t| t == Vocabulary::ANSWER)
                .count();
            match vocab.decode(tokens[span.start]) {
                Ok(Token::Diag(m)) if n_markers == 1 => Some(m),
                _ => None,
            }
        }
        _ => None,
    };

    let well_formed = len == TEMPLATE.len()
        && tokens
            .iter()
            .zip(TEMPLATE.iter())
            .all(|(&t, &k)| vocab.kind(t) == Some(k));

    Trajectory {
        tokens: tokens.to_vec(),
        preamble,
        causal_marker,
        causal,
        verify_marker,
        verify,
        answer_marker,
        answer,
        eos,
        trailing,
        causal_steps,
        verify_steps,
        answer_pred,
        well_formed,
    }
}

/// Steps of a stage, given as a stage index (1 = causal, 2 = verify).
pub fn extract_steps(traj: &Trajectory, stage: usize) -> Result<Vec<Step>> {
    Ok(traj.steps(Stage::from_index(stage)?).to_vec())
}

/// Bag-of-tokens F1 between two token multisets. Two empty stages score 1.
pub fn stage_similarity(a: &[TokenId], b: &[TokenId]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<TokenId, i64> = HashMap::new();
    for &t in a {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for &t in b {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    2.0 * overlap as f64 / (a.len() + b.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixSplit {
    pub prefix: Vec<TokenId>,
    pub err_continuation: Vec<TokenId>,
    pub corr_continuation: Vec<TokenId>,
}

/// Split at the start of stage `t_fail`: the prefix is everything of `corr`
/// up to and including that stage's marker.
pub fn shared_prefix_split(
    err: &Trajectory,
    corr: &Trajectory,
    t_fail: usize,
) -> Result<PrefixSplit> {
    let stage = Stage::from_index(t_fail)?;
    let corr_start = corr.marker(stage).ok_or(Error::StageUnavailable(t_fail))? + 1;
    let err_start = err.marker(stage).ok_or(Error::StageUnavailable(t_fail))? + 1;
    Ok(PrefixSplit {
        prefix: corr.tokens[..corr_start].to_vec(),
        err_continuation: err.tokens[err_start..].to_vec(),
        corr_continuation: corr.tokens[corr_start..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (CausalWorld, Vocabulary) {
        let w = CausalWorld::default();
        let v = Vocabulary::for_world(&w);
        (w, v)
    }

    fn gold(v: &Vocabulary) -> Vec<TokenId> {
        let chain = [
            Step::Locate(BBox::new(0, 0, 6, 6)),
            Step::Characterize(1),
            Step::Conclude(1),
        ];
        let biased = [
            Step::Locate(BBox::new(1, 0, 7, 6)),
            Step::Characterize(1),
            Step::Conclude(1),
        ];
        let mut t = vec![Vocabulary::CAUSAL];
        t.extend(v.encode_chain(&biased).unwrap());
        t.push(Vocabulary::VERIFY);
        t.extend(v.encode_chain(&chain).unwrap());
        t.extend([Vocabulary::ANSWER, v.diag_id(1), Vocabulary::EOS]);
        t
    }

    #[test]
    fn vocabulary_size_and_bijection() {
        let (_, v) = setup();
        // sides 5..=7 on a 12×12 grid: (8 + 7 + 6)^2 boxes
        assert_eq!(v.n_boxes(), 441);
        assert_eq!(v.len(), 5 + 441 + 4 + 4);
        for id in 0..v.len() as TokenId {
            let tok = v.decode(id).unwrap();
            assert_eq!(v.encode(&tok).unwrap(), id);
        }
        assert!(v.decode(v.len() as TokenId).is_err());
        assert!(v.encode(&Token::Box(BBox::new(0, 0, 2, 2))).is_err());
        assert!(v.encode(&Token::Path(4)).is_err());
    }

    #[test]
    fn detokenize_readable() {
        let (_, v) = setup();
        let s = v.detokenize(&[
            v.encode(&Token::Box(BBox::from_rchw(2, 3, 6, 6))).unwrap(),
            v.path_id(1),
        ]);
        assert_eq!(s, "BOX(2,3,6,6) PATH(1)");
    }

    #[test]
    fn parse_well_formed() {
        let (_, v) = setup();
        let t = parse(&gold(&v), &v);
        assert!(t.well_formed);
        assert_eq!(t.answer_pred, Some(1));
        assert_eq!(t.causal_steps.len(), 3);
        assert_eq!(t.verify_steps[0], Step::Locate(BBox::new(0, 0, 6, 6)));
        assert_eq!(t.causal, Some(Span::new(1, 6)));
        assert_eq!(t.verify, Some(Span::new(7, 12)));
        assert_eq!(extract_steps(&t, 2).unwrap().len(), 3);
        assert!(matches!(extract_steps(&t, 3), Err(Error::UnknownStage(3))));
    }

    #[test]
    fn parse_empty() {
        let (_, v) = setup();
        let t = parse(&[], &v);
        assert!(!t.well_formed);
        assert_eq!(t.answer_pred, None);
        assert!(t.causal.is_none());
    }

    #[test]
    fn missing_verify_keeps_causal_span() {
        let (_, v) = setup();
        let mut toks = gold(&v);
        toks.remove(6);
        let t = parse(&toks, &v);
        assert!(!t.well_formed);
        assert!(t.verify.is_none());
        // causal span runs to the ANSWER marker and still yields the biased chain
        assert_eq!(t.causal, Some(Span::new(1, 11)));
        assert_eq!(t.causal_steps.len(), 3);
        assert_eq!(t.answer_pred, Some(1));
    }

    #[test]
    fn back_to_back_boxes() {
        let (_, v) = setup();
        let mut toks = gold(&v);
        let extra = v.encode(&Token::Box(BBox::new(2, 2, 8, 8))).unwrap();
        toks.insert(8, extra);
        let t = parse(&toks, &v);
        assert!(!t.well_formed);
        assert_eq!(t.verify_steps, vec![Step::Locate(BBox::new(0, 0, 6, 6))]);
    }

    #[test]
    fn answer_requires_single_marker_and_eos() {
        let (_, v) = setup();
        let mut toks = gold(&v);
        toks.pop();
        assert_eq!(parse(&toks, &v).answer_pred, None);
        let mut toks = gold(&v);
        toks.insert(13, Vocabulary::ANSWER);
        assert_eq!(parse(&toks, &v).answer_pred, None);
    }

    #[test]
    fn similarity_fixtures() {
        assert_eq!(stage_similarity(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(stage_similarity(&[1, 2, 3], &[3, 2, 1]), 1.0);
        assert_eq!(stage_similarity(&[1, 2], &[4, 5]), 0.0);
        assert!((stage_similarity(&[1, 2, 3], &[1, 2, 9]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(stage_similarity(&[], &[]), 1.0);
        assert_eq!(stage_similarity(&[], &[1]), 0.0);
        // multiset, not set
        assert!((stage_similarity(&[3, 3], &[3, 4]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn prefix_split_boundaries() {
        let (_, v) = setup();
        let corr = parse(&gold(&v), &v);
        let mut err_toks = gold(&v);
        err_toks[13] = v.diag_id(2);
        let err = parse(&err_toks, &v);

        let s1 = shared_prefix_split(&err, &corr, 1).unwrap();
        assert_eq!(s1.prefix, vec![Vocabulary::CAUSAL]);
        let s2 = shared_prefix_split(&err, &corr, 2).unwrap();
        assert_eq!(*s2.prefix.last().unwrap(), Vocabulary::VERIFY);
        assert_eq!(s2.prefix.len(), 7);
        for s in [&s1, &s2] {
            let mut joined = s.prefix.clone();
            joined.extend(&s.corr_continuation);
            assert_eq!(joined, corr.tokens);
        }
        assert!(matches!(
            shared_prefix_split(&err, &corr, 0),
            Err(Error::UnknownStage(0))
        ));
        let truncated = parse(&gold(&v)[..4], &v);
        assert!(matches!(
            shared_prefix_split(&truncated, &corr, 2),
            Err(Error::StageUnavailable(2))
        ));
    }

    #[test]
    fn positional_validity_counts() {
        let (_, v) = setup();
        assert_eq!(positional_validity(&gold(&v), &v), (15, true));
        let bx = v.encode(&Token::Box(BBox::new(0, 0, 6, 6))).unwrap();
        // CAUSAL BOX SEP EOS: EOS is not expected at position 3
        assert_eq!(
            positional_validity(
                &[Vocabulary::CAUSAL, bx, Vocabulary::SEP, Vocabulary::EOS],
                &v
            ),
            (3, true)
        );
    }
}
