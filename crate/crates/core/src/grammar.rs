//! Constrained decoding over the component region of a sequence.
//!
//! The decoder alternates between `ExpectComp` (a component type or END) and
//! `ExpectVal` (a value bin). Stricter levels narrow the allowed component
//! types to the template's remaining multiset and the value bins to the bound
//! slot's range.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{decode_sequence, topology_name, value_to_bin, Category, ComponentKind, Token, TokenSequence, VOCAB_SIZE};
use crate::topology::{get_template, TopologyTemplate, MAX_SLOTS};

/// Default budget for generated (component-region) tokens.
pub const DEFAULT_MAX_LEN: usize = 2 * MAX_SLOTS + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintLevel {
    None,
    Grammar,
    Topology,
    Full,
}

impl ConstraintLevel {
    pub const ALL: [ConstraintLevel; 4] =
        [ConstraintLevel::None, ConstraintLevel::Grammar, ConstraintLevel::Topology, ConstraintLevel::Full];

    pub fn name(self) -> &'static str {
        match self {
            ConstraintLevel::None => "none",
            ConstraintLevel::Grammar => "grammar",
            ConstraintLevel::Topology => "topology",
            ConstraintLevel::Full => "full",
        }
    }
}

impl fmt::Display for ConstraintLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConstraintLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::BadConfig(format!("unknown constraint level `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    ExpectComp,
    ExpectVal,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct SlotRange {
    kind: ComponentKind,
    lo_bin: usize,
    hi_bin: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrammarState {
    pub phase: Phase,
    pub level: ConstraintLevel,
    pub topology: Option<String>,
    /// Remaining required count per component type (empty below TOPOLOGY).
    pub remaining: BTreeMap<ComponentKind, usize>,
    pub last_component: Option<ComponentKind>,
    /// Component-region tokens emitted so far.
    pub position: usize,
    pub max_len: usize,
    slots: Vec<SlotRange>,
    filled: Vec<bool>,
    current_slot: Option<usize>,
}

/// Allowed-token vector over the full vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    allowed: Vec<bool>,
    count: usize,
}

impl TokenMask {
    pub fn none() -> Self {
        Self { allowed: vec![false; VOCAB_SIZE], count: 0 }
    }

    pub fn all() -> Self {
        Self { allowed: vec![true; VOCAB_SIZE], count: VOCAB_SIZE }
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = Token>) -> Self {
        let mut m = Self::none();
        for t in tokens {
            m.allow(t);
        }
        m
    }

    pub fn allow(&mut self, t: Token) {
        if !self.allowed[t.index()] {
            self.allowed[t.index()] = true;
            self.count += 1;
        }
    }

    #[inline]
    pub fn is_allowed(&self, t: Token) -> bool {
        self.allowed[t.index()]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn allowed_tokens(&self) -> impl Iterator<Item = Token> + '_ {
        self.allowed.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| Token(i as u16))
    }

    pub fn is_subset_of(&self, other: &TokenMask) -> bool {
        self.allowed.iter().zip(&other.allowed).all(|(&a, &b)| !a || b)
    }
}

impl GrammarState {
    pub fn new(template: Option<&TopologyTemplate>, level: ConstraintLevel, max_len: usize) -> Result<Self> {
        let mut s = GrammarState {
            phase: Phase::ExpectComp,
            level,
            topology: template.map(|t| t.name.clone()),
            remaining: BTreeMap::new(),
            last_component: None,
            position: 0,
            max_len,
            slots: Vec::new(),
            filled: Vec::new(),
            current_slot: None,
        };
        if level >= ConstraintLevel::Topology {
            let t = template.ok_or_else(|| Error::UnknownTopology("<none>".into()))?;
            s.remaining = crate::topology::required_components(t);
            s.slots = t
                .slots
                .iter()
                .map(|sl| SlotRange { kind: sl.kind, lo_bin: value_bin_index(sl.lo), hi_bin: value_bin_index(sl.hi) })
                .collect();
            s.filled = vec![false; s.slots.len()];
        }
        Ok(s)
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    fn budget_left(&self) -> usize {
        self.max_len.saturating_sub(self.position)
    }

    fn all_placed(&self) -> bool {
        self.remaining.values().all(|&c| c == 0)
    }

    /// Bin range allowed for the pending value, when bound to a slot at FULL level.
    pub fn value_range(&self) -> Option<(usize, usize)> {
        if self.level < ConstraintLevel::Full || self.phase != Phase::ExpectVal {
            return None;
        }
        self.current_slot.map(|i| (self.slots[i].lo_bin, self.slots[i].hi_bin))
    }
}

fn value_bin_index(v: f64) -> usize {
    value_to_bin(v).expect("slot bounds are positive").index() - Category::Value.offset()
}

/// Initial state for a named builtin topology.
pub fn init_state(topology: &str, level: ConstraintLevel, max_len: usize) -> Result<GrammarState> {
    let template = match get_template(topology) {
        Ok(t) => Some(t),
        Err(e) if level >= ConstraintLevel::Topology => return Err(e),
        Err(_) => None,
    };
    GrammarState::new(template, level, max_len)
}

pub fn mask(s: &GrammarState) -> Result<TokenMask> {
    if s.phase == Phase::Done {
        return Err(Error::DoneState);
    }
    if s.level == ConstraintLevel::None {
        return Ok(TokenMask::all());
    }
    let mut m = TokenMask::none();
    match s.phase {
        Phase::ExpectComp => {
            match s.level {
                ConstraintLevel::Grammar => {
                    // A component needs two tokens plus the closing END.
                    if s.budget_left() >= 3 {
                        ComponentKind::ALL.iter().for_each(|c| m.allow(c.token()));
                    }
                    m.allow(Token::END);
                }
                _ => {
                    for (&k, &n) in &s.remaining {
                        if n > 0 {
                            m.allow(k.token());
                        }
                    }
                    if s.all_placed() {
                        m.allow(Token::END);
                    }
                }
            }
        }
        Phase::ExpectVal => {
            let (lo, hi) = s.value_range().unwrap_or((0, crate::tokenizer::NUM_VALUE_BINS - 1));
            (lo..=hi).for_each(|b| m.allow(Token::value_bin(b)));
        }
        Phase::Done => unreachable!(),
    }
    Ok(m)
}

pub fn advance(s: &GrammarState, token: Token) -> Result<GrammarState> {
    if s.phase == Phase::Done {
        return Err(Error::DoneState);
    }
    if !mask(s)?.is_allowed(token) {
        return Err(Error::IllegalToken { token: token.name().to_string() });
    }
    let mut next = s.clone();
    next.position += 1;
    if token == Token::END {
        next.phase = Phase::Done;
    } else if let Some(kind) = token.component() {
        next.phase = Phase::ExpectVal;
        next.last_component = Some(kind);
        if let Some(n) = next.remaining.get_mut(&kind) {
            *n = n.saturating_sub(1);
        }
        next.current_slot = next.slots.iter().enumerate().position(|(i, sl)| !next.filled[i] && sl.kind == kind);
        if let Some(i) = next.current_slot {
            next.filled[i] = true;
        }
    } else if token.is_value() {
        next.phase = Phase::ExpectComp;
        next.current_slot = None;
    }
    Ok(next)
}

/// Probabilities of `softmax((z + log m) / temperature)`; masked entries are exactly zero.
pub fn masked_softmax<T: Scalar>(logits: &[T], m: &TokenMask, temperature: T) -> Result<Vec<T>> {
    if m.count() == 0 {
        return Err(Error::AllMasked);
    }
    let max = logits.iter().zip(m.as_slice()).filter(|(_, &a)| a).map(|(&z, _)| z / temperature).fold(T::neg_infinity(), T::max);
    let mut p: Vec<T> =
        logits.iter().zip(m.as_slice()).map(|(&z, &a)| if a { (z / temperature - max).exp() } else { T::zero() }).collect();
    let total: T = p.iter().copied().sum();
    p.iter_mut().for_each(|x| *x /= total);
    Ok(p)
}

/// Log-probabilities of the masked softmax; masked entries are `-inf`.
pub fn masked_log_softmax<T: Scalar>(logits: &[T], m: &TokenMask, temperature: T) -> Result<Vec<T>> {
    if m.count() == 0 {
        return Err(Error::AllMasked);
    }
    let allowed = || logits.iter().zip(m.as_slice()).filter(|(_, &a)| a).map(|(&z, _)| z / temperature);
    let max = allowed().fold(T::neg_infinity(), T::max);
    let lse = max + allowed().map(|z| (z - max).exp()).sum::<T>().ln();
    Ok(logits.iter().zip(m.as_slice()).map(|(&z, &a)| if a { z / temperature - lse } else { T::neg_infinity() }).collect())
}

/// Samples from the masked, temperature-scaled softmax after keeping the
/// `top_k` highest allowed logits (`top_k == 0` keeps all). Ties go to the lower id.
pub fn masked_sample<T: Scalar, R: Rng + ?Sized>(
    logits: &[T],
    m: &TokenMask,
    temperature: f64,
    top_k: usize,
    rng: &mut R,
) -> Result<Token> {
    let mut cand: Vec<(usize, f64)> = logits
        .iter()
        .zip(m.as_slice())
        .enumerate()
        .filter(|(_, (_, &a))| a)
        .map(|(i, (&z, _))| (i, z.as_f64() / temperature))
        .collect();
    if cand.is_empty() {
        return Err(Error::AllMasked);
    }
    if top_k > 0 && top_k < cand.len() {
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cand.truncate(top_k);
        cand.sort_by_key(|c| c.0);
    }
    let max = cand.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cand.iter().map(|c| (c.1 - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (c, w) in cand.iter().zip(&weights) {
        if u < *w {
            return Ok(Token(c.0 as u16));
        }
        u -= w;
    }
    Ok(Token(cand.last().expect("nonempty").0 as u16))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// Well-formed prefix and component/value alternation terminated by END.
    pub structural: bool,
    /// Component multiset equals the template's.
    pub components_correct: bool,
    /// Every value lies in its bound slot's bin range.
    pub values_in_range: bool,
    /// Valid at the requested level.
    pub valid: bool,
    pub first_violation: Option<usize>,
    pub reason: Option<String>,
    pub n_components: usize,
}

impl fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} structural={} components={} values={} n_components={}",
            if self.valid { "VALID" } else { "INVALID" },
            self.structural,
            self.components_correct,
            self.values_in_range,
            self.n_components
        )?;
        if let (Some(i), Some(r)) = (self.first_violation, &self.reason) {
            write!(f, " first_violation={i} ({r})")?;
        }
        Ok(())
    }
}

/// Replays the prefix and the component region through the grammar.
pub fn validate_sequence(seq: &TokenSequence, level: ConstraintLevel, template: Option<&TopologyTemplate>) -> ValidityReport {
    let t = seq.trimmed();
    let mut report = ValidityReport {
        structural: false,
        components_correct: false,
        values_in_range: false,
        valid: false,
        first_violation: None,
        reason: None,
        n_components: 0,
    };
    let fail = |mut r: ValidityReport, i: usize, why: String| {
        r.first_violation.get_or_insert(i);
        r.reason.get_or_insert(why);
        r
    };

    // Prefix: START TOPO SEP (SPEC VAL)* SEP
    if t.first() != Some(&Token::START) {
        return fail(report, 0, "missing START".into());
    }
    let topo = match t.get(1).and_then(|&x| topology_name(x)) {
        Some(n) => n,
        None => return fail(report, 1, "expected a topology token".into()),
    };
    if t.get(2) != Some(&Token::SEP) {
        return fail(report, 2, "expected SEP".into());
    }
    let mut i = 3;
    loop {
        match t.get(i) {
            Some(&Token::SEP) => break,
            Some(&k) if k.spec_key().is_some() => match t.get(i + 1) {
                Some(v) if v.is_value() => i += 2,
                _ => return fail(report, i + 1, "spec key without value".into()),
            },
            Some(_) => return fail(report, i, "malformed spec prefix".into()),
            None => return fail(report, i, "sequence ends inside the prefix".into()),
        }
    }
    let start = i + 1;
    let template = template.filter(|tp| tp.name == topo);

    // Structural replay (alternation only), with an unbounded length budget.
    let mut grammar = GrammarState::new(None, ConstraintLevel::Grammar, usize::MAX).expect("grammar level");
    let mut strict = if level >= ConstraintLevel::Topology {
        template.and_then(|tp| GrammarState::new(Some(tp), level, usize::MAX).ok())
    } else {
        None
    };
    let strict_missing = level >= ConstraintLevel::Topology && strict.is_none();
    let mut strict_violation: Option<(usize, String)> = strict_missing.then(|| (1, format!("no template for topology `{topo}`")));
    let mut end_at = None;
    for (j, &tok) in t.iter().enumerate().skip(start) {
        match advance(&grammar, tok) {
            Ok(g) => grammar = g,
            Err(_) => {
                let why = match grammar.phase {
                    Phase::ExpectVal => format!("expected a value token, got {tok}"),
                    _ => format!("expected a component or END, got {tok}"),
                };
                return fail(report, j, why);
            }
        }
        if tok.component().is_some() {
            report.n_components += 1;
        }
        if let Some(s) = strict.as_ref() {
            if strict_violation.is_none() {
                match advance(s, tok) {
                    Ok(n) => strict = Some(n),
                    Err(_) => strict_violation = Some((j, format!("{tok} not allowed at level {level}"))),
                }
            }
        }
        if grammar.is_done() {
            end_at = Some(j);
            break;
        }
    }
    match end_at {
        None => return fail(report, t.len(), "missing END".into()),
        Some(j) if j + 1 != t.len() => return fail(report, j + 1, "tokens after END".into()),
        Some(_) => {}
    }
    report.structural = true;

    if let (Some(tp), Ok(design)) = (template, decode_sequence(seq)) {
        report.components_correct = design.kinds_sorted() == tp.kinds_sorted();
        if report.components_correct {
            let binding = tp.bind_slots(design.components.iter().map(|c| c.kind));
            report.values_in_range = design.components.iter().zip(binding).all(|(c, slot)| {
                let s = &tp.slots[slot.expect("multiset matched")];
                let b = value_bin_index(c.value);
                (value_bin_index(s.lo)..=value_bin_index(s.hi)).contains(&b)
            });
        }
    }
    if !report.components_correct && strict_violation.is_none() && level >= ConstraintLevel::Topology {
        strict_violation = Some((t.len() - 1, "component multiset does not match the template".into()));
    }
    report.valid = match level {
        ConstraintLevel::None | ConstraintLevel::Grammar => true,
        ConstraintLevel::Topology => report.components_correct,
        ConstraintLevel::Full => report.components_correct && report.values_in_range,
    };
    if !report.valid {
        if let Some((j, why)) = strict_violation {
            return fail(report, j, why);
        }
        return fail(report, t.len() - 1, "value outside slot range".into());
    }
    report
}
