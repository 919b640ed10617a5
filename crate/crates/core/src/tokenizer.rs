//! Fixed 706-token vocabulary, log-uniform value bins, and the
//! circuit ⇄ token-sequence codec.
//!
//! Sequence layout:
//!
//! ```text
//! START TOPO_x SEP (SPEC_k VAL_i)* SEP (COMPONENT VAL_i)* END
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 706;
pub const NUM_VALUE_BINS: usize = 500;
pub const MIN_VALUE: f64 = 1e-12;
pub const MAX_VALUE: f64 = 1e6;
const LOG_MIN: f64 = -12.0;
const LOG_SPAN: f64 = 18.0;

/// Half the spacing between neighbouring bin centres, in decades.
pub const HALF_BIN_DECADES: f64 = LOG_SPAN / (2.0 * (NUM_VALUE_BINS - 1) as f64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Special,
    Component,
    Topology,
    Spec,
    Pin,
    Net,
    Value,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Special,
        Category::Component,
        Category::Topology,
        Category::Spec,
        Category::Pin,
        Category::Net,
        Category::Value,
    ];

    pub const fn size(self) -> usize {
        match self {
            Category::Special => 5,
            Category::Component => 20,
            Category::Topology => 40,
            Category::Spec => 20,
            Category::Pin => 21,
            Category::Net => 100,
            Category::Value => NUM_VALUE_BINS,
        }
    }

    pub const fn offset(self) -> usize {
        match self {
            Category::Special => 0,
            Category::Component => 5,
            Category::Topology => 25,
            Category::Spec => 65,
            Category::Pin => 85,
            Category::Net => 106,
            Category::Value => 206,
        }
    }

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn name(self) -> &'static str {
        match self {
            Category::Special => "special",
            Category::Component => "component",
            Category::Topology => "topology",
            Category::Spec => "spec",
            Category::Pin => "pin",
            Category::Net => "net",
            Category::Value => "value",
        }
    }

    pub fn of(id: usize) -> Category {
        assert!(id < VOCAB_SIZE, "token id {id} out of range");
        *Category::ALL.iter().rev().find(|c| id >= c.offset()).expect("offset 0 covers everything")
    }
}

/// A token id in `0..706`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub const START: Token = Token(0);
    pub const END: Token = Token(1);
    pub const PAD: Token = Token(2);
    pub const SEP: Token = Token(3);
    pub const INVALID: Token = Token(4);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn category(self) -> Category {
        Category::of(self.index())
    }

    pub fn is_value(self) -> bool {
        self.category() == Category::Value
    }

    pub fn component(self) -> Option<ComponentKind> {
        ComponentKind::from_token(self)
    }

    pub fn spec_key(self) -> Option<SpecKey> {
        SpecKey::from_token(self)
    }

    pub fn value_bin(bin: usize) -> Token {
        assert!(bin < NUM_VALUE_BINS);
        Token((Category::Value.offset() + bin) as u16)
    }

    pub fn name(self) -> &'static str {
        vocab().name(self)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

macro_rules! named_enum {
    ($(#[$meta:meta])* $ty:ident, $cat:expr, [$($var:ident => $name:literal),* $(,)?]) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $ty {
            $(#[serde(rename = $name)] $var),*
        }

        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),*];

            pub fn name(self) -> &'static str {
                match self { $($ty::$var => $name),* }
            }

            pub fn token(self) -> Token {
                Token(($cat.offset() + self as usize) as u16)
            }

            pub fn from_token(t: Token) -> Option<Self> {
                let idx = t.index().checked_sub($cat.offset())?;
                Self::ALL.get(idx).copied()
            }

            pub fn from_name(s: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s)
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(
    /// Named component token types; the remaining six component ids are reserved.
    ComponentKind,
    Category::Component,
    [
        MosfetN => "MOSFET_N",
        Resistor => "RESISTOR",
        Capacitor => "CAPACITOR",
        Inductor => "INDUCTOR",
        Diode => "DIODE",
        Opamp => "OPAMP",
        Transformer => "TRANSFORMER",
        MosfetP => "MOSFET_P",
        BjtNpn => "BJT_NPN",
        BjtPnp => "BJT_PNP",
        Zener => "ZENER",
        Switch => "SWITCH",
        Vsource => "VSOURCE",
        Isource => "ISOURCE",
    ]
);

named_enum!(
    /// Named specification keys, in prefix order. Values are SI units.
    SpecKey,
    Category::Spec,
    [
        Vin => "VIN",
        Vout => "VOUT",
        Iout => "IOUT",
        Fsw => "FSW",
        Gain => "GAIN",
        Bw => "BW",
        Fc => "FC",
        Fosc => "FOSC",
    ]
);

impl SpecKey {
    pub fn token_name(self) -> String {
        format!("SPEC_{}", self.name())
    }
}

/// Topology names with a reserved token slot. Only a subset have templates.
pub const TOPOLOGY_NAMES: [&str; 34] = [
    "buck",
    "boost",
    "buck_boost",
    "cuk",
    "sepic",
    "flyback",
    "forward",
    "inverting_amp",
    "noninverting_amp",
    "instrumentation_amp",
    "differential_amp",
    "sallen_key_lowpass",
    "sallen_key_highpass",
    "sallen_key_bandpass",
    "wien_bridge",
    "colpitts",
    "common_emitter",
    "common_collector",
    "common_base",
    "cascode",
    "current_mirror",
    "widlar_source",
    "ldo_regulator",
    "zener_regulator",
    "hartley",
    "phase_shift_osc",
    "state_variable_filter",
    "twin_t_notch",
    "half_bridge",
    "push_pull",
    "charge_pump",
    "voltage_doubler",
    "zeta",
    "bandgap_reference",
];

const PIN_NAMES: [&str; 21] = [
    "DRAIN",
    "GATE",
    "SOURCE",
    "BODY",
    "POS",
    "NEG",
    "ANODE",
    "CATHODE",
    "COLLECTOR",
    "BASE",
    "EMITTER",
    "INP",
    "INN",
    "OUT",
    "VCC",
    "VEE",
    "PRI_POS",
    "PRI_NEG",
    "SEC_POS",
    "SEC_NEG",
    "CTRL",
];

pub fn topology_token(name: &str) -> Option<Token> {
    TOPOLOGY_NAMES.iter().position(|&n| n == name).map(|i| Token((Category::Topology.offset() + i) as u16))
}

pub fn topology_name(t: Token) -> Option<&'static str> {
    let idx = t.index().checked_sub(Category::Topology.offset())?;
    TOPOLOGY_NAMES.get(idx).copied()
}

#[derive(Debug)]
pub struct Vocabulary {
    names: Vec<String>,
    lookup: HashMap<String, Token>,
}

/// Builds the vocabulary. Deterministic: ids are laid out category by category.
pub fn build_vocabulary() -> Vocabulary {
    let mut names = Vec::with_capacity(VOCAB_SIZE);
    names.extend(["START", "END", "PAD", "SEP", "INVALID"].map(String::from));
    names.extend(ComponentKind::ALL.iter().map(|c| c.name().to_string()));
    names.extend((ComponentKind::ALL.len()..20).map(|i| format!("COMP_RESERVED_{i}")));
    names.extend(TOPOLOGY_NAMES.iter().map(|n| format!("TOPO_{}", n.to_uppercase())));
    names.extend((0..6).map(|i| format!("TOPO_RESERVED_{i}")));
    names.extend(SpecKey::ALL.iter().map(|k| k.token_name()));
    names.extend((SpecKey::ALL.len()..20).map(|i| format!("SPEC_RESERVED_{i}")));
    names.extend(PIN_NAMES.iter().map(|p| format!("PIN_{p}")));
    names.extend((0..100).map(|i| format!("NET_{i}")));
    names.extend((0..NUM_VALUE_BINS).map(|i| format!("VAL_{i:03}")));
    assert_eq!(names.len(), VOCAB_SIZE);

    let lookup = names.iter().enumerate().map(|(i, n)| (n.clone(), Token(i as u16))).collect();
    Vocabulary { names, lookup }
}

/// Shared immutable vocabulary.
pub fn vocab() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(build_vocabulary)
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, t: Token) -> &str {
        &self.names[t.index()]
    }

    pub fn category_size(&self, c: Category) -> usize {
        (0..self.len()).filter(|&i| Category::of(i) == c).count()
    }

    /// Resolves a token name. Besides canonical names, value tokens may be
    /// written as `VAL_<number>[SI prefix][unit]` (e.g. `VAL_100uH`, `VAL_5.0`),
    /// which maps to the nearest bin.
    pub fn parse(&self, s: &str) -> Result<Token> {
        if let Some(&t) = self.lookup.get(s) {
            return Ok(t);
        }
        if let Some(lit) = s.strip_prefix("VAL_") {
            if let Some(v) = parse_si_literal(lit) {
                return value_to_bin(v);
            }
        }
        Err(Error::UnknownToken(s.to_string()))
    }

    /// Text table `id<TAB>category<TAB>name`, one token per line.
    pub fn dump_table(&self) -> String {
        let mut out = String::from("id\tcategory\tname\n");
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&format!("{i}\t{}\t{n}\n", Category::of(i).name()));
        }
        out
    }
}

fn parse_si_literal(s: &str) -> Option<f64> {
    let split = s
        .char_indices()
        .find(|&(i, c)| {
            !(c.is_ascii_digit()
                || c == '.'
                || ((c == 'e' || c == 'E') && s[i + 1..].starts_with(|d: char| d.is_ascii_digit() || d == '-' || d == '+'))
                || ((c == '-' || c == '+') && i > 0 && matches!(s.as_bytes()[i - 1], b'e' | b'E')))
        })
        .map_or(s.len(), |(i, _)| i);
    let mantissa: f64 = s[..split].parse().ok()?;
    let scale = match s[split..].chars().next() {
        None => 1.0,
        Some('f') => 1e-15,
        Some('p') => 1e-12,
        Some('n') => 1e-9,
        Some('u') | Some('µ') | Some('μ') => 1e-6,
        Some('m') => 1e-3,
        Some('k') | Some('K') => 1e3,
        Some('M') => 1e6,
        Some('G') => 1e9,
        Some(_) => 1.0,
    };
    Some(mantissa * scale)
}

/// Nearest bin centre in log10 space. Out-of-range values clamp to the boundary bins.
pub fn value_to_bin(v: f64) -> Result<Token> {
    if !(v > 0.0) {
        return Err(Error::NonPositiveValue(v));
    }
    let clamped = v.clamp(MIN_VALUE, MAX_VALUE);
    let pos = (clamped.log10() - LOG_MIN) * (NUM_VALUE_BINS - 1) as f64 / LOG_SPAN;
    let bin = (pos.round() as usize).min(NUM_VALUE_BINS - 1);
    Ok(Token::value_bin(bin))
}

/// Bin centre `10^(−12 + 18·i/499)`.
pub fn bin_to_value(t: Token) -> Result<f64> {
    if !t.is_value() {
        return Err(Error::WrongCategory { token: t.name().to_string(), expected: "value", actual: t.category().name() });
    }
    let i = t.index() - Category::Value.offset();
    Ok(bin_center(i))
}

pub fn bin_center(i: usize) -> f64 {
    10f64.powf(LOG_MIN + LOG_SPAN * i as f64 / (NUM_VALUE_BINS - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn categories(&self) -> Vec<Category> {
        self.tokens.iter().map(|t| t.category()).collect()
    }

    /// Index of the first component-region token (one past the second SEP).
    pub fn component_region_start(&self) -> Option<usize> {
        let mut seps = self.tokens.iter().enumerate().filter(|(_, &t)| t == Token::SEP);
        seps.nth(1).map(|(i, _)| i + 1)
    }

    /// Drops trailing PAD tokens.
    pub fn trimmed(&self) -> &[Token] {
        let end = self.tokens.iter().rposition(|&t| t != Token::PAD).map_or(0, |i| i + 1);
        &self.tokens[..end]
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(t.name())?;
        }
        Ok(())
    }
}

impl FromStr for TokenSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = vocab();
        s.split_whitespace().map(|w| v.parse(w)).collect::<Result<Vec<_>>>().map(Self::new)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub kind: ComponentKind,
    pub value: f64,
}

impl Component {
    pub fn new(kind: ComponentKind, value: f64) -> Self {
        Self { kind, value }
    }
}

/// A sized circuit: topology, target specification, and ordered component values (SI units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitDesign {
    pub topology: String,
    pub spec: BTreeMap<SpecKey, f64>,
    pub components: Vec<Component>,
}

impl CircuitDesign {
    /// Component multiset as sorted kinds.
    pub fn kinds_sorted(&self) -> Vec<ComponentKind> {
        let mut k: Vec<_> = self.components.iter().map(|c| c.kind).collect();
        k.sort();
        k
    }
}

pub fn encode_circuit(d: &CircuitDesign) -> Result<TokenSequence> {
    let topo = topology_token(&d.topology).ok_or_else(|| Error::UnknownToken(d.topology.clone()))?;
    let mut tokens = Vec::with_capacity(5 + 2 * (d.spec.len() + d.components.len()));
    tokens.extend([Token::START, topo, Token::SEP]);
    for (&k, &v) in &d.spec {
        tokens.push(k.token());
        tokens.push(value_to_bin(v)?);
    }
    tokens.push(Token::SEP);
    for c in &d.components {
        tokens.push(c.kind.token());
        tokens.push(value_to_bin(c.value)?);
    }
    tokens.push(Token::END);
    Ok(TokenSequence::new(tokens))
}

pub fn decode_sequence(seq: &TokenSequence) -> Result<CircuitDesign> {
    let t = seq.trimmed();
    if t.first() != Some(&Token::START) {
        return Err(Error::MissingStart);
    }
    let topology = t.get(1).and_then(|&tok| topology_name(tok)).ok_or(Error::SpecRegionMalformed(1))?.to_string();
    if t.get(2) != Some(&Token::SEP) {
        return Err(Error::SpecRegionMalformed(2));
    }

    let mut spec = BTreeMap::new();
    let mut i = 3;
    loop {
        match t.get(i) {
            None => return Err(Error::MissingEnd),
            Some(&Token::SEP) => {
                i += 1;
                break;
            }
            Some(&tok) => {
                let key = tok.spec_key().ok_or(Error::SpecRegionMalformed(i))?;
                let val = match t.get(i + 1) {
                    Some(&v) if v.is_value() => bin_to_value(v)?,
                    Some(_) => return Err(Error::SpecRegionMalformed(i + 1)),
                    None => return Err(Error::MissingEnd),
                };
                if spec.insert(key, val).is_some() {
                    return Err(Error::SpecRegionMalformed(i));
                }
                i += 2;
            }
        }
    }

    let mut components = Vec::new();
    loop {
        match t.get(i) {
            None => return Err(Error::MissingEnd),
            Some(&Token::END) => {
                if i + 1 != t.len() {
                    return Err(Error::UnexpectedToken(i + 1));
                }
                break;
            }
            Some(&tok) => {
                let kind = tok.component().ok_or(Error::UnexpectedToken(i))?;
                match t.get(i + 1) {
                    Some(&v) if v.is_value() => components.push(Component::new(kind, bin_to_value(v)?)),
                    Some(_) => return Err(Error::DanglingComponent(i)),
                    None => return Err(Error::MissingEnd),
                }
                i += 2;
            }
        }
    }
    Ok(CircuitDesign { topology, spec, components })
}

/// `n` copies of `seq` with the (component, value) pairs permuted. The prefix is untouched.
pub fn augment_shuffle(seq: &TokenSequence, n: usize, seed: u64) -> Result<Vec<TokenSequence>> {
    decode_sequence(seq)?;
    let t = seq.trimmed();
    let start = seq.component_region_start().expect("decoded sequences have two SEPs");
    let end = t.len() - 1;
    let pairs: Vec<[Token; 2]> = t[start..end].chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let mut p = pairs.clone();
            p.shuffle(&mut rng);
            let mut tokens = t[..start].to_vec();
            tokens.extend(p.into_iter().flatten());
            tokens.push(Token::END);
            TokenSequence::new(tokens)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fig2_design() -> CircuitDesign {
        CircuitDesign {
            topology: "buck".into(),
            spec: BTreeMap::from([(SpecKey::Vin, 12.0), (SpecKey::Vout, 5.0), (SpecKey::Iout, 1.0)]),
            components: vec![
                Component::new(ComponentKind::Inductor, 100e-6),
                Component::new(ComponentKind::Capacitor, 22e-6),
                Component::new(ComponentKind::Resistor, 5e-3),
                Component::new(ComponentKind::MosfetN, 15e-3),
            ],
        }
    }

    #[test]
    fn vocabulary_layout() {
        let v = build_vocabulary();
        assert_eq!(v.len(), 706);
        let sizes: Vec<_> = Category::ALL.iter().map(|&c| v.category_size(c)).collect();
        assert_eq!(sizes, vec![5, 20, 40, 20, 21, 100, 500]);
        assert_eq!(sizes.iter().sum::<usize>(), VOCAB_SIZE);
        for name in ["START", "END", "PAD", "SEP", "INVALID", "MOSFET_N", "TRANSFORMER", "SPEC_BW", "TOPO_BUCK"] {
            v.parse(name).unwrap();
        }
        let reserved = (0..VOCAB_SIZE).filter(|&i| v.names[i].starts_with("TOPO_RESERVED")).count();
        assert_eq!(reserved, 6);
        assert_eq!(Token::END.category(), Category::Special);
        assert_eq!(v.parse("VAL_000").unwrap().index(), 206);
        assert_eq!(v.parse("VAL_499").unwrap().index(), 705);
    }

    #[test]
    fn table_dump_lists_every_token() {
        let table = vocab().dump_table();
        assert_eq!(table.lines().count(), VOCAB_SIZE + 1);
        assert!(table.contains("\n0\tspecial\tSTART\n"));
        assert!(table.contains("\n705\tvalue\tVAL_499\n"));
    }

    #[test]
    fn bin_boundaries_and_midpoint() {
        let bin = |v: f64| value_to_bin(v).unwrap().index() - Category::Value.offset();
        assert_eq!(bin(1e-12), 0);
        assert_eq!(bin(1e6), 499);
        assert_eq!(bin(1e-3), 250);
        assert_eq!(bin(1e-20), 0);
        assert_eq!(bin(1e9), 499);
        assert_eq!(bin_to_value(Token::value_bin(0)).unwrap(), 1e-12);
        assert!((bin_to_value(Token::value_bin(499)).unwrap() - 1e6).abs() < 1e-6);
    }

    #[test]
    fn bin_errors() {
        assert!(matches!(value_to_bin(0.0), Err(Error::NonPositiveValue(_))));
        assert!(matches!(value_to_bin(-1.0), Err(Error::NonPositiveValue(_))));
        assert!(matches!(value_to_bin(f64::NAN), Err(Error::NonPositiveValue(_))));
        assert!(matches!(bin_to_value(Token::SEP), Err(Error::WrongCategory { .. })));
    }

    #[test]
    fn si_literals() {
        let v = vocab();
        assert_eq!(v.parse("VAL_100uH").unwrap(), value_to_bin(100e-6).unwrap());
        assert_eq!(v.parse("VAL_100µH").unwrap(), value_to_bin(100e-6).unwrap());
        assert_eq!(v.parse("VAL_5mΩ").unwrap(), value_to_bin(5e-3).unwrap());
        assert_eq!(v.parse("VAL_12.0").unwrap(), value_to_bin(12.0).unwrap());
        assert_eq!(v.parse("VAL_1e-3").unwrap(), value_to_bin(1e-3).unwrap());
        assert!(v.parse("VAL_abc").is_err());
        assert!(v.parse("RESISTORS").is_err());
    }

    #[test]
    fn figure_two_layout() {
        let seq = encode_circuit(&fig2_design()).unwrap();
        let expected: TokenSequence = "START TOPO_BUCK SEP SPEC_VIN VAL_12.0 SPEC_VOUT VAL_5.0 SPEC_IOUT VAL_1.0 SEP \
             INDUCTOR VAL_100µH CAPACITOR VAL_22µF RESISTOR VAL_5mΩ MOSFET_N VAL_15mΩ END"
            .parse()
            .unwrap();
        assert_eq!(seq, expected);
        let d = decode_sequence(&expected).unwrap();
        assert_eq!(d.topology, "buck");
        assert_eq!(d.components.len(), 4);
        assert_eq!(d.spec.len(), 3);
    }

    #[test]
    fn empty_component_list() {
        let mut d = fig2_design();
        d.components.clear();
        let s = encode_circuit(&d).unwrap();
        assert_eq!(s.tokens.len(), 3 + 6 + 2);
        assert_eq!(*s.tokens.last().unwrap(), Token::END);
        assert_eq!(s.tokens[s.len() - 2], Token::SEP);
        assert_eq!(decode_sequence(&s).unwrap().components.len(), 0);
    }

    #[test]
    fn unknown_topology_is_rejected() {
        let mut d = fig2_design();
        d.topology = "flux_capacitor".into();
        assert!(matches!(encode_circuit(&d), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn decode_errors() {
        let parse = |s: &str| -> TokenSequence { s.parse().unwrap() };
        assert!(matches!(decode_sequence(&parse("TOPO_BUCK SEP SEP END")), Err(Error::MissingStart)));
        assert!(matches!(decode_sequence(&parse("START TOPO_BUCK SEP SEP INDUCTOR VAL_100")), Err(Error::MissingEnd)));
        assert!(matches!(
            decode_sequence(&parse("START TOPO_BUCK SEP SEP INDUCTOR CAPACITOR VAL_100 END")),
            Err(Error::DanglingComponent(4))
        ));
        assert!(matches!(
            decode_sequence(&parse("START TOPO_BUCK SEP SPEC_VIN SPEC_VOUT SEP END")),
            Err(Error::SpecRegionMalformed(4))
        ));
        assert!(matches!(decode_sequence(&parse("START SEP SEP END")), Err(Error::SpecRegionMalformed(1))));
        assert!(matches!(decode_sequence(&parse("START TOPO_BUCK SEP SEP VAL_100 END")), Err(Error::UnexpectedToken(4))));
    }

    #[test]
    fn padding_is_ignored() {
        let mut s = encode_circuit(&fig2_design()).unwrap();
        let plain = decode_sequence(&s).unwrap();
        s.tokens.extend([Token::PAD; 4]);
        assert_eq!(decode_sequence(&s).unwrap(), plain);
    }

    #[test]
    fn shuffle_single_component_is_identity() {
        let mut d = fig2_design();
        d.components.truncate(1);
        let s = encode_circuit(&d).unwrap();
        assert_eq!(augment_shuffle(&s, 1, 9).unwrap(), vec![s]);
    }

    #[test]
    fn shuffle_preserves_pairs_and_multiset() {
        let s = encode_circuit(&fig2_design()).unwrap();
        let out = augment_shuffle(&s, 5, 3).unwrap();
        assert_eq!(out.len(), 5);
        let start = s.component_region_start().unwrap();
        let canon = |seq: &TokenSequence| {
            let mut pairs: Vec<_> = seq.tokens[start..seq.len() - 1].chunks(2).map(|c| c.to_vec()).collect();
            pairs.sort();
            pairs
        };
        for o in &out {
            assert_eq!(o.tokens[..start], s.tokens[..start]);
            for pair in o.tokens[start..o.len() - 1].chunks(2) {
                assert!(pair[0].component().is_some() && pair[1].is_value());
            }
            assert_eq!(canon(o), canon(&s));
            let mut a = decode_sequence(o).unwrap().components;
            let mut b = decode_sequence(&s).unwrap().components;
            a.sort_by(|x, y| x.value.total_cmp(&y.value));
            b.sort_by(|x, y| x.value.total_cmp(&y.value));
            assert_eq!(a, b);
        }
        assert_eq!(out, augment_shuffle(&s, 5, 3).unwrap());
    }

    #[test]
    fn shuffle_rejects_invalid_input() {
        let s: TokenSequence = "START TOPO_BUCK SEP SEP INDUCTOR".parse().unwrap();
        assert!(augment_shuffle(&s, 2, 0).is_err());
    }
}
