//! Topology templates: sized component slots, netlist bodies, the slot
//! adjacency graph, random-walk positional features, and random sampling of
//! designs within slot bounds.
//!
//! Templates live in plain-text `.tpl` files (see `templates/`), one
//! directive per line:
//!
//! ```text
//! name buck
//! domain power
//! model buck
//! spec VIN 5 24                # spec key with its sampling range
//! require VOUT lt VIN 0.85     # VOUT < 0.85·VIN when sampling specs
//! param fsw 1e5
//! slot L1 INDUCTOR 1e-6 1e-2   # netlist element, component type, bounds
//! primary v_out VOUT           # metric and its target (spec key, -key, or number)
//! secondary bandwidth BW
//! netlist
//! ... SPICE body with {placeholders} ...
//! end
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{CircuitDesign, Component, ComponentKind, SpecKey, MAX_VALUE, MIN_VALUE};

/// Upper bound on slots per template; adjacency and RWPE are padded to this size.
pub const MAX_SLOTS: usize = 16;
pub const RWPE_STEPS: usize = 8;

pub const BUILTIN_TOPOLOGIES: [&str; 8] =
    ["buck", "boost", "buck_boost", "inverting_amp", "noninverting_amp", "sallen_key_lowpass", "wien_bridge", "current_mirror"];

const BUILTIN_SOURCES: [&str; 8] = [
    include_str!("../templates/buck.tpl"),
    include_str!("../templates/boost.tpl"),
    include_str!("../templates/buck_boost.tpl"),
    include_str!("../templates/inverting_amp.tpl"),
    include_str!("../templates/noninverting_amp.tpl"),
    include_str!("../templates/sallen_key_lowpass.tpl"),
    include_str!("../templates/wien_bridge.tpl"),
    include_str!("../templates/current_mirror.tpl"),
];

/// E24 preferred-number mantissas.
pub const E24: [f64; 24] =
    [1.0, 1.1, 1.2, 1.3, 1.5, 1.6, 1.8, 2.0, 2.2, 2.4, 2.7, 3.0, 3.3, 3.6, 3.9, 4.3, 4.7, 5.1, 5.6, 6.2, 6.8, 7.5, 8.2, 9.1];

macro_rules! keyword_enum {
    ($ty:ident { $($var:ident => $name:literal),* $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(into = "&'static str", try_from = "String")]
        pub enum $ty { $($var),* }

        impl From<$ty> for &'static str {
            fn from(v: $ty) -> Self {
                v.name()
            }
        }

        impl TryFrom<String> for $ty {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }

        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),*];
            pub fn name(self) -> &'static str {
                match self { $($ty::$var => $name),* }
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Template(format!("unknown {} `{s}`", stringify!($ty))))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

keyword_enum!(Domain {
    Power => "power",
    Amplifier => "amplifier",
    Filter => "filter",
    Oscillator => "oscillator",
    Bias => "bias",
});

keyword_enum!(Metric {
    VOut => "v_out",
    Efficiency => "efficiency",
    Ripple => "ripple",
    Gain => "gain",
    Bandwidth => "bandwidth",
    Cutoff => "f_c",
    PassbandGain => "passband_gain",
    Frequency => "f_osc",
    Amplitude => "amplitude",
    OutputCurrent => "i_out",
    MirrorRatio => "mirror_ratio",
});

impl Metric {
    pub fn is_frequency(self) -> bool {
        matches!(self, Metric::Bandwidth | Metric::Cutoff | Metric::Frequency)
    }
}

keyword_enum!(AnalyticModel {
    Buck => "buck",
    Boost => "boost",
    BuckBoost => "buck_boost",
    InvertingAmp => "inverting_amp",
    NoninvertingAmp => "noninverting_amp",
    SallenKeyLowpass => "sallen_key_lowpass",
    WienBridge => "wien_bridge",
    CurrentMirror => "current_mirror",
});

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Spec { key: SpecKey, negate: bool },
    Fixed(f64),
}

impl Target {
    pub fn resolve(&self, spec: &BTreeMap<SpecKey, f64>) -> Option<f64> {
        match *self {
            Target::Spec { key, negate } => spec.get(&key).map(|&v| if negate { -v } else { v }),
            Target::Fixed(v) => Some(v),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBinding {
    pub metric: Metric,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    /// Netlist element name, also the placeholder for its value.
    pub role: String,
    pub kind: ComponentKind,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecRange {
    pub key: SpecKey,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Relation {
    LessThan,
    GreaterThan,
}

/// `lhs <rel> factor · rhs`, enforced by rejection when sampling specs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecRequirement {
    pub lhs: SpecKey,
    pub relation: Relation,
    pub rhs: SpecKey,
    pub factor: f64,
}

impl SpecRequirement {
    fn holds(&self, spec: &BTreeMap<SpecKey, f64>) -> bool {
        match (spec.get(&self.lhs), spec.get(&self.rhs)) {
            (Some(&l), Some(&r)) => match self.relation {
                Relation::LessThan => l < self.factor * r,
                Relation::GreaterThan => l > self.factor * r,
            },
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyTemplate {
    pub name: String,
    pub domain: Domain,
    pub model: AnalyticModel,
    pub spec_ranges: Vec<SpecRange>,
    pub requirements: Vec<SpecRequirement>,
    pub params: BTreeMap<String, f64>,
    pub slots: Vec<Slot>,
    pub primary: MetricBinding,
    pub secondary: Option<MetricBinding>,
    pub netlist: String,
    /// Symmetric 0/1 slot adjacency: two slots share a non-ground net.
    pub adjacency: Vec<Vec<u8>>,
}

/// Per-slot return probabilities `diag(T^k)`, `k = 1..=K`, with `T = D⁻¹A`.
#[derive(Clone, Debug, PartialEq)]
pub struct RwpeFeatures {
    pub features: Vec<Vec<f64>>,
}

impl TopologyTemplate {
    pub fn parse(src: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Template(format!("line {}: {msg}", line + 1));
        let num = |line: usize, s: &str| -> Result<f64> { s.parse::<f64>().map_err(|_| err(line, &format!("bad number `{s}`"))) };
        let spec_key = |line: usize, s: &str| -> Result<SpecKey> {
            SpecKey::from_name(s).ok_or_else(|| err(line, &format!("unknown spec key `{s}`")))
        };
        let target = |line: usize, s: &str| -> Result<Target> {
            if let Ok(v) = s.parse::<f64>() {
                return Ok(Target::Fixed(v));
            }
            let (negate, key) = match s.strip_prefix('-') {
                Some(k) => (true, k),
                None => (false, s),
            };
            Ok(Target::Spec { key: spec_key(line, key)?, negate })
        };

        let mut name = None;
        let mut domain = None;
        let mut model = None;
        let mut spec_ranges = Vec::new();
        let mut requirements = Vec::new();
        let mut params = BTreeMap::new();
        let mut slots = Vec::new();
        let mut primary = None;
        let mut secondary = None;
        let mut netlist = None;

        let mut lines = src.lines().enumerate();
        while let Some((ln, raw)) = lines.next() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let w: Vec<&str> = line.split_whitespace().collect();
            match (w[0], w.len()) {
                ("name", 2) => name = Some(w[1].to_string()),
                ("domain", 2) => domain = Some(w[1].parse::<Domain>()?),
                ("model", 2) => model = Some(w[1].parse::<AnalyticModel>()?),
                ("spec", 4) => spec_ranges.push(SpecRange { key: spec_key(ln, w[1])?, lo: num(ln, w[2])?, hi: num(ln, w[3])? }),
                ("require", 5) => requirements.push(SpecRequirement {
                    lhs: spec_key(ln, w[1])?,
                    relation: match w[2] {
                        "lt" => Relation::LessThan,
                        "gt" => Relation::GreaterThan,
                        other => return Err(err(ln, &format!("unknown relation `{other}`"))),
                    },
                    rhs: spec_key(ln, w[3])?,
                    factor: num(ln, w[4])?,
                }),
                ("param", 3) => {
                    params.insert(w[1].to_string(), num(ln, w[2])?);
                }
                ("slot", 5) => slots.push(Slot {
                    role: w[1].to_string(),
                    kind: ComponentKind::from_name(w[2]).ok_or_else(|| err(ln, &format!("unknown component `{}`", w[2])))?,
                    lo: num(ln, w[3])?,
                    hi: num(ln, w[4])?,
                }),
                ("primary", 3) => primary = Some(MetricBinding { metric: w[1].parse()?, target: target(ln, w[2])? }),
                ("secondary", 3) => secondary = Some(MetricBinding { metric: w[1].parse()?, target: target(ln, w[2])? }),
                ("netlist", 1) => {
                    let mut body = String::new();
                    let mut closed = false;
                    for (_, l) in lines.by_ref() {
                        if l.trim() == "end" {
                            closed = true;
                            break;
                        }
                        body.push_str(l);
                        body.push('\n');
                    }
                    if !closed {
                        return Err(err(ln, "netlist block is not terminated by `end`"));
                    }
                    netlist = Some(body);
                }
                _ => return Err(err(ln, &format!("unrecognised directive `{line}`"))),
            }
        }

        let name = name.ok_or_else(|| Error::Template("missing `name`".into()))?;
        let mut t = TopologyTemplate {
            domain: domain.ok_or_else(|| Error::Template(format!("{name}: missing `domain`")))?,
            model: model.ok_or_else(|| Error::Template(format!("{name}: missing `model`")))?,
            primary: primary.ok_or_else(|| Error::Template(format!("{name}: missing `primary`")))?,
            netlist: netlist.ok_or_else(|| Error::Template(format!("{name}: missing `netlist`")))?,
            name,
            spec_ranges,
            requirements,
            params,
            slots,
            secondary,
            adjacency: Vec::new(),
        };
        t.adjacency = t.derive_adjacency()?;
        t.validate()?;
        Ok(t)
    }

    /// Checks bounds, slot count and graph invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Template(format!("{}: {m}", self.name)));
        if crate::tokenizer::topology_token(&self.name).is_none() {
            return bad("name has no topology token".into());
        }
        if self.slots.is_empty() || self.slots.len() > MAX_SLOTS {
            return bad(format!("slot count {} outside 1..={MAX_SLOTS}", self.slots.len()));
        }
        for s in &self.slots {
            if !(MIN_VALUE <= s.lo && s.lo < s.hi && s.hi <= MAX_VALUE) {
                return bad(format!("slot {} bounds [{}, {}] invalid", s.role, s.lo, s.hi));
            }
        }
        for r in &self.spec_ranges {
            if !(r.lo > 0.0 && r.lo <= r.hi) {
                return bad(format!("spec range for {} invalid", r.key));
            }
        }
        let n = self.slots.len();
        for i in 0..n {
            if self.adjacency[i][i] != 0 {
                return bad("adjacency has a self loop".into());
            }
            for j in 0..n {
                if self.adjacency[i][j] != self.adjacency[j][i] {
                    return bad("adjacency is not symmetric".into());
                }
            }
        }
        if !is_connected(&self.adjacency) {
            return Err(Error::DisconnectedTopology(self.name.clone()));
        }
        Ok(())
    }

    /// Slot adjacency from shared non-ground nets in the netlist body.
    fn derive_adjacency(&self) -> Result<Vec<Vec<u8>>> {
        let elements = element_nodes(&self.netlist);
        let nets: Vec<Vec<String>> = self
            .slots
            .iter()
            .map(|s| {
                elements
                    .get(&s.role.to_ascii_lowercase())
                    .cloned()
                    .ok_or_else(|| Error::Template(format!("{}: no netlist element for slot {}", self.name, s.role)))
            })
            .collect::<Result<_>>()?;
        let n = self.slots.len();
        let mut adj = vec![vec![0u8; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j && nets[i].iter().any(|a| a != "0" && a != "gnd" && nets[j].contains(a)) {
                    adj[i][j] = 1;
                }
            }
        }
        Ok(adj)
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn spec_keys(&self) -> Vec<SpecKey> {
        self.spec_ranges.iter().map(|r| r.key).collect()
    }

    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.get(key).copied()
    }

    /// Adjacency zero-padded to `MAX_SLOTS × MAX_SLOTS`.
    pub fn padded_adjacency(&self) -> Vec<Vec<u8>> {
        let mut out = vec![vec![0u8; MAX_SLOTS]; MAX_SLOTS];
        for (i, row) in self.adjacency.iter().enumerate() {
            out[i][..row.len()].copy_from_slice(row);
        }
        out
    }

    /// Draws a specification uniformly in log space within the declared ranges,
    /// rejecting draws that violate `require` directives.
    pub fn sample_spec<R: Rng + ?Sized>(&self, rng: &mut R) -> BTreeMap<SpecKey, f64> {
        let draw = |rng: &mut R| -> BTreeMap<SpecKey, f64> {
            self.spec_ranges.iter().map(|r| (r.key, log_uniform(rng, r.lo, r.hi))).collect()
        };
        let mut spec = draw(rng);
        for _ in 0..10_000 {
            if self.requirements.iter().all(|q| q.holds(&spec)) {
                break;
            }
            spec = draw(rng);
        }
        spec
    }

    /// Default specification at the geometric centre of every range.
    pub fn nominal_spec(&self) -> BTreeMap<SpecKey, f64> {
        self.spec_ranges.iter().map(|r| (r.key, (r.lo * r.hi).sqrt())).collect()
    }

    /// Clamps each value into its slot bounds.
    pub fn design_from_values(&self, spec: BTreeMap<SpecKey, f64>, values: &[f64]) -> CircuitDesign {
        assert_eq!(values.len(), self.slots.len());
        CircuitDesign {
            topology: self.name.clone(),
            spec,
            components: self.slots.iter().zip(values).map(|(s, &v)| Component::new(s.kind, v.clamp(s.lo, s.hi))).collect(),
        }
    }

    /// Maps each component of `design` onto a slot: the first not-yet-used slot
    /// of the same type, in template order. `None` where no slot is left.
    pub fn bind_slots(&self, kinds: impl IntoIterator<Item = ComponentKind>) -> Vec<Option<usize>> {
        let mut used = vec![false; self.slots.len()];
        kinds
            .into_iter()
            .map(|k| {
                let idx = self.slots.iter().enumerate().position(|(i, s)| !used[i] && s.kind == k)?;
                used[idx] = true;
                Some(idx)
            })
            .collect()
    }

    /// Component values ordered by slot, if the design's multiset matches.
    pub fn slot_values(&self, design: &CircuitDesign) -> Option<Vec<f64>> {
        if design.topology != self.name || design.kinds_sorted() != self.kinds_sorted() {
            return None;
        }
        let binding = self.bind_slots(design.components.iter().map(|c| c.kind));
        let mut values = vec![0.0; self.slots.len()];
        for (c, slot) in design.components.iter().zip(binding) {
            values[slot?] = c.value;
        }
        Some(values)
    }

    pub fn kinds_sorted(&self) -> Vec<ComponentKind> {
        let mut k: Vec<_> = self.slots.iter().map(|s| s.kind).collect();
        k.sort();
        k
    }
}

/// Lower-cased element name → node names for every element line outside
/// `.subckt` and `.control` blocks.
fn element_nodes(netlist: &str) -> HashMap<String, Vec<String>> {
    let mut out = HashMap::new();
    let mut depth_skip = false;
    for line in netlist.lines() {
        let l = line.trim().to_ascii_lowercase();
        if l.starts_with(".subckt") || l.starts_with(".control") {
            depth_skip = true;
            continue;
        }
        if l.starts_with(".ends") || l.starts_with(".endc") {
            depth_skip = false;
            continue;
        }
        if depth_skip || l.is_empty() || l.starts_with('*') || l.starts_with('.') {
            continue;
        }
        let w: Vec<&str> = l.split_whitespace().collect();
        let n_nodes = match w[0].chars().next() {
            Some('r' | 'l' | 'c' | 'd' | 'v' | 'i' | 'b') => 2,
            Some('q') => 3,
            Some('s' | 'e' | 'g' | 'm') => 4,
            Some('x') => w.len().saturating_sub(2),
            _ => 0,
        };
        let nodes = w.iter().skip(1).take(n_nodes).map(|s| s.to_string()).collect();
        out.insert(w[0].to_string(), nodes);
    }
    out
}

fn is_connected(adj: &[Vec<u8>]) -> bool {
    let n = adj.len();
    if n <= 1 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if adj[i][j] != 0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// `diag(T^k)` for `k = 1..=steps`, by repeated multiplication with `T = D⁻¹A`.
pub fn rwpe_from_adjacency(adj: &[Vec<u8>], steps: usize) -> Result<RwpeFeatures> {
    let n = adj.len();
    if !is_connected(adj) {
        return Err(Error::DisconnectedTopology(format!("{n}-node graph")));
    }
    let degree: Vec<f64> = adj.iter().map(|r| r.iter().map(|&a| a as f64).sum()).collect();
    if n > 1 && degree.contains(&0.0) {
        return Err(Error::DisconnectedTopology(format!("{n}-node graph")));
    }
    let t: Vec<Vec<f64>> =
        (0..n).map(|i| (0..n).map(|j| if degree[i] > 0.0 { adj[i][j] as f64 / degree[i] } else { 0.0 }).collect()).collect();
    let mut power = t.clone();
    let mut features = vec![Vec::with_capacity(steps); n];
    for k in 0..steps {
        if k > 0 {
            power = (0..n).map(|i| (0..n).map(|j| (0..n).map(|m| power[i][m] * t[m][j]).sum()).collect()).collect();
        }
        for (i, f) in features.iter_mut().enumerate() {
            f.push(power[i][i]);
        }
    }
    Ok(RwpeFeatures { features })
}

pub fn compute_rwpe(t: &TopologyTemplate, steps: usize) -> Result<RwpeFeatures> {
    rwpe_from_adjacency(&t.adjacency, steps).map_err(|_| Error::DisconnectedTopology(t.name.clone()))
}

pub fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    10f64.powf(rng.random_range(lo.log10()..hi.log10()))
}

/// Nearest E24 value in log space, restricted to `[lo, hi]` when any E24 value lies there.
pub fn snap_e24(v: f64, lo: f64, hi: f64) -> f64 {
    let exp = v.log10().floor() as i32;
    let mut best: Option<(f64, f64)> = None;
    for e in exp - 1..=exp + 1 {
        for &m in &E24 {
            let c = m * 10f64.powi(e);
            if c < lo * (1.0 - 1e-12) || c > hi * (1.0 + 1e-12) {
                continue;
            }
            let dist = (c.log10() - v.log10()).abs();
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((c, dist));
            }
        }
    }
    best.map_or(v.clamp(lo, hi), |(c, _)| c)
}

/// True when `v` is an E24 mantissa times a power of ten.
pub fn is_e24(v: f64) -> bool {
    let exp = v.log10().floor() as i32;
    (exp - 1..=exp + 1).any(|e| E24.iter().any(|&m| ((m * 10f64.powi(e)) / v - 1.0).abs() < 1e-9))
}

/// Log-uniform draw per slot, snapped to E24. Deterministic under `seed`.
pub fn sample_random_design(t: &TopologyTemplate, spec: &BTreeMap<SpecKey, f64>, seed: u64) -> CircuitDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_random_design_with(t, spec, &mut rng)
}

pub fn sample_random_design_with<R: Rng + ?Sized>(
    t: &TopologyTemplate,
    spec: &BTreeMap<SpecKey, f64>,
    rng: &mut R,
) -> CircuitDesign {
    let components = t
        .slots
        .iter()
        .map(|s| {
            let v = if s.lo >= s.hi { s.lo } else { snap_e24(log_uniform(rng, s.lo, s.hi), s.lo, s.hi) };
            Component::new(s.kind, v)
        })
        .collect();
    CircuitDesign { topology: t.name.clone(), spec: spec.clone(), components }
}

pub fn required_components(t: &TopologyTemplate) -> BTreeMap<ComponentKind, usize> {
    let mut m = BTreeMap::new();
    for s in &t.slots {
        *m.entry(s.kind).or_insert(0) += 1;
    }
    m
}

/// A set of templates keyed by name.
#[derive(Clone, Debug)]
pub struct TopologyLibrary {
    templates: Vec<TopologyTemplate>,
}

impl TopologyLibrary {
    pub fn builtin() -> Self {
        let templates =
            BUILTIN_SOURCES.iter().map(|src| TopologyTemplate::parse(src).expect("builtin templates are valid")).collect();
        Self { templates }
    }

    /// Loads every `*.tpl` file in `dir`, validating each.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tpl"))
            .collect();
        paths.sort();
        let templates =
            paths.iter().map(|p| TopologyTemplate::parse(&std::fs::read_to_string(p)?)).collect::<Result<Vec<_>>>()?;
        Ok(Self { templates })
    }

    pub fn get(&self, name: &str) -> Result<&TopologyTemplate> {
        self.templates.iter().find(|t| t.name == name).ok_or_else(|| Error::UnknownTopology(name.to_string()))
    }

    pub fn templates(&self) -> &[TopologyTemplate] {
        &self.templates
    }

    pub fn names(&self) -> Vec<&str> {
        self.templates.iter().map(|t| t.name.as_str()).collect()
    }
}

pub fn builtin_library() -> &'static TopologyLibrary {
    static LIB: OnceLock<TopologyLibrary> = OnceLock::new();
    LIB.get_or_init(TopologyLibrary::builtin)
}

pub fn get_template(name: &str) -> Result<&'static TopologyTemplate> {
    builtin_library().get(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Vec<Vec<u8>> {
        vec![vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]]
    }

    #[test]
    fn all_builtins_load_and_validate() {
        let lib = TopologyLibrary::builtin();
        assert_eq!(lib.names(), BUILTIN_TOPOLOGIES.to_vec());
        let domains: std::collections::BTreeSet<_> = lib.templates().iter().map(|t| t.domain).collect();
        assert_eq!(domains.len(), 5);
        for t in lib.templates() {
            t.validate().unwrap();
            for (i, row) in t.adjacency.iter().enumerate() {
                assert!(row.iter().map(|&a| a as usize).sum::<usize>() >= 1, "{} slot {i} isolated", t.name);
            }
        }
    }

    #[test]
    fn buck_slots_and_multiset() {
        let t = get_template("buck").unwrap();
        let kinds: Vec<_> = t.slots.iter().map(|s| s.kind).collect();
        for k in [ComponentKind::Inductor, ComponentKind::Capacitor, ComponentKind::MosfetN] {
            assert!(kinds.contains(&k));
        }
        let req = required_components(t);
        assert_eq!(
            req,
            BTreeMap::from([
                (ComponentKind::MosfetN, 1),
                (ComponentKind::Resistor, 1),
                (ComponentKind::Capacitor, 1),
                (ComponentKind::Inductor, 1),
            ])
        );
        // L1–S1 share sw_node, L1–Resr share vout, Resr–C1 share cap_node.
        assert_eq!(t.adjacency, vec![vec![0, 0, 1, 1], vec![0, 0, 1, 0], vec![1, 1, 0, 0], vec![1, 0, 0, 0]]);
    }

    #[test]
    fn current_mirror_is_bias_domain() {
        assert_eq!(get_template("current_mirror").unwrap().domain, Domain::Bias);
    }

    #[test]
    fn unknown_template() {
        assert!(matches!(get_template("tesla_coil"), Err(Error::UnknownTopology(_))));
    }

    #[test]
    fn multiset_is_order_invariant() {
        let mut t = get_template("wien_bridge").unwrap().clone();
        let before = required_components(&t);
        t.slots.reverse();
        assert_eq!(required_components(&t), before);
        t.slots.clear();
        assert!(required_components(&t).is_empty());
    }

    #[test]
    fn rwpe_triangle_closed_form() {
        let f = rwpe_from_adjacency(&triangle(), 8).unwrap();
        let expected = [0.0, 0.5, 0.25, 0.375, 0.3125, 0.34375, 0.328125, 0.3359375];
        for node in &f.features {
            for (k, (&got, &want)) in node.iter().zip(&expected).enumerate() {
                let closed = (1.0 + 2.0 * (-0.5f64).powi(k as i32 + 1)) / 3.0;
                assert!((got - want).abs() < 1e-12);
                assert!((got - closed).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rwpe_single_edge_alternates() {
        let f = rwpe_from_adjacency(&[vec![0, 1], vec![1, 0]], 8).unwrap();
        for node in &f.features {
            assert_eq!(node, &vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn rwpe_rejects_disconnected() {
        let adj = vec![vec![0, 1, 0], vec![1, 0, 0], vec![0, 0, 0]];
        assert!(matches!(rwpe_from_adjacency(&adj, 8), Err(Error::DisconnectedTopology(_))));
    }

    #[test]
    fn rwpe_of_templates_is_a_probability_with_zero_first_step() {
        for t in builtin_library().templates() {
            let f = compute_rwpe(t, RWPE_STEPS).unwrap();
            assert_eq!(f.features.len(), t.slot_count());
            for node in &f.features {
                assert_eq!(node.len(), RWPE_STEPS);
                assert_eq!(node[0], 0.0);
                assert!(node.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
    }

    #[test]
    fn rwpe_is_permutation_equivariant() {
        let adj = get_template("wien_bridge").unwrap().adjacency.clone();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let n = adj.len();
        let permuted: Vec<Vec<u8>> = (0..n).map(|i| (0..n).map(|j| adj[perm[i]][perm[j]]).collect()).collect();
        let a = rwpe_from_adjacency(&adj, 8).unwrap();
        let b = rwpe_from_adjacency(&permuted, 8).unwrap();
        for i in 0..n {
            for k in 0..8 {
                assert!((b.features[i][k] - a.features[perm[i]][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_slots_return_the_bound() {
        let mut t = get_template("inverting_amp").unwrap().clone();
        for s in &mut t.slots {
            s.hi = s.lo * 1.0;
        }
        t.slots[0].lo = 1234.5;
        t.slots[0].hi = 1234.5;
        let d = sample_random_design(&t, &t.nominal_spec(), 1);
        assert_eq!(d.components[0].value, 1234.5);
        assert_eq!(d.components[1].value, t.slots[1].lo);
    }

    #[test]
    fn sampled_values_are_e24_and_in_bounds() {
        for t in builtin_library().templates() {
            for seed in 0..50 {
                let d = sample_random_design(t, &t.nominal_spec(), seed);
                for (c, s) in d.components.iter().zip(&t.slots) {
                    assert!(is_e24(c.value), "{} not E24", c.value);
                    assert!(c.value >= s.lo * (1.0 - 1e-12) && c.value <= s.hi * (1.0 + 1e-12));
                }
                assert_eq!(d, sample_random_design(t, &t.nominal_spec(), seed));
            }
        }
    }

    #[test]
    fn log_mean_of_resistor_draws_is_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (lo, hi) = (1e3, 1e4);
        let n = 10_000;
        let logs: Vec<f64> = (0..n).map(|_| snap_e24(log_uniform(&mut rng, lo, hi), lo, hi).log10()).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        // Uniform over one decade: σ = 1/√12 per draw.
        let sigma = (1.0 / 12f64).sqrt() / (n as f64).sqrt();
        assert!((mean - 3.5).abs() < 3.0 * sigma + 0.01, "log-mean {mean}");
    }

    #[test]
    fn sampled_specs_respect_requirements() {
        let t = get_template("buck").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let s = t.sample_spec(&mut rng);
            assert!(s[&SpecKey::Vout] < 0.85 * s[&SpecKey::Vin]);
            for r in &t.spec_ranges {
                assert!(s[&r.key] >= r.lo && s[&r.key] <= r.hi);
            }
        }
    }

    #[test]
    fn slot_binding_and_values() {
        let t = get_template("current_mirror").unwrap();
        let d = sample_random_design(t, &t.nominal_spec(), 3);
        let mut shuffled = d.clone();
        // stable reorder keeps same-type components in slot order
        shuffled.components.sort_by_key(|c| std::cmp::Reverse(c.kind));
        let expected: Vec<f64> = d.components.iter().map(|c| c.value).collect();
        assert_eq!(t.slot_values(&shuffled).unwrap(), expected);
        let mut missing = d.clone();
        missing.components.pop();
        assert!(t.slot_values(&missing).is_none());
    }

    #[test]
    fn parse_errors_are_reported() {
        assert!(TopologyTemplate::parse("name buck\ndomain nowhere\n").is_err());
        let src = include_str!("../templates/buck.tpl").replace("slot Resr RESISTOR 1e-3 1", "slot Resr RESISTOR 1 1e-3");
        assert!(TopologyTemplate::parse(&src).is_err());
        let src = include_str!("../templates/buck.tpl").replace("Resr vout cap_node", "Resr vx cap_x");
        assert!(matches!(TopologyTemplate::parse(&src), Err(Error::DisconnectedTopology(_))));
    }
}
