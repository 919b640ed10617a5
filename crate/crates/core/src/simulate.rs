//! Netlist emission, the two simulation backends and the reward.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::tokenizer::{CircuitDesign, ComponentKind, SpecKey};
use crate::topology::{get_template, AnalyticModel, Domain, Metric, TopologyTemplate};

/// Unity-gain bandwidth of the op-amp macro model, used when a template has no `gbw` param.
pub const DEFAULT_GBW: f64 = 1e6;
/// Op-amp open-loop DC gain in the macro model.
pub const OPAMP_DC_GAIN: f64 = 1e5;
const VBE: f64 = 0.7;
pub const DEFAULT_SPICE_TIMEOUT: Duration = Duration::from_secs(10);
pub const NGSPICE_ENV: &str = "CIRCGEN_NGSPICE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub converged: bool,
    pub domain: Domain,
    pub values: BTreeMap<Metric, f64>,
}

impl SimMetrics {
    pub fn failed(domain: Domain) -> Self {
        Self { converged: false, domain, values: BTreeMap::new() }
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.get(&m).copied()
    }

    /// Converged with finite values, efficiency in `[0, 1]` and positive frequencies.
    pub fn plausible(&self) -> bool {
        self.converged
            && !self.values.is_empty()
            && self.values.iter().all(|(&m, &v)| {
                v.is_finite()
                    && match m {
                        Metric::Efficiency => (0.0..=1.0).contains(&v),
                        m if m.is_frequency() => v > 0.0,
                        Metric::Ripple | Metric::Amplitude => v >= 0.0,
                        _ => true,
                    }
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_struct: f64,
    pub r_sim: f64,
    pub r_accuracy: f64,
    pub r_efficiency: f64,
    pub r_quality: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.r_struct + self.r_sim + self.r_accuracy + self.r_efficiency + self.r_quality;
        self
    }
}

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

fn rel_err(value: f64, target: f64) -> f64 {
    (value - target).abs() / target.abs()
}

/// Reward for a design given its measured metrics.
pub fn compute_reward(template: &TopologyTemplate, design: &CircuitDesign, m: &SimMetrics) -> RewardBreakdown {
    let mut r = RewardBreakdown::default();
    if design.topology != template.name || design.kinds_sorted() != template.kinds_sorted() {
        return r.finish();
    }
    r.r_struct = 1.0;
    if !m.plausible() {
        return r.finish();
    }
    let primary = template.primary.target.resolve(&design.spec).zip(m.get(template.primary.metric));
    let Some((target, value)) = primary else {
        return r.finish();
    };
    r.r_sim = 1.0;
    r.r_accuracy = 3.0 * clamp01(1.0 - rel_err(value, target) / 0.5);
    if template.domain == Domain::Power {
        if let Some(eta) = m.get(Metric::Efficiency) {
            r.r_efficiency = 2.0 * clamp01((eta - 0.5) / 0.45);
        }
        if let Some(ripple) = m.get(Metric::Ripple) {
            r.r_quality = clamp01(1.0 - ripple / 0.1);
        }
    } else if let Some(sec) = &template.secondary {
        if let (Some(t), Some(v)) = (sec.target.resolve(&design.spec), m.get(sec.metric)) {
            r.r_efficiency = 2.0 * clamp01(1.0 - rel_err(v, t) / 0.5);
            let (lo, hi) = if t >= 0.0 { (t / 2.0, 2.0 * t) } else { (2.0 * t, t / 2.0) };
            r.r_quality = if v.is_finite() && v >= lo && v <= hi { 1.0 } else { 0.0 };
        }
    }
    r.finish()
}

/// Scientific notation with three decimals and an explicitly signed two-digit exponent.
pub fn fmt_sci(v: f64) -> String {
    let s = format!("{v:.3e}");
    let (mant, exp) = s.split_once('e').expect("exponent present");
    let e: i32 = exp.parse().expect("integer exponent");
    let sign = if e < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", e.abs())
}

fn spec_value(design: &CircuitDesign, key: SpecKey) -> Result<f64> {
    design
        .spec
        .get(&key)
        .copied()
        .ok_or_else(|| Error::ComponentMismatch(format!("{}: missing spec {}", design.topology, key.name())))
}

/// Duty cycle implied by the target conversion ratio.
fn duty(model: AnalyticModel, vin: f64, vout: f64) -> f64 {
    let d = match model {
        AnalyticModel::Buck => vout / vin,
        AnalyticModel::Boost => 1.0 - vin / vout,
        AnalyticModel::BuckBoost => vout / (vin + vout),
        _ => 0.5,
    };
    d.clamp(0.0, 0.95)
}

/// Placeholder values derived from the spec and template parameters.
fn derived_placeholders(t: &TopologyTemplate, d: &CircuitDesign) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (&k, &v) in &d.spec {
        out.insert(k.name().to_string(), v);
    }
    for (k, &v) in &t.params {
        out.insert(k.to_ascii_uppercase(), v);
    }
    match t.domain {
        Domain::Power => {
            let fsw = t.param("fsw").unwrap_or(1e5);
            let (vin, vout, iout) = (spec_value(d, SpecKey::Vin)?, spec_value(d, SpecKey::Vout)?, spec_value(d, SpecKey::Iout)?);
            let period = 1.0 / fsw;
            let stop = 400.0 * period;
            out.insert("TPER".into(), period);
            out.insert("TON".into(), duty(t.model, vin, vout) * period);
            out.insert("RLOAD".into(), vout / iout);
            out.insert("TSTEP".into(), period / 100.0);
            out.insert("TSTOP".into(), stop);
            out.insert("TMEAS".into(), 0.75 * stop);
        }
        Domain::Oscillator => {
            let f = spec_value(d, SpecKey::Fosc)?;
            out.insert("TSTEP".into(), 1.0 / (200.0 * f));
            out.insert("TSTOP".into(), 120.0 / f);
        }
        Domain::Filter => {
            let f = spec_value(d, SpecKey::Fc)?;
            out.insert("FSTART".into(), f / 100.0);
            out.insert("FSTOP".into(), f * 100.0);
        }
        _ => {}
    }
    let gbw = t.param("gbw").unwrap_or(DEFAULT_GBW);
    out.insert("CPOLE".into(), OPAMP_DC_GAIN / (2.0 * std::f64::consts::PI * 1e3 * gbw));
    Ok(out)
}

/// The template netlist with every `{NAME}` placeholder substituted.
pub fn emit_netlist_for(t: &TopologyTemplate, d: &CircuitDesign) -> Result<String> {
    let values = t.slot_values(d).ok_or_else(|| Error::ComponentMismatch(t.name.clone()))?;
    let mut table = derived_placeholders(t, d)?;
    for (slot, v) in t.slots.iter().zip(values) {
        table.insert(slot.role.clone(), v);
    }
    let src = &t.netlist;
    let mut out = String::with_capacity(src.len() + 64);
    let mut rest = src.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').ok_or_else(|| Error::Template(format!("{}: unterminated placeholder", t.name)))?;
        let key = &rest[open + 1..open + close];
        let v = table.get(key).ok_or_else(|| Error::Template(format!("{}: unknown placeholder {{{key}}}", t.name)))?;
        out.push_str(&fmt_sci(*v));
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Netlist for a design over a builtin template.
pub fn emit_netlist(d: &CircuitDesign) -> Result<String> {
    emit_netlist_for(get_template(&d.topology)?, d)
}

fn slot_value(t: &TopologyTemplate, values: &[f64], role: &str) -> f64 {
    values[t.slots.iter().position(|s| s.role == role).unwrap_or_else(|| panic!("{}: no slot {role}", t.name))]
}

/// Closed-form metrics. Designs that do not fit the template are reported as not converged.
pub fn analytic_eval_for(t: &TopologyTemplate, d: &CircuitDesign) -> SimMetrics {
    let Some(x) = t.slot_values(d) else {
        return SimMetrics::failed(t.domain);
    };
    let v = |role: &str| slot_value(t, &x, role);
    let mut values = BTreeMap::new();
    let mut converged = true;
    let gbw = t.param("gbw").unwrap_or(DEFAULT_GBW);
    let spec = |k: SpecKey| d.spec.get(&k).copied().unwrap_or(f64::NAN);
    match t.model {
        AnalyticModel::Buck | AnalyticModel::Boost | AnalyticModel::BuckBoost => {
            let (vin, vset, iout) = (spec(SpecKey::Vin), spec(SpecKey::Vout), spec(SpecKey::Iout));
            let fsw = t.param("fsw").unwrap_or(1e5);
            let r_load = vset / iout;
            let dc = duty(t.model, vin, vset);
            let has_diode = t.slots.iter().any(|s| s.kind == ComponentKind::Diode);
            let r_d = if has_diode { v("D1") } else { 0.0 };
            let r_cond = v("S1") * dc + r_d * (1.0 - dc);
            let (l, c, r_esr) = (v("L1"), v("C1"), v("Resr"));
            let (vout, i_l, dv) = match t.model {
                AnalyticModel::Buck => {
                    let vout = dc * vin / (1.0 + r_cond / r_load);
                    let i_l = vout / r_load;
                    let di = (vin - vout).max(0.0) * dc / (l * fsw);
                    (vout, i_l, di * (r_esr + 1.0 / (8.0 * fsw * c)))
                }
                _ => {
                    let off = 1.0 - dc;
                    let gain = if t.model == AnalyticModel::Boost { 1.0 } else { dc };
                    let mag = gain * vin / (off + r_cond / (r_load * off));
                    let i_out = mag / r_load;
                    let i_l = i_out / off;
                    let dv = i_out * dc / (fsw * c) + i_l * r_esr;
                    let vout = if t.model == AnalyticModel::BuckBoost { -mag } else { mag };
                    (vout, i_l, dv)
                }
            };
            let p_out = vout * vout / r_load;
            let i_out = vout.abs() / r_load;
            let p_loss = i_l * i_l * r_cond + i_out * i_out * r_esr;
            values.insert(Metric::VOut, vout);
            values.insert(Metric::Efficiency, if p_out + p_loss > 0.0 { p_out / (p_out + p_loss) } else { 0.0 });
            values.insert(Metric::Ripple, dv / vout.abs());
        }
        AnalyticModel::InvertingAmp => {
            let ratio = v("Rf") / v("Rin");
            values.insert(Metric::Gain, -ratio);
            values.insert(Metric::Bandwidth, gbw / (1.0 + ratio));
        }
        AnalyticModel::NoninvertingAmp => {
            let gain = 1.0 + v("Rf") / v("Rg");
            values.insert(Metric::Gain, gain);
            values.insert(Metric::Bandwidth, gbw / gain);
        }
        AnalyticModel::SallenKeyLowpass => {
            let prod = v("R1") * v("R2") * v("C1") * v("C2");
            values.insert(Metric::Cutoff, 1.0 / (2.0 * std::f64::consts::PI * prod.sqrt()));
            values.insert(Metric::PassbandGain, OPAMP_DC_GAIN / (1.0 + OPAMP_DC_GAIN));
        }
        AnalyticModel::WienBridge => {
            let (r1, c1, r2, c2) = (v("R1"), v("C1"), v("R2"), v("C2"));
            let loop_gain = (v("Rf") / v("Rg")) / (r1 / r2 + c2 / c1);
            if loop_gain >= 1.0 {
                let vsat = t.param("vsat").unwrap_or(12.0);
                values.insert(Metric::Frequency, 1.0 / (2.0 * std::f64::consts::PI * (r1 * r2 * c1 * c2).sqrt()));
                values.insert(Metric::Amplitude, vsat * (1.0 - 1.0 / loop_gain));
            } else {
                converged = false;
            }
        }
        AnalyticModel::CurrentMirror => {
            let vin = spec(SpecKey::Vin);
            let (r_ref, beta2, re1, re2) = (v("Rref"), v("Q2"), v("Re1"), v("Re2"));
            let k = re1 / re2;
            let i_e1 = (vin - VBE) / (r_ref * (1.0 + k / (beta2 + 1.0)) + re1);
            if i_e1 <= 0.0 {
                converged = false;
            } else {
                let i_ref = i_e1 * (1.0 + k / (beta2 + 1.0));
                let i_out = k * i_e1 * beta2 / (beta2 + 1.0);
                values.insert(Metric::OutputCurrent, i_out);
                values.insert(Metric::MirrorRatio, i_out / i_ref);
            }
        }
    }
    if !converged {
        values.clear();
    }
    SimMetrics { converged, domain: t.domain, values }
}

pub fn analytic_eval(d: &CircuitDesign) -> Result<SimMetrics> {
    Ok(analytic_eval_for(get_template(&d.topology)?, d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpiceConfig {
    pub executable: PathBuf,
    pub timeout: Duration,
}

impl Default for SpiceConfig {
    fn default() -> Self {
        let executable = std::env::var_os(NGSPICE_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("ngspice"));
        Self { executable, timeout: DEFAULT_SPICE_TIMEOUT }
    }
}

impl SpiceConfig {
    /// Whether the configured executable can be started.
    pub fn available(&self) -> bool {
        Command::new(&self.executable)
            .arg("--version")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .is_ok()
    }
}

/// Runs `netlist` in batch mode and returns the combined output, or `None` on timeout.
pub fn run_spice_raw(netlist: &str, cfg: &SpiceConfig) -> Result<Option<String>> {
    let dir = tempfile::tempdir()?;
    let cir = dir.path().join("circuit.cir");
    let log = dir.path().join("out.log");
    std::fs::write(&cir, netlist)?;
    let out = File::create(&log)?;
    let err = out.try_clone()?;
    let mut child = Command::new(&cfg.executable)
        .arg("-b")
        .arg(&cir)
        .current_dir(dir.path())
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .spawn()
        .map_err(|e| Error::SimulatorUnavailable(format!("{}: {e}", cfg.executable.display())))?;
    match child.wait_timeout(cfg.timeout)? {
        Some(_) => Ok(Some(String::from_utf8_lossy(&std::fs::read(&log)?).into_owned())),
        None => {
            child.kill().ok();
            child.wait().ok();
            Ok(None)
        }
    }
}

/// `name = value` pairs from measurement and print lines, for the requested names.
pub fn parse_measurements(output: &str, names: &[&str]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for line in output.lines() {
        let Some((lhs, rhs)) = line.split_once('=') else { continue };
        let name = lhs.trim().to_ascii_lowercase();
        if !names.contains(&name.as_str()) {
            continue;
        }
        let tok = rhs.split_whitespace().next().unwrap_or("");
        let v: f64 = tok.parse().map_err(|_| Error::ParseFailure(format!("`{}`", line.trim())))?;
        out.insert(name, v);
    }
    Ok(out)
}

fn output_failed(output: &str) -> bool {
    let lower = output.to_ascii_lowercase();
    ["timestep too small", "simulation(s) aborted", "singular matrix", "no such vector", "fatal error"]
        .iter()
        .any(|p| lower.contains(p))
        || lower.lines().any(|l| l.trim_start().starts_with("error"))
}

/// Interprets simulator output for a template's domain.
pub fn parse_spice_output(t: &TopologyTemplate, output: &str) -> Result<SimMetrics> {
    let names: &[&str] = match t.domain {
        Domain::Power => &["v_out", "v_max", "v_min", "p_in", "p_out"],
        Domain::Amplifier => &["gain", "phase", "bandwidth"],
        Domain::Filter => &["passband_gain", "f_c"],
        Domain::Oscillator => &["f_osc", "amplitude"],
        Domain::Bias => &["i_out", "mirror_ratio"],
    };
    let m = parse_measurements(output, names)?;
    if output_failed(output) || names.iter().any(|n| !m.contains_key(*n)) {
        return Ok(SimMetrics::failed(t.domain));
    }
    let mut values = BTreeMap::new();
    match t.domain {
        Domain::Power => {
            let vout = m["v_out"];
            values.insert(Metric::VOut, vout);
            values.insert(Metric::Efficiency, if m["p_in"] > 0.0 { m["p_out"] / m["p_in"] } else { f64::NAN });
            values.insert(Metric::Ripple, (m["v_max"] - m["v_min"]) / vout.abs());
        }
        Domain::Amplifier => {
            let sign = if m["phase"].cos() < 0.0 { -1.0 } else { 1.0 };
            values.insert(Metric::Gain, sign * m["gain"]);
            values.insert(Metric::Bandwidth, m["bandwidth"]);
        }
        Domain::Filter => {
            values.insert(Metric::PassbandGain, m["passband_gain"]);
            values.insert(Metric::Cutoff, m["f_c"]);
        }
        Domain::Oscillator => {
            values.insert(Metric::Frequency, m["f_osc"]);
            values.insert(Metric::Amplitude, m["amplitude"]);
        }
        Domain::Bias => {
            values.insert(Metric::OutputCurrent, m["i_out"].abs());
            values.insert(Metric::MirrorRatio, m["mirror_ratio"].abs());
        }
    }
    Ok(SimMetrics { converged: true, domain: t.domain, values })
}

pub fn run_spice_for(t: &TopologyTemplate, d: &CircuitDesign, cfg: &SpiceConfig) -> Result<SimMetrics> {
    let netlist = emit_netlist_for(t, d)?;
    match run_spice_raw(&netlist, cfg)? {
        Some(out) => parse_spice_output(t, &out),
        None => Ok(SimMetrics::failed(t.domain)),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum Backend {
    #[default]
    Analytic,
    Spice(SpiceConfig),
}

impl Backend {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "analytic" => Ok(Backend::Analytic),
            "spice" | "ngspice" => Ok(Backend::Spice(SpiceConfig::default())),
            _ => Err(Error::BadConfig(format!("unknown backend `{name}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Analytic => "analytic",
            Backend::Spice(_) => "spice",
        }
    }

    /// Metrics for `d`. A design that does not fit `t` comes back as not converged.
    pub fn evaluate(&self, t: &TopologyTemplate, d: &CircuitDesign) -> Result<SimMetrics> {
        match self {
            Backend::Analytic => Ok(analytic_eval_for(t, d)),
            Backend::Spice(cfg) => match run_spice_for(t, d, cfg) {
                Err(Error::ComponentMismatch(_)) => Ok(SimMetrics::failed(t.domain)),
                other => other,
            },
        }
    }

    /// Metrics and reward in one call.
    pub fn score(&self, t: &TopologyTemplate, d: &CircuitDesign) -> Result<(SimMetrics, RewardBreakdown)> {
        let m = self.evaluate(t, d)?;
        let r = compute_reward(t, d, &m);
        Ok((m, r))
    }
}

/// Reward of a generated sequence; sequences that do not decode to a design of
/// `t` score zero and carry no metrics.
pub fn score_sequence(
    backend: &Backend,
    t: &TopologyTemplate,
    seq: &crate::tokenizer::TokenSequence,
) -> Result<(RewardBreakdown, Option<SimMetrics>)> {
    match crate::tokenizer::decode_sequence(seq) {
        Ok(d) if d.topology == t.name => {
            let (m, r) = backend.score(t, &d)?;
            Ok((r, Some(m)))
        }
        _ => Ok((RewardBreakdown::default(), None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{Component, ComponentKind as K};
    use crate::topology::{builtin_library, sample_random_design};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fig2() -> CircuitDesign {
        CircuitDesign {
            topology: "buck".into(),
            spec: [(SpecKey::Vin, 12.0), (SpecKey::Vout, 5.0), (SpecKey::Iout, 1.0)].into(),
            components: vec![
                Component::new(K::Inductor, 100e-6),
                Component::new(K::Capacitor, 22e-6),
                Component::new(K::Resistor, 5e-3),
                Component::new(K::MosfetN, 15e-3),
            ],
        }
    }

    fn design(topology: &str, spec: &[(SpecKey, f64)], comps: &[(K, f64)]) -> CircuitDesign {
        CircuitDesign {
            topology: topology.into(),
            spec: spec.iter().copied().collect(),
            components: comps.iter().map(|&(k, v)| Component::new(k, v)).collect(),
        }
    }

    #[test]
    fn sci_format() {
        assert_eq!(fmt_sci(1e-4), "1.000e-04");
        assert_eq!(fmt_sci(22e-6), "2.200e-05");
        assert_eq!(fmt_sci(12.0), "1.200e+01");
        assert_eq!(fmt_sci(1.5e-120), "1.500e-120");
    }

    #[test]
    fn figure_two_netlist() {
        let n = emit_netlist(&fig2()).unwrap();
        assert!(n.contains("L1 sw_node vout 1.000e-04"), "{n}");
        assert!(n.contains("C1 cap_node 0 2.200e-05 IC=5.000e+00"));
        assert!(n.contains("Rload vout 0 5.000e+00"));
        assert!(!n.contains('{'));
        assert_eq!(n, emit_netlist(&fig2()).unwrap());
        let mut missing = fig2();
        missing.components.remove(0);
        assert!(matches!(emit_netlist(&missing), Err(Error::ComponentMismatch(_))));
    }

    #[test]
    fn every_template_emits() {
        for t in builtin_library().templates() {
            let d = sample_random_design(t, &t.nominal_spec(), 1);
            let n = emit_netlist_for(t, &d).unwrap();
            assert!(!n.contains('{') && n.contains(".end"), "{}", t.name);
        }
    }

    #[test]
    fn analytic_examples() {
        let inv =
            design("inverting_amp", &[(SpecKey::Gain, 10.0), (SpecKey::Bw, 9e4)], &[(K::Resistor, 1e3), (K::Resistor, 1e4)]);
        let m = analytic_eval(&inv).unwrap();
        assert!((m.get(Metric::Gain).unwrap() + 10.0).abs() < 1e-12);
        assert!((m.get(Metric::Bandwidth).unwrap() - 1e6 / 11.0).abs() < 1e-6);

        let c = 15.9e-9;
        let wien = design(
            "wien_bridge",
            &[(SpecKey::Fosc, 1e3)],
            &[
                (K::Resistor, 1e4),
                (K::Capacitor, c),
                (K::Resistor, 1e4),
                (K::Capacitor, c),
                (K::Resistor, 2.2e4),
                (K::Resistor, 1e4),
            ],
        );
        let m = analytic_eval(&wien).unwrap();
        assert!((m.get(Metric::Frequency).unwrap() - 1000.0).abs() < 1.0);
        let mut dead = wien.clone();
        dead.components[4].value = 1.5e4;
        assert!(!analytic_eval(&dead).unwrap().converged);

        let mut lossless = fig2();
        lossless.components[2].value = 0.0;
        lossless.components[3].value = 0.0;
        let m = analytic_eval_for(builtin_library().get("buck").unwrap(), &lossless);
        assert_eq!(m.get(Metric::Efficiency), Some(1.0));
        assert!((m.get(Metric::VOut).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn power_models_hit_targets_when_lossless() {
        for name in ["boost", "buck_boost"] {
            let t = builtin_library().get(name).unwrap();
            let spec = t.nominal_spec();
            let vals: Vec<f64> = t
                .slots
                .iter()
                .map(|s| match s.kind {
                    K::Inductor => 1e-3,
                    K::Capacitor => 1e-3,
                    _ => 0.0,
                })
                .collect();
            let d = CircuitDesign {
                topology: name.into(),
                spec: spec.clone(),
                components: t.slots.iter().zip(&vals).map(|(s, &v)| Component::new(s.kind, v)).collect(),
            };
            let m = analytic_eval_for(t, &d);
            let target = t.primary.target.resolve(&spec).unwrap();
            assert!((m.get(Metric::VOut).unwrap() - target).abs() < 1e-9 * target.abs(), "{name}");
            assert_eq!(m.get(Metric::Efficiency), Some(1.0));
        }
    }

    #[test]
    fn current_mirror_matched_degeneration() {
        let d = design(
            "current_mirror",
            &[(SpecKey::Vin, 10.0), (SpecKey::Iout, 1e-3)],
            &[(K::Resistor, 8.3e3), (K::BjtNpn, 100.0), (K::BjtNpn, 100.0), (K::Resistor, 1e3), (K::Resistor, 1e3)],
        );
        let m = analytic_eval(&d).unwrap();
        // Equal emitter resistors: ratio is β/(β+2).
        assert!((m.get(Metric::MirrorRatio).unwrap() - 100.0 / 102.0).abs() < 1e-12);
        let i_e1 = 9.3 / (8.3e3 * (1.0 + 1.0 / 101.0) + 1e3);
        assert!((m.get(Metric::OutputCurrent).unwrap() - i_e1 * 100.0 / 101.0).abs() < 1e-15);
    }

    fn power_metrics(v_out: f64, eta: f64, ripple: f64) -> SimMetrics {
        SimMetrics {
            converged: true,
            domain: Domain::Power,
            values: [(Metric::VOut, v_out), (Metric::Efficiency, eta), (Metric::Ripple, ripple)].into(),
        }
    }

    #[test]
    fn reward_examples() {
        let t = builtin_library().get("buck").unwrap();
        let d = fig2();
        let perfect = compute_reward(t, &d, &power_metrics(5.0, 0.95, 0.0));
        assert_eq!(perfect.total, 8.0);
        let mid = compute_reward(t, &d, &power_metrics(6.25, 0.725, 0.05));
        assert!((mid.total - 5.0).abs() < 1e-12, "{mid:?}");
        let mut wrong = d.clone();
        wrong.components.pop();
        assert_eq!(compute_reward(t, &wrong, &power_metrics(5.0, 0.95, 0.0)).total, 0.0);
        let failed = compute_reward(t, &d, &SimMetrics::failed(Domain::Power));
        assert_eq!(failed.total, 1.0);
        let implausible = compute_reward(t, &d, &power_metrics(5.0, 1.3, 0.0));
        assert_eq!(implausible.total, 1.0);
    }

    #[test]
    fn reward_bounds_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in builtin_library().templates() {
            for i in 0..200 {
                let spec = t.sample_spec(&mut rng);
                let d = sample_random_design(t, &spec, i);
                let m = analytic_eval_for(t, &d);
                let r = compute_reward(t, &d, &m);
                assert!((0.0..=8.0).contains(&r.total));
                assert!(
                    r.r_struct <= 1.0 && r.r_sim <= 1.0 && r.r_accuracy <= 3.0 && r.r_efficiency <= 2.0 && r.r_quality <= 1.0
                );
                let parts = r.r_struct + r.r_sim + r.r_accuracy + r.r_efficiency + r.r_quality;
                assert_eq!(r.total, parts);
            }
        }
        let t = builtin_library().get("buck").unwrap();
        let mut last = -1.0;
        for k in (0..=40).rev() {
            let e = k as f64 * 0.02;
            let r = compute_reward(t, &fig2(), &power_metrics(5.0 * (1.0 + e), rng.random_range(0.5..1.0), 0.02));
            let r0 = compute_reward(t, &fig2(), &power_metrics(5.0 * (1.0 + e), 0.8, 0.02));
            assert!(r0.total >= last);
            last = r0.total;
            assert!(r.total <= 8.0);
        }
    }

    #[test]
    fn output_parsing() {
        let t = builtin_library().get("buck").unwrap();
        let out = "\nv_out               =  4.950000e+00 from=  3.0e-03 to=  4.0e-03\n\
                   v_max               =  5.000000e+00 at=  3.5e-03\n\
                   v_min               =  4.900000e+00 at=  3.6e-03\n\
                   p_in                =  5.500000e+00 from= 3.0e-03 to= 4.0e-03\n\
                   p_out               =  4.900500e+00 from= 3.0e-03 to= 4.0e-03\n";
        let m = parse_spice_output(t, out).unwrap();
        assert!(m.converged);
        assert!((m.get(Metric::Efficiency).unwrap() - 4.9005 / 5.5).abs() < 1e-12);
        assert!((m.get(Metric::Ripple).unwrap() - 0.1 / 4.95).abs() < 1e-12);
        let partial = parse_spice_output(t, "v_out = 4.9\nError: measure p_in failed\n").unwrap();
        assert!(!partial.converged);
        assert!(matches!(parse_spice_output(t, "v_out = banana\n"), Err(Error::ParseFailure(_))));

        let amp = builtin_library().get("inverting_amp").unwrap();
        let m = parse_spice_output(amp, "gain = 9.99e+00\nphase = 3.14159e+00\nbandwidth = 9.0e4\n").unwrap();
        assert!(m.get(Metric::Gain).unwrap() < 0.0);
    }

    #[test]
    fn missing_executable_is_reported() {
        let cfg = SpiceConfig { executable: "/nonexistent/ngspice".into(), timeout: Duration::from_secs(1) };
        assert!(!cfg.available());
        let t = builtin_library().get("buck").unwrap();
        assert!(matches!(run_spice_for(t, &fig2(), &cfg), Err(Error::SimulatorUnavailable(_))));
    }
}
