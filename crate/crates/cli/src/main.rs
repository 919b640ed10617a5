mod settings;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use circgen::datagen::{augment_dataset, generate_dataset, read_dataset, write_dataset};
use circgen::evaluate::{evaluate, EvalConfig};
use circgen::grammar::{validate_sequence, ConstraintLevel};
use circgen::model::{sequence_template, Model};
use circgen::rank::{best_of_n, svd_warm_start, train_reward_model, Ranker, RewardModel};
use circgen::rl::train_rl;
use circgen::search::{ga_optimize, random_search, warm_start_ga, ModelGenerator, Spec};
use circgen::simulate::Backend;
use circgen::tokenizer::{decode_sequence, vocab, SpecKey, TokenSequence};
use circgen::topology::{builtin_library, TopologyTemplate};
use circgen::{Error, ModelF32, Result, RewardModelF32};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "circgen", version, about = "Spec-conditioned sizing of analog circuit templates")]
struct Cli {
    /// RNG seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Simulation backend: analytic or spice.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Settings file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set temperature=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write a JSON report (resolved settings and result) here.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Rs,
    Ga,
    Warm,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum RankerKind {
    Conf,
    Rm,
    Spice,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the token vocabulary.
    Vocab,
    /// Sample, simulate and label random designs.
    Datagen {
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Comma-separated template names (default: all).
        #[arg(long)]
        templates: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training on a dataset.
    TrainSl {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Policy-gradient fine-tuning against the simulator.
    TrainRl {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        algorithm: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        templates: Option<String>,
        /// Per-step JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the reward model on a dataset.
    TrainRm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generator checkpoint whose embeddings seed the reward model.
        #[arg(long)]
        warm_start: Option<PathBuf>,
    },
    /// Sample designs from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        topology: String,
        /// e.g. `VIN=12,VOUT=5`; missing keys take the template's nominal value.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        level: Option<String>,
    },
    /// Check a token sequence against the grammar.
    Validate {
        /// Whitespace-separated token names.
        #[arg(long, conflicts_with = "file")]
        tokens: Option<String>,
        /// One sequence per line.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        level: String,
    },
    /// Search slot values directly.
    Search {
        #[arg(long)]
        topology: String,
        #[arg(long, value_enum, default_value_t = Method::Ga)]
        method: Method,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        spec: Option<String>,
        /// Generator for `--method warm`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Best-of-N selection over one or more checkpoints.
    Rank {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        topology: String,
        #[arg(long)]
        spec: Option<String>,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, value_enum, default_value_t = RankerKind::Conf)]
        ranker: RankerKind,
        /// Reward model for `--ranker rm`.
        #[arg(long)]
        rm: Option<PathBuf>,
    },
    /// Validity, simulation and reward statistics of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        templates: Option<String>,
        #[arg(long, default_value_t = 5)]
        specs: usize,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long)]
        bootstrap: bool,
        #[arg(long)]
        level: Option<String>,
    },
}

fn resolve(cli: &Cli) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(p) = &cli.config {
        s.apply_file(p)?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::BadConfig(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        s.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if let Some(b) = &cli.backend {
        s.backend = b.clone();
    }
    Ok(s)
}

fn templates_arg(arg: &Option<String>) -> Result<Vec<&'static TopologyTemplate>> {
    let lib = builtin_library();
    match arg {
        None => Ok(lib.templates().iter().collect()),
        Some(list) => list.split(',').map(|n| lib.get(n.trim())).collect(),
    }
}

fn parse_spec(t: &TopologyTemplate, arg: &Option<String>) -> Result<Spec> {
    let mut spec = t.nominal_spec();
    let Some(list) = arg else { return Ok(spec) };
    for item in list.split(',').filter(|s| !s.trim().is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| Error::BadConfig(format!("spec item `{item}`")))?;
        let key = SpecKey::from_name(&k.trim().to_ascii_uppercase())
            .ok_or_else(|| Error::BadConfig(format!("unknown spec key `{k}`")))?;
        if !spec.contains_key(&key) {
            return Err(Error::BadConfig(format!("{} does not use {key}", t.name)));
        }
        let v: f64 = v.trim().parse().map_err(|_| Error::BadConfig(format!("bad spec value `{v}`")))?;
        if !(v > 0.0) {
            return Err(Error::NonPositiveValue(v));
        }
        spec.insert(key, v);
    }
    Ok(spec)
}

fn token_string(seq: &TokenSequence) -> String {
    let v = vocab();
    seq.trimmed().iter().map(|&t| v.name(t)).collect::<Vec<_>>().join(" ")
}

fn parse_tokens(line: &str) -> Result<TokenSequence> {
    let v = vocab();
    Ok(TokenSequence::new(line.split_whitespace().map(|s| v.parse(s)).collect::<Result<_>>()?))
}

fn load_model(path: &Path) -> Result<ModelF32> {
    Model::load(path, None)
}

/// Runs one subcommand. Returns the report payload and the text for stdout.
fn run(cli: &Cli, s: &mut Settings) -> Result<(Value, String)> {
    let backend = Backend::parse(&s.backend)?;
    match &cli.command {
        Command::Vocab => {
            let v = vocab();
            Ok((json!({ "size": v.len() }), v.dump_table()))
        }
        Command::Datagen { count, templates, out } => {
            let ts = templates_arg(templates)?;
            let (records, summary) = generate_dataset(&ts, *count, &backend, s.seed)?;
            write_dataset(out, &records)?;
            let summary = serde_json::to_value(&summary)?;
            let text =
                format!("wrote {} records to {}\n{}", records.len(), out.display(), serde_json::to_string_pretty(&summary)?);
            Ok((summary, text))
        }
        Command::TrainSl { data, out, epochs, init } => {
            if let Some(e) = epochs {
                s.epochs = *e;
            }
            let records = read_dataset(data)?;
            let valid: Vec<_> = records.iter().filter(|r| r.valid).cloned().collect();
            let used = if valid.is_empty() { records } else { valid };
            let seqs: Vec<TokenSequence> = augment_dataset(&used, s.augment.max(1), s.seed)?.into_iter().map(|a| a.seq).collect();
            let mut model = match init {
                Some(p) => load_model(p)?,
                None => Model::new(s.model_config()?, s.seed)?,
            };
            let report = model.train_sl(&seqs, builtin_library(), &s.train_config())?;
            model.save(out)?;
            let first = report.epoch_losses.first().copied().unwrap_or(f64::NAN);
            let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
            let text = format!(
                "trained on {} sequences ({} records), {} parameters\nloss {first:.4} -> {last:.4}\nsaved {}",
                seqs.len(),
                used.len(),
                model.num_parameters(),
                out.display()
            );
            Ok((json!({ "sequences": seqs.len(), "epoch_losses": report.epoch_losses }), text))
        }
        Command::TrainRl { init, out, algorithm, steps, templates, log } => {
            if let Some(a) = algorithm {
                s.algorithm = a.parse()?;
            }
            if let Some(n) = steps {
                s.rl_steps = *n;
            }
            let ts = templates_arg(templates)?;
            let reference = load_model(init)?;
            let mut policy = reference.clone();
            let report = train_rl(&mut policy, &reference, &ts, &backend, &s.rl_config(), log.as_deref())?;
            policy.save(out)?;
            let mut text = String::new();
            for st in &report.steps {
                text += &format!(
                    "step {:>4} reward {:.3} kl {:.4} beta {:.4} sim_valid {:.2}\n",
                    st.step, st.mean_reward, st.kl, st.beta, st.sim_valid
                );
            }
            text += &format!(
                "best held-out sim validity {:.3} at step {}\nsaved {}",
                report.best_sim_valid,
                report.best_step,
                out.display()
            );
            Ok((serde_json::to_value(&report)?, text))
        }
        Command::TrainRm { data, out, warm_start } => {
            let records = read_dataset(data)?;
            let pairs: Vec<(TokenSequence, f64)> =
                records.iter().map(|r| Ok((r.sequence()?, r.reward.total))).collect::<Result<_>>()?;
            let mut rm: RewardModelF32 = RewardModel::new(s.rm_config()?, s.seed)?;
            if let Some(p) = warm_start {
                let g = load_model(p)?;
                let proj = svd_warm_start(g.param("tok_emb").expect("token table"), rm.config.d_model);
                rm.set_token_embeddings(proj.embeddings)?;
            }
            let report = train_reward_model(&mut rm, &pairs, &s.rm_train_config())?;
            rm.save(out)?;
            let h = &report.held_out;
            let text = format!(
                "held-out n={} pearson {:.3} spearman {:.3} mae {:.3} rmse {:.3} within0.5 {:.3} within1.0 {:.3}\nsaved {}",
                h.n,
                h.pearson,
                h.spearman,
                h.mae,
                h.rmse,
                h.within_half,
                h.within_one,
                out.display()
            );
            Ok((serde_json::to_value(&report)?, text))
        }
        Command::Generate { checkpoint, topology, spec, n, level } => {
            if let Some(l) = level {
                s.level = l.parse()?;
            }
            let model = load_model(checkpoint)?;
            let t = builtin_library().get(topology)?;
            let spec = parse_spec(t, spec)?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(s.seed);
            let mut out = Vec::new();
            let mut text = String::new();
            for _ in 0..*n {
                let seq = model.generate_with(t, &spec, &s.sampling(), &mut rng)?;
                let design = decode_sequence(&seq).ok();
                text += &format!("{}\n", token_string(&seq));
                out.push(json!({ "tokens": token_string(&seq), "design": design }));
            }
            Ok((json!({ "samples": out }), text.trim_end().to_string()))
        }
        Command::Validate { tokens, file, level } => {
            let level: ConstraintLevel = level.parse()?;
            let lines: Vec<String> = match (tokens, file) {
                (Some(t), _) => vec![t.clone()],
                (None, Some(f)) => {
                    std::fs::read_to_string(f)?.lines().filter(|l| !l.trim().is_empty()).map(String::from).collect()
                }
                (None, None) => return Err(Error::BadConfig("give --tokens or --file".into())),
            };
            let mut out = Vec::new();
            let mut text = String::new();
            for line in &lines {
                let seq = parse_tokens(line)?;
                let t = sequence_template(&seq.tokens, builtin_library());
                let r = validate_sequence(&seq, level, t);
                text += &format!("{}\n", r);
                out.push(json!({
                    "valid": r.valid,
                    "structural": r.structural,
                    "components_correct": r.components_correct,
                    "values_in_range": r.values_in_range,
                    "first_violation": r.first_violation,
                    "reason": r.reason,
                }));
            }
            Ok((json!({ "level": level, "results": out }), text.trim_end().to_string()))
        }
        Command::Search { topology, method, budget, spec, checkpoint } => {
            let t = builtin_library().get(topology)?;
            let spec = parse_spec(t, spec)?;
            let start = Instant::now();
            let (result, extra) = match method {
                Method::Rs => (random_search(t, &spec, budget.unwrap_or(320), &backend, s.seed)?, json!({})),
                Method::Ga => {
                    let cfg = budget.map_or(s.ga_config(), |b| s.ga_config().with_budget(b));
                    (ga_optimize(t, &spec, &cfg, &backend, &[])?, json!({}))
                }
                Method::Warm => {
                    let path = checkpoint.as_ref().ok_or_else(|| Error::BadConfig("--method warm needs --checkpoint".into()))?;
                    let model = load_model(path)?;
                    let mut generator = ModelGenerator::new(&model, s.sampling());
                    let cfg = budget.map_or(s.ga_config(), |b| s.ga_config().with_budget(b.saturating_sub(s.n_seeds)));
                    let w = warm_start_ga(t, &spec, &mut generator, s.n_seeds, &cfg, &backend)?;
                    let extra = json!({ "generator_evaluations": w.generator_evaluations, "ga_evaluations": w.ga_evaluations, "seeded": w.seeded });
                    (w.result, extra)
                }
            };
            let secs = start.elapsed().as_secs_f64();
            let payload = json!({
                "method": format!("{method:?}").to_lowercase(),
                "design": result.design,
                "reward": result.reward,
                "evaluations": result.evaluations,
                "details": extra,
            });
            let mut line = payload.clone();
            line["wall_time_s"] = json!(secs);
            Ok((payload, serde_json::to_string(&line)?))
        }
        Command::Rank { checkpoint, topology, spec, n, ranker, rm } => {
            let t = builtin_library().get(topology)?;
            let spec = parse_spec(t, spec)?;
            let models = checkpoint.iter().map(|p| load_model(p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&ModelF32> = models.iter().collect();
            let rm_model = match (ranker, rm) {
                (RankerKind::Rm, Some(p)) => Some(RewardModel::load(p)?),
                (RankerKind::Rm, None) => return Err(Error::BadConfig("--ranker rm needs --rm".into())),
                _ => None,
            };
            let r = match ranker {
                RankerKind::Conf => Ranker::Confidence,
                RankerKind::Rm => Ranker::RewardModel(rm_model.as_ref().expect("loaded above")),
                RankerKind::Spice => Ranker::Spice(&backend),
            };
            let result = best_of_n(&refs, t, &spec, *n, &r, &s.sampling())?;
            let mut text = String::new();
            for (i, c) in result.candidates.iter().enumerate() {
                text += &format!("[{i}] gen {} {} {:.4}  {}\n", c.generator, c.source.name(), c.score, token_string(&c.seq));
            }
            text += &format!(
                "winner: gen {} score {:.4}\n{}",
                result.winner.generator,
                result.winner.score,
                token_string(&result.winner.seq)
            );
            Ok((serde_json::to_value(&result)?, text))
        }
        Command::Evaluate { checkpoint, templates, specs, samples, bootstrap, level } => {
            if let Some(l) = level {
                s.level = l.parse()?;
            }
            let model = load_model(checkpoint)?;
            let ts = templates_arg(templates)?;
            let cfg = EvalConfig {
                specs_per_topology: *specs,
                samples_per_spec: *samples,
                sampling: s.sampling(),
                bootstrap: *bootstrap,
                seed: s.seed,
            };
            let report = evaluate(&model, &ts, &backend, &cfg)?;
            let text = report.table();
            // timings stay out of the report file so reruns compare equal
            let mut stable = report.clone();
            stable.aggregate.wall_time = 0.0;
            stable.per_topology.values_mut().for_each(|r| r.wall_time = 0.0);
            Ok((serde_json::to_value(&stable)?, text))
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Vocab => "vocab",
        Command::Datagen { .. } => "datagen",
        Command::TrainSl { .. } => "train-sl",
        Command::TrainRl { .. } => "train-rl",
        Command::TrainRm { .. } => "train-rm",
        Command::Generate { .. } => "generate",
        Command::Validate { .. } => "validate",
        Command::Search { .. } => "search",
        Command::Rank { .. } => "rank",
        Command::Evaluate { .. } => "evaluate",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = resolve(&cli).and_then(|mut s| {
        let (payload, text) = run(&cli, &mut s)?;
        if let Some(p) = &cli.report {
            let report = json!({ "command": command_name(&cli.command), "settings": s, "result": payload });
            std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
        }
        // a closed pipe (e.g. `| head`) is not an error
        let _ = writeln!(std::io::stdout().lock(), "{text}");
        Ok(())
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
