//! Batch driver for the qcomm toolkit.
//!
//! Subcommands load channel/protocol/state specs from JSON files, run the
//! requested evaluation and emit machine-readable reports: a JSON-lines
//! stream (one record per instance, after a single header line carrying the
//! timestamp) plus a fixed-column summary CSV. Identical configuration and
//! seed produce byte-identical reports apart from the header line and the
//! wall-clock column of the CSV.
//!
//! Exit codes: 0 = all checks passed, 2 = a bound violation was found (the
//! witness is serialized in the report), 3 = input or configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use qcomm::bounds::{carve_subspace, CarvePolicy};
use qcomm::fidelity::{
    grid_min_subspace_fidelity, min_subspace_fidelity, OptimizerConfig, Subspace,
};
use qcomm::protocol::{
    extract_isometric_encodings, flatten_one_way, flatten_one_way_extract, rates, run_protocol,
    strip_encodings, BranchPolicy, Protocol,
};
use qcomm::source::{qaep_mass_curve, typical_projector, IIDSource};
use qcomm::sweeps::{run_suite, Suite, SuiteSummary};
use qcomm::tensor::{DensityOperator, PureState};

#[derive(Parser)]
#[command(name = "qcomm", about = "multiparty quantum channel toolkit driver")]
struct Cli {
    /// Load a full run configuration from a single JSON document instead of
    /// flags. Flags are ignored when this is given.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Deserialize, Serialize, Clone)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum Command {
    /// Run the lemma verification sweeps on seeded random instances.
    VerifyLemmas(VerifyArgs),
    /// Evaluate global and per-leg fidelities of a protocol on given inputs.
    Fidelity(FidelityArgs),
    /// Run a protocol and write the output state plus fidelity reports.
    ProtocolRun(ProtocolRunArgs),
    /// Apply a protocol transformation (flatten / extract / strip / carve).
    Transform(TransformArgs),
    /// Typical-subspace masses and equipartition curves for an IID source.
    Typical(TypicalArgs),
}

#[derive(Args, Deserialize, Serialize, Clone)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    #[serde(default = "default_instances")]
    instances: usize,
    /// Restrict to a single suite by name (default: all seven).
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_instances() -> usize {
    1000
}

#[derive(Args, Deserialize, Serialize, Clone)]
struct FidelityArgs {
    #[arg(long)]
    protocol: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// Optional per-leg subspace file; adds a minimal-subspace-fidelity
    /// report (with witness) to the output.
    #[arg(long)]
    subspaces: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    #[serde(default = "default_restarts")]
    restarts: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_restarts() -> usize {
    32
}

#[derive(Args, Deserialize, Serialize, Clone)]
struct ProtocolRunArgs {
    #[arg(long)]
    protocol: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// Replace the protocol's channel with a standard one built from a
    /// `name:param` spec (e.g. `depolarizing:0.25`) on the same layout.
    #[arg(long)]
    channel: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum TransformKind {
    Flatten,
    Extract,
    Strip,
    Carve,
}

#[derive(Args, Deserialize, Serialize, Clone)]
struct TransformArgs {
    #[arg(long, value_enum)]
    kind: TransformKind,
    #[arg(long)]
    protocol: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// Chain a flattening into isometric extraction (criterion-style
    /// one-way → fully trace-preserving zero-way pipeline).
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    chain_extract: bool,
    /// Branch policy for stripping.
    #[arg(long, default_value = "highest-probability")]
    #[serde(default = "default_policy")]
    policy: String,
    /// Per-leg slack budgets η_l for carving.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    eta: Vec<f64>,
    #[arg(long, default_value_t = 0.75)]
    #[serde(default = "default_beta_min")]
    beta_min: f64,
    #[arg(long)]
    bound_target: Option<f64>,
    #[arg(long, default_value_t = 0)]
    #[serde(default)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    #[serde(default = "default_restarts")]
    restarts: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_policy() -> String {
    "highest-probability".into()
}

fn default_beta_min() -> f64 {
    0.75
}

#[derive(Args, Deserialize, Serialize, Clone)]
struct TypicalArgs {
    /// Density-operator JSON file for the base state, or inline spec
    /// `diag:0.9,0.1`.
    #[arg(long)]
    base: String,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, value_delimiter = ',')]
    n_list: Vec<usize>,
    /// Also report the smallest tested n with mass > 1 − δ.
    #[arg(long)]
    delta: Option<f64>,
    /// Cross-check the matrix path against the spectral path for every n
    /// within the dimension guard.
    #[arg(long, default_value_t = false)]
    #[serde(default)]
    matrix_check: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------

struct Report {
    header: serde_json::Value,
    lines: Vec<serde_json::Value>,
    summaries: Vec<SuiteSummary>,
    /// Extra CSV artifact: (file name, contents).
    extra_csv: Option<(String, String)>,
    violations: usize,
}

impl Report {
    fn new(command: &str, seed: u64) -> Self {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Report {
            header: json!({ "command": command, "seed": seed, "timestamp": ts }),
            lines: Vec::new(),
            summaries: Vec::new(),
            extra_csv: None,
            violations: 0,
        }
    }

    fn push<T: Serialize>(&mut self, record: &T) {
        self.lines
            .push(serde_json::to_value(record).expect("serializable record"));
    }

    fn write(&self, out: Option<&Path>) -> std::io::Result<()> {
        let mut jsonl = String::new();
        jsonl.push_str(&self.header.to_string());
        jsonl.push('\n');
        for l in &self.lines {
            jsonl.push_str(&l.to_string());
            jsonl.push('\n');
        }
        match out {
            None => {
                std::io::stdout().write_all(jsonl.as_bytes())?;
            }
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("report.jsonl"), jsonl)?;
                let mut csv = String::from("suite,instances,min_margin,violations,seconds\n");
                for s in &self.summaries {
                    csv.push_str(&format!(
                        "{},{},{},{},{:.3}\n",
                        s.suite, s.instances, s.min_margin, s.violations, s.seconds
                    ));
                }
                fs::write(dir.join("summary.csv"), csv)?;
                if let Some((name, contents)) = &self.extra_csv {
                    fs::write(dir.join(name), contents)?;
                }
            }
        }
        Ok(())
    }
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T, String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {what} `{}`: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("cannot parse {what} `{}`: {e}", path.display()))
}

fn parse_base(spec: &str) -> Result<DensityOperator, String> {
    if let Some(rest) = spec.strip_prefix("diag:") {
        let probs: Vec<f64> = rest
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("bad diag spec `{spec}`: {e}"))?;
        let d = probs.len();
        let m = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            d,
            probs.iter().map(|&p| num_complex::Complex64::new(p, 0.0)),
        ));
        let layout = qcomm::layout::SystemLayout::single(
            "q",
            d,
            qcomm::layout::Role::SenderLeg { party: 0, slot: 0 },
        )
        .map_err(|e| e.to_string())?;
        DensityOperator::new(m, layout, qcomm::tensor::NormFlag::Normalized)
            .map_err(|e| format!("bad diag spec `{spec}`: {e}"))
    } else {
        load_json(Path::new(spec), "base state")
    }
}

fn run_verify(a: &VerifyArgs) -> Result<(Report, usize), String> {
    let mut report = Report::new("verify-lemmas", a.seed);
    let suites: Vec<Suite> = match &a.suite {
        None => Suite::all_lemma_suites().to_vec(),
        Some(name) => {
            let all = Suite::all_lemma_suites();
            let found = all.iter().find(|s| s.name() == name || s.name().contains(name.as_str()));
            vec![*found.ok_or_else(|| format!("unknown suite `{name}`"))?]
        }
    };
    let mut violations = 0usize;
    for suite in suites {
        let outcome = run_suite(suite, a.seed, a.instances).map_err(|e| e.to_string())?;
        violations += outcome.summary.violations;
        // one report per line; violations repeat with the full witness so
        // they are greppable even in huge streams
        for (i, r) in outcome.reports.iter().enumerate() {
            report.push(&json!({ "suite": suite.name(), "index": i, "report": r }));
            if !r.pass && !r.inconclusive {
                report.push(&json!({ "suite": suite.name(), "index": i, "violation": r }));
            }
        }
        // wall-clock stays out of the JSONL stream so reruns are
        // byte-identical; the CSV carries it
        report.push(&json!({ "summary": {
            "suite": outcome.summary.suite,
            "family_version": outcome.summary.family_version,
            "seed": outcome.summary.seed,
            "instances": outcome.summary.instances,
            "violations": outcome.summary.violations,
            "inconclusive": outcome.summary.inconclusive,
            "min_margin": outcome.summary.min_margin,
        }}));
        report.summaries.push(outcome.summary);
    }
    report.violations = violations;
    Ok((report, violations))
}

fn run_fidelity(a: &FidelityArgs) -> Result<Report, String> {
    let protocol: Protocol = load_json(&a.protocol, "protocol")?;
    let inputs: Vec<PureState> = load_json(&a.inputs, "inputs")?;
    let mut report = Report::new("fidelity", a.seed);
    let (_, fidelities) = run_protocol(&protocol, &inputs).map_err(|e| e.to_string())?;
    for f in &fidelities {
        report.push(f);
    }
    if let Some(subspace_path) = &a.subspaces {
        let subspaces: Vec<Subspace> = load_json(subspace_path, "subspaces")?;
        let cfg = OptimizerConfig {
            seed: a.seed,
            restarts: a.restarts,
            ..OptimizerConfig::default()
        };
        let map = protocol.end_to_end().map_err(|e| e.to_string())?;
        let fs = min_subspace_fidelity(&subspaces, &map, &cfg).map_err(|e| e.to_string())?;
        let grid = grid_min_subspace_fidelity(&subspaces, &map, fs.witness.as_deref(), 1024)
            .map_err(|e| e.to_string())?;
        // a descent/grid disagreement is a failed check, not an input error
        if let Some(g) = grid {
            if (g - fs.value).abs() > 1e-4 {
                report.violations += 1;
            }
        }
        report.push(&json!({ "subspace_min": fs, "grid_oracle": grid }));
    }
    Ok(report)
}

fn run_protocol_cmd(a: &ProtocolRunArgs) -> Result<Report, String> {
    let mut protocol: Protocol = load_json(&a.protocol, "protocol")?;
    let inputs: Vec<PureState> = load_json(&a.inputs, "inputs")?;
    if let Some(spec) = &a.channel {
        let which = qcomm::channel::StandardChannel::parse(spec).map_err(|e| e.to_string())?;
        protocol.channel =
            qcomm::channel::standard_channel(which, protocol.channel.in_layout())
                .map_err(|e| e.to_string())?;
        protocol.validate().map_err(|e| e.to_string())?;
    }
    let mut report = Report::new("protocol-run", 0);
    let (output, fidelities) = run_protocol(&protocol, &inputs).map_err(|e| e.to_string())?;
    for f in &fidelities {
        report.push(f);
    }
    // single-copy rate surrogates over the full leg spaces
    let sources: Vec<DensityOperator> = inputs
        .iter()
        .zip(&protocol.encodings)
        .map(|(psi, enc)| {
            let keep: Vec<&str> = enc.in_layout().labels().collect();
            psi.reduced(&keep)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let dims: Vec<usize> = sources.iter().map(|s| s.layout().total_dim()).collect();
    let rate_report = rates(&sources, &dims, 1).map_err(|e| e.to_string())?;
    report.push(&json!({ "rates": rate_report }));
    report.push(&json!({ "output_state": output }));
    Ok(report)
}

fn run_transform(a: &TransformArgs) -> Result<(Report, usize), String> {
    let protocol: Protocol = load_json(&a.protocol, "protocol")?;
    let inputs: Vec<PureState> = load_json(&a.inputs, "inputs")?;
    let mut report = Report::new("transform", a.seed);
    let mut violations = 0usize;
    match a.kind {
        TransformKind::Flatten => {
            if a.chain_extract {
                let (flat, ex) =
                    flatten_one_way_extract(&protocol, &inputs).map_err(|e| e.to_string())?;
                report.push(&json!({
                    "branch": flat.branch,
                    "conditional_fidelity": flat.fidelity.value,
                    "ensemble_fidelity": flat.ensemble_fidelity,
                    "provenance": flat.provenance,
                    "extraction": { "eta": ex.eta, "achieved": ex.fidelity.value,
                                     "required": ex.required },
                    "protocol": ex.protocol,
                }));
            } else {
                let flat = flatten_one_way(&protocol, &inputs).map_err(|e| e.to_string())?;
                report.push(&json!({
                    "branch": flat.branch,
                    "conditional_fidelity": flat.fidelity.value,
                    "ensemble_fidelity": flat.ensemble_fidelity,
                    "branch_probability": flat.branch_probability,
                    "provenance": flat.provenance,
                    "protocol": flat.protocol,
                }));
            }
        }
        TransformKind::Extract => {
            let ex = extract_isometric_encodings(&protocol, &inputs).map_err(|e| e.to_string())?;
            let idempotency: Vec<f64> = ex
                .isometries
                .iter()
                .map(|w| w.idempotency_deviation())
                .collect();
            report.push(&json!({
                "eta": ex.eta,
                "achieved": ex.fidelity.value,
                "required": ex.required,
                "idempotency": idempotency,
                "provenance": ex.provenance,
                "protocol": ex.protocol,
            }));
        }
        TransformKind::Strip => {
            let policy = match a.policy.as_str() {
                "highest-probability" => BranchPolicy::HighestProbability,
                "best-conditional-fidelity" => BranchPolicy::BestConditionalFidelity,
                other => return Err(format!("unknown branch policy `{other}`")),
            };
            let s = strip_encodings(&protocol, &inputs, policy).map_err(|e| e.to_string())?;
            if !s.purification_bound.pass || !s.entropy.pass {
                violations += 1;
            }
            report.push(&json!({
                "branch": s.branch,
                "fidelity": s.fidelity.value,
                "original_fidelity": s.original_fidelity,
                "epsilon": s.epsilon,
                "purification_bound": s.purification_bound,
                "entropy": s.entropy,
                "provenance": s.provenance,
                "new_inputs": s.new_inputs,
                "protocol": s.protocol,
            }));
        }
        TransformKind::Carve => {
            let sources: Vec<DensityOperator> = inputs
                .iter()
                .zip(&protocol.encodings)
                .map(|(psi, enc)| {
                    let keep: Vec<&str> = enc.in_layout().labels().collect();
                    psi.reduced(&keep)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            if a.eta.len() != sources.len() {
                return Err(format!(
                    "--eta needs {} comma-separated budgets",
                    sources.len()
                ));
            }
            let channel = protocol.end_to_end().map_err(|e| e.to_string())?;
            let policy = CarvePolicy {
                beta_min: a.beta_min,
                bound_target: a.bound_target,
            };
            let cfg = OptimizerConfig {
                seed: a.seed,
                restarts: a.restarts,
                ..OptimizerConfig::default()
            };
            let result = carve_subspace(&channel, &sources, &a.eta, &policy, &cfg)
                .map_err(|e| e.to_string())?;
            let pass = result.measured_fs >= result.certified_bound - 1e-6;
            if !pass {
                violations += 1;
            }
            report.push(&json!({
                "certified_bound": result.certified_bound,
                "measured_fs": result.measured_fs,
                "kept_weight": result.kept_weight,
                "removed_count": result.removed_count,
                "dims": result.dims,
                "rate_surrogates": result.rate_surrogates,
                "pass": pass,
                "witness": if pass { serde_json::Value::Null } else {
                    serde_json::to_value(&result.kept_basis).unwrap_or_default()
                },
            }));
        }
    }
    report.violations = violations;
    Ok((report, violations))
}

fn run_typical(a: &TypicalArgs) -> Result<Report, String> {
    let base = parse_base(&a.base)?;
    let src = IIDSource::new(base).map_err(|e| e.to_string())?;
    let mut report = Report::new("typical", 0);
    let curve = qaep_mass_curve(&src, a.epsilon, &a.n_list).map_err(|e| e.to_string())?;
    let mut csv = String::from("n,epsilon,typical_dim,mass\n");
    for r in &curve {
        csv.push_str(&format!("{},{},{},{}\n", r.n, r.epsilon, r.typical_dim, r.mass));
    }
    report.extra_csv = Some(("typical.csv".into(), csv));
    for r in &curve {
        if a.matrix_check {
            match typical_projector(&src, r.n, a.epsilon) {
                Ok((_, m)) => {
                    let dims_agree = m.typical_dim == r.typical_dim;
                    let mass_delta = (m.mass - r.mass).abs();
                    report.push(&json!({
                        "point": r, "matrix_mass": m.mass,
                        "dims_agree": dims_agree, "mass_delta": mass_delta,
                    }));
                    continue;
                }
                Err(qcomm::Error::DimensionGuard { .. }) => {}
                Err(e) => return Err(e.to_string()),
            }
        }
        report.push(r);
    }
    if let Some(delta) = a.delta {
        let crossing = qcomm::source::qaep_crossing(&src, a.epsilon, delta, 5000)
            .map_err(|e| e.to_string())?;
        report.push(&json!({ "delta": delta, "crossing_n": crossing }));
    }
    Ok(report)
}

fn dispatch(cmd: &Command) -> Result<(Report, usize, Option<PathBuf>), String> {
    match cmd {
        Command::VerifyLemmas(a) => {
            let (r, v) = run_verify(a)?;
            Ok((r, v, a.out.clone()))
        }
        Command::Fidelity(a) => run_fidelity(a).map(|r| {
            let v = r.violations;
            (r, v, a.out.clone())
        }),
        Command::ProtocolRun(a) => run_protocol_cmd(a).map(|r| (r, 0, a.out.clone())),
        Command::Transform(a) => {
            let (r, v) = run_transform(a)?;
            Ok((r, v, a.out.clone()))
        }
        Command::Typical(a) => run_typical(a).map(|r| (r, 0, a.out.clone())),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = match (&cli.config, cli.command) {
        (Some(path), _) => match load_json::<Command>(path, "run config") {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(3);
            }
        },
        (None, Some(c)) => c,
        (None, None) => {
            eprintln!("error: give a subcommand or --config; see --help");
            return ExitCode::from(3);
        }
    };
    match dispatch(&command) {
        Ok((report, violations, out)) => {
            if let Err(e) = report.write(out.as_deref()) {
                eprintln!("error: cannot write report: {e}");
                return ExitCode::from(3);
            }
            if violations > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
