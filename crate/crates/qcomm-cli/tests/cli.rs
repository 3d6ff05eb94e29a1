//! End-to-end driver tests: exit-code contract, report determinism, and
//! round-tripping transformed protocols through their JSON schemas.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;

use qcomm::channel::{standard_channel, KrausKind, KrausMap, StandardChannel};
use qcomm::layout::{Role, SystemLayout};
use qcomm::protocol::{Branch, Protocol, Regime};
use qcomm::rng::{random_density, rng_for};
use qcomm::tensor::{DensityOperator, PureState};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qcomm"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qcomm-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn src_leg(i: usize) -> SystemLayout {
    SystemLayout::single(format!("b{i}"), 2, Role::SenderLeg { party: i, slot: 0 }).unwrap()
}

fn chan_leg(i: usize) -> SystemLayout {
    SystemLayout::single(format!("c{i}"), 2, Role::ReceiverLeg { party: i, slot: 0 }).unwrap()
}

/// Single-leg protocol around a given channel, with relabeling encoder and
/// decoder; inputs purify a seeded random source.
fn single_leg_fixture(channel_on_chan_leg: KrausMap, seed: u64) -> (Protocol, Vec<PureState>) {
    let mut rng = rng_for(seed, 0xc11, 0);
    let rho = random_density(&mut rng, src_leg(0), 2);
    let inputs = vec![rho.purify_with_dim("r0", 2).unwrap()];
    let enc = KrausMap::new(
        vec![DMatrix::<C64>::identity(2, 2)],
        src_leg(0),
        chan_leg(0),
        KrausKind::TracePreserving,
    )
    .unwrap();
    let dec = KrausMap::new(
        vec![DMatrix::<C64>::identity(2, 2)],
        chan_leg(0),
        src_leg(0),
        KrausKind::TracePreserving,
    )
    .unwrap();
    let protocol = Protocol::new(vec![enc], channel_on_chan_leg, vec![dec], Regime::ZeroWay)
        .unwrap();
    (protocol, inputs)
}

fn write_fixture(dir: &Path, protocol: &Protocol, inputs: &[PureState]) -> (PathBuf, PathBuf) {
    let p = dir.join("protocol.json");
    let i = dir.join("inputs.json");
    fs::write(&p, serde_json::to_string(protocol).unwrap()).unwrap();
    fs::write(&i, serde_json::to_string(inputs).unwrap()).unwrap();
    (p, i)
}

#[test]
fn verify_lemmas_is_deterministic_and_exits_zero() {
    let dir = scratch("verify");
    let out1 = dir.join("run1");
    let out2 = dir.join("run2");
    for out in [&out1, &out2] {
        let status = bin()
            .args([
                "verify-lemmas",
                "--seed",
                "5",
                "--instances",
                "50",
                "--out",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let body = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("report.jsonl"))
            .unwrap()
            .lines()
            .skip(1) // timestamp header
            .map(String::from)
            .collect()
    };
    assert_eq!(body(&out1), body(&out2));
    // summary CSV identical apart from the wall-clock column
    let csv = |p: &Path| -> Vec<String> {
        fs::read_to_string(p.join("summary.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect()
    };
    assert_eq!(csv(&out1), csv(&out2));
    // all seven suites show up
    assert_eq!(csv(&out1).len(), 8); // header + 7 suites
}

#[test]
fn fidelity_command_reports_global_and_local_values() {
    let dir = scratch("fidelity");
    let dep =
        standard_channel(StandardChannel::Depolarizing { p: 0.2 }, &chan_leg(0)).unwrap();
    let (protocol, inputs) = single_leg_fixture(dep, 1);
    let (p, i) = write_fixture(&dir, &protocol, &inputs);
    let output = bin()
        .args([
            "fidelity",
            "--protocol",
            p.to_str().unwrap(),
            "--inputs",
            i.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = String::from_utf8(output.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // header + global + one local
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["scope"], "global");
    let global = lines[1]["value"].as_f64().unwrap();
    let local = lines[2]["value"].as_f64().unwrap();
    assert!((global - local).abs() < 1e-12); // single leg: same number
}

#[test]
fn transform_flatten_emits_a_valid_zero_way_protocol() {
    let dir = scratch("flatten");
    let (zero, inputs) = single_leg_fixture(KrausMap::identity(chan_leg(0)), 2);
    let half = zero.encodings[0].scaled(0.5);
    let branch = Branch {
        encodings: vec![half],
        decodings: zero.decodings.clone(),
    };
    let oneway = Protocol::new(
        zero.encodings.clone(),
        zero.channel.clone(),
        zero.decodings.clone(),
        Regime::OneWayForward {
            branches: vec![branch.clone(), branch],
        },
    )
    .unwrap();
    let (p, i) = write_fixture(&dir, &oneway, &inputs);
    let output = bin()
        .args([
            "transform",
            "--kind",
            "flatten",
            "--protocol",
            p.to_str().unwrap(),
            "--inputs",
            i.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let text = String::from_utf8(output.stdout).unwrap();
    let record: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert!(record["branch"].is_number());
    let transformed: Protocol = serde_json::from_value(record["protocol"].clone()).unwrap();
    transformed.validate().unwrap();
    assert!(matches!(transformed.regime, Regime::ZeroWay));
}

#[test]
fn carve_with_unsound_budget_exits_two_with_witness() {
    // amplitude damping γ=0.1: local entanglement slack ≈ 0.0506 but the
    // worst pure state loses γ = 0.1. A budget between the two passes the
    // precondition and yields a certified floor above the measured minimum.
    let dir = scratch("carve");
    let ad = standard_channel(StandardChannel::AmplitudeDamping { gamma: 0.1 }, &chan_leg(0))
        .unwrap();
    let (protocol, _) = single_leg_fixture(ad, 3);
    let flat = DensityOperator::maximally_mixed(src_leg(0));
    let inputs = vec![flat.purify_with_dim("r0", 2).unwrap()];
    protocol.validate().unwrap();
    let (p, i) = write_fixture(&dir, &protocol, &inputs);
    let output = bin()
        .args([
            "transform",
            "--kind",
            "carve",
            "--protocol",
            p.to_str().unwrap(),
            "--inputs",
            i.to_str().unwrap(),
            "--eta",
            "0.06",
            "--beta-min",
            "1.0",
            "--seed",
            "4",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{}", String::from_utf8_lossy(&output.stderr));
    let text = String::from_utf8(output.stdout).unwrap();
    let record: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(record["pass"], false);
    assert!(!record["witness"].is_null()); // witness serialized on violation
}

#[test]
fn carve_with_sound_budget_exits_zero() {
    let dir = scratch("carve-ok");
    let deph = standard_channel(StandardChannel::Dephasing { p: 0.02 }, &chan_leg(0)).unwrap();
    let (protocol, _) = single_leg_fixture(deph, 5);
    let flat = DensityOperator::maximally_mixed(src_leg(0));
    let inputs = vec![flat.purify_with_dim("r0", 2).unwrap()];
    let (p, i) = write_fixture(&dir, &protocol, &inputs);
    let status = bin()
        .args([
            "transform",
            "--kind",
            "carve",
            "--protocol",
            p.to_str().unwrap(),
            "--inputs",
            i.to_str().unwrap(),
            "--eta",
            "0.02",
            "--beta-min",
            "1.0",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn protocol_run_emits_output_state() {
    let dir = scratch("protorun");
    let deph =
        standard_channel(StandardChannel::Dephasing { p: 0.3 }, &chan_leg(0)).unwrap();
    let (protocol, inputs) = single_leg_fixture(deph, 6);
    let (p, i) = write_fixture(&dir, &protocol, &inputs);
    let output = bin()
        .args([
            "protocol-run",
            "--protocol",
            p.to_str().unwrap(),
            "--inputs",
            i.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let text = String::from_utf8(output.stdout).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    let state: DensityOperator =
        serde_json::from_value(last["output_state"].clone()).unwrap();
    assert!((state.trace() - 1.0).abs() < 1e-9);
    let rates_line: serde_json::Value =
        serde_json::from_str(text.lines().rev().nth(1).unwrap()).unwrap();
    assert!(rates_line["rates"]["entanglement"][0].as_f64().unwrap() >= 0.0);

    // channel override by name:param spec swaps the channel in place
    let overridden = bin()
        .args([
            "protocol-run",
            "--protocol",
            p.to_str().unwrap(),
            "--inputs",
            i.to_str().unwrap(),
            "--channel",
            "identity",
        ])
        .output()
        .unwrap();
    assert_eq!(overridden.status.code(), Some(0));
    let text = String::from_utf8(overridden.stdout).unwrap();
    let global: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    assert!((global["value"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn fidelity_with_subspaces_reports_grid_agreement() {
    let dir = scratch("fidelity-sub");
    let deph =
        standard_channel(StandardChannel::Dephasing { p: 0.4 }, &chan_leg(0)).unwrap();
    let (protocol, inputs) = single_leg_fixture(deph, 7);
    let (p, i) = write_fixture(&dir, &protocol, &inputs);
    let subs = vec![qcomm::fidelity::Subspace::full("b0", 2)];
    let s = dir.join("subspaces.json");
    fs::write(&s, serde_json::to_string(&subs).unwrap()).unwrap();
    let output = bin()
        .args([
            "fidelity",
            "--protocol",
            p.to_str().unwrap(),
            "--inputs",
            i.to_str().unwrap(),
            "--subspaces",
            s.to_str().unwrap(),
            "--restarts",
            "8",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{}", String::from_utf8_lossy(&output.stderr));
    let text = String::from_utf8(output.stdout).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    let fs_val = last["subspace_min"]["value"].as_f64().unwrap();
    let grid = last["grid_oracle"].as_f64().unwrap();
    assert!((fs_val - 0.6).abs() < 1e-5, "{fs_val}");
    assert!((grid - fs_val).abs() < 1e-4);
}

#[test]
fn transform_extract_and_strip_run_end_to_end() {
    // identity encodings over a weak channel: extraction and stripping are
    // near-trivial but exercise the full pipelines and schemas
    let dir = scratch("extract-strip");
    let dep =
        standard_channel(StandardChannel::Depolarizing { p: 0.01 }, &chan_leg(0)).unwrap();
    let (protocol, inputs) = single_leg_fixture(dep, 8);
    let (p, i) = write_fixture(&dir, &protocol, &inputs);
    for kind in ["extract", "strip"] {
        let output = bin()
            .args([
                "transform",
                "--kind",
                kind,
                "--protocol",
                p.to_str().unwrap(),
                "--inputs",
                i.to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert_eq!(
            output.status.code(),
            Some(0),
            "{kind}: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        let text = String::from_utf8(output.stdout).unwrap();
        let record: serde_json::Value =
            serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        let transformed: Protocol = serde_json::from_value(record["protocol"].clone()).unwrap();
        transformed.validate().unwrap();
    }
}

#[test]
fn malformed_config_exits_three() {
    let dir = scratch("badconfig");
    let cfg = dir.join("run.json");
    fs::write(&cfg, "{ not json").unwrap();
    let status = bin()
        .args(["--config", cfg.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    // unreadable inputs also map to the input-error code
    let status = bin()
        .args([
            "fidelity",
            "--protocol",
            "/nonexistent.json",
            "--inputs",
            "/nonexistent.json",
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn config_document_drives_a_run() {
    let dir = scratch("config");
    let cfg = dir.join("run.json");
    fs::write(
        &cfg,
        serde_json::json!({
            "command": "verify-lemmas",
            "seed": 3,
            "instances": 20,
            "out": dir.join("out"),
        })
        .to_string(),
    )
    .unwrap();
    let status = bin()
        .args(["--config", cfg.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.join("out/report.jsonl").exists());
    assert!(dir.join("out/summary.csv").exists());
}

#[test]
fn typical_command_writes_csv_rows() {
    let dir = scratch("typical");
    let out = dir.join("out");
    let status = bin()
        .args([
            "typical",
            "--base",
            "diag:0.9,0.1",
            "--epsilon",
            "0.1",
            "--n-list",
            "1,4,8",
            "--matrix-check",
            "--out",
            out.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = fs::read_to_string(out.join("typical.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "n,epsilon,typical_dim,mass");
    assert_eq!(lines.len(), 4);
    // the n=4 ε=0.1 row is the empty-window case
    assert!(lines[2].starts_with("4,0.1,0,0"));
}
