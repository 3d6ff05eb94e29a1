//! Seeded random-instance families for the bound verifiers, run as
//! data-parallel sweeps.
//!
//! Families are versioned: changing how instances are drawn is a breaking
//! change for frozen regression values, so [`FAMILY_VERSION`] must be
//! bumped with any such edit. Each instance derives its own RNG stream from
//! (master seed, suite id, index), making results independent of both
//! worker count and evaluation order.

use serde::Serialize;

use crate::bounds::{
    alpha_inequality, check_global_from_local, check_local_from_global, check_uniform_source_transmission,
    dominant_eigen_bounds, entropy_continuity_check, overlap_triangle, product_purification,
    BoundReport,
};
use crate::channel::{random_channel, KrausKind, KrausMap};
use crate::fidelity::{joint_input, OptimizerConfig, Subspace};
use crate::layout::{Role, Subsystem, SystemLayout};
use crate::rng::{random_density, random_pure, rng_for};
use crate::tensor::{DensityOperator, NormFlag, PureState};
use crate::{par, Result};

/// Version tag of the instance families below.
pub const FAMILY_VERSION: u32 = 1;

/// Suite identifiers; also the RNG stream separators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    LocalFromGlobal,
    GlobalFromLocal,
    OverlapTriangle,
    DominantEigen,
    ProductPurification,
    EntropyContinuity,
    AlphaInequality,
    UniformSourceRatio,
}

impl Suite {
    pub fn all_lemma_suites() -> [Suite; 7] {
        [
            Suite::LocalFromGlobal,
            Suite::GlobalFromLocal,
            Suite::OverlapTriangle,
            Suite::DominantEigen,
            Suite::ProductPurification,
            Suite::EntropyContinuity,
            Suite::AlphaInequality,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::LocalFromGlobal => "local-from-global",
            Suite::GlobalFromLocal => "global-from-local",
            Suite::OverlapTriangle => "overlap-triangle",
            Suite::DominantEigen => "dominant-eigen",
            Suite::ProductPurification => "product-purification",
            Suite::EntropyContinuity => "entropy-continuity",
            Suite::AlphaInequality => "alpha-inequality",
            Suite::UniformSourceRatio => "uniform-source-ratio",
        }
    }

    fn stream_id(&self) -> u64 {
        match self {
            Suite::LocalFromGlobal => 1,
            Suite::GlobalFromLocal => 2,
            Suite::OverlapTriangle => 5,
            Suite::DominantEigen => 6,
            Suite::ProductPurification => 7,
            Suite::EntropyContinuity => 8,
            Suite::AlphaInequality => 9,
            Suite::UniformSourceRatio => 10,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub suite: &'static str,
    pub family_version: u32,
    pub seed: u64,
    pub instances: usize,
    pub violations: usize,
    pub inconclusive: usize,
    pub min_margin: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub reports: Vec<BoundReport>,
    pub summary: SuiteSummary,
}

fn qubits(prefix: &str, k: usize) -> SystemLayout {
    SystemLayout::new(
        (0..k)
            .map(|i| Subsystem::new(format!("{prefix}{i}"), 2, Role::Reference))
            .collect(),
    )
    .expect("fresh labels")
}

fn single_qubits(prefix: &str, k: usize) -> Vec<SystemLayout> {
    (0..k)
        .map(|i| SystemLayout::single(format!("{prefix}{i}"), 2, Role::Reference).unwrap())
        .collect()
}

fn one_instance(suite: Suite, seed: u64, index: u64) -> Result<BoundReport> {
    let mut rng = rng_for(seed, suite.stream_id(), index);
    match suite {
        Suite::LocalFromGlobal => {
            let k = 2 + (index % 2) as usize;
            let rho = random_density(&mut rng, qubits("f", k), 1 << k);
            let phis: Vec<PureState> = single_qubits("f", k)
                .into_iter()
                .map(|l| random_pure(&mut rng, l))
                .collect();
            check_local_from_global(&rho, &phis)
        }
        Suite::GlobalFromLocal => {
            let k = 2 + (index % 2) as usize;
            let rho = random_density(&mut rng, qubits("f", k), 1 << k);
            let phis: Vec<PureState> = single_qubits("f", k)
                .into_iter()
                .map(|l| random_pure(&mut rng, l))
                .collect();
            // budgets are the measured slacks themselves: the tight case
            let epsilons: Vec<f64> = (0..k)
                .map(|l| {
                    let keep = format!("f{l}");
                    let discard: Vec<&str> = rho
                        .layout()
                        .labels()
                        .filter(|lab| **lab != *keep)
                        .collect();
                    let m = rho.partial_trace(&discard)?.expectation(&phis[l]);
                    Ok(1.0 - m)
                })
                .collect::<Result<_>>()?;
            check_global_from_local(&rho, &phis, &epsilons)
        }
        Suite::OverlapTriangle => {
            let d = [2usize, 4, 8][(index % 3) as usize];
            let layout = SystemLayout::single("v", d, Role::Reference).unwrap();
            let phi1 = random_pure(&mut rng, layout.clone());
            let phi2 = random_pure(&mut rng, layout.clone());
            let psi = random_pure(&mut rng, layout);
            overlap_triangle(&phi1, &phi2, &psi)
        }
        Suite::DominantEigen => {
            let d = [2usize, 4][(index % 2) as usize];
            let layout = SystemLayout::single("v", d, Role::Reference).unwrap();
            let phi = random_pure(&mut rng, layout.clone());
            // planted dominant direction: mostly φ plus random junk
            let u: f64 = (index % 7) as f64 / 10.0; // 0.0 .. 0.6
            let junk = random_density(&mut rng, layout.clone(), d);
            let m = phi.projector().matrix().scale(1.0 - u) + junk.matrix().scale(u);
            let rho = DensityOperator::new(m, layout, NormFlag::Normalized)?;
            dominant_eigen_bounds(&rho, &phi)
        }
        Suite::ProductPurification => {
            let k = 2 + (index % 2) as usize;
            let layouts: Vec<SystemLayout> = (0..k)
                .map(|i| qubits(&format!("g{i}x"), 2))
                .collect();
            let phis: Vec<PureState> = layouts
                .iter()
                .map(|l| random_pure(&mut rng, l.clone()))
                .collect();
            let clean = joint_input(&phis)?.projector();
            let junk = random_density(&mut rng, clean.layout().clone(), 1 << k);
            let w = 0.02 * ((index % 10) as f64 + 1.0) / 10.0; // ε ≤ 0.02
            let m = clean.matrix().scale(1.0 - w) + junk.matrix().scale(w);
            let rho = DensityOperator::new(m, clean.layout().clone(), NormFlag::Normalized)?;
            let env_names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
            let env: Vec<&str> = env_names.iter().map(|s| s.as_str()).collect();
            product_purification(&rho, &phis, &env).map(|(_, report)| report)
        }
        Suite::EntropyContinuity => {
            let k = 1 + (index % 2) as usize;
            let layouts: Vec<SystemLayout> = (0..k)
                .map(|i| {
                    SystemLayout::new(vec![
                        Subsystem::new(format!("a{i}"), 2, Role::Reference),
                        Subsystem::new(format!("b{i}"), 2, Role::SenderLeg { party: i, slot: 0 }),
                    ])
                    .unwrap()
                })
                .collect();
            let phis: Vec<PureState> = layouts
                .iter()
                .map(|l| random_pure(&mut rng, l.clone()))
                .collect();
            let phi = joint_input(&phis)?;
            let junk = random_density(&mut rng, phi.layout().clone(), 1 << k);
            let w = 0.012 * ((index % 10) as f64 + 1.0) / 10.0; // ε < 1/72
            let m = phi.projector().matrix().scale(1.0 - w) + junk.matrix().scale(w);
            let rho = DensityOperator::new(m, phi.layout().clone(), NormFlag::Normalized)?;
            let a_labels: Vec<String> = (0..k).map(|i| format!("a{i}")).collect();
            let a: Vec<&str> = a_labels.iter().map(|s| s.as_str()).collect();
            entropy_continuity_check(&phi, &rho, &a)
        }
        Suite::AlphaInequality => {
            use rand::Rng;
            let l = 2 + (index % 5) as usize;
            let weights: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();
            alpha_inequality(&weights)
        }
        Suite::UniformSourceRatio => {
            let k = 1 + (index % 2) as usize;
            let legs: Vec<SystemLayout> = (0..k)
                .map(|i| {
                    SystemLayout::single(format!("b{i}"), 2, Role::SenderLeg { party: i, slot: 0 })
                        .unwrap()
                })
                .collect();
            let joint = legs
                .iter()
                .skip(1)
                .fold(legs[0].clone(), |acc, l| acc.concat(l).unwrap());
            // weak noise: identity branch dominating a random channel
            let w = 0.002 + 0.01 * ((index % 10) as f64) / 10.0;
            let noise = random_channel(&joint, &joint, 2, seed ^ (index << 1))?;
            let mut ops = vec![
                nalgebra::DMatrix::<num_complex::Complex64>::identity(1 << k, 1 << k)
                    .scale((1.0 - w).sqrt()),
            ];
            for e in noise.ops() {
                ops.push(e.scale(w.sqrt()));
            }
            let channel = KrausMap::new(ops, joint.clone(), joint, KrausKind::TracePreserving)?;
            let subspaces: Vec<Subspace> = (0..k)
                .map(|i| Subspace::full(format!("b{i}"), 2))
                .collect();
            let opt = OptimizerConfig {
                restarts: 6,
                seed: seed ^ index,
                ..OptimizerConfig::default()
            };
            check_uniform_source_transmission(&subspaces, &channel, 10.0, &opt)
        }
    }
}

/// Run `instances` draws of a suite in parallel, in deterministic order.
pub fn run_suite(suite: Suite, seed: u64, instances: usize) -> Result<SweepOutcome> {
    let start = std::time::Instant::now();
    let results: Vec<Result<BoundReport>> =
        par::par_map(instances, |i| one_instance(suite, seed, i as u64));
    let mut reports = Vec::with_capacity(instances);
    for r in results {
        reports.push(r?);
    }
    let violations = reports
        .iter()
        .filter(|r| !r.pass && !r.inconclusive)
        .count();
    let inconclusive = reports.iter().filter(|r| r.inconclusive).count();
    let min_margin = reports
        .iter()
        .filter(|r| !r.inconclusive)
        .map(|r| r.margin)
        .fold(f64::INFINITY, f64::min);
    Ok(SweepOutcome {
        summary: SuiteSummary {
            suite: suite.name(),
            family_version: FAMILY_VERSION,
            seed,
            instances,
            violations,
            inconclusive,
            min_margin,
            seconds: start.elapsed().as_secs_f64(),
        },
        reports,
    })
}
