//! Protocols (encode → channel → decode, with or without forward classical
//! messages) and the transformations between them: reduction of a joint map
//! to a single leg, replacement of encodings by partial isometries,
//! stripping of encodings in exchange for extra local decodings, and the
//! flattening of a one-way protocol onto its best classical branch.
//!
//! Legs are single subsystems throughout: sender `i`'s slot `α` is one
//! labeled factor of the channel input, matched by position to the encoder
//! list. Transformations that contract legs require this one-factor shape.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::bounds::{product_purification, entropy_continuity_check, BoundReport};
use crate::channel::{embed_isometry_tp, tp_completion, KrausKind, KrausMap, PartialIsometry};
use crate::fidelity::{
    entanglement_fidelity, joint_input, FidelityKind,
    FidelityReport, Scope,
};
use crate::layout::SystemLayout;
use crate::tensor::{
    matching_unitary, partial_inner_product, DensityOperator, Operator, PureState,
};
use crate::{tol, Error, Result};

/// One classical-message branch of a one-way protocol: the encodings are
/// trace-nonincreasing pieces that sum to a trace-preserving map across
/// branches; each branch decoding is trace-preserving on its own.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub encodings: Vec<KrausMap>,
    pub decodings: Vec<KrausMap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "kebab-case")]
pub enum Regime {
    ZeroWay,
    OneWayForward { branches: Vec<Branch> },
    /// Ping-pong classical communication; carried as a tag only, no
    /// simulation behind it.
    TwoWay,
}

/// A coding scheme: per-leg encodings, the channel, per-receiver decodings,
/// and the classical-communication regime.
///
/// For a multiple access channel `decodings` holds a single joint map; for
/// a k-user channel it holds one leg-local map per receiver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Protocol {
    pub encodings: Vec<KrausMap>,
    pub channel: KrausMap,
    pub decodings: Vec<KrausMap>,
    #[serde(flatten)]
    pub regime: Regime,
}

impl Protocol {
    /// Construct and check the regime invariants.
    pub fn new(
        encodings: Vec<KrausMap>,
        channel: KrausMap,
        decodings: Vec<KrausMap>,
        regime: Regime,
    ) -> Result<Self> {
        let p = Protocol {
            encodings,
            channel,
            decodings,
            regime,
        };
        p.validate()?;
        Ok(p)
    }

    /// Check layout chaining and the per-regime trace conditions.
    pub fn validate(&self) -> Result<()> {
        // layouts must chain encoder → channel → decoder
        let enc_all = KrausMap::tensor_maps(&self.encodings)?;
        if !enc_all.out_layout().compatible(self.channel.in_layout()) {
            return Err(Error::BadProtocol(
                "encoder outputs do not match the channel input".into(),
            ));
        }
        let dec_all = KrausMap::tensor_maps(&self.decodings)?;
        if !dec_all.in_layout().compatible(self.channel.out_layout()) {
            return Err(Error::BadProtocol(
                "decoder inputs do not match the channel output".into(),
            ));
        }
        match &self.regime {
            Regime::ZeroWay => {
                for (i, e) in self.encodings.iter().enumerate() {
                    if !e.validate().pass || e.kind() != KrausKind::TracePreserving {
                        return Err(Error::BadProtocol(format!(
                            "zero-way encoding {i} is not trace-preserving"
                        )));
                    }
                }
                for (i, d) in self.decodings.iter().enumerate() {
                    if !d.validate().pass || d.kind() != KrausKind::TracePreserving {
                        return Err(Error::BadProtocol(format!(
                            "zero-way decoding {i} is not trace-preserving"
                        )));
                    }
                }
            }
            Regime::OneWayForward { branches } => {
                if branches.is_empty() {
                    return Err(Error::BadProtocol("one-way protocol without branches".into()));
                }
                // Σ_j ε_j must be trace-preserving across branches, with
                // every branch acting on the same spaces as the base maps
                let din = enc_all.in_layout().total_dim();
                let mut acc = DMatrix::<C64>::zeros(din, din);
                for b in branches {
                    if b.encodings.len() != self.encodings.len() {
                        return Err(Error::BadProtocol(
                            "branch encoding count differs from protocol legs".into(),
                        ));
                    }
                    for (base, be) in self.encodings.iter().zip(&b.encodings) {
                        if !be.in_layout().compatible(base.in_layout())
                            || !be.out_layout().compatible(base.out_layout())
                        {
                            return Err(Error::BadProtocol(
                                "branch encodings must act on the base encoding spaces".into(),
                            ));
                        }
                    }
                    let joint = KrausMap::tensor_maps(&b.encodings)?;
                    acc += joint.completeness_operator();
                    for d in &b.decodings {
                        if !d.validate().pass || d.kind() != KrausKind::TracePreserving {
                            return Err(Error::BadProtocol(
                                "one-way branch decodings must be trace-preserving".into(),
                            ));
                        }
                    }
                }
                let dev = crate::tensor::max_abs_entry(
                    &(acc - DMatrix::<C64>::identity(din, din)),
                );
                if dev > tol::TP {
                    return Err(Error::BadProtocol(format!(
                        "branch encodings do not sum to a trace-preserving map (deviation {dev:.3e})"
                    )));
                }
            }
            Regime::TwoWay => {}
        }
        Ok(())
    }

    /// D ∘ Λ ∘ ε for the zero-way data of this protocol.
    pub fn end_to_end(&self) -> Result<KrausMap> {
        let enc = KrausMap::tensor_maps(&self.encodings)?;
        let dec = KrausMap::tensor_maps(&self.decodings)?;
        KrausMap::compose(&dec, &KrausMap::compose(&self.channel, &enc)?)
    }

    /// D_j ∘ Λ ∘ ε_j for branch `j` of a one-way protocol.
    pub fn branch_end_to_end(&self, j: usize) -> Result<KrausMap> {
        match &self.regime {
            Regime::OneWayForward { branches } => {
                let b = branches
                    .get(j)
                    .ok_or_else(|| Error::BadProtocol(format!("no branch {j}")))?;
                let enc = KrausMap::tensor_maps(&b.encodings)?;
                let dec = KrausMap::tensor_maps(&b.decodings)?;
                KrausMap::compose(&dec, &KrausMap::compose(&self.channel, &enc)?)
            }
            _ => Err(Error::BadProtocol("not a one-way protocol".into())),
        }
    }

    /// Deterministic content hash over the serialized protocol, for
    /// provenance records (FNV-1a over the JSON bytes).
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// What a transformation was applied to, and how.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub input_protocol: String,
    pub policy: String,
    pub seed: u64,
}

/// Run a protocol on per-leg input states: the output state and the global
/// plus per-leg local entanglement fidelities.
pub fn run_protocol(
    p: &Protocol,
    inputs: &[PureState],
) -> Result<(DensityOperator, Vec<FidelityReport>)> {
    p.validate()?;
    let psi = joint_input(inputs)?;
    let output = match &p.regime {
        Regime::ZeroWay => {
            let map = p.end_to_end()?.lifted(psi.layout())?;
            map.apply(&psi.projector())?
        }
        Regime::OneWayForward { branches } => {
            let mut acc: Option<DensityOperator> = None;
            for j in 0..branches.len() {
                let map = p.branch_end_to_end(j)?.lifted(psi.layout())?;
                let out = map.apply(&psi.projector())?;
                acc = Some(match acc {
                    None => out,
                    Some(prev) => {
                        let m = prev.matrix() + out.matrix();
                        let norm = if (m.trace().re - 1.0).abs() <= crate::tol::TRACE {
                            crate::tensor::NormFlag::Normalized
                        } else {
                            crate::tensor::NormFlag::Subnormalized
                        };
                        DensityOperator::new(m, prev.layout().clone(), norm)?
                    }
                });
            }
            acc.expect("at least one branch")
        }
        Regime::TwoWay => {
            return Err(Error::BadProtocol(
                "two-way protocols are a placeholder and cannot be run".into(),
            ))
        }
    };
    let mut reports = vec![FidelityReport {
        value: output.expectation(&psi),
        kind: FidelityKind::Entanglement,
        scope: Scope::Global,
        witness: None,
        optimizer_stats: None,
    }];
    for (leg, input) in inputs.iter().enumerate() {
        let keep: Vec<&str> = input.layout().labels().collect();
        let discard: Vec<&str> = output
            .layout()
            .labels()
            .filter(|l| !keep.contains(l))
            .collect();
        let reduced = output.partial_trace(&discard)?;
        reports.push(FidelityReport {
            value: reduced.expectation(input),
            kind: FidelityKind::Entanglement,
            scope: Scope::Local { leg },
            witness: None,
            optimizer_stats: None,
        });
    }
    Ok((output, reports))
}

/// Finite-block rate surrogates per leg: S(ρ_l^{⊗n})/n and log₂(D_l)/n.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub n: usize,
    pub entanglement: Vec<f64>,
    pub subspace: Vec<f64>,
}

/// Compute the finite-n rate surrogates for the given per-leg sources and
/// subspace dimensions. The n-block state is materialized, so `n` is
/// limited by the dimension guard.
pub fn rates(sources: &[DensityOperator], subspace_dims: &[usize], n: usize) -> Result<RateReport> {
    if n == 0 {
        return Err(Error::ParamOutOfRange {
            name: "n",
            value: 0.0,
        });
    }
    if subspace_dims.len() != sources.len() {
        return Err(Error::LayoutMismatch(
            "one subspace dimension per source".into(),
        ));
    }
    let mut entanglement = Vec::with_capacity(sources.len());
    let mut subspace = Vec::with_capacity(sources.len());
    for (rho, &d) in sources.iter().zip(subspace_dims) {
        let src = crate::source::IIDSource::new(rho.clone())?;
        let block = src.block_state(n)?;
        entanglement.push(block.von_neumann_entropy() / n as f64);
        let full_dim = rho.layout().total_dim().pow(n as u32);
        if d == 0 || d > full_dim {
            return Err(Error::DimMismatch {
                expected: full_dim,
                got: d,
                context: "subspace dimension per block".into(),
            });
        }
        subspace.push((d as f64).log2() / n as f64);
    }
    Ok(RateReport {
        n,
        entanglement,
        subspace,
    })
}

// ---------------------------------------------------------------------------
// Leg reduction (the keystone identity)
// ---------------------------------------------------------------------------

/// Contract every leg except `target` out of the joint map 𝒜, producing the
/// single-leg map 𝒜_t with Kraus elements
///
/// ```text
/// A^{(t)}_{α,β_{≠t}} = Σ_{γ_{≠t}} (⊗_{i≠t} ⟨φ̃_i^{γ_i}|) A_α (⊗_{i≠t} E_i^{β_i}|φ̃_i^{γ_i}⟩)
/// ```
///
/// where φ̃ are the subnormalized eigenvectors of the non-target sources.
/// The defining property, exact for any inputs: the single-leg fidelity of
/// 𝒜_t ∘ ε_t equals the joint fidelity of 𝒜 ∘ ⊗ε.
///
/// `joint.out_layout()` must list one factor per leg (the source spaces),
/// `joint.in_layout()` one factor per leg (the channel-side spaces, matching
/// the encoder outputs).
pub fn reduce_leg(
    joint: &KrausMap,
    encoders: &[KrausMap],
    sources: &[DensityOperator],
    target: usize,
) -> Result<KrausMap> {
    let k = encoders.len();
    if sources.len() != k {
        return Err(Error::LayoutMismatch("one source per encoder".into()));
    }
    if target >= k {
        return Err(Error::UnknownLabel(format!("leg index {target}")));
    }
    if joint.in_layout().len() != k || joint.out_layout().len() != k {
        return Err(Error::LayoutMismatch(
            "leg reduction requires one factor per leg on both sides of the joint map".into(),
        ));
    }
    // spectral data of the spectator legs
    let mut tilde: Vec<Vec<DVector<C64>>> = Vec::new(); // per spectator
    let mut encoded: Vec<Vec<Vec<DVector<C64>>>> = Vec::new(); // [spectator][beta][gamma]
    let spectators: Vec<usize> = (0..k).filter(|&i| i != target).collect();
    for &i in &spectators {
        let spectrum = sources[i].eig_desc()?;
        let phis = spectrum.subnormalized_vectors(tol::EIG);
        let imgs: Vec<Vec<DVector<C64>>> = encoders[i]
            .ops()
            .iter()
            .map(|e| phis.iter().map(|p| e * p).collect())
            .collect();
        tilde.push(phis);
        encoded.push(imgs);
    }
    let gamma_dims: Vec<usize> = tilde.iter().map(|t| t.len()).collect();
    let beta_dims: Vec<usize> = encoded.iter().map(|e| e.len()).collect();
    let gamma_tuples = crate::fidelity::index_tuples(&gamma_dims);
    let beta_tuples = crate::fidelity::index_tuples(&beta_dims);

    let out_leg = joint.out_layout().select(&[target]);
    let in_leg = joint.in_layout().select(&[target]);
    let bra_labels: Vec<&str> = spectators
        .iter()
        .map(|&i| joint.out_layout().subsystems()[i].label.as_str())
        .collect();
    let ket_labels: Vec<&str> = spectators
        .iter()
        .map(|&i| joint.in_layout().subsystems()[i].label.as_str())
        .collect();

    let mut ops = Vec::new();
    for a in joint.ops() {
        let op = Operator::new(a.clone(), joint.out_layout().clone(), joint.in_layout().clone())?;
        for bt in &beta_tuples {
            let mut acc = DMatrix::<C64>::zeros(out_leg.total_dim(), in_leg.total_dim());
            for gt in &gamma_tuples {
                let bra: Vec<(&str, DVector<C64>)> = spectators
                    .iter()
                    .enumerate()
                    .map(|(s, _)| (bra_labels[s], tilde[s][gt[s]].clone()))
                    .collect();
                let ket: Vec<(&str, DVector<C64>)> = spectators
                    .iter()
                    .enumerate()
                    .map(|(s, _)| (ket_labels[s], encoded[s][bt[s]][gt[s]].clone()))
                    .collect();
                let piece = partial_inner_product(&op, &bra, &ket)?;
                acc += piece.matrix();
            }
            ops.push(acc);
        }
    }
    KrausMap::new(ops, in_leg, out_leg, KrausKind::TraceNonIncreasing)
}

// ---------------------------------------------------------------------------
// Isometric-encoding extraction
// ---------------------------------------------------------------------------

/// Single-leg isometry construction: score each Kraus element E_b of the
/// encoding by its normalized branch fidelity
/// f_b = Σ_a |tr(ρ A_a E_b)|² / tr(E_b ρ E_b†), take the best branch, and
/// keep the isometric (polar) part of its restriction to supp(ρ).
fn branch_isometry(
    reduced: &KrausMap,
    encoder: &KrausMap,
    rho: &DensityOperator,
) -> Result<PartialIsometry> {
    let mut best: Option<(usize, f64)> = None;
    for (b, e) in encoder.ops().iter().enumerate() {
        let p_b = (e * rho.matrix() * e.adjoint()).trace().re;
        if p_b < 1e-12 {
            continue;
        }
        let mut score = 0.0;
        for a in reduced.ops() {
            score += (rho.matrix() * a * e).trace().norm_sqr();
        }
        score /= p_b;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((b, score));
        }
    }
    let (b_star, _) = best.ok_or_else(|| {
        Error::PreconditionViolated("every encoding branch has vanishing probability".into())
    })?;
    // restrict to supp(ρ) and keep the isometric factor
    let spectrum = rho.eig_desc()?;
    let d = rho.layout().total_dim();
    let mut support = DMatrix::<C64>::zeros(d, d);
    for (&l, v) in spectrum.eigenvalues.iter().zip(&spectrum.eigenvectors) {
        if l > 1e-10 {
            support += v.vector() * v.vector().adjoint();
        }
    }
    let m = &encoder.ops()[b_star] * support;
    let (rows, cols) = (m.nrows(), m.ncols());
    let svd = m.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let mut w = DMatrix::<C64>::zeros(rows, cols);
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s > 1e-10 {
            w += u.column(j) * vt.row(j);
        }
    }
    PartialIsometry::new(w, encoder.in_layout().clone(), encoder.out_layout().clone())
}

/// Everything the extraction produces: the isometries, the verified
/// fidelity of the isometrically encoded protocol, and the protocol itself
/// with the isometries embedded in trace-preserving maps.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub isometries: Vec<PartialIsometry>,
    pub fidelity: FidelityReport,
    pub protocol: Protocol,
    /// 1 − F_e of the input protocol on the given inputs.
    pub eta: f64,
    /// The guarantee the construction was checked against: 1 − 2^k·η.
    pub required: f64,
    pub provenance: Provenance,
}

/// Replace every encoding of a zero-way protocol by a partial isometry,
/// leg by leg: reduce the joint map to the current leg, pick the isometry
/// by the branch-score rule, substitute, and continue. The result is
/// verified against the 1 − 2^k·η guarantee; missing it is an error, never
/// a silent degradation.
pub fn extract_isometric_encodings(p: &Protocol, inputs: &[PureState]) -> Result<Extraction> {
    p.validate()?;
    if !matches!(p.regime, Regime::ZeroWay) {
        return Err(Error::BadProtocol(
            "isometric extraction expects a zero-way protocol".into(),
        ));
    }
    let after = KrausMap::compose(&KrausMap::tensor_maps(&p.decodings)?, &p.channel)?;
    let eta = 1.0 - entanglement_fidelity(inputs, &p.end_to_end()?)?.value;
    extract_parts(p, &after, p.encodings.clone(), inputs, eta)
}

pub(crate) fn extract_parts(
    p: &Protocol,
    after: &KrausMap,
    mut encoders: Vec<KrausMap>,
    inputs: &[PureState],
    eta: f64,
) -> Result<Extraction> {
    let k = encoders.len();
    let sources: Vec<DensityOperator> = inputs
        .iter()
        .zip(&encoders)
        .map(|(psi, enc)| {
            let keep: Vec<&str> = enc.in_layout().labels().collect();
            psi.reduced(&keep)
        })
        .collect::<Result<_>>()?;

    let mut isometries = Vec::with_capacity(k);
    for i in 0..k {
        let reduced = reduce_leg(after, &encoders, &sources, i)?;
        let w = branch_isometry(&reduced, &encoders[i], &sources[i])?;
        encoders[i] = w.as_kraus();
        isometries.push(w);
    }

    let achieved = {
        let enc = KrausMap::tensor_maps(&encoders)?;
        let map = KrausMap::compose(after, &enc)?;
        entanglement_fidelity(inputs, &map)?.value
    };
    let required = 1.0 - (1u64 << k) as f64 * eta - 1e-7;
    if achieved < required {
        return Err(Error::IsometryBoundFailed {
            achieved,
            required,
            eta,
        });
    }

    // embed each isometry in a trace-preserving encoding; on the supported
    // sources this must not move the fidelity at all
    let embedded: Vec<KrausMap> = isometries
        .iter()
        .map(|w| {
            let sink = DensityOperator::maximally_mixed(w.out_layout().clone());
            embed_isometry_tp(w, &sink)
        })
        .collect::<Result<_>>()?;
    let embedded_fidelity = {
        let enc = KrausMap::tensor_maps(&embedded)?;
        let map = KrausMap::compose(after, &enc)?;
        entanglement_fidelity(inputs, &map)?.value
    };
    if (embedded_fidelity - achieved).abs() > 1e-10 {
        return Err(Error::IsometryBoundFailed {
            achieved: embedded_fidelity,
            required: achieved,
            eta,
        });
    }

    let protocol = Protocol::new(
        embedded,
        p.channel.clone(),
        p.decodings.clone(),
        Regime::ZeroWay,
    )?;
    let provenance = Provenance {
        input_protocol: p.content_hash(),
        policy: "branch-score-polar".into(),
        seed: 0,
    };
    Ok(Extraction {
        provenance,
        isometries,
        fidelity: FidelityReport {
            value: achieved,
            kind: FidelityKind::Entanglement,
            scope: Scope::Global,
            witness: None,
            optimizer_stats: None,
        },
        protocol,
        eta,
        required,
    })
}

// ---------------------------------------------------------------------------
// One-way → zero-way flattening
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Flattening {
    pub protocol: Protocol,
    pub branch: usize,
    /// Conditional fidelity of the selected branch.
    pub fidelity: FidelityReport,
    /// Σ_j of the raw branch fidelities (the one-way protocol's fidelity).
    pub ensemble_fidelity: f64,
    pub branch_probability: f64,
    pub provenance: Provenance,
}

/// Pick the branch with the best conditional fidelity from a one-way
/// protocol and return the zero-way protocol that always runs it. The
/// selected branch encodings are completed to trace-preserving maps by
/// routing leaked weight to the maximally mixed state on the channel input.
///
/// The pigeonhole guarantee is exact: Σ_j p_j · (F_j/p_j) = F_ensemble with
/// Σ_j p_j = 1, so the best conditional fidelity is ≥ the ensemble value.
pub fn flatten_one_way(p: &Protocol, inputs: &[PureState]) -> Result<Flattening> {
    p.validate()?;
    let branches = match &p.regime {
        Regime::OneWayForward { branches } => branches,
        _ => {
            return Err(Error::BadProtocol(
                "flattening expects a one-way protocol".into(),
            ))
        }
    };
    let sources: Vec<DensityOperator> = inputs
        .iter()
        .zip(&p.encodings)
        .map(|(psi, enc)| {
            let keep: Vec<&str> = enc.in_layout().labels().collect();
            psi.reduced(&keep)
        })
        .collect::<Result<_>>()?;
    let mut joint_source = sources[0].clone();
    for s in &sources[1..] {
        joint_source = joint_source.tensor(s)?;
    }

    let mut ensemble = 0.0;
    let mut best: Option<(usize, f64, f64)> = None; // (branch, conditional, probability)
    for (j, b) in branches.iter().enumerate() {
        let raw = entanglement_fidelity(inputs, &p.branch_end_to_end(j)?)?.value;
        ensemble += raw;
        let enc = KrausMap::tensor_maps(&b.encodings)?;
        let prob = enc.apply(&joint_source)?.trace();
        if prob < 1e-6 {
            continue;
        }
        let conditional = raw / prob;
        if best.is_none_or(|(_, c, _)| conditional > c) {
            best = Some((j, conditional, prob));
        }
    }
    let (branch, conditional, branch_probability) =
        best.ok_or(Error::BranchProbabilityFloor(1e-6))?;

    // complete the selected TNI encodings to TP maps
    let completed: Vec<KrausMap> = branches[branch]
        .encodings
        .iter()
        .map(|e| {
            let sink = DensityOperator::maximally_mixed(e.out_layout().clone());
            tp_completion(e, &sink)
        })
        .collect::<Result<_>>()?;
    let protocol = Protocol::new(
        completed,
        p.channel.clone(),
        branches[branch].decodings.clone(),
        Regime::ZeroWay,
    )?;
    Ok(Flattening {
        branch,
        fidelity: FidelityReport {
            value: conditional,
            kind: FidelityKind::Entanglement,
            scope: Scope::Global,
            witness: None,
            optimizer_stats: None,
        },
        ensemble_fidelity: ensemble,
        branch_probability,
        provenance: Provenance {
            input_protocol: p.content_hash(),
            policy: "best-conditional-branch".into(),
            seed: 0,
        },
        protocol,
    })
}

/// Flatten a one-way protocol and chain into isometric extraction: the
/// selected branch encodings, normalized per leg to be trace-preserving on
/// the source, are replaced by partial isometries and embedded in
/// trace-preserving maps, producing a fully trace-preserving zero-way
/// protocol with fidelity ≥ 1 − 2^k·η.
pub fn flatten_one_way_extract(
    p: &Protocol,
    inputs: &[PureState],
) -> Result<(Flattening, Extraction)> {
    let flat = flatten_one_way(p, inputs)?;
    let branches = match &p.regime {
        Regime::OneWayForward { branches } => branches,
        _ => unreachable!("flatten succeeded"),
    };
    // normalize each selected branch encoder on its own source so the
    // single-leg extraction lemma applies
    let sources: Vec<DensityOperator> = inputs
        .iter()
        .zip(&p.encodings)
        .map(|(psi, enc)| {
            let keep: Vec<&str> = enc.in_layout().labels().collect();
            psi.reduced(&keep)
        })
        .collect::<Result<_>>()?;
    let scaled: Vec<KrausMap> = branches[flat.branch]
        .encodings
        .iter()
        .zip(&sources)
        .map(|(e, rho)| {
            let prob = e.apply(rho).map(|out| out.trace())?;
            if prob < 1e-6 {
                return Err(Error::BranchProbabilityFloor(prob));
            }
            Ok(e.scaled(1.0 / prob))
        })
        .collect::<Result<_>>()?;
    let after = KrausMap::compose(
        &KrausMap::tensor_maps(&branches[flat.branch].decodings)?,
        &p.channel,
    )?;
    let eta = 1.0 - flat.fidelity.value;
    let shell = Protocol {
        encodings: p.encodings.clone(),
        channel: p.channel.clone(),
        decodings: branches[flat.branch].decodings.clone(),
        regime: Regime::ZeroWay,
    };
    let extraction = extract_parts(&shell, &after, scaled, inputs, eta)?;
    Ok((flat, extraction))
}

// ---------------------------------------------------------------------------
// Encoding stripping
// ---------------------------------------------------------------------------

/// Which dilation branch to keep when measuring the encoding environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchPolicy {
    /// Per-leg most probable environment outcome (the default).
    HighestProbability,
    /// Joint outcome tuple maximizing the branch-conditioned overlap with
    /// the original inputs.
    BestConditionalFidelity,
}

#[derive(Debug, Clone)]
pub struct Stripping {
    /// Branch-conditioned pure inputs ⊗ψ_i, on the channel-side spaces.
    pub new_inputs: Vec<PureState>,
    /// The encoding-free protocol: identity encodings, original channel,
    /// original decoding composed with the extra leg-local rotations.
    pub protocol: Protocol,
    /// Fidelity of the new protocol on the new inputs.
    pub fidelity: FidelityReport,
    /// Fidelity of the original protocol on the original inputs.
    pub original_fidelity: f64,
    /// Branch-conditioned slack 1 − ⟨⊗φ|ρ_out|⊗φ⟩ the guarantees key on.
    pub epsilon: f64,
    /// The near-product purification bound underlying the construction.
    pub purification_bound: BoundReport,
    /// Entropy shift between old and new sources against the continuity
    /// bound.
    pub entropy: BoundReport,
    /// Selected environment outcome per leg.
    pub branch: Vec<usize>,
    pub provenance: Provenance,
}

/// Remove the encodings of a reliable MAC or k-UC protocol: measure the
/// encoding environments, condition on one outcome, and compensate with an
/// extra leg-local decoding built from the matching unitary between the
/// output's product purification and the new inputs.
///
/// Two admissible compensations are constructed — the purification-matching
/// rotation (which carries the (2k+4)ε guarantee) and, when the selected
/// branch is isometric, the plain inverse rotation — and the better one is
/// kept. Broadcast-style receiver structures are refused: the compensation
/// must be local to each leg, which requires a joint decoder (MAC) or
/// one decoder per leg (k-UC).
pub fn strip_encodings(
    p: &Protocol,
    inputs: &[PureState],
    policy: BranchPolicy,
) -> Result<Stripping> {
    p.validate()?;
    if !matches!(p.regime, Regime::ZeroWay) {
        return Err(Error::BadProtocol(
            "stripping expects a zero-way protocol".into(),
        ));
    }
    let k = p.encodings.len();
    if !(p.decodings.len() == 1 || p.decodings.len() == k) {
        return Err(Error::UnsupportedReceiverStructure(format!(
            "{} decoders for {k} legs: stripping needs a joint decoder (MAC) or one per leg (k-UC)",
            p.decodings.len()
        )));
    }
    for (i, enc) in p.encodings.iter().enumerate() {
        if enc.in_layout().len() != 1 || enc.out_layout().len() != 1 {
            return Err(Error::UnsupportedReceiverStructure(format!(
                "encoding {i} is not leg-local"
            )));
        }
        if enc.in_layout().total_dim() != enc.out_layout().total_dim() {
            return Err(Error::DimMismatch {
                expected: enc.in_layout().total_dim(),
                got: enc.out_layout().total_dim(),
                context: format!("stripping needs matching source/channel dims on leg {i}"),
            });
        }
    }

    let sources: Vec<DensityOperator> = inputs
        .iter()
        .zip(&p.encodings)
        .map(|(psi, enc)| {
            let keep: Vec<&str> = enc.in_layout().labels().collect();
            psi.reduced(&keep)
        })
        .collect::<Result<_>>()?;

    let original_fidelity = entanglement_fidelity(inputs, &p.end_to_end()?)?.value;
    let after = KrausMap::compose(&KrausMap::tensor_maps(&p.decodings)?, &p.channel)?;

    // per-leg branch probabilities
    let probs: Vec<Vec<f64>> = p
        .encodings
        .iter()
        .zip(&sources)
        .map(|(enc, rho)| {
            enc.ops()
                .iter()
                .map(|e| (e * rho.matrix() * e.adjoint()).trace().re)
                .collect()
        })
        .collect();

    let branch: Vec<usize> = match policy {
        BranchPolicy::HighestProbability => probs
            .iter()
            .map(|ps| {
                ps.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
                    .map(|(i, _)| i)
                    .expect("nonempty Kraus list")
            })
            .collect(),
        BranchPolicy::BestConditionalFidelity => {
            let dims: Vec<usize> = p.encodings.iter().map(|e| e.ops().len()).collect();
            let mut best: Option<(Vec<usize>, f64)> = None;
            for tuple in crate::fidelity::index_tuples(&dims) {
                let prob: f64 = tuple.iter().zip(&probs).map(|(&b, ps)| ps[b]).product();
                if prob < 1e-6 {
                    continue;
                }
                let overlap = branch_overlap(p, inputs, &after, &tuple)?;
                let conditional = overlap; // branch states are normalized
                if best.as_ref().is_none_or(|(_, c)| conditional > *c) {
                    best = Some((tuple, conditional));
                }
            }
            best.ok_or(Error::BranchProbabilityFloor(1e-6))?.0
        }
    };
    for (l, (&b, ps)) in branch.iter().zip(&probs).enumerate() {
        if ps[b] < 1e-6 {
            return Err(Error::BranchProbabilityFloor(ps[b]));
        }
        let _ = l;
    }

    // branch-conditioned pure inputs ψ_i on the channel-side legs
    let mut new_inputs = Vec::with_capacity(k);
    for ((input, enc), &b) in inputs.iter().zip(&p.encodings).zip(&branch) {
        let op = Operator::new(
            enc.ops()[b].clone(),
            enc.out_layout().clone(),
            enc.in_layout().clone(),
        )?;
        let (v, layout) = op.applied_to(input)?;
        new_inputs.push(PureState::normalized(v, layout)?);
    }

    // branch-conditioned output and its overlap with the original inputs
    let psi_new = joint_input(&new_inputs)?;
    let rho_out = after.lifted(psi_new.layout())?.apply(&psi_new.projector())?;
    let phi_orig = joint_input(inputs)?;
    let overlap = {
        let order: Vec<&str> = rho_out.layout().labels().collect();
        rho_out.expectation(&phi_orig.permute(&order)?)
    };
    let epsilon = 1.0 - overlap;

    // near-product purification of the output and the per-leg matching
    // rotations folded into extra decodings
    let env_names: Vec<String> = (0..k).map(|i| format!("strip-env-{i}")).collect();
    let env_labels: Vec<&str> = env_names.iter().map(|s| s.as_str()).collect();
    let (purifications, purification_bound) = product_purification(&rho_out, inputs, &env_labels)?;

    let mut extra: Vec<KrausMap> = Vec::with_capacity(k);
    for i in 0..k {
        let ref_labels: Vec<&str> = inputs[i]
            .layout()
            .labels()
            .filter(|l| p.encodings[i].in_layout().position(l).is_none())
            .collect();
        let env_dim = purifications[i]
            .layout()
            .dim_of(env_labels[i])
            .expect("purification env");
        let env_layout = SystemLayout::new_with_guard(
            vec![crate::layout::Subsystem::new(
                env_labels[i],
                env_dim,
                crate::layout::Role::Environment,
            )],
            usize::MAX,
        )?;
        let zero = PureState::basis_state(env_layout, 0)?;
        let anchored = new_inputs[i].tensor(&zero)?;
        let v = matching_unitary(&purifications[i], &anchored, &ref_labels)?;
        // D̃_i(X) = tr_env[ V† (X ⊗ |0⟩⟨0|) V ]: Kraus (I ⊗ ⟨c|) V† (I ⊗ |0⟩)
        let d_b = p.encodings[i].in_layout().total_dim();
        let kraus: Vec<DMatrix<C64>> = (0..env_dim)
            .map(|c| {
                DMatrix::from_fn(d_b, d_b, |r, col| {
                    // V: (chan, env) → (source, env); V† row (chan r, env c),
                    // column (source col, env 0)
                    v.matrix()[(col * env_dim, r * env_dim + c)].conj()
                })
            })
            .collect();
        extra.push(KrausMap::new(
            kraus,
            p.encodings[i].in_layout().clone(),
            p.encodings[i].out_layout().clone(),
            KrausKind::TracePreserving,
        )?);
    }

    let evaluate = |extras: &[KrausMap]| -> Result<f64> {
        let tilde = KrausMap::tensor_maps(extras)?;
        let map = KrausMap::compose(&tilde, &after)?;
        Ok(entanglement_fidelity(&new_inputs, &map)?.value)
    };
    let matched_fidelity = evaluate(&extra)?;

    // alternative compensation: invert the branch's isometric part directly
    let mut chosen = extra;
    let mut fidelity_value = matched_fidelity;
    if let Some(polar) = polar_compensations(p, &sources, &branch)? {
        let f = evaluate(&polar)?;
        if f > fidelity_value {
            chosen = polar;
            fidelity_value = f;
        }
    }

    let decodings = match p.decodings.len() {
        1 => vec![KrausMap::compose(
            &KrausMap::tensor_maps(&chosen)?,
            &p.decodings[0],
        )?],
        _ => p
            .decodings
            .iter()
            .zip(&chosen)
            .map(|(d, t)| KrausMap::compose(t, d))
            .collect::<Result<_>>()?,
    };
    let identity_encodings: Vec<KrausMap> = p
        .encodings
        .iter()
        .map(|e| KrausMap::identity(e.out_layout().clone()))
        .collect();
    let protocol = Protocol::new(
        identity_encodings,
        p.channel.clone(),
        decodings,
        Regime::ZeroWay,
    )?;

    // entropy shift: the traced-out-legs entropies of old input vs
    // conditioned output, which equal the old and new source entropies
    let leg_labels: Vec<&str> = p
        .encodings
        .iter()
        .map(|e| e.in_layout().subsystems()[0].label.as_str())
        .collect();
    let entropy = entropy_continuity_check(
        &phi_orig,
        &rho_out.permute(&phi_orig.layout().labels().collect::<Vec<_>>())?,
        &leg_labels,
    )?;

    Ok(Stripping {
        new_inputs,
        fidelity: FidelityReport {
            value: fidelity_value,
            kind: FidelityKind::Entanglement,
            scope: Scope::Global,
            witness: None,
            optimizer_stats: None,
        },
        original_fidelity,
        epsilon,
        purification_bound,
        entropy,
        branch,
        provenance: Provenance {
            input_protocol: p.content_hash(),
            policy: match policy {
                BranchPolicy::HighestProbability => "highest-probability".into(),
                BranchPolicy::BestConditionalFidelity => "best-conditional-fidelity".into(),
            },
            seed: 0,
        },
        protocol,
    })
}

fn branch_overlap(
    p: &Protocol,
    inputs: &[PureState],
    after: &KrausMap,
    tuple: &[usize],
) -> Result<f64> {
    let mut states = Vec::with_capacity(inputs.len());
    for ((input, enc), &b) in inputs.iter().zip(&p.encodings).zip(tuple) {
        let op = Operator::new(
            enc.ops()[b].clone(),
            enc.out_layout().clone(),
            enc.in_layout().clone(),
        )?;
        let (v, layout) = op.applied_to(input)?;
        states.push(PureState::normalized(v, layout)?);
    }
    let psi = joint_input(&states)?;
    let out = after.lifted(psi.layout())?.apply(&psi.projector())?;
    let phi = joint_input(inputs)?;
    let order: Vec<&str> = out.layout().labels().collect();
    Ok(out.expectation(&phi.permute(&order)?))
}

/// When each selected branch element is isometric on its source support
/// (unitary encodings, or near enough), the compensation can simply invert
/// that rotation: D̃_i = Ŵ_i · Ŵ_i† conjugation with Ŵ the completed polar
/// factor. Returns None when any branch is essentially non-isometric.
fn polar_compensations(
    p: &Protocol,
    sources: &[DensityOperator],
    branch: &[usize],
) -> Result<Option<Vec<KrausMap>>> {
    let mut comps = Vec::with_capacity(sources.len());
    for ((enc, rho), &b) in p.encodings.iter().zip(sources).zip(branch) {
        let e = &enc.ops()[b];
        let spectrum = rho.eig_desc()?;
        let d = rho.layout().total_dim();
        let mut support = DMatrix::<C64>::zeros(d, d);
        for (&l, v) in spectrum.eigenvalues.iter().zip(&spectrum.eigenvectors) {
            if l > 1e-10 {
                support += v.vector() * v.vector().adjoint();
            }
        }
        let m = e * &support;
        let svd = m.svd(true, true);
        let u = svd.u.as_ref().expect("svd with u");
        let vt = svd.v_t.as_ref().expect("svd with v_t");
        let mut w = DMatrix::<C64>::zeros(d, d);
        let mut rank = 0;
        for (j, &s) in svd.singular_values.iter().enumerate() {
            if s > 1e-10 {
                w += u.column(j) * vt.row(j);
                rank += 1;
            }
        }
        if rank == 0 {
            return Ok(None);
        }
        // complete W to a unitary by pairing the null spaces
        let cols: Vec<DVector<C64>> = (0..rank)
            .map(|j| vt.row(j).adjoint())
            .collect();
        let rows: Vec<DVector<C64>> = (0..rank).map(|j| u.column(j).into_owned()).collect();
        let in_basis = crate::tensor::complete_basis(cols, d);
        let out_basis = crate::tensor::complete_basis(rows, d);
        for j in rank..d {
            w += &out_basis[j] * in_basis[j].adjoint();
        }
        // D̃ = conjugation by Ŵ: chan/source dims agree for stripping
        comps.push(KrausMap::new(
            vec![w],
            enc.in_layout().clone(),
            enc.out_layout().clone(),
            KrausKind::TracePreserving,
        )?);
    }
    Ok(Some(comps))
}
