//! Completely positive maps in Kraus form.
//!
//! Kraus lists are the canonical representation throughout: the fidelity
//! formulas this crate verifies are stated at the level of Kraus elements,
//! so no Choi conversion exists. Lists are never pruned implicitly —
//! composition multiplies list lengths and silent pruning would change the
//! index sets those formulas sum over; call [`KrausMap::pruned`] explicitly.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{offset_table, SystemLayout};
use crate::rng::{random_isometry_matrix, rng_for};
use crate::tensor::{
    hermitian_eig_desc, matrix_from_rows, matrix_to_rows, max_abs_entry, DensityOperator,
    NormFlag, Operator,
};
use crate::{tol, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KrausKind {
    TracePreserving,
    TraceNonIncreasing,
}

/// A completely positive map ρ ↦ Σ_k E_k ρ E_k† between two labeled spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct KrausMap {
    ops: Vec<DMatrix<C64>>,
    in_layout: SystemLayout,
    out_layout: SystemLayout,
    kind: KrausKind,
}

/// Outcome of [`KrausMap::validate`]. Report-only: constructing a map with a
/// kind its operators do not satisfy is allowed, validation tells you so.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub kind: KrausKind,
    /// ‖ΣE†E − I‖ (max entry), the trace-preservation deviation.
    pub completeness_deviation: f64,
    /// Largest eigenvalue of ΣE†E.
    pub max_eigenvalue: f64,
    pub pass: bool,
}

impl KrausMap {
    pub fn new(
        ops: Vec<DMatrix<C64>>,
        in_layout: SystemLayout,
        out_layout: SystemLayout,
        kind: KrausKind,
    ) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::BadProtocol("Kraus list is empty".into()));
        }
        for e in &ops {
            if e.nrows() != out_layout.total_dim() || e.ncols() != in_layout.total_dim() {
                return Err(Error::DimMismatch {
                    expected: out_layout.total_dim(),
                    got: e.nrows(),
                    context: "Kraus operator shape vs layouts".into(),
                });
            }
        }
        Ok(KrausMap {
            ops,
            in_layout,
            out_layout,
            kind,
        })
    }

    /// The identity channel on `layout`.
    pub fn identity(layout: SystemLayout) -> Self {
        let d = layout.total_dim();
        KrausMap {
            ops: vec![DMatrix::identity(d, d)],
            in_layout: layout.clone(),
            out_layout: layout,
            kind: KrausKind::TracePreserving,
        }
    }

    /// Single-element map ρ ↦ AρA†.
    pub fn from_single(op: Operator, kind: KrausKind) -> Self {
        KrausMap {
            in_layout: op.in_layout().clone(),
            out_layout: op.out_layout().clone(),
            ops: vec![op.matrix().clone()],
            kind,
        }
    }

    pub fn ops(&self) -> &[DMatrix<C64>] {
        &self.ops
    }

    pub fn in_layout(&self) -> &SystemLayout {
        &self.in_layout
    }

    pub fn out_layout(&self) -> &SystemLayout {
        &self.out_layout
    }

    pub fn kind(&self) -> KrausKind {
        self.kind
    }

    /// ΣE†E.
    pub fn completeness_operator(&self) -> DMatrix<C64> {
        let d = self.in_layout.total_dim();
        let mut acc = DMatrix::<C64>::zeros(d, d);
        for e in &self.ops {
            acc += e.adjoint() * e;
        }
        acc
    }

    /// Check the declared kind against ΣE†E at tolerance [`tol::TP`].
    pub fn validate(&self) -> ValidationReport {
        let acc = self.completeness_operator();
        let d = acc.nrows();
        let completeness_deviation = max_abs_entry(&(&acc - DMatrix::<C64>::identity(d, d)));
        let max_eigenvalue = hermitian_eig_desc(&acc)
            .map(|(v, _)| v.first().copied().unwrap_or(0.0))
            .unwrap_or(f64::NAN);
        let pass = match self.kind {
            KrausKind::TracePreserving => completeness_deviation <= tol::TP,
            KrausKind::TraceNonIncreasing => max_eigenvalue <= 1.0 + tol::TP,
        };
        ValidationReport {
            kind: self.kind,
            completeness_deviation,
            max_eigenvalue,
            pass,
        }
    }

    /// Concatenation `second ∘ first`: every pairwise product of Kraus
    /// elements. Trace-preserving only when both factors are.
    pub fn compose(second: &KrausMap, first: &KrausMap) -> Result<KrausMap> {
        if !first.out_layout.compatible(&second.in_layout) {
            return Err(Error::LayoutMismatch(
                "output of the first map does not match input of the second".into(),
            ));
        }
        let ops = second
            .ops
            .iter()
            .flat_map(|b| first.ops.iter().map(move |a| b * a))
            .collect();
        let kind = match (second.kind, first.kind) {
            (KrausKind::TracePreserving, KrausKind::TracePreserving) => {
                KrausKind::TracePreserving
            }
            _ => KrausKind::TraceNonIncreasing,
        };
        KrausMap::new(ops, first.in_layout.clone(), second.out_layout.clone(), kind)
    }

    /// Tensor product of maps: one Kraus element from each factor, layouts
    /// concatenate.
    pub fn tensor_maps(maps: &[KrausMap]) -> Result<KrausMap> {
        let mut iter = maps.iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::BadProtocol("tensor of zero maps".into()))?;
        let mut ops = first.ops.clone();
        let mut in_layout = first.in_layout.clone();
        let mut out_layout = first.out_layout.clone();
        let mut kind = first.kind;
        for m in iter {
            ops = ops
                .iter()
                .flat_map(|a| m.ops.iter().map(move |b| a.kronecker(b)))
                .collect();
            in_layout = in_layout.concat(&m.in_layout)?;
            out_layout = out_layout.concat(&m.out_layout)?;
            if m.kind == KrausKind::TraceNonIncreasing {
                kind = KrausKind::TraceNonIncreasing;
            }
        }
        KrausMap::new(ops, in_layout, out_layout, kind)
    }

    /// ρ ↦ Σ E ρ E†. The output is flagged subnormalized when its trace
    /// drops below 1 − [`tol::TRACE`].
    pub fn apply(&self, rho: &DensityOperator) -> Result<DensityOperator> {
        if !self.in_layout.compatible(rho.layout()) {
            return Err(Error::LayoutMismatch(
                "map input layout does not match the state".into(),
            ));
        }
        let d = self.out_layout.total_dim();
        let mut out = DMatrix::<C64>::zeros(d, d);
        for e in &self.ops {
            out += e * rho.matrix() * e.adjoint();
        }
        let trace = out.trace().re;
        let norm = if trace < 1.0 - tol::TRACE {
            NormFlag::Subnormalized
        } else {
            rho.norm_flag()
        };
        DensityOperator::new(out, self.out_layout.clone(), norm)
    }

    /// Drop Kraus elements with Frobenius norm below `floor`.
    pub fn pruned(&self, floor: f64) -> KrausMap {
        let ops: Vec<DMatrix<C64>> = self
            .ops
            .iter()
            .filter(|e| e.norm() >= floor)
            .cloned()
            .collect();
        KrausMap {
            ops: if ops.is_empty() {
                vec![DMatrix::zeros(
                    self.out_layout.total_dim(),
                    self.in_layout.total_dim(),
                )]
            } else {
                ops
            },
            in_layout: self.in_layout.clone(),
            out_layout: self.out_layout.clone(),
            kind: self.kind,
        }
    }

    /// Scale the map by a positive factor (each element by its square root).
    /// Normalizes post-selected branches that are trace-preserving only on a
    /// particular source.
    pub fn scaled(&self, factor: f64) -> KrausMap {
        let s = C64::new(factor.sqrt(), 0.0);
        KrausMap {
            ops: self.ops.iter().map(|e| e * s).collect(),
            in_layout: self.in_layout.clone(),
            out_layout: self.out_layout.clone(),
            kind: self.kind,
        }
    }

    /// Extend a map to act on `full`, as identity on all other factors. The
    /// map's input factors are located in `full` by label; each is replaced
    /// in place by the corresponding output factor (same position, possibly
    /// a new label or dimension), so the embedded output layout keeps the
    /// factor order of `full`.
    pub fn lifted(&self, full: &SystemLayout) -> Result<KrausMap> {
        let in_labels: Vec<&str> = self.in_layout.labels().collect();
        if self.in_layout.len() != self.out_layout.len() {
            return Err(Error::LayoutMismatch(
                "lift requires equally many input and output factors".into(),
            ));
        }
        let target_pos = full.positions_of(&in_labels)?;
        for (&p, sub) in target_pos.iter().zip(self.in_layout.subsystems()) {
            if full.subsystems()[p].dim != sub.dim {
                return Err(Error::DimMismatch {
                    expected: sub.dim,
                    got: full.subsystems()[p].dim,
                    context: format!("factor `{}`", sub.label),
                });
            }
        }
        let mut out_full_subs = full.subsystems().to_vec();
        for (&p, sub) in target_pos.iter().zip(self.out_layout.subsystems()) {
            out_full_subs[p] = sub.clone();
        }
        let out_full = SystemLayout::new_with_guard(out_full_subs, usize::MAX)?;

        let rest_pos: Vec<usize> = (0..full.len()).filter(|p| !target_pos.contains(p)).collect();
        let in_dims = full.dims();
        let in_strides = full.strides();
        let out_dims = out_full.dims();
        let out_strides = out_full.strides();
        let rest_in = offset_table(&in_strides, &in_dims, &rest_pos);
        let rest_out = offset_table(&out_strides, &out_dims, &rest_pos);
        let tgt_in = offset_table(&in_strides, &in_dims, &target_pos);
        let tgt_out = offset_table(&out_strides, &out_dims, &target_pos);

        let lift_one = |e: &DMatrix<C64>| -> DMatrix<C64> {
            let mut big = DMatrix::<C64>::zeros(out_full.total_dim(), full.total_dim());
            for (&ri, &ro) in rest_in.iter().zip(&rest_out) {
                for (to, &too) in tgt_out.iter().enumerate() {
                    for (ti, &tio) in tgt_in.iter().enumerate() {
                        let z = e[(to, ti)];
                        if z != C64::new(0.0, 0.0) {
                            big[(ro + too, ri + tio)] = z;
                        }
                    }
                }
            }
            big
        };
        let ops = self.ops.iter().map(lift_one).collect();
        KrausMap::new(ops, full.clone(), out_full, self.kind)
    }
}

// ---------------------------------------------------------------------------
// Standard channel zoo
// ---------------------------------------------------------------------------

/// Test-fixture channels. `p`/`gamma` must lie in the unit interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum StandardChannel {
    Identity,
    /// ρ ↦ (1−p)ρ + p·I/d, via the Weyl (generalized Pauli) twirl.
    Depolarizing { p: f64 },
    /// Phase flip: {√(1−p)·I} ∪ {√(p/(d−1))·Zᵏ}. For qubits this is
    /// {√(1−p)·I, √p·Z}, damping off-diagonals by (1−2p).
    Dephasing { p: f64 },
    /// Energy relaxation, qubits only: `{[[1,0],[0,√(1−γ)]], [[0,√γ],[0,0]]}`.
    AmplitudeDamping { gamma: f64 },
}

impl StandardChannel {
    /// Parse `"name"` or `"name:param"`, e.g. `"depolarizing:0.25"`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => {
                let v: f64 = p
                    .parse()
                    .map_err(|_| Error::Serde(format!("bad channel parameter `{p}`")))?;
                (n, Some(v))
            }
            None => (s, None),
        };
        match (name, param) {
            ("identity", None) => Ok(StandardChannel::Identity),
            ("depolarizing", Some(p)) => Ok(StandardChannel::Depolarizing { p }),
            ("dephasing", Some(p)) => Ok(StandardChannel::Dephasing { p }),
            ("amplitude-damping" | "amplitude_damping", Some(gamma)) => {
                Ok(StandardChannel::AmplitudeDamping { gamma })
            }
            _ => Err(Error::Serde(format!("unknown channel spec `{s}`"))),
        }
    }
}

fn check_unit_interval(name: &'static str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) || !value.is_finite() {
        return Err(Error::ParamOutOfRange { name, value });
    }
    Ok(())
}

/// Weyl shift X|j⟩ = |j+1 mod d⟩ and clock Z|j⟩ = ω^j|j⟩ products X^a Z^b.
fn weyl_operator(d: usize, a: usize, b: usize) -> DMatrix<C64> {
    let omega = 2.0 * std::f64::consts::PI / d as f64;
    DMatrix::from_fn(d, d, |r, c| {
        if r == (c + a) % d {
            C64::from_polar(1.0, omega * (b * c) as f64)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Build a standard channel acting on the whole of `layout`.
pub fn standard_channel(which: StandardChannel, layout: &SystemLayout) -> Result<KrausMap> {
    let d = layout.total_dim();
    let ops: Vec<DMatrix<C64>> = match which {
        StandardChannel::Identity => vec![DMatrix::identity(d, d)],
        StandardChannel::Depolarizing { p } => {
            check_unit_interval("p", p)?;
            let mut ops = vec![
                DMatrix::<C64>::identity(d, d).scale((1.0 - p + p / (d * d) as f64).sqrt()),
            ];
            let w = (p / (d * d) as f64).sqrt();
            for a in 0..d {
                for b in 0..d {
                    if a == 0 && b == 0 {
                        continue;
                    }
                    ops.push(weyl_operator(d, a, b).scale(w));
                }
            }
            ops
        }
        StandardChannel::Dephasing { p } => {
            check_unit_interval("p", p)?;
            let mut ops = vec![DMatrix::<C64>::identity(d, d).scale((1.0 - p).sqrt())];
            let w = (p / (d - 1) as f64).sqrt();
            for k in 1..d {
                ops.push(weyl_operator(d, 0, k).scale(w));
            }
            ops
        }
        StandardChannel::AmplitudeDamping { gamma } => {
            check_unit_interval("gamma", gamma)?;
            if d != 2 {
                return Err(Error::DimMismatch {
                    expected: 2,
                    got: d,
                    context: "amplitude damping is a qubit channel".into(),
                });
            }
            let mut e0 = DMatrix::<C64>::zeros(2, 2);
            e0[(0, 0)] = C64::new(1.0, 0.0);
            e0[(1, 1)] = C64::new((1.0 - gamma).sqrt(), 0.0);
            let mut e1 = DMatrix::<C64>::zeros(2, 2);
            e1[(0, 1)] = C64::new(gamma.sqrt(), 0.0);
            vec![e0, e1]
        }
    };
    KrausMap::new(
        ops,
        layout.clone(),
        layout.clone(),
        KrausKind::TracePreserving,
    )
}

/// Haar-style random channel from a Stinespring isometry V: in → out ⊗ env,
/// Kraus elements E_k = (I ⊗ ⟨k|)V. Deterministic per seed.
pub fn random_channel(
    in_layout: &SystemLayout,
    out_layout: &SystemLayout,
    env_dim: usize,
    seed: u64,
) -> Result<KrausMap> {
    let din = in_layout.total_dim();
    let dout = out_layout.total_dim();
    if env_dim == 0 || dout * env_dim < din {
        return Err(Error::NoIsometry {
            out_env: dout * env_dim,
            in_dim: din,
        });
    }
    let mut rng = rng_for(seed, 0x5f5e, 0);
    let v = random_isometry_matrix(&mut rng, dout * env_dim, din);
    let ops = (0..env_dim)
        .map(|k| DMatrix::from_fn(dout, din, |o, i| v[(o * env_dim + k, i)]))
        .collect();
    KrausMap::new(
        ops,
        in_layout.clone(),
        out_layout.clone(),
        KrausKind::TracePreserving,
    )
}

/// Random trace-preserving map that is a mild perturbation of a unitary:
/// a Stinespring isometry whose env-branch 0 carries weight ≈ 1 − `noise`.
/// `noise` = 0 or `env_dim` ≤ 1 gives an exact unitary conjugation.
pub fn near_unitary_channel(
    layout: &SystemLayout,
    env_dim: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<KrausMap> {
    let d = layout.total_dim();
    let u = crate::rng::random_unitary(rng, d);
    if env_dim <= 1 || noise == 0.0 {
        return Ok(KrausMap {
            ops: vec![u],
            in_layout: layout.clone(),
            out_layout: layout.clone(),
            kind: KrausKind::TracePreserving,
        });
    }
    let mut v = DMatrix::<C64>::zeros(d * env_dim, d);
    for c in 0..d {
        for r in 0..d {
            v[(r * env_dim, c)] = u[(r, c)] * C64::new((1.0 - noise).sqrt(), 0.0);
        }
    }
    let g = crate::rng::gaussian_matrix(rng, d * env_dim, d);
    for c in 0..d {
        let mut col_norm = 0.0;
        for r in 0..d * env_dim {
            if r % env_dim != 0 {
                col_norm += g[(r, c)].norm_sqr();
            }
        }
        let scale = C64::new((noise / col_norm).sqrt(), 0.0);
        for r in 0..d * env_dim {
            if r % env_dim != 0 {
                v[(r, c)] += g[(r, c)] * scale;
            }
        }
    }
    // modified Gram-Schmidt keeps columns close to the seeded direction
    for c in 0..d {
        for prev in 0..c {
            let overlap = v.column(prev).dotc(&v.column(c));
            let prev_col = v.column(prev).into_owned();
            let mut col = v.column_mut(c);
            col.axpy(-overlap, &prev_col, C64::new(1.0, 0.0));
        }
        let norm = v.column(c).norm();
        let mut col = v.column_mut(c);
        col /= C64::new(norm, 0.0);
    }
    let ops = (0..env_dim)
        .map(|k| DMatrix::from_fn(d, d, |o, i| v[(o * env_dim + k, i)]))
        .collect();
    KrausMap::new(
        ops,
        layout.clone(),
        layout.clone(),
        KrausKind::TracePreserving,
    )
}

// ---------------------------------------------------------------------------
// Partial isometries and trace-preserving embedding
// ---------------------------------------------------------------------------

/// Operator W with W†W a projector: an isometry on its support.
#[derive(Debug, Clone)]
pub struct PartialIsometry {
    matrix: DMatrix<C64>,
    in_layout: SystemLayout,
    out_layout: SystemLayout,
}

impl PartialIsometry {
    pub fn new(
        matrix: DMatrix<C64>,
        in_layout: SystemLayout,
        out_layout: SystemLayout,
    ) -> Result<Self> {
        if matrix.nrows() != out_layout.total_dim() || matrix.ncols() != in_layout.total_dim() {
            return Err(Error::DimMismatch {
                expected: out_layout.total_dim(),
                got: matrix.nrows(),
                context: "partial isometry shape vs layouts".into(),
            });
        }
        let support = matrix.adjoint() * &matrix;
        let idem = max_abs_entry(&(&support * &support - &support));
        if idem > tol::ISO {
            return Err(Error::BrokenIsometry(format!(
                "W†W is not idempotent: deviation {idem:.3e}"
            )));
        }
        Ok(PartialIsometry {
            matrix,
            in_layout,
            out_layout,
        })
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn in_layout(&self) -> &SystemLayout {
        &self.in_layout
    }

    pub fn out_layout(&self) -> &SystemLayout {
        &self.out_layout
    }

    /// W†W.
    pub fn support_projector(&self) -> DMatrix<C64> {
        self.matrix.adjoint() * &self.matrix
    }

    /// ‖(W†W)² − W†W‖, for reporting.
    pub fn idempotency_deviation(&self) -> f64 {
        let s = self.support_projector();
        max_abs_entry(&(&s * &s - &s))
    }

    /// The isometry as a single-element trace-nonincreasing Kraus map.
    pub fn as_kraus(&self) -> KrausMap {
        KrausMap {
            ops: vec![self.matrix.clone()],
            in_layout: self.in_layout.clone(),
            out_layout: self.out_layout.clone(),
            kind: KrausKind::TraceNonIncreasing,
        }
    }
}

/// Complete a trace-nonincreasing map to a trace-preserving one by routing
/// the leaked weight into a fixed state:
/// ρ ↦ Λ(ρ) + tr((I − ΣE†E)ρ)·sink.
pub fn tp_completion(map: &KrausMap, sink: &DensityOperator) -> Result<KrausMap> {
    if !sink.layout().compatible(map.out_layout()) {
        return Err(Error::LayoutMismatch(
            "sink must live on the map output layout".into(),
        ));
    }
    if sink.norm_flag() != NormFlag::Normalized {
        return Err(Error::SubnormalizedInput);
    }
    let din = map.in_layout.total_dim();
    let remainder = DMatrix::<C64>::identity(din, din) - map.completeness_operator();
    let (rem_vals, rem_vecs) = hermitian_eig_desc(&remainder)?;
    let leak: Vec<(f64, &DVector<C64>)> = rem_vals
        .iter()
        .zip(&rem_vecs)
        .filter(|(&l, _)| l > tol::EIG)
        .map(|(&l, v)| (l, v))
        .collect();
    let mut ops = map.ops.clone();
    if !leak.is_empty() {
        let sink_spec = sink.eig_desc()?;
        for (s, chi) in sink_spec
            .eigenvalues
            .iter()
            .zip(&sink_spec.eigenvectors)
            .filter(|(&s, _)| s > tol::EIG)
        {
            let scaled = chi.vector() * C64::new(s.sqrt(), 0.0);
            for (r, psi) in &leak {
                ops.push(&scaled * psi.adjoint() * C64::new(r.sqrt(), 0.0));
            }
        }
    }
    let completed = KrausMap::new(
        ops,
        map.in_layout.clone(),
        map.out_layout.clone(),
        KrausKind::TracePreserving,
    )?;
    debug_assert!(completed.validate().pass);
    Ok(completed)
}

/// Embed a partial isometry in a trace-preserving map:
/// ρ ↦ WρW† + tr((I − W†W)ρ)·sink.
///
/// On states supported inside W†W the embedding acts exactly as conjugation
/// by W, so it loses nothing where the isometry was constructed to work.
pub fn embed_isometry_tp(w: &PartialIsometry, sink: &DensityOperator) -> Result<KrausMap> {
    tp_completion(&w.as_kraus(), sink)
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct KrausOpJson {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct KrausJson {
    in_layout: Vec<crate::layout::Subsystem>,
    out_layout: Vec<crate::layout::Subsystem>,
    ops: Vec<KrausOpJson>,
    kind: KrausKind,
}

impl Serialize for KrausMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        KrausJson {
            in_layout: self.in_layout.subsystems().to_vec(),
            out_layout: self.out_layout.subsystems().to_vec(),
            ops: self
                .ops
                .iter()
                .map(|e| {
                    let (re, im) = matrix_to_rows(e);
                    KrausOpJson { re, im }
                })
                .collect(),
            kind: self.kind,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for KrausMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = KrausJson::deserialize(d)?;
        let in_layout = SystemLayout::new(j.in_layout).map_err(serde::de::Error::custom)?;
        let out_layout = SystemLayout::new(j.out_layout).map_err(serde::de::Error::custom)?;
        let ops = j
            .ops
            .iter()
            .map(|o| matrix_from_rows(&o.re, &o.im))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        KrausMap::new(ops, in_layout, out_layout, j.kind).map_err(serde::de::Error::custom)
    }
}
