//! Dense linear algebra over labeled tensor products: states, density
//! operators, partial traces and inner products, purifications, spectral
//! decompositions and entropy.
//!
//! Conventions, fixed once so that results are reproducible bit for bit:
//!
//! - basis indices ravel row-major over the layout, first subsystem most
//!   significant (Kronecker convention);
//! - spectra are sorted by descending eigenvalue; inside a degenerate block
//!   eigenvectors are ordered by the index of their largest-magnitude
//!   component;
//! - every eigenvector and purification is phase-fixed so that its first
//!   amplitude above 1e-12 in magnitude is real and positive.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::layout::{offset_table, Role, Subsystem, SystemLayout};
use crate::{tol, Error, Result};

/// General linear map between two labeled spaces, stored as a dense
/// `out_dim × in_dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    matrix: DMatrix<C64>,
    out_layout: SystemLayout,
    in_layout: SystemLayout,
}

/// Trace status of a density operator. Post-selected branches of
/// trace-nonincreasing maps are subnormalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormFlag {
    Normalized,
    Subnormalized,
}

/// Hermitian positive-semidefinite operator with trace 1 (or ≤ 1 when
/// subnormalized).
///
/// Hermiticity and the trace window are checked on every construction;
/// positivity is only checked where inputs cross an API boundary
/// ([`DensityOperator::validate_psd`]) because internally produced operators
/// are positive by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    matrix: DMatrix<C64>,
    layout: SystemLayout,
    norm: NormFlag,
}

/// Unit vector with a layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    vector: DVector<C64>,
    layout: SystemLayout,
}

/// Spectral decomposition with descending eigenvalues and the deterministic
/// ordering / phase conventions of [`DensityOperator::eig_desc`].
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<PureState>,
}

impl Spectrum {
    /// Subnormalized eigenvectors √λ·|φ⟩, dropping eigenvalues below `floor`.
    pub fn subnormalized_vectors(&self, floor: f64) -> Vec<DVector<C64>> {
        self.eigenvalues
            .iter()
            .zip(&self.eigenvectors)
            .filter(|(&l, _)| l > floor)
            .map(|(&l, v)| v.vector() * C64::new(l.sqrt(), 0.0))
            .collect()
    }

    /// Numerical rank: eigenvalues above `floor`.
    pub fn rank(&self, floor: f64) -> usize {
        self.eigenvalues.iter().filter(|&&l| l > floor).count()
    }
}

pub(crate) fn max_abs_entry(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub(crate) fn hermiticity_deviation(m: &DMatrix<C64>) -> f64 {
    max_abs_entry(&(m - m.adjoint()))
}

/// Fix the phase of `v` so its first component with magnitude > 1e-12 is
/// real positive. Zero vectors are left untouched.
pub(crate) fn phase_fix(v: &mut DVector<C64>) {
    if let Some(z) = v.iter().find(|z| z.norm() > tol::EIG) {
        let factor = z.conj() / z.norm();
        for x in v.iter_mut() {
            *x *= factor;
        }
    }
}

/// Hermitian eigendecomposition with the crate's deterministic conventions.
/// Returns descending eigenvalues and matching unit eigenvectors.
pub(crate) fn hermitian_eig_desc(m: &DMatrix<C64>) -> Result<(Vec<f64>, Vec<DVector<C64>>)> {
    let dev = hermiticity_deviation(m);
    if dev > tol::HERM {
        return Err(Error::NotHermitian(dev));
    }
    // symmetrize so the decomposition sees an exactly Hermitian input
    let h = (m + m.adjoint()).scale(0.5);
    let se = h.symmetric_eigen();
    let n = se.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        se.eigenvalues[b]
            .partial_cmp(&se.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let mut values: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vectors: Vec<DVector<C64>> = order
        .iter()
        .map(|&i| {
            let mut v: DVector<C64> = se.eigenvectors.column(i).into_owned();
            phase_fix(&mut v);
            v
        })
        .collect();
    // deterministic order inside degenerate blocks: by the index of the
    // largest-magnitude component
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (values[end - 1] - values[end]).abs() <= tol::DEGENERACY {
            end += 1;
        }
        if end - start > 1 {
            let mut block: Vec<(usize, f64, DVector<C64>)> = (start..end)
                .map(|i| {
                    let v = vectors[i].clone();
                    let mut arg = 0;
                    let mut best = -1.0;
                    for (j, z) in v.iter().enumerate() {
                        if z.norm() > best {
                            best = z.norm();
                            arg = j;
                        }
                    }
                    (arg, values[i], v)
                })
                .collect();
            block.sort_by_key(|&(arg, _, _)| arg);
            for (offset, (_, value, vector)) in block.into_iter().enumerate() {
                values[start + offset] = value;
                vectors[start + offset] = vector;
            }
        }
        start = end;
    }
    Ok((values, vectors))
}

/// Complete an orthonormal set to an orthonormal basis of `dim`, drawing
/// candidates from the computational basis in index order.
pub(crate) fn complete_basis(mut vs: Vec<DVector<C64>>, dim: usize) -> Vec<DVector<C64>> {
    let mut candidate = 0usize;
    while vs.len() < dim {
        assert!(candidate < dim, "ran out of completion candidates");
        let mut v = DVector::<C64>::zeros(dim);
        v[candidate] = C64::new(1.0, 0.0);
        candidate += 1;
        for w in &vs {
            let overlap = w.dotc(&v);
            v -= w * overlap;
        }
        let norm = v.norm();
        if norm > 1e-7 {
            v /= C64::new(norm, 0.0);
            phase_fix(&mut v);
            vs.push(v);
        }
    }
    vs
}

impl Operator {
    pub fn new(
        matrix: DMatrix<C64>,
        out_layout: SystemLayout,
        in_layout: SystemLayout,
    ) -> Result<Self> {
        if matrix.nrows() != out_layout.total_dim() {
            return Err(Error::DimMismatch {
                expected: out_layout.total_dim(),
                got: matrix.nrows(),
                context: "operator rows vs output layout".into(),
            });
        }
        if matrix.ncols() != in_layout.total_dim() {
            return Err(Error::DimMismatch {
                expected: in_layout.total_dim(),
                got: matrix.ncols(),
                context: "operator columns vs input layout".into(),
            });
        }
        Ok(Operator {
            matrix,
            out_layout,
            in_layout,
        })
    }

    pub fn identity(layout: SystemLayout) -> Self {
        let d = layout.total_dim();
        Operator {
            matrix: DMatrix::identity(d, d),
            out_layout: layout.clone(),
            in_layout: layout,
        }
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn out_layout(&self) -> &SystemLayout {
        &self.out_layout
    }

    pub fn in_layout(&self) -> &SystemLayout {
        &self.in_layout
    }

    pub fn adjoint(&self) -> Operator {
        Operator {
            matrix: self.matrix.adjoint(),
            out_layout: self.in_layout.clone(),
            in_layout: self.out_layout.clone(),
        }
    }

    /// Kronecker product; layouts concatenate. Errors on label collision.
    pub fn tensor(&self, other: &Operator) -> Result<Operator> {
        Ok(Operator {
            matrix: self.matrix.kronecker(&other.matrix),
            out_layout: self.out_layout.concat(&other.out_layout)?,
            in_layout: self.in_layout.concat(&other.in_layout)?,
        })
    }

    pub fn apply_to_vector(&self, v: &DVector<C64>) -> DVector<C64> {
        &self.matrix * v
    }

    /// ‖U†U − I‖ max-entry, for unitarity checks.
    pub fn unitarity_deviation(&self) -> f64 {
        let d = self.in_layout.total_dim();
        max_abs_entry(&(self.matrix.adjoint() * &self.matrix - DMatrix::<C64>::identity(d, d)))
    }

    /// Apply to the factors of `psi` named by this operator's input layout,
    /// acting as identity elsewhere. The untouched factors keep their
    /// original relative order; the operator's output factors are appended
    /// at the end. The result is not renormalized.
    pub fn applied_to(&self, psi: &PureState) -> Result<(DVector<C64>, SystemLayout)> {
        let full = psi.layout();
        let in_labels: Vec<&str> = self.in_layout.labels().collect();
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
        let rest_pos: Vec<usize> = (0..full.len()).filter(|p| !target_pos.contains(p)).collect();
        let dims = full.dims();
        let strides = full.strides();
        let rest_table = offset_table(&strides, &dims, &rest_pos);
        let in_table = offset_table(&strides, &dims, &target_pos);
        let rest_layout = full.select(&rest_pos);
        let out_layout = rest_layout.concat(&self.out_layout)?;
        let d_out = self.out_layout.total_dim();
        let mut w = DVector::<C64>::zeros(rest_table.len() * d_out);
        for (r, &ro) in rest_table.iter().enumerate() {
            for to in 0..d_out {
                let mut acc = C64::new(0.0, 0.0);
                for (ti, &io) in in_table.iter().enumerate() {
                    acc += self.matrix[(to, ti)] * psi.vector()[ro + io];
                }
                w[r * d_out + to] = acc;
            }
        }
        Ok((w, out_layout))
    }
}

impl PureState {
    pub fn new(vector: DVector<C64>, layout: SystemLayout) -> Result<Self> {
        if vector.len() != layout.total_dim() {
            return Err(Error::DimMismatch {
                expected: layout.total_dim(),
                got: vector.len(),
                context: "state vector vs layout".into(),
            });
        }
        let norm = vector.norm();
        if (norm - 1.0).abs() > tol::NORM {
            return Err(Error::NotNormalized(norm));
        }
        Ok(PureState { vector, layout })
    }

    /// Normalize and wrap; errors only on the zero vector.
    pub fn normalized(mut vector: DVector<C64>, layout: SystemLayout) -> Result<Self> {
        let norm = vector.norm();
        if norm < tol::EIG {
            return Err(Error::NotNormalized(norm));
        }
        vector /= C64::new(norm, 0.0);
        PureState::new(vector, layout)
    }

    /// Computational basis state |index⟩.
    pub fn basis_state(layout: SystemLayout, index: usize) -> Result<Self> {
        let mut v = DVector::<C64>::zeros(layout.total_dim());
        if index >= v.len() {
            return Err(Error::DimMismatch {
                expected: v.len(),
                got: index,
                context: "basis index".into(),
            });
        }
        v[index] = C64::new(1.0, 0.0);
        PureState::new(v, layout)
    }

    pub fn vector(&self) -> &DVector<C64> {
        &self.vector
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn tensor(&self, other: &PureState) -> Result<PureState> {
        let layout = self.layout.concat(&other.layout)?;
        Ok(PureState {
            vector: self.vector.kronecker(&other.vector),
            layout,
        })
    }

    /// |ψ⟩⟨ψ| as a density operator.
    pub fn projector(&self) -> DensityOperator {
        DensityOperator {
            matrix: &self.vector * self.vector.adjoint(),
            layout: self.layout.clone(),
            norm: NormFlag::Normalized,
        }
    }

    pub fn overlap(&self, other: &PureState) -> C64 {
        self.vector.dotc(&other.vector)
    }

    /// Reorder factors to `target_order` (labels). Pure index arithmetic.
    pub fn permute(&self, target_order: &[&str]) -> Result<PureState> {
        let target = {
            let positions = self.layout.positions_of(target_order)?;
            if positions.len() != self.layout.len() {
                return Err(Error::LayoutMismatch(
                    "permutation must mention every factor exactly once".into(),
                ));
            }
            self.layout.select(&positions)
        };
        let perm = self.layout.permutation_to(&target)?;
        let vector = permute_vector(&self.vector, &self.layout.dims(), &perm);
        Ok(PureState {
            vector,
            layout: target,
        })
    }

    /// Reduced density operator on the factors named in `keep`.
    pub fn reduced(&self, keep: &[&str]) -> Result<DensityOperator> {
        let discard: Vec<&str> = self
            .layout
            .labels()
            .filter(|l| !keep.contains(l))
            .collect();
        self.projector().partial_trace(&discard)
    }
}

impl DensityOperator {
    pub fn new(matrix: DMatrix<C64>, layout: SystemLayout, norm: NormFlag) -> Result<Self> {
        if matrix.nrows() != layout.total_dim() || matrix.ncols() != layout.total_dim() {
            return Err(Error::DimMismatch {
                expected: layout.total_dim(),
                got: matrix.nrows(),
                context: "density matrix vs layout".into(),
            });
        }
        let dev = hermiticity_deviation(&matrix);
        if dev > tol::HERM {
            return Err(Error::NotHermitian(dev));
        }
        let trace = matrix.trace().re;
        match norm {
            NormFlag::Normalized => {
                if (trace - 1.0).abs() > tol::TRACE {
                    return Err(Error::TraceOutOfRange(trace));
                }
            }
            NormFlag::Subnormalized => {
                if trace <= 0.0 || trace > 1.0 + tol::TRACE {
                    return Err(Error::TraceOutOfRange(trace));
                }
            }
        }
        Ok(DensityOperator {
            matrix,
            layout,
            norm,
        })
    }

    /// I/d on the given layout.
    pub fn maximally_mixed(layout: SystemLayout) -> Self {
        let d = layout.total_dim();
        DensityOperator {
            matrix: DMatrix::<C64>::identity(d, d) / C64::new(d as f64, 0.0),
            layout,
            norm: NormFlag::Normalized,
        }
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn layout(&self) -> &SystemLayout {
        &self.layout
    }

    pub fn norm_flag(&self) -> NormFlag {
        self.norm
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    /// Eigenvalue check against −[`tol::PSD`]. Call where untrusted inputs
    /// enter; internal constructions are positive by construction.
    pub fn validate_psd(&self) -> Result<()> {
        let (values, _) = hermitian_eig_desc(&self.matrix)?;
        if let Some(&min) = values.last() {
            if min < -tol::PSD {
                return Err(Error::NotPositive(min));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, other: &DensityOperator) -> Result<DensityOperator> {
        let layout = self.layout.concat(&other.layout)?;
        let norm = match (self.norm, other.norm) {
            (NormFlag::Normalized, NormFlag::Normalized) => NormFlag::Normalized,
            _ => NormFlag::Subnormalized,
        };
        Ok(DensityOperator {
            matrix: self.matrix.kronecker(&other.matrix),
            layout,
            norm,
        })
    }

    /// Trace out the subsystems named in `discard`.
    pub fn partial_trace(&self, discard: &[&str]) -> Result<DensityOperator> {
        let discard_pos = self.layout.positions_of(discard)?;
        let keep_pos: Vec<usize> = (0..self.layout.len())
            .filter(|p| !discard_pos.contains(p))
            .collect();
        let dims = self.layout.dims();
        let strides = self.layout.strides();
        let keep_table = offset_table(&strides, &dims, &keep_pos);
        let drop_table = offset_table(&strides, &dims, &discard_pos);
        let kd = keep_table.len();
        let mut out = DMatrix::<C64>::zeros(kd, kd);
        for (r, &ro) in keep_table.iter().enumerate() {
            for (c, &co) in keep_table.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for &d in &drop_table {
                    acc += self.matrix[(ro + d, co + d)];
                }
                out[(r, c)] = acc;
            }
        }
        Ok(DensityOperator {
            matrix: out,
            layout: self.layout.select(&keep_pos),
            norm: self.norm,
        })
    }

    /// Reorder factors to `target_order` (labels).
    pub fn permute(&self, target_order: &[&str]) -> Result<DensityOperator> {
        let positions = self.layout.positions_of(target_order)?;
        if positions.len() != self.layout.len() {
            return Err(Error::LayoutMismatch(
                "permutation must mention every factor exactly once".into(),
            ));
        }
        let target = self.layout.select(&positions);
        let perm = self.layout.permutation_to(&target)?;
        let matrix = permute_matrix(&self.matrix, &self.layout.dims(), &perm);
        Ok(DensityOperator {
            matrix,
            layout: target,
            norm: self.norm,
        })
    }

    /// ⟨ψ|ρ|ψ⟩ (real part; the form is real for Hermitian ρ).
    pub fn expectation(&self, psi: &PureState) -> f64 {
        (psi.vector.adjoint() * &self.matrix * &psi.vector)[(0, 0)].re
    }

    /// Spectral decomposition with descending eigenvalues, deterministic
    /// degeneracy ordering and phase-fixed eigenvectors.
    pub fn eig_desc(&self) -> Result<Spectrum> {
        let (eigenvalues, vectors) = hermitian_eig_desc(&self.matrix)?;
        let eigenvectors = vectors
            .into_iter()
            .map(|v| PureState {
                vector: v,
                layout: self.layout.clone(),
            })
            .collect();
        Ok(Spectrum {
            eigenvalues,
            eigenvectors,
        })
    }

    /// Von Neumann entropy in bits: S = −Σ λ log₂ λ over eigenvalues above
    /// [`tol::EIG`]; small negative eigenvalues are clamped to zero.
    pub fn von_neumann_entropy(&self) -> f64 {
        let (values, _) = hermitian_eig_desc(&self.matrix).expect("density operator is Hermitian");
        values
            .iter()
            .filter(|&&l| l > tol::EIG)
            .map(|&l| -l * l.log2())
            .sum()
    }

    /// Eigenbasis purification into a fresh environment factor of dimension
    /// rank(ρ): |Ψ⟩ = Σ √λ_k |φ_k⟩ ⊗ |k⟩. Descending eigenvalues, so the
    /// dominant eigenvector pairs with |0⟩ of the environment.
    pub fn purify(&self, env_label: &str) -> Result<PureState> {
        if self.norm == NormFlag::Subnormalized {
            return Err(Error::SubnormalizedInput);
        }
        let spectrum = self.eig_desc()?;
        let rank = spectrum.rank(tol::EIG).max(1);
        self.purify_impl(env_label, rank, &spectrum)
    }

    /// Purification with a declared environment dimension ≥ rank(ρ).
    pub fn purify_with_dim(&self, env_label: &str, env_dim: usize) -> Result<PureState> {
        if self.norm == NormFlag::Subnormalized {
            return Err(Error::SubnormalizedInput);
        }
        let spectrum = self.eig_desc()?;
        let rank = spectrum.rank(tol::EIG).max(1);
        if env_dim < rank {
            return Err(Error::DimMismatch {
                expected: rank,
                got: env_dim,
                context: "environment dimension below rank".into(),
            });
        }
        self.purify_impl(env_label, env_dim, &spectrum)
    }

    fn purify_impl(&self, env_label: &str, env_dim: usize, spectrum: &Spectrum) -> Result<PureState> {
        let d = self.layout.total_dim();
        let env = SystemLayout::new_with_guard(
            vec![Subsystem::new(env_label, env_dim, Role::Environment)],
            usize::MAX,
        )?;
        let layout = self.layout.concat(&env)?;
        let mut v = DVector::<C64>::zeros(d * env_dim);
        for (k, (&l, phi)) in spectrum
            .eigenvalues
            .iter()
            .zip(&spectrum.eigenvectors)
            .enumerate()
        {
            if l <= tol::EIG || k >= env_dim {
                continue;
            }
            let w = l.sqrt();
            for (i, z) in phi.vector.iter().enumerate() {
                v[i * env_dim + k] = z * C64::new(w, 0.0);
            }
        }
        PureState::new(v, layout)
    }
}

/// Permute the factors of a vector: entry at the permuted multi-index moves
/// accordingly. `perm[k]` is the position in the *old* layout of the factor
/// that lands at position `k` in the new one.
pub(crate) fn permute_vector(v: &DVector<C64>, dims: &[usize], perm: &[usize]) -> DVector<C64> {
    let old_strides = crate::layout::strides_of(dims);
    let new_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let new_strides = crate::layout::strides_of(&new_dims);
    let n = v.len();
    let mut out = DVector::<C64>::zeros(n);
    let mut digits = vec![0usize; dims.len()];
    for flat in 0..n {
        // digits of `flat` in the old layout
        let mut rem = flat;
        for (k, &s) in old_strides.iter().enumerate() {
            digits[k] = rem / s;
            rem %= s;
        }
        let new_flat: usize = perm
            .iter()
            .enumerate()
            .map(|(k, &p)| digits[p] * new_strides[k])
            .sum();
        out[new_flat] = v[flat];
    }
    out
}

pub(crate) fn permute_matrix(m: &DMatrix<C64>, dims: &[usize], perm: &[usize]) -> DMatrix<C64> {
    let old_strides = crate::layout::strides_of(dims);
    let new_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let new_strides = crate::layout::strides_of(&new_dims);
    let n = m.nrows();
    let mut map = vec![0usize; n];
    let mut digits = vec![0usize; dims.len()];
    for (flat, slot) in map.iter_mut().enumerate() {
        let mut rem = flat;
        for (k, &s) in old_strides.iter().enumerate() {
            digits[k] = rem / s;
            rem %= s;
        }
        *slot = perm
            .iter()
            .enumerate()
            .map(|(k, &p)| digits[p] * new_strides[k])
            .sum();
    }
    let mut out = DMatrix::<C64>::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            out[(map[r], map[c])] = m[(r, c)];
        }
    }
    out
}

/// Contract an operator with fixed vectors on a subset of tensor factors.
///
/// `bra` entries name factors of the *output* layout and enter conjugated;
/// `ket` entries name factors of the *input* layout. The result acts between
/// the complements. Vectors need not be normalized — contracting with
/// subnormalized eigenvectors √λ·|φ⟩ is the intended use.
pub fn partial_inner_product(
    op: &Operator,
    bra: &[(&str, DVector<C64>)],
    ket: &[(&str, DVector<C64>)],
) -> Result<Operator> {
    let out = op.out_layout();
    let inp = op.in_layout();
    let bra_pos: Vec<usize> = bra
        .iter()
        .map(|(l, v)| {
            let p = out.require_position(l)?;
            if out.subsystems()[p].dim != v.len() {
                return Err(Error::DimMismatch {
                    expected: out.subsystems()[p].dim,
                    got: v.len(),
                    context: format!("bra vector on `{l}`"),
                });
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let ket_pos: Vec<usize> = ket
        .iter()
        .map(|(l, v)| {
            let p = inp.require_position(l)?;
            if inp.subsystems()[p].dim != v.len() {
                return Err(Error::DimMismatch {
                    expected: inp.subsystems()[p].dim,
                    got: v.len(),
                    context: format!("ket vector on `{l}`"),
                });
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;

    let keep_out: Vec<usize> = (0..out.len()).filter(|p| !bra_pos.contains(p)).collect();
    let keep_in: Vec<usize> = (0..inp.len()).filter(|p| !ket_pos.contains(p)).collect();

    let out_dims = out.dims();
    let in_dims = inp.dims();
    let out_strides = out.strides();
    let in_strides = inp.strides();

    let keep_out_table = offset_table(&out_strides, &out_dims, &keep_out);
    let keep_in_table = offset_table(&in_strides, &in_dims, &keep_in);
    let bra_table = offset_table(&out_strides, &out_dims, &bra_pos);
    let ket_table = offset_table(&in_strides, &in_dims, &ket_pos);

    // coefficient of each bra/ket multi-index: product of vector components
    let bra_coeff = contraction_coefficients(&bra_pos, &out_dims, bra, true);
    let ket_coeff = contraction_coefficients(&ket_pos, &in_dims, ket, false);

    let rd = keep_out_table.len();
    let cd = keep_in_table.len();
    let mut matrix = DMatrix::<C64>::zeros(rd, cd);
    for (r, &ro) in keep_out_table.iter().enumerate() {
        for (c, &co) in keep_in_table.iter().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for (bi, &bo) in bra_table.iter().enumerate() {
                let cb = bra_coeff[bi];
                if cb == C64::new(0.0, 0.0) {
                    continue;
                }
                for (ki, &ko) in ket_table.iter().enumerate() {
                    acc += cb * ket_coeff[ki] * op.matrix[(ro + bo, co + ko)];
                }
            }
            matrix[(r, c)] = acc;
        }
    }
    Operator::new(matrix, out.select(&keep_out), inp.select(&keep_in))
}

fn contraction_coefficients(
    positions: &[usize],
    dims: &[usize],
    vectors: &[(&str, DVector<C64>)],
    conjugate: bool,
) -> Vec<C64> {
    let sub_dims: Vec<usize> = positions.iter().map(|&p| dims[p]).collect();
    let total: usize = sub_dims.iter().product();
    let mut coeffs = vec![C64::new(1.0, 0.0); total];
    let mut digits = vec![0usize; positions.len()];
    for slot in coeffs.iter_mut() {
        let mut acc = C64::new(1.0, 0.0);
        for (k, &d) in digits.iter().enumerate() {
            let z = vectors[k].1[d];
            acc *= if conjugate { z.conj() } else { z };
        }
        *slot = acc;
        for k in (0..digits.len()).rev() {
            digits[k] += 1;
            if digits[k] < sub_dims[k] {
                break;
            }
            digits[k] = 0;
        }
    }
    coeffs
}

/// Unitary on the non-shared factors carrying one purification onto another.
///
/// Both states must reduce to the same operator on `shared` (within
/// [`tol::MATCH`]). The returned operator maps the complement factors of
/// `psi2` to those of `psi1` and satisfies `(I_shared ⊗ U)|ψ₂⟩ = |ψ₁⟩`
/// exactly on the support, with a deterministic completion elsewhere.
pub fn matching_unitary(psi1: &PureState, psi2: &PureState, shared: &[&str]) -> Result<Operator> {
    let (m1, shared_layout1, comp1) = split_as_matrix(psi1, shared)?;
    let (m2, shared_layout2, comp2) = split_as_matrix(psi2, shared)?;
    if !shared_layout1.compatible(&shared_layout2) {
        return Err(Error::LayoutMismatch(
            "shared factors differ between the two states".into(),
        ));
    }
    if comp1.total_dim() != comp2.total_dim() {
        return Err(Error::DimMismatch {
            expected: comp1.total_dim(),
            got: comp2.total_dim(),
            context: "complement dimensions".into(),
        });
    }
    let rho1 = &m1 * m1.adjoint();
    let rho2 = &m2 * m2.adjoint();
    let dev = max_abs_entry(&(&rho1 - &rho2));
    if dev > tol::MATCH {
        return Err(Error::ReducedStateMismatch(dev));
    }
    let (values, vectors) = hermitian_eig_desc(&rho1)?;
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    for (l, u) in values.iter().zip(&vectors) {
        if *l <= tol::EIG {
            continue;
        }
        let scale = C64::new(1.0 / l.sqrt(), 0.0);
        // (⟨u| ⊗ I)|ψ⟩ = Mᵀ ū, normalized by √λ
        w1.push((m1.transpose() * u.map(|z| z.conj())) * scale);
        w2.push((m2.transpose() * u.map(|z| z.conj())) * scale);
    }
    let dim = comp1.total_dim();
    let b1 = complete_basis(w1, dim);
    let b2 = complete_basis(w2, dim);
    let mut u = DMatrix::<C64>::zeros(dim, dim);
    for (a, b) in b1.iter().zip(&b2) {
        u += a * b.adjoint();
    }
    Operator::new(u, comp1, comp2)
}

/// Reshape a pure state into a (shared × complement) matrix by permuting the
/// shared factors to the front. Returns the matrix plus both sub-layouts.
fn split_as_matrix(
    psi: &PureState,
    shared: &[&str],
) -> Result<(DMatrix<C64>, SystemLayout, SystemLayout)> {
    let shared_pos = psi.layout.positions_of(shared)?;
    let comp_pos: Vec<usize> = (0..psi.layout.len())
        .filter(|p| !shared_pos.contains(p))
        .collect();
    let mut order: Vec<usize> = shared_pos.clone();
    order.extend(&comp_pos);
    let perm_labels: Vec<&str> = order
        .iter()
        .map(|&p| psi.layout.subsystems()[p].label.as_str())
        .collect();
    let permuted = psi.permute(&perm_labels)?;
    let shared_layout = psi.layout.select(&shared_pos);
    let comp_layout = psi.layout.select(&comp_pos);
    let ds = shared_layout.total_dim();
    let dc = comp_layout.total_dim();
    let mut m = DMatrix::<C64>::zeros(ds, dc);
    for s in 0..ds {
        for c in 0..dc {
            m[(s, c)] = permuted.vector[s * dc + c];
        }
    }
    Ok((m, shared_layout, comp_layout))
}

// ---------------------------------------------------------------------------
// JSON round-trip
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DensityJson {
    layout: Vec<Subsystem>,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
    #[serde(default = "default_norm")]
    norm: NormFlag,
}

fn default_norm() -> NormFlag {
    NormFlag::Normalized
}

#[derive(Serialize, Deserialize)]
struct PureJson {
    layout: Vec<Subsystem>,
    re: Vec<f64>,
    im: Vec<f64>,
}

pub(crate) fn matrix_to_rows(m: &DMatrix<C64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let re = (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)].re).collect())
        .collect();
    let im = (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)].im).collect())
        .collect();
    (re, im)
}

pub(crate) fn matrix_from_rows(re: &[Vec<f64>], im: &[Vec<f64>]) -> Result<DMatrix<C64>> {
    let nrows = re.len();
    if nrows == 0 || im.len() != nrows {
        return Err(Error::Serde("re/im row counts differ or are empty".into()));
    }
    let ncols = re[0].len();
    if re.iter().any(|r| r.len() != ncols) || im.iter().any(|r| r.len() != ncols) {
        return Err(Error::Serde("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |r, c| {
        C64::new(re[r][c], im[r][c])
    }))
}

impl Serialize for DensityOperator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (re, im) = matrix_to_rows(&self.matrix);
        DensityJson {
            layout: self.layout.subsystems().to_vec(),
            re,
            im,
            norm: self.norm,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityOperator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = DensityJson::deserialize(d)?;
        let layout = SystemLayout::new(j.layout).map_err(serde::de::Error::custom)?;
        let matrix = matrix_from_rows(&j.re, &j.im).map_err(serde::de::Error::custom)?;
        DensityOperator::new(matrix, layout, j.norm).map_err(serde::de::Error::custom)
    }
}

impl Serialize for PureState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PureJson {
            layout: self.layout.subsystems().to_vec(),
            re: self.vector.iter().map(|z| z.re).collect(),
            im: self.vector.iter().map(|z| z.im).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PureState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = PureJson::deserialize(d)?;
        if j.re.len() != j.im.len() {
            return Err(serde::de::Error::custom("re/im lengths differ"));
        }
        let layout = SystemLayout::new(j.layout).map_err(serde::de::Error::custom)?;
        let v = DVector::from_iterator(
            j.re.len(),
            j.re.iter().zip(&j.im).map(|(&r, &i)| C64::new(r, i)),
        );
        PureState::new(v, layout).map_err(serde::de::Error::custom)
    }
}
