//! Labeled tensor factorizations of finite-dimensional Hilbert spaces.
//!
//! A [`SystemLayout`] is an ordered list of labeled subsystems. The order is
//! significant: basis indices are raveled row-major over the subsystem
//! dimensions, with the *first* subsystem most significant, matching the
//! Kronecker-product convention `(A ⊗ B)[i·dim(B)+r, j·dim(B)+c] = A[i,j]·B[r,c]`.
//! Any reordering of factors goes through an explicit permutation
//! (see [`SystemLayout::permutation_to`]) rather than implicit reshuffling.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, DIM_GUARD};

/// What part a subsystem plays in a communication scenario.
///
/// Sender legs carry a `(party, slot)` pair: party `i` holding slot `α` of
/// her particles. Receiver legs are indexed the same way on the other side.
/// References purify sources and never enter any channel; environments are
/// purification/dilation factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Role {
    SenderLeg { party: usize, slot: usize },
    ReceiverLeg { party: usize, slot: usize },
    Reference,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsystem {
    pub label: String,
    pub dim: usize,
    pub role: Role,
}

impl Subsystem {
    pub fn new(label: impl Into<String>, dim: usize, role: Role) -> Self {
        Subsystem {
            label: label.into(),
            dim,
            role,
        }
    }
}

/// Ordered tensor factorization with unique labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Subsystem>", into = "Vec<Subsystem>")]
pub struct SystemLayout {
    subsystems: Vec<Subsystem>,
}

impl TryFrom<Vec<Subsystem>> for SystemLayout {
    type Error = Error;
    fn try_from(subsystems: Vec<Subsystem>) -> Result<Self> {
        SystemLayout::new(subsystems)
    }
}

impl From<SystemLayout> for Vec<Subsystem> {
    fn from(l: SystemLayout) -> Self {
        l.subsystems
    }
}

impl SystemLayout {
    /// Build a layout, checking label uniqueness, nonzero dimensions and the
    /// default dimension guard.
    pub fn new(subsystems: Vec<Subsystem>) -> Result<Self> {
        Self::new_with_guard(subsystems, DIM_GUARD)
    }

    /// Like [`SystemLayout::new`] but with an explicit total-dimension guard.
    pub fn new_with_guard(subsystems: Vec<Subsystem>, guard: usize) -> Result<Self> {
        let mut dim: usize = 1;
        for (i, s) in subsystems.iter().enumerate() {
            if s.dim == 0 {
                return Err(Error::DimMismatch {
                    expected: 1,
                    got: 0,
                    context: format!("subsystem `{}` has dimension zero", s.label),
                });
            }
            if subsystems[..i].iter().any(|t| t.label == s.label) {
                return Err(Error::LabelCollision(s.label.clone()));
            }
            dim = dim
                .checked_mul(s.dim)
                .ok_or(Error::DimensionGuard { dim: usize::MAX, guard })?;
        }
        if dim > guard {
            return Err(Error::DimensionGuard { dim, guard });
        }
        Ok(SystemLayout { subsystems })
    }

    /// Single-subsystem layout.
    pub fn single(label: impl Into<String>, dim: usize, role: Role) -> Result<Self> {
        Self::new(vec![Subsystem::new(label, dim, role)])
    }

    pub fn subsystems(&self) -> &[Subsystem] {
        &self.subsystems
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.subsystems.iter().map(|s| s.dim).product()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.subsystems.iter().map(|s| s.dim).collect()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.subsystems.iter().map(|s| s.label.as_str())
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.subsystems.iter().position(|s| s.label == label)
    }

    pub fn require_position(&self, label: &str) -> Result<usize> {
        self.position(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn dim_of(&self, label: &str) -> Option<usize> {
        self.position(label).map(|p| self.subsystems[p].dim)
    }

    /// Row-major strides: `strides[k] = Π_{j>k} dim_j`.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.dims())
    }

    /// Concatenation; errors on label collision.
    pub fn concat(&self, other: &SystemLayout) -> Result<SystemLayout> {
        let mut subsystems = self.subsystems.clone();
        subsystems.extend(other.subsystems.iter().cloned());
        // concat may legitimately exceed the default guard only through
        // explicit oversized inputs, which were guarded at their own creation
        SystemLayout::new_with_guard(subsystems, usize::MAX)
    }

    /// Layout containing only the subsystems at `positions`, in that order.
    pub fn select(&self, positions: &[usize]) -> SystemLayout {
        SystemLayout {
            subsystems: positions
                .iter()
                .map(|&p| self.subsystems[p].clone())
                .collect(),
        }
    }

    /// Layout with the listed labels removed, original order preserved.
    pub fn without(&self, labels: &[&str]) -> Result<SystemLayout> {
        for l in labels {
            self.require_position(l)?;
        }
        Ok(SystemLayout {
            subsystems: self
                .subsystems
                .iter()
                .filter(|s| !labels.contains(&s.label.as_str()))
                .cloned()
                .collect(),
        })
    }

    /// `true` if both layouts have identical labels and dimensions, in the
    /// same order. Roles are metadata and do not enter compatibility.
    pub fn compatible(&self, other: &SystemLayout) -> bool {
        self.subsystems.len() == other.subsystems.len()
            && self
                .subsystems
                .iter()
                .zip(&other.subsystems)
                .all(|(a, b)| a.label == b.label && a.dim == b.dim)
    }

    /// Positions of `labels` within this layout.
    pub fn positions_of(&self, labels: &[&str]) -> Result<Vec<usize>> {
        labels.iter().map(|l| self.require_position(l)).collect()
    }

    /// The permutation `perm` such that `self.select(&perm) == target` at the
    /// level of labels. Errors when the label sets differ.
    pub fn permutation_to(&self, target: &SystemLayout) -> Result<Vec<usize>> {
        if self.subsystems.len() != target.subsystems.len() {
            return Err(Error::LayoutMismatch(format!(
                "cannot permute {} factors into {}",
                self.subsystems.len(),
                target.subsystems.len()
            )));
        }
        target
            .subsystems
            .iter()
            .map(|s| self.require_position(&s.label))
            .collect()
    }

    /// Labels of all subsystems whose role is a sender leg, ordered by
    /// `(party, slot)`.
    pub fn sender_legs(&self) -> Vec<(usize, usize, &str)> {
        let mut legs: Vec<(usize, usize, &str)> = self
            .subsystems
            .iter()
            .filter_map(|s| match s.role {
                Role::SenderLeg { party, slot } => Some((party, slot, s.label.as_str())),
                _ => None,
            })
            .collect();
        legs.sort();
        legs
    }

    /// Check that sender and receiver `(party, slot)` indices are duplicate
    /// free and form contiguous ranges starting at zero. Protocol-level
    /// layouts must satisfy this; intermediate single-leg layouts need not.
    pub fn validate_party_structure(&self) -> Result<()> {
        for (name, pick) in [
            ("sender", true),
            ("receiver", false),
        ] {
            let mut pairs: Vec<(usize, usize)> = self
                .subsystems
                .iter()
                .filter_map(|s| match (pick, s.role) {
                    (true, Role::SenderLeg { party, slot }) => Some((party, slot)),
                    (false, Role::ReceiverLeg { party, slot }) => Some((party, slot)),
                    _ => None,
                })
                .collect();
            pairs.sort();
            for w in pairs.windows(2) {
                if w[0] == w[1] {
                    return Err(Error::LayoutMismatch(format!(
                        "duplicate {name} leg index {:?}",
                        w[0]
                    )));
                }
            }
            let parties: Vec<usize> = {
                let mut p: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
                p.dedup();
                p
            };
            for (expect, &got) in parties.iter().enumerate() {
                if expect != got {
                    return Err(Error::LayoutMismatch(format!(
                        "{name} parties are not contiguous from zero: found party {got}"
                    )));
                }
            }
            for &party in &parties {
                let slots: Vec<usize> = pairs
                    .iter()
                    .filter(|&&(i, _)| i == party)
                    .map(|&(_, a)| a)
                    .collect();
                for (expect, &got) in slots.iter().enumerate() {
                    if expect != got {
                        return Err(Error::LayoutMismatch(format!(
                            "{name} party {party} slots are not contiguous from zero"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-major strides for a dimension list.
pub fn strides_of(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    strides
}

/// Offset table for a subset of factor positions: entry `t` is the flat
/// contribution of the `t`-th multi-index over `dims(positions)`, using the
/// full layout's strides. Summing one entry from each of two complementary
/// tables reconstructs a full flat index.
pub fn offset_table(full_strides: &[usize], full_dims: &[usize], positions: &[usize]) -> Vec<usize> {
    let sub_dims: Vec<usize> = positions.iter().map(|&p| full_dims[p]).collect();
    let total: usize = sub_dims.iter().product();
    let mut table = vec![0usize; total];
    let mut digits = vec![0usize; positions.len()];
    for entry in table.iter_mut() {
        *entry = digits
            .iter()
            .zip(positions)
            .map(|(&d, &p)| d * full_strides[p])
            .sum();
        for k in (0..digits.len()).rev() {
            digits[k] += 1;
            if digits[k] < sub_dims[k] {
                break;
            }
            digits[k] = 0;
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qubit(label: &str) -> Subsystem {
        Subsystem::new(label, 2, Role::Reference)
    }

    #[test]
    fn rejects_duplicate_labels() {
        let err = SystemLayout::new(vec![qubit("a"), qubit("a")]).unwrap_err();
        assert!(matches!(err, Error::LabelCollision(_)));
    }

    #[test]
    fn enforces_dimension_guard() {
        let subs: Vec<Subsystem> = (0..13).map(|i| qubit(&format!("q{i}"))).collect();
        let err = SystemLayout::new(subs.clone()).unwrap_err();
        assert!(matches!(err, Error::DimensionGuard { dim: 8192, .. }));
        assert!(SystemLayout::new_with_guard(subs, 1 << 13).is_ok());
    }

    #[test]
    fn strides_are_row_major() {
        let l = SystemLayout::new(vec![
            Subsystem::new("a", 2, Role::Reference),
            Subsystem::new("b", 3, Role::Reference),
            Subsystem::new("c", 4, Role::Reference),
        ])
        .unwrap();
        assert_eq!(l.strides(), vec![12, 4, 1]);
        assert_eq!(l.total_dim(), 24);
    }

    #[test]
    fn offset_tables_cover_flat_indices() {
        let dims = [2usize, 3, 2];
        let strides = strides_of(&dims);
        let kept = offset_table(&strides, &dims, &[0, 2]);
        let dropped = offset_table(&strides, &dims, &[1]);
        let mut seen: Vec<usize> = kept
            .iter()
            .flat_map(|&k| dropped.iter().map(move |&d| k + d))
            .collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn party_structure_validation() {
        let good = SystemLayout::new(vec![
            Subsystem::new("b1", 2, Role::SenderLeg { party: 0, slot: 0 }),
            Subsystem::new("b2", 2, Role::SenderLeg { party: 1, slot: 0 }),
        ])
        .unwrap();
        good.validate_party_structure().unwrap();
        let gap = SystemLayout::new(vec![Subsystem::new(
            "b2",
            2,
            Role::SenderLeg { party: 1, slot: 0 },
        )])
        .unwrap();
        assert!(gap.validate_party_structure().is_err());
    }

    #[test]
    fn role_serialization_is_kebab_tagged() {
        let role = Role::SenderLeg { party: 1, slot: 0 };
        let json = serde_json::to_string(&role).unwrap();
        assert_eq!(json, r#"{"kind":"sender-leg","party":1,"slot":0}"#);
    }
}
