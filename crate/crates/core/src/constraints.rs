//! Task/evidence constraint structure.
//!
//! A [`ConstraintSpec`] records, for every task class, which evidence labels
//! directly support it and which are incompatible with it. Consistency of a
//! labelled tuple `(y, z)` requires every incompatible label to be absent and,
//! when the class has direct support at all, at least one direct label to be
//! present.
//!
//! Classes with no directly supporting evidence (severity 0 in the edema
//! domain) are exempt from the sufficiency clause; otherwise such a class
//! could never be consistent.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Constraint document shipped for pulmonary edema severity grading.
pub const EDEMA_DOCUMENT: &str = include_str!("../data/edema.json");

/// Name of the only supported derivation rule: a finding is incompatible
/// with a class if it directly supports any higher class.
pub const HIGHER_DIRECT: &str = "higher-direct";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintSpec {
    num_classes: usize,
    evidence_names: Vec<String>,
    direct_support: Vec<Vec<usize>>,
    incompatible: Vec<Vec<usize>>,
}

/// On-disk form of a constraint spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDocument {
    pub num_classes: usize,
    pub evidence: Vec<String>,
    #[serde(default)]
    pub direct_support: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub incompatible: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derive: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Incompatible,
    Insufficient,
    Both,
}

impl Verdict {
    pub fn is_consistent(self) -> bool {
        self == Verdict::Consistent
    }

    pub fn is_incompatible(self) -> bool {
        matches!(self, Verdict::Incompatible | Verdict::Both)
    }

    pub fn is_insufficient(self) -> bool {
        matches!(self, Verdict::Insufficient | Verdict::Both)
    }
}

/// Binary evidence labels, each `-1` (absent) or `+1` (present).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct EvidenceVector(Vec<i8>);

impl EvidenceVector {
    pub fn new(values: &[i64]) -> Result<Self> {
        values
            .iter()
            .map(|&v| match v {
                -1 => Ok(-1),
                1 => Ok(1),
                other => Err(Error::InvalidEvidenceValue(other)),
            })
            .collect::<Result<Vec<_>>>()
            .map(EvidenceVector)
    }

    pub fn absent(len: usize) -> Self {
        EvidenceVector(vec![-1; len])
    }

    /// Builds a vector with `+1` exactly at the given indices.
    pub fn from_present(len: usize, present: &[usize]) -> Result<Self> {
        let mut z = Self::absent(len);
        for &k in present {
            if k >= len {
                return Err(Error::IndexOutOfRange {
                    what: "evidence index",
                    index: k,
                    limit: len,
                });
            }
            z.0[k] = 1;
        }
        Ok(z)
    }

    /// Builds a vector from evidence names looked up in `spec`.
    pub fn from_names(spec: &ConstraintSpec, present: &[&str]) -> Result<Self> {
        let idx = present
            .iter()
            .map(|name| {
                spec.evidence_index(name)
                    .ok_or_else(|| Error::UnknownEvidence(name.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_present(spec.num_evidence(), &idx)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> i8 {
        self.0[k]
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.0[k] == 1
    }

    pub fn set(&mut self, k: usize, present: bool) {
        self.0[k] = if present { 1 } else { -1 };
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn present(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(k, _)| k)
    }
}

impl TryFrom<Vec<i64>> for EvidenceVector {
    type Error = Error;

    fn try_from(values: Vec<i64>) -> Result<Self> {
        EvidenceVector::new(&values)
    }
}

impl From<EvidenceVector> for Vec<i64> {
    fn from(z: EvidenceVector) -> Self {
        z.0.into_iter().map(i64::from).collect()
    }
}

impl ConstraintSpec {
    /// Validates and assembles a spec from index sets. Sets are sorted and
    /// deduplicated.
    pub fn new(
        num_classes: usize,
        evidence_names: Vec<String>,
        direct_support: Vec<Vec<usize>>,
        incompatible: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::NoClasses);
        }
        let mut seen = HashMap::new();
        for (k, name) in evidence_names.iter().enumerate() {
            if seen.insert(name.as_str(), k).is_some() {
                return Err(Error::DuplicateEvidence(name.clone()));
            }
        }
        let num_evidence = evidence_names.len();
        let normalize = |sets: Vec<Vec<usize>>| -> Result<Vec<Vec<usize>>> {
            if sets.len() != num_classes {
                return Err(Error::LengthMismatch {
                    what: "per-class evidence sets",
                    expected: num_classes,
                    got: sets.len(),
                });
            }
            sets.into_iter()
                .map(|set| {
                    let set: BTreeSet<usize> = set.into_iter().collect();
                    if let Some(&k) = set.iter().find(|&&k| k >= num_evidence) {
                        return Err(Error::IndexOutOfRange {
                            what: "evidence index",
                            index: k,
                            limit: num_evidence,
                        });
                    }
                    Ok(set.into_iter().collect())
                })
                .collect()
        };
        let direct_support = normalize(direct_support)?;
        let incompatible = normalize(incompatible)?;

        let mut owner: Vec<Option<usize>> = vec![None; num_evidence];
        for (c, set) in direct_support.iter().enumerate() {
            for &k in set {
                if let Some(first) = owner[k] {
                    return Err(Error::OverlappingSupport {
                        evidence: evidence_names[k].clone(),
                        first,
                        second: c,
                    });
                }
                owner[k] = Some(c);
            }
        }
        for (c, set) in incompatible.iter().enumerate() {
            if let Some(&k) = set.iter().find(|k| direct_support[c].contains(k)) {
                return Err(Error::SelfIncompatible {
                    evidence: evidence_names[k].clone(),
                    class: c,
                });
            }
        }

        Ok(ConstraintSpec {
            num_classes,
            evidence_names,
            direct_support,
            incompatible,
        })
    }

    /// The edema severity spec (4 grades, 7 findings).
    pub fn edema() -> Self {
        parse_spec(EDEMA_DOCUMENT).expect("shipped edema spec is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_evidence(&self) -> usize {
        self.evidence_names.len()
    }

    pub fn evidence_names(&self) -> &[String] {
        &self.evidence_names
    }

    pub fn evidence_index(&self, name: &str) -> Option<usize> {
        self.evidence_names.iter().position(|n| n == name)
    }

    /// Evidence indices that directly support `class`.
    pub fn direct_support(&self, class: usize) -> &[usize] {
        &self.direct_support[class]
    }

    /// Evidence indices incompatible with `class`.
    pub fn incompatible(&self, class: usize) -> &[usize] {
        &self.incompatible[class]
    }

    pub fn max_incompatible(&self) -> usize {
        self.incompatible.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::IndexOutOfRange {
                what: "class index",
                index: class,
                limit: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn check_evidence(&self, z: &EvidenceVector) -> Result<()> {
        if z.len() != self.num_evidence() {
            return Err(Error::LengthMismatch {
                what: "evidence vector",
                expected: self.num_evidence(),
                got: z.len(),
            });
        }
        Ok(())
    }

    pub fn to_document(&self) -> ConstraintDocument {
        let named = |sets: &[Vec<usize>]| -> BTreeMap<String, Vec<String>> {
            sets.iter()
                .enumerate()
                .map(|(c, set)| {
                    let names = set.iter().map(|&k| self.evidence_names[k].clone());
                    (c.to_string(), names.collect())
                })
                .collect()
        };
        ConstraintDocument {
            num_classes: self.num_classes,
            evidence: self.evidence_names.clone(),
            direct_support: named(&self.direct_support),
            incompatible: Some(named(&self.incompatible)),
            derive: None,
        }
    }

    /// Hex SHA-256 of the fully resolved spec, used to tie checkpoints to
    /// the constraints they were trained under.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.to_document()).expect("document serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses and validates a JSON constraint document.
pub fn parse_spec(document: &str) -> Result<ConstraintSpec> {
    let doc: ConstraintDocument = serde_json::from_str(document)?;
    spec_from_document(&doc)
}

pub fn spec_from_document(doc: &ConstraintDocument) -> Result<ConstraintSpec> {
    if doc.num_classes == 0 {
        return Err(Error::NoClasses);
    }
    let mut index = HashMap::new();
    for (k, name) in doc.evidence.iter().enumerate() {
        if index.insert(name.as_str(), k).is_some() {
            return Err(Error::DuplicateEvidence(name.clone()));
        }
    }
    let resolve = |map: &BTreeMap<String, Vec<String>>| -> Result<Vec<Vec<usize>>> {
        let mut sets = vec![Vec::new(); doc.num_classes];
        for (key, names) in map {
            let class: usize = key
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("class key `{key}` is not an index")))?;
            if class >= doc.num_classes {
                return Err(Error::IndexOutOfRange {
                    what: "class index",
                    index: class,
                    limit: doc.num_classes,
                });
            }
            for name in names {
                let k = *index
                    .get(name.as_str())
                    .ok_or_else(|| Error::UnknownEvidence(name.clone()))?;
                sets[class].push(k);
            }
        }
        Ok(sets)
    };

    let direct = resolve(&doc.direct_support)?;
    match (&doc.incompatible, &doc.derive) {
        (Some(map), _) => {
            if let Some(rule) = &doc.derive {
                if rule != HIGHER_DIRECT {
                    return Err(Error::UnknownDerivation(rule.clone()));
                }
            }
            let incompatible = resolve(map)?;
            ConstraintSpec::new(doc.num_classes, doc.evidence.clone(), direct, incompatible)
        }
        (None, Some(rule)) if rule == HIGHER_DIRECT => {
            let empty = vec![Vec::new(); doc.num_classes];
            let spec = ConstraintSpec::new(doc.num_classes, doc.evidence.clone(), direct, empty)?;
            Ok(derive_incompatible(&spec))
        }
        (None, Some(rule)) => Err(Error::UnknownDerivation(rule.clone())),
        (None, None) => Err(Error::MissingIncompatibility),
    }
}

/// Rebuilds the incompatibility map so that a class is incompatible with
/// every finding that directly supports a strictly higher class.
pub fn derive_incompatible(spec: &ConstraintSpec) -> ConstraintSpec {
    let c = spec.num_classes;
    let mut incompatible = vec![Vec::new(); c];
    let mut above: BTreeSet<usize> = BTreeSet::new();
    for class in (0..c).rev() {
        incompatible[class] = above.iter().copied().collect();
        above.extend(spec.direct_support[class].iter().copied());
    }
    ConstraintSpec {
        num_classes: c,
        evidence_names: spec.evidence_names.clone(),
        direct_support: spec.direct_support.clone(),
        incompatible,
    }
}

pub fn check_consistent(spec: &ConstraintSpec, y: usize, z: &EvidenceVector) -> Result<Verdict> {
    spec.check_class(y)?;
    spec.check_evidence(z)?;
    let incompatible = spec.incompatible(y).iter().any(|&k| z.is_present(k));
    let direct = spec.direct_support(y);
    let insufficient = !direct.is_empty() && direct.iter().all(|&k| !z.is_present(k));
    Ok(match (incompatible, insufficient) {
        (false, false) => Verdict::Consistent,
        (true, false) => Verdict::Incompatible,
        (false, true) => Verdict::Insufficient,
        (true, true) => Verdict::Both,
    })
}
