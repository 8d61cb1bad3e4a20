use std::collections::BTreeMap;

use kayra_core::cascade::{Annotation, ClassLabel};
use serde::{Deserialize, Serialize};

/// Karyotype string plus a flag raised when some chromosomes are unlabelled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IscnSuggestion {
    pub karyotype: String,
    pub uncertain: bool,
    pub unknown_count: usize,
}

/// Numeric karyotype from a class multiset: total count, the sex
/// complement, then one `+k` per extra and one `-k` per missing copy of
/// each autosome in ascending order. Structural aberrations are not
/// expressible.
pub fn iscn_from_labels(labels: impl IntoIterator<Item = ClassLabel>) -> IscnSuggestion {
    let mut counts: BTreeMap<ClassLabel, usize> = BTreeMap::new();
    let mut total = 0;
    for l in labels {
        *counts.entry(l).or_default() += 1;
        total += 1;
    }
    let count = |l: ClassLabel| counts.get(&l).copied().unwrap_or(0);
    let mut s = format!("{total},{}{}", "X".repeat(count(ClassLabel::X)), "Y".repeat(count(ClassLabel::Y)));
    for k in 1..=22u8 {
        let c = count(ClassLabel::Autosome(k));
        let (sign, n) = if c > 2 { ('+', c - 2) } else { ('-', 2 - c) };
        for _ in 0..n {
            s.push_str(&format!(",{sign}{k}"));
        }
    }
    let unknown_count = count(ClassLabel::Unknown);
    IscnSuggestion {
        karyotype: s,
        uncertain: unknown_count > 0,
        unknown_count,
    }
}

pub fn iscn_suggest(annotations: &[Annotation]) -> IscnSuggestion {
    iscn_from_labels(annotations.iter().map(|a| a.class_label))
}
