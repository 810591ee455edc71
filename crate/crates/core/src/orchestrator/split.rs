use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

/// Deterministic stratified split: within each grade, cases are ordered by
/// the SHA-256 of their id and the first `round(n * eval_fraction)` go to
/// evaluation. Output lists keep the input order.
pub fn stratified_split(cases: &[(String, Option<String>)], eval_fraction: f64) -> Result<Split> {
    if !(0.0..=1.0).contains(&eval_fraction) {
        return Err(Error::InvalidArgument(format!(
            "eval fraction {eval_fraction} not in [0, 1]"
        )));
    }
    let mut strata: BTreeMap<Option<&str>, Vec<(Vec<u8>, usize)>> = BTreeMap::new();
    for (i, (id, grade)) in cases.iter().enumerate() {
        strata
            .entry(grade.as_deref())
            .or_default()
            .push((Sha256::digest(id.as_bytes()).to_vec(), i));
    }
    let mut is_eval = vec![false; cases.len()];
    for members in strata.values_mut() {
        members.sort();
        let k = (members.len() as f64 * eval_fraction).round() as usize;
        for (_, i) in &members[..k] {
            is_eval[*i] = true;
        }
    }
    let mut split = Split::default();
    for ((id, _), e) in cases.iter().zip(is_eval) {
        if e {
            split.eval.push(id.clone())
        } else {
            split.train.push(id.clone())
        }
    }
    Ok(split)
}
