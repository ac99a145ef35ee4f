use thiserror::Error;

use crate::mr::Record;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefError {
    #[error("target record is not among the candidates")]
    TargetMissing,
    #[error("no combination of the preferred slots singles out the target")]
    Indistinguishable,
}

/// k-combinations of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Smallest set of slots whose values pick out `target` among `records`.
/// Candidate sets are drawn from `preference` (all of the target's slots
/// when empty); among sets of equal size the one earliest in preference
/// order wins. Slots are returned in preference order.
pub fn choose_referring_expression(
    target: &Record,
    records: &[Record],
    preference: &[String],
) -> Result<Vec<String>, RefError> {
    if !records.contains(target) {
        return Err(RefError::TargetMissing);
    }
    let pool: Vec<&String> = if preference.is_empty() {
        target.keys().collect()
    } else {
        preference.iter().filter(|s| target.contains_key(*s)).collect()
    };
    for k in 1..=pool.len() {
        for combo in combinations(pool.len(), k) {
            let slots: Vec<&String> = combo.iter().map(|&i| pool[i]).collect();
            let matches = records
                .iter()
                .filter(|r| slots.iter().all(|s| r.get(*s) == target.get(*s)))
                .count();
            if matches == 1 {
                return Ok(slots.into_iter().cloned().collect());
            }
        }
    }
    Err(RefError::Indistinguishable)
}
