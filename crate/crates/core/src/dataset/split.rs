//! Reference-level train/validation/test partitioning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Reference id to split. Every distorted image follows its reference.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitPlan {
    assignments: BTreeMap<String, Split>,
}

impl SplitPlan {
    pub fn get(&self, reference_id: &str) -> Option<Split> {
        self.assignments.get(reference_id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|&&s| s == split).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.assignments.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Every reference in `train`.
    pub fn all_train<'a>(ids: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            assignments: ids
                .into_iter()
                .map(|i| (i.to_string(), Split::Train))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["reference_id", "split"])?;
        for (id, s) in &self.assignments {
            w.write_record([id.as_str(), &s.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut assignments = BTreeMap::new();
        for row in r.records() {
            let row = row?;
            let (id, s) = (row.get(0).unwrap_or(""), row.get(1).unwrap_or(""));
            if assignments.insert(id.to_string(), s.parse()?).is_some() {
                return Err(Error::Invalid(format!(
                    "reference `{id}` listed twice in split"
                )));
            }
        }
        Ok(Self { assignments })
    }
}

/// Parses `train/val/test` counts such as `15/5/5`.
pub fn parse_counts(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['/', ',', ':']).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "split counts `{s}` must have three parts"
        )));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad split count `{p}`")))?;
    }
    Ok(out)
}

/// Turns `train/val/test` ratios into reference counts summing to `n`.
/// Parts that already sum to `n` are taken as exact counts; otherwise they
/// are proportions, apportioned by largest remainder (earlier splits win ties).
pub fn ratio_counts(s: &str, n: usize) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['/', ',', ':']).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "split ratios `{s}` must have three parts"
        )));
    }
    let mut r = [0.0f64; 3];
    for (o, p) in r.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v >= 0.0)
            .ok_or_else(|| Error::Config(format!("bad split ratio `{p}`")))?;
    }
    let total: f64 = r.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config(format!("split ratios `{s}` sum to zero")));
    }
    if r.iter().all(|v| v.fract() == 0.0) && total == n as f64 {
        return Ok(r.map(|v| v as usize));
    }
    let quota = r.map(|v| v / total * n as f64);
    let mut counts = quota.map(|q| q.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (quota[b] - quota[b].floor()).total_cmp(&(quota[a] - quota[a].floor())));
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Shuffles the distinct reference ids with `seed` and deals them out as
/// `counts = [train, val, test]`, which must cover every reference exactly.
pub fn split_by_reference(ref_ids: &[String], counts: [usize; 3], seed: u64) -> Result<SplitPlan> {
    let mut ids: Vec<&String> = ref_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let total: usize = counts.iter().sum();
    if total != ids.len() {
        return Err(Error::Config(format!(
            "split counts {}/{}/{} sum to {total} but there are {} references",
            counts[0],
            counts[1],
            counts[2],
            ids.len()
        )));
    }
    ids.shuffle(&mut rng::stream(seed, &[0x5_9117]));
    let labels = [Split::Train, Split::Val, Split::Test];
    let assignments = labels
        .iter()
        .zip(counts)
        .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
        .zip(ids)
        .map(|(l, id)| (id.clone(), l))
        .collect();
    Ok(SplitPlan { assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn refs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ref{i:02}.png")).collect()
    }

    #[test]
    fn ratios_become_counts() {
        assert_eq!(ratio_counts("15/5/5", 25).unwrap(), [15, 5, 5]);
        assert_eq!(ratio_counts("0.6/0.2/0.2", 25).unwrap(), [15, 5, 5]);
        assert_eq!(ratio_counts("3/1/1", 10).unwrap(), [6, 2, 2]);
        // quotas 2.33/2.33/2.33: one leftover goes to train
        assert_eq!(ratio_counts("1/1/1", 7).unwrap(), [3, 2, 2]);
        assert_eq!(ratio_counts("1/0/0", 4).unwrap(), [4, 0, 0]);
        assert!(ratio_counts("1/1", 4).is_err());
        assert!(ratio_counts("0/0/0", 4).is_err());
        assert!(ratio_counts("-1/1/1", 4).is_err());
    }

    #[test]
    fn exact_sizes() {
        let p = split_by_reference(&refs(25), [15, 5, 5], 1).unwrap();
        assert_eq!(
            (
                p.count(Split::Train),
                p.count(Split::Val),
                p.count(Split::Test)
            ),
            (15, 5, 5)
        );
        let p = split_by_reference(&refs(29), [17, 6, 6], 1).unwrap();
        assert_eq!(
            (
                p.count(Split::Train),
                p.count(Split::Val),
                p.count(Split::Test)
            ),
            (17, 6, 6)
        );
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = split_by_reference(&refs(25), [15, 5, 5], 9).unwrap();
        let b = split_by_reference(&refs(25), [15, 5, 5], 9).unwrap();
        let c = split_by_reference(&refs(25), [15, 5, 5], 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn duplicate_ids_collapse() {
        let mut ids = refs(3);
        ids.extend(refs(3));
        let p = split_by_reference(&ids, [1, 1, 1], 0).unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn counts_must_match() {
        assert!(split_by_reference(&refs(5), [4, 1, 1], 0).is_err());
        assert!(split_by_reference(&refs(5), [2, 1, 1], 0).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = split_by_reference(&refs(7), [3, 2, 2], 4).unwrap();
        let f = dir.path().join("split.csv");
        p.save(&f).unwrap();
        assert_eq!(SplitPlan::load(&f).unwrap(), p);
    }

    #[test]
    fn parses_counts() {
        assert_eq!(parse_counts("15/5/5").unwrap(), [15, 5, 5]);
        assert!(parse_counts("15/5").is_err());
    }
}
