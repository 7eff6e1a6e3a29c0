use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CleanRecord;
use crate::error::{Error, Result};

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Train/validation/test partition with no antigen or antibody sequence
/// shared between parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<CleanRecord>,
    pub val: Vec<CleanRecord>,
    pub test: Vec<CleanRecord>,
    pub seed: u64,
    pub fractions: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl SplitDataset {
    pub fn part(&self, name: SplitName) -> &[CleanRecord] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn parts_mut(&mut self) -> [&mut Vec<CleanRecord>; 3] {
        [&mut self.train, &mut self.val, &mut self.test]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Smaller index becomes the root so component order is stable.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Groups records into connected components of the bipartite graph linking
/// records that share an antigen or an antibody sequence. Components are
/// listed by their first record index; members keep input order.
pub fn sharing_components(records: &[CleanRecord]) -> Vec<Vec<usize>> {
    let mut ds = DisjointSet::new(records.len());
    let mut by_antigen: HashMap<&str, usize> = HashMap::new();
    let mut by_antibody: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(&j) = by_antigen.get(r.antigen_id.as_str()) {
            ds.union(i, j);
        } else {
            by_antigen.insert(&r.antigen_id, i);
        }
        if let Some(&j) = by_antibody.get(r.antibody_id.as_str()) {
            ds.union(i, j);
        } else {
            by_antibody.insert(&r.antibody_id, i);
        }
    }
    let mut index_of_root: HashMap<usize, usize> = HashMap::new();
    let mut components: Vec<Vec<usize>> = Vec::new();
    for i in 0..records.len() {
        let root = ds.find(i);
        let slot = *index_of_root.entry(root).or_insert_with(|| {
            components.push(Vec::new());
            components.len() - 1
        });
        components[slot].push(i);
    }
    components
}

/// Seeded, sequence-disjoint split. Whole sharing components are shuffled
/// and then assigned in order: to train while each addition brings it closer
/// to its target record count, then to validation likewise, and the rest to
/// test. Every split receives at least one component.
pub fn group_split(records: Vec<CleanRecord>, seed: u64, fractions: [f64; 3]) -> Result<SplitDataset> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions must be in [0, 1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut components = sharing_components(&records);
    if components.len() < 3 {
        return Err(Error::SplitInfeasible(format!(
            "need at least 3 independent sequence groups, found {}",
            components.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    components.shuffle(&mut rng);

    let n = records.len() as f64;
    let targets = [fractions[0] * n, fractions[1] * n];
    let mut assignment = vec![SplitName::Test; records.len()];
    let mut counts = [0usize; 3];
    let mut part = 0;
    for (k, comp) in components.iter().enumerate() {
        let remaining = components.len() - k;
        // Move on once adding this component would overshoot the target by
        // more than it undershoots, or when later splits need what is left.
        while part < 2
            && counts[part] > 0
            && (counts[part] as f64 + comp.len() as f64 / 2.0 > targets[part]
                || remaining <= 2 - part)
        {
            part += 1;
        }
        counts[part] += comp.len();
        let name = [SplitName::Train, SplitName::Val, SplitName::Test][part];
        for &i in comp {
            assignment[i] = name;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::SplitInfeasible(format!(
            "{} split would be empty; sequence groups are too lopsided for fractions {fractions:?}",
            ["train", "val", "test"][empty]
        )));
    }

    let mut out = SplitDataset {
        train: Vec::with_capacity(counts[0]),
        val: Vec::with_capacity(counts[1]),
        test: Vec::with_capacity(counts[2]),
        seed,
        fractions,
    };
    for (r, name) in records.into_iter().zip(assignment) {
        match name {
            SplitName::Train => out.train.push(r),
            SplitName::Val => out.val.push(r),
            SplitName::Test => out.test.push(r),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rec(ag: &str, ab: &str) -> CleanRecord {
        CleanRecord {
            antigen_id: ag.into(),
            antibody_id: ab.into(),
            antigen_tokens: vec![1],
            antibody_tokens: vec![2],
            pkd: 9.0,
            pkd_std: 0.0,
        }
    }

    fn ids(part: &[CleanRecord]) -> (HashSet<String>, HashSet<String>) {
        (
            part.iter().map(|r| r.antigen_id.clone()).collect(),
            part.iter().map(|r| r.antibody_id.clone()).collect(),
        )
    }

    #[test]
    fn independent_records_split_8_1_1() {
        let recs: Vec<_> = (0..10).map(|i| rec(&format!("g{i}"), &format!("b{i}"))).collect();
        let s = group_split(recs, 3, DEFAULT_FRACTIONS).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
    }

    #[test]
    fn shared_antigen_stays_together() {
        let mut recs: Vec<_> = (0..10).map(|i| rec(&format!("g{i}"), &format!("b{i}"))).collect();
        recs.push(rec("g0", "b-extra"));
        for seed in 0..20 {
            let s = group_split(recs.clone(), seed, DEFAULT_FRACTIONS).unwrap();
            let parts = [&s.train, &s.val, &s.test];
            let holders: Vec<_> = parts
                .iter()
                .filter(|p| p.iter().any(|r| r.antigen_id == "g0"))
                .collect();
            assert_eq!(holders.len(), 1);
            assert_eq!(holders[0].iter().filter(|r| r.antigen_id == "g0").count(), 2);
        }
    }

    #[test]
    fn chained_sharing_forms_one_component() {
        let recs = vec![rec("a", "x"), rec("b", "x"), rec("b", "y"), rec("c", "z")];
        let comps = sharing_components(&recs);
        assert_eq!(comps, vec![vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn too_few_components_is_infeasible() {
        let recs = vec![rec("a", "x"), rec("a", "y"), rec("b", "z")];
        assert!(matches!(
            group_split(recs, 0, DEFAULT_FRACTIONS),
            Err(Error::SplitInfeasible(_))
        ));
    }

    #[test]
    fn bad_fractions_rejected() {
        let recs: Vec<_> = (0..10).map(|i| rec(&format!("g{i}"), &format!("b{i}"))).collect();
        assert!(matches!(group_split(recs, 0, [0.5, 0.5, 0.5]), Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_under_seed_and_disjoint() {
        let recs: Vec<_> = (0..60)
            .map(|i| rec(&format!("g{}", i / 2), &format!("b{i}")))
            .collect();
        let a = group_split(recs.clone(), 11, DEFAULT_FRACTIONS).unwrap();
        let b = group_split(recs.clone(), 11, DEFAULT_FRACTIONS).unwrap();
        assert_eq!(a, b);
        let c = group_split(recs, 12, DEFAULT_FRACTIONS).unwrap();
        assert_ne!(a.train, c.train);
        let (ta, tb) = ids(&a.train);
        let (va, vb) = ids(&a.val);
        let (sa, sb) = ids(&a.test);
        assert!(ta.is_disjoint(&va) && ta.is_disjoint(&sa) && va.is_disjoint(&sa));
        assert!(tb.is_disjoint(&vb) && tb.is_disjoint(&sb) && vb.is_disjoint(&sb));
    }

    #[test]
    fn fractions_within_five_points_on_many_components() {
        // Components of mixed sizes 1..=3 via shared antigens.
        let mut recs = Vec::new();
        for c in 0..80 {
            for k in 0..(1 + c % 3) {
                recs.push(rec(&format!("g{c}"), &format!("b{c}-{k}")));
            }
        }
        for seed in 0..30 {
            let s = group_split(recs.clone(), seed, DEFAULT_FRACTIONS).unwrap();
            let n = s.len() as f64;
            for (got, want) in [s.train.len(), s.val.len(), s.test.len()].iter().zip(DEFAULT_FRACTIONS) {
                assert!((*got as f64 / n - want).abs() <= 0.05, "seed {seed}: {got}/{n}");
            }
        }
    }
}
