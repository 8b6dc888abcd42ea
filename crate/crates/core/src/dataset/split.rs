use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, dev: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, dev, test };
        if [train, dev, test].iter().any(|x| !(*x > 0.0)) {
            return Err(Error::invalid("split ratios must be positive"));
        }
        if (train + dev + test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios sum to {} instead of 1",
                train + dev + test
            )));
        }
        Ok(r)
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.dev, self.test]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
    /// Labels with fewer records than splits; their records went to train.
    pub degenerate: Vec<String>,
}

impl<T> Splits<T> {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.dev.len(), self.test.len()]
    }

    pub fn parts(&self) -> [&[T]; 3] {
        [&self.train, &self.dev, &self.test]
    }
}

/// Integer allocation of `total` proportional to `weights`: floors first,
/// then leftover units to the largest fractional parts (earlier index on ties).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        alloc[i] += 1;
    }
    alloc
}

/// Rounds the matrix `counts[l] * targets[s] / n` to integers so that every
/// row sums to `counts[l]` and every column to `targets[s]`, moving each cell
/// by less than one from its exact value.
fn controlled_rounding(counts: &[usize], targets: &[usize]) -> Vec<Vec<usize>> {
    let n: usize = counts.iter().sum();
    let rows = counts.len();
    let cols = targets.len();
    let exact: Vec<Vec<f64>> = counts
        .iter()
        .map(|&c| {
            targets
                .iter()
                .map(|&t| c as f64 * t as f64 / n as f64)
                .collect()
        })
        .collect();
    let mut cell: Vec<Vec<usize>> = exact
        .iter()
        .map(|r| r.iter().map(|x| x.floor() as usize).collect())
        .collect();
    let frac = |l: usize, s: usize| exact[l][s] - exact[l][s].floor();
    let mut row_need: Vec<usize> = (0..rows)
        .map(|l| counts[l] - cell[l].iter().sum::<usize>())
        .collect();
    let mut col_need: Vec<usize> = (0..cols)
        .map(|s| targets[s] - cell.iter().map(|r| r[s]).sum::<usize>())
        .collect();
    let mut bumped = vec![vec![false; cols]; rows];

    let mut order: Vec<(usize, usize)> = (0..rows)
        .flat_map(|l| (0..cols).map(move |s| (l, s)))
        .filter(|&(l, s)| frac(l, s) > 1e-12)
        .collect();
    order.sort_by(|&(la, sa), &(lb, sb)| {
        frac(lb, sb)
            .total_cmp(&frac(la, sa))
            .then(la.cmp(&lb))
            .then(sa.cmp(&sb))
    });
    for &(l, s) in &order {
        if row_need[l] > 0 && col_need[s] > 0 {
            bumped[l][s] = true;
            row_need[l] -= 1;
            col_need[s] -= 1;
        }
    }

    // Repair leftovers with augmenting paths: row -> unbumped cell -> column,
    // column -> bumped cell -> row, ending at a column that still needs units.
    while let Some(start) = (0..rows).find(|&l| row_need[l] > 0) {
        let mut col_parent: Vec<Option<usize>> = vec![None; cols];
        let mut row_parent: Vec<Option<usize>> = vec![None; rows];
        let mut row_seen = vec![false; rows];
        row_seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut end = None;
        'bfs: while let Some(l) = queue.pop_front() {
            for s in 0..cols {
                if col_parent[s].is_some() || bumped[l][s] || frac(l, s) <= 1e-12 {
                    continue;
                }
                col_parent[s] = Some(l);
                if col_need[s] > 0 {
                    end = Some(s);
                    break 'bfs;
                }
                for l2 in 0..rows {
                    if !row_seen[l2] && bumped[l2][s] {
                        row_seen[l2] = true;
                        row_parent[l2] = Some(s);
                        queue.push_back(l2);
                    }
                }
            }
        }
        let Some(mut s) = end else {
            log::warn!("stratified rounding could not place every record exactly");
            break;
        };
        col_need[s] -= 1;
        row_need[start] -= 1;
        loop {
            let l = col_parent[s].expect("column on path has a parent");
            bumped[l][s] = true;
            if l == start {
                break;
            }
            let prev = row_parent[l].expect("row on path has a parent");
            bumped[l][prev] = false;
            s = prev;
        }
    }

    for l in 0..rows {
        for s in 0..cols {
            if bumped[l][s] {
                cell[l][s] += 1;
            }
        }
    }
    cell
}

/// Splits records so every label keeps its global proportion in each part.
///
/// Records are shuffled inside each label with a seeded generator, then
/// each part is returned in input order.
pub fn stratified_split<T: Clone>(
    records: &[T],
    label: impl Fn(&T) -> String,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Splits<T>> {
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(label(r)).or_default().push(i);
    }

    let mut assignment = vec![0usize; records.len()];
    let mut degenerate = Vec::new();
    strata.retain(|name, idx| {
        if idx.len() < SPLIT_NAMES.len() {
            log::warn!(
                "label `{name}` has {} record(s), fewer than the number of splits; assigning to train",
                idx.len()
            );
            degenerate.push(name.clone());
            false
        } else {
            true
        }
    });

    let counts: Vec<usize> = strata.values().map(Vec::len).collect();
    let n: usize = counts.iter().sum();
    if n > 0 {
        let targets = largest_remainder(n, &ratios.as_array());
        let quotas = controlled_rounding(&counts, &targets);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (idx, quota) in strata.values_mut().zip(&quotas) {
            idx.shuffle(&mut rng);
            let mut it = idx.iter();
            for (part, &q) in quota.iter().enumerate() {
                for &i in it.by_ref().take(q) {
                    assignment[i] = part;
                }
            }
        }
    }

    let mut splits = Splits {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        degenerate,
    };
    for (r, part) in records.iter().zip(assignment) {
        match part {
            0 => splits.train.push(r.clone()),
            1 => splits.dev.push(r.clone()),
            _ => splits.test.push(r.clone()),
        }
    }
    Ok(splits)
}
