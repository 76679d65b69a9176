//! Balanced language clustering.
//!
//! Groups maximize the sum of intra-group similarities, where a group's
//! similarity is the minimum pairwise cosine between its members (singletons
//! count as 1). The greedy algorithm seeds each group with the most similar
//! unassigned pair and grows it to a fixed target size of ceil(N/K); an
//! exhaustive oracle covers small instances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use dmoe_numeric::Rng;

use crate::error::{DmoeError, Result};
use crate::probe::SimilarityMatrix;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAssignment {
    pub num_groups: usize,
    pub group_of: BTreeMap<String, usize>,
}

impl GroupAssignment {
    pub fn new(num_groups: usize, group_of: BTreeMap<String, usize>) -> Result<GroupAssignment> {
        let a = GroupAssignment { num_groups, group_of };
        a.validate()?;
        Ok(a)
    }

    /// Groups as sorted code lists, indexed by group id.
    pub fn groups(&self) -> Vec<Vec<String>> {
        let mut groups = vec![Vec::new(); self.num_groups];
        for (code, &g) in &self.group_of {
            groups[g].push(code.clone());
        }
        groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 {
            return Err(DmoeError::validation("assignment needs at least one group"));
        }
        let groups = self.groups();
        if groups.iter().any(|g| g.is_empty()) {
            return Err(DmoeError::validation("empty group in assignment"));
        }
        if let Some(&bad) = self.group_of.values().find(|&&g| g >= self.num_groups) {
            return Err(DmoeError::validation(format!("group index {bad} out of range")));
        }
        let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        if max - min > 1 {
            return Err(DmoeError::validation(format!(
                "unbalanced assignment: sizes {sizes:?}"
            )));
        }
        Ok(())
    }

    /// Canonical relabeling: groups numbered by their smallest member code.
    /// Two assignments with the same partition compare equal after this.
    pub fn canonical(&self) -> GroupAssignment {
        let mut groups = self.groups();
        groups.sort();
        let mut map = BTreeMap::new();
        for (g, members) in groups.iter().enumerate() {
            for code in members {
                map.insert(code.clone(), g);
            }
        }
        GroupAssignment { num_groups: self.num_groups, group_of: map }
    }
}

/// Minimum pairwise similarity inside a group; 1.0 for singletons.
pub fn intra_group_similarity(matrix: &SimilarityMatrix, group: &[String]) -> Result<f64> {
    if group.is_empty() {
        return Err(DmoeError::validation("empty group has no similarity"));
    }
    let idx: Vec<usize> =
        group.iter().map(|c| matrix.index_of(c)).collect::<Result<Vec<_>>>()?;
    if idx.len() == 1 {
        return Ok(1.0);
    }
    let mut min = f64::INFINITY;
    for i in 0..idx.len() {
        for j in (i + 1)..idx.len() {
            min = min.min(matrix.get(idx[i], idx[j]));
        }
    }
    Ok(min)
}

/// Sum of intra-group similarities over all groups.
pub fn objective(matrix: &SimilarityMatrix, assignment: &GroupAssignment) -> Result<f64> {
    assignment.validate()?;
    if assignment.group_of.len() != matrix.languages.len() {
        return Err(DmoeError::validation("assignment does not cover the matrix languages"));
    }
    let mut total = 0.0;
    for group in assignment.groups() {
        total += intra_group_similarity(matrix, &group)?;
    }
    Ok(total)
}

/// Target sizes: the first (N mod K) groups take the larger size.
fn target_sizes(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let rem = n % k;
    (0..k).map(|i| if i < rem { base + 1 } else { base }).collect()
}

/// Greedy balanced clustering: repeatedly seed a group with the most similar
/// unassigned pair, then grow it with the language maximizing the group's
/// min-similarity until the group reaches its target size. Ties break on
/// lexicographic code order.
pub fn greedy_cluster(matrix: &SimilarityMatrix, k: usize) -> Result<GroupAssignment> {
    let n = matrix.languages.len();
    if k == 0 || k > n {
        return Err(DmoeError::validation(format!("cannot split {n} languages into {k} groups")));
    }
    // Work in lexicographic code order so index ties are code ties.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| matrix.languages[a].cmp(&matrix.languages[b]));

    let mut remaining: Vec<usize> = order;
    let mut group_of = BTreeMap::new();
    for (g, &size) in target_sizes(n, k).iter().enumerate() {
        let mut members: Vec<usize> = Vec::with_capacity(size);
        if size == 1 {
            members.push(remaining.remove(0));
        } else {
            // Most similar unassigned pair; remaining is lexicographically
            // sorted, so the first maximal pair wins ties.
            let (mut bi, mut bj, mut best) = (0usize, 1usize, f64::NEG_INFINITY);
            for i in 0..remaining.len() {
                for j in (i + 1)..remaining.len() {
                    let s = matrix.get(remaining[i], remaining[j]);
                    if s > best {
                        (bi, bj, best) = (i, j, s);
                    }
                }
            }
            members.push(remaining[bi]);
            members.push(remaining[bj]);
            remaining.remove(bj);
            remaining.remove(bi);
            while members.len() < size {
                let (mut bm, mut best) = (0usize, f64::NEG_INFINITY);
                for (m, &cand) in remaining.iter().enumerate() {
                    let s = members
                        .iter()
                        .map(|&x| matrix.get(x, cand))
                        .fold(f64::INFINITY, f64::min);
                    if s > best {
                        (bm, best) = (m, s);
                    }
                }
                members.push(remaining.remove(bm));
            }
        }
        for m in members {
            group_of.insert(matrix.languages[m].clone(), g);
        }
    }
    GroupAssignment::new(k, group_of)
}

/// Exhaustive maximizer over all balanced partitions; rejected above 10
/// languages. Ties resolve to the lexicographically smallest canonical
/// partition.
pub fn exhaustive_cluster(matrix: &SimilarityMatrix, k: usize) -> Result<GroupAssignment> {
    let n = matrix.languages.len();
    if n > 10 {
        return Err(DmoeError::validation(format!(
            "exhaustive clustering capped at 10 languages, got {n}"
        )));
    }
    if k == 0 || k > n {
        return Err(DmoeError::validation(format!("cannot split {n} languages into {k} groups")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| matrix.languages[a].cmp(&matrix.languages[b]));

    let sizes = target_sizes(n, k);
    let mut best: Option<(f64, GroupAssignment)> = None;

    // Recursive enumeration: the lowest remaining language leads a group of
    // each distinct still-available size.
    fn recurse(
        matrix: &SimilarityMatrix,
        remaining: &[usize],
        sizes_left: &mut Vec<usize>,
        current: &mut Vec<Vec<usize>>,
        best: &mut Option<(f64, GroupAssignment)>,
        k: usize,
    ) {
        if remaining.is_empty() {
            let mut group_of = BTreeMap::new();
            for (g, members) in current.iter().enumerate() {
                for &m in members {
                    group_of.insert(matrix.languages[m].clone(), g);
                }
            }
            let assignment =
                GroupAssignment { num_groups: k, group_of }.canonical();
            let score = objective(matrix, &assignment).expect("valid enumeration");
            let better = match best {
                None => true,
                Some((bs, ba)) => {
                    score > *bs + 1e-15
                        || ((score - *bs).abs() <= 1e-15
                            && format!("{:?}", assignment.groups()) < format!("{:?}", ba.groups()))
                }
            };
            if better {
                *best = Some((score, assignment));
            }
            return;
        }
        let leader = remaining[0];
        let rest: Vec<usize> = remaining[1..].to_vec();
        let mut tried = Vec::new();
        for si in 0..sizes_left.len() {
            let size = sizes_left[si];
            if tried.contains(&size) {
                continue;
            }
            tried.push(size);
            sizes_left.remove(si);
            // Choose size-1 companions from rest.
            let mut combo = vec![0usize; size - 1];
            fn combos(
                rest: &[usize],
                start: usize,
                combo: &mut Vec<usize>,
                depth: usize,
                leader: usize,
                matrix: &SimilarityMatrix,
                sizes_left: &mut Vec<usize>,
                current: &mut Vec<Vec<usize>>,
                best: &mut Option<(f64, GroupAssignment)>,
                k: usize,
            ) {
                if depth == combo.len() {
                    let mut group = vec![leader];
                    group.extend(combo.iter().map(|&c| rest[c]));
                    let next: Vec<usize> = rest
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| !combo.contains(i))
                        .map(|(_, &v)| v)
                        .collect();
                    current.push(group);
                    recurse(matrix, &next, sizes_left, current, best, k);
                    current.pop();
                    return;
                }
                for c in start..rest.len() {
                    combo[depth] = c;
                    combos(rest, c + 1, combo, depth + 1, leader, matrix, sizes_left, current, best, k);
                }
            }
            combos(&rest, 0, &mut combo, 0, leader, matrix, sizes_left, current, best, k);
            sizes_left.insert(si, size);
        }
    }

    let mut sizes_left = sizes;
    recurse(matrix, &order, &mut sizes_left, &mut Vec::new(), &mut best, k);
    Ok(best.expect("at least one balanced partition").1)
}

/// Uniformly random balanced partition (ablation baseline).
pub fn random_balanced_assignment(
    codes: &[String],
    k: usize,
    rng: &mut Rng,
) -> Result<GroupAssignment> {
    let n = codes.len();
    if k == 0 || k > n {
        return Err(DmoeError::validation(format!("cannot split {n} languages into {k} groups")));
    }
    let mut shuffled: Vec<&String> = codes.iter().collect();
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.below(i + 1));
    }
    let mut group_of = BTreeMap::new();
    let mut cursor = 0;
    for (g, size) in target_sizes(n, k).into_iter().enumerate() {
        for _ in 0..size {
            group_of.insert(shuffled[cursor].clone(), g);
            cursor += 1;
        }
    }
    GroupAssignment::new(k, group_of)
}

/// Adjusted Rand Index between two labelings of the same language set.
pub fn adjusted_rand_index(
    a: &BTreeMap<String, usize>,
    b: &BTreeMap<String, usize>,
) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(DmoeError::validation("labelings cover different language sets"));
    }
    let n = a.len() as f64;
    let ka = a.values().max().map(|m| m + 1).unwrap_or(0);
    let kb = b.values().max().map(|m| m + 1).unwrap_or(0);
    let mut table = vec![0f64; ka * kb];
    let mut rows = vec![0f64; ka];
    let mut cols = vec![0f64; kb];
    for (code, &ga) in a {
        let gb = b[code];
        table[ga * kb + gb] += 1.0;
        rows[ga] += 1.0;
        cols[gb] += 1.0;
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_table: f64 = table.iter().map(|&x| choose2(x)).sum();
    let sum_rows: f64 = rows.iter().map(|&x| choose2(x)).sum();
    let sum_cols: f64 = cols.iter().map(|&x| choose2(x)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((sum_table - expected) / (max_index - expected))
}

/// Assignment artifact with the provenance of the matrix it derives from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAssignmentFile {
    pub num_groups: usize,
    pub group_of: BTreeMap<String, usize>,
    pub objective: f64,
    pub similarity_matrix_sha256: String,
    pub inputs: BTreeMap<String, String>,
}
