//! Partitions of the coordinate set `{0, .., p-1}` into dependence cells.
//!
//! A design is `d`-block dependent when its coordinates split into cells of
//! size at most `d` that are mutually independent. This module holds the
//! partition value type, its validation report, the greedy cell-merging
//! procedure that produces aligned cells of size at least `⌊d/2⌋ + 1`, and the
//! power sum `Σ |B_j|^m` together with its `4 p d^(m-1)` bound.
//!
//! Indices are 0-based in memory. The JSON form `{"p": .., "cells": [[..]]}`
//! uses 1-based indices; `{"p": .., "block": b}` (contiguous cells) and
//! `{"sizes": [..]}` are accepted on input.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionInput", into = "PartitionJson")]
pub struct Partition {
    p: usize,
    cells: Vec<Vec<usize>>,
}

/// Serialized form; indices are 1-based.
#[derive(Serialize, Deserialize)]
struct PartitionJson {
    p: usize,
    cells: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum PartitionInput {
    Cells { p: usize, cells: Vec<Vec<usize>> },
    Contiguous { p: usize, block: usize },
    Sizes { sizes: Vec<usize> },
}

impl TryFrom<PartitionInput> for Partition {
    type Error = String;

    fn try_from(raw: PartitionInput) -> std::result::Result<Self, String> {
        match raw {
            PartitionInput::Cells { p, cells } => PartitionJson { p, cells }.try_into(),
            PartitionInput::Contiguous { block: 0, .. } => Err("block size must be positive".into()),
            PartitionInput::Contiguous { p, block } => Ok(Partition::contiguous(p, block)),
            PartitionInput::Sizes { sizes } => Ok(Partition::from_sizes(&sizes)),
        }
    }
}

impl TryFrom<PartitionJson> for Partition {
    type Error = String;

    fn try_from(raw: PartitionJson) -> std::result::Result<Self, String> {
        let mut cells = Vec::with_capacity(raw.cells.len());
        for cell in raw.cells {
            let mut out = Vec::with_capacity(cell.len());
            for idx in cell {
                if idx == 0 {
                    return Err("partition indices are 1-based; found 0".into());
                }
                out.push(idx - 1);
            }
            cells.push(out);
        }
        Ok(Partition { p: raw.p, cells })
    }
}

impl From<Partition> for PartitionJson {
    fn from(part: Partition) -> Self {
        PartitionJson {
            p: part.p,
            cells: part
                .cells
                .into_iter()
                .map(|c| c.into_iter().map(|i| i + 1).collect())
                .collect(),
        }
    }
}

impl Partition {
    /// Builds a partition without checking it; see [`Partition::validate`].
    pub fn new(p: usize, cells: Vec<Vec<usize>>) -> Self {
        Partition { p, cells }
    }

    /// Consecutive cells of size `block` (the last one may be shorter).
    pub fn contiguous(p: usize, block: usize) -> Self {
        let block = block.max(1);
        let cells = (0..p)
            .step_by(block)
            .map(|start| (start..(start + block).min(p)).collect())
            .collect();
        Partition { p, cells }
    }

    /// Consecutive cells with the given sizes.
    pub fn from_sizes(sizes: &[usize]) -> Self {
        let mut start = 0;
        let mut cells = Vec::with_capacity(sizes.len());
        for &s in sizes {
            cells.push((start..start + s).collect());
            start += s;
        }
        Partition { p: start, cells }
    }

    pub fn singletons(p: usize) -> Self {
        Self::contiguous(p, 1)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn cells(&self) -> &[Vec<usize>] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_sizes(&self) -> Vec<usize> {
        self.cells.iter().map(Vec::len).collect()
    }

    pub fn max_cell_size(&self) -> usize {
        self.cells.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Checks the partition invariants and the size cap `max |B_j| <= d`.
    /// Reports the first violation found.
    pub fn validate(&self, d: usize) -> ValidationReport {
        let violation = self.first_violation(d);
        ValidationReport {
            valid: violation.is_none(),
            p: self.p,
            d,
            num_cells: self.cells.len(),
            max_cell_size: self.max_cell_size(),
            violation,
        }
    }

    fn first_violation(&self, d: usize) -> Option<Violation> {
        if self.p == 0 {
            return Some(Violation::EmptyCoordinateSet);
        }
        if d == 0 {
            return Some(Violation::ZeroDependence);
        }
        let mut owner: Vec<Option<usize>> = vec![None; self.p];
        for (c, cell) in self.cells.iter().enumerate() {
            if cell.is_empty() {
                return Some(Violation::EmptyCell { cell: c });
            }
            for &idx in cell {
                if idx >= self.p {
                    return Some(Violation::IndexOutOfRange { cell: c, index: idx });
                }
                if let Some(first) = owner[idx] {
                    return Some(Violation::Overlap {
                        index: idx,
                        first_cell: first,
                        second_cell: c,
                    });
                }
                owner[idx] = Some(c);
            }
        }
        if let Some(idx) = owner.iter().position(Option::is_none) {
            return Some(Violation::Uncovered { index: idx });
        }
        for (c, cell) in self.cells.iter().enumerate() {
            if cell.len() > d {
                return Some(Violation::CellTooLarge {
                    cell: c,
                    size: cell.len(),
                    d,
                });
            }
        }
        None
    }

    /// `Σ_j |B_j|^m`, exact. Rejects `m = 0` and reports overflow of the
    /// 128-bit accumulator as an error.
    pub fn power_sum(&self, m: u32) -> Result<u128> {
        if m == 0 {
            return Err(Error::arg("power_sum requires m >= 1"));
        }
        self.cells.iter().try_fold(0u128, |acc, cell| {
            (cell.len() as u128)
                .checked_pow(m)
                .and_then(|t| acc.checked_add(t))
                .ok_or_else(|| Error::arg("power sum overflows 128 bits"))
        })
    }

    /// Greedy merge of the cells into aligned cells.
    ///
    /// Cells of size at least `⌊d/2⌋ + 1` are copied as they are. The
    /// remaining cells are visited in ascending index order; each one opens a
    /// new aligned cell which absorbs the following small cells until its size
    /// reaches the threshold or no small cells remain.
    pub fn merge_cells(&self, d: usize) -> Result<AlignedPartition> {
        let report = self.validate(d);
        if !report.valid {
            return Err(Error::InvalidPartition(report));
        }
        if d > self.p {
            return Err(Error::arg(format!("d = {d} exceeds p = {}", self.p)));
        }
        let threshold = d / 2 + 1;
        let (large, small): (Vec<usize>, Vec<usize>) =
            (0..self.cells.len()).partition(|&j| self.cells[j].len() >= threshold);

        let mut groups: Vec<Vec<usize>> = large.into_iter().map(|j| vec![j]).collect();
        let mut pending: VecDeque<usize> = small.into();
        while let Some(j) = pending.pop_front() {
            let mut group = vec![j];
            let mut size = self.cells[j].len();
            while size < threshold {
                let Some(next) = pending.pop_front() else { break };
                size += self.cells[next].len();
                group.push(next);
            }
            groups.push(group);
        }

        let cells = groups
            .iter()
            .map(|g| {
                g.iter()
                    .flat_map(|&j| self.cells[j].iter().copied())
                    .collect()
            })
            .collect();
        Ok(AlignedPartition {
            cells,
            groups,
            d,
            threshold,
            source: self.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyCoordinateSet,
    ZeroDependence,
    EmptyCell { cell: usize },
    IndexOutOfRange { cell: usize, index: usize },
    Overlap { index: usize, first_cell: usize, second_cell: usize },
    Uncovered { index: usize },
    CellTooLarge { cell: usize, size: usize, d: usize },
}

impl fmt::Display for Violation {
    // 1-based in messages, matching the serialized form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::EmptyCoordinateSet => write!(f, "p must be positive"),
            Violation::ZeroDependence => write!(f, "d must be positive"),
            Violation::EmptyCell { cell } => write!(f, "cell {} is empty", cell + 1),
            Violation::IndexOutOfRange { cell, index } => {
                write!(f, "cell {} holds index {} outside 1..=p", cell + 1, index + 1)
            }
            Violation::Overlap { index, first_cell, second_cell } => write!(
                f,
                "index {} appears in cells {} and {}",
                index + 1,
                first_cell + 1,
                second_cell + 1
            ),
            Violation::Uncovered { index } => write!(f, "index {} is not covered", index + 1),
            Violation::CellTooLarge { cell, size, d } => {
                write!(f, "cell {} has size {size} > d = {d}", cell + 1)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub p: usize,
    pub d: usize,
    pub num_cells: usize,
    pub max_cell_size: usize,
    pub violation: Option<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.violation {
            None => write!(f, "valid (k = {}, max cell size {})", self.num_cells, self.max_cell_size),
            Some(v) => write!(f, "{v}"),
        }
    }
}

/// Output of [`Partition::merge_cells`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AlignedPartition {
    /// Aligned cells `D_1..D_s`, 0-based coordinates.
    pub cells: Vec<Vec<usize>>,
    /// Source cell indices merged into each aligned cell.
    pub groups: Vec<Vec<usize>>,
    pub d: usize,
    /// `⌊d/2⌋ + 1`.
    pub threshold: usize,
    pub source: Partition,
}

impl AlignedPartition {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.cells.iter().map(Vec::len).collect()
    }

    /// Number of aligned cells below the threshold (at most one).
    pub fn small_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.len() < self.threshold).count()
    }

    /// Every source cell is used exactly once and each aligned cell is the
    /// union of its group.
    pub fn is_coarsening(&self) -> bool {
        let k = self.source.num_cells();
        let mut seen = vec![false; k];
        for (cell, group) in self.cells.iter().zip(&self.groups) {
            let mut expected = Vec::new();
            for &j in group {
                if j >= k || seen[j] {
                    return false;
                }
                seen[j] = true;
                expected.extend_from_slice(&self.source.cells()[j]);
            }
            if &expected != cell {
                return false;
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// `s <= 4 p / d`, checked in integers.
    pub fn count_within_bound(&self) -> bool {
        self.cells.len() * self.d <= 4 * self.source.p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_partition_is_valid() {
        let part = Partition::new(4, vec![vec![0, 1], vec![2, 3]]);
        assert!(part.validate(2).valid);
    }

    #[test]
    fn overlap_is_reported() {
        let part = Partition::new(4, vec![vec![0, 1], vec![1, 2, 3]]);
        let report = part.validate(3);
        assert!(!report.valid);
        assert_eq!(
            report.violation,
            Some(Violation::Overlap { index: 1, first_cell: 0, second_cell: 1 })
        );
        assert_eq!(report.to_string(), "index 2 appears in cells 1 and 2");
    }

    #[test]
    fn oversized_cell_is_reported() {
        let part = Partition::new(6, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        let report = part.validate(2);
        assert_eq!(
            report.violation,
            Some(Violation::CellTooLarge { cell: 0, size: 3, d: 2 })
        );
    }

    #[test]
    fn uncovered_and_empty_cells() {
        let gap = Partition::new(3, vec![vec![0], vec![2]]);
        assert_eq!(gap.validate(1).violation, Some(Violation::Uncovered { index: 1 }));
        let empty = Partition::new(1, vec![vec![0], vec![]]);
        assert_eq!(empty.validate(1).violation, Some(Violation::EmptyCell { cell: 1 }));
        let out = Partition::new(1, vec![vec![3]]);
        assert!(matches!(out.validate(1).violation, Some(Violation::IndexOutOfRange { .. })));
    }

    #[test]
    fn merge_hand_traces() {
        let part = Partition::from_sizes(&[4, 1, 1, 1, 1, 1, 1]);
        let merged = part.merge_cells(4).unwrap();
        assert_eq!(merged.sizes(), vec![4, 3, 3]);
        assert!(merged.count_within_bound());

        let merged = Partition::singletons(6).merge_cells(1).unwrap();
        assert_eq!(merged.sizes(), vec![1; 6]);
        assert_eq!(merged.cells, Partition::singletons(6).cells().to_vec());

        let merged = Partition::singletons(7).merge_cells(4).unwrap();
        assert_eq!(merged.sizes(), vec![3, 3, 1]);
        assert_eq!(merged.small_cells(), 1);
    }

    #[test]
    fn merge_with_only_large_cells_copies_them() {
        let part = Partition::from_sizes(&[3, 3, 2]);
        let merged = part.merge_cells(3).unwrap();
        assert_eq!(merged.sizes(), vec![3, 3, 2]);
        assert_eq!(merged.small_cells(), 0);
    }

    #[test]
    fn merge_rejects_invalid_partition() {
        let part = Partition::new(6, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert!(matches!(part.merge_cells(2), Err(Error::InvalidPartition(_))));
    }

    #[test]
    fn power_sums() {
        let part = Partition::from_sizes(&[3, 3, 2, 2]);
        assert_eq!(part.power_sum(3).unwrap(), 70);
        assert_eq!(part.power_sum(1).unwrap(), 10);
        assert_eq!(Partition::from_sizes(&[2, 2]).power_sum(2).unwrap(), 8);
        assert!(part.power_sum(0).is_err());
    }

    #[test]
    fn json_uses_one_based_indices() {
        let part = Partition::new(3, vec![vec![0, 2], vec![1]]);
        let json = serde_json::to_string(&part).unwrap();
        assert_eq!(json, r#"{"p":3,"cells":[[1,3],[2]]}"#);
        let back: Partition = serde_json::from_str(&json).unwrap();
        assert_eq!(back, part);
        assert!(serde_json::from_str::<Partition>(r#"{"p":1,"cells":[[0]]}"#).is_err());
        let c: Partition = serde_json::from_str(r#"{"p":5,"block":2}"#).unwrap();
        assert_eq!(c, Partition::contiguous(5, 2));
        let z: Partition = serde_json::from_str(r#"{"sizes":[1,3]}"#).unwrap();
        assert_eq!(z, Partition::from_sizes(&[1, 3]));
        assert!(serde_json::from_str::<Partition>(r#"{"p":5,"block":0}"#).is_err());
    }
}
