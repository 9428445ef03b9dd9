//! Ground-truth mask prompt simulation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{reslice, Axis, Grid2, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("ground-truth mask is empty")]
    EmptyMask,
    #[error("strategy {strategy} needs {needed} slices but the {axis} extent has {available}")]
    ExtentTooSmall {
        strategy: Strategy,
        axis: Axis,
        needed: usize,
        available: usize,
    },
    #[error("unknown prompt strategy {0:?} (expected middle, first-last, fml or uniform:k)")]
    UnknownStrategy(String),
}

/// Which slices receive a ground-truth mask prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Middle,
    FirstLast,
    /// First, middle and last.
    Fml,
    Uniform(usize),
}

impl Strategy {
    pub fn nominal_count(self) -> usize {
        match self {
            Strategy::Middle => 1,
            Strategy::FirstLast => 2,
            Strategy::Fml => 3,
            Strategy::Uniform(k) => k,
        }
    }

    /// Slice indices for an extent `[first, last]`.
    ///
    /// Midpoints use floor; uniform spacing rounds half away from zero.
    pub fn indices(self, first: usize, last: usize) -> Vec<usize> {
        let mid = (first + last) / 2;
        match self {
            Strategy::Middle => vec![mid],
            Strategy::FirstLast => vec![first, last],
            Strategy::Fml => vec![first, mid, last],
            Strategy::Uniform(1) => vec![mid],
            Strategy::Uniform(k) => {
                let span = (last - first) as f64;
                (0..k)
                    .map(|i| (first as f64 + i as f64 * span / (k - 1) as f64).round() as usize)
                    .collect()
            }
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Middle => f.write_str("middle"),
            Strategy::FirstLast => f.write_str("first-last"),
            Strategy::Fml => f.write_str("fml"),
            Strategy::Uniform(k) => write!(f, "uniform:{k}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "middle" => Ok(Strategy::Middle),
            "first-last" => Ok(Strategy::FirstLast),
            "fml" => Ok(Strategy::Fml),
            other => other
                .strip_prefix("uniform:")
                .and_then(|k| k.parse::<usize>().ok())
                .filter(|&k| k >= 1)
                .map(Strategy::Uniform)
                .ok_or_else(|| PromptError::UnknownStrategy(other.to_string())),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub slice_index: usize,
    pub mask: Grid2,
}

/// Prompts for one propagation axis, strictly increasing in slice index.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub axis: Axis,
    pub strategy: Strategy,
    /// Structure extent `(first, last)` along `axis`.
    pub extent: (usize, usize),
    pub entries: Vec<Prompt>,
}

impl PromptSet {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|p| p.slice_index).collect()
    }

    pub fn get(&self, t: usize) -> Option<&Prompt> {
        self.entries
            .binary_search_by_key(&t, |p| p.slice_index)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// First and last slice along `axis` containing foreground.
pub fn structure_extent(gt: &Volume, axis: Axis) -> Result<(usize, usize), PromptError> {
    let dims = gt.dims();
    let k = axis.index();
    let mut occupied = vec![false; dims[k]];
    for (i, &v) in gt.data().iter().enumerate() {
        if v > 0.0 {
            occupied[gt.coords(i)[k]] = true;
        }
    }
    let first = occupied.iter().position(|&o| o).ok_or(PromptError::EmptyMask)?;
    let last = occupied.iter().rposition(|&o| o).unwrap_or(first);
    Ok((first, last))
}

pub fn simulate_prompts(gt: &Volume, axis: Axis, strategy: Strategy) -> Result<PromptSet, PromptError> {
    let (first, last) = structure_extent(gt, axis)?;
    let available = last - first + 1;
    let needed = strategy.nominal_count();
    if needed > available {
        return Err(PromptError::ExtentTooSmall {
            strategy,
            axis,
            needed,
            available,
        });
    }
    let seq = reslice(gt, axis);
    let entries = strategy
        .indices(first, last)
        .into_iter()
        .map(|t| Prompt {
            slice_index: t,
            mask: seq.slice(t),
        })
        .collect();
    Ok(PromptSet {
        axis,
        strategy,
        extent: (first, last),
        entries,
    })
}

/// Independent prompt sets for the three axes; total budget is three times
/// the per-axis count.
pub fn allocate_three_axis(gt: &Volume, per_axis: Strategy) -> Result<BTreeMap<Axis, PromptSet>, PromptError> {
    Axis::ALL
        .iter()
        .map(|&axis| simulate_prompts(gt, axis, per_axis).map(|p| (axis, p)))
        .collect()
}
