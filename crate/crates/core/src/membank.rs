//! Volume-aware memory bank.
//!
//! Conditioned entries come from prompted slices and always attend with zero
//! temporal offset. Non-conditioned entries are previously segmented slices;
//! which of them are attended, and with which temporal-embedding slot, is
//! decided per frame by a [`MemoryPolicy`].

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("{selected} memory entries exceed the {slots} available temporal slots")]
    SlotOverflow { selected: usize, slots: usize },
    #[error("invalid memory policy: {0}")]
    InvalidPolicy(&'static str),
}

/// Opaque feature tensor owned by a backend. Cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub shape: Vec<usize>,
    pub data: Arc<[f32]>,
    /// `(width, height)` of the slice the features were computed from.
    pub frame: (usize, usize),
}

impl FeatureMap {
    pub fn new(shape: Vec<usize>, data: Vec<f32>, frame: (usize, usize)) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Traversal direction of a propagation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Slice index `steps` frames back in traversal order.
    pub fn back(self, t: usize, steps: usize) -> Option<usize> {
        match self {
            Direction::Forward => t.checked_sub(steps),
            Direction::Backward => t.checked_add(steps),
        }
    }

    /// Whether `a` comes before `b` in traversal order.
    pub fn precedes(self, a: usize, b: usize) -> bool {
        match self {
            Direction::Forward => a < b,
            Direction::Backward => a > b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub slice_index: usize,
    pub embedding: FeatureMap,
    pub mask_features: FeatureMap,
    pub conditioned: bool,
    /// Backend-reported mask quality in `[0, 1]`; 1 for prompted slices.
    pub confidence: f32,
}

/// A memory entry as presented to the backend, with its temporal slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendedEntry {
    pub entry: MemoryEntry,
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryPolicy {
    /// Normalized distance threshold for conditioned entries.
    pub tau: f64,
    /// Non-conditioned window size.
    pub capacity: usize,
    pub stride: usize,
    /// Keep only the `gate_k` most confident non-conditioned entries; 0 keeps
    /// all.
    pub gate_k: usize,
    /// Two most recent entries on the first and last temporal slots.
    pub intelligent_slicing: bool,
}

impl Default for MemoryPolicy {
    fn default() -> Self {
        Self {
            tau: 1.0,
            capacity: 6,
            stride: 1,
            gate_k: 0,
            intelligent_slicing: false,
        }
    }
}

impl MemoryPolicy {
    pub fn validate(&self) -> Result<(), MemoryError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(MemoryError::InvalidPolicy("tau must lie in [0, 1]"));
        }
        if self.stride == 0 {
            return Err(MemoryError::InvalidPolicy("stride must be >= 1"));
        }
        Ok(())
    }

    /// Non-conditioned window actually used.
    pub fn effective_capacity(&self) -> usize {
        if self.intelligent_slicing {
            2
        } else {
            self.capacity
        }
    }
}

/// Prompted slices within normalized distance `tau` of frame `t`, where the
/// distance is divided by the full sequence length `d`.
pub fn select_conditioned(prompt_indices: &[usize], t: usize, d: usize, tau: f64) -> Vec<usize> {
    prompt_indices
        .iter()
        .copied()
        .filter(|&p| p.abs_diff(t) as f64 / d as f64 <= tau)
        .collect()
}

/// Non-conditioned entries frame `t` attends to, most recent first.
///
/// `processed` is in traversal order. With intelligent slicing this is the two
/// most recent entries; otherwise the entries lying `1, 1 + stride, ...,
/// 1 + (capacity - 1) * stride` frames back, skipping offsets with no entry.
pub fn select_noncond(
    processed: &[MemoryEntry],
    t: usize,
    policy: &MemoryPolicy,
    direction: Direction,
) -> Vec<MemoryEntry> {
    let earlier = processed
        .iter()
        .rev()
        .filter(|e| !e.conditioned && direction.precedes(e.slice_index, t));
    if policy.intelligent_slicing {
        return earlier.take(2).cloned().collect();
    }
    let stride = policy.stride.max(1);
    let wanted: Vec<usize> = (1..=policy.capacity)
        .filter_map(|k| direction.back(t, 1 + stride * (k - 1)))
        .collect();
    let Some(&farthest) = wanted.last() else {
        return Vec::new();
    };
    let mut found: BTreeMap<usize, &MemoryEntry> = BTreeMap::new();
    for e in earlier {
        if direction.precedes(e.slice_index, farthest) {
            break;
        }
        if wanted.contains(&e.slice_index) {
            found.insert(e.slice_index, e);
        }
    }
    wanted
        .iter()
        .filter_map(|i| found.get(i).map(|e| (*e).clone()))
        .collect()
}

/// Keeps the `gate_k` most confident entries, preserving their order. Ties go
/// to the higher slice index.
pub fn gate_by_confidence(selected: Vec<MemoryEntry>, gate_k: usize) -> Vec<MemoryEntry> {
    if gate_k == 0 || gate_k >= selected.len() {
        return selected;
    }
    let mut ranked: Vec<usize> = (0..selected.len()).collect();
    ranked.sort_by(|&a, &b| {
        selected[b]
            .confidence
            .total_cmp(&selected[a].confidence)
            .then(selected[b].slice_index.cmp(&selected[a].slice_index))
    });
    let mut keep = vec![false; selected.len()];
    for &i in &ranked[..gate_k] {
        keep[i] = true;
    }
    selected
        .into_iter()
        .zip(keep)
        .filter_map(|(e, k)| k.then_some(e))
        .collect()
}

/// Slots for entries given most recent first. By default slot `i` goes to the
/// `i`-th most recent entry; intelligent slicing puts the most recent on slot
/// 0 and the next on slot `slots - 1`.
pub fn assign_embedding_slots(
    selected: Vec<MemoryEntry>,
    policy: &MemoryPolicy,
    slots: usize,
) -> Result<Vec<AttendedEntry>, MemoryError> {
    let limit = if policy.intelligent_slicing { 2.min(slots) } else { slots };
    if selected.len() > limit {
        return Err(MemoryError::SlotOverflow {
            selected: selected.len(),
            slots: limit,
        });
    }
    Ok(selected
        .into_iter()
        .enumerate()
        .map(|(i, entry)| {
            let slot = match (policy.intelligent_slicing, i) {
                (true, 1) => slots - 1,
                _ => i,
            };
            AttendedEntry { entry, slot }
        })
        .collect())
}

/// Per-pass memory state, written only by the propagation loop.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    policy: MemoryPolicy,
    direction: Direction,
    slots: usize,
    sequence_len: usize,
    conditioned: BTreeMap<usize, MemoryEntry>,
    noncond: Vec<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(policy: MemoryPolicy, direction: Direction, slots: usize, sequence_len: usize) -> Self {
        Self {
            policy,
            direction,
            slots,
            sequence_len,
            conditioned: BTreeMap::new(),
            noncond: Vec::new(),
        }
    }

    pub fn policy(&self) -> &MemoryPolicy {
        &self.policy
    }

    pub fn admit_conditioned(&mut self, entry: MemoryEntry) {
        debug_assert!(entry.conditioned);
        self.conditioned.insert(entry.slice_index, entry);
    }

    pub fn admit(&mut self, entry: MemoryEntry) {
        debug_assert!(!entry.conditioned);
        let t = entry.slice_index;
        self.noncond.push(entry);
        // drop entries no policy can reach any more, always keeping the last two
        let reach = self.policy.stride.max(1) * self.policy.effective_capacity().max(2) + 1;
        let n = self.noncond.len();
        if n > 2 && self.noncond[0].slice_index.abs_diff(t) > reach {
            let keep_from = self.noncond[..n - 2]
                .iter()
                .position(|e| e.slice_index.abs_diff(t) <= reach)
                .unwrap_or(n - 2);
            self.noncond.drain(..keep_from);
        }
    }

    pub fn conditioned_indices(&self) -> Vec<usize> {
        self.conditioned.keys().copied().collect()
    }

    pub fn noncond_len(&self) -> usize {
        self.noncond.len()
    }

    /// Attended context for frame `t`: conditioned entries within `tau` on
    /// slot 0, then the selected, gated and slotted non-conditioned entries.
    pub fn context(&self, t: usize) -> Result<Vec<AttendedEntry>, MemoryError> {
        let prompts = self.conditioned_indices();
        let mut out: Vec<AttendedEntry> = select_conditioned(&prompts, t, self.sequence_len, self.policy.tau)
            .into_iter()
            .map(|p| AttendedEntry {
                entry: self.conditioned[&p].clone(),
                slot: 0,
            })
            .collect();
        let selected = select_noncond(&self.noncond, t, &self.policy, self.direction);
        let gated = gate_by_confidence(selected, self.policy.gate_k);
        out.extend(assign_embedding_slots(gated, &self.policy, self.slots)?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(t: usize, confidence: f32) -> MemoryEntry {
        let f = FeatureMap::new(vec![1], vec![t as f32], (1, 1));
        MemoryEntry {
            slice_index: t,
            embedding: f.clone(),
            mask_features: f,
            conditioned: false,
            confidence,
        }
    }

    fn processed(range: impl Iterator<Item = usize>) -> Vec<MemoryEntry> {
        range.map(|t| entry(t, 0.5)).collect()
    }

    fn slices(v: &[MemoryEntry]) -> Vec<usize> {
        v.iter().map(|e| e.slice_index).collect()
    }

    #[test]
    fn conditioned_threshold() {
        assert_eq!(select_conditioned(&[0, 50, 99], 10, 100, 0.3), vec![0]);
        assert_eq!(select_conditioned(&[0, 50, 99], 10, 100, 1.0), vec![0, 50, 99]);
        assert_eq!(select_conditioned(&[0, 50, 99], 50, 100, 0.0), vec![50]);
        assert!(select_conditioned(&[0, 99], 50, 100, 0.0).is_empty());
    }

    #[test]
    fn default_window_of_six() {
        let p = processed(0..20);
        let sel = select_noncond(&p, 20, &MemoryPolicy::default(), Direction::Forward);
        assert_eq!(slices(&sel), vec![19, 18, 17, 16, 15, 14]);
    }

    #[test]
    fn strided_window() {
        let p = processed(0..40);
        let policy = MemoryPolicy {
            stride: 4,
            ..Default::default()
        };
        let sel = select_noncond(&p, 40, &policy, Direction::Forward);
        assert_eq!(slices(&sel), vec![39, 35, 31, 27, 23, 19]);
    }

    #[test]
    fn zero_capacity_is_empty() {
        let p = processed(0..10);
        let policy = MemoryPolicy {
            capacity: 0,
            ..Default::default()
        };
        assert!(select_noncond(&p, 10, &policy, Direction::Forward).is_empty());
    }

    #[test]
    fn missing_offsets_are_skipped() {
        // slice 18 was prompted and never admitted as non-conditioned
        let p: Vec<_> = processed((0..20).filter(|&t| t != 18));
        let sel = select_noncond(&p, 20, &MemoryPolicy::default(), Direction::Forward);
        assert_eq!(slices(&sel), vec![19, 17, 16, 15, 14]);
    }

    #[test]
    fn backward_pass_looks_above() {
        let p = processed((10..30).rev());
        let sel = select_noncond(&p, 9, &MemoryPolicy { capacity: 3, ..Default::default() }, Direction::Backward);
        assert_eq!(slices(&sel), vec![10, 11, 12]);
    }

    #[test]
    fn intelligent_slicing_slots() {
        let is = MemoryPolicy {
            intelligent_slicing: true,
            ..Default::default()
        };
        let p = processed(0..20);
        let sel = select_noncond(&p, 20, &is, Direction::Forward);
        assert_eq!(slices(&sel), vec![19, 18]);
        let slots = assign_embedding_slots(sel, &is, 7).unwrap();
        let got: Vec<_> = slots.iter().map(|a| (a.entry.slice_index, a.slot)).collect();
        assert_eq!(got, vec![(19, 0), (18, 6)]);

        let start = select_noncond(&processed(0..1), 1, &is, Direction::Forward);
        let got: Vec<_> = assign_embedding_slots(start, &is, 7)
            .unwrap()
            .iter()
            .map(|a| (a.entry.slice_index, a.slot))
            .collect();
        assert_eq!(got, vec![(0, 0)]);
    }

    #[test]
    fn default_slots_follow_recency() {
        let p = processed(0..20);
        let policy = MemoryPolicy::default();
        let sel = select_noncond(&p, 20, &policy, Direction::Forward);
        let slots: Vec<_> = assign_embedding_slots(sel, &policy, 7).unwrap().iter().map(|a| a.slot).collect();
        assert_eq!(slots, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn slot_overflow() {
        let policy = MemoryPolicy::default();
        let sel = processed(0..8);
        assert_eq!(
            assign_embedding_slots(sel, &policy, 7),
            Err(MemoryError::SlotOverflow { selected: 8, slots: 7 })
        );
    }

    #[test]
    fn gating() {
        let sel = vec![entry(3, 0.9), entry(7, 0.5), entry(9, 0.9)];
        assert_eq!(gate_by_confidence(sel.clone(), 0), sel);
        assert_eq!(gate_by_confidence(sel.clone(), 3), sel);
        assert_eq!(gate_by_confidence(sel.clone(), 5), sel);
        assert_eq!(slices(&gate_by_confidence(sel.clone(), 1)), vec![9]);
        assert_eq!(slices(&gate_by_confidence(sel, 2)), vec![3, 9]);
    }

    #[test]
    fn bank_context_combines_both_memories() {
        let policy = MemoryPolicy {
            tau: 0.3,
            capacity: 2,
            ..Default::default()
        };
        let mut bank = MemoryBank::new(policy, Direction::Forward, 7, 100);
        for p in [0, 50, 99] {
            let mut e = entry(p, 1.0);
            e.conditioned = true;
            bank.admit_conditioned(e);
        }
        for t in 1..10 {
            bank.admit(entry(t, 0.5));
        }
        let ctx = bank.context(10).unwrap();
        let got: Vec<_> = ctx.iter().map(|a| (a.entry.slice_index, a.entry.conditioned, a.slot)).collect();
        assert_eq!(got, vec![(0, true, 0), (9, false, 0), (8, false, 1)]);
    }

    #[test]
    fn bank_prunes_unreachable_entries() {
        let mut bank = MemoryBank::new(MemoryPolicy::default(), Direction::Forward, 7, 500);
        for t in 0..400 {
            bank.admit(entry(t, 0.5));
        }
        assert!(bank.noncond_len() <= 8);
        let ctx = bank.context(400).unwrap();
        assert_eq!(ctx.len(), 6);
        assert_eq!(ctx[0].entry.slice_index, 399);
    }

    #[test]
    fn policy_validation() {
        assert!(MemoryPolicy { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(MemoryPolicy { stride: 0, ..Default::default() }.validate().is_err());
        assert_eq!(MemoryPolicy { intelligent_slicing: true, ..Default::default() }.effective_capacity(), 2);
    }
}
