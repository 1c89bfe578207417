//! Repeater-chain Markov decision process.
//!
//! The state is a strictly upper-triangular matrix over node pairs. Entry
//! `(i, j)` is either absent or an [`ErrorRecord`] counting the errors
//! accumulated by the bipartite state shared between nodes `i` and `j`. Since
//! Pauli channels commute with Bell measurements, error counts add up
//! element-wise when two pairs are swapped.
//!
//! One [`step`] runs, in order: generation in every free segment, aging of all
//! stored states, swap-as-soon-as-possible, policy discards, and extraction of
//! the end-to-end pair `(0, n)`.

use std::fmt::{self, Write as _};
use std::hash::{Hash, Hasher};
use std::ops::Add;

use rand::Rng;

use crate::error::{Error, Result};
use crate::physics::{fidelity_from_storage, DerivedParams, MAX_SEGMENTS};

/// Accumulated error counts of one stored bipartite state.
///
/// Only `storage_steps` (dephasing) enters the key-rate model. The Pauli X and
/// Z counters are carried so the state format stays general.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ErrorRecord {
    pub storage_steps: u32,
    pub x_count: u32,
    pub z_count: u32,
}

impl ErrorRecord {
    pub fn with_storage(storage_steps: u32) -> Self {
        Self {
            storage_steps,
            ..Self::default()
        }
    }
}

impl Add for ErrorRecord {
    type Output = ErrorRecord;

    fn add(self, rhs: ErrorRecord) -> ErrorRecord {
        ErrorRecord {
            storage_steps: self.storage_steps + rhs.storage_steps,
            x_count: self.x_count + rhs.x_count,
            z_count: self.z_count + rhs.z_count,
        }
    }
}

/// Index of pair `(i, j)`, `i < j`, in row-major triangular order
/// `(0,1), (0,2), ..., (0,n), (1,2), ...`.
#[inline]
pub fn pair_index(i: usize, j: usize, n_nodes: usize) -> usize {
    debug_assert!(i < j && j < n_nodes);
    i * (n_nodes - 1) - i * (i.saturating_sub(1)) / 2 + (j - i - 1)
}

/// All node pairs in triangular order.
pub fn pairs(n_nodes: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n_nodes).flat_map(move |i| (i + 1..n_nodes).map(move |j| (i, j)))
}

/// Node pairs a policy may discard: every pair except the end-to-end one.
pub fn controllable_pairs(n_nodes: usize) -> impl Iterator<Item = (usize, usize)> {
    pairs(n_nodes).filter(move |&(i, j)| !(i == 0 && j == n_nodes - 1))
}

/// Small set of node or segment indices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct IndexSet(u64);

impl IndexSet {
    pub fn insert(&mut self, k: usize) {
        self.0 |= 1 << k;
    }

    pub fn contains(&self, k: usize) -> bool {
        self.0 & (1 << k) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        let bits = self.0;
        (0..64).filter(move |k| bits & (1 << k) != 0)
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }
}

/// Occupancy of every pair of a repeater chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    n_nodes: usize,
    entries: Vec<Option<ErrorRecord>>,
    // left[k] = i when pair (i, k) is active; right[k] = j when (k, j) is.
    left: Vec<Option<usize>>,
    right: Vec<Option<usize>>,
    scratch: Vec<bool>,
}

impl PartialEq for ChainState {
    fn eq(&self, other: &Self) -> bool {
        self.n_nodes == other.n_nodes && self.entries == other.entries
    }
}

impl Eq for ChainState {}

impl Hash for ChainState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.n_nodes.hash(state);
        self.entries.hash(state);
    }
}

impl ChainState {
    /// Empty chain of `n_segments` segments.
    pub fn new(n_segments: usize) -> Self {
        assert!(
            (1..=MAX_SEGMENTS).contains(&n_segments),
            "n_segments must be in 1..={MAX_SEGMENTS}"
        );
        let n_nodes = n_segments + 1;
        let n_pairs = n_nodes * (n_nodes - 1) / 2;
        Self {
            n_nodes,
            entries: vec![None; n_pairs],
            left: vec![None; n_nodes],
            right: vec![None; n_nodes],
            scratch: vec![false; n_pairs - 1],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_segments(&self) -> usize {
        self.n_nodes - 1
    }

    pub fn n_pairs(&self) -> usize {
        self.entries.len()
    }

    /// Entries in triangular pair order.
    pub fn entries(&self) -> &[Option<ErrorRecord>] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&ErrorRecord> {
        self.entries[pair_index(i, j, self.n_nodes)].as_ref()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.iter().all(Option::is_none)
    }

    /// Active pairs with their records, in triangular order.
    pub fn active(&self) -> impl Iterator<Item = ((usize, usize), &ErrorRecord)> + '_ {
        pairs(self.n_nodes)
            .zip(&self.entries)
            .filter_map(|(p, e)| e.as_ref().map(|r| (p, r)))
    }

    /// Stores `record` on pair `(i, j)`. Fails if either facing memory is
    /// already holding another pair.
    pub fn insert(&mut self, i: usize, j: usize, record: ErrorRecord) -> Result<()> {
        if !(i < j && j < self.n_nodes) {
            return Err(Error::invalid(
                "pair",
                format!("({i}, {j}) is not a pair of a {}-node chain", self.n_nodes),
            ));
        }
        if self.right[i].is_some() || self.left[j].is_some() {
            return Err(Error::invalid(
                "pair",
                format!("memories for ({i}, {j}) are occupied"),
            ));
        }
        self.put(i, j, record);
        Ok(())
    }

    #[inline]
    fn put(&mut self, i: usize, j: usize, record: ErrorRecord) {
        self.entries[pair_index(i, j, self.n_nodes)] = Some(record);
        self.right[i] = Some(j);
        self.left[j] = Some(i);
    }

    /// Clears pair `(i, j)`, returning its record if it was active.
    pub fn remove(&mut self, i: usize, j: usize) -> Option<ErrorRecord> {
        let rec = self.entries[pair_index(i, j, self.n_nodes)].take();
        if rec.is_some() {
            self.right[i] = None;
            self.left[j] = None;
        }
        rec
    }

    /// Whether segment `(k, k+1)` can attempt generation: node `k`'s right
    /// memory and node `k+1`'s left memory are both free.
    pub fn segment_free(&self, k: usize) -> bool {
        self.right[k].is_none() && self.left[k + 1].is_none()
    }

    /// Checks the occupancy bookkeeping and the one-memory-per-direction rule.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut left = vec![None; self.n_nodes];
        let mut right = vec![None; self.n_nodes];
        for ((i, j), _) in self.active() {
            if right[i].replace(j).is_some() {
                return Err(format!("node {i} holds two pairs to the right"));
            }
            if left[j].replace(i).is_some() {
                return Err(format!("node {j} holds two pairs to the left"));
            }
        }
        if left != self.left || right != self.right {
            return Err("occupancy index out of sync with entries".into());
        }
        Ok(())
    }

    /// One line per active pair: `i j storage x z`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for ((i, j), r) in self.active() {
            let _ = writeln!(
                out,
                "{i} {j} {} {} {}",
                r.storage_steps, r.x_count, r.z_count
            );
        }
        out
    }

    /// Parses the output of [`ChainState::dump`].
    pub fn from_dump(n_segments: usize, text: &str) -> Result<Self> {
        let mut state = Self::new(n_segments);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let fields: Vec<u32> = line
                .split_whitespace()
                .map(|f| f.parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid("dump", format!("{line:?}: {e}")))?;
            let [i, j, s, x, z] = fields[..] else {
                return Err(Error::invalid(
                    "dump",
                    format!("{line:?}: expected 5 fields"),
                ));
            };
            state.insert(
                i as usize,
                j as usize,
                ErrorRecord {
                    storage_steps: s,
                    x_count: x,
                    z_count: z,
                },
            )?;
        }
        Ok(state)
    }

    /// Storage times per pair in triangular order, 0 for absent pairs.
    pub fn storage_vector(&self) -> Vec<u32> {
        self.entries
            .iter()
            .map(|e| e.map_or(0, |r| r.storage_steps))
            .collect()
    }

    #[inline]
    fn debug_check(&self) {
        #[cfg(debug_assertions)]
        if let Err(e) = self.check_invariants() {
            panic!("chain invariant violated: {e}\n{}", self.dump());
        }
    }
}

impl fmt::Display for ChainState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

/// Per-pair discard flags over all pairs, in triangular order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscardAction(pub Vec<bool>);

impl DiscardAction {
    pub fn none(n_nodes: usize) -> Self {
        Self(vec![false; n_nodes * (n_nodes - 1) / 2])
    }

    pub fn all(n_nodes: usize) -> Self {
        Self(vec![true; n_nodes * (n_nodes - 1) / 2])
    }

    pub fn flag(&mut self, i: usize, j: usize, n_nodes: usize) {
        self.0[pair_index(i, j, n_nodes)] = true;
    }
}

/// Swap-request flags over nodes. Only interior nodes are addressable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapAction(pub Vec<bool>);

/// Result of one MDP step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Storage time of the end-to-end state extracted this step.
    pub delivered: Option<u32>,
    /// Fidelity of the delivered state, 0 when nothing was delivered.
    pub reward: f64,
    pub swaps_performed: IndexSet,
    /// Segments (indexed by their left node) that produced a fresh pair.
    pub generated: IndexSet,
}

/// Decides which controllable pairs to discard given the post-swap state.
///
/// `flags` has one entry per pair of [`controllable_pairs`] and arrives
/// cleared.
pub trait DiscardPolicy {
    fn decide(&mut self, state: &ChainState, flags: &mut [bool]);
}

impl<F> DiscardPolicy for F
where
    F: FnMut(&ChainState, &mut [bool]),
{
    fn decide(&mut self, state: &ChainState, flags: &mut [bool]) {
        self(state, flags)
    }
}

/// Attempts generation in every segment with two free facing memories.
/// Fresh pairs start with zero storage.
pub fn generate<R: Rng + ?Sized>(state: &mut ChainState, p_gen: f64, rng: &mut R) -> IndexSet {
    let mut generated = IndexSet::default();
    for k in 0..state.n_segments() {
        if state.segment_free(k) && rng.random::<f64>() < p_gen {
            state.put(k, k + 1, ErrorRecord::default());
            generated.insert(k);
        }
    }
    state.debug_check();
    generated
}

/// One step of storage for every active pair.
pub fn age(state: &mut ChainState) {
    for e in state.entries.iter_mut().flatten() {
        e.storage_steps += 1;
    }
}

/// Bell measurement at node `k`: merges `(i, k)` and `(k, j)` into `(i, j)`.
pub fn swap_at(state: &mut ChainState, k: usize) -> Result<(usize, usize)> {
    if k == 0 || k + 1 >= state.n_nodes {
        return Err(Error::invalid(
            "node",
            format!("{k} is not an interior node"),
        ));
    }
    let i = state.left[k].ok_or(Error::MissingPair(k.saturating_sub(1), k))?;
    let j = state.right[k].ok_or(Error::MissingPair(k, k + 1))?;
    let a = state.remove(i, k).expect("occupancy index in sync");
    let b = state.remove(k, j).expect("occupancy index in sync");
    state.put(i, j, a + b);
    Ok((i, j))
}

/// Swaps at every node holding two pairs until none remains.
pub fn swap_asap(state: &mut ChainState) -> IndexSet {
    let mut swaps = IndexSet::default();
    // A swap at k only changes the left memory of some node j > k, so one
    // left-to-right pass reaches the fixed point.
    for k in 1..state.n_nodes - 1 {
        if state.left[k].is_some() && state.right[k].is_some() {
            swap_at(state, k).expect("both memories occupied");
            swaps.insert(k);
        }
    }
    state.debug_check();
    swaps
}

/// Clears every flagged active pair.
pub fn discard(state: &mut ChainState, action: &DiscardAction) {
    debug_assert_eq!(action.0.len(), state.n_pairs());
    let n = state.n_nodes;
    for ((i, j), &flag) in pairs(n).zip(&action.0) {
        if flag {
            state.remove(i, j);
        }
    }
}

/// Removes and returns the end-to-end pair if present.
pub fn extract_delivery(state: &mut ChainState) -> Option<u32> {
    let n = state.n_nodes - 1;
    state.remove(0, n).map(|r| r.storage_steps)
}

/// One full MDP step.
pub fn step<P, R>(
    state: &mut ChainState,
    policy: &mut P,
    d: &DerivedParams,
    rng: &mut R,
) -> StepOutcome
where
    P: DiscardPolicy + ?Sized,
    R: Rng + ?Sized,
{
    let generated = generate(state, d.p_gen, rng);
    advance(state, policy, d, generated)
}

/// The deterministic remainder of a step once generation has happened:
/// aging, swaps, policy discards, the storage cap and extraction.
pub fn advance<P>(
    state: &mut ChainState,
    policy: &mut P,
    d: &DerivedParams,
    generated: IndexSet,
) -> StepOutcome
where
    P: DiscardPolicy + ?Sized,
{
    age(state);
    let swaps_performed = swap_asap(state);

    let mut flags = std::mem::take(&mut state.scratch);
    flags.fill(false);
    policy.decide(state, &mut flags);
    apply_controllable(state, &flags);
    state.scratch = flags;

    if let Some(cap) = d.t_max_steps {
        enforce_storage_cap(state, cap);
    }
    state.debug_check();

    let delivered = extract_delivery(state);
    let reward = delivered.map_or(0.0, |t| fidelity_from_storage(t, d));
    StepOutcome {
        delivered,
        reward,
        swaps_performed,
        generated,
    }
}

/// Applies discard flags given over [`controllable_pairs`].
pub fn apply_controllable(state: &mut ChainState, flags: &[bool]) {
    let n = state.n_nodes;
    let end = pair_index(0, n - 1, n);
    for (c, &flag) in flags.iter().enumerate() {
        if flag {
            let idx = if c < end { c } else { c + 1 };
            if state.entries[idx].is_some() {
                let (i, j) = pair_of_index(idx, n);
                state.remove(i, j);
            }
        }
    }
}

fn enforce_storage_cap(state: &mut ChainState, cap: u32) {
    let n = state.n_nodes;
    for k in 0..n {
        if let Some(j) = state.right[k] {
            if !(k == 0 && j == n - 1) && state.get(k, j).is_some_and(|r| r.storage_steps > cap) {
                state.remove(k, j);
            }
        }
    }
}

/// Inverse of [`pair_index`].
pub fn pair_of_index(idx: usize, n_nodes: usize) -> (usize, usize) {
    let mut rest = idx;
    for i in 0..n_nodes {
        let row = n_nodes - 1 - i;
        if rest < row {
            return (i, i + 1 + rest);
        }
        rest -= row;
    }
    panic!("pair index {idx} out of range for {n_nodes} nodes");
}
