//! Additive attention mask over `[visual tokens, identity tokens]` and the
//! foreground loss mask.
//!
//! Layout: rows/columns `0..m` are visual tokens in indicator order, `m..m+n`
//! are identity condition tokens in ascending tracking-ID order. An entry is
//! either open (additive 0) or masked (additive `-inf`, realized as the most
//! negative finite value of the scalar type).
//!
//! Two storages exist. The dense path assembles three blocks built by
//! per-instance scatter; the blocked path groups visual tokens by their
//! indicator set and answers each entry from a small signature table. Both
//! must agree entrywise.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bits::BitGrid;
use crate::error::{Error, Result};
use crate::latent::IndicatorIndex;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundPolicy {
    /// `M[k][j] = -inf` whenever `I(v_k) ∩ I(v_j) = ∅` (off-diagonal), so
    /// background tokens only see themselves among visual tokens.
    Strict,
    /// The empty-intersection rule applies only between two foreground tokens;
    /// any pair involving a background token stays open.
    #[default]
    ForegroundOnly,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionBlockMode {
    #[default]
    IdentityOnly,
    AllOpen,
}

/// Visual-to-condition connectivity; the block is symmetric, so one `m x n`
/// table serves both `M[k][m+i]` and `M[m+i][k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityBlock {
    pub m: usize,
    pub n: usize,
    open: BitGrid,
}

impl IdentityBlock {
    pub fn is_open(&self, k: usize, i: usize) -> bool {
        self.open.get(k * self.n + i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryBlock {
    pub m: usize,
    open: BitGrid,
}

impl TrajectoryBlock {
    pub fn is_open(&self, k: usize, j: usize) -> bool {
        self.open.get(k * self.m + j)
    }

    /// Raw block from an `m x m` row-major table, with no invariants enforced.
    pub fn from_table(m: usize, open: &[bool]) -> Self {
        assert_eq!(open.len(), m * m);
        let mut g = BitGrid::zeros(m * m);
        for (i, &o) in open.iter().enumerate() {
            g.set(i, o);
        }
        Self { m, open: g }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionBlock {
    pub n: usize,
    pub mode: ConditionBlockMode,
}

impl ConditionBlock {
    pub fn is_open(&self, i: usize, j: usize) -> bool {
        self.mode == ConditionBlockMode::AllOpen || i == j
    }
}

fn check_order(instance_order: &[u64]) -> Result<()> {
    if instance_order.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation(
            "instance_order",
            "tracking IDs must be strictly ascending",
        ));
    }
    Ok(())
}

fn positions(instance_order: &[u64], idx: &IndicatorIndex) -> Result<BTreeMap<u64, usize>> {
    check_order(instance_order)?;
    let pos: BTreeMap<u64, usize> = instance_order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    if let Some(id) = idx.covered_instances().find(|id| !pos.contains_key(id)) {
        return Err(Error::UnknownInstance(id));
    }
    Ok(pos)
}

pub fn build_identity_mask(idx: &IndicatorIndex, instance_order: &[u64]) -> Result<IdentityBlock> {
    let pos = positions(instance_order, idx)?;
    let (m, n) = (idx.token_count(), instance_order.len());
    let mut open = BitGrid::zeros(m * n);
    for (id, tokens) in idx.inverse() {
        let i = pos[id];
        for &k in tokens {
            open.set(k * n + i, true);
        }
    }
    Ok(IdentityBlock { m, n, open })
}

pub fn build_trajectory_mask(idx: &IndicatorIndex, policy: BackgroundPolicy) -> TrajectoryBlock {
    let m = idx.token_count();
    let mut open = BitGrid::zeros(m * m);
    for tokens in idx.inverse().values() {
        for &a in tokens {
            for &b in tokens {
                open.set(a * m + b, true);
            }
        }
    }
    if policy == BackgroundPolicy::ForegroundOnly {
        for k in (0..m).filter(|&k| !idx.is_foreground(k)) {
            open.set_range(k * m, (k + 1) * m);
            for j in 0..m {
                open.set(j * m + k, true);
            }
        }
    }
    for k in 0..m {
        open.set(k * m + k, true);
    }
    TrajectoryBlock { m, open }
}

pub fn build_condition_block(n: usize, mode: ConditionBlockMode) -> ConditionBlock {
    ConditionBlock { n, mode }
}

/// Signature table for the blocked storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedMask {
    /// Distinct indicator sets, in order of first appearance.
    pub signatures: Vec<Vec<u64>>,
    pub token_signature: Vec<u32>,
    sig_pair: BitGrid,
    sig_cond: BitGrid,
    pub condition_mode: ConditionBlockMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskStorage {
    Dense(BitGrid),
    Blocked(BlockedMask),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    m: usize,
    n: usize,
    storage: MaskStorage,
}

pub fn assemble_mask(
    identity: &IdentityBlock,
    trajectory: &TrajectoryBlock,
    condition: &ConditionBlock,
) -> Result<AttentionMask> {
    let (m, n) = (identity.m, identity.n);
    if trajectory.m != m || condition.n != n {
        return Err(Error::Shape(format!(
            "blocks disagree: identity {m}x{n}, trajectory {0}x{0}, condition {1}x{1}",
            trajectory.m, condition.n
        )));
    }
    let size = m + n;
    let mut g = BitGrid::zeros(size * size);
    for k in 0..m {
        for j in 0..m {
            if trajectory.is_open(k, j) {
                g.set(k * size + j, true);
            }
        }
        for i in 0..n {
            if identity.is_open(k, i) {
                g.set(k * size + m + i, true);
                g.set((m + i) * size + k, true);
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            if condition.is_open(i, j) {
                g.set((m + i) * size + m + j, true);
            }
        }
    }
    for r in 0..size {
        if g.count_range(r * size, (r + 1) * size) == 0 {
            return Err(Error::DeadRow(r));
        }
        if !g.get(r * size + r) {
            return Err(Error::MaskedDiagonal(r));
        }
    }
    Ok(AttentionMask {
        m,
        n,
        storage: MaskStorage::Dense(g),
    })
}

/// Dense mask via the three block builders.
pub fn build_attention_mask(
    idx: &IndicatorIndex,
    instance_order: &[u64],
    policy: BackgroundPolicy,
    condition_mode: ConditionBlockMode,
) -> Result<AttentionMask> {
    let identity = build_identity_mask(idx, instance_order)?;
    let trajectory = build_trajectory_mask(idx, policy);
    let condition = build_condition_block(instance_order.len(), condition_mode);
    assemble_mask(&identity, &trajectory, &condition)
}

/// Blocked mask: `O(m + s^2 + s*n)` storage for `s` distinct indicator sets.
pub fn build_sparse_mask(
    idx: &IndicatorIndex,
    instance_order: &[u64],
    policy: BackgroundPolicy,
    condition_mode: ConditionBlockMode,
) -> Result<AttentionMask> {
    let pos = positions(instance_order, idx)?;
    let m = idx.token_count();
    let n = instance_order.len();
    let mut lookup: BTreeMap<&[u64], u32> = BTreeMap::new();
    let mut signatures: Vec<Vec<u64>> = Vec::new();
    let mut token_signature = Vec::with_capacity(m);
    for k in 0..m {
        let set = idx.instances_at(k);
        let s = *lookup.entry(set).or_insert_with(|| {
            signatures.push(set.to_vec());
            (signatures.len() - 1) as u32
        });
        token_signature.push(s);
    }
    let s = signatures.len();
    let mut sig_pair = BitGrid::zeros(s * s);
    let mut sig_cond = BitGrid::zeros(s * n);
    for (a, sa) in signatures.iter().enumerate() {
        for (b, sb) in signatures.iter().enumerate() {
            let open = match policy {
                BackgroundPolicy::ForegroundOnly if sa.is_empty() || sb.is_empty() => true,
                _ => sa.iter().any(|id| sb.binary_search(id).is_ok()),
            };
            sig_pair.set(a * s + b, open);
        }
        for id in sa {
            sig_cond.set(a * n + pos[id], true);
        }
    }
    Ok(AttentionMask {
        m,
        n,
        storage: MaskStorage::Blocked(BlockedMask {
            signatures,
            token_signature,
            sig_pair,
            sig_cond,
            condition_mode,
        }),
    })
}

pub const DENSE_MAGIC: [u8; 4] = *b"IMAM";
pub const DENSE_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseFile {
    m: usize,
    n: usize,
    unmasked: Vec<(usize, usize)>,
}

impl AttentionMask {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn size(&self) -> usize {
        self.m + self.n
    }

    pub fn storage(&self) -> &MaskStorage {
        &self.storage
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, MaskStorage::Dense(_))
    }

    pub fn is_open(&self, r: usize, c: usize) -> bool {
        let size = self.size();
        debug_assert!(r < size && c < size);
        match &self.storage {
            MaskStorage::Dense(g) => g.get(r * size + c),
            MaskStorage::Blocked(b) => {
                if r == c {
                    return true;
                }
                let m = self.m;
                let s = b.signatures.len();
                match (r < m, c < m) {
                    (true, true) => {
                        b.sig_pair
                            .get(b.token_signature[r] as usize * s + b.token_signature[c] as usize)
                    }
                    (true, false) => b.sig_cond.get(b.token_signature[r] as usize * self.n + (c - m)),
                    (false, true) => b.sig_cond.get(b.token_signature[c] as usize * self.n + (r - m)),
                    (false, false) => b.condition_mode == ConditionBlockMode::AllOpen,
                }
            }
        }
    }

    /// Additive value: `0` when open, [`Real::masked_logit`] when masked.
    pub fn additive<T: Real>(&self, r: usize, c: usize) -> T {
        if self.is_open(r, c) {
            T::zero()
        } else {
            T::masked_logit()
        }
    }

    pub fn row(&self, r: usize) -> Vec<bool> {
        (0..self.size()).map(|c| self.is_open(r, c)).collect()
    }

    pub fn additive_row<T: Real>(&self, r: usize) -> Vec<T> {
        (0..self.size()).map(|c| self.additive(r, c)).collect()
    }

    pub fn to_dense(&self) -> AttentionMask {
        let size = self.size();
        let mut g = BitGrid::zeros(size * size);
        for r in 0..size {
            for c in 0..size {
                if self.is_open(r, c) {
                    g.set(r * size + c, true);
                }
            }
        }
        AttentionMask {
            m: self.m,
            n: self.n,
            storage: MaskStorage::Dense(g),
        }
    }

    pub fn entrywise_eq(&self, other: &AttentionMask) -> bool {
        self.m == other.m
            && self.n == other.n
            && (0..self.size()).all(|r| (0..self.size()).all(|c| self.is_open(r, c) == other.is_open(r, c)))
    }

    pub fn count_open(&self) -> usize {
        match &self.storage {
            MaskStorage::Dense(g) => g.count_ones(),
            MaskStorage::Blocked(_) => self.to_dense().count_open(),
        }
    }

    /// Row-major list of open `(row, col)` pairs.
    pub fn unmasked_pairs(&self) -> Vec<(usize, usize)> {
        let size = self.size();
        let mut out = Vec::new();
        for r in 0..size {
            for c in 0..size {
                if self.is_open(r, c) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Names of violated structural invariants; empty when the mask is well
    /// formed.
    pub fn violations(&self) -> Vec<String> {
        let (m, size) = (self.m, self.size());
        let mut out = Vec::new();
        if let Some(r) = (0..size).find(|&r| !self.is_open(r, r)) {
            out.push(format!("diagonal: entry ({r},{r}) is masked"));
        }
        'id: for k in 0..m {
            for c in m..size {
                if self.is_open(k, c) != self.is_open(c, k) {
                    out.push(format!("identity-symmetry: ({k},{c}) != ({c},{k})"));
                    break 'id;
                }
            }
        }
        'tr: for k in 0..m {
            for j in k + 1..m {
                if self.is_open(k, j) != self.is_open(j, k) {
                    out.push(format!("trajectory-symmetry: ({k},{j}) != ({j},{k})"));
                    break 'tr;
                }
            }
        }
        if let Some(r) = (0..size).find(|&r| (0..size).all(|c| !self.is_open(r, c))) {
            out.push(format!("dead-row: row {r} is fully masked"));
        }
        out
    }

    pub fn to_sparse_json(&self) -> String {
        let file = SparseFile {
            m: self.m,
            n: self.n,
            unmasked: self.unmasked_pairs(),
        };
        let mut s = serde_json::to_string(&file).expect("infallible");
        s.push('\n');
        s
    }

    /// Parses without enforcing invariants; see [`AttentionMask::violations`].
    pub fn from_sparse_json(text: &str) -> Result<AttentionMask> {
        let file: SparseFile =
            serde_json::from_str(text).map_err(|e| Error::parse("sparse mask", e.to_string()))?;
        let size = file.m + file.n;
        let mut g = BitGrid::zeros(size * size);
        for (r, c) in file.unmasked {
            if r >= size || c >= size {
                return Err(Error::parse("sparse mask", format!("pair ({r},{c}) outside {size}x{size}")));
            }
            g.set(r * size + c, true);
        }
        Ok(AttentionMask {
            m: file.m,
            n: file.n,
            storage: MaskStorage::Dense(g),
        })
    }

    /// 16-byte header (`IMAM`, version u16, reserved u16, m u32, n u32; little
    /// endian) and a row-major LSB-first bitmap, 1 = open.
    pub fn to_dense_binary(&self) -> Vec<u8> {
        let dense = self.to_dense();
        let MaskStorage::Dense(g) = &dense.storage else {
            unreachable!()
        };
        let mut out = Vec::with_capacity(16 + g.len().div_ceil(8));
        out.extend_from_slice(&DENSE_MAGIC);
        out.extend_from_slice(&DENSE_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&g.to_bytes());
        out
    }

    pub fn from_dense_binary(bytes: &[u8]) -> Result<AttentionMask> {
        if bytes.len() < 16 || bytes[..4] != DENSE_MAGIC {
            return Err(Error::parse("dense mask", "missing IMAM header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DENSE_VERSION {
            return Err(Error::parse("dense mask", format!("unsupported version {version}")));
        }
        let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let size = m + n;
        let g = BitGrid::from_bytes(size * size, &bytes[16..])
            .ok_or_else(|| Error::parse("dense mask", "payload length does not match header"))?;
        Ok(AttentionMask {
            m,
            n,
            storage: MaskStorage::Dense(g),
        })
    }
}

/// `M_Loss(v_k) = 1` iff `I(v_k)` is nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    pub weights: Vec<u8>,
}

impl LossMask {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn selected(&self) -> usize {
        self.weights.iter().filter(|&&w| w == 1).count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(&serde_json::json!({
            "m": self.weights.len(),
            "weights": self.weights,
        }))
        .expect("infallible");
        s.push('\n');
        s
    }
}

pub fn build_loss_mask(idx: &IndicatorIndex) -> LossMask {
    LossMask {
        weights: (0..idx.token_count()).map(|k| u8::from(idx.is_foreground(k))).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(sets: &[&[u64]]) -> IndicatorIndex {
        IndicatorIndex::from_sets(sets.iter().map(|s| s.to_vec()).collect())
    }

    #[test]
    fn identity_block_definition() {
        let i = idx(&[&[1], &[]]);
        let mask = build_attention_mask(&i, &[1], BackgroundPolicy::ForegroundOnly, ConditionBlockMode::IdentityOnly)
            .unwrap();
        assert_eq!(mask.additive::<f64>(0, 2), 0.0);
        assert_eq!(mask.additive::<f64>(1, 2), f64::MIN);
        assert_eq!(mask.additive::<f64>(2, 0), 0.0);
        assert_eq!(mask.additive::<f64>(2, 1), f64::MIN);
    }

    #[test]
    fn identity_block_all_closed_when_no_coverage() {
        let b = build_identity_mask(&idx(&[&[], &[], &[]]), &[4, 9]).unwrap();
        assert!((0..3).all(|k| (0..2).all(|i| !b.is_open(k, i))));
    }

    #[test]
    fn identity_block_rejects_unknown_and_unsorted() {
        let i = idx(&[&[1], &[3]]);
        assert!(matches!(build_identity_mask(&i, &[1]), Err(Error::UnknownInstance(3))));
        assert!(build_identity_mask(&i, &[3, 1]).is_err());
    }

    #[test]
    fn occlusion_pair_stays_open() {
        // Tokens 0..4 over three frames; instance 1 at token 0 (frame t) and
        // token 4 (frame t+2), nothing at t+1.
        let i = idx(&[&[1], &[], &[], &[], &[1], &[]]);
        for p in [BackgroundPolicy::Strict, BackgroundPolicy::ForegroundOnly] {
            let t = build_trajectory_mask(&i, p);
            assert!(t.is_open(0, 4) && t.is_open(4, 0));
        }
    }

    #[test]
    fn disjoint_instances_masked_under_both_policies() {
        let i = idx(&[&[1], &[2]]);
        for p in [BackgroundPolicy::Strict, BackgroundPolicy::ForegroundOnly] {
            let t = build_trajectory_mask(&i, p);
            assert!(!t.is_open(0, 1) && !t.is_open(1, 0));
        }
    }

    #[test]
    fn background_pairs_depend_on_policy() {
        let i = idx(&[&[], &[], &[1]]);
        let strict = build_trajectory_mask(&i, BackgroundPolicy::Strict);
        assert!(!strict.is_open(0, 1));
        assert!(!strict.is_open(0, 2));
        assert!(strict.is_open(0, 0));
        let fg = build_trajectory_mask(&i, BackgroundPolicy::ForegroundOnly);
        assert!(fg.is_open(0, 1) && fg.is_open(0, 2) && fg.is_open(2, 0));
    }

    #[test]
    fn condition_block_modes() {
        let c = build_condition_block(3, ConditionBlockMode::IdentityOnly);
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(c.is_open(a, b), a == b);
            }
        }
        assert!(build_condition_block(1, ConditionBlockMode::IdentityOnly).is_open(0, 0));
        let o = build_condition_block(3, ConditionBlockMode::AllOpen);
        assert!((0..3).all(|a| (0..3).all(|b| o.is_open(a, b))));
    }

    #[test]
    fn zero_instances_is_all_open() {
        let i = IndicatorIndex::empty(6);
        let mask = build_attention_mask(&i, &[], BackgroundPolicy::ForegroundOnly, ConditionBlockMode::IdentityOnly)
            .unwrap();
        assert_eq!(mask.n(), 0);
        assert_eq!(mask.count_open(), 36);
    }

    #[test]
    fn dead_row_is_reported() {
        // Pathological trajectory block: row 1 fully masked, diagonal included.
        let mut table = vec![true; 9];
        for j in 0..3 {
            table[3 + j] = false;
            table[j * 3 + 1] = false;
        }
        let t = TrajectoryBlock::from_table(3, &table);
        let i = idx(&[&[], &[], &[]]);
        let id = build_identity_mask(&i, &[]).unwrap();
        let c = build_condition_block(0, ConditionBlockMode::IdentityOnly);
        assert!(matches!(assemble_mask(&id, &t, &c), Err(Error::DeadRow(1))));
        // The strict builder leaves an isolated background token its diagonal.
        let strict = build_trajectory_mask(&idx(&[&[], &[1], &[1]]), BackgroundPolicy::Strict);
        let id = build_identity_mask(&idx(&[&[], &[1], &[1]]), &[1]).unwrap();
        let c = build_condition_block(1, ConditionBlockMode::IdentityOnly);
        let mask = assemble_mask(&id, &strict, &c).unwrap();
        assert_eq!(mask.row(0), vec![true, false, false, false]);
    }

    #[test]
    fn block_shape_mismatch() {
        let i = idx(&[&[1]]);
        let id = build_identity_mask(&i, &[1]).unwrap();
        let t = build_trajectory_mask(&idx(&[&[1], &[]]), BackgroundPolicy::Strict);
        let c = build_condition_block(1, ConditionBlockMode::IdentityOnly);
        assert!(matches!(assemble_mask(&id, &t, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_mask_definition() {
        assert_eq!(build_loss_mask(&IndicatorIndex::empty(4)).weights, vec![0; 4]);
        assert_eq!(build_loss_mask(&idx(&[&[1], &[2, 3]])).weights, vec![1, 1]);
        assert_eq!(build_loss_mask(&idx(&[&[], &[2], &[]])).weights, vec![0, 1, 0]);
    }

    #[test]
    fn dense_and_blocked_agree_and_serialize() {
        let i = idx(&[&[1], &[], &[1, 2], &[2], &[], &[5]]);
        for p in [BackgroundPolicy::Strict, BackgroundPolicy::ForegroundOnly] {
            for cm in [ConditionBlockMode::IdentityOnly, ConditionBlockMode::AllOpen] {
                let dense = build_attention_mask(&i, &[1, 2, 5], p, cm).unwrap();
                let sparse = build_sparse_mask(&i, &[1, 2, 5], p, cm).unwrap();
                assert!(dense.is_dense() && !sparse.is_dense());
                assert!(dense.entrywise_eq(&sparse));
                assert!(dense.violations().is_empty());
                assert!(sparse.violations().is_empty());
                let back = AttentionMask::from_sparse_json(&sparse.to_sparse_json()).unwrap();
                assert_eq!(back, dense);
                let back = AttentionMask::from_dense_binary(&sparse.to_dense_binary()).unwrap();
                assert_eq!(back, dense);
            }
        }
    }

    #[test]
    fn tampered_file_violations_are_named() {
        let i = idx(&[&[1], &[1], &[]]);
        let mask = build_sparse_mask(&i, &[1], BackgroundPolicy::ForegroundOnly, ConditionBlockMode::IdentityOnly)
            .unwrap();
        let text = mask.to_sparse_json().replace("[0,1],", "");
        let t = AttentionMask::from_sparse_json(&text).unwrap();
        assert_eq!(t.violations(), vec!["trajectory-symmetry: (0,1) != (1,0)".to_string()]);
    }
}
