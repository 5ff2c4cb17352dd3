//! Pixel masks on the latent token grid and the token-to-instance indicator.
//!
//! With integer compression factors, trilinear resampling onto latent cell
//! centers is the mean over the `f_t x f_h x f_w` pixel block, so occupancy is
//! stored exactly as a set-pixel count over the block volume.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bits::BitGrid;
use crate::error::{Error, Result};
use crate::geometry::PixelMaskStack;
use crate::scene::LatentDims;

pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentMask {
    pub instance_id: u64,
    pub dims: LatentDims,
    pub block_volume: u32,
    /// Set pixels per latent cell, flattened in token order.
    pub counts: Vec<u32>,
    pub theta: f64,
    pub binarized: BitGrid,
}

impl LatentMask {
    pub fn occupancy(&self, k: usize) -> f64 {
        f64::from(self.counts[k]) / f64::from(self.block_volume)
    }

    pub fn occupancies(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|k| self.occupancy(k)).collect()
    }
}

pub fn downsample_trilinear(
    stack: &PixelMaskStack,
    factors: (usize, usize, usize),
    theta: f64,
) -> Result<LatentMask> {
    let (ft, fh, fw) = factors;
    if ft == 0 || fh == 0 || fw == 0 {
        return Err(Error::validation("factors", "compression factors must be >= 1"));
    }
    for (name, n, f) in [("T", stack.frames, ft), ("H", stack.height, fh), ("W", stack.width, fw)] {
        if n % f != 0 {
            return Err(Error::validation(
                format!("dims.{name}"),
                format!("{name} = {n} is not divisible by factor {f}"),
            ));
        }
    }
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::validation("theta", format!("{theta} outside [0, 1)")));
    }
    let dims = LatentDims {
        frames: stack.frames / ft,
        height: stack.height / fh,
        width: stack.width / fw,
    };
    let volume = (ft * fh * fw) as u32;
    let mut counts = vec![0u32; dims.token_count()];
    let mut binarized = BitGrid::zeros(dims.token_count());
    for t in 0..dims.frames {
        for row in 0..dims.height {
            for col in 0..dims.width {
                let mut n = 0;
                for tt in t * ft..(t + 1) * ft {
                    for rr in row * fh..(row + 1) * fh {
                        let base = (tt * stack.height + rr) * stack.width + col * fw;
                        n += stack.bits.count_range(base, base + fw);
                    }
                }
                let k = dims.token(t, row, col);
                counts[k] = n;
                if f64::from(n) / f64::from(volume) > theta {
                    binarized.set(k, true);
                }
            }
        }
    }
    Ok(LatentMask {
        instance_id: stack.instance_id,
        dims,
        block_volume: volume,
        counts,
        theta,
        binarized,
    })
}

/// Token-to-instance indicator `I(v_k)` and its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorIndex {
    m: usize,
    forward: Vec<Vec<u64>>,
    /// Only instances covering at least one token appear.
    inverse: BTreeMap<u64, Vec<usize>>,
}

impl IndicatorIndex {
    /// Builds from per-token sets; sets are sorted and deduplicated.
    pub fn from_sets(mut forward: Vec<Vec<u64>>) -> Self {
        let mut inverse: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (k, set) in forward.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            for &id in set.iter() {
                inverse.entry(id).or_default().push(k);
            }
        }
        Self {
            m: forward.len(),
            forward,
            inverse,
        }
    }

    pub fn empty(m: usize) -> Self {
        Self::from_sets(vec![Vec::new(); m])
    }

    pub fn token_count(&self) -> usize {
        self.m
    }

    pub fn instances_at(&self, k: usize) -> &[u64] {
        &self.forward[k]
    }

    pub fn is_foreground(&self, k: usize) -> bool {
        !self.forward[k].is_empty()
    }

    pub fn tokens_of(&self, id: u64) -> &[usize] {
        self.inverse.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn forward(&self) -> &[Vec<u64>] {
        &self.forward
    }

    pub fn inverse(&self) -> &BTreeMap<u64, Vec<usize>> {
        &self.inverse
    }

    pub fn covered_instances(&self) -> impl Iterator<Item = u64> + '_ {
        self.inverse.keys().copied()
    }

    /// Token-axis concatenation; part `p`'s token `k` becomes
    /// `k + sum of earlier parts' m`.
    pub fn concat(parts: &[IndicatorIndex]) -> Self {
        Self::from_sets(parts.iter().flat_map(|p| p.forward.iter().cloned()).collect())
    }

    /// `I_self(v_k) ⊆ I_other(v_k)` for every token.
    pub fn is_subset_of(&self, other: &IndicatorIndex) -> bool {
        self.m == other.m
            && self
                .forward
                .iter()
                .zip(&other.forward)
                .all(|(a, b)| a.iter().all(|id| b.binary_search(id).is_ok()))
    }

    pub fn to_json(&self) -> String {
        let file = IndicatorFile {
            m: self.m,
            forward: self
                .forward
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.is_empty())
                .map(|(k, s)| (k, s.clone()))
                .collect(),
            inverse: self.inverse.iter().map(|(&id, ks)| (id, ks.clone())).collect(),
        };
        let mut s = serde_json::to_string(&file).expect("infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IndicatorFile =
            serde_json::from_str(text).map_err(|e| Error::parse("indicator", e.to_string()))?;
        let mut forward = vec![Vec::new(); file.m];
        for (k, ids) in file.forward {
            if k >= file.m {
                return Err(Error::parse("indicator.forward", format!("token {k} >= m = {}", file.m)));
            }
            forward[k] = ids;
        }
        let idx = Self::from_sets(forward);
        let inverse: BTreeMap<u64, Vec<usize>> = file.inverse.into_iter().collect();
        if inverse != idx.inverse {
            return Err(Error::parse("indicator.inverse", "inconsistent with forward sets"));
        }
        Ok(idx)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndicatorFile {
    m: usize,
    #[serde(default)]
    forward: Vec<(usize, Vec<u64>)>,
    #[serde(default)]
    inverse: Vec<(u64, Vec<usize>)>,
}

pub fn build_indicator(latent_masks: &[LatentMask], dims: LatentDims) -> Result<IndicatorIndex> {
    let mut sorted: Vec<&LatentMask> = latent_masks.iter().collect();
    sorted.sort_by_key(|l| l.instance_id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].instance_id == w[1].instance_id) {
        return Err(Error::validation(
            "latent_masks",
            format!("instance {} appears twice", w[0].instance_id),
        ));
    }
    let m = dims.token_count();
    let mut forward = vec![Vec::new(); m];
    for lm in sorted {
        if lm.dims != dims {
            return Err(Error::Shape(format!(
                "latent mask of instance {} has dims {:?}, expected {:?}",
                lm.instance_id, lm.dims, dims
            )));
        }
        for k in lm.binarized.iter_ones() {
            forward[k].push(lm.instance_id);
        }
    }
    Ok(IndicatorIndex::from_sets(forward))
}

/// Latent masks serialized with exact per-cell counts.
pub fn latent_mask_to_json(lm: &LatentMask) -> String {
    let v = serde_json::json!({
        "instance_id": lm.instance_id,
        "dims": lm.dims,
        "block_volume": lm.block_volume,
        "theta": lm.theta,
        "counts": lm.counts,
        "binarized": lm.binarized.iter_ones().collect::<Vec<_>>(),
    });
    let mut s = serde_json::to_string(&v).expect("infallible");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack_with(frames: usize, h: usize, w: usize, set: &[(usize, usize, usize)]) -> PixelMaskStack {
        let mut s = PixelMaskStack::zeros(1, frames, h, w);
        for &(t, r, c) in set {
            s.bits.set((t * h + r) * w + c, true);
        }
        s
    }

    #[test]
    fn saturation_and_empty() {
        let mut full = PixelMaskStack::zeros(1, 4, 8, 8);
        full.bits = BitGrid::ones(256);
        let l = downsample_trilinear(&full, (2, 4, 4), 0.5).unwrap();
        assert!(l.occupancies().iter().all(|&o| o == 1.0));
        assert_eq!(l.binarized.count_ones(), 8);
        let z = downsample_trilinear(&PixelMaskStack::zeros(1, 4, 8, 8), (2, 4, 4), 0.5).unwrap();
        assert!(z.occupancies().iter().all(|&o| o == 0.0));
        assert_eq!(z.binarized.count_ones(), 0);
    }

    #[test]
    fn single_pixel_block() {
        let s = stack_with(4, 8, 8, &[(2, 5, 3)]);
        let l = downsample_trilinear(&s, (4, 8, 8), 0.5).unwrap();
        assert_eq!(l.counts, vec![1]);
        assert_eq!(l.occupancy(0), 1.0 / 256.0);
        assert!(!l.binarized.get(0));
        let l = downsample_trilinear(&s, (4, 8, 8), 0.001).unwrap();
        assert!(l.binarized.get(0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = PixelMaskStack::zeros(1, 4, 8, 8);
        assert!(downsample_trilinear(&s, (3, 4, 4), 0.5).is_err());
        assert!(downsample_trilinear(&s, (2, 4, 4), 1.0).is_err());
        assert!(downsample_trilinear(&s, (2, 4, 4), -0.1).is_err());
    }

    fn latent(id: u64, dims: LatentDims, on: &[usize]) -> LatentMask {
        let mut b = BitGrid::zeros(dims.token_count());
        for &k in on {
            b.set(k, true);
        }
        LatentMask {
            instance_id: id,
            dims,
            block_volume: 1,
            counts: (0..dims.token_count()).map(|k| u32::from(b.get(k))).collect(),
            theta: 0.5,
            binarized: b,
        }
    }

    const D: LatentDims = LatentDims {
        frames: 2,
        height: 2,
        width: 2,
    };

    #[test]
    fn no_instances_means_empty_index() {
        let idx = build_indicator(&[], D).unwrap();
        assert_eq!(idx.token_count(), 8);
        assert!((0..8).all(|k| idx.instances_at(k).is_empty()));
        assert!(idx.inverse().is_empty());
    }

    #[test]
    fn disjoint_and_overlapping() {
        let idx = build_indicator(&[latent(2, D, &[4, 5]), latent(1, D, &[0, 1])], D).unwrap();
        for k in 0..8 {
            assert!(idx.instances_at(k).len() <= 1);
        }
        assert_eq!(idx.tokens_of(1), &[0, 1]);
        let idx = build_indicator(&[latent(2, D, &[3, 5]), latent(1, D, &[3])], D).unwrap();
        assert_eq!(idx.instances_at(3), &[1, 2]);
    }

    #[test]
    fn dim_mismatch_and_duplicates() {
        let other = LatentDims { frames: 1, ..D };
        assert!(build_indicator(&[latent(1, other, &[])], D).is_err());
        assert!(build_indicator(&[latent(1, D, &[]), latent(1, D, &[])], D).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let idx = IndicatorIndex::from_sets(vec![vec![3], vec![], vec![1, 3], vec![]]);
        let back = IndicatorIndex::from_json(&idx.to_json()).unwrap();
        assert_eq!(back, idx);
        assert!(IndicatorIndex::from_json(r#"{"m":2,"forward":[[5,[1]]]}"#).is_err());
        assert!(IndicatorIndex::from_json(r#"{"m":2,"forward":[[0,[1]]],"inverse":[]}"#).is_err());
        let e = IndicatorIndex::from_json(r#"{"m":3}"#).unwrap();
        assert_eq!(e, IndicatorIndex::empty(3));
    }

    #[test]
    fn concat_offsets_tokens() {
        let a = IndicatorIndex::from_sets(vec![vec![1], vec![]]);
        let b = IndicatorIndex::from_sets(vec![vec![], vec![1, 2]]);
        let c = IndicatorIndex::concat(&[a, b]);
        assert_eq!(c.tokens_of(1), &[0, 3]);
        assert_eq!(c.tokens_of(2), &[3]);
    }

    fn arb_stack() -> impl Strategy<Value = PixelMaskStack> {
        proptest::collection::vec(any::<bool>(), 4 * 8 * 8).prop_map(|bits| {
            let mut s = PixelMaskStack::zeros(1, 4, 8, 8);
            for (i, b) in bits.into_iter().enumerate() {
                s.bits.set(i, b);
            }
            s
        })
    }

    proptest! {
        #[test]
        fn mass_is_conserved(s in arb_stack()) {
            let l = downsample_trilinear(&s, (2, 4, 2), 0.5).unwrap();
            let total: u32 = l.counts.iter().sum();
            prop_assert_eq!(total as usize, s.bits.count_ones());
            prop_assert!(l.occupancies().iter().all(|o| (0.0..=1.0).contains(o)));
        }

        #[test]
        fn theta_is_anti_monotone(s in arb_stack(), lo in 0.0f64..0.99, d in 0.0f64..0.5) {
            let hi = (lo + d).min(0.999);
            let a = downsample_trilinear(&s, (2, 2, 2), lo).unwrap();
            let b = downsample_trilinear(&s, (2, 2, 2), hi).unwrap();
            for k in b.binarized.iter_ones() {
                prop_assert!(a.binarized.get(k));
            }
        }

        #[test]
        fn forward_inverse_consistent(sets in proptest::collection::vec(proptest::collection::vec(0u64..5, 0..4), 0..64)) {
            let idx = IndicatorIndex::from_sets(sets);
            for k in 0..idx.token_count() {
                for &id in idx.instances_at(k) {
                    prop_assert!(idx.tokens_of(id).contains(&k));
                }
            }
            for (&id, ks) in idx.inverse() {
                prop_assert!(!ks.is_empty());
                for &k in ks {
                    prop_assert!(idx.instances_at(k).contains(&id));
                }
            }
        }
    }
}
