//! Padding-free batches.
//!
//! User sequences are concatenated end to end and the segment boundaries play
//! the role of per-user registers. Masking swaps selected rows for the shared
//! mask embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ItemEmbeddingTable;
use crate::real::Real;
use crate::ssd::SegmentBoundaries;
use crate::tensor::Tensor;

/// One user's chronologically ordered items.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSequence {
    pub user_id: usize,
    pub item_ids: Vec<usize>,
}

impl ItemSequence {
    pub fn new(user_id: usize, item_ids: Vec<usize>) -> Self {
        ItemSequence { user_id, item_ids }
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch<F: Real = f32> {
    /// `[ΣL, D]`, masked rows already replaced.
    pub embeddings: Tensor<F>,
    pub boundaries: SegmentBoundaries,
    pub user_ids: Vec<usize>,
    /// Item id of every packed row.
    pub item_ids: Vec<usize>,
    /// Sorted rows replaced by the mask embedding.
    pub mask_positions: Vec<usize>,
}

impl<F: Real> PackedBatch<F> {
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn segments(&self) -> usize {
        self.boundaries.count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rho: f64,
    pub seed: u64,
    pub protect_last: bool,
}

impl MaskSpec {
    pub fn new(rho: f64, seed: u64) -> Result<Self> {
        let spec = MaskSpec {
            rho,
            seed,
            protect_last: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Parameter(format!("mask ratio must lie in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }
}

pub fn pack_batch<F: Real>(sequences: &[ItemSequence], table: &ItemEmbeddingTable<Tensor<F>>) -> Result<PackedBatch<F>> {
    if sequences.is_empty() {
        return Err(Error::Parameter("cannot pack an empty list of sequences".into()));
    }
    if let Some(s) = sequences.iter().find(|s| s.is_empty()) {
        return Err(Error::Parameter(format!("user {} has an empty sequence", s.user_id)));
    }
    let lengths: Vec<usize> = sequences.iter().map(ItemSequence::len).collect();
    let boundaries = SegmentBoundaries::from_lengths(&lengths)?;
    let item_ids: Vec<usize> = sequences.iter().flat_map(|s| s.item_ids.iter().copied()).collect();
    let embeddings = table.items.gather_rows(&item_ids, "item embeddings")?;
    Ok(PackedBatch {
        embeddings,
        boundaries,
        user_ids: sequences.iter().map(|s| s.user_id).collect(),
        item_ids,
        mask_positions: Vec::new(),
    })
}

/// Independent Bernoulli(ρ) draw per eligible row, reproducible from the seed.
pub fn draw_mask_positions(boundaries: &SegmentBoundaries, spec: &MaskSpec) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    if spec.rho == 0.0 {
        return out;
    }
    for r in boundaries.ranges() {
        let end = if spec.protect_last { r.end - 1 } else { r.end };
        for pos in r.start..end {
            if rng.gen_bool(spec.rho) {
                out.push(pos);
            }
        }
    }
    out
}

/// Replaces masked rows by the mask embedding in training mode; identity in
/// evaluation mode.
pub fn apply_mask<F: Real>(
    batch: &PackedBatch<F>,
    spec: &MaskSpec,
    table: &ItemEmbeddingTable<Tensor<F>>,
    training: bool,
) -> Result<PackedBatch<F>> {
    spec.validate()?;
    if !training {
        return Ok(batch.clone());
    }
    let positions = draw_mask_positions(&batch.boundaries, spec);
    let mut out = batch.clone();
    let d = batch.embeddings.cols();
    if table.mask.numel() != d {
        return Err(Error::dim("apply_mask", format!("mask has {} values, rows have {d}", table.mask.numel())));
    }
    let rows = out.embeddings.data_mut();
    for &p in &positions {
        rows[p * d..(p + 1) * d].copy_from_slice(table.mask.data());
    }
    let mut merged = batch.mask_positions.clone();
    merged.extend(positions);
    merged.sort_unstable();
    merged.dedup();
    out.mask_positions = merged;
    Ok(out)
}

/// Reverses every segment in place.
pub fn flip_segments<F: Real>(x: &Tensor<F>, boundaries: &SegmentBoundaries) -> Result<Tensor<F>> {
    boundaries.check_total(x.shape().first().copied().unwrap_or(0))?;
    x.gather_rows(&boundaries.flip_permutation(), "flip_segments")
}

/// Final row of each segment, `[K, D]`.
pub fn last_positions<F: Real>(hidden: &Tensor<F>, boundaries: &SegmentBoundaries) -> Result<Tensor<F>> {
    boundaries.check_total(hidden.shape().first().copied().unwrap_or(0))?;
    hidden.gather_rows(&boundaries.last_positions(), "last_positions")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn table(v: usize, d: usize) -> ItemEmbeddingTable<Tensor<f64>> {
        ItemEmbeddingTable {
            items: Tensor::from_fn([v, d], |i| i as f64),
            mask: Tensor::full([d], -1.0),
        }
    }

    fn seqs(lengths: &[usize]) -> Vec<ItemSequence> {
        let mut next = 0;
        lengths
            .iter()
            .enumerate()
            .map(|(u, &l)| {
                let items = (next..next + l).map(|i| i % 20).collect();
                next += l;
                ItemSequence::new(u, items)
            })
            .collect()
    }

    #[test]
    fn pack_two_users() {
        let t = table(20, 2);
        let b = pack_batch(&seqs(&[3, 2]), &t).unwrap();
        assert_eq!(b.boundaries.offsets(), &[0, 3, 5]);
        assert_eq!(b.embeddings.row(3), t.items.row(3));
        assert_eq!(b.user_ids, vec![0, 1]);
        let single = pack_batch(&seqs(&[7]), &t).unwrap();
        assert_eq!(single.boundaries.offsets(), &[0, 7]);
    }

    #[test]
    fn pack_errors() {
        let t = table(20, 2);
        assert!(matches!(pack_batch::<f64>(&[], &t), Err(Error::Parameter(_))));
        assert!(pack_batch(&[ItemSequence::new(0, vec![])], &t).is_err());
        assert!(matches!(
            pack_batch(&[ItemSequence::new(0, vec![25])], &t),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn mask_extremes() {
        let t = table(20, 3);
        let b = pack_batch(&seqs(&[4, 1, 6]), &t).unwrap();
        let none = apply_mask(&b, &MaskSpec::new(0.0, 1).unwrap(), &t, true).unwrap();
        assert_eq!(none, b);
        let all = apply_mask(&b, &MaskSpec::new(0.999, 2).unwrap(), &t, true).unwrap();
        let lasts = b.boundaries.last_positions();
        for r in 0..b.len() {
            if lasts.contains(&r) {
                assert_eq!(all.embeddings.row(r), b.embeddings.row(r));
            } else {
                assert_eq!(all.embeddings.row(r), t.mask.data());
            }
        }
        let eval = apply_mask(&b, &MaskSpec::new(0.9, 3).unwrap(), &t, false).unwrap();
        assert_eq!(eval, b);
        assert!(MaskSpec::new(1.0, 0).is_err());
    }

    #[test]
    fn mask_rate_matches_ratio() {
        let boundaries = SegmentBoundaries::from_lengths(&[1001; 100]).unwrap();
        let spec = MaskSpec::new(0.2, 11).unwrap();
        let pos = draw_mask_positions(&boundaries, &spec);
        let frac = pos.len() as f64 / 100_000.0;
        assert!((frac - 0.2).abs() <= 0.01, "{frac}");
        assert_eq!(pos, draw_mask_positions(&boundaries, &spec));
    }

    #[test]
    fn flip_example_and_errors() {
        let x = Tensor::<f64>::from_fn([5, 1], |i| i as f64 + 1.0);
        let s = SegmentBoundaries::from_lengths(&[3, 2]).unwrap();
        assert_eq!(flip_segments(&x, &s).unwrap().data(), &[3.0, 2.0, 1.0, 5.0, 4.0]);
        assert!(matches!(
            flip_segments(&x, &SegmentBoundaries::single(4).unwrap()),
            Err(Error::Boundary(_))
        ));
        assert_eq!(last_positions(&x, &s).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(last_positions(&x, &SegmentBoundaries::single(5).unwrap()).unwrap().data(), &[5.0]);
    }

    proptest! {
        #[test]
        fn pack_then_slice_reconstructs(lengths in prop::collection::vec(1usize..12, 1..32)) {
            let t = table(20, 2);
            let s = seqs(&lengths);
            let b = pack_batch(&s, &t).unwrap();
            prop_assert_eq!(b.len(), lengths.iter().sum::<usize>());
            for (k, r) in b.boundaries.ranges().enumerate() {
                let own = t.items.gather_rows(&s[k].item_ids, "test").unwrap();
                prop_assert_eq!(b.embeddings.slice_leading(r), own);
            }
        }

        #[test]
        fn flip_is_an_index_reversal_and_involution(lengths in prop::collection::vec(1usize..9, 1..10)) {
            let total: usize = lengths.iter().sum();
            let x = Tensor::<f64>::from_fn([total, 2], |i| i as f64);
            let s = SegmentBoundaries::from_lengths(&lengths).unwrap();
            let f = flip_segments(&x, &s).unwrap();
            for r in s.ranges() {
                for i in 0..r.len() {
                    prop_assert_eq!(f.row(r.start + i), x.row(r.end - 1 - i));
                }
            }
            prop_assert_eq!(flip_segments(&f, &s).unwrap(), x);
        }

        #[test]
        fn last_position_never_masked(lengths in prop::collection::vec(1usize..9, 1..10), seed in any::<u64>()) {
            let s = SegmentBoundaries::from_lengths(&lengths).unwrap();
            let pos = draw_mask_positions(&s, &MaskSpec::new(0.9, seed).unwrap());
            let lasts = s.last_positions();
            prop_assert!(pos.iter().all(|p| !lasts.contains(p)));
        }
    }
}
