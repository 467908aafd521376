//! Global magnitude pruning and mask bookkeeping.

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, PrunableSet};

/// Binary keep/drop flag per prunable coordinate.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    bits: Vec<bool>,
    support: usize,
}

impl Mask {
    pub fn ones(prunable: usize) -> Self {
        Mask { bits: vec![true; prunable], support: prunable }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        let support = bits.iter().filter(|&&b| b).count();
        Mask { bits, support }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of prunable coordinates `P`.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Number of kept coordinates.
    pub fn support(&self) -> usize {
        self.support
    }

    /// True when every kept coordinate of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Bits packed least-significant-bit first.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_packed(bytes: &[u8], count: usize) -> Result<Self> {
        if bytes.len() != count.div_ceil(8) {
            return Err(Error::Format(format!(
                "packed mask of {count} bits needs {} bytes, found {}",
                count.div_ceil(8),
                bytes.len()
            )));
        }
        if !count.is_multiple_of(8) && bytes[bytes.len() - 1] >> (count % 8) != 0 {
            return Err(Error::Format("packed mask has bits set past its length".into()));
        }
        let bits = (0..count).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(Mask::from_bits(bits))
    }
}

/// Summary of one pruning step.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneEvent {
    pub cycle: usize,
    /// Smallest kept magnitude.
    pub threshold: f32,
    pub previous_kept: usize,
    pub kept: usize,
    pub sparsity: f64,
}

/// `ceil(keep_ratio * k)`, ignoring float noise below one part in 1e9.
pub fn kept_count(keep_ratio: f64, k: usize) -> usize {
    let raw = keep_ratio * k as f64;
    (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize
}

/// Keeps the `ceil(α·k)` largest-magnitude surviving weights across all
/// prunable tensors at once. Ties go to the lower coordinate index.
pub fn global_magnitude_prune(
    params: &[f32],
    prunable: &PrunableSet,
    mask: &Mask,
    keep_ratio: f64,
    cycle: usize,
) -> Result<(Mask, PruneEvent)> {
    if !(keep_ratio > 0.0 && keep_ratio < 1.0) {
        return Err(Error::invalid(format!("keep ratio {keep_ratio} is outside (0, 1)")));
    }
    if params.len() != prunable.dim() || mask.len() != prunable.count() {
        return Err(Error::shape("prune", &[prunable.dim(), prunable.count()], &[params.len(), mask.len()]));
    }
    let mut survivors: Vec<(usize, f32)> = mask
        .bits()
        .iter()
        .zip(prunable.coords())
        .enumerate()
        .filter(|(_, (&b, _))| b)
        .map(|(i, (_, &coord))| (i, params[coord].abs()))
        .collect();
    if survivors.is_empty() {
        return Err(Error::invalid("cannot prune: no surviving coordinates"));
    }
    let previous_kept = survivors.len();
    let kept = kept_count(keep_ratio, previous_kept);
    survivors.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut bits = vec![false; mask.len()];
    for &(i, _) in &survivors[..kept] {
        bits[i] = true;
    }
    let next = Mask::from_bits(bits);
    let event = PruneEvent {
        cycle,
        threshold: survivors[kept - 1].1,
        previous_kept,
        kept,
        sparsity: sparsity_of(&next),
    };
    Ok((next, event))
}

/// Fraction of prunable coordinates that are masked out.
pub fn sparsity_of(mask: &Mask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    1.0 - mask.support() as f64 / mask.len() as f64
}

/// Idealized sparsity `1 - α^c` after `c` pruning cycles.
pub fn sparsity_after_cycles(keep_ratio: f64, cycles: u32) -> f64 {
    1.0 - keep_ratio.powi(cycles as i32)
}

/// Copies `mask` for use as the fixed mask of a run on `target`.
pub fn transplant_mask(mask: &Mask, source: &ModelSpec, target: &Model) -> Result<Mask> {
    if source.digest() != target.spec().digest() {
        return Err(Error::DigestMismatch);
    }
    if mask.len() != target.prunable().count() {
        return Err(Error::shape("transplant_mask", &[target.prunable().count()], &[mask.len()]));
    }
    Ok(mask.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, PrunableKinds};
    use proptest::prelude::*;

    fn flat_model(p: usize) -> Model {
        // dense 1 -> p: the weight segment comes first, so coordinate i is weight i
        let spec = ModelSpec {
            input_shape: vec![1],
            layers: vec![LayerSpec::Dense { inputs: 1, outputs: p }],
            classes: p,
        };
        Model::new(spec, PrunableKinds::Dense).unwrap()
    }

    fn prune(w: &[f32], alpha: f64) -> Mask {
        let m = flat_model(w.len());
        let mut params = w.to_vec();
        params.extend(vec![0.0; w.len()]);
        global_magnitude_prune(&params, m.prunable(), &Mask::ones(w.len()), alpha, 1).unwrap().0
    }

    #[test]
    fn magnitude_order() {
        let m = prune(&[0.1, 0.5, 0.3, 0.05], 0.5);
        assert_eq!(m.bits(), &[false, true, true, false]);
    }

    #[test]
    fn ties_keep_lower_index() {
        let m = prune(&[0.2, 0.2, 0.2, 0.2], 0.5);
        assert_eq!(m.bits(), &[true, true, false, false]);
    }

    #[test]
    fn pruning_is_global_across_tensors() {
        // two prunable tensors: [0.9] and [0.1, 0.8]
        let spec = ModelSpec {
            input_shape: vec![1],
            layers: vec![
                LayerSpec::Dense { inputs: 1, outputs: 1 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 1, outputs: 2 },
            ],
            classes: 2,
        };
        let model = Model::new(spec, PrunableKinds::Dense).unwrap();
        let mut params = vec![0.0f32; model.dim()];
        let coords = model.prunable().coords().to_vec();
        assert_eq!(coords.len(), 3);
        params[coords[0]] = 0.9;
        params[coords[1]] = 0.1;
        params[coords[2]] = -0.8;
        let (m, ev) =
            global_magnitude_prune(&params, model.prunable(), &model.dense_mask(), 2.0 / 3.0, 1).unwrap();
        assert_eq!(m.bits(), &[true, false, true]);
        assert_eq!(ev.kept, 2);
        assert_eq!(ev.threshold, 0.8);
    }

    #[test]
    fn rejects_bad_ratio_and_empty() {
        let m = flat_model(2);
        let p = vec![1.0; 4];
        assert!(global_magnitude_prune(&p, m.prunable(), &Mask::ones(2), 1.0, 0).is_err());
        assert!(global_magnitude_prune(&p, m.prunable(), &Mask::ones(2), 0.0, 0).is_err());
        let empty = Mask::from_bits(vec![false, false]);
        assert!(global_magnitude_prune(&p, m.prunable(), &empty, 0.5, 0).is_err());
    }

    #[test]
    fn sparsity_values() {
        assert_eq!(sparsity_of(&Mask::ones(10)), 0.0);
        assert_eq!(sparsity_of(&Mask::from_bits(vec![true, false, true, false])), 0.5);
        assert_eq!(sparsity_after_cycles(0.8, 0), 0.0);
        assert!((sparsity_after_cycles(0.8, 6) - 0.7379).abs() < 5e-5);
        assert!((sparsity_after_cycles(0.8, 13) - 0.9450).abs() < 5e-5);
    }

    #[test]
    fn kept_count_uses_ceil() {
        assert_eq!(kept_count(0.8, 5), 4);
        assert_eq!(kept_count(0.8, 10), 8);
        assert_eq!(kept_count(0.8, 3), 3);
        assert_eq!(kept_count(0.5, 1), 1);
        assert_eq!(kept_count(0.8, 3277), 2622);
    }

    #[test]
    fn transplant_checks_spec() {
        let a = flat_model(4);
        let b = flat_model(5);
        let mask = Mask::from_bits(vec![true, false, true, true]);
        let copy = transplant_mask(&mask, a.spec(), &a).unwrap();
        assert_eq!(copy, mask);
        assert_eq!(sparsity_of(&copy), sparsity_of(&mask));
        assert!(matches!(transplant_mask(&mask, a.spec(), &b), Err(Error::DigestMismatch)));
    }

    proptest! {
        #[test]
        fn packed_roundtrip(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let m = Mask::from_bits(bits);
            let back = Mask::from_packed(&m.to_packed(), m.len()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn prune_invariants(
            w in proptest::collection::vec(-1.0f32..1.0, 2..120),
            alpha in 0.05f64..0.99,
            rounds in 1usize..5,
        ) {
            let model = flat_model(w.len());
            let mut params = w.clone();
            params.extend(vec![0.0; w.len()]);
            let mut mask = Mask::ones(w.len());
            for c in 0..rounds {
                if mask.support() == 0 { break; }
                let (next, ev) = global_magnitude_prune(&params, model.prunable(), &mask, alpha, c).unwrap();
                prop_assert!(next.is_subset_of(&mask));
                prop_assert_eq!(next.support(), kept_count(alpha, mask.support()));
                prop_assert_eq!(ev.kept, next.support());
                let kept_min = (0..w.len()).filter(|&i| next.bits()[i]).map(|i| w[i].abs()).fold(f32::INFINITY, f32::min);
                let dropped_max = (0..w.len()).filter(|&i| mask.bits()[i] && !next.bits()[i]).map(|i| w[i].abs()).fold(0.0f32, f32::max);
                prop_assert!(kept_min >= dropped_max);
                // pruned coordinates are stored as zero
                for (p, &keep) in params.iter_mut().zip(next.bits()) {
                    if !keep { *p = 0.0; }
                }
                mask = next;
            }
        }

        #[test]
        fn keep_all_ratio_is_idempotent(w in proptest::collection::vec(-1.0f32..1.0, 2..60)) {
            let model = flat_model(w.len());
            let mut params = w.clone();
            params.extend(vec![0.0; w.len()]);
            let mask = Mask::ones(w.len());
            let alpha = 1.0 - 1e-6;
            let (next, _) = global_magnitude_prune(&params, model.prunable(), &mask, alpha, 1).unwrap();
            prop_assert_eq!(next, mask);
        }
    }
}
