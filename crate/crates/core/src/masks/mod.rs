//! Mask merging, overlap filtering and cross-view label association.

mod propagate;

use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};
use crate::store::{rle_encode, Mask, PropagatedMaskSet, SourceScale, UNMATCHED};

pub use propagate::oracle_propagate;

/// A raw segmenter proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMask {
    pub frame_id: u32,
    pub mask_id: u32,
    pub bitmap: Bitmap,
    pub pred_iou: f64,
    pub stability: f64,
    pub source_scale: SourceScale,
}

impl CandidateMask {
    pub fn score(&self) -> f64 {
        self.pred_iou * self.stability
    }

    pub fn from_mask(mask: &Mask, source_scale: SourceScale) -> Result<Self> {
        Ok(Self {
            frame_id: mask.frame_id,
            mask_id: mask.mask_id,
            bitmap: mask.bitmap()?,
            pred_iou: mask.pred_iou,
            stability: mask.stability,
            source_scale,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterThresholds {
    pub min_pred_iou: f64,
    pub min_stability: f64,
    pub max_overlap: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            min_pred_iou: 0.88,
            min_stability: 0.9,
            max_overlap: 0.8,
        }
    }
}

fn check_shapes<'a>(mut bitmaps: impl Iterator<Item = &'a Bitmap>) -> Result<()> {
    if let Some(first) = bitmaps.next() {
        for b in bitmaps {
            first.check_shape(b)?;
        }
    }
    Ok(())
}

/// Builds the two aggregated sets: `sp = subpart ∪ part`, `wp = whole ∪ part`.
/// Nothing is filtered here.
pub fn merge_scales(
    subpart: &[CandidateMask],
    part: &[CandidateMask],
    whole: &[CandidateMask],
) -> Result<(Vec<CandidateMask>, Vec<CandidateMask>)> {
    check_shapes(subpart.iter().chain(part).chain(whole).map(|c| &c.bitmap))?;
    let sp = subpart.iter().chain(part).cloned().collect();
    let wp = whole.iter().chain(part).cloned().collect();
    Ok((sp, wp))
}

/// Quality filter plus greedy overlap removal.
///
/// Candidates failing either quality threshold are dropped. The rest are
/// visited in descending `pred_iou * stability` order (stable on input
/// order); each one loses the pixels already claimed by accepted masks and
/// is dropped if more than `max_overlap` of its own area was claimed or if
/// nothing is left. Accepted regions are pairwise disjoint.
pub fn filter_masks(candidates: &[CandidateMask], thresholds: &FilterThresholds) -> Vec<Mask> {
    let mut order: Vec<&CandidateMask> = candidates
        .iter()
        .filter(|c| c.pred_iou >= thresholds.min_pred_iou && c.stability >= thresholds.min_stability)
        .filter(|c| !c.bitmap.is_empty())
        .collect();
    order.sort_by(|a, b| b.score().total_cmp(&a.score()));

    let mut claimed: Option<Bitmap> = None;
    let mut out = Vec::new();
    for cand in order {
        let area = cand.bitmap.count();
        let mut region = cand.bitmap.clone();
        if let Some(claimed) = &claimed {
            if claimed.check_shape(&cand.bitmap).is_err() {
                continue;
            }
            let overlap = cand.bitmap.intersection_count(claimed) as f64 / area as f64;
            if overlap > thresholds.max_overlap {
                continue;
            }
            region.subtract(claimed);
        }
        if region.is_empty() {
            continue;
        }
        match &mut claimed {
            Some(c) => c.or_assign(&region),
            None => claimed = Some(region.clone()),
        }
        out.push(Mask {
            mask_id: cand.mask_id,
            frame_id: cand.frame_id,
            region: rle_encode(&region),
            pred_iou: cand.pred_iou,
            stability: cand.stability,
            label: UNMATCHED,
        });
    }
    out
}

/// Intersection over union; 0 when both masks are empty.
pub fn iou(a: &Bitmap, b: &Bitmap) -> Result<f64> {
    a.check_shape(b)?;
    let union = a.union_count(b);
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

/// Label for each mask: the 1-based index of the propagated mask with the
/// highest IoU if that IoU exceeds `threshold`, else [`UNMATCHED`]. Ties go
/// to the lowest category index.
pub fn associate_bitmaps(masks: &[Bitmap], propagated: &[Bitmap], threshold: f64) -> Result<Vec<i32>> {
    check_shapes(masks.iter().chain(propagated))?;
    masks
        .iter()
        .map(|m| {
            let mut best = (UNMATCHED, f64::NEG_INFINITY);
            for (k, p) in propagated.iter().enumerate() {
                let v = iou(m, p)?;
                if v > best.1 {
                    best = (k as i32 + 1, v);
                }
            }
            Ok(if best.1 > threshold { best.0 } else { UNMATCHED })
        })
        .collect()
}

pub fn associate_frame(frame_masks: &[Mask], propagated: &PropagatedMaskSet, threshold: f64) -> Result<Vec<Mask>> {
    if let Some(m) = frame_masks.iter().find(|m| m.frame_id != propagated.frame_id) {
        return Err(Error::ShapeError(format!(
            "mask {} belongs to frame {}, propagated set to frame {}",
            m.mask_id, m.frame_id, propagated.frame_id
        )));
    }
    let bitmaps = frame_masks.iter().map(Mask::bitmap).collect::<Result<Vec<_>>>()?;
    let labels = associate_bitmaps(&bitmaps, &propagated.masks, threshold)?;
    Ok(frame_masks
        .iter()
        .zip(labels)
        .map(|(m, label)| Mask { label, ..m.clone() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cand(id: u32, bitmap: Bitmap, q: f64, s: f64) -> CandidateMask {
        CandidateMask {
            frame_id: 0,
            mask_id: id,
            bitmap,
            pred_iou: q,
            stability: s,
            source_scale: SourceScale::Part,
        }
    }

    fn random_blob(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Bitmap {
        let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let r = rng.random_range(1.5..6.0);
        Bitmap::from_fn(w, h, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            dx * dx + dy * dy <= r * r
        })
    }

    #[test]
    fn merge_counts() {
        let b = Bitmap::full(3, 3);
        let mk = |n: usize| (0..n).map(|i| cand(i as u32, b.clone(), 1.0, 1.0)).collect::<Vec<_>>();
        let (sp, wp) = merge_scales(&[], &[], &[]).unwrap();
        assert!(sp.is_empty() && wp.is_empty());
        let (sp, wp) = merge_scales(&mk(2), &mk(3), &mk(1)).unwrap();
        assert_eq!((sp.len(), wp.len()), (5, 4));
    }

    #[test]
    fn merge_keeps_duplicates_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sub: Vec<_> = (0..4).map(|i| cand(i, random_blob(&mut rng, 16, 16), 0.9, 0.9)).collect();
        let mut part = sub.clone();
        part.push(cand(9, random_blob(&mut rng, 16, 16), 0.5, 0.5));
        let (sp, wp) = merge_scales(&sub, &part, &[]).unwrap();
        assert_eq!(sp[..4], sub[..]);
        assert_eq!(sp[4..], part[..]);
        assert_eq!(wp, part);
    }

    #[test]
    fn merge_rejects_mixed_shapes() {
        let a = cand(0, Bitmap::full(3, 3), 1.0, 1.0);
        let b = cand(1, Bitmap::full(4, 3), 1.0, 1.0);
        assert!(matches!(merge_scales(&[a], &[], &[b]), Err(Error::ShapeError(_))));
    }

    #[test]
    fn filter_single_candidate_unchanged() {
        let b = Bitmap::from_fn(8, 8, |x, y| x > 2 && y < 5);
        let out = filter_masks(&[cand(4, b.clone(), 0.9, 0.9)], &FilterThresholds::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bitmap().unwrap(), b);
        assert_eq!(out[0].label, UNMATCHED);
    }

    #[test]
    fn filter_drops_duplicate() {
        let b = Bitmap::from_fn(8, 8, |x, _| x < 4);
        let th = FilterThresholds {
            min_pred_iou: 0.0,
            min_stability: 0.0,
            max_overlap: 0.5,
        };
        let out = filter_masks(&[cand(1, b.clone(), 0.8, 0.8), cand(0, b, 0.9, 0.9)], &th);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].mask_id, 0);
    }

    #[test]
    fn filter_quality_thresholds() {
        let b = Bitmap::full(4, 4);
        let th = FilterThresholds::default();
        assert!(filter_masks(&[cand(0, b.clone(), 0.87, 0.99)], &th).is_empty());
        assert!(filter_masks(&[cand(0, b, 0.99, 0.89)], &th).is_empty());
        assert!(filter_masks(&[], &th).is_empty());
    }

    #[test]
    fn filter_random_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let th = FilterThresholds {
            min_pred_iou: 0.3,
            min_stability: 0.3,
            max_overlap: 0.6,
        };
        let cands: Vec<_> = (0..50)
            .map(|i| {
                let b = random_blob(&mut rng, 24, 24);
                cand(i, b, rng.random(), rng.random())
            })
            .collect();
        let out = filter_masks(&cands, &th);
        assert!(!out.is_empty());
        let regions: Vec<_> = out.iter().map(|m| m.bitmap().unwrap()).collect();
        for i in 0..regions.len() {
            let orig = &cands.iter().find(|c| c.mask_id == out[i].mask_id).unwrap().bitmap;
            assert!(regions[i].is_subset_of(orig));
            for j in i + 1..regions.len() {
                assert_eq!(regions[i].intersection_count(&regions[j]), 0);
            }
        }
        // Scores of survivors must be non-increasing, and the survivor set
        // must match a sequential brute-force replay.
        let score = |m: &Mask| m.pred_iou * m.stability;
        assert!(out.windows(2).all(|w| score(&w[0]) >= score(&w[1])));
        let mut sorted: Vec<_> = cands
            .iter()
            .filter(|c| c.pred_iou >= 0.3 && c.stability >= 0.3)
            .collect();
        sorted.sort_by(|a, b| b.score().partial_cmp(&a.score()).unwrap());
        let mut taken = vec![false; 24 * 24];
        let mut expect = Vec::new();
        for c in sorted {
            let mine: Vec<usize> = c.bitmap.ones().collect();
            let hit = mine.iter().filter(|&&i| taken[i]).count();
            if hit as f64 / mine.len() as f64 > 0.6 || hit == mine.len() {
                continue;
            }
            for &i in &mine {
                taken[i] = true;
            }
            expect.push(c.mask_id);
        }
        assert_eq!(out.iter().map(|m| m.mask_id).collect::<Vec<_>>(), expect);
    }

    #[test]
    fn iou_cases() {
        let a = Bitmap::from_fn(4, 4, |_, y| y <= 1);
        let b = Bitmap::from_fn(4, 4, |_, y| (1..=2).contains(&y));
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &Bitmap::from_fn(4, 4, |_, y| y == 3)).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(iou(&Bitmap::new(4, 4), &Bitmap::new(4, 4)).unwrap(), 0.0);
        assert!(iou(&a, &Bitmap::new(3, 4)).is_err());
    }

    #[test]
    fn associate_identical_and_below_threshold() {
        let props: Vec<Bitmap> = (0..4).map(|k| Bitmap::from_fn(10, 10, |_, y| y == k * 2 || y == k * 2 + 1)).collect();
        let labels = associate_bitmaps(&[props[2].clone()], &props, 0.5).unwrap();
        assert_eq!(labels, vec![3]);
        // 8 px shared, 20 px in the union: IoU 0.4.
        let m = Bitmap::from_fn(10, 10, |x, y| (y == 0 && x < 8) || (y == 5 && x < 6));
        let p = Bitmap::from_fn(10, 10, |x, y| y == 0 || (y == 1 && x < 4));
        let v = iou(&m, &p).unwrap();
        assert!((v - 0.4).abs() < 1e-12, "{v}");
        assert_eq!(associate_bitmaps(&[m], &[p], 0.5).unwrap(), vec![UNMATCHED]);
    }

    #[test]
    fn associate_no_categories() {
        let m = Bitmap::full(3, 3);
        assert_eq!(associate_bitmaps(&[m], &[], 0.5).unwrap(), vec![UNMATCHED]);
    }

    #[test]
    fn associate_tie_goes_to_lowest_category() {
        let m = Bitmap::from_fn(4, 4, |x, _| x < 2);
        let p = vec![Bitmap::from_fn(4, 4, |x, _| x < 3), Bitmap::from_fn(4, 4, |x, _| x < 3)];
        assert_eq!(associate_bitmaps(&[m], &p, 0.5).unwrap(), vec![1]);
    }
}
