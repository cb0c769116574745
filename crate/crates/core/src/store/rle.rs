//! Run-length encoding of binary masks.
//!
//! A region is a list of `(start, length)` runs of set pixels in row-major
//! order. Runs are sorted, non-overlapping and non-adjacent. An empty bitmap
//! encodes as a single zero-length run at offset 0.

use serde::{Deserialize, Serialize};

use crate::bitmap::Bitmap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLengthRegion {
    /// `[height, width]`
    pub size: [u32; 2],
    pub runs: Vec<[u32; 2]>,
}

impl RunLengthRegion {
    pub fn width(&self) -> usize {
        self.size[1] as usize
    }

    pub fn height(&self) -> usize {
        self.size[0] as usize
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.runs.iter().map(|r| r[1] as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }
}

pub fn rle_encode(bitmap: &Bitmap) -> RunLengthRegion {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &b) in bitmap.bits().iter().enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push([s as u32, (i - s) as u32]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push([s as u32, (bitmap.len() - s) as u32]);
    }
    if runs.is_empty() {
        runs.push([0, 0]);
    }
    RunLengthRegion {
        size: [bitmap.height() as u32, bitmap.width() as u32],
        runs,
    }
}

pub fn rle_decode(region: &RunLengthRegion) -> Result<Bitmap> {
    let (w, h) = (region.width(), region.height());
    let total = w * h;
    let mut bitmap = Bitmap::new(w, h);
    let mut cursor = 0usize;
    for (k, &[start, len]) in region.runs.iter().enumerate() {
        let (start, len) = (start as usize, len as usize);
        if len == 0 {
            if region.runs.len() == 1 && start == 0 {
                continue;
            }
            return Err(Error::CorruptRegion(format!("zero-length run at index {k}")));
        }
        if start < cursor {
            return Err(Error::CorruptRegion(format!(
                "run {k} at {start} overlaps or is out of order"
            )));
        }
        let end = start
            .checked_add(len)
            .filter(|&e| e <= total)
            .ok_or_else(|| {
                Error::CorruptRegion(format!("run {k} ({start}+{len}) overflows {total} pixels"))
            })?;
        for i in start..end {
            bitmap.set_index(i, true);
        }
        cursor = end;
    }
    Ok(bitmap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_false_is_single_empty_run() {
        let b = Bitmap::new(5, 3);
        let r = rle_encode(&b);
        assert_eq!(r.runs, vec![[0, 0]]);
        assert_eq!(rle_decode(&r).unwrap(), b);
    }

    #[test]
    fn all_true_is_one_run() {
        let b = Bitmap::full(4, 4);
        let r = rle_encode(&b);
        assert_eq!(r.runs, vec![[0, 16]]);
        assert_eq!(rle_decode(&r).unwrap(), b);
    }

    #[test]
    fn overflow_is_rejected() {
        let r = RunLengthRegion {
            size: [4, 4],
            runs: vec![[10, 7]],
        };
        assert!(matches!(rle_decode(&r), Err(Error::CorruptRegion(_))));
        let r = RunLengthRegion {
            size: [4, 4],
            runs: vec![[4, 4], [6, 1]],
        };
        assert!(matches!(rle_decode(&r), Err(Error::CorruptRegion(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip(w in 1usize..24, h in 1usize..24, seed in any::<u64>(), density in 0.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let b = Bitmap::from_fn(w, h, |_, _| rng.random::<f64>() < density);
            let r = rle_encode(&b);
            prop_assert_eq!(r.area(), b.count());
            prop_assert_eq!(rle_decode(&r).unwrap(), b);
        }
    }
}
