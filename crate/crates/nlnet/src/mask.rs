//! Summation-index masks: restrict which key positions each query may sum
//! over, realizing the spacetime / space-only / time-only variants.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Which positions the non-local summation index j may range over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// All positions: j enumerates the full spacetime grid.
    Spacetime,
    /// j restricted to the same frame as i.
    SpaceOnly,
    /// j restricted to the same spatial location as i.
    TimeOnly,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Spacetime => "spacetime",
            MaskMode::SpaceOnly => "space_only",
            MaskMode::TimeOnly => "time_only",
        }
    }
}

/// Boolean [N x M] matrix over (query grid t*h*w) x (key grid t*hk*wk), true
/// where the pair is allowed. Returns None for the spacetime mode, which
/// needs no masking.
pub fn build_mask(
    mode: MaskMode,
    t: usize,
    h: usize,
    w: usize,
    subsample: usize,
) -> Result<Option<Arc<Vec<bool>>>> {
    if mode == MaskMode::Spacetime {
        return Ok(None);
    }
    if mode == MaskMode::TimeOnly && subsample != 1 {
        return Err(Error::config(
            "time_only mask cannot be combined with spatial subsampling: \
             pooling destroys the spatial-position identity the mask keys on",
        ));
    }
    let (hk, wk) = (h / subsample, w / subsample);
    let n = t * h * w;
    let m = t * hk * wk;
    let mut mask = vec![false; n * m];
    for i in 0..n {
        let (ti, hi, wi) = (i / (h * w), (i / w) % h, i % w);
        for j in 0..m {
            let (tj, hj, wj) = (j / (hk * wk), (j / wk) % hk, j % wk);
            mask[i * m + j] = match mode {
                MaskMode::Spacetime => true,
                MaskMode::SpaceOnly => ti == tj,
                MaskMode::TimeOnly => (hi, wi) == (hj, wj),
            };
        }
    }
    Ok(Some(Arc::new(mask)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacetime_needs_no_mask() {
        assert!(build_mask(MaskMode::Spacetime, 2, 4, 4, 2).unwrap().is_none());
    }

    #[test]
    fn space_only_row_counts() {
        let m = build_mask(MaskMode::SpaceOnly, 2, 2, 2, 1).unwrap().unwrap();
        // every query keeps exactly h*w keys
        for i in 0..8 {
            let kept = (0..8).filter(|&j| m[i * 8 + j]).count();
            assert_eq!(kept, 4);
        }
    }

    #[test]
    fn time_only_rejects_subsampling() {
        assert!(build_mask(MaskMode::TimeOnly, 2, 4, 4, 2).is_err());
    }
}
