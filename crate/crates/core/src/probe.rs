//! Correspondence probe: does decoder cross-attention from a masked patch on a
//! moving shape point back at the same shape in the first frame?

use serde::Serialize;

use crate::dataio::clip::VideoClip;
use crate::dataio::image::LabelImage;
use crate::dataio::sampling::{sample_sequence, ClipSpec};
use crate::error::{Error, Result};
use crate::masking::{make_mask_plan, MaskSpec};
use crate::model::{extract_cross_attention, CatMae};
use crate::numerics::Rng;

/// Label covering at least half of each patch, or 0.
pub fn patch_majority(labels: &LabelImage, patch: usize) -> Vec<u8> {
    let (gh, gw) = (labels.height / patch, labels.width / patch);
    let mut out = vec![0; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut counts = [0usize; 256];
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    counts[usize::from(labels.get(y, x))] += 1;
                }
            }
            let (id, n) = counts.iter().enumerate().skip(1).max_by_key(|(i, &n)| (n, std::cmp::Reverse(*i))).unwrap();
            if 2 * n >= patch * patch {
                out[gy * gw + gx] = id as u8;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProbeResult {
    /// Masked query patches of reconstructed frames lying on a moving shape.
    pub queries: usize,
    /// Queries whose first-frame argmax cell lies on the same shape.
    pub hits: usize,
    /// Mean fraction of first-frame cells covered by the query's shape
    /// (the hit rate of attention that ignores content).
    pub chance: f64,
    /// Largest deviation of any attention row sum from 1.
    pub max_row_error: f64,
}

impl ProbeResult {
    pub fn hit_rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.hits as f64 / self.queries as f64
        }
    }
}

/// Samples one sequence and mask per clip and scores the masked queries of
/// every reconstructed frame against the first frame.
pub fn attention_correspondence(
    model: &CatMae,
    clips: &[VideoClip],
    spec: &ClipSpec,
    mask: &MaskSpec,
    seed: u64,
) -> Result<ProbeResult> {
    let patch = model.config.patch_size;
    let n_patches = model.config.num_patches();
    let mut out = ProbeResult::default();
    let mut chance_sum = 0.0;
    for (ci, clip) in clips.iter().enumerate() {
        let labels = clip.labels.as_ref().ok_or_else(|| Error::Metrics(format!("clip {} has no labels", clip.id)))?;
        let seq = sample_sequence(clip, spec, &mut Rng::keyed(seed, "probe-sequence", ci as u64))?;
        let plan = make_mask_plan(n_patches, mask, &mut Rng::keyed(seed, "probe-mask", ci as u64))?;
        let first = patch_majority(&labels[seq.indices[0]], patch);
        for t in 1..seq.len() {
            let target = patch_majority(&labels[seq.indices[t]], patch);
            for &q in &plan.frames[t].masked {
                let id = target[q];
                if id == 0 {
                    continue;
                }
                let maps = extract_cross_attention(model, &seq.frames, &plan, q, t)?;
                out.max_row_error = out.max_row_error.max((maps.total() - 1.0).abs());
                let grid0 = &maps.frames.iter().find(|(f, _)| *f == 0).expect("first frame in context").1;
                let mut best = 0;
                for (i, w) in grid0.iter().enumerate() {
                    if w.unwrap_or(f64::NEG_INFINITY) > grid0[best].unwrap_or(f64::NEG_INFINITY) {
                        best = i;
                    }
                }
                out.queries += 1;
                out.hits += usize::from(first[best] == id);
                chance_sum += first.iter().filter(|&&l| l == id).count() as f64 / first.len() as f64;
            }
        }
    }
    if out.queries > 0 {
        out.chance = chance_sum / out.queries as f64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_cells() {
        let mut l = LabelImage::zeros(4, 4);
        // Top-left 2x2 fully labelled 1, top-right half labelled 2.
        for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (0, 2), (1, 2)] {
            l.data[y * 4 + x] = if x < 2 { 1 } else { 2 };
        }
        assert_eq!(patch_majority(&l, 2), vec![1, 2, 0, 0]);
    }
}
