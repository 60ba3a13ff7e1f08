//! Concatenated information-channel masks: the first frame is fully visible,
//! every later frame keeps only a small random subset of its patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Mask ratios for frames `2..=N` (frame 1 is implicitly unmasked).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratios: Vec<f64>,
}

impl MaskSpec {
    pub fn new(ratios: Vec<f64>) -> Result<Self> {
        let spec = Self { ratios };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for &r in &self.ratios {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Mask(format!("mask ratio must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        self.ratios.len() + 1
    }
}

/// `max(1, floor(L * (1 - ratio)))`
pub fn visible_count(num_patches: usize, ratio: f64) -> usize {
    let keep = (num_patches as f64 * (1.0 - ratio)).floor() as usize;
    keep.clamp(1, num_patches.max(1))
}

/// Per-frame visible and masked patch indices, both sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub num_patches: usize,
    pub ratios: Vec<f64>,
    pub frames: Vec<FrameMask>,
}

impl MaskPlan {
    /// Plan with every patch of every frame visible.
    pub fn all_visible(num_patches: usize, n_frames: usize) -> Self {
        let full = FrameMask { visible: (0..num_patches).collect(), masked: Vec::new() };
        Self { num_patches, ratios: vec![0.0; n_frames.saturating_sub(1)], frames: vec![full; n_frames] }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Frame mask by 0-based frame position.
    pub fn frame(&self, t: usize) -> Result<&FrameMask> {
        self.frames
            .get(t)
            .ok_or_else(|| Error::Mask(format!("plan covers {} frames, asked for frame {t}", self.frames.len())))
    }

    /// Checks the partition and ordering invariants of every frame.
    pub fn check(&self) -> Result<()> {
        let l = self.num_patches;
        for (t, f) in self.frames.iter().enumerate() {
            let mut seen = vec![0u8; l];
            for &i in f.visible.iter().chain(&f.masked) {
                if i >= l {
                    return Err(Error::Mask(format!("frame {t}: index {i} out of range {l}")));
                }
                seen[i] += 1;
            }
            if seen.iter().any(|&c| c != 1) {
                return Err(Error::Mask(format!("frame {t}: visible/masked sets do not partition 0..{l}")));
            }
            let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
            if !sorted(&f.visible) || !sorted(&f.masked) {
                return Err(Error::Mask(format!("frame {t}: index lists not ascending")));
            }
        }
        if let Some(first) = self.frames.first() {
            if !first.masked.is_empty() {
                return Err(Error::Mask("first frame must be fully visible".into()));
            }
        }
        Ok(())
    }
}

/// Draws a fresh plan: frame 1 fully visible, frame `t >= 2` keeps a uniformly
/// random subset of `visible_count(L, ratio_t)` patches.
pub fn make_mask_plan(num_patches: usize, spec: &MaskSpec, rng: &mut Rng) -> Result<MaskPlan> {
    if num_patches == 0 {
        return Err(Error::Mask("patch count must be at least 1".into()));
    }
    spec.validate()?;
    let mut frames = Vec::with_capacity(spec.n_frames());
    frames.push(FrameMask { visible: (0..num_patches).collect(), masked: Vec::new() });
    for &ratio in &spec.ratios {
        let keep = visible_count(num_patches, ratio);
        let perm = rng.permutation(num_patches);
        let mut visible = perm[..keep].to_vec();
        let mut masked = perm[keep..].to_vec();
        visible.sort_unstable();
        masked.sort_unstable();
        frames.push(FrameMask { visible, masked });
    }
    Ok(MaskPlan { num_patches, ratios: spec.ratios.clone(), frames })
}

/// Rows of `tokens` at the frame's visible indices, in ascending order.
pub fn gather_visible(tokens: &Tensor, plan: &MaskPlan, t: usize) -> Result<Tensor> {
    let f = plan.frame(t)?;
    let c = tokens.last_dim();
    if tokens.rank() != 2 {
        return Err(Error::shape("gather_visible", format!("expected [L, d], got {:?}", tokens.shape())));
    }
    let mut data = Vec::with_capacity(f.visible.len() * c);
    for &i in &f.visible {
        if i >= tokens.rows() {
            return Err(Error::shape("gather_visible", format!("index {i} out of range for {} rows", tokens.rows())));
        }
        data.extend_from_slice(tokens.row(i));
    }
    Tensor::new(vec![f.visible.len(), c], data)
}

/// Full `[L, d]` token set: visible rows in place, every masked row the shared mask token.
pub fn scatter_with_mask_tokens(visible: &Tensor, mask_token: &Tensor, plan: &MaskPlan, t: usize) -> Result<Tensor> {
    let f = plan.frame(t)?;
    let c = mask_token.len();
    if visible.rank() != 2 || visible.shape()[1] != c || visible.shape()[0] != f.visible.len() {
        return Err(Error::shape(
            "scatter_with_mask_tokens",
            format!("got {:?} visible rows for {} indices of width {c}", visible.shape(), f.visible.len()),
        ));
    }
    let mut data = Vec::with_capacity(plan.num_patches * c);
    for _ in 0..plan.num_patches {
        data.extend_from_slice(mask_token.data());
    }
    for (r, &i) in f.visible.iter().enumerate() {
        data[i * c..(i + 1) * c].copy_from_slice(visible.row(r));
    }
    Tensor::new(vec![plan.num_patches, c], data)
}
