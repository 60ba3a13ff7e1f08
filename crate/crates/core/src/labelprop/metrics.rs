//! Region (J) and boundary (F) segmentation scores.

use serde::Serialize;

use crate::dataio::image::LabelImage;
use crate::error::{Error, Result};

/// `ceil(0.008 * diagonal)` pixels.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    (0.008 * ((width * width + height * height) as f64).sqrt()).ceil() as usize
}

/// Intersection over union; two empty masks score 1.
pub fn region_similarity(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground pixels with at least one in-image 4-neighbour in the background.
pub fn boundary(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if !mask[i] {
                continue;
            }
            let off = (y > 0 && !mask[i - width])
                || (y + 1 < height && !mask[i + width])
                || (x > 0 && !mask[i - 1])
                || (x + 1 < width && !mask[i + 1]);
            out[i] = off;
        }
    }
    out
}

/// Morphological dilation by a disk of radius `r`.
pub fn dilate(mask: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !mask[(y * width as isize + x) as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && ny < height as isize && nx < width as isize {
                    out[(ny * width as isize + nx) as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with matches counted within `tolerance` pixels.
/// No boundary on either side scores 1; a boundary on only one side scores 0.
pub fn boundary_measure(pred: &[bool], gt: &[bool], width: usize, height: usize, tolerance: usize) -> f64 {
    let bp = boundary(pred, width, height);
    let bg = boundary(gt, width, height);
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let dp = dilate(&bp, width, height, tolerance);
    let dg = dilate(&bg, width, height, tolerance);
    let matched_p = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count();
    let matched_g = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameScore {
    pub object: u8,
    pub frame: usize,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectScore {
    pub object: u8,
    pub j: f64,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationScore {
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub objects: Vec<ObjectScore>,
    pub frames: Vec<FrameScore>,
}

/// Per-object, per-frame J and F over label images. Objects are the nonzero
/// ids present anywhere in the ground truth. `frame_ids` label the rows
/// (defaults to `0..n`). Means run over objects of per-object frame means.
pub fn jf_metrics(
    pred: &[LabelImage],
    gt: &[LabelImage],
    tolerance: Option<usize>,
    frame_ids: Option<&[usize]>,
) -> Result<SegmentationScore> {
    if pred.len() != gt.len() {
        return Err(Error::Metrics(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
    }
    if let Some(ids) = frame_ids {
        if ids.len() != gt.len() {
            return Err(Error::Metrics(format!("{} frame ids for {} frames", ids.len(), gt.len())));
        }
    }
    for (p, g) in pred.iter().zip(gt) {
        if (p.width, p.height) != (g.width, g.height) {
            return Err(Error::Metrics(format!(
                "prediction {}x{} vs ground truth {}x{}",
                p.width, p.height, g.width, g.height
            )));
        }
    }
    let mut objects: Vec<u8> = gt.iter().flat_map(|g| g.data.iter().copied()).filter(|&l| l > 0).collect();
    objects.sort_unstable();
    objects.dedup();

    let mut frames = Vec::new();
    let mut per_object = Vec::new();
    for &id in &objects {
        let (mut js, mut fs) = (0.0, 0.0);
        for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
            let (pm, gm) = (p.mask_of(id), g.mask_of(id));
            let tol = tolerance.unwrap_or_else(|| default_tolerance(g.width, g.height));
            let j = region_similarity(&pm, &gm);
            let f = boundary_measure(&pm, &gm, g.width, g.height, tol);
            js += j;
            fs += f;
            frames.push(FrameScore { object: id, frame: frame_ids.map_or(i, |ids| ids[i]), j, f });
        }
        let n = gt.len().max(1) as f64;
        per_object.push(ObjectScore { object: id, j: js / n, f: fs / n });
    }
    let (j_mean, f_mean) = if per_object.is_empty() {
        (1.0, 1.0)
    } else {
        let n = per_object.len() as f64;
        (per_object.iter().map(|o| o.j).sum::<f64>() / n, per_object.iter().map(|o| o.f).sum::<f64>() / n)
    };
    Ok(SegmentationScore { j_mean, f_mean, jf_mean: 0.5 * (j_mean + f_mean), objects: per_object, frames })
}
