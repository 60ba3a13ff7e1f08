//! Segmentation of labelled clips with encoder features, plus baselines and CSV output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::clip::{frame_name, VideoClip};
use crate::dataio::image::{Image, LabelImage};
use crate::error::{Error, Result};
use crate::labelprop::metrics::{jf_metrics, SegmentationScore};
use crate::labelprop::propagate::{propagate, upsample_labels, FeatureGrid, LabelMap, PropagationConfig};
use crate::model::{encoder_features, CatMae};

/// L2-normalized patch features of a fully visible frame.
pub fn extract_features(model: &CatMae, frame: &Image, layer: Option<usize>) -> Result<FeatureGrid> {
    let t = encoder_features(model, frame, layer)?;
    let g = model.config.grid();
    FeatureGrid::normalized(g, g, t.last_dim(), t.into_data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub propagation: PropagationConfig,
    /// Encoder block whose output serves as features (`None`: final norm).
    pub feature_layer: Option<usize>,
    /// Boundary tolerance in pixels (`None`: 0.8% of the diagonal, rounded up).
    pub boundary_tolerance: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { propagation: PropagationConfig::default(), feature_layer: None, boundary_tolerance: None }
    }
}

fn first_labels(clip: &VideoClip) -> Result<&[LabelImage]> {
    match &clip.labels {
        Some(l) if l.len() == clip.len() => Ok(l),
        Some(l) => Err(Error::Metrics(format!("clip {}: {} label frames for {} frames", clip.id, l.len(), clip.len()))),
        None => Err(Error::Metrics(format!("clip {} has no labels", clip.id))),
    }
}

/// Propagates the first frame's labels through the clip with the model's
/// features; returns one pixel label image per frame (frame 0 is the input).
pub fn segment_clip(model: &CatMae, clip: &VideoClip, cfg: &EvalConfig) -> Result<Vec<LabelImage>> {
    let labels = first_labels(clip)?;
    let size = model.config.image_size;
    if (clip.width(), clip.height()) != (size, size) {
        return Err(Error::shape(
            "segment_clip",
            format!("clip {} is {}x{}, model expects {size}x{size}", clip.id, clip.width(), clip.height()),
        ));
    }
    let classes = usize::from(labels.iter().map(LabelImage::max_label).max().unwrap_or(0)) + 1;
    let features = clip
        .frames
        .iter()
        .map(|f| extract_features(model, f, cfg.feature_layer))
        .collect::<Result<Vec<_>>>()?;
    let first = LabelMap::from_pixels(&labels[0], model.config.patch_size, classes)?;
    let maps = propagate(&features, &first, &cfg.propagation)?;
    let mut out = vec![labels[0].clone()];
    for m in &maps[1..] {
        out.push(upsample_labels(m, clip.height(), clip.width())?.to_labels());
    }
    Ok(out)
}

/// Frame-0 labels repeated over the whole clip.
pub fn static_copy(clip: &VideoClip) -> Result<Vec<LabelImage>> {
    let labels = first_labels(clip)?;
    Ok(vec![labels[0].clone(); clip.len()])
}

/// Scores predictions against the clip's labels over frames `1..T`.
pub fn score_clip(clip: &VideoClip, predictions: &[LabelImage], tolerance: Option<usize>) -> Result<SegmentationScore> {
    let labels = first_labels(clip)?;
    if predictions.len() != labels.len() {
        return Err(Error::Metrics(format!("{} predictions for {} frames", predictions.len(), labels.len())));
    }
    let ids: Vec<usize> = (1..labels.len()).collect();
    jf_metrics(&predictions[1..], &labels[1..], tolerance, Some(&ids))
}

/// Scores for one clip under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipResult {
    pub clip_id: String,
    pub score: SegmentationScore,
}

/// Mean over clips of `j_mean`, `f_mean` and `jf_mean`.
pub fn dataset_means(results: &[ClipResult]) -> (f64, f64, f64) {
    let n = results.len().max(1) as f64;
    let j = results.iter().map(|r| r.score.j_mean).sum::<f64>() / n;
    let f = results.iter().map(|r| r.score.f_mean).sum::<f64>() / n;
    (j, f, 0.5 * (j + f))
}

pub fn evaluate_dataset(model: &CatMae, clips: &[VideoClip], cfg: &EvalConfig) -> Result<Vec<ClipResult>> {
    clips
        .iter()
        .map(|c| {
            let pred = segment_clip(model, c, cfg)?;
            Ok(ClipResult { clip_id: c.id.clone(), score: score_clip(c, &pred, cfg.boundary_tolerance)? })
        })
        .collect()
}

pub fn evaluate_static_copy(clips: &[VideoClip], tolerance: Option<usize>) -> Result<Vec<ClipResult>> {
    clips
        .iter()
        .map(|c| Ok(ClipResult { clip_id: c.id.clone(), score: score_clip(c, &static_copy(c)?, tolerance)? }))
        .collect()
}

/// `video,object,frame,J,F` rows.
pub fn scores_csv(results: &[ClipResult]) -> String {
    let mut s = String::from("video,object,frame,J,F\n");
    for r in results {
        for f in &r.score.frames {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6}", r.clip_id, f.object, f.frame, f.j, f.f);
        }
    }
    s
}

/// Writes predicted masks as paletted PNGs under `<dir>/<clip_id>/`.
pub fn save_predictions(dir: &Path, clip_id: &str, predictions: &[LabelImage]) -> Result<()> {
    let d = dir.join(clip_id);
    fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    for (i, p) in predictions.iter().enumerate() {
        p.save_png(&d.join(frame_name(i)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{gen_synthetic, SynthConfig};
    use crate::model::ModelConfig;
    use crate::numerics::Rng;

    #[test]
    fn untrained_model_gives_valid_grids() {
        let config = ModelConfig::micro();
        let model = CatMae::new(config.clone(), &mut Rng::new(0, 0)).unwrap();
        let clip = gen_synthetic("s", &SynthConfig::random(16, 16, 4, 1, &mut Rng::new(1, 0))).unwrap();
        let a = extract_features(&model, &clip.frames[0], None).unwrap();
        let b = extract_features(&model, &clip.frames[0], None).unwrap();
        assert_eq!(a, b);
        for cell in a.data.chunks(a.d) {
            assert!((cell.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let pred = segment_clip(&model, &clip, &EvalConfig::default()).unwrap();
        assert_eq!(pred.len(), 4);
        let s = score_clip(&clip, &pred, None).unwrap();
        assert!((0.0..=1.0).contains(&s.j_mean));
        assert!(s.frames.iter().all(|f| f.frame >= 1));
    }

    #[test]
    fn static_copy_is_perfect_on_static_clips() {
        let mut cfg = SynthConfig::random(16, 16, 3, 2, &mut Rng::new(2, 0));
        for s in cfg.shapes.iter_mut() {
            s.vx = 0.0;
            s.vy = 0.0;
        }
        let clip = gen_synthetic("still", &cfg).unwrap();
        let r = evaluate_static_copy(&[clip], None).unwrap();
        assert_eq!(dataset_means(&r), (1.0, 1.0, 1.0));
        let csv = scores_csv(&r);
        assert!(csv.starts_with("video,object,frame,J,F\nstill,"));
    }

    #[test]
    fn unlabelled_clip_rejected() {
        let clip = VideoClip::new("u", vec![Image::filled(16, 16, [0.0; 3]); 2]).unwrap();
        assert!(static_copy(&clip).is_err());
    }
}
