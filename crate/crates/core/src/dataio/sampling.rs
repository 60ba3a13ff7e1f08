//! Frame sampling, shared spatial augmentation and temporal reversal.

use serde::{Deserialize, Serialize};

use crate::dataio::clip::VideoClip;
use crate::dataio::image::Image;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Inclusive range of frame-index gaps between two consecutive sampled frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRange {
    pub lo: usize,
    pub hi: usize,
}

impl GapRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, gap: usize) -> bool {
        (self.lo..=self.hi).contains(&gap)
    }
}

/// RandomResizeCrop parameters: square crops covering a uniformly drawn
/// fraction of the frame area, resized to `output_size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub output_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub n_frames: usize,
    pub gap_ranges: Vec<GapRange>,
    pub crop: CropConfig,
    pub flip_prob: f64,
    pub vire_prob: f64,
}

impl ClipSpec {
    /// Three frames, gaps `[4,16]-[4,16]`, crop scale `[0.5, 1.0]`, flip 0.5, reversal 0.5.
    pub fn default_for(output_size: usize) -> Self {
        Self {
            n_frames: 3,
            gap_ranges: vec![GapRange::new(4, 16); 2],
            crop: CropConfig { output_size, scale_min: 0.5, scale_max: 1.0 },
            flip_prob: 0.5,
            vire_prob: 0.5,
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::Config(format!("n_frames must be >= 2, got {}", self.n_frames)));
        }
        if self.gap_ranges.len() != self.n_frames - 1 {
            return Err(Error::Config(format!(
                "{} frames need {} gap ranges, got {}",
                self.n_frames,
                self.n_frames - 1,
                self.gap_ranges.len()
            )));
        }
        for g in &self.gap_ranges {
            if g.lo < 1 || g.lo > g.hi {
                return Err(Error::Config(format!("invalid gap range [{}, {}]", g.lo, g.hi)));
            }
        }
        if patch_size == 0 || self.crop.output_size == 0 || self.crop.output_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "crop size {} is not a multiple of patch size {patch_size}",
                self.crop.output_size
            )));
        }
        let c = &self.crop;
        if !(c.scale_min > 0.0 && c.scale_min <= c.scale_max && c.scale_max <= 1.0) {
            return Err(Error::Config(format!("invalid crop scale range [{}, {}]", c.scale_min, c.scale_max)));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("vire_prob", self.vire_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Shortest clip that admits a sample: `1 + sum of minimum gaps`.
    pub fn min_clip_len(&self) -> usize {
        1 + self.gap_ranges.iter().map(|g| g.lo).sum::<usize>()
    }
}

/// Crop rectangle in source pixel coordinates (possibly fractional).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub clip_id: String,
    pub frames: Vec<Image>,
    pub indices: Vec<usize>,
    pub reversed: bool,
    /// Recorded once per sequence; applies to every frame.
    pub crop: Option<CropRect>,
    pub flipped: bool,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Consecutive absolute index differences.
    pub fn gaps(&self) -> Vec<usize> {
        self.indices.windows(2).map(|w| w[0].abs_diff(w[1])).collect()
    }
}

/// Picks `n_frames` chronologically ordered frames with per-adjacency gaps drawn
/// uniformly from each range and a uniformly drawn start position.
///
/// Gap draws whose total does not fit the clip are rejected and redrawn, so the
/// result is uniform over all gap tuples that fit.
pub fn sample_sequence(clip: &VideoClip, spec: &ClipSpec, rng: &mut Rng) -> Result<FrameSequence> {
    let required = spec.min_clip_len();
    if clip.len() < required {
        return Err(Error::ClipTooShort { len: clip.len(), required });
    }
    let span_max = clip.len() - 1;
    let gaps = loop {
        let gaps: Vec<usize> = spec.gap_ranges.iter().map(|g| rng.int_inclusive(g.lo, g.hi)).collect();
        if gaps.iter().sum::<usize>() <= span_max {
            break gaps;
        }
    };
    let span: usize = gaps.iter().sum();
    let start = rng.int_inclusive(0, span_max - span);
    let mut indices = Vec::with_capacity(spec.n_frames);
    indices.push(start);
    for g in &gaps {
        indices.push(indices.last().unwrap() + g);
    }
    Ok(FrameSequence {
        clip_id: clip.id.clone(),
        frames: indices.iter().map(|&i| clip.frames[i].clone()).collect(),
        indices,
        reversed: false,
        crop: None,
        flipped: false,
    })
}

/// Bilinear sample at continuous source coordinates with edge clamping.
fn bilinear(img: &Image, y: f64, x: f64) -> [f64; 3] {
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
    let mut out = [0.0; 3];
    for ch in 0..3 {
        let top = a[ch] + fx * (b[ch] - a[ch]);
        let bot = c[ch] + fx * (d[ch] - c[ch]);
        out[ch] = top + fy * (bot - top);
    }
    out
}

/// Resamples `rect` of `img` to a `size x size` image.
pub fn crop_resize(img: &Image, rect: &CropRect, size: usize) -> Image {
    let mut out = Image::filled(size, size, [0.0; 3]);
    let sx = rect.width / size as f64;
    let sy = rect.height / size as f64;
    for i in 0..size {
        let y = rect.y + (i as f64 + 0.5) * sy - 0.5;
        for j in 0..size {
            let x = rect.x + (j as f64 + 0.5) * sx - 0.5;
            out.set_pixel(i, j, bilinear(img, y, x));
        }
    }
    out
}

/// Draws one crop and one flip decision and applies them to every frame.
pub fn augment(seq: &FrameSequence, spec: &ClipSpec, rng: &mut Rng) -> Result<FrameSequence> {
    let first = seq.frames.first().ok_or_else(|| Error::DegenerateCrop("empty sequence".into()))?;
    let (w, h) = (first.width as f64, first.height as f64);
    let c = &spec.crop;
    let scale = if c.scale_max > c.scale_min { rng.uniform_range(c.scale_min, c.scale_max) } else { c.scale_min };
    let side = (scale * w * h).sqrt().min(w).min(h);
    if !(side >= 1.0) {
        return Err(Error::DegenerateCrop(format!("scale {scale} of {w}x{h} gives a {side:.3}-pixel crop")));
    }
    let x = if w > side { rng.uniform_range(0.0, w - side) } else { 0.0 };
    let y = if h > side { rng.uniform_range(0.0, h - side) } else { 0.0 };
    let rect = CropRect { x, y, width: side, height: side };
    let flipped = rng.bernoulli(spec.flip_prob);
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let out = crop_resize(f, &rect, c.output_size);
            if flipped {
                out.flip_horizontal()
            } else {
                out
            }
        })
        .collect();
    Ok(FrameSequence {
        clip_id: seq.clip_id.clone(),
        frames,
        indices: seq.indices.clone(),
        reversed: seq.reversed,
        crop: Some(rect),
        flipped: seq.flipped ^ flipped,
    })
}

/// Reverses frame order, indices and toggles the `reversed` flag.
pub fn reverse(seq: &FrameSequence) -> FrameSequence {
    let mut out = seq.clone();
    out.frames.reverse();
    out.indices.reverse();
    out.reversed = !seq.reversed;
    out
}

/// With probability `p`, reverses the sequence in time.
pub fn vire_reverse(seq: FrameSequence, p: f64, rng: &mut Rng) -> FrameSequence {
    if rng.bernoulli(p) {
        reverse(&seq)
    } else {
        seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_clip(len: usize, size: usize) -> VideoClip {
        let frames = (0..len)
            .map(|t| {
                let mut img = Image::filled(size, size, [0.0; 3]);
                for y in 0..size {
                    for x in 0..size {
                        img.set_pixel(y, x, [x as f64 / size as f64, y as f64 / size as f64, t as f64 / len as f64]);
                    }
                }
                img
            })
            .collect();
        VideoClip::new("ramp", frames).unwrap()
    }

    #[test]
    fn gaps_within_ranges() {
        let clip = ramp_clip(100, 4);
        let spec = ClipSpec::default_for(4);
        let mut rng = Rng::new(1, 0);
        for _ in 0..500 {
            let s = sample_sequence(&clip, &spec, &mut rng).unwrap();
            assert!(s.gaps().iter().all(|&g| (4..=16).contains(&g)));
            assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
            assert!(*s.indices.last().unwrap() < 100);
        }
    }

    #[test]
    fn forced_minimal_sample() {
        let clip = ramp_clip(9, 4);
        let spec = ClipSpec::default_for(4);
        let s = sample_sequence(&clip, &spec, &mut Rng::new(2, 0)).unwrap();
        assert_eq!(s.indices, vec![0, 4, 8]);
    }

    #[test]
    fn too_short_names_minimum() {
        let clip = ramp_clip(8, 4);
        let err = sample_sequence(&clip, &ClipSpec::default_for(4), &mut Rng::new(2, 0)).unwrap_err();
        assert!(matches!(err, Error::ClipTooShort { len: 8, required: 9 }));
        assert!(err.to_string().contains("at least 9"));
    }

    #[test]
    fn gap_distribution_is_uniform() {
        let clip = ramp_clip(100, 2);
        let spec = ClipSpec::default_for(2);
        let mut rng = Rng::new(3, 0);
        let mut counts = [0usize; 13];
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_sequence(&clip, &spec, &mut rng).unwrap();
            counts[s.gaps()[0] - 4] += 1;
        }
        let expected = draws as f64 / 13.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square, 12 degrees of freedom, p = 0.001
        assert!(chi2 < 32.91, "chi2 = {chi2}");
    }

    #[test]
    fn identity_augmentation() {
        let clip = ramp_clip(20, 8);
        let mut spec = ClipSpec::default_for(8);
        spec.flip_prob = 0.0;
        spec.crop.scale_min = 1.0;
        spec.crop.scale_max = 1.0;
        let seq = sample_sequence(&clip, &spec, &mut Rng::new(4, 0)).unwrap();
        let aug = augment(&seq, &spec, &mut Rng::new(4, 1)).unwrap();
        for (a, b) in aug.frames.iter().zip(&seq.frames) {
            let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
        assert!(!aug.flipped);
    }

    #[test]
    fn flip_mirrors_every_frame() {
        let clip = ramp_clip(20, 8);
        let mut spec = ClipSpec::default_for(8);
        spec.flip_prob = 1.0;
        spec.crop.scale_min = 1.0;
        let seq = sample_sequence(&clip, &spec, &mut Rng::new(4, 0)).unwrap();
        let aug = augment(&seq, &spec, &mut Rng::new(4, 1)).unwrap();
        assert!(aug.flipped);
        for (a, b) in aug.frames.iter().zip(&seq.frames) {
            for y in 0..8 {
                for x in 0..8 {
                    let (p, q) = (a.pixel(y, x), b.pixel(y, 7 - x));
                    assert!((0..3).all(|c| (p[c] - q[c]).abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn shared_crop_preserves_relative_shift() {
        let size = 64;
        let pattern = |x: isize, y: isize| ((x as f64 * 0.37).sin() + (y as f64 * 0.23).cos()) * 0.25 + 0.5;
        let make = |shift: isize| {
            let mut img = Image::filled(size, size, [0.0; 3]);
            for y in 0..size {
                for x in 0..size {
                    let v = pattern(x as isize - shift, y as isize);
                    img.set_pixel(y, x, [v, 1.0 - v, 0.5]);
                }
            }
            img
        };
        let seq = FrameSequence {
            clip_id: "s".into(),
            frames: vec![make(0), make(4)],
            indices: vec![0, 1],
            reversed: false,
            crop: None,
            flipped: false,
        };
        let area = (48.0 * 48.0) / (64.0 * 64.0);
        let spec = ClipSpec {
            n_frames: 2,
            gap_ranges: vec![GapRange::new(1, 1)],
            crop: CropConfig { output_size: 48, scale_min: area, scale_max: area },
            flip_prob: 0.0,
            vire_prob: 0.0,
        };
        for seed in 0..5 {
            let aug = augment(&seq, &spec, &mut Rng::new(seed, 9)).unwrap();
            let rect = aug.crop.unwrap();
            assert!((rect.width - 48.0).abs() < 1e-9);
            let (a, b) = (&aug.frames[0], &aug.frames[1]);
            for y in 0..48 {
                for x in 4..44 {
                    let (p, q) = (a.pixel(y, x - 4), b.pixel(y, x));
                    assert!((0..3).all(|c| (p[c] - q[c]).abs() < 1e-9), "seed {seed} ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn degenerate_crop_rejected() {
        let seq = FrameSequence {
            clip_id: "t".into(),
            frames: vec![Image::filled(2, 2, [0.0; 3]); 2],
            indices: vec![0, 1],
            reversed: false,
            crop: None,
            flipped: false,
        };
        let spec = ClipSpec {
            n_frames: 2,
            gap_ranges: vec![GapRange::new(1, 1)],
            crop: CropConfig { output_size: 2, scale_min: 0.1, scale_max: 0.1 },
            flip_prob: 0.0,
            vire_prob: 0.0,
        };
        assert!(matches!(augment(&seq, &spec, &mut Rng::new(0, 0)), Err(Error::DegenerateCrop(_))));
    }

    #[test]
    fn vire_cases() {
        let clip = ramp_clip(40, 2);
        let spec = ClipSpec::default_for(2);
        let mut seq = sample_sequence(&clip, &spec, &mut Rng::new(5, 0)).unwrap();
        seq.indices = vec![10, 18, 30];
        seq.frames = seq.indices.iter().map(|&i| clip.frames[i].clone()).collect();
        let mut rng = Rng::new(5, 1);
        assert_eq!(vire_reverse(seq.clone(), 0.0, &mut rng), seq);
        let r = vire_reverse(seq.clone(), 1.0, &mut rng);
        assert_eq!(r.indices, vec![30, 18, 10]);
        assert!(r.reversed);
        assert_eq!(r.frames[0], clip.frames[30]);
        assert_eq!(vire_reverse(r, 1.0, &mut rng), seq);
    }

    #[test]
    fn spec_validation() {
        let mut spec = ClipSpec::default_for(64);
        assert!(spec.validate(16).is_ok());
        assert!(spec.validate(24).is_err());
        spec.gap_ranges[0] = GapRange::new(0, 3);
        assert!(spec.validate(16).is_err());
        spec.gap_ranges = vec![GapRange::new(1, 2)];
        assert!(spec.validate(16).is_err());
    }
}
