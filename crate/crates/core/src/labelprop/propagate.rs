//! k-nearest-neighbour label propagation on patch grids.

use serde::{Deserialize, Serialize};

use crate::dataio::image::LabelImage;
use crate::error::{Error, Result};

/// Unit-norm feature vectors on an `h x w` patch grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    /// Wraps raw vectors, L2-normalizing each cell (zero vectors stay zero).
    pub fn normalized(h: usize, w: usize, d: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d || d == 0 {
            return Err(Error::shape("FeatureGrid", format!("{} values for {h}x{w}x{d}", data.len())));
        }
        for cell in data.chunks_exact_mut(d) {
            let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                cell.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(Self { h, w, d, data })
    }

    /// Wraps vectors as given, without normalization.
    pub fn raw(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::shape("FeatureGrid", format!("{} values for {h}x{w}x{d}", data.len())));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.d;
        &self.data[i..i + self.d]
    }
}

/// Per-cell class distributions on an `h x w` grid, row-major, `c` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c || c == 0 {
            return Err(Error::shape("LabelMap", format!("{} values for {h}x{w}x{c}", data.len())));
        }
        Ok(Self { h, w, c, data })
    }

    /// One-hot map of hard labels (`classes` must exceed every id).
    pub fn one_hot(labels: &LabelImage, classes: usize) -> Result<Self> {
        let mut data = vec![0.0; labels.width * labels.height * classes];
        for (i, &l) in labels.data.iter().enumerate() {
            if usize::from(l) >= classes {
                return Err(Error::Propagation(format!("label {l} outside {classes} classes")));
            }
            data[i * classes + usize::from(l)] = 1.0;
        }
        Self::new(labels.height, labels.width, classes, data)
    }

    /// Block-averaged one-hot distributions of a pixel label image on a
    /// `patch`-sized grid.
    pub fn from_pixels(labels: &LabelImage, patch: usize, classes: usize) -> Result<Self> {
        if patch == 0 || labels.width % patch != 0 || labels.height % patch != 0 {
            return Err(Error::Propagation(format!(
                "{}x{} labels are not a multiple of patch {patch}",
                labels.width, labels.height
            )));
        }
        let (h, w) = (labels.height / patch, labels.width / patch);
        let mut data = vec![0.0; h * w * classes];
        let share = 1.0 / (patch * patch) as f64;
        for y in 0..labels.height {
            for x in 0..labels.width {
                let l = usize::from(labels.get(y, x));
                if l >= classes {
                    return Err(Error::Propagation(format!("label {l} outside {classes} classes")));
                }
                data[((y / patch) * w + x / patch) * classes + l] += share;
            }
        }
        Self::new(h, w, classes, data)
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    /// Per-cell argmax; ties go to the lowest class id.
    pub fn argmax(&self) -> Vec<u8> {
        self.data
            .chunks_exact(self.c)
            .map(|cell| {
                let mut best = 0;
                for (i, &p) in cell.iter().enumerate() {
                    if p > cell[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn to_labels(&self) -> LabelImage {
        LabelImage { width: self.w, height: self.h, data: self.argmax() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationConfig {
    /// Neighbours kept per target cell.
    pub k: usize,
    pub temperature: f64,
    /// Most recent predicted frames kept as context, besides the first frame.
    pub context: usize,
    /// Chebyshev search radius in grid cells.
    pub radius: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { k: 7, temperature: 0.1, context: 7, radius: 20 }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.k == 0 {
            problems.push("k must be >= 1".to_string());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.radius == 0 {
            problems.push("radius must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Grid cells within Chebyshev distance `r` of `(y, x)`, row-major.
pub fn candidate_cells(h: usize, w: usize, y: usize, x: usize, r: usize) -> Vec<(usize, usize)> {
    let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
    let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
    let mut out = Vec::with_capacity((y1 - y0 + 1) * (x1 - x0 + 1));
    for cy in y0..=y1 {
        for cx in x0..=x1 {
            out.push((cy, cx));
        }
    }
    out
}

/// Context frame indices for target frame `f`: frame 0, then the up to
/// `m` most recent earlier frames.
pub fn context_frames(f: usize, m: usize) -> Vec<usize> {
    let mut out = vec![0];
    out.extend(f.saturating_sub(m).max(1)..f);
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A kept context cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub affinity: f64,
    pub frame: usize,
    /// Row-major grid index.
    pub cell: usize,
}

/// The `k` highest-affinity candidates over all context frames, best first.
/// Ties keep enumeration order (context frames in order, then cells row-major).
pub fn top_k_neighbors(
    query: &[f64],
    features: &[FeatureGrid],
    context: &[usize],
    candidates: &[(usize, usize)],
    k: usize,
    top: &mut Vec<Neighbor>,
) {
    top.clear();
    for &s in context {
        let grid = &features[s];
        for &(cy, cx) in candidates {
            let a = dot(query, grid.cell(cy, cx));
            if top.len() == k && a <= top[k - 1].affinity {
                continue;
            }
            let pos = top.iter().position(|t| a > t.affinity).unwrap_or(top.len());
            top.insert(pos, Neighbor { affinity: a, frame: s, cell: cy * grid.w + cx });
            top.truncate(k);
        }
    }
}

/// Propagates `first` through the sequence. Frame 0 of the output is `first`
/// itself; every later frame is the affinity-weighted average of its top-k
/// context cells' distributions.
pub fn propagate(features: &[FeatureGrid], first: &LabelMap, cfg: &PropagationConfig) -> Result<Vec<LabelMap>> {
    cfg.validate()?;
    let f0 = features.first().ok_or_else(|| Error::Propagation("no frames to propagate over".into()))?;
    let (h, w, d) = (f0.h, f0.w, f0.d);
    if let Some(bad) = features.iter().find(|f| (f.h, f.w, f.d) != (h, w, d)) {
        return Err(Error::Propagation(format!("feature grid {}x{}x{} differs from {h}x{w}x{d}", bad.h, bad.w, bad.d)));
    }
    if (first.h, first.w) != (h, w) {
        return Err(Error::Propagation(format!("first labels {}x{} on a {h}x{w} grid", first.h, first.w)));
    }
    if h == 0 || w == 0 {
        return Err(Error::Propagation("empty grid".into()));
    }
    let c = first.c;
    let mut out: Vec<LabelMap> = vec![first.clone()];
    let mut top: Vec<Neighbor> = Vec::with_capacity(cfg.k + 1);
    for f in 1..features.len() {
        let ctx = context_frames(f, cfg.context);
        let target = &features[f];
        let mut data = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let cands = candidate_cells(h, w, y, x, cfg.radius);
                top_k_neighbors(target.cell(y, x), features, &ctx, &cands, cfg.k, &mut top);
                if top.is_empty() {
                    return Err(Error::Propagation("empty context".into()));
                }
                let amax = top[0].affinity;
                let weights: Vec<f64> = top.iter().map(|t| ((t.affinity - amax) / cfg.temperature).exp()).collect();
                let z: f64 = weights.iter().sum();
                let cell = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
                for (wt, n) in weights.iter().zip(&top) {
                    let src = &out[n.frame].data[n.cell * c..(n.cell + 1) * c];
                    for (o, p) in cell.iter_mut().zip(src) {
                        *o += wt / z * p;
                    }
                }
            }
        }
        out.push(LabelMap::new(h, w, c, data)?);
    }
    Ok(out)
}

/// Nearest-neighbour block upsampling of a grid map to `height x width` pixels.
pub fn upsample_labels(map: &LabelMap, height: usize, width: usize) -> Result<LabelMap> {
    if height % map.h != 0 || width % map.w != 0 {
        return Err(Error::Propagation(format!("{width}x{height} is not a multiple of the {}x{} grid", map.w, map.h)));
    }
    let (sy, sx) = (height / map.h, width / map.w);
    let mut data = Vec::with_capacity(height * width * map.c);
    for y in 0..height {
        for x in 0..width {
            data.extend_from_slice(map.cell(y / sy, x / sx));
        }
    }
    LabelMap::new(height, width, map.c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random_grid(rng: &mut Rng, h: usize, w: usize, d: usize) -> FeatureGrid {
        FeatureGrid::normalized(h, w, d, (0..h * w * d).map(|_| rng.normal()).collect()).unwrap()
    }

    fn random_labels(rng: &mut Rng, h: usize, w: usize, c: usize) -> LabelMap {
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w {
            let raw: Vec<f64> = (0..c).map(|_| rng.uniform() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|v| v / s));
        }
        LabelMap::new(h, w, c, data).unwrap()
    }

    #[test]
    fn single_frame_is_identity() {
        let mut rng = Rng::new(0, 0);
        let f = vec![random_grid(&mut rng, 3, 3, 4)];
        let l = random_labels(&mut rng, 3, 3, 2);
        assert_eq!(propagate(&f, &l, &PropagationConfig::default()).unwrap(), vec![l]);
        assert!(propagate(&[], &random_labels(&mut rng, 3, 3, 2), &PropagationConfig::default()).is_err());
    }

    #[test]
    fn exact_matches_copy_labels() {
        // 4 cells with orthogonal features; frame 1 is frame 0 with cells permuted.
        let basis = |i: usize| (0..4).map(|j| f64::from(u8::from(i == j))).collect::<Vec<_>>();
        let f0 = FeatureGrid::raw(2, 2, 4, (0..4).flat_map(basis).collect()).unwrap();
        let perm = [3, 2, 1, 0];
        let f1 = FeatureGrid::raw(2, 2, 4, perm.iter().flat_map(|&i| basis(i)).collect()).unwrap();
        let labels = LabelImage::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let first = LabelMap::one_hot(&labels, 4).unwrap();
        let cfg = PropagationConfig { k: 1, temperature: 0.1, context: 1, radius: 2 };
        let out = propagate(&[f0, f1], &first, &cfg).unwrap();
        assert_eq!(out[1].argmax(), vec![3, 2, 1, 0]);
        assert_eq!(out[1], LabelMap::one_hot(&LabelImage::new(2, 2, vec![3, 2, 1, 0]).unwrap(), 4).unwrap());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let m = LabelMap::new(1, 2, 3, vec![0.4, 0.4, 0.2, 0.2, 0.4, 0.4]).unwrap();
        assert_eq!(m.argmax(), vec![0, 1]);
    }

    #[test]
    fn upsampling() {
        let mut rng = Rng::new(1, 0);
        let m = random_labels(&mut rng, 2, 3, 2);
        assert_eq!(upsample_labels(&m, 2, 3).unwrap(), m);
        let up = upsample_labels(&m, 4, 6).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                assert_eq!(up.cell(y, x), m.cell(y / 2, x / 2));
            }
        }
        let block: f64 = (0..2).flat_map(|y| (0..2).map(move |x| (y, x))).map(|(y, x)| up.cell(y, x)[1]).sum();
        assert!((block - 4.0 * m.cell(0, 0)[1]).abs() < 1e-15);
        assert!(upsample_labels(&m, 5, 6).is_err());
    }

    #[test]
    fn pixel_labels_to_grid() {
        let labels = LabelImage::new(4, 2, vec![0, 1, 1, 1, 0, 0, 1, 1]).unwrap();
        let m = LabelMap::from_pixels(&labels, 2, 2).unwrap();
        assert_eq!(m.data, vec![0.75, 0.25, 0.0, 1.0]);
    }

    #[test]
    fn context_indices() {
        assert_eq!(context_frames(1, 7), vec![0]);
        assert_eq!(context_frames(5, 2), vec![0, 3, 4]);
        assert_eq!(context_frames(5, 0), vec![0]);
        assert_eq!(context_frames(3, 7), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn distributions_sum_to_one(seed in 0u64..500, k in 1usize..10, m in 0usize..3) {
            let mut rng = Rng::new(seed, 3);
            let feats: Vec<FeatureGrid> = (0..4).map(|_| random_grid(&mut rng, 3, 4, 5)).collect();
            let first = random_labels(&mut rng, 3, 4, 3);
            let cfg = PropagationConfig { k, temperature: 0.2, context: m, radius: 1 };
            for map in propagate(&feats, &first, &cfg).unwrap() {
                for cell in map.data.chunks(3) {
                    prop_assert!((cell.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn radius_monotone(h in 1usize..9, w in 1usize..9, r in 1usize..5, seed in 0u64..100) {
            let mut rng = Rng::new(seed, 0);
            let (y, x) = (rng.below(h), rng.below(w));
            let small = candidate_cells(h, w, y, x, r);
            let big = candidate_cells(h, w, y, x, r + 1);
            prop_assert!(small.iter().all(|c| big.contains(c)));
            prop_assert!(small.len() <= (2 * r + 1) * (2 * r + 1));
        }

        #[test]
        fn context_scale_keeps_neighbor_set(seed in 0u64..300, scale in 0.2f64..5.0) {
            let mut rng = Rng::new(seed, 9);
            let f0 = random_grid(&mut rng, 4, 4, 4);
            let f1 = random_grid(&mut rng, 4, 4, 4);
            let scaled = FeatureGrid::raw(4, 4, 4, f0.data.iter().map(|v| v * scale).collect()).unwrap();
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for y in 0..4 {
                for x in 0..4 {
                    let cands = candidate_cells(4, 4, y, x, 2);
                    top_k_neighbors(f1.cell(y, x), &[f0.clone(), f1.clone()], &[0], &cands, 3, &mut a);
                    top_k_neighbors(f1.cell(y, x), &[scaled.clone(), f1.clone()], &[0], &cands, 3, &mut b);
                    let cells = |v: &[Neighbor]| v.iter().map(|n| n.cell).collect::<Vec<_>>();
                    prop_assert_eq!(cells(&a), cells(&b));
                }
            }
            // With a single neighbour the hard label is the neighbour's label.
            let labels = LabelImage::new(4, 4, (0..16).map(|_| rng.below(3) as u8).collect()).unwrap();
            let first = LabelMap::one_hot(&labels, 3).unwrap();
            let cfg = PropagationConfig { k: 1, temperature: 0.1, context: 0, radius: 2 };
            let base = propagate(&[f0.clone(), f1.clone()], &first, &cfg).unwrap();
            let other = propagate(&[scaled, f1], &first, &cfg).unwrap();
            prop_assert_eq!(base[1].argmax(), other[1].argmax());
        }
    }
}
