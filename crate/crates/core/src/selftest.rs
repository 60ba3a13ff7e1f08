//! Property suites shared by the `selftest` command and the acceptance tests.

use std::collections::HashMap;

use serde::Serialize;

use crate::dataio::image::{Image, LabelImage};
use crate::error::{Error, Result};
use crate::labelprop::metrics::{boundary_measure, jf_metrics, region_similarity};
use crate::labelprop::propagate::{propagate, FeatureGrid, LabelMap, PropagationConfig};
use crate::masking::{make_mask_plan, visible_count, MaskPlan, MaskSpec};
use crate::model::{forward, CatMae, ModelConfig};
use crate::numerics::{grad_check, op_suite, GradCheckReport, Graph, Rng, Tensor};
use crate::training::{total_loss_graph, LossSpec};

/// Uniform random frames in `[0, 1)`.
pub fn random_frames(config: &ModelConfig, rng: &mut Rng) -> Vec<Image> {
    (0..config.n_frames)
        .map(|_| {
            let mut img = Image::filled(config.image_size, config.image_size, [0.0; 3]);
            img.data.iter_mut().for_each(|v| *v = rng.uniform());
            img
        })
        .collect()
}

/// Redraws every parameter at unit scale: weights with std `1/sqrt(fan_in)`,
/// gains around 1, biases and tokens with small offsets. At the 0.02-std
/// initialization deep-layer gradients sit near 1e-10, below what central
/// differences resolve.
pub fn well_scaled(model: &CatMae, seed: u64) -> CatMae {
    let mut rng = Rng::new(seed, 7);
    let mut out = model.clone();
    for p in out.params.entries.iter_mut() {
        let shape = p.tensor.shape().to_vec();
        let n = p.tensor.len();
        let data: Vec<f64> = if p.name.ends_with(".w") {
            let std = 1.0 / (shape[0] as f64).sqrt();
            (0..n).map(|_| rng.normal() * std).collect()
        } else if p.name.ends_with(".gain") {
            (0..n).map(|_| 1.0 + 0.2 * rng.normal()).collect()
        } else if p.name.ends_with("token") {
            (0..n).map(|_| rng.normal()).collect()
        } else {
            (0..n).map(|_| 0.1 * rng.normal()).collect()
        };
        p.tensor = Tensor::new(shape, data).expect("same shape");
    }
    out
}

/// Finite-difference check of the total loss over every parameter of the
/// micro model at mask ratio 0.5.
pub fn model_gradient_check(seed: u64, eps: f64) -> Result<GradCheckReport> {
    let config = ModelConfig::micro();
    let model = well_scaled(&CatMae::new(config.clone(), &mut Rng::new(seed, 0))?, seed);
    let plan = make_mask_plan(config.num_patches(), &MaskSpec::new(vec![0.5; 2])?, &mut Rng::new(seed, 1))?;
    let frames = random_frames(&config, &mut Rng::new(seed, 0));
    let loss = LossSpec::default_for(config.n_frames);
    grad_check(
        |g, vars| {
            let traced = model.network(vars).forward(g, &frames, &frames, &plan)?;
            total_loss_graph(g, &traced, &loss)
        },
        &model.params.tensors(),
        eps,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CausalityReport {
    pub trials: usize,
    /// Trials where perturbing the last frame left frame-1 predictions bitwise equal.
    pub future_invariant: usize,
    /// Trials where perturbing frame 0 changed frame-1 predictions.
    pub past_sensitive: usize,
}

/// Random micro models, frames and plans; each trial perturbs the last and
/// the first frame separately and compares the first reconstruction.
pub fn causality(trials: usize, seed: u64) -> Result<CausalityReport> {
    let config = ModelConfig::micro();
    let spec = MaskSpec::new(vec![0.75; config.n_frames - 1])?;
    let mut report = CausalityReport { trials, ..Default::default() };
    for i in 0..trials as u64 {
        let mut rng = Rng::keyed(seed, "causality", i);
        let model = CatMae::new(config.clone(), &mut rng)?;
        let plan = make_mask_plan(config.num_patches(), &spec, &mut rng)?;
        let frames = random_frames(&config, &mut rng);
        let base = forward(&model, &frames, &plan)?.frames[0].prediction.clone();
        let last = config.n_frames - 1;
        let mut future = frames.clone();
        future[last] = random_frames(&config, &mut rng).swap_remove(0);
        let mut past = frames.clone();
        past[0] = random_frames(&config, &mut rng).swap_remove(0);
        let after_future = &forward(&model, &future, &plan)?.frames[0].prediction;
        let after_past = &forward(&model, &past, &plan)?.frames[0].prediction;
        report.future_invariant += usize::from(after_future.data() == base.data());
        report.past_sensitive += usize::from(after_past.data() != base.data());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalityReport {
    /// Largest |d loss / d pixel| over pixels of visible patches in reconstructed frames.
    pub max_visible: f64,
    /// Largest |d loss / d pixel| over pixels of masked patches (should be far from 0).
    pub max_masked: f64,
    pub pixels_checked: usize,
}

/// Central differences of the loss with respect to ground-truth target pixels.
pub fn loss_locality(seed: u64, h: f64) -> Result<LocalityReport> {
    let config = ModelConfig::micro();
    let model = CatMae::new(config.clone(), &mut Rng::new(seed, 0))?;
    let plan = make_mask_plan(config.num_patches(), &MaskSpec::new(vec![0.5; 2])?, &mut Rng::new(seed, 1))?;
    let frames = random_frames(&config, &mut Rng::new(seed, 2));
    let loss_spec = LossSpec::default_for(config.n_frames);
    let loss = |targets: &[Image]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let traced = model.network(&vars).forward(&mut g, &frames, targets, &plan)?;
        let l = total_loss_graph(&mut g, &traced, &loss_spec)?;
        Ok(g.value(l).item())
    };
    let (p, grid) = (config.patch_size, config.grid());
    let mut report = LocalityReport { max_visible: 0.0, max_masked: 0.0, pixels_checked: 0 };
    let mut targets = frames.clone();
    for t in 1..config.n_frames {
        for y in 0..config.image_size {
            for x in 0..config.image_size {
                let patch = (y / p) * grid + x / p;
                let visible = plan.frames[t].visible.contains(&patch);
                // Every visible pixel; one channel of a sparse subset of masked ones.
                let channels: &[usize] = if visible { &[0, 1, 2] } else if (x + y) % 5 == 0 { &[1] } else { &[] };
                for &c in channels {
                    let i = (y * config.image_size + x) * 3 + c;
                    let orig = targets[t].data[i];
                    targets[t].data[i] = orig + h;
                    let up = loss(&targets)?;
                    targets[t].data[i] = orig - h;
                    let down = loss(&targets)?;
                    targets[t].data[i] = orig;
                    let d = ((up - down) / (2.0 * h)).abs();
                    report.pixels_checked += 1;
                    if visible {
                        report.max_visible = report.max_visible.max(d);
                    } else {
                        report.max_masked = report.max_masked.max(d);
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Structural invariants of one plan.
pub fn check_plan(plan: &MaskPlan, ratios: &[f64]) -> Result<()> {
    plan.check()?;
    let l = plan.num_patches;
    let first = &plan.frames[0];
    if first.visible.len() != l || !first.masked.is_empty() {
        return Err(Error::Mask("first frame is not fully visible".into()));
    }
    for (f, &r) in plan.frames[1..].iter().zip(ratios) {
        let mut seen = vec![false; l];
        for &i in f.visible.iter().chain(&f.masked) {
            if i >= l || seen[i] {
                return Err(Error::Mask(format!("patch {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Mask("visible and masked sets do not cover the frame".into()));
        }
        if f.visible.len() != visible_count(l, r) {
            return Err(Error::Mask(format!("{} visible of {l} at ratio {r}", f.visible.len())));
        }
        if !f.visible.windows(2).all(|w| w[0] < w[1]) || !f.masked.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Mask("index lists are not sorted".into()));
        }
    }
    Ok(())
}

/// Partition, count and determinism over `L = 1..=max_l` and the given ratios.
/// Returns the number of plans checked.
pub fn masking_sweep(max_l: usize, ratios: &[f64], seed: u64) -> Result<usize> {
    let mut n = 0;
    for l in 1..=max_l {
        for (ri, &r) in ratios.iter().enumerate() {
            let spec = MaskSpec::new(vec![r; 3])?;
            let key = (l * ratios.len() + ri) as u64;
            let a = make_mask_plan(l, &spec, &mut Rng::keyed(seed, "sweep", key))?;
            let b = make_mask_plan(l, &spec, &mut Rng::keyed(seed, "sweep", key))?;
            if a != b {
                return Err(Error::Mask(format!("plan for L={l}, ratio {r} is not deterministic")));
            }
            check_plan(&a, &spec.ratios)?;
            let expect = ((l as f64) * (1.0 - r)).floor().max(1.0) as usize;
            if a.frames[1].visible.len() != expect {
                return Err(Error::Mask(format!("L={l}, ratio {r}: kept {} expected {expect}", a.frames[1].visible.len())));
            }
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
}

impl ChiSquare {
    /// Within `sigmas` standard deviations of the null mean (`dof`, variance `2 dof`).
    pub fn within(&self, sigmas: f64) -> bool {
        (self.statistic - self.dof as f64).abs() <= sigmas * (2.0 * self.dof as f64).sqrt()
    }
}

/// Goodness of fit of the visible subsets of one masked frame against the
/// uniform distribution over all subsets of that size.
pub fn visible_subset_chi2(l: usize, ratio: f64, draws: usize, seed: u64) -> Result<ChiSquare> {
    let keep = visible_count(l, ratio);
    let spec = MaskSpec::new(vec![ratio])?;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for i in 0..draws as u64 {
        let plan = make_mask_plan(l, &spec, &mut Rng::keyed(seed, "chi2", i))?;
        *counts.entry(plan.frames[1].visible.clone()).or_default() += 1;
    }
    let cells = binomial(l, keep);
    let expected = draws as f64 / cells as f64;
    let observed: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Subsets never drawn contribute `expected` each.
    let statistic = observed + (cells - counts.len()) as f64 * expected;
    Ok(ChiSquare { statistic, dof: cells - 1 })
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub hard_mismatches: usize,
    pub max_soft_error: f64,
}

/// Exhaustive reference propagation: scores every candidate, sorts them all
/// (stable, by descending affinity) and keeps the first `k`.
pub fn brute_force_propagate(features: &[FeatureGrid], first: &LabelMap, cfg: &PropagationConfig) -> Vec<LabelMap> {
    let (h, w, c) = (first.h, first.w, first.c);
    let mut out = vec![first.clone()];
    for f in 1..features.len() {
        let mut ctx = vec![0];
        for s in 1..f {
            if f - s <= cfg.context {
                ctx.push(s);
            }
        }
        let mut data = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let q = features[f].cell(y, x);
                let mut all = Vec::new();
                for &s in &ctx {
                    for cy in 0..h {
                        for cx in 0..w {
                            if cy.abs_diff(y) <= cfg.radius && cx.abs_diff(x) <= cfg.radius {
                                let a: f64 = q.iter().zip(features[s].cell(cy, cx)).map(|(a, b)| a * b).sum();
                                all.push((a, s, cy * w + cx));
                            }
                        }
                    }
                }
                all.sort_by(|a, b| b.0.total_cmp(&a.0));
                all.truncate(cfg.k);
                let amax = all[0].0;
                let z: f64 = all.iter().map(|n| ((n.0 - amax) / cfg.temperature).exp()).sum();
                for &(a, s, cell) in &all {
                    let wt = ((a - amax) / cfg.temperature).exp() / z;
                    for j in 0..c {
                        data[(y * w + x) * c + j] += wt * out[s].data[cell * c + j];
                    }
                }
            }
        }
        out.push(LabelMap { h, w, c, data });
    }
    out
}

/// Random 4x4 instances: `frames` grids of `d`-dim features, three classes.
pub fn propagation_oracle(instances: usize, frames: usize, d: usize, cfg: &PropagationConfig, seed: u64) -> Result<OracleReport> {
    let mut report = OracleReport { instances, hard_mismatches: 0, max_soft_error: 0.0 };
    for i in 0..instances as u64 {
        let mut rng = Rng::keyed(seed, "propagation-oracle", i);
        let features = (0..frames)
            .map(|_| FeatureGrid::normalized(4, 4, d, (0..16 * d).map(|_| rng.normal()).collect()))
            .collect::<Result<Vec<_>>>()?;
        let labels = LabelImage::new(4, 4, (0..16).map(|_| rng.below(3) as u8).collect())?;
        let first = LabelMap::one_hot(&labels, 3)?;
        let got = propagate(&features, &first, cfg)?;
        let want = brute_force_propagate(&features, &first, cfg);
        let mut mismatch = false;
        for (a, b) in got.iter().zip(&want) {
            mismatch |= a.argmax() != b.argmax();
            for (x, y) in a.data.iter().zip(&b.data) {
                report.max_soft_error = report.max_soft_error.max((x - y).abs());
            }
        }
        report.hard_mismatches += usize::from(mismatch);
    }
    Ok(report)
}

/// J and F on hand-countable cases plus symmetry on random label images.
pub fn metric_oracle(seed: u64) -> Result<()> {
    let rect = |x0: usize, w: usize| {
        let mut l = LabelImage::zeros(40, 40);
        for y in 0..10 {
            for x in x0..x0 + w {
                l.data[y * 40 + x] = 1;
            }
        }
        l
    };
    let a = rect(0, 20);
    let same = jf_metrics(&[a.clone()], &[a.clone()], None, None)?;
    if (same.j_mean, same.f_mean) != (1.0, 1.0) {
        return Err(Error::Metrics(format!("identical masks scored J={} F={}", same.j_mean, same.f_mean)));
    }
    // 200-pixel rectangles sharing 100 pixels: 100 / 300.
    let b = rect(10, 20);
    let j = jf_metrics(&[a.clone()], &[b], None, None)?.j_mean;
    if (j - 1.0 / 3.0).abs() > 1e-15 {
        return Err(Error::Metrics(format!("half-overlap J = {j}")));
    }
    let mut rng = Rng::new(seed, 0);
    for _ in 0..50 {
        let p = LabelImage::new(9, 7, (0..63).map(|_| rng.below(3) as u8).collect())?;
        let q = LabelImage::new(9, 7, (0..63).map(|_| rng.below(3) as u8).collect())?;
        for id in 1..3u8 {
            let (pm, qm) = (p.mask_of(id), q.mask_of(id));
            if region_similarity(&pm, &qm) != region_similarity(&qm, &pm) {
                return Err(Error::Metrics("J is not symmetric".into()));
            }
            let (f1, f2) = (boundary_measure(&pm, &qm, 9, 7, 1), boundary_measure(&qm, &pm, 9, 7, 1));
            if (f1 - f2).abs() > 1e-15 {
                return Err(Error::Metrics("F is not symmetric".into()));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn suite(name: &'static str, r: Result<(bool, String)>) -> SuiteResult {
    match r {
        Ok((passed, detail)) => SuiteResult { name, passed, detail },
        Err(e) => SuiteResult { name, passed: false, detail: e.to_string() },
    }
}

/// Per-op gradient checks; failing ops are named in the detail.
pub fn op_gradient_suite(seed: u64, fault: Option<&str>) -> SuiteResult {
    suite(
        "op gradients",
        op_suite(seed, fault).map(|cases| {
            let bad: Vec<String> = cases
                .iter()
                .filter(|(_, r)| r.max_rel_error >= 1e-6)
                .map(|(n, r)| format!("{n} ({:.2e})", r.max_rel_error))
                .collect();
            let detail = if bad.is_empty() { format!("{} ops", cases.len()) } else { format!("failing: {}", bad.join(", ")) };
            (bad.is_empty(), detail)
        }),
    )
}

/// Gradient, causality, masking and metric suites. `fault` flips the sign of
/// one op's backward rule so the gradient suite can be seen to fail.
pub fn run_selftest(seed: u64, fault: Option<&str>) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    out.push(op_gradient_suite(seed, fault));
    out.push(suite(
        "model gradients",
        model_gradient_check(seed, 5e-5).map(|r| (r.max_rel_error < 1e-5, format!("max relative error {:.2e}", r.max_rel_error))),
    ));
    out.push(suite(
        "causality",
        causality(20, seed).map(|r| {
            let ok = r.future_invariant == r.trials && r.past_sensitive + 1 >= r.trials;
            (ok, format!("{}/{} invariant, {}/{} sensitive", r.future_invariant, r.trials, r.past_sensitive, r.trials))
        }),
    ));
    out.push(suite(
        "masking",
        masking_sweep(256, &[0.0, 0.5, 0.9, 0.95, 0.99], seed).and_then(|n| {
            let chi = visible_subset_chi2(16, 0.75, 20_000, seed)?;
            Ok((chi.within(3.0), format!("{n} plans; chi2 {:.1} on {} dof", chi.statistic, chi.dof)))
        }),
    ));
    out.push(suite(
        "propagation oracle",
        propagation_oracle(200, 3, 4, &PropagationConfig { k: 3, temperature: 0.1, context: 1, radius: 2 }, seed)
            .map(|r| (r.hard_mismatches == 0 && r.max_soft_error <= 1e-10, format!("{:?}", r))),
    ));
    out.push(suite("metrics", metric_oracle(seed).map(|()| (true, "J, F oracles".to_string()))));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomials() {
        assert_eq!(binomial(16, 4), 1820);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(1024, 1), 1024);
    }

    #[test]
    fn chi_square_band() {
        assert!(ChiSquare { statistic: 100.0, dof: 100 }.within(3.0));
        assert!(!ChiSquare { statistic: 200.0, dof: 100 }.within(3.0));
    }

    #[test]
    fn oracle_agrees_on_a_few_instances() {
        let cfg = PropagationConfig { k: 3, temperature: 0.1, context: 1, radius: 2 };
        let r = propagation_oracle(20, 4, 3, &cfg, 5).unwrap();
        assert_eq!(r.hard_mismatches, 0);
        assert!(r.max_soft_error <= 1e-10);
    }

    #[test]
    fn sign_flip_fails_the_op_suite() {
        let r = op_gradient_suite(0, Some("softmax"));
        assert!(!r.passed);
        assert!(r.detail.contains("softmax"), "{}", r.detail);
        assert!(op_gradient_suite(0, None).passed);
    }

    #[test]
    fn metric_oracle_passes() {
        metric_oracle(0).unwrap();
    }
}
