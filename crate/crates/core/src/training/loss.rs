//! Scaled sum of per-frame reconstruction losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ReconstructionBatch, TracedFrame};
use crate::numerics::{Graph, Var};

/// Loss scales for frames `2..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub scales: Vec<f64>,
}

impl LossSpec {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Config(format!("loss scales must be finite and nonnegative, got {s}")));
        }
        Ok(Self { scales })
    }

    /// `(0.8, 1.0)` for three frames; all ones otherwise, with 0.8 on the
    /// first reconstructed frame when there are several.
    pub fn default_for(n_frames: usize) -> Self {
        let n = n_frames.saturating_sub(1);
        let mut scales = vec![1.0; n];
        if n >= 2 {
            scales[0] = 0.8;
        }
        Self { scales }
    }

    fn check(&self, frames: usize) -> Result<()> {
        if frames != self.scales.len() {
            return Err(Error::Config(format!(
                "{} loss scales for {} reconstructed frames",
                self.scales.len(),
                frames
            )));
        }
        Ok(())
    }
}

/// `sum_t s_t * mse_t` over an evaluated batch.
pub fn total_loss(batch: &ReconstructionBatch, spec: &LossSpec) -> Result<f64> {
    spec.check(batch.frames.len())?;
    Ok(batch.frames.iter().zip(&spec.scales).map(|(f, s)| s * f.mse).sum())
}

/// Same sum recorded on the graph.
pub fn total_loss_graph(g: &mut Graph, frames: &[TracedFrame], spec: &LossSpec) -> Result<Var> {
    spec.check(frames.len())?;
    let mut acc: Option<Var> = None;
    for (f, &s) in frames.iter().zip(&spec.scales) {
        let term = g.scale(f.mse, s);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Config("no reconstructed frames".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FrameReconstruction;
    use crate::numerics::Tensor;

    fn rec(pred: Vec<f64>, target: Vec<f64>, width: usize) -> FrameReconstruction {
        let rows = pred.len() / width.max(1);
        let p = Tensor::new(vec![rows, width], pred).unwrap();
        let t = Tensor::new(vec![rows, width], target).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(p.clone()), g.constant(t.clone()));
        let m = g.mse(a, b).unwrap();
        FrameReconstruction { t: 1, mse: g.value(m).item(), prediction: p, target: t, cross_attention: None, context: vec![] }
    }

    fn batch_of(mses: &[f64]) -> ReconstructionBatch {
        let frames = mses
            .iter()
            .enumerate()
            .map(|(i, &m)| FrameReconstruction {
                t: i + 1,
                prediction: Tensor::zeros([0, 1]),
                target: Tensor::zeros([0, 1]),
                mse: m,
                cross_attention: None,
                context: vec![],
            })
            .collect();
        ReconstructionBatch { frames }
    }

    #[test]
    fn scaled_sum() {
        let spec = LossSpec::default_for(3);
        assert_eq!(spec.scales, vec![0.8, 1.0]);
        let l = total_loss(&batch_of(&[0.5, 0.25]), &spec).unwrap();
        assert!((l - 0.65).abs() < 1e-15);
        assert!(total_loss(&batch_of(&[0.5]), &spec).is_err());
    }

    #[test]
    fn closed_forms() {
        let same = rec(vec![0.1, -0.2, 0.3, 0.4], vec![0.1, -0.2, 0.3, 0.4], 2);
        assert_eq!(same.mse, 0.0);
        let c = 0.7;
        let shifted = rec(vec![1.0 + c, 2.0 + c, 3.0 + c], vec![1.0, 2.0, 3.0], 3);
        let l = total_loss(&ReconstructionBatch { frames: vec![shifted] }, &LossSpec::new(vec![1.0]).unwrap()).unwrap();
        assert!((l - c * c).abs() < 1e-12);
        let empty = rec(vec![], vec![], 3);
        assert_eq!(empty.mse, 0.0);
    }

    #[test]
    fn permutation_invariant() {
        let a = rec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5], 2);
        let b = rec(vec![5.0, 6.0, 1.0, 2.0, 3.0, 4.0], vec![2.0, 2.5, 0.0, 0.5, 1.0, 1.5], 2);
        assert!((a.mse - b.mse).abs() < 1e-14);
    }

    #[test]
    fn negative_scales_rejected() {
        assert!(LossSpec::new(vec![-0.1]).is_err());
        assert!(LossSpec::new(vec![f64::NAN]).is_err());
    }
}
