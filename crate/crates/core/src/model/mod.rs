//! Siamese ViT encoder with a cross-attending reconstruction decoder.

pub mod config;
pub mod network;
pub mod params;
pub mod posembed;

pub use config::{default_decoder_heads, ModelConfig};
pub use network::{
    encoder_features, extract_cross_attention, forward, masked_targets, AttentionMaps, CatMae, FrameReconstruction,
    Network, ReconstructionBatch, TracedFrame,
};
pub use params::{Layout, Param, ParamStore};
pub use posembed::sincos_2d;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::image::Image;
    use crate::masking::{make_mask_plan, MaskPlan, MaskSpec};
    use crate::numerics::{Graph, Rng};

    fn frames(config: &ModelConfig, seed: u64) -> Vec<Image> {
        let mut rng = Rng::new(seed, 0);
        (0..config.n_frames)
            .map(|_| {
                let mut img = Image::filled(config.image_size, config.image_size, [0.0; 3]);
                for v in img.data.iter_mut() {
                    *v = rng.uniform();
                }
                img
            })
            .collect()
    }

    fn plan(config: &ModelConfig, ratio: f64, seed: u64) -> MaskPlan {
        let spec = MaskSpec::new(vec![ratio; config.n_frames - 1]).unwrap();
        make_mask_plan(config.num_patches(), &spec, &mut Rng::new(seed, 1)).unwrap()
    }

    #[test]
    fn forward_shapes() {
        let config = ModelConfig::micro();
        let model = CatMae::new(config.clone(), &mut Rng::new(0, 0)).unwrap();
        let plan = plan(&config, 0.75, 3);
        let batch = forward(&model, &frames(&config, 1), &plan).unwrap();
        assert_eq!(batch.frames.len(), config.n_frames - 1);
        for f in &batch.frames {
            let m = plan.frames[f.t].masked.len();
            assert_eq!(f.prediction.shape(), &[m, config.patch_dim()]);
            assert_eq!(f.target.shape(), f.prediction.shape());
            assert!(f.mse.is_finite() && f.mse > 0.0);
        }
    }

    #[test]
    fn parameters_shared_across_frames() {
        // One copy of every tensor regardless of the frame count.
        let a = ModelConfig { n_frames: 2, ..ModelConfig::micro() };
        let b = ModelConfig { n_frames: 5, ..ModelConfig::micro() };
        let pa = CatMae::new(a, &mut Rng::new(0, 0)).unwrap().params;
        let pb = CatMae::new(b, &mut Rng::new(0, 0)).unwrap().params;
        assert_eq!(pa.numel(), pb.numel());
        assert_eq!(pa, pb);
    }

    #[test]
    fn decode_first_frame_is_an_error() {
        let config = ModelConfig::micro();
        let model = CatMae::new(config.clone(), &mut Rng::new(0, 0)).unwrap();
        let plan = plan(&config, 0.75, 3);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let net = model.network(&vars);
        let imgs = frames(&config, 2);
        let lat = net.encode_frame(&mut g, &imgs[0], &plan, 0).unwrap();
        assert!(net.decode_frame(&mut g, 0, &[lat], &plan).is_err());
    }

    #[test]
    fn cross_attention_covers_only_earlier_visible_patches() {
        let config = ModelConfig::micro();
        let model = CatMae::new(config.clone(), &mut Rng::new(4, 0)).unwrap();
        let plan = plan(&config, 0.75, 5);
        let imgs = frames(&config, 6);
        let t = config.n_frames - 1;
        let q = plan.frames[t].masked[0];
        let maps = extract_cross_attention(&model, &imgs, &plan, q, t).unwrap();
        assert_eq!(maps.frames.len(), t);
        assert!((maps.total() - 1.0).abs() < 1e-9);
        for (s, grid) in &maps.frames {
            for (i, cell) in grid.iter().enumerate() {
                assert_eq!(cell.is_some(), plan.frames[*s].visible.contains(&i));
            }
        }
        let visible_q = plan.frames[t].visible[0];
        assert!(extract_cross_attention(&model, &imgs, &plan, visible_q, t).is_err());
    }

    #[test]
    fn later_frames_do_not_affect_earlier_reconstructions() {
        let config = ModelConfig::micro();
        let model = CatMae::new(config.clone(), &mut Rng::new(7, 0)).unwrap();
        let plan = plan(&config, 0.5, 8);
        let imgs = frames(&config, 9);
        let mut changed = imgs.clone();
        for v in changed.last_mut().unwrap().data.iter_mut() {
            *v = 1.0 - *v;
        }
        let a = forward(&model, &imgs, &plan).unwrap();
        let b = forward(&model, &changed, &plan).unwrap();
        assert_eq!(a.frames[0].prediction, b.frames[0].prediction);
        assert_ne!(a.frames.last().unwrap().prediction, b.frames.last().unwrap().prediction);
    }

    #[test]
    fn features_have_patch_rows() {
        let config = ModelConfig::micro();
        let model = CatMae::new(config.clone(), &mut Rng::new(0, 0)).unwrap();
        let f = encoder_features(&model, &frames(&config, 0)[0], None).unwrap();
        assert_eq!(f.shape(), &[config.num_patches(), config.enc_dim]);
        assert!(encoder_features(&model, &frames(&config, 0)[0], Some(config.enc_depth)).is_err());
        let wrong = Image::filled(8, 8, [0.0; 3]);
        assert!(encoder_features(&model, &wrong, None).is_err());
    }
}
