//! Named parameter storage and the index layout of the network.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::{Rng, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Receives decoupled weight decay (projection matrices only).
    pub decay: bool,
}

/// Every learnable tensor, in registration order. Exactly one copy of each
/// encoder and decoder tensor exists; all frames use the same entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub entries: Vec<Param>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.tensor.is_finite())
    }

    /// Replaces every tensor, keeping names and decay flags.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Model(format!("{} tensors for {} parameters", tensors.len(), self.entries.len())));
        }
        for (p, t) in self.entries.iter_mut().zip(tensors) {
            if p.tensor.shape() != t.shape() {
                return Err(Error::shape("set_tensors", format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), t.shape())));
            }
            p.tensor = t;
        }
        Ok(())
    }

    fn push(&mut self, name: String, tensor: Tensor, decay: bool) -> usize {
        self.entries.push(Param { name, tensor, decay });
        self.entries.len() - 1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: usize,
    pub bias: usize,
}

/// Multi-head attention projections. Keys carry no bias: a key bias only adds
/// a per-query constant to the scores, which softmax cancels.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    pub norm_query: Norm,
    pub norm_context: Norm,
    pub cross: Attention,
    pub norm_self: Norm,
    pub self_attn: Attention,
    pub norm_mlp: Norm,
    pub mlp: Mlp,
}

/// Indices into a [`ParamStore`] for every tensor of the network.
#[derive(Debug, Clone)]
pub struct Layout {
    pub patch_embed: Linear,
    pub cls_token: usize,
    pub encoder: Vec<EncoderBlock>,
    pub encoder_norm: Norm,
    pub decoder_embed: Linear,
    pub mask_token: usize,
    pub decoder: Vec<DecoderBlock>,
    pub decoder_norm: Norm,
    pub head: Linear,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut Rng,
}

impl Builder<'_> {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.trunc_normal(INIT_STD)).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Linear {
        let w = self.normal(&[fan_in, fan_out]);
        let w = self.store.push(format!("{name}.w"), w, true);
        let b = bias.then(|| self.store.push(format!("{name}.b"), Tensor::zeros([fan_out]), false));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        let gain = self.store.push(format!("{name}.gain"), Tensor::full([dim], 1.0), false);
        let bias = self.store.push(format!("{name}.bias"), Tensor::zeros([dim]), false);
        Norm { gain, bias }
    }

    fn token(&mut self, name: &str, dim: usize) -> usize {
        let t = self.normal(&[dim]);
        self.store.push(name.to_string(), t, false)
    }

    fn attention(&mut self, name: &str, dim: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), dim, dim, true),
            k: self.linear(&format!("{name}.k"), dim, dim, false),
            v: self.linear(&format!("{name}.v"), dim, dim, true),
            o: self.linear(&format!("{name}.o"), dim, dim, true),
        }
    }

    fn mlp(&mut self, name: &str, dim: usize, ratio: usize) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), dim, dim * ratio, true),
            fc2: self.linear(&format!("{name}.fc2"), dim * ratio, dim, true),
        }
    }
}

/// Registers and initializes every parameter: truncated normal (std 0.02) for
/// projections and tokens, zeros for biases, unit gains for norms.
pub fn build(config: &ModelConfig, rng: &mut Rng) -> (ParamStore, Layout) {
    let mut b = Builder { store: ParamStore::default(), rng };
    let (de, dd) = (config.enc_dim, config.dec_dim);
    let patch_embed = b.linear("encoder.patch_embed", config.patch_dim(), de, true);
    let cls_token = b.token("encoder.cls_token", de);
    let encoder = (0..config.enc_depth)
        .map(|i| {
            let n = format!("encoder.blocks.{i}");
            EncoderBlock {
                norm1: b.norm(&format!("{n}.norm1"), de),
                attn: b.attention(&format!("{n}.attn"), de),
                norm2: b.norm(&format!("{n}.norm2"), de),
                mlp: b.mlp(&format!("{n}.mlp"), de, config.mlp_ratio),
            }
        })
        .collect();
    let encoder_norm = b.norm("encoder.norm", de);
    let decoder_embed = b.linear("decoder.embed", de, dd, true);
    let mask_token = b.token("decoder.mask_token", dd);
    let decoder = (0..config.dec_depth)
        .map(|i| {
            let n = format!("decoder.blocks.{i}");
            DecoderBlock {
                norm_query: b.norm(&format!("{n}.norm_query"), dd),
                norm_context: b.norm(&format!("{n}.norm_context"), dd),
                cross: b.attention(&format!("{n}.cross_attn"), dd),
                norm_self: b.norm(&format!("{n}.norm_self"), dd),
                self_attn: b.attention(&format!("{n}.self_attn"), dd),
                norm_mlp: b.norm(&format!("{n}.norm_mlp"), dd),
                mlp: b.mlp(&format!("{n}.mlp"), dd, config.mlp_ratio),
            }
        })
        .collect();
    let decoder_norm = b.norm("decoder.norm", dd);
    let head = b.linear("decoder.head", dd, config.patch_dim(), true);
    let layout = Layout {
        patch_embed,
        cls_token,
        encoder,
        encoder_norm,
        decoder_embed,
        mask_token,
        decoder,
        decoder_norm,
        head,
    };
    (b.store, layout)
}
