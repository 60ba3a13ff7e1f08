//! Encoder/decoder forward passes recorded on an autodiff [`Graph`].

use crate::dataio::image::Image;
use crate::dataio::patch::{normalize_patches, patchify, TARGET_EPS};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::model::config::ModelConfig;
use crate::model::params::{self, Attention, Layout, Linear, Mlp, Norm, ParamStore};
use crate::model::posembed::sincos_2d;
use crate::numerics::{Graph, Rng, Tensor, Var};

/// The network: configuration, parameters, their layout and the fixed
/// position tables.
#[derive(Debug, Clone)]
pub struct CatMae {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    encoder_pos: Tensor,
    decoder_pos: Tensor,
}

impl CatMae {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (params, layout) = params::build(&config, rng);
        let encoder_pos = sincos_2d(config.grid(), config.enc_dim, true);
        let decoder_pos = sincos_2d(config.grid(), config.dec_dim, false);
        Ok(Self { config, params, layout, encoder_pos, decoder_pos })
    }

    /// Model with the given parameters (names and shapes must match the config).
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, &mut Rng::new(0, 0))?;
        for (mine, theirs) in model.params.entries.iter().zip(&params.entries) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::Model(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
        }
        if model.params.len() != params.len() {
            return Err(Error::Model(format!("expected {} parameters, got {}", model.params.len(), params.len())));
        }
        model.params = params;
        Ok(model)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Records every parameter as a graph leaf (trainable or constant).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .entries
            .iter()
            .map(|p| if trainable { g.param(p.tensor.clone()) } else { g.constant(p.tensor.clone()) })
            .collect()
    }

    /// View of the network over already-bound parameter leaves.
    pub fn network<'a>(&'a self, vars: &'a [Var]) -> Network<'a> {
        Network { model: self, p: vars }
    }
}

/// Per-frame decoder output recorded on a graph.
#[derive(Debug, Clone)]
pub struct TracedFrame {
    /// Frame position in the sequence (0 is the fully visible frame).
    pub t: usize,
    pub prediction: Var,
    pub target: Var,
    pub mse: Var,
    /// Last decoder layer cross-attention probabilities `[heads, L, S]`.
    pub cross_attention: Option<Var>,
    /// `(frame position, patch index)` of each of the `S` context tokens.
    pub context: Vec<(usize, usize)>,
}

/// Per-frame reconstruction result.
#[derive(Debug, Clone)]
pub struct FrameReconstruction {
    pub t: usize,
    /// `[|M_t|, P*P*3]`
    pub prediction: Tensor,
    /// Normalized ground-truth patches at the masked positions, same shape.
    pub target: Tensor,
    /// Mean over masked patches and values of the squared error (0 if nothing is masked).
    pub mse: f64,
    pub cross_attention: Option<Tensor>,
    pub context: Vec<(usize, usize)>,
}

/// Decoder predictions and losses for frames `2..=N`.
#[derive(Debug, Clone)]
pub struct ReconstructionBatch {
    pub frames: Vec<FrameReconstruction>,
}

impl ReconstructionBatch {
    pub fn losses(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.mse).collect()
    }
}

/// Graph-building view of a [`CatMae`] with bound parameter leaves.
pub struct Network<'a> {
    model: &'a CatMae,
    p: &'a [Var],
}

impl Network<'_> {
    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn layout(&self) -> &Layout {
        &self.model.layout
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
        let y = g.matmul(x, self.p[l.w])?;
        match l.b {
            Some(b) => g.add_bias(y, self.p[b]),
            None => Ok(y),
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Result<Var> {
        g.layer_norm(x, self.p[n.gain], self.p[n.bias], self.config().norm_eps)
    }

    fn mlp(&self, g: &mut Graph, x: Var, m: Mlp) -> Result<Var> {
        let h = self.linear(g, x, m.fc1)?;
        let h = g.gelu(h);
        self.linear(g, h, m.fc2)
    }

    /// Multi-head attention of `queries [T, d]` over `keys_values [S, d]`.
    /// Returns the output `[T, d]` and the probabilities `[heads, T, S]`.
    fn attention(&self, g: &mut Graph, queries: Var, keys_values: Var, a: Attention, heads: usize) -> Result<(Var, Var)> {
        let d = g.shape(queries)[1];
        let q = self.linear(g, queries, a.q)?;
        let k = self.linear(g, keys_values, a.k)?;
        let v = self.linear(g, keys_values, a.v)?;
        let q = g.split_heads(q, heads)?;
        let k = g.split_heads(k, heads)?;
        let v = g.split_heads(v, heads)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt());
        let probs = g.softmax(scores, 2)?;
        let out = g.matmul(probs, v)?;
        let out = g.merge_heads(out)?;
        Ok((self.linear(g, out, a.o)?, probs))
    }

    /// `[L+1, d_e]` tokens: projected patches plus the `[CLS]` token, with the
    /// fixed spatial position table added. No temporal embedding.
    pub fn embed_frame(&self, g: &mut Graph, frame: &Image) -> Result<Var> {
        let c = self.config();
        if frame.width != c.image_size || frame.height != c.image_size {
            return Err(Error::shape(
                "embed_frame",
                format!("{}x{} frame for a {}-pixel model", frame.width, frame.height, c.image_size),
            ));
        }
        let patches = g.constant(patchify(frame, c.patch_size)?);
        let proj = self.linear(g, patches, self.layout().patch_embed)?;
        let l = c.num_patches();
        let rows: Vec<usize> = (1..=l).collect();
        let tokens = g.scatter_rows(proj, self.p[self.layout().cls_token], &rows, l + 1)?;
        let pos = g.constant(self.model.encoder_pos.clone());
        g.add(tokens, pos)
    }

    /// Token rows of frame `t` that the encoder sees: `[CLS]` plus visible patches.
    pub fn select_visible(&self, g: &mut Graph, tokens: Var, plan: &MaskPlan, t: usize) -> Result<Var> {
        let f = plan.frame(t)?;
        let rows: Vec<usize> = std::iter::once(0).chain(f.visible.iter().map(|i| i + 1)).collect();
        g.gather_rows(tokens, &rows)
    }

    /// Encoder over `[k+1, d_e]` tokens (row 0 is `[CLS]`). Returns the output of
    /// every block; the last entry has the final norm applied.
    pub fn encode_layers(&self, g: &mut Graph, tokens: Var) -> Result<Vec<Var>> {
        let heads = self.config().enc_heads;
        let mut x = tokens;
        let mut outs = Vec::with_capacity(self.layout().encoder.len() + 1);
        for block in &self.layout().encoder {
            let h = self.norm(g, x, block.norm1)?;
            let (a, _) = self.attention(g, h, h, block.attn, heads)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, block.norm2)?;
            let m = self.mlp(g, h, block.mlp)?;
            x = g.add(x, m)?;
            outs.push(x);
        }
        outs.push(self.norm(g, x, self.layout().encoder_norm)?);
        Ok(outs)
    }

    pub fn encode(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        Ok(*self.encode_layers(g, tokens)?.last().expect("encoder output"))
    }

    /// Encoder patch latents (without `[CLS]`) of one frame under the plan.
    pub fn encode_frame(&self, g: &mut Graph, frame: &Image, plan: &MaskPlan, t: usize) -> Result<Var> {
        let tokens = self.embed_frame(g, frame)?;
        let visible = self.select_visible(g, tokens, plan, t)?;
        let latents = self.encode(g, visible)?;
        let k = g.shape(latents)[0];
        g.gather_rows(latents, &(1..k).collect::<Vec<_>>())
    }

    /// Decoder-space tokens of one frame's visible latents, position table added.
    fn decoder_tokens(&self, g: &mut Graph, latents: Var, visible: &[usize]) -> Result<(Var, Var)> {
        let projected = self.linear(g, latents, self.layout().decoder_embed)?;
        let dd = self.config().dec_dim;
        let mut pos = Vec::with_capacity(visible.len() * dd);
        for &i in visible {
            pos.extend_from_slice(self.model.decoder_pos.row(i));
        }
        let pos = g.constant(Tensor::new(vec![visible.len(), dd], pos)?);
        let with_pos = g.add(projected, pos)?;
        Ok((projected, with_pos))
    }

    /// Decodes frame `t` from its own visible latents and the encoded patch
    /// latents of frames `0..t`. Returns the head output for all `L`
    /// positions, the last cross-attention probabilities and the context provenance.
    pub fn decode_frame(
        &self,
        g: &mut Graph,
        t: usize,
        latents: &[Var],
        plan: &MaskPlan,
    ) -> Result<(Var, Option<Var>, Vec<(usize, usize)>)> {
        if t == 0 {
            return Err(Error::Model("the first frame is never reconstructed".into()));
        }
        if latents.len() <= t {
            return Err(Error::Model(format!("decoding frame {t} needs latents of frames 0..={t}")));
        }
        let mut own = None;
        let mut context_parts = Vec::new();
        let mut context = Vec::new();
        let last_ctx = if self.config().cross_attend_current { t } else { t - 1 };
        for (s, &lat) in latents.iter().enumerate().take(t + 1) {
            let visible = &plan.frame(s)?.visible;
            let (projected, with_pos) = self.decoder_tokens(g, lat, visible)?;
            if s == t {
                own = Some(projected);
            }
            if s <= last_ctx {
                context_parts.push(with_pos);
                context.extend(visible.iter().map(|&i| (s, i)));
            }
        }
        let own = own.expect("own tokens");
        let l = self.config().num_patches();
        let full = g.scatter_rows(own, self.p[self.layout().mask_token], &plan.frame(t)?.visible, l)?;
        let pos = g.constant(self.model.decoder_pos.clone());
        let mut x = g.add(full, pos)?;
        let ctx = g.concat_rows(&context_parts)?;
        let heads = self.config().dec_heads;
        let mut last_probs = None;
        for block in &self.layout().decoder {
            let q = self.norm(g, x, block.norm_query)?;
            let kv = self.norm(g, ctx, block.norm_context)?;
            let (a, probs) = self.attention(g, q, kv, block.cross, heads)?;
            last_probs = Some(probs);
            x = g.add(x, a)?;
            let h = self.norm(g, x, block.norm_self)?;
            let (a, _) = self.attention(g, h, h, block.self_attn, heads)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, block.norm_mlp)?;
            let m = self.mlp(g, h, block.mlp)?;
            x = g.add(x, m)?;
        }
        let x = self.norm(g, x, self.layout().decoder_norm)?;
        let out = self.linear(g, x, self.layout().head)?;
        Ok((out, last_probs, context))
    }

    /// Full reconstruction pass. `targets` supplies the ground-truth frames the
    /// loss compares against (normally the input frames themselves).
    pub fn forward(&self, g: &mut Graph, frames: &[Image], targets: &[Image], plan: &MaskPlan) -> Result<Vec<TracedFrame>> {
        let c = self.config();
        if frames.len() != c.n_frames || targets.len() != c.n_frames || plan.n_frames() != c.n_frames {
            return Err(Error::Model(format!(
                "model expects {} frames, got {} inputs, {} targets, {}-frame plan",
                c.n_frames,
                frames.len(),
                targets.len(),
                plan.n_frames()
            )));
        }
        if plan.num_patches != c.num_patches() {
            return Err(Error::Model(format!("plan covers {} patches, model has {}", plan.num_patches, c.num_patches())));
        }
        let latents = frames
            .iter()
            .enumerate()
            .map(|(t, f)| self.encode_frame(g, f, plan, t))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(c.n_frames - 1);
        for t in 1..c.n_frames {
            let (head, probs, context) = self.decode_frame(g, t, &latents, plan)?;
            let masked = &plan.frame(t)?.masked;
            let prediction = g.gather_rows(head, masked)?;
            let target = masked_targets(&targets[t], c.patch_size, masked)?;
            let target = g.constant(target);
            let mse = g.mse(prediction, target)?;
            out.push(TracedFrame { t, prediction, target, mse, cross_attention: probs, context });
        }
        Ok(out)
    }
}

/// Normalized ground-truth patches at the given indices.
pub fn masked_targets(frame: &Image, patch: usize, masked: &[usize]) -> Result<Tensor> {
    let all = normalize_patches(&patchify(frame, patch)?, TARGET_EPS);
    let c = all.last_dim();
    let mut data = Vec::with_capacity(masked.len() * c);
    for &i in masked {
        data.extend_from_slice(all.row(i));
    }
    Tensor::new(vec![masked.len(), c], data)
}

/// Inference-mode forward (no gradients) returning plain tensors.
pub fn forward(model: &CatMae, frames: &[Image], plan: &MaskPlan) -> Result<ReconstructionBatch> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let traced = model.network(&vars).forward(&mut g, frames, frames, plan)?;
    let frames = traced
        .into_iter()
        .map(|f| FrameReconstruction {
            t: f.t,
            prediction: g.value(f.prediction).clone(),
            target: g.value(f.target).clone(),
            mse: g.value(f.mse).item(),
            cross_attention: f.cross_attention.map(|p| g.value(p).clone()),
            context: f.context,
        })
        .collect();
    Ok(ReconstructionBatch { frames })
}

/// Head-averaged last-layer cross-attention of one masked query patch,
/// scattered back onto each context frame's patch grid.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub query: usize,
    pub target_frame: usize,
    /// One grid of `L` cells per context frame; `None` where a patch was not
    /// part of the context (masked in that frame).
    pub frames: Vec<(usize, Vec<Option<f64>>)>,
}

impl AttentionMaps {
    pub fn total(&self) -> f64 {
        self.frames.iter().flat_map(|(_, m)| m.iter().flatten()).sum()
    }
}

pub fn extract_cross_attention(
    model: &CatMae,
    frames: &[Image],
    plan: &MaskPlan,
    query: usize,
    target_frame: usize,
) -> Result<AttentionMaps> {
    if target_frame == 0 || target_frame >= plan.n_frames() {
        return Err(Error::Model(format!("target frame {target_frame} is not a reconstructed frame")));
    }
    if !plan.frame(target_frame)?.masked.contains(&query) {
        return Err(Error::Model(format!("query patch {query} is visible in frame {target_frame}")));
    }
    let batch = forward(model, frames, plan)?;
    let rec = batch
        .frames
        .iter()
        .find(|f| f.t == target_frame)
        .ok_or_else(|| Error::Model("missing frame".into()))?;
    let probs = rec
        .cross_attention
        .as_ref()
        .ok_or_else(|| Error::Model("decoder has no cross-attention layers".into()))?;
    let (heads, l, s) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let mut row = vec![0.0; s];
    for h in 0..heads {
        let base = (h * l + query) * s;
        for (acc, v) in row.iter_mut().zip(&probs.data()[base..base + s]) {
            *acc += v / heads as f64;
        }
    }
    let n_patches = model.config.num_patches();
    let mut maps: Vec<(usize, Vec<Option<f64>>)> = Vec::new();
    for (&(frame, patch), &w) in rec.context.iter().zip(&row) {
        if maps.last().map(|(f, _)| *f) != Some(frame) {
            maps.push((frame, vec![None; n_patches]));
        }
        maps.last_mut().unwrap().1[patch] = Some(w);
    }
    Ok(AttentionMaps { query, target_frame, frames: maps })
}

/// Encoder patch features `[L, d_e]` of a fully visible frame, taken after
/// block `layer` (or after the final norm when `None`).
pub fn encoder_features(model: &CatMae, frame: &Image, layer: Option<usize>) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let net = model.network(&vars);
    let tokens = net.embed_frame(&mut g, frame)?;
    let outs = net.encode_layers(&mut g, tokens)?;
    let idx = match layer {
        None => outs.len() - 1,
        Some(i) if i < model.config.enc_depth => i,
        Some(i) => {
            return Err(Error::Config(format!("feature layer {i} exceeds encoder depth {}", model.config.enc_depth)))
        }
    };
    let out = g.value(outs[idx]);
    let l = out.rows() - 1;
    Tensor::new(vec![l, out.last_dim()], out.data()[out.last_dim()..].to_vec())
}
