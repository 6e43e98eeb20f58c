use alloc::format;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{ConvGeometry, Graph, ParamId, ParamStore, Var};
use crate::model::layers::{fan_in_normal, trunc_normal, Block, Linear, Mlp, Norm, INIT_STD};
use crate::model::spec::{EncoderFamily, EncoderSpec};
use crate::objectives::KeptPatches;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Splits `[B, R, R, 3]` images into `[B, P, p·p·3]` row-major patches.
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[b, h, w, c] = images.shape() else {
        bail!(Shape, "expected [B, H, W, 3] images, got {:?}", images.shape());
    };
    if h % patch != 0 || w % patch != 0 {
        bail!(Shape, "image {}x{} not divisible into {}-pixel patches", h, w, patch);
    }
    let (ph, pw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let mut out = Vec::with_capacity(images.numel());
    let src = images.data();
    for bi in 0..b {
        for py in 0..ph {
            for px in 0..pw {
                for y in 0..patch {
                    let row = ((bi * h + py * patch + y) * w + px * patch) * c;
                    out.extend_from_slice(&src[row..row + patch * c]);
                }
            }
        }
    }
    Tensor::new(&[b, ph * pw, pd], out)
}

#[derive(Clone, Debug)]
pub(crate) enum VisionTower {
    Vit(Vit),
    Mixer(Mixer),
    Cnn(Cnn),
}

impl VisionTower {
    pub fn new<T: Real>(spec: &EncoderSpec, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        spec.validate_vision()?;
        Ok(match spec.family {
            EncoderFamily::Vit => VisionTower::Vit(Vit::new(spec, store, rng)),
            EncoderFamily::MlpMixer => VisionTower::Mixer(Mixer::new(spec, store, rng)),
            EncoderFamily::CnnResnetStyle => VisionTower::Cnn(Cnn::new(spec, store, rng)),
        })
    }

    /// Pooled `[B, feature_dim]` representation of a `[B, R, R, 3]` batch.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        spec: &EncoderSpec,
        images: &Tensor<T>,
        kept: Option<&KeptPatches>,
    ) -> Result<Var> {
        let r = spec.input_resolution;
        match images.shape() {
            &[_, h, w, 3] if h == r && w == r => {}
            other => bail!(Shape, "expected images of resolution {r}x{r}x3, got {:?}", other),
        }
        if kept.is_some() && !spec.family.supports_patch_masking() {
            bail!(Config, "patch masking needs a token-set encoder, not `{}`", spec.family.name());
        }
        match self {
            VisionTower::Vit(m) => m.forward(g, spec, images, kept),
            VisionTower::Mixer(m) => m.forward(g, spec, images),
            VisionTower::Cnn(m) => m.forward(g, spec, images),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Vit {
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: Norm,
}

impl Vit {
    fn new<T: Real>(spec: &EncoderSpec, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let d = spec.width;
        let embed = Linear::new(store, "vision.patch_embed", spec.patch_dim(), d, true, INIT_STD, rng);
        let pos = store.add("vision.pos_embed", trunc_normal(&[spec.num_patches(), d], INIT_STD, rng));
        let blocks = (0..spec.depth)
            .map(|i| Block::new(store, &format!("vision.block{i}"), d, spec.heads, spec.mlp_hidden(), rng))
            .collect();
        let ln = Norm::new(store, "vision.ln_post", d);
        Vit { embed, pos, blocks, ln }
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        spec: &EncoderSpec,
        images: &Tensor<T>,
        kept: Option<&KeptPatches>,
    ) -> Result<Var> {
        let b = images.shape()[0];
        let patches = patchify(images, spec.patch_size)?;
        let p = spec.num_patches();
        let d = spec.width;
        let mut x = match kept {
            None => {
                let x = g.input(patches);
                let x = self.embed.forward(g, x)?;
                let pos = g.param(self.pos);
                g.add_broadcast(x, pos)?
            }
            Some(kept) => {
                kept.check(b, p)?;
                let k = kept.per_example;
                let flat = patches.reshape(&[b * p, spec.patch_dim()])?;
                let rows: Vec<usize> =
                    kept.indices.iter().enumerate().map(|(i, &idx)| (i / k) * p + idx).collect();
                let x = g.input(flat.select_rows(&rows).reshape(&[b, k, spec.patch_dim()])?);
                let x = self.embed.forward(g, x)?;
                let pos = g.param(self.pos);
                let pos = g.gather(pos, &kept.indices)?;
                let pos = g.reshape(pos, &[b, k, d])?;
                g.add(x, pos)?
            }
        };
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let x = self.ln.forward(g, x)?;
        g.mean_tokens(x)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MixerLayer {
    ln1: Norm,
    token_mlp: Mlp,
    ln2: Norm,
    channel_mlp: Mlp,
}

#[derive(Clone, Debug)]
pub(crate) struct Mixer {
    stem: Linear,
    layers: Vec<MixerLayer>,
    ln: Norm,
}

impl Mixer {
    fn new<T: Real>(spec: &EncoderSpec, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let d = spec.width;
        let s = spec.num_patches();
        let stem = Linear::new(store, "vision.stem", spec.patch_dim(), d, true, INIT_STD, rng);
        let layers = (0..spec.depth)
            .map(|i| MixerLayer {
                ln1: Norm::new(store, &format!("vision.layer{i}.ln1"), d),
                token_mlp: Mlp::new(store, &format!("vision.layer{i}.token"), s, spec.token_mlp_hidden(), s, rng),
                ln2: Norm::new(store, &format!("vision.layer{i}.ln2"), d),
                channel_mlp: Mlp::new(store, &format!("vision.layer{i}.channel"), d, spec.mlp_hidden(), d, rng),
            })
            .collect();
        let ln = Norm::new(store, "vision.ln_post", d);
        Mixer { stem, layers, ln }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, spec: &EncoderSpec, images: &Tensor<T>) -> Result<Var> {
        let patches = patchify(images, spec.patch_size)?;
        let x = g.input(patches);
        let mut x = self.stem.forward(g, x)?;
        for layer in &self.layers {
            let h = layer.ln1.forward(g, x)?;
            let h = g.permute(h, &[0, 2, 1])?;
            let h = layer.token_mlp.forward(g, h)?;
            let h = g.permute(h, &[0, 2, 1])?;
            x = g.add(x, h)?;
            let h = layer.ln2.forward(g, x)?;
            let h = layer.channel_mlp.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let x = self.ln.forward(g, x)?;
        g.mean_tokens(x)
    }
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    geom: ConvGeometry,
    norm: Norm,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeometry,
        norm_gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = geom.kernel * geom.kernel * cin;
        let w = store.add(format!("{name}.weight"), fan_in_normal(&[fan_in, cout], fan_in, rng));
        let norm = Norm::with_gain(store, &format!("{name}.norm"), cout, norm_gain);
        Conv { w, geom, norm }
    }

    /// Convolution followed by per-position channel normalization.
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let &[b, h, w, _] = g.shape(x) else { unreachable!("conv input is [B, H, W, C]") };
        let cols = g.im2col(x, self.geom)?;
        let wv = g.param(self.w);
        let y = g.matmul(cols, wv)?;
        let cout = g.shape(y)[1];
        let y = g.reshape(y, &[b, self.geom.output_size(h), self.geom.output_size(w), cout])?;
        self.norm.forward(g, y)
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Conv,
    spatial: Conv,
    expand: Conv,
    shortcut: Option<Conv>,
}

#[derive(Clone, Debug)]
pub(crate) struct Cnn {
    stem: Conv,
    stem_pool: bool,
    blocks: Vec<Bottleneck>,
}

impl Cnn {
    fn new<T: Real>(spec: &EncoderSpec, store: &mut ParamStore<T>, rng: &mut Rng) -> Self {
        let stem_spec = spec.cnn_stem();
        let geom = ConvGeometry { kernel: stem_spec.kernel, stride: stem_spec.stride, padding: stem_spec.kernel / 2 };
        let stem = Conv::new(store, "vision.stem", 3, spec.width, geom, 1.0, rng);
        let mut blocks = Vec::new();
        let mut channels = spec.width;
        for (stage, &count) in spec.stage_blocks.iter().enumerate() {
            let mid = spec.width << stage;
            let out = 4 * mid;
            for i in 0..count {
                let name = format!("vision.stage{stage}.block{i}");
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                let one = ConvGeometry { kernel: 1, stride: 1, padding: 0 };
                let three = ConvGeometry { kernel: 3, stride, padding: 1 };
                let shortcut = (i == 0).then(|| {
                    let geom = ConvGeometry { kernel: 1, stride, padding: 0 };
                    Conv::new(store, &format!("{name}.shortcut"), channels, out, geom, 1.0, rng)
                });
                blocks.push(Bottleneck {
                    reduce: Conv::new(store, &format!("{name}.reduce"), channels, mid, one, 1.0, rng),
                    spatial: Conv::new(store, &format!("{name}.spatial"), mid, mid, three, 1.0, rng),
                    // Zero gain makes every residual branch start as the identity.
                    expand: Conv::new(store, &format!("{name}.expand"), mid, out, one, 0.0, rng),
                    shortcut,
                });
                channels = out;
            }
        }
        Cnn { stem, stem_pool: stem_spec.pool, blocks }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, _spec: &EncoderSpec, images: &Tensor<T>) -> Result<Var> {
        let x = g.input(images.clone());
        let x = self.stem.forward(g, x)?;
        let mut x = g.relu(x);
        if self.stem_pool {
            x = avg_pool2(g, x)?;
        }
        for block in &self.blocks {
            let h = block.reduce.forward(g, x)?;
            let h = g.relu(h);
            let h = block.spatial.forward(g, h)?;
            let h = g.relu(h);
            let h = block.expand.forward(g, h)?;
            let skip = match &block.shortcut {
                Some(conv) => conv.forward(g, x)?,
                None => x,
            };
            let y = g.add(h, skip)?;
            x = g.relu(y);
        }
        let &[b, h, w, c] = g.shape(x) else { unreachable!() };
        let x = g.reshape(x, &[b, h * w, c])?;
        g.mean_tokens(x)
    }
}

/// 2×2 stride-2 average pooling over `[B, H, W, C]`.
fn avg_pool2<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let &[b, h, w, c] = g.shape(x) else { unreachable!() };
    let cols = g.im2col(x, ConvGeometry { kernel: 2, stride: 2, padding: 0 })?;
    let (ho, wo) = (h / 2, w / 2);
    let cols = g.reshape(cols, &[b * ho * wo, 4, c])?;
    let pooled = g.mean_tokens(cols)?;
    g.reshape(pooled, &[b, ho, wo, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_patches_row_major() {
        // 1 image, 4x4 pixels, 1 value per pixel replicated over 3 channels.
        let img = Tensor::<f64>::from_fn(&[1, 4, 4, 3], |i| (i / 3) as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 12]);
        let first: Vec<f64> = p.row(0).iter().step_by(3).copied().collect();
        assert_eq!(first, vec![0.0, 1.0, 4.0, 5.0]);
        let last: Vec<f64> = p.row(3).iter().step_by(3).copied().collect();
        assert_eq!(last, vec![10.0, 11.0, 14.0, 15.0]);
    }
}
