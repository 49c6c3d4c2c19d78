//! FiLM-conditioned temporal U-Net that predicts the injected noise.
//!
//! Layout follows the conditional 1D U-Net of diffusion-policy backbones:
//! per level two conditional residual blocks and a stride-2 downsample, two
//! middle blocks, a mirrored decoder that concatenates encoder features and
//! upsamples with a transposed convolution, then a final conv block and a 1x1
//! projection back to the action channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    film_backward, film_forward, mish_backward, mish_forward, Conv1d, ConvCache, ConvTCache,
    ConvTranspose1d, Feat, GnCache, GroupNorm, Linear, Rows,
};
use super::params::{Gradients, Init, ParamBuilder, ParameterStore};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub down_dims: Vec<usize>,
    pub kernel_size: usize,
    pub groupnorm_groups: usize,
    pub step_embed_dim: usize,
    /// Length of the observation vector appended to the step features.
    pub cond_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            down_dims: vec![64, 128, 256],
            kernel_size: 5,
            groupnorm_groups: 8,
            step_embed_dim: 256,
            cond_dim: 63,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.down_dims.is_empty() {
            return Err(Error::Config("down_dims must not be empty".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.groupnorm_groups == 0 || self.down_dims.iter().any(|d| d % self.groupnorm_groups != 0) {
            return Err(Error::Config(format!(
                "down_dims {:?} must be divisible by {} groups",
                self.down_dims, self.groupnorm_groups
            )));
        }
        if self.step_embed_dim == 0 || !self.step_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("step embedding dimension must be even".into()));
        }
        Ok(())
    }

    /// Sequence lengths must survive `levels - 1` halvings.
    pub fn accepts_horizon(&self, horizon: usize) -> bool {
        let f = 1 << (self.down_dims.len() - 1);
        horizon > 0 && horizon.is_multiple_of(f)
    }
}

/// Sinusoidal embedding: `sin(k w_i)` then `cos(k w_i)` with `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embedding(k: f64, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding dimension {dim} must be even")));
    }
    let half = dim / 2;
    let freqs = (0..half).map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64));
    let mut out = vec![0.0; dim];
    for (i, w) in freqs.enumerate() {
        out[i] = (k * w).sin();
        out[half + i] = (k * w).cos();
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv1d,
    norm: GroupNorm,
}

struct ConvBlockCache<R> {
    conv: ConvCache<R>,
    norm: GnCache<R>,
    pre_act: Vec<R>,
}

impl ConvBlock {
    fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, k: usize, groups: usize) -> Self {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        let conv = Conv1d {
            weight: pb.add(format!("{name}.conv.weight"), &[c_out, c_in, k], Init::Uniform(bound)),
            bias: pb.add(format!("{name}.conv.bias"), &[c_out], Init::Zeros),
            c_in,
            c_out,
            kernel: k,
            stride: 1,
            pad: k / 2,
        };
        let norm = GroupNorm {
            gamma: pb.add(format!("{name}.norm.weight"), &[c_out], Init::Values(vec![1.0; c_out])),
            beta: pb.add(format!("{name}.norm.bias"), &[c_out], Init::Zeros),
            channels: c_out,
            groups,
        };
        Self { conv, norm }
    }

    fn forward<R: Real>(&self, p: &ParameterStore<R>, x: &Feat<R>) -> (Feat<R>, ConvBlockCache<R>) {
        let (h, conv) = self.conv.forward(p, x);
        let (h, norm) = self.norm.forward(p, &h);
        let out = Feat { c: h.c, b: h.b, t: h.t, data: mish_forward(&h.data) };
        (out, ConvBlockCache { conv, norm, pre_act: h.data })
    }

    fn backward<R: Real>(
        &self,
        p: &ParameterStore<R>,
        g: &mut Gradients<R>,
        cache: &ConvBlockCache<R>,
        mut dout: Feat<R>,
    ) -> Feat<R> {
        mish_backward(&cache.pre_act, &mut dout.data);
        let d = self.norm.backward(p, g, &cache.norm, &dout);
        self.conv.backward(p, g, &cache.conv, &d)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    block0: ConvBlock,
    film: Linear,
    block1: ConvBlock,
    skip: Conv1d,
}

struct ResCache<R> {
    block0: ConvBlockCache<R>,
    hidden: Feat<R>,
    film: Rows<R>,
    block1: ConvBlockCache<R>,
    skip: ConvCache<R>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        cond: usize,
        k: usize,
        groups: usize,
    ) -> Self {
        let block0 = ConvBlock::new(pb, &format!("{name}.block0"), c_in, c_out, k, groups);
        let mut film_bias = vec![1.0; c_out];
        film_bias.extend(std::iter::repeat_n(0.0, c_out));
        let film = Linear {
            weight: pb.add(format!("{name}.film.weight"), &[2 * c_out, cond], Init::Zeros),
            bias: pb.add(format!("{name}.film.bias"), &[2 * c_out], Init::Values(film_bias)),
            d_in: cond,
            d_out: 2 * c_out,
        };
        let block1 = ConvBlock::new(pb, &format!("{name}.block1"), c_out, c_out, k, groups);
        let skip = Conv1d {
            weight: pb.add(format!("{name}.skip.weight"), &[c_out, c_in, 1], Init::Uniform(1.0 / (c_in as f64).sqrt())),
            bias: pb.add(format!("{name}.skip.bias"), &[c_out], Init::Zeros),
            c_in,
            c_out,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        Self { block0, film, block1, skip }
    }

    fn forward<R: Real>(&self, p: &ParameterStore<R>, x: &Feat<R>, cond: &Rows<R>) -> (Feat<R>, ResCache<R>) {
        let (hidden, block0) = self.block0.forward(p, x);
        let film = self.film.forward(p, cond);
        let modulated = film_forward(&hidden, &film);
        let (mut out, block1) = self.block1.forward(p, &modulated);
        let (s, skip) = self.skip.forward(p, x);
        out.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += *v);
        (out, ResCache { block0, hidden, film, block1, skip })
    }

    /// Returns the input gradient; the conditioning gradient is accumulated into `dcond`.
    fn backward<R: Real>(
        &self,
        p: &ParameterStore<R>,
        g: &mut Gradients<R>,
        cache: &ResCache<R>,
        cond: &Rows<R>,
        dcond: &mut Rows<R>,
        dout: &Feat<R>,
    ) -> Feat<R> {
        let dmod = self.block1.backward(p, g, &cache.block1, dout.clone());
        let (dhidden, dfilm) = film_backward(&cache.hidden, &cache.film, &dmod);
        let dc = self.film.backward(p, g, cond, &dfilm);
        dcond.data.iter_mut().zip(&dc.data).for_each(|(a, b)| *a += *b);
        let mut dx = self.block0.backward(p, g, &cache.block0, dhidden);
        let ds = self.skip.backward(p, g, &cache.skip, dout);
        dx.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += *b);
        dx
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: [ResBlock; 2],
    down: Option<Conv1d>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    res: [ResBlock; 2],
    up: ConvTranspose1d,
}

/// Architecture description; parameters live in a separate [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct ConditionalUnet1d {
    cfg: NetworkConfig,
    builder_specs: std::sync::Arc<Vec<super::params::ParamSpec>>,
    builder: std::sync::Arc<ParamBuilder>,
    step1: Linear,
    step2: Linear,
    down: Vec<DownLevel>,
    mid: [ResBlock; 2],
    up: Vec<UpLevel>,
    final_block: ConvBlock,
    final_conv: Conv1d,
}

struct UpCache<R> {
    skip_channels: usize,
    res: [ResCache<R>; 2],
    up: ConvTCache<R>,
}

/// Intermediate values of one forward pass, consumed by the backward pass.
pub struct Tape<R> {
    emb: Rows<R>,
    step_hidden: Rows<R>,
    step_act: Rows<R>,
    cond: Rows<R>,
    cond_act: Rows<R>,
    down: Vec<([ResCache<R>; 2], Option<ConvCache<R>>)>,
    mid: [ResCache<R>; 2],
    up: Vec<UpCache<R>>,
    final_block: ConvBlockCache<R>,
    final_conv: ConvCache<R>,
}

impl ConditionalUnet1d {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::default();
        let (k, g) = (cfg.kernel_size, cfg.groupnorm_groups);
        let dsed = cfg.step_embed_dim;
        let cond = dsed + cfg.cond_dim;

        let linear = |pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize| Linear {
            weight: pb.add(format!("{name}.weight"), &[d_out, d_in], Init::Uniform(1.0 / (d_in as f64).sqrt())),
            bias: pb.add(format!("{name}.bias"), &[d_out], Init::Zeros),
            d_in,
            d_out,
        };
        let step1 = linear(&mut pb, "step_mlp.0", dsed, 4 * dsed);
        let step2 = linear(&mut pb, "step_mlp.1", 4 * dsed, dsed);

        let dims: Vec<usize> = std::iter::once(cfg.input_channels).chain(cfg.down_dims.iter().copied()).collect();
        let levels = cfg.down_dims.len();
        let mut down = Vec::with_capacity(levels);
        for i in 0..levels {
            let (c_in, c_out) = (dims[i], dims[i + 1]);
            let name = format!("down.{i}");
            let res = [
                ResBlock::new(&mut pb, &format!("{name}.res0"), c_in, c_out, cond, k, g),
                ResBlock::new(&mut pb, &format!("{name}.res1"), c_out, c_out, cond, k, g),
            ];
            let down_conv = (i + 1 < levels).then(|| Conv1d {
                weight: pb.add(format!("{name}.down.weight"), &[c_out, c_out, 3], Init::Uniform(1.0 / ((c_out * 3) as f64).sqrt())),
                bias: pb.add(format!("{name}.down.bias"), &[c_out], Init::Zeros),
                c_in: c_out,
                c_out,
                kernel: 3,
                stride: 2,
                pad: 1,
            });
            down.push(DownLevel { res, down: down_conv });
        }

        let c_mid = *cfg.down_dims.last().unwrap();
        let mid = [
            ResBlock::new(&mut pb, "mid.0", c_mid, c_mid, cond, k, g),
            ResBlock::new(&mut pb, "mid.1", c_mid, c_mid, cond, k, g),
        ];

        let mut up = Vec::with_capacity(levels.saturating_sub(1));
        for (j, i) in (1..levels).rev().enumerate() {
            let (c_in, c_out) = (cfg.down_dims[i - 1], cfg.down_dims[i]);
            let name = format!("up.{j}");
            let res = [
                ResBlock::new(&mut pb, &format!("{name}.res0"), 2 * c_out, c_in, cond, k, g),
                ResBlock::new(&mut pb, &format!("{name}.res1"), c_in, c_in, cond, k, g),
            ];
            let upc = ConvTranspose1d {
                weight: pb.add(format!("{name}.up.weight"), &[c_in, c_in, 4], Init::Uniform(1.0 / ((c_in * 4) as f64).sqrt())),
                bias: pb.add(format!("{name}.up.bias"), &[c_in], Init::Zeros),
                c_in,
                c_out: c_in,
                kernel: 4,
                stride: 2,
                pad: 1,
            };
            up.push(UpLevel { res, up: upc });
        }

        let c0 = cfg.down_dims[0];
        let final_block = ConvBlock::new(&mut pb, "final.block", c0, c0, k, g);
        let final_conv = Conv1d {
            weight: pb.add("final.proj.weight", &[cfg.input_channels, c0, 1], Init::Uniform(1.0 / (c0 as f64).sqrt())),
            bias: pb.add("final.proj.bias", &[cfg.input_channels], Init::Zeros),
            c_in: c0,
            c_out: cfg.input_channels,
            kernel: 1,
            stride: 1,
            pad: 0,
        };

        Ok(Self {
            cfg,
            builder_specs: pb.specs(),
            builder: std::sync::Arc::new(pb),
            step1,
            step2,
            down,
            mid,
            up,
            final_block,
            final_conv,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn param_specs(&self) -> &std::sync::Arc<Vec<super::params::ParamSpec>> {
        &self.builder_specs
    }

    pub fn init_params<R: Real, G: Rng + ?Sized>(&self, rng: &mut G) -> ParameterStore<R> {
        self.builder.initialize(rng)
    }

    pub fn final_bias(&self) -> super::params::ParamId {
        self.final_conv.bias
    }

    pub fn final_weight(&self) -> super::params::ParamId {
        self.final_conv.weight
    }

    fn check_inputs<R: Real>(&self, x: &Feat<R>, steps: &[usize], obs: &Rows<R>) -> Result<()> {
        let mismatch = |e: String, g: String| Err(Error::ShapeMismatch { expected: e, got: g });
        if x.c != self.cfg.input_channels {
            return mismatch(format!("{} action channels", self.cfg.input_channels), format!("{}", x.c));
        }
        if !self.cfg.accepts_horizon(x.t) {
            return mismatch(
                format!("horizon divisible by {}", 1 << (self.cfg.down_dims.len() - 1)),
                format!("{}", x.t),
            );
        }
        if steps.len() != x.b || obs.b != x.b {
            return mismatch(format!("batch {}", x.b), format!("{} steps, {} observations", steps.len(), obs.b));
        }
        if obs.f != self.cfg.cond_dim {
            return mismatch(format!("observation width {}", self.cfg.cond_dim), format!("{}", obs.f));
        }
        Ok(())
    }

    pub fn forward<R: Real>(&self, p: &ParameterStore<R>, x: &Feat<R>, steps: &[usize], obs: &Rows<R>) -> Result<Feat<R>> {
        Ok(self.forward_tape(p, x, steps, obs)?.0)
    }

    pub fn forward_tape<R: Real>(
        &self,
        p: &ParameterStore<R>,
        x: &Feat<R>,
        steps: &[usize],
        obs: &Rows<R>,
    ) -> Result<(Feat<R>, Tape<R>)> {
        self.check_inputs(x, steps, obs)?;
        let b = x.b;
        let dsed = self.cfg.step_embed_dim;
        let mut emb = Vec::with_capacity(b * dsed);
        for &k in steps {
            emb.extend(sinusoidal_embedding(k as f64, dsed)?.into_iter().map(R::lit));
        }
        let emb = Rows { b, f: dsed, data: emb };
        let step_hidden = self.step1.forward(p, &emb);
        let step_act = Rows { b, f: step_hidden.f, data: mish_forward(&step_hidden.data) };
        let step_feat = self.step2.forward(p, &step_act);

        let cw = dsed + self.cfg.cond_dim;
        let mut cond = Vec::with_capacity(b * cw);
        for bi in 0..b {
            cond.extend_from_slice(&step_feat.data[bi * dsed..(bi + 1) * dsed]);
            cond.extend_from_slice(&obs.data[bi * obs.f..(bi + 1) * obs.f]);
        }
        let cond = Rows { b, f: cw, data: cond };
        let cond_act = Rows { b, f: cw, data: mish_forward(&cond.data) };

        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.down.len());
        let mut down_caches = Vec::with_capacity(self.down.len());
        for level in &self.down {
            let (h0, c0) = level.res[0].forward(p, &h, &cond_act);
            let (h1, c1) = level.res[1].forward(p, &h0, &cond_act);
            skips.push(h1.clone());
            let dc = match &level.down {
                Some(conv) => {
                    let (hd, cc) = conv.forward(p, &h1);
                    h = hd;
                    Some(cc)
                }
                None => {
                    h = h1;
                    None
                }
            };
            down_caches.push(([c0, c1], dc));
        }

        let (m0, mc0) = self.mid[0].forward(p, &h, &cond_act);
        let (m1, mc1) = self.mid[1].forward(p, &m0, &cond_act);
        h = m1;

        let mut up_caches = Vec::with_capacity(self.up.len());
        for level in &self.up {
            let skip = skips.pop().expect("one skip per up level");
            let skip_channels = skip.c;
            let cat = h.concat_channels(&skip);
            let (u0, c0) = level.res[0].forward(p, &cat, &cond_act);
            let (u1, c1) = level.res[1].forward(p, &u0, &cond_act);
            let (uu, cu) = level.up.forward(p, &u1);
            h = uu;
            up_caches.push(UpCache { skip_channels, res: [c0, c1], up: cu });
        }

        let (f, fb) = self.final_block.forward(p, &h);
        let (out, fc) = self.final_conv.forward(p, &f);
        let tape = Tape {
            emb,
            step_hidden,
            step_act,
            cond,
            cond_act,
            down: down_caches,
            mid: [mc0, mc1],
            up: up_caches,
            final_block: fb,
            final_conv: fc,
        };
        Ok((out, tape))
    }

    /// Gradients of `sum(dout * output)` with respect to every parameter.
    pub fn backward<R: Real>(&self, p: &ParameterStore<R>, tape: &Tape<R>, dout: &Feat<R>) -> Gradients<R> {
        let mut g = p.zeros_like();
        let mut dcond = Rows { b: tape.cond.b, f: tape.cond.f, data: vec![R::zero(); tape.cond.data.len()] };
        let cond = &tape.cond_act;

        let d = self.final_conv.backward(p, &mut g, &tape.final_conv, dout);
        let mut d = self.final_block.backward(p, &mut g, &tape.final_block, d);

        let mut dskips: Vec<Feat<R>> = Vec::with_capacity(self.up.len());
        for (level, cache) in self.up.iter().zip(&tape.up).rev() {
            let du = level.up.backward(p, &mut g, &cache.up, &d);
            let du = level.res[1].backward(p, &mut g, &cache.res[1], cond, &mut dcond, &du);
            let dcat = level.res[0].backward(p, &mut g, &cache.res[0], cond, &mut dcond, &du);
            let keep = dcat.c - cache.skip_channels;
            let (dh, dskip) = dcat.split_channels(keep);
            dskips.push(dskip);
            d = dh;
        }
        // dskips now runs from the shallowest consumed skip to the deepest

        let d1 = self.mid[1].backward(p, &mut g, &tape.mid[1], cond, &mut dcond, &d);
        d = self.mid[0].backward(p, &mut g, &tape.mid[0], cond, &mut dcond, &d1);

        for (i, (level, (res_caches, down_cache))) in self.down.iter().zip(&tape.down).enumerate().rev() {
            let mut dh = match (&level.down, down_cache) {
                (Some(conv), Some(c)) => conv.backward(p, &mut g, c, &d),
                _ => d.clone(),
            };
            // the shallowest skip is never consumed
            if i >= 1 {
                let ds = &dskips[i - 1];
                dh.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += *b);
            }
            let d0 = level.res[1].backward(p, &mut g, &res_caches[1], cond, &mut dcond, &dh);
            d = level.res[0].backward(p, &mut g, &res_caches[0], cond, &mut dcond, &d0);
        }

        mish_backward(&tape.cond.data, &mut dcond.data);
        let dsed = self.cfg.step_embed_dim;
        let mut dstep = Vec::with_capacity(tape.cond.b * dsed);
        for row in dcond.data.chunks(tape.cond.f) {
            dstep.extend_from_slice(&row[..dsed]);
        }
        let dstep = Rows { b: tape.cond.b, f: dsed, data: dstep };
        let mut dact = self.step2.backward(p, &mut g, &tape.step_act, &dstep);
        mish_backward(&tape.step_hidden.data, &mut dact.data);
        self.step1.backward(p, &mut g, &tape.emb, &dact);
        g
    }
}

/// Batch-major `[b][t][c]` sequences to a channel-major feature map.
pub fn sequences_to_feat<R: Real>(data: &[R], b: usize, t: usize, c: usize) -> Feat<R> {
    assert_eq!(data.len(), b * t * c);
    let mut out = Feat::zeros(c, b, t);
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                out.data[(ci * b + bi) * t + ti] = data[(bi * t + ti) * c + ci];
            }
        }
    }
    out
}

pub fn feat_to_sequences<R: Real>(f: &Feat<R>) -> Vec<R> {
    let mut out = vec![R::zero(); f.len()];
    for bi in 0..f.b {
        for ti in 0..f.t {
            for ci in 0..f.c {
                out[(bi * f.t + ti) * f.c + ci] = f.data[(ci * f.b + bi) * f.t + ti];
            }
        }
    }
    out
}
