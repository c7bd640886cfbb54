//! The editing noise predictor: a three-level convolutional encoder-decoder
//! with reference cross-attention, optionally inflated with per-site motion
//! reference and temporal attention over the frames of a clip.

use crate::autograd::{Tape, Var};
use crate::codec::encode_latent;
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::flow::{downsample_flow, estimate_flow, FlowField};
use crate::media::{Frame, CODEC_FACTOR};
use crate::motref::{flows_tensor, sequence_on_tape, MotRefVars};
use crate::params::{ModelParams, SITES, TIME_FEATURES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::params::{load_checkpoint, save_checkpoint};

/// Pyramid levels used when estimating conditioning flows on frames.
pub const FLOW_LEVELS: usize = 3;
pub const FLOW_ITERS: usize = 3;

/// Channel order of the spatial network input.
pub const INPUT_ORDER: [&str; 4] = ["noised_latent", "masked_latent", "keep_mask", "depth"];

/// Structural description of a conditioning bundle, compared between the
/// fine-tuning and editing paths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditioningLayout {
    pub channel_order: Vec<&'static str>,
    pub latent_channels: usize,
    pub input_channels: usize,
    /// Value of the keep mask on preserved content.
    pub keep_value: u8,
    /// Whether masked latents are exactly zero wherever keep is zero.
    pub zeroed_outside_keep: bool,
    pub reference_per_frame: bool,
}

/// Per-frame conditioning for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T> {
    /// `[f, C, H, W]`, clean latents multiplied by the keep mask.
    pub masked_latents: Tensor<T>,
    /// `[f, 1, H, W]`, 1 on preserved content.
    pub keep_masks: Tensor<T>,
    /// `[f, 1, H, W]`.
    pub depth: Tensor<T>,
    /// Encoded reference latent, `[1, C, H, W]` shared or `[f, C, H, W]` per frame.
    pub reference: Tensor<T>,
}

impl<T: Scalar> ConditioningBundle<T> {
    /// Builds the bundle from clean latents `[f, C, H, W]`, binary keep masks
    /// and depth `[f, 1, H, W]`, zeroing latents outside the keep region.
    pub fn from_clean(z0: &Tensor<T>, keep_masks: Tensor<T>, depth: Tensor<T>, reference: Tensor<T>) -> Result<Self> {
        if z0.rank() != 4 {
            return Err(Error::Input(format!("latents must be [f, C, H, W], got {:?}", z0.shape())));
        }
        let s = z0.shape();
        let side = [s[0], 1, s[2], s[3]];
        keep_masks.expect_shape(&side)?;
        depth.expect_shape(&side)?;
        let plane = s[2] * s[3];
        let mut masked = z0.clone();
        for (i, chunk) in masked.data_mut().chunks_mut(s[1] * plane).enumerate() {
            let keep = &keep_masks.data()[i * plane..(i + 1) * plane];
            for ch in chunk.chunks_mut(plane) {
                for (v, &k) in ch.iter_mut().zip(keep) {
                    *v = if k == T::zero() { T::zero() } else { *v * k };
                }
            }
        }
        let bundle = ConditioningBundle {
            masked_latents: masked,
            keep_masks,
            depth,
            reference,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn frames(&self) -> usize {
        self.masked_latents.dim(0)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.masked_latents.shape();
        if s.len() != 4 {
            return Err(Error::Contract(format!("masked latents {:?} must be rank 4", s)));
        }
        let side = [s[0], 1, s[2], s[3]];
        if self.keep_masks.shape() != side || self.depth.shape() != side {
            return Err(Error::Contract(format!(
                "keep {:?} / depth {:?} do not match latents {:?}",
                self.keep_masks.shape(),
                self.depth.shape(),
                s
            )));
        }
        let r = self.reference.shape();
        if r.len() != 4 || !(r[0] == 1 || r[0] == s[0]) || r[1..] != s[1..] {
            return Err(Error::Contract(format!("reference latent {:?} vs latents {:?}", r, s)));
        }
        if self.keep_masks.data().iter().any(|&k| k != T::zero() && k != T::one()) {
            return Err(Error::Contract("keep masks must be binary".into()));
        }
        if !self.layout().zeroed_outside_keep {
            return Err(Error::Contract("masked latents are nonzero outside the keep region".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ConditioningLayout {
        let s = self.masked_latents.shape();
        let plane = s[2] * s[3];
        let zeroed = self
            .masked_latents
            .data()
            .chunks(s[1] * plane)
            .zip(self.keep_masks.data().chunks(plane))
            .all(|(z, k)| z.chunks(plane).all(|ch| ch.iter().zip(k).all(|(&v, &kv)| kv != T::zero() || v == T::zero())));
        ConditioningLayout {
            channel_order: INPUT_ORDER.to_vec(),
            latent_channels: s[1],
            input_channels: 2 * s[1] + 2,
            keep_value: 1,
            zeroed_outside_keep: zeroed,
            reference_per_frame: self.reference.dim(0) != 1 || s[0] == 1,
        }
    }

    /// Frames `start..start + len` of the bundle.
    pub fn narrow(&self, start: usize, len: usize) -> Self {
        ConditioningBundle {
            masked_latents: self.masked_latents.narrow0(start, len),
            keep_masks: self.keep_masks.narrow0(start, len),
            depth: self.depth.narrow0(start, len),
            reference: if self.reference.dim(0) == 1 {
                self.reference.clone()
            } else {
                self.reference.narrow0(start, len)
            },
        }
    }
}

/// Reference features on a tape: global embedding `[n, E]` and one map per level.
#[derive(Clone, Copy, Debug)]
pub struct RefVars {
    pub global: Var,
    pub levels: [Var; 3],
}

/// Reference features as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct RefFeatures<T> {
    /// `[n, E]`.
    pub global_embedding: Tensor<T>,
    /// `[n, C_l, H_l, W_l]` per level.
    pub level_features: Vec<Tensor<T>>,
    pub null: bool,
}

/// Encodes reference latents `[n, C, H, W]`; the null branch returns the
/// learned null embedding and zero level maps.
pub fn encode_reference_on_tape<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, latent: Var, null: bool) -> RefVars {
    let cfg = params.config();
    let s = tape.shape(latent).to_vec();
    if null {
        let e = params.bind(tape, "refenc/null");
        let e = tape.reshape(e, &[1, cfg.embed_dim]);
        let global = tape.expand0(e, s[0]);
        let mut levels = [global; 3];
        let (mut h, mut w) = (s[2], s[3]);
        for (l, slot) in levels.iter_mut().enumerate() {
            if l > 0 {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
            *slot = tape.constant(Tensor::zeros(&[s[0], cfg.ref_channels[l], h, w]));
        }
        return RefVars { global, levels };
    }
    let mut x = latent;
    let mut levels = [latent; 3];
    for (l, name) in ["c0", "c1", "c2"].into_iter().enumerate() {
        let w = params.bind(tape, &format!("refenc/{name}.w"));
        let b = params.bind(tape, &format!("refenc/{name}.b"));
        let stride = if l == 0 { 1 } else { 2 };
        let y = tape.conv2d(x, w, Some(b), stride, 1);
        x = tape.silu(y);
        levels[l] = x;
    }
    let pooled = tape.mean_spatial(x);
    let w = params.bind(tape, "refenc/glob.w");
    let b = params.bind(tape, "refenc/glob.b");
    let g = tape.matmul(pooled, w);
    let global = tape.last_bias(g, b);
    RefVars { global, levels }
}

/// Reference features of a frame.
pub fn reference_encode<T: Scalar>(reference: &Frame, params: &ModelParams<T>, null: bool) -> Result<RefFeatures<T>> {
    let z = encode_latent::<T>(reference)?;
    let s = z.shape().to_vec();
    let z = z.reshape(&[1, s[0], s[1], s[2]])?;
    if s[0] != params.config().latent_channels {
        return Err(Error::Contract(format!(
            "reference latent has {} channels, model expects {}",
            s[0],
            params.config().latent_channels
        )));
    }
    let mut tape = Tape::inference();
    let zv = tape.constant(z);
    let r = encode_reference_on_tape(&mut tape, params, zv, null);
    Ok(RefFeatures {
        global_embedding: tape.value(r.global).clone(),
        level_features: r.levels.iter().map(|&v| tape.value(v).clone()).collect(),
        null,
    })
}

/// Global embedding of a frame as `f64` values, used as the feature space of
/// the benchmark metrics.
pub fn embed_frame<T: Scalar>(frame: &Frame, params: &ModelParams<T>) -> Result<Vec<f64>> {
    Ok(reference_encode(frame, params, false)?
        .global_embedding
        .data()
        .iter()
        .map(|v| v.f64())
        .collect())
}

/// Sinusoidal features `[len, dim]` of integer timesteps.
pub fn timestep_features<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    sinusoid(ts.iter().map(|&t| t as f64), dim, ts.len())
}

fn sinusoid<T: Scalar>(positions: impl Iterator<Item = f64>, dim: usize, len: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(len * dim);
    for p in positions {
        for k in 0..dim {
            let freq = (-(10000f64.ln()) * (k % half.max(1)) as f64 / half.max(1) as f64).exp();
            data.push(T::of(if k < half { (p * freq).sin() } else { (p * freq).cos() }));
        }
    }
    Tensor::from_vec(&[len, dim], data).expect("sinusoid shape")
}

/// Temporal position encoding `[f, c]`.
pub fn temporal_encoding<T: Scalar>(frames: usize, channels: usize) -> Tensor<T> {
    sinusoid((0..frames).map(|i| i as f64), channels, frames)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, x: Var, name: &str) -> Var {
    let w = params.bind(tape, &format!("{name}.w"));
    let b = params.bind(tape, &format!("{name}.b"));
    let y = tape.matmul(x, w);
    tape.last_bias(y, b)
}

fn conv<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, x: Var, name: &str, stride: usize) -> Var {
    let w = params.bind(tape, &format!("{name}.w"));
    let b = params.bind(tape, &format!("{name}.b"));
    let k = tape.shape(w)[2];
    tape.conv2d(x, w, Some(b), stride, k / 2)
}

/// `[n, C, H, W] -> [n, H W, C]`.
fn to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 3, 1]);
    tape.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

fn from_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Var {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], h, w, s[2]]);
    tape.permute(r, &[0, 3, 1, 2])
}

fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Var {
    let c = *tape.shape(q).last().unwrap();
    let logits = tape.bmm(q, k, true);
    let logits = tape.scale(logits, T::one() / T::of(c as f64).sqrt());
    let a = tape.softmax(logits);
    tape.bmm(a, v, false)
}

/// Group normalization with up to 8 groups.
fn norm<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let c = tape.shape(x)[1];
    let groups = [8, 4, 2, 1].into_iter().find(|g| c % g == 0).expect("1 divides");
    tape.group_norm(x, groups)
}

fn res_block<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, x: Var, temb: Var, name: &str) -> Var {
    let a = norm(tape, x);
    let a = tape.silu(a);
    let a = conv(tape, params, a, &format!("{name}.conv1"), 1);
    let e = linear(tape, params, temb, &format!("{name}.temb"));
    let e = if tape.shape(e)[0] == 1 {
        let c = tape.shape(e)[1];
        tape.reshape(e, &[c])
    } else {
        e
    };
    let a = tape.channel_bias(a, e);
    let a = norm(tape, a);
    let a = tape.silu(a);
    let a = conv(tape, params, a, &format!("{name}.conv2"), 1);
    let skip = if params.id(&format!("{name}.skip.w")).is_some() {
        conv(tape, params, x, &format!("{name}.skip"), 1)
    } else {
        x
    };
    tape.add(skip, a)
}

fn cross_attention<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, x: Var, refs: &RefVars, level: usize, name: &str) -> Var {
    let s = tape.shape(x).to_vec();
    let n = s[0];
    let xn = norm(tape, x);
    let tokens = to_tokens(tape, xn);
    let q = linear(tape, params, tokens, &format!("{name}.q"));
    let lvl = to_tokens(tape, refs.levels[level]);
    let k_l = linear(tape, params, lvl, &format!("{name}.k_lvl"));
    let v_l = linear(tape, params, lvl, &format!("{name}.v_lvl"));
    let nr = tape.shape(refs.global)[0];
    let g = tape.reshape(refs.global, &[nr, 1, params.config().embed_dim]);
    let k_g = linear(tape, params, g, &format!("{name}.k_glob"));
    let v_g = linear(tape, params, g, &format!("{name}.v_glob"));
    let mut k = tape.concat(&[k_l, k_g], 1);
    let mut v = tape.concat(&[v_l, v_g], 1);
    if nr != n {
        k = tape.expand0(k, n);
        v = tape.expand0(v, n);
    }
    let o = attention(tape, q, k, v);
    let o = linear(tape, params, o, &format!("{name}.out"));
    let o = from_tokens(tape, o, s[2], s[3]);
    tape.add(x, o)
}

/// Temporal self-attention across the `f` frames of `x: [f, C, H, W]` at each
/// spatial location, added residually through a zero-initialized projection.
pub fn motion_module_on_tape<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, x: Var, site: &str) -> Var {
    let s = tape.shape(x).to_vec();
    let (f, c, h, w) = (s[0], s[1], s[2], s[3]);
    if f == 1 {
        return x;
    }
    let xn = norm(tape, x);
    let p = tape.permute(xn, &[2, 3, 0, 1]);
    let tokens = tape.reshape(p, &[h * w, f, c]);
    let pe = temporal_encoding::<T>(f, c).reshape(&[1, f, c]).expect("encoding shape");
    let pe = tape.constant(pe);
    let pe = tape.expand0(pe, h * w);
    let tokens = tape.add(tokens, pe);
    let q = linear(tape, params, tokens, &format!("motion/{site}.q"));
    let k = linear(tape, params, tokens, &format!("motion/{site}.k"));
    let v = linear(tape, params, tokens, &format!("motion/{site}.v"));
    let o = attention(tape, q, k, v);
    let o = linear(tape, params, o, &format!("motion/{site}.out"));
    let o = tape.reshape(o, &[h, w, f, c]);
    let o = tape.permute(o, &[2, 3, 0, 1]);
    tape.add(x, o)
}

/// Temporal attention weights `[H W, f, f]` of a site's motion module.
pub fn motion_attention_weights<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>, site: &str) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::Input(format!("features must be [f, C, H, W], got {:?}", x.shape())));
    }
    let (f, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let xv = norm(&mut tape, xv);
    let p = tape.permute(xv, &[2, 3, 0, 1]);
    let tokens = tape.reshape(p, &[h * w, f, c]);
    let pe = tape.constant(temporal_encoding::<T>(f, c).reshape(&[1, f, c])?);
    let pe = tape.expand0(pe, h * w);
    let tokens = tape.add(tokens, pe);
    let q = linear(&mut tape, params, tokens, &format!("motion/{site}.q"));
    let k = linear(&mut tape, params, tokens, &format!("motion/{site}.k"));
    let logits = tape.bmm(q, k, true);
    let logits = tape.scale(logits, T::one() / T::of(c as f64).sqrt());
    let a = tape.softmax(logits);
    Ok(tape.into_value(a))
}

/// Applies a site's motion module to plain features `[f, C, H, W]`.
pub fn motion_module_forward<T: Scalar>(features: &Tensor<T>, params: &ModelParams<T>, site: &str) -> Result<Tensor<T>> {
    if features.rank() != 4 {
        return Err(Error::Input(format!("features must be [f, C, H, W], got {:?}", features.shape())));
    }
    let mut tape = Tape::inference();
    let x = tape.constant(features.clone());
    let y = motion_module_on_tape(&mut tape, params, x, site);
    Ok(tape.into_value(y))
}

/// Inputs of one noise prediction on a tape.
pub struct ForwardInputs<'a> {
    pub noised: Var,
    pub masked: Var,
    pub keep: Var,
    pub depth: Var,
    pub reference: Var,
    pub null_reference: bool,
    /// One timestep shared by the batch, or one per item.
    pub timesteps: &'a [usize],
    /// Per level `[f - 1, 2, H_l, W_l]` flows; required when inflated with f > 1.
    pub flows: Option<[Var; 3]>,
    pub inflated: bool,
}

/// Noise prediction `[n, C, H, W]` on a tape.
pub fn unet_on_tape<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, inp: &ForwardInputs) -> Result<Var> {
    let cfg = params.config();
    let s = tape.shape(inp.noised).to_vec();
    if s.len() != 4 || s[1] != cfg.latent_channels {
        return Err(Error::Contract(format!(
            "noised latents {:?} need {} channels",
            s, cfg.latent_channels
        )));
    }
    if s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::Contract(format!("latent grid {}x{} must be divisible by 4", s[2], s[3])));
    }
    let n = s[0];
    let side = [n, 1, s[2], s[3]];
    if tape.shape(inp.masked) != s.as_slice() || tape.shape(inp.keep) != side || tape.shape(inp.depth) != side {
        return Err(Error::Contract("conditioning tensors do not match noised latents".into()));
    }
    let rs = tape.shape(inp.reference).to_vec();
    if rs.len() != 4 || !(rs[0] == 1 || rs[0] == n) || rs[1..] != s[1..] {
        return Err(Error::Contract(format!("reference latent {:?} vs {:?}", rs, s)));
    }
    if !(inp.timesteps.len() == 1 || inp.timesteps.len() == n) {
        return Err(Error::Contract(format!("{} timesteps for {n} items", inp.timesteps.len())));
    }
    let temporal = inp.inflated && n > 1;
    if temporal {
        let flows = inp.flows.ok_or_else(|| Error::Contract("inflated forward needs flows".into()))?;
        for (l, &fv) in flows.iter().enumerate() {
            let want = [n - 1, 2, s[2] >> l, s[3] >> l];
            if tape.shape(fv) != want {
                return Err(Error::Contract(format!(
                    "level {l} flows {:?}, expected {:?}",
                    tape.shape(fv),
                    want
                )));
            }
        }
    }

    let tf = tape.constant(timestep_features::<T>(inp.timesteps, TIME_FEATURES));
    let temb = linear(tape, params, tf, "spatial/temb.l1");
    let temb = tape.silu(temb);
    let temb = linear(tape, params, temb, "spatial/temb.l2");
    let temb = tape.silu(temb);

    let refs = encode_reference_on_tape(tape, params, inp.reference, inp.null_reference);

    let x = tape.concat(&[inp.noised, inp.masked, inp.keep, inp.depth], 1);
    let mut h = conv(tape, params, x, "spatial/in", 1);
    let mut skips = Vec::new();
    for (site, level) in SITES {
        match site {
            "enc1" => h = conv(tape, params, h, "spatial/down0", 2),
            "mid" => h = conv(tape, params, h, "spatial/down1", 2),
            "dec1" | "dec0" => {
                let up = tape.upsample2(h);
                h = conv(tape, params, up, if site == "dec1" { "spatial/up1" } else { "spatial/up0" }, 1);
                let skip = skips.pop().expect("encoder skip");
                h = tape.concat(&[h, skip], 1);
            }
            _ => {}
        }
        for r in 0..cfg.res_blocks {
            h = res_block(tape, params, h, temb, &format!("spatial/{site}.res{r}"));
        }
        h = cross_attention(tape, params, h, &refs, level, &format!("spatial/{site}.xattn"));
        if temporal {
            let mv = MotRefVars::bind(tape, params, site);
            let flows = inp.flows.expect("checked above");
            h = sequence_on_tape(tape, &mv, h, flows[level]);
            h = motion_module_on_tape(tape, params, h, site);
        }
        if site.starts_with("enc") {
            skips.push(h);
        }
    }
    let a = norm(tape, h);
    let a = tape.silu(a);
    Ok(conv(tape, params, a, "spatial/out", 1))
}

/// Backward flows between consecutive frames resampled to each latent level:
/// `result[l][i]` maps frame `i + 1` into frame `i` on the level-`l` grid.
pub fn flow_pyramid(frames: &[Frame]) -> Result<Vec<Vec<FlowField>>> {
    let mut out = vec![Vec::new(); 3];
    for i in 0..frames.len().saturating_sub(1) {
        let mut full = estimate_flow(&frames[i + 1], &frames[i], FLOW_LEVELS, FLOW_ITERS)?;
        full.from = i + 1;
        full.to = i;
        let (h, w) = (frames[i].height() / CODEC_FACTOR, frames[i].width() / CODEC_FACTOR);
        for (l, level) in out.iter_mut().enumerate() {
            level.push(downsample_flow(&full, h >> l, w >> l)?);
        }
    }
    Ok(out)
}

/// Per-level `[f - 1, 2, H_l, W_l]` tensors of a flow pyramid, or `None` for a single frame.
pub fn pyramid_tensors<T: Scalar>(pyramid: &[Vec<FlowField>]) -> Result<Option<[Tensor<T>; 3]>> {
    if pyramid.len() != 3 {
        return Err(Error::Contract(format!("flow pyramid has {} levels, expected 3", pyramid.len())));
    }
    if pyramid[0].is_empty() {
        return Ok(None);
    }
    Ok(Some([
        flows_tensor(&pyramid[0])?,
        flows_tensor(&pyramid[1])?,
        flows_tensor(&pyramid[2])?,
    ]))
}

/// Noise prediction for plain tensors.
pub fn unet_forward<T: Scalar>(
    noised: &Tensor<T>,
    cond: &ConditioningBundle<T>,
    t: usize,
    flows: Option<&[Tensor<T>; 3]>,
    params: &ModelParams<T>,
    inflated: bool,
    null_reference: bool,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let flows = flows.map(|f| [tape.constant(f[0].clone()), tape.constant(f[1].clone()), tape.constant(f[2].clone())]);
    let inp = ForwardInputs {
        noised: tape.constant(noised.clone()),
        masked: tape.constant(cond.masked_latents.clone()),
        keep: tape.constant(cond.keep_masks.clone()),
        depth: tape.constant(cond.depth.clone()),
        reference: tape.constant(cond.reference.clone()),
        null_reference,
        timesteps: &[t],
        flows,
        inflated,
    };
    let out = unet_on_tape(&mut tape, params, &inp)?;
    Ok(tape.into_value(out))
}

/// The denoiser bound to a clip's flows, usable by the sampler.
pub struct EditModel<'a, T> {
    pub params: &'a ModelParams<T>,
    pub flows: Option<[Tensor<T>; 3]>,
    pub inflated: bool,
}

impl<T: Scalar> NoisePredictor<T> for EditModel<'_, T> {
    type Cond = ConditioningBundle<T>;

    fn predict(&self, z_t: &Tensor<T>, cond: &ConditioningBundle<T>, t: usize, null_reference: bool) -> Result<Tensor<T>> {
        unet_forward(z_t, cond, t, self.flows.as_ref(), self.params, self.inflated, null_reference)
    }
}
