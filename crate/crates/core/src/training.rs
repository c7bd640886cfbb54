//! Frame-wise pretraining of the spatial editor (stage A) and masked motion
//! modeling fine-tuning of the temporal components.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::codec::{encode_frames, encode_latent};
use crate::denoiser::{flow_pyramid, pyramid_tensors, unet_on_tape, ConditioningBundle, ForwardInputs};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::media::{pseudo_depth, temporal_downsample, Frame, TrainClip, VideoClip, CODEC_FACTOR};
use crate::params::{Group, ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    FrameWise,
    ClipWise,
}

impl MaskStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskStrategy::FrameWise => "frame_wise",
            MaskStrategy::ClipWise => "clip_wise",
        }
    }
}

/// Fine-tuning configuration; the JSON file carries exactly these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stride: usize,
    pub clip_length: usize,
    pub grid_n: usize,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub depth_zero_prob: f64,
    /// Train the motion reference network alongside the motion modules.
    pub use_motref: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stride: 4,
            clip_length: 8,
            grid_n: 8,
            mask_ratio: 0.75,
            mask_strategy: MaskStrategy::FrameWise,
            learning_rate: 1e-3,
            steps: 1000,
            seed: 0,
            depth_zero_prob: 0.3,
            use_motref: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_length < 2 {
            return Err(Error::Config(format!("clip_length {} must be at least 2", self.clip_length)));
        }
        if self.stride == 0 || self.grid_n == 0 {
            return Err(Error::Config("stride and grid_n must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..=1.0).contains(&self.depth_zero_prob) {
            return Err(Error::Config("mask_ratio and depth_zero_prob must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Frame-wise pretraining configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageAConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Probability that a step trains the unconditional (null reference) branch.
    pub ref_dropout: f64,
    pub depth_zero_prob: f64,
    /// Probability that an item uses its object mask rather than the
    /// enclosing rectangle.
    pub object_mask_prob: f64,
}

impl Default for StageAConfig {
    fn default() -> Self {
        StageAConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            steps: 5000,
            seed: 0,
            ref_dropout: 0.1,
            depth_zero_prob: 0.3,
            object_mask_prob: 0.5,
        }
    }
}

impl StageAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (k, v) in [
            ("ref_dropout", self.ref_dropout),
            ("depth_zero_prob", self.depth_zero_prob),
            ("object_mask_prob", self.object_mask_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{k} {v} must lie in [0, 1]")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Binary cell mask, 1 visible and 0 occluded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridMask {
    pub height: usize,
    pub width: usize,
    pub grid_n: usize,
    pub data: Vec<u8>,
}

impl GridMask {
    pub fn occluded_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }

    pub fn occluded_cells(&self) -> usize {
        let (ch, cw) = (self.height / self.grid_n, self.width / self.grid_n);
        let mut n = 0;
        for gy in 0..self.grid_n {
            for gx in 0..self.grid_n {
                n += usize::from(self.data[gy * ch * self.width + gx * cw] == 0);
            }
        }
        n
    }

    /// `[1, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("grid mask shape")
    }
}

/// Occludes `round(ratio N^2)` distinct cells of an `N x N` grid chosen
/// uniformly without replacement.
pub fn make_grid_mask<R: Rng>(height: usize, width: usize, n: usize, ratio: f64, rng: &mut R) -> Result<GridMask> {
    if n == 0 || height % n != 0 || width % n != 0 {
        return Err(Error::Config(format!("grid {n} does not divide {height}x{width}")));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let cells = n * n;
    let count = (ratio * cells as f64).round() as usize;
    let mut data = vec![1u8; height * width];
    let (ch, cw) = (height / n, width / n);
    for cell in sample(rng, cells, count).into_iter() {
        let (gy, gx) = (cell / n, cell % n);
        for y in gy * ch..(gy + 1) * ch {
            data[y * width + gx * cw..y * width + (gx + 1) * cw].fill(0);
        }
    }
    Ok(GridMask {
        height,
        width,
        grid_n: n,
        data,
    })
}

/// Random admissible video and start, downsampled to `clip_length` frames;
/// the first becomes the reference and the rest the training frames.
pub fn sample_training_clip<R: Rng>(dataset: &[TrainClip], cfg: &TrainConfig, rng: &mut R) -> Result<(Frame, VideoClip)> {
    cfg.validate()?;
    let span = cfg.stride * (cfg.clip_length - 1) + 1;
    let admissible: Vec<usize> = (0..dataset.len()).filter(|&i| dataset[i].video.len() >= span).collect();
    if admissible.is_empty() {
        return Err(Error::Dataset(format!(
            "no video has the {span} frames needed for stride {} and clip length {}",
            cfg.stride, cfg.clip_length
        )));
    }
    let clip = &dataset[admissible[rng.gen_range(0..admissible.len())]].video;
    let start = rng.gen_range(0..=clip.len() - span);
    let down = temporal_downsample(clip, cfg.stride, cfg.clip_length, start)?;
    let mut frames = down.into_frames();
    let reference = frames.remove(0);
    Ok((reference, VideoClip::new(frames, clip.frame_rate)?))
}

fn depth_latents<T: Scalar>(frames: &[Frame], zero: bool) -> Result<Tensor<T>> {
    let (h, w) = (frames[0].height() / CODEC_FACTOR, frames[0].width() / CODEC_FACTOR);
    if zero {
        return Ok(Tensor::zeros(&[frames.len(), 1, h, w]));
    }
    let parts: Vec<Tensor<T>> = frames
        .iter()
        .map(|f| pseudo_depth(f).to_latent::<T>(CODEC_FACTOR).reshape(&[1, 1, h, w]))
        .collect::<Result<_>>()?;
    Tensor::cat0(&parts)
}

fn batch_latent<T: Scalar>(frame: &Frame) -> Result<Tensor<T>> {
    let z = encode_latent::<T>(frame)?;
    let s = z.shape().to_vec();
    z.reshape(&[1, s[0], s[1], s[2]])
}

/// Everything one fine-tuning step feeds to the denoiser.
#[derive(Clone, Debug)]
pub struct MmmBatch<T> {
    pub t: usize,
    pub z_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub cond: ConditioningBundle<T>,
    pub masks: Vec<GridMask>,
    pub flows: Option<[Tensor<T>; 3]>,
}

/// Noises a clip at one shared timestep and grid-masks its conditioning.
pub fn prepare_mmm_batch<T: Scalar, R: Rng>(
    reference: &Frame,
    frames: &VideoClip,
    schedule: &NoiseSchedule<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<MmmBatch<T>> {
    cfg.validate()?;
    let z0 = encode_frames::<T>(frames.frames())?;
    let (f, h, w) = (z0.dim(0), z0.dim(2), z0.dim(3));
    let t = rng.gen_range(1..=schedule.steps());
    let eps = Tensor::randn(z0.shape(), 1.0, rng);
    let z_t = q_sample(&z0, t, &eps, schedule)?;
    let masks = match cfg.mask_strategy {
        MaskStrategy::FrameWise => (0..f)
            .map(|_| make_grid_mask(h, w, cfg.grid_n, cfg.mask_ratio, rng))
            .collect::<Result<Vec<_>>>()?,
        MaskStrategy::ClipWise => vec![make_grid_mask(h, w, cfg.grid_n, cfg.mask_ratio, rng)?; f],
    };
    let keep = Tensor::cat0(
        &masks
            .iter()
            .map(|m| m.to_tensor::<T>().reshape(&[1, 1, h, w]))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let zero_depth = rng.gen_bool(cfg.depth_zero_prob);
    let depth = depth_latents(frames.frames(), zero_depth)?;
    let cond = ConditioningBundle::from_clean(&z0, keep, depth, batch_latent(reference)?)?;
    let flows = pyramid_tensors(&flow_pyramid(frames.frames())?)?;
    Ok(MmmBatch {
        t,
        z_t,
        eps,
        cond,
        masks,
        flows,
    })
}

/// Mean squared error over every position.
pub fn batch_loss<T: Scalar>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<T> {
    let d = eps.zip_map(eps_hat, |a, b| (a - b) * (a - b))?;
    Ok(d.mean())
}

/// Loss value plus gradients of every trainable parameter reached.
#[derive(Clone, Debug)]
pub struct LossAndGrads<T> {
    pub loss: T,
    pub grads: Vec<(usize, Tensor<T>)>,
}

fn mmm_forward<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, batch: &MmmBatch<T>) -> Result<Var> {
    let flows = batch
        .flows
        .as_ref()
        .map(|f| [tape.constant(f[0].clone()), tape.constant(f[1].clone()), tape.constant(f[2].clone())]);
    let ts = [batch.t];
    let inp = ForwardInputs {
        noised: tape.constant(batch.z_t.clone()),
        masked: tape.constant(batch.cond.masked_latents.clone()),
        keep: tape.constant(batch.cond.keep_masks.clone()),
        depth: tape.constant(batch.cond.depth.clone()),
        reference: tape.constant(batch.cond.reference.clone()),
        null_reference: false,
        timesteps: &ts,
        flows,
        inflated: true,
    };
    let pred = unet_on_tape(tape, params, &inp)?;
    let target = tape.constant(batch.eps.clone());
    Ok(tape.mse(pred, target))
}

/// Denoising loss of the inflated model on a prepared batch.
pub fn mmm_batch_loss<T: Scalar>(params: &ModelParams<T>, batch: &MmmBatch<T>) -> Result<LossAndGrads<T>> {
    let mut tape = Tape::new();
    let loss = mmm_forward(&mut tape, params, batch)?;
    Ok(collect_grads(params, &tape, loss))
}

fn collect_grads<T: Scalar>(params: &ModelParams<T>, tape: &Tape<T>, loss: Var) -> LossAndGrads<T> {
    let value = tape.value(loss).data()[0];
    let mut g = tape.backward(loss);
    let mut grads: Vec<(usize, Tensor<T>)> = tape
        .bound()
        .filter(|&(id, _)| params.is_trainable(id))
        .filter_map(|(id, v)| g.take(v).map(|t| (id, t)))
        .collect();
    grads.sort_by_key(|(id, _)| *id);
    LossAndGrads { loss: value, grads }
}

/// Samples noise, timestep and grid masks for a clip and evaluates the loss.
pub fn mmm_loss<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    reference: &Frame,
    frames: &VideoClip,
    schedule: &NoiseSchedule<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossAndGrads<T>> {
    let batch = prepare_mmm_batch(reference, frames, schedule, cfg, rng)?;
    mmm_batch_loss(params, &batch)
}

/// Global gradient norm above which gradients are rescaled.
pub const GRAD_CLIP: f64 = 1.0;

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [(usize, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter().map(|v| v.f64() * v.f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * c);
        }
    }
    norm
}

/// First-order adaptive-moment optimizer with the usual defaults.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: HashMap<usize, Tensor<T>>,
    v: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update; gradients of non-trainable parameters are an
    /// internal contract violation.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &[(usize, Tensor<T>)]) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (id, g) in grads {
            assert!(params.is_trainable(*id), "gradient update on frozen parameter {}", params.name(*id));
            let m = self.m.entry(*id).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(*id).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.tensor_mut(*id);
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub wallclock_s: f64,
}

/// `train_log.csv` contents.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,wallclock_s\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.3}\n", r.step, r.loss, r.wallclock_s));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: Vec<LogRow>,
    /// Steps that trained the unconditional branch.
    pub null_steps: usize,
}

fn smoothed(losses: &[f64], end: usize, window: usize) -> f64 {
    let lo = end.saturating_sub(window);
    let s = &losses[lo..end];
    s.iter().sum::<f64>() / s.len() as f64
}

/// Divergence: smoothed loss above ten times its initial value once 20% of
/// the steps have run.
fn check_divergence(losses: &[f64], steps: usize) -> Result<()> {
    let last = *losses.last().expect("at least one loss");
    if !last.is_finite() {
        return Err(Error::Training(format!("non-finite loss at step {}", losses.len())));
    }
    let window = (steps / 20).clamp(1, 50);
    if losses.len() * 5 >= steps && losses.len() >= window {
        let init = smoothed(losses, window.min(losses.len()), window);
        let now = smoothed(losses, losses.len(), window);
        if now > 10.0 * init {
            return Err(Error::Training(format!(
                "training diverged: smoothed loss {now:.4} exceeds 10x the initial {init:.4}"
            )));
        }
    }
    Ok(())
}

/// Stage A: trains the spatial network and reference encoder frame-wise with
/// random object or rectangle masks and reference dropout, then freezes them.
pub fn train_stage_a<T: Scalar>(dataset: &[TrainClip], model: &ModelConfig, cfg: &StageAConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let usable: Vec<(usize, Vec<usize>)> = dataset
        .iter()
        .enumerate()
        .map(|(i, c)| (i, (0..c.video.len()).filter(|&k| !c.masks[k].is_empty()).collect::<Vec<_>>()))
        .filter(|(i, ks)| ks.len() >= 2 && dataset[*i].video.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::Dataset("no training clip shows its target in two frames".into()));
    }
    let mut params = ModelParams::<T>::new(model, cfg.seed)?;
    params.set_frozen(Group::Motion, true);
    params.set_frozen(Group::MotRef, true);
    let schedule = NoiseSchedule::<T>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa5a5);
    let mut adam = Adam::new(cfg.learning_rate);
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut null_steps = 0;
    for step in 1..=cfg.steps {
        let null = rng.gen_bool(cfg.ref_dropout);
        null_steps += usize::from(null);
        let mut z0s = Vec::new();
        let mut keeps = Vec::new();
        let mut depths = Vec::new();
        let mut refs = Vec::new();
        let mut ts = Vec::new();
        for _ in 0..cfg.batch_size {
            let (ci, ks) = &usable[rng.gen_range(0..usable.len())];
            let clip = &dataset[*ci];
            let ki = rng.gen_range(0..ks.len());
            let mut ri = rng.gen_range(0..ks.len() - 1);
            if ri >= ki {
                ri += 1;
            }
            let (k, r) = (ks[ki], ks[ri]);
            let frame = &clip.video.frames()[k];
            let mask = if rng.gen_bool(cfg.object_mask_prob) {
                clip.masks[k].clone()
            } else {
                clip.masks[k].to_rectangle(1)
            };
            let z0 = batch_latent::<T>(frame)?;
            let (h, w) = (z0.dim(2), z0.dim(3));
            z0s.push(z0);
            keeps.push(mask.keep_latent::<T>(CODEC_FACTOR).reshape(&[1, 1, h, w])?);
            depths.push(depth_latents::<T>(std::slice::from_ref(frame), rng.gen_bool(cfg.depth_zero_prob))?);
            refs.push(batch_latent::<T>(&clip.video.frames()[r])?);
            ts.push(rng.gen_range(1..=schedule.steps()));
        }
        let z0 = Tensor::cat0(&z0s)?;
        let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
        let mut z_t = z0.clone();
        let item = z0.len() / cfg.batch_size;
        for (i, &t) in ts.iter().enumerate() {
            let a = schedule.alpha_bar(t);
            let (sa, sb) = (a.sqrt(), (T::one() - a).sqrt());
            for j in i * item..(i + 1) * item {
                z_t.data_mut()[j] = sa * z0.data()[j] + sb * eps.data()[j];
            }
        }
        let cond = ConditioningBundle::from_clean(&z0, Tensor::cat0(&keeps)?, Tensor::cat0(&depths)?, Tensor::cat0(&refs)?)?;
        let mut tape = Tape::new();
        let inp = ForwardInputs {
            noised: tape.constant(z_t),
            masked: tape.constant(cond.masked_latents),
            keep: tape.constant(cond.keep_masks),
            depth: tape.constant(cond.depth),
            reference: tape.constant(cond.reference),
            null_reference: null,
            timesteps: &ts,
            flows: None,
            inflated: false,
        };
        let pred = unet_on_tape(&mut tape, &params, &inp)?;
        let target = tape.constant(eps);
        let loss = tape.mse(pred, target);
        let mut lg = collect_grads(&params, &tape, loss);
        drop(tape);
        clip_grad_norm(&mut lg.grads, GRAD_CLIP);
        let lv = lg.loss.f64();
        losses.push(lv);
        check_divergence(&losses, cfg.steps)?;
        adam.update(&mut params, &lg.grads);
        log.push(LogRow {
            step,
            loss: lv,
            wallclock_s: started.elapsed().as_secs_f64(),
        });
    }
    params.set_frozen(Group::Spatial, true);
    params.set_frozen(Group::RefEnc, true);
    params.set_frozen(Group::Motion, false);
    params.set_frozen(Group::MotRef, false);
    Ok(TrainOutcome {
        params,
        log,
        null_steps,
    })
}

/// Masked motion modeling: updates only the motion modules (and the motion
/// reference network when enabled) of a stage-A model.
pub fn train_mmm<T: Scalar>(base: &ModelParams<T>, dataset: &[TrainClip], cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if !(base.is_frozen(Group::Spatial) && base.is_frozen(Group::RefEnc)) {
        return Err(Error::Contract("fine-tuning needs a stage A model with frozen spatial and reference groups".into()));
    }
    let mut params = base.clone();
    params.use_motref = cfg.use_motref;
    params.set_frozen(Group::Motion, false);
    params.set_frozen(Group::MotRef, !cfg.use_motref);
    let schedule = NoiseSchedule::<T>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3c3c);
    let mut adam = Adam::new(cfg.learning_rate);
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let (reference, frames) = sample_training_clip(dataset, cfg, &mut rng)?;
        let mut lg = mmm_loss(&params, &reference, &frames, &schedule, cfg, &mut rng)?;
        clip_grad_norm(&mut lg.grads, GRAD_CLIP);
        let lv = lg.loss.f64();
        losses.push(lv);
        check_divergence(&losses, cfg.steps)?;
        adam.update(&mut params, &lg.grads);
        log.push(LogRow {
            step,
            loss: lv,
            wallclock_s: started.elapsed().as_secs_f64(),
        });
    }
    for g in [Group::Spatial, Group::RefEnc] {
        assert!(params.group_bits_eq(base, g), "frozen group {g:?} changed during fine-tuning");
    }
    Ok(TrainOutcome {
        params,
        log,
        null_steps: 0,
    })
}

/// Mean fine-tuning loss over `count` clips drawn from a fixed seed.
pub fn held_out_mmm_loss<T: Scalar>(params: &ModelParams<T>, dataset: &[TrainClip], cfg: &TrainConfig, count: usize, seed: u64) -> Result<f64> {
    let schedule = NoiseSchedule::<T>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..count {
        let (reference, frames) = sample_training_clip(dataset, cfg, &mut rng)?;
        let batch = prepare_mmm_batch(&reference, &frames, &schedule, cfg, &mut rng)?;
        let mut tape = Tape::inference();
        let loss = mmm_forward(&mut tape, params, &batch)?;
        total += tape.value(loss).data()[0].f64();
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::{generate_training_corpus, CorpusConfig};
    use std::collections::HashSet;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            latent_channels: 48,
            widths: [8, 8, 8],
            ref_channels: [4, 4, 4],
            embed_dim: 8,
            temb_dim: 8,
            motref_hidden: 4,
            res_blocks: 1,
        }
    }

    fn corpus(clips: usize, frames: usize, size: usize) -> Vec<TrainClip> {
        generate_training_corpus(&CorpusConfig {
            clips,
            frames,
            size,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn grid_mask_counts_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (ratio, cells) in [(0.0, 0), (0.25, 16), (0.5, 32), (0.75, 48), (1.0, 64)] {
            let m = make_grid_mask(32, 32, 8, ratio, &mut rng).unwrap();
            assert_eq!(m.occluded_cells(), cells);
            assert_eq!(m.occluded_pixels(), cells * 16);
        }
        assert!(make_grid_mask(8, 8, 8, 0.0, &mut rng).unwrap().data.iter().all(|&v| v == 1));
        assert!(make_grid_mask(8, 8, 8, 1.0, &mut rng).unwrap().data.iter().all(|&v| v == 0));
        assert!(matches!(make_grid_mask(10, 8, 8, 0.5, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn grid_masks_are_cell_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = make_grid_mask(16, 24, 8, 0.5, &mut rng).unwrap();
        for y in 0..16 {
            for x in 0..24 {
                assert_eq!(m.data[y * 24 + x], m.data[(y / 2 * 2) * 24 + x / 3 * 3]);
            }
        }
    }

    #[test]
    fn frame_wise_masks_never_collide() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10_000 / 7 + 1 {
            let masks: HashSet<Vec<u8>> = (0..7).map(|_| make_grid_mask(8, 8, 8, 0.5, &mut rng).unwrap().data).collect();
            assert_eq!(masks.len(), 7);
        }
    }

    #[test]
    fn stub_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = Tensor::<f64>::randn(&[7, 48, 64, 64], 1.0, &mut rng);
        assert_eq!(batch_loss(&eps, &eps).unwrap(), 0.0);
        let l = batch_loss(&eps, &Tensor::zeros(eps.shape())).unwrap();
        assert!((l - 1.0).abs() < 0.02, "{l}");
    }

    #[test]
    fn clip_wise_masks_are_shared() {
        let data = corpus(2, 40, 32);
        let cfg = TrainConfig {
            mask_strategy: MaskStrategy::ClipWise,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (r, frames) = sample_training_clip(&data, &cfg, &mut rng).unwrap();
        let b = prepare_mmm_batch::<f32, _>(&r, &frames, &NoiseSchedule::default(), &cfg, &mut rng).unwrap();
        assert_eq!(b.masks.len(), 7);
        assert!(b.masks.iter().all(|m| m == &b.masks[0]));
        let keep = b.cond.keep_masks.data();
        let plane = 64;
        for f in 1..7 {
            assert_eq!(&keep[f * plane..(f + 1) * plane], &keep[..plane]);
        }
    }

    #[test]
    fn minimal_clip_has_one_training_frame() {
        let data = corpus(1, 10, 16);
        let cfg = TrainConfig {
            clip_length: 2,
            ..TrainConfig::default()
        };
        let (_, frames) = sample_training_clip(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(frames.len(), 1);
    }

    #[test]
    fn stride_selects_every_fourth_frame() {
        let data = corpus(1, 29, 16);
        let cfg = TrainConfig::default();
        let (r, frames) = sample_training_clip(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let src = data[0].video.frames();
        assert_eq!(r, src[0]);
        for (i, f) in frames.frames().iter().enumerate() {
            assert_eq!(f, &src[4 * (i + 1)]);
        }
        let short = corpus(1, 28, 16);
        assert!(matches!(sample_training_clip(&short, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Dataset(_))));
    }

    #[test]
    fn clip_sampling_is_deterministic() {
        let data = corpus(3, 40, 16);
        let cfg = TrainConfig::default();
        let a = sample_training_clip(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_training_clip(&data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reference_dropout_rate() {
        let data = corpus(4, 6, 16);
        let cfg = StageAConfig {
            batch_size: 1,
            steps: 1000,
            ..StageAConfig::default()
        };
        let out = train_stage_a::<f32>(&data, &tiny_model(), &cfg).unwrap();
        assert!((70..=130).contains(&out.null_steps), "{}", out.null_steps);
        assert!(out.params.is_frozen(Group::Spatial) && out.params.is_frozen(Group::RefEnc));
        assert!(!out.params.is_frozen(Group::Motion));
        let steps: Vec<usize> = out.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, (1..=1000).collect::<Vec<_>>());
    }

    #[test]
    fn zero_step_fine_tune_is_identity() {
        let data = corpus(2, 30, 16);
        let base = train_stage_a::<f32>(&data, &tiny_model(), &StageAConfig { batch_size: 2, steps: 2, ..StageAConfig::default() })
            .unwrap()
            .params;
        let out = train_mmm(&base, &data, &TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
        assert!(out.params.names().iter().enumerate().all(|(i, _)| out.params.tensor(i).bits_eq(base.tensor(i))));
        assert!(out.log.is_empty());
    }

    #[test]
    fn fine_tune_requires_frozen_base() {
        let data = corpus(1, 30, 16);
        let p = ModelParams::<f32>::new(&tiny_model(), 0).unwrap();
        assert!(matches!(train_mmm(&p, &data, &TrainConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn fine_tune_keeps_frozen_groups_and_moves_temporal_ones() {
        let data = corpus(2, 30, 32);
        let base = train_stage_a::<f32>(&data, &tiny_model(), &StageAConfig { batch_size: 2, steps: 3, ..StageAConfig::default() })
            .unwrap()
            .params;
        let out = train_mmm(&base, &data, &TrainConfig { steps: 3, ..TrainConfig::default() }).unwrap();
        assert!(out.params.group_bits_eq(&base, Group::Spatial));
        assert!(out.params.group_bits_eq(&base, Group::RefEnc));
        assert!(!out.params.group_bits_eq(&base, Group::Motion));
        assert!(!out.params.group_bits_eq(&base, Group::MotRef));
        let again = train_mmm(&base, &data, &TrainConfig { steps: 3, ..TrainConfig::default() }).unwrap();
        assert_eq!(again.params, out.params);
        let no_ref = train_mmm(&base, &data, &TrainConfig { steps: 3, use_motref: false, ..TrainConfig::default() }).unwrap();
        assert!(no_ref.params.group_bits_eq(&base, Group::MotRef));
    }

    #[test]
    fn divergence_is_detected() {
        let mut losses = vec![1.0; 10];
        losses.extend(vec![50.0; 30]);
        assert!(matches!(check_divergence(&losses, 100), Err(Error::Training(_))));
        assert!(check_divergence(&[1.0, 2.0], 100).is_ok());
        assert!(matches!(check_divergence(&[f64::NAN], 100), Err(Error::Training(_))));
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = vec![(0, Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap()), (1, Tensor::from_vec(&[1], vec![0.0]).unwrap())];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.data()[0] - 0.6).abs() < 1e-12 && (g[0].1.data()[1] - 0.8).abs() < 1e-12);
        let before = g.clone();
        assert!((clip_grad_norm(&mut g, 2.0) - 1.0).abs() < 1e-12);
        assert_eq!(g[0].1.data(), before[0].1.data());
    }

    #[test]
    fn log_has_fixed_columns() {
        let csv = log_csv(&[LogRow { step: 1, loss: 0.5, wallclock_s: 0.25 }]);
        assert_eq!(csv, "step,loss,wallclock_s\n1,0.5,0.250\n");
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stride":4}"#).is_err());
        let text = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), TrainConfig::default());
        assert!(text.contains("\"mask_strategy\":\"frame_wise\""));
    }
}
