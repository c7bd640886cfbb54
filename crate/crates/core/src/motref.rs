//! Flow-guided motion reference: residual offset prediction on top of a
//! downsampled flow prior, bilinear backward warping of the previous
//! frame's features and gated blending with the current frame.

use rand::Rng;

use crate::autograd::{warp_forward, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::params::ModelParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Offset-network weights plus the gate and blend scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct MotRefParams<T> {
    pub off1_w: Tensor<T>,
    pub off1_b: Tensor<T>,
    pub off2_w: Tensor<T>,
    pub off2_b: Tensor<T>,
    pub gamma: Tensor<T>,
    pub alpha: Tensor<T>,
}

impl<T: Scalar> MotRefParams<T> {
    /// Identity initialization for features with `channels` channels.
    pub fn init<R: Rng>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let fan_in = (2 * channels + 2) * 9;
        MotRefParams {
            off1_w: Tensor::randn(&[hidden, 2 * channels + 2, 3, 3], (1.0 / fan_in as f64).sqrt(), rng),
            off1_b: Tensor::zeros(&[hidden]),
            off2_w: Tensor::zeros(&[2, hidden, 3, 3]),
            off2_b: Tensor::zeros(&[2]),
            gamma: Tensor::zeros(&[1]),
            alpha: Tensor::ones(&[1]),
        }
    }

    /// The motion reference weights stored for network site `site`.
    pub fn from_model(params: &ModelParams<T>, site: &str) -> Self {
        let g = |n: &str| params.get(&format!("motref/{site}.{n}")).clone();
        MotRefParams {
            off1_w: g("off1.w"),
            off1_b: g("off1.b"),
            off2_w: g("off2.w"),
            off2_b: g("off2.b"),
            gamma: g("gamma"),
            alpha: g("alpha"),
        }
    }

    pub fn channels(&self) -> usize {
        (self.off1_w.dim(1) - 2) / 2
    }

    fn leaves(&self, tape: &mut Tape<T>) -> MotRefVars {
        MotRefVars {
            off1_w: tape.constant(self.off1_w.clone()),
            off1_b: tape.constant(self.off1_b.clone()),
            off2_w: tape.constant(self.off2_w.clone()),
            off2_b: tape.constant(self.off2_b.clone()),
            gamma: tape.constant(self.gamma.clone()),
            alpha: tape.constant(self.alpha.clone()),
        }
    }
}

/// Tape handles of one site's motion reference weights.
#[derive(Clone, Copy, Debug)]
pub struct MotRefVars {
    pub off1_w: Var,
    pub off1_b: Var,
    pub off2_w: Var,
    pub off2_b: Var,
    pub gamma: Var,
    pub alpha: Var,
}

impl MotRefVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>, site: &str) -> Self {
        let mut b = |n: &str| params.bind(tape, &format!("motref/{site}.{n}"));
        MotRefVars {
            off1_w: b("off1.w"),
            off1_b: b("off1.b"),
            off2_w: b("off2.w"),
            off2_b: b("off2.b"),
            gamma: b("gamma"),
            alpha: b("alpha"),
        }
    }
}

/// `prev, next: [n, C, H, W]`, `flow: [n, 2, H, W]` -> offsets `[n, 2, H, W]`.
pub fn offsets_on_tape<T: Scalar>(tape: &mut Tape<T>, v: &MotRefVars, prev: Var, next: Var, flow: Var) -> Var {
    let s = tape.shape(prev).to_vec();
    let limit = T::of(s[2].max(s[3]) as f64);
    let x = tape.concat(&[prev, next, flow], 1);
    let h = tape.conv2d(x, v.off1_w, Some(v.off1_b), 1, 1);
    let h = tape.silu(h);
    let r = tape.conv2d(h, v.off2_w, Some(v.off2_b), 1, 1);
    let omega = tape.add(flow, r);
    tape.clamp(omega, -limit, limit)
}

/// Enhanced `next`: `gamma * warp(prev, offsets) + alpha * next`.
pub fn step_on_tape<T: Scalar>(tape: &mut Tape<T>, v: &MotRefVars, prev: Var, next: Var, flow: Var) -> Var {
    let omega = offsets_on_tape(tape, v, prev, next, flow);
    let warped = tape.warp(prev, omega);
    let a = tape.mul_scalar(warped, v.gamma);
    let b = tape.mul_scalar(next, v.alpha);
    tape.add(a, b)
}

/// `h: [f, C, H, W]` frames of one clip, `flows: [f - 1, 2, H, W]` pairing
/// frames `(i, i + 1)`. Frame 0 passes through; later frames are enhanced
/// from their un-enhanced predecessor.
pub fn sequence_on_tape<T: Scalar>(tape: &mut Tape<T>, v: &MotRefVars, h: Var, flows: Var) -> Var {
    let f = tape.shape(h)[0];
    if f == 1 {
        return h;
    }
    let prev = tape.slice(h, 0, 0, f - 1);
    let next = tape.slice(h, 0, 1, f - 1);
    let tail = step_on_tape(tape, v, prev, next, flows);
    let head = tape.slice(h, 0, 0, 1);
    tape.concat(&[head, tail], 0)
}

/// Stacks per-pair flows into `[n, 2, H, W]`.
pub fn flows_tensor<T: Scalar>(flows: &[FlowField]) -> Result<Tensor<T>> {
    let parts = flows
        .iter()
        .map(|f| f.to_tensor::<T>().reshape(&[1, 2, f.height(), f.width()]))
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Err(Error::Input("no flow fields".into()));
    }
    Tensor::cat0(&parts)
}

fn as_batch<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.rank() {
        3 => Ok((x.clone().reshape(&[1, x.dim(0), x.dim(1), x.dim(2)])?, true)),
        4 => Ok((x.clone(), false)),
        _ => Err(Error::Input(format!("expected [C, H, W] or [n, C, H, W], got {:?}", x.shape()))),
    }
}

fn check_flow<T: Scalar>(x: &Tensor<T>, flow: &FlowField) -> Result<()> {
    let r = x.rank();
    if x.dim(r - 2) != flow.height() || x.dim(r - 1) != flow.width() {
        return Err(Error::Input(format!(
            "flow {}x{} does not match features {:?}",
            flow.height(),
            flow.width(),
            x.shape()
        )));
    }
    Ok(())
}

/// Samples `field` at `p + flow(p)` with bilinear weights, clamping
/// coordinates to the grid. Accepts `[C, H, W]` or `[n, C, H, W]`; the same
/// flow is applied to every item.
pub fn bilinear_warp<T: Scalar>(field: &Tensor<T>, flow: &FlowField) -> Result<Tensor<T>> {
    let (batch, squeeze) = as_batch(field)?;
    check_flow(&batch, flow)?;
    let n = batch.dim(0);
    let ft = flows_tensor::<T>(&vec![flow.clone(); n])?;
    let out = warp_forward(&batch, &ft);
    if squeeze {
        out.reshape(field.shape())
    } else {
        Ok(out)
    }
}

fn check_pair<T: Scalar>(h_prev: &Tensor<T>, h_next: &Tensor<T>, flow: &FlowField, params: &MotRefParams<T>) -> Result<()> {
    if h_prev.shape() != h_next.shape() || h_prev.rank() != 3 {
        return Err(Error::Input(format!(
            "features {:?} and {:?} must share a [C, H, W] shape",
            h_prev.shape(),
            h_next.shape()
        )));
    }
    if h_prev.dim(0) != params.channels() {
        return Err(Error::Input(format!(
            "features have {} channels, offset network expects {}",
            h_prev.dim(0),
            params.channels()
        )));
    }
    check_flow(h_prev, flow)
}

fn pair_vars<T: Scalar>(tape: &mut Tape<T>, h_prev: &Tensor<T>, h_next: &Tensor<T>, flow: &FlowField) -> Result<(Var, Var, Var)> {
    let s = h_prev.shape();
    let b = [1, s[0], s[1], s[2]];
    let prev = tape.constant(h_prev.clone().reshape(&b)?);
    let next = tape.constant(h_next.clone().reshape(&b)?);
    let fl = tape.constant(flows_tensor(std::slice::from_ref(flow))?);
    Ok((prev, next, fl))
}

/// Offsets `[2, H, W]` for a `[C, H, W]` feature pair.
pub fn predict_offsets<T: Scalar>(h_prev: &Tensor<T>, h_next: &Tensor<T>, flow_down: &FlowField, params: &MotRefParams<T>) -> Result<Tensor<T>> {
    check_pair(h_prev, h_next, flow_down, params)?;
    let mut tape = Tape::inference();
    let v = params.leaves(&mut tape);
    let (prev, next, fl) = pair_vars(&mut tape, h_prev, h_next, flow_down)?;
    let om = offsets_on_tape(&mut tape, &v, prev, next, fl);
    tape.into_value(om).reshape(&[2, flow_down.height(), flow_down.width()])
}

pub fn motref_step<T: Scalar>(h_prev: &Tensor<T>, h_next: &Tensor<T>, flow_down: &FlowField, params: &MotRefParams<T>) -> Result<Tensor<T>> {
    check_pair(h_prev, h_next, flow_down, params)?;
    let mut tape = Tape::inference();
    let v = params.leaves(&mut tape);
    let (prev, next, fl) = pair_vars(&mut tape, h_prev, h_next, flow_down)?;
    let out = step_on_tape(&mut tape, &v, prev, next, fl);
    tape.into_value(out).reshape(h_next.shape())
}

/// Enhances a sequence of `[C, H, W]` features given flows pairing `(i, i + 1)`.
pub fn motref_sequence<T: Scalar>(latents: &[Tensor<T>], flows_down: &[FlowField], params: &MotRefParams<T>) -> Result<Vec<Tensor<T>>> {
    if latents.is_empty() || flows_down.len() + 1 != latents.len() {
        return Err(Error::Contract(format!(
            "{} features need {} flows, got {}",
            latents.len(),
            latents.len().saturating_sub(1),
            flows_down.len()
        )));
    }
    let mut out = vec![latents[0].clone()];
    for (i, flow) in flows_down.iter().enumerate() {
        out.push(motref_step(&latents[i], &latents[i + 1], flow, params)?);
    }
    Ok(out)
}
