//! Invertible pseudo-latent codec: space-to-depth rearrangement of each
//! `s x s` RGB block into `3 s^2` channels, mapped from `[0, 1]` to `[-1, 1]`.

use crate::error::{Error, Result};
use crate::media::{Frame, CODEC_FACTOR};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn latent_channels(factor: usize) -> usize {
    3 * factor * factor
}

/// `[3 s^2, h / s, w / s]` latent of a frame. Channel `(c * s + dy) * s + dx`
/// holds pixel `(dy, dx)` of colour channel `c` within each block.
pub fn encode_latent_with<T: Scalar>(frame: &Frame, factor: usize) -> Result<Tensor<T>> {
    let (h, w) = (frame.height(), frame.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Input(format!("frame {h}x{w} not divisible by codec factor {factor}")));
    }
    let (lh, lw) = (h / factor, w / factor);
    let channels = latent_channels(factor);
    let mut out = vec![T::zero(); channels * lh * lw];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let ch = (c * factor + y % factor) * factor + x % factor;
                let v = frame.get(c, y, x) as f64;
                out[(ch * lh + y / factor) * lw + x / factor] = T::of(2.0 * (v - 0.5));
            }
        }
    }
    Tensor::from_vec(&[channels, lh, lw], out)
}

/// Inverse of [`encode_latent_with`], clamping pixels into `[0, 1]`.
pub fn decode_latent_with<T: Scalar>(latent: &Tensor<T>, factor: usize) -> Result<Frame> {
    let channels = latent_channels(factor);
    if latent.rank() != 3 || latent.dim(0) != channels {
        return Err(Error::Input(format!(
            "latent shape {:?} needs {channels} channels",
            latent.shape()
        )));
    }
    let (lh, lw) = (latent.dim(1), latent.dim(2));
    let (h, w) = (lh * factor, lw * factor);
    let mut data = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let ch = (c * factor + y % factor) * factor + x % factor;
                let v = latent.data()[(ch * lh + y / factor) * lw + x / factor].f64();
                let px = v / 2.0 + 0.5;
                data[(c * h + y) * w + x] = if px.is_nan() { 0.0 } else { px.clamp(0.0, 1.0) as f32 };
            }
        }
    }
    Frame::new(h, w, data)
}

pub fn encode_latent<T: Scalar>(frame: &Frame) -> Result<Tensor<T>> {
    encode_latent_with(frame, CODEC_FACTOR)
}

pub fn decode_latent<T: Scalar>(latent: &Tensor<T>) -> Result<Frame> {
    decode_latent_with(latent, CODEC_FACTOR)
}

/// Stacks per-frame latents into `[f, C, H, W]`.
pub fn encode_frames<T: Scalar>(frames: &[Frame]) -> Result<Tensor<T>> {
    let latents = frames
        .iter()
        .map(|f| {
            let l = encode_latent::<T>(f)?;
            let s = l.shape().to_vec();
            l.reshape(&[1, s[0], s[1], s[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat0(&latents)
}

/// Splits `[f, C, H, W]` back into frames.
pub fn decode_frames<T: Scalar>(latents: &Tensor<T>) -> Result<Vec<Frame>> {
    let s = latents.shape().to_vec();
    (0..s[0])
        .map(|i| decode_latent(&latents.narrow0(i, 1).reshape(&s[1..])?))
        .collect()
}
