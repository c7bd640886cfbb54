//! Frames, masks, depth maps, benchmark triplets and the synthetic sprite
//! videos used in place of real footage.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial factor of the latent codec; frame sides must be multiples of it.
pub const CODEC_FACTOR: usize = 4;
pub const MIN_SIDE: usize = 16;

pub fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE || height % CODEC_FACTOR != 0 || width % CODEC_FACTOR != 0 {
        return Err(Error::Config(format!(
            "frame size {height}x{width} must be at least {MIN_SIDE} and divisible by {CODEC_FACTOR}"
        )));
    }
    Ok(())
}

/// RGB frame, planar channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != 3 * height * width {
            return Err(Error::Input(format!(
                "frame {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Input(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Frame { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(plane));
        }
        Frame::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn luminance(&self) -> Vec<f32> {
        let (r, g, b) = (self.channel(0), self.channel(1), self.channel(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[3, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("frame tensor shape")
    }

    /// Builds a frame from `[3, h, w]` data, clamping into `[0, 1]`.
    pub fn from_tensor_clamped<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(Error::Input(format!("expected [3, h, w], got {:?}", t.shape())));
        }
        let data = t
            .data()
            .iter()
            .map(|v| {
                let v = v.f64() as f32;
                if v.is_nan() {
                    0.0
                } else {
                    v.clamp(0.0, 1.0)
                }
            })
            .collect();
        Frame::new(t.dim(1), t.dim(2), data)
    }

    pub fn same_dims(&self, other: &Frame) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Bilinear resample of the inclusive pixel box `[y0, y1] x [x0, x1]` to a new frame.
    pub fn crop_resize(&self, bbox: BBox, out_h: usize, out_w: usize) -> Result<Frame> {
        let BBox { y0, x0, y1, x1 } = bbox;
        if y1 < y0 || x1 < x0 || y1 >= self.height || x1 >= self.width {
            return Err(Error::Input(format!("crop box {bbox:?} outside frame")));
        }
        let (ch, cw) = ((y1 - y0 + 1) as f32, (x1 - x0 + 1) as f32);
        let mut data = vec![0.0; 3 * out_h * out_w];
        for oy in 0..out_h {
            let sy = ((oy as f32 + 0.5) * ch / out_h as f32 - 0.5).clamp(0.0, ch - 1.0) + y0 as f32;
            let ya = sy.floor() as usize;
            let yb = (ya + 1).min(y1);
            let fy = sy - ya as f32;
            for ox in 0..out_w {
                let sx = ((ox as f32 + 0.5) * cw / out_w as f32 - 0.5).clamp(0.0, cw - 1.0) + x0 as f32;
                let xa = sx.floor() as usize;
                let xb = (xa + 1).min(x1);
                let fx = sx - xa as f32;
                for c in 0..3 {
                    let v = (1.0 - fy) * ((1.0 - fx) * self.get(c, ya, xa) + fx * self.get(c, ya, xb))
                        + fy * ((1.0 - fx) * self.get(c, yb, xa) + fx * self.get(c, yb, xb));
                    data[(c * out_h + oy) * out_w + ox] = v.clamp(0.0, 1.0);
                }
            }
        }
        Frame::new(out_h, out_w, data)
    }
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Frame>,
    pub frame_rate: f32,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, frame_rate: f32) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("video clip needs at least one frame".into()))?;
        if frames.iter().any(|f| !f.same_dims(first)) {
            return Err(Error::Input("video frames differ in size".into()));
        }
        Ok(VideoClip { frames, frame_rate })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

/// Binary edit mask: 1 marks the region to edit, 0 preserved content.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    bb = Some(match bb {
                        None => BBox { y0: y, x0: x, y1: y, x1: x },
                        Some(b) => BBox {
                            y0: b.y0.min(y),
                            x0: b.x0.min(x),
                            y1: b.y1.max(y),
                            x1: b.x1.max(x),
                        },
                    });
                }
            }
        }
        bb
    }

    /// Rectangle covering the bounding box grown by `margin` pixels.
    pub fn to_rectangle(&self, margin: usize) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        if let Some(b) = self.bbox() {
            let y1 = (b.y1 + margin).min(self.height - 1);
            let x1 = (b.x1 + margin).min(self.width - 1);
            for y in b.y0.saturating_sub(margin)..=y1 {
                for x in b.x0.saturating_sub(margin)..=x1 {
                    out.data[y * self.width + x] = 1;
                }
            }
        }
        out
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        }
    }

    /// Keep-mask at latent resolution: a latent cell is kept only when every
    /// pixel of its `factor x factor` block lies outside the edit region.
    pub fn keep_latent<T: Scalar>(&self, factor: usize) -> Tensor<T> {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![T::one(); h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    out[(y / factor) * w + x / factor] = T::zero();
                }
            }
        }
        Tensor::from_vec(&[1, h, w], out).unwrap()
    }
}

/// Single-channel structural conditioning map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Area average down to the latent grid.
    pub fn to_latent<T: Scalar>(&self, factor: usize) -> Tensor<T> {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![0.0f64; h * w];
        for y in 0..h * factor {
            for x in 0..w * factor {
                out[(y / factor) * w + x / factor] += self.data[y * self.width + x] as f64;
            }
        }
        let inv = 1.0 / (factor * factor) as f64;
        Tensor::from_vec(&[1, h, w], out.into_iter().map(|v| T::of(v * inv)).collect()).unwrap()
    }
}

/// Smoothed luminance as a deterministic depth stand-in: 5x5 box filter with
/// clamp-to-edge borders.
pub fn pseudo_depth(frame: &Frame) -> DepthMap {
    let (h, w) = (frame.height, frame.width);
    let lum = frame.luminance();
    DepthMap {
        height: h,
        width: w,
        data: box_filter(&lum, h, w, 2),
    }
}

pub(crate) fn box_filter(img: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f32;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    s += img[yy * w + xx];
                }
            }
            out[y as usize * w + x as usize] = (s / norm).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn zero_depth(height: usize, width: usize) -> Result<DepthMap> {
    if height == 0 || width == 0 {
        return Err(Error::Input(format!("depth map dimensions {height}x{width} must be positive")));
    }
    Ok(DepthMap {
        height,
        width,
        data: vec![0.0; height * width],
    })
}

/// Frame indices `start, start + stride, ...`, exactly `length` of them.
pub fn downsample_indices(num_frames: usize, stride: usize, length: usize, start: usize) -> Result<Vec<usize>> {
    if stride == 0 || length == 0 {
        return Err(Error::Range("stride and length must be positive".into()));
    }
    let last = start + (length - 1) * stride;
    if last >= num_frames {
        return Err(Error::Range(format!(
            "frames {start}..={last} step {stride} exceed clip of {num_frames} frames"
        )));
    }
    Ok((0..length).map(|i| start + i * stride).collect())
}

pub fn temporal_downsample(clip: &VideoClip, stride: usize, length: usize, start: usize) -> Result<VideoClip> {
    let idx = downsample_indices(clip.len(), stride, length, start)?;
    VideoClip::new(idx.iter().map(|&i| clip.frames[i].clone()).collect(), clip.frame_rate)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Application {
    TextureTransfer,
    ObjectModification,
}

impl Application {
    pub fn as_str(&self) -> &'static str {
        match self {
            Application::TextureTransfer => "texture_transfer",
            Application::ObjectModification => "object_modification",
        }
    }
}

/// Benchmark unit: source video, per-frame edit masks and a reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub application: Application,
    pub video: VideoClip,
    pub masks: Vec<Mask>,
    pub reference: Frame,
}

impl Triplet {
    pub fn new(id: String, application: Application, video: VideoClip, masks: Vec<Mask>, reference: Frame) -> Result<Self> {
        if masks.len() != video.len() {
            return Err(Error::Input(format!(
                "mask count mismatch: {} masks for {} frames",
                masks.len(),
                video.len()
            )));
        }
        if masks.iter().any(|m| m.height != video.height() || m.width != video.width()) {
            return Err(Error::Input("mask dimensions differ from frames".into()));
        }
        if masks.iter().all(Mask::is_empty) {
            return Err(Error::Input("no editable target: every mask is empty".into()));
        }
        Ok(Triplet {
            id,
            application,
            video,
            masks,
            reference,
        })
    }

    /// Depth conditioning per frame; zeroed for object modification.
    pub fn depth_maps(&self) -> Vec<DepthMap> {
        self.video
            .frames()
            .iter()
            .map(|f| match self.application {
                Application::TextureTransfer => pseudo_depth(f),
                Application::ObjectModification => zero_depth(f.height, f.width).expect("valid frame dims"),
            })
            .collect()
    }
}

// ---- synthetic sprites ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteShape {
    Disc,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Linear,
    Circular,
}

/// Oriented sinusoidal pattern `base + amp * sin(k . p + phase)` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: [f32; 3],
    pub amp: [f32; 3],
    pub freq: [f32; 2],
    pub phase: [f32; 3],
}

impl Texture {
    pub fn random<R: Rng>(rng: &mut R, max_freq: f32) -> Self {
        let angle = rng.gen_range(0.0..2.0 * PI);
        let k = rng.gen_range(0.25 * max_freq..max_freq);
        Texture {
            base: [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)],
            amp: [rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25), rng.gen_range(0.1..0.25)],
            freq: [k * angle.cos(), k * angle.sin()],
            phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        }
    }

    #[inline]
    pub fn sample(&self, x: f32, y: f32) -> [f32; 3] {
        let arg = self.freq[0] * x + self.freq[1] * y;
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (self.base[c] + self.amp[c] * (arg + self.phase[c]).sin()).clamp(0.0, 1.0);
        }
        out
    }
}

/// A filled shape with a texture fixed in its own coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub shape: SpriteShape,
    pub radius: f32,
    pub start: [f32; 2],
    /// Pixels per frame for linear motion.
    pub velocity: [f32; 2],
    pub motion: Motion,
    /// Orbit radius and angular speed (radians per frame) for circular motion.
    pub orbit: f32,
    pub omega: f32,
    pub texture: Texture,
}

/// Reflects `v` into `[lo, hi]` (triangle wave).
fn reflect(v: f32, lo: f32, hi: f32) -> f32 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let m = (v - lo).rem_euclid(2.0 * span);
    lo + if m > span { 2.0 * span - m } else { m }
}

impl Sprite {
    /// Center `[x, y]` at frame `t` within a `height x width` canvas.
    pub fn center(&self, t: usize, height: usize, width: usize) -> [f32; 2] {
        let t = t as f32;
        match self.motion {
            Motion::Linear => [
                reflect(self.start[0] + self.velocity[0] * t, self.radius, width as f32 - 1.0 - self.radius),
                reflect(self.start[1] + self.velocity[1] * t, self.radius, height as f32 - 1.0 - self.radius),
            ],
            Motion::Circular => [
                self.start[0] + self.orbit * (self.omega * t).cos(),
                self.start[1] + self.orbit * (self.omega * t).sin(),
            ],
        }
    }

    /// Whether the shape centred at `c` covers pixel `(x, y)`.
    pub fn covers(&self, c: [f32; 2], x: usize, y: usize) -> bool {
        let dx = x as f32 - c[0];
        let dy = y as f32 - c[1];
        let r = self.radius;
        match self.shape {
            SpriteShape::Disc => dx * dx + dy * dy <= r * r,
            SpriteShape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            SpriteShape::Triangle => {
                // apex up, base at dy = r
                dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteConfig {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_sprites: usize,
    pub motion: Motion,
    pub seed: u64,
}

/// Static smooth background built from a few random plane waves.
pub fn background(height: usize, width: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4c6_0d01);
    let waves: Vec<Texture> = (0..3).map(|_| Texture::random(&mut rng, 0.6)).collect();
    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0f32; 3];
            for wv in &waves {
                let s = wv.sample(x as f32, y as f32);
                for c in 0..3 {
                    acc[c] += s[c] / 3.0;
                }
            }
            for c in 0..3 {
                data[c * plane + y * width + x] = acc[c].clamp(0.0, 1.0);
            }
        }
    }
    Frame::new(height, width, data).expect("background within range")
}

/// Renders sprites (later sprites on top) over `bg` for `num_frames` frames.
/// Returns the clip and `masks[sprite][frame]` covering each rasterized sprite.
pub fn render_sprites(bg: &Frame, sprites: &[Sprite], num_frames: usize) -> Result<(VideoClip, Vec<Vec<Mask>>)> {
    let (h, w) = (bg.height, bg.width);
    let plane = h * w;
    let mut frames = Vec::with_capacity(num_frames);
    let mut masks: Vec<Vec<Mask>> = vec![Vec::with_capacity(num_frames); sprites.len()];
    for t in 0..num_frames {
        let mut data = bg.data.clone();
        for (s, sprite) in sprites.iter().enumerate() {
            let c = sprite.center(t, h, w);
            let mut m = vec![0u8; plane];
            for y in 0..h {
                for x in 0..w {
                    if sprite.covers(c, x, y) {
                        m[y * w + x] = 1;
                        let col = sprite.texture.sample(x as f32 - c[0], y as f32 - c[1]);
                        for ch in 0..3 {
                            data[ch * plane + y * w + x] = col[ch];
                        }
                    }
                }
            }
            masks[s].push(Mask::new(h, w, m)?);
        }
        frames.push(Frame::new(h, w, data)?);
    }
    Ok((VideoClip::new(frames, 24.0)?, masks))
}

pub fn random_sprite<R: Rng>(rng: &mut R, height: usize, width: usize, motion: Motion) -> Sprite {
    let side = height.min(width) as f32;
    let radius = rng.gen_range(0.14..0.22) * side;
    let shape = match rng.gen_range(0..3) {
        0 => SpriteShape::Disc,
        1 => SpriteShape::Square,
        _ => SpriteShape::Triangle,
    };
    let speed = rng.gen_range(0.2..0.6) * side / 32.0;
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (start, orbit, omega) = match motion {
        Motion::Linear => (
            [
                rng.gen_range(radius..width as f32 - 1.0 - radius),
                rng.gen_range(radius..height as f32 - 1.0 - radius),
            ],
            0.0,
            0.0,
        ),
        Motion::Circular => {
            let orbit = rng.gen_range(0.1..0.2) * side;
            let margin = radius + orbit;
            let cx = if width as f32 - 1.0 - margin > margin {
                rng.gen_range(margin..width as f32 - 1.0 - margin)
            } else {
                width as f32 / 2.0
            };
            let cy = if height as f32 - 1.0 - margin > margin {
                rng.gen_range(margin..height as f32 - 1.0 - margin)
            } else {
                height as f32 / 2.0
            };
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            ([cx, cy], orbit, dir * speed / orbit)
        }
    };
    Sprite {
        shape,
        radius,
        start,
        velocity: [speed * angle.cos(), speed * angle.sin()],
        motion,
        orbit,
        omega,
        texture: Texture::random(rng, 1.2),
    }
}

/// Deterministic sprite video: textured background plus `num_sprites` moving sprites.
pub fn generate_sprite_video(config: &SpriteConfig) -> Result<(VideoClip, Vec<Vec<Mask>>)> {
    check_dims(config.height, config.width)?;
    if config.num_frames < 2 {
        return Err(Error::Config("sprite videos need at least 2 frames".into()));
    }
    if config.num_sprites == 0 {
        return Err(Error::Config("no editable target: at least one sprite is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sprites: Vec<Sprite> = (0..config.num_sprites)
        .map(|_| random_sprite(&mut rng, config.height, config.width, config.motion))
        .collect();
    let bg = background(config.height, config.width, config.seed);
    render_sprites(&bg, &sprites, config.num_frames)
}

/// One training video together with the masks of its target sprite.
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub video: VideoClip,
    pub masks: Vec<Mask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub clips: usize,
    pub frames: usize,
    pub size: usize,
    pub triplets: usize,
    pub triplet_frames: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            clips: 200,
            frames: 60,
            size: 32,
            triplets: 24,
            triplet_frames: 8,
            seed: 0,
        }
    }
}

fn mix_seed(seed: u64, salt: u64, index: usize) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Training corpus of sprite videos; sprite 0 is the editable target.
pub fn generate_training_corpus(cfg: &CorpusConfig) -> Result<Vec<TrainClip>> {
    check_dims(cfg.size, cfg.size)?;
    (0..cfg.clips)
        .map(|i| {
            let seed = mix_seed(cfg.seed, 1, i);
            let motion = if i % 2 == 0 { Motion::Linear } else { Motion::Circular };
            let num_sprites = 1 + i % 2;
            let (video, mut masks) = generate_sprite_video(&SpriteConfig {
                num_frames: cfg.frames,
                height: cfg.size,
                width: cfg.size,
                num_sprites,
                motion,
                seed,
            })?;
            Ok(TrainClip {
                video,
                masks: masks.swap_remove(0),
            })
        })
        .collect()
}

/// Benchmark triplet `index`: even indices are texture transfer, odd ones
/// object modification. The reference shows a new sprite appearance.
pub fn generate_triplet(cfg: &CorpusConfig, index: usize) -> Result<Triplet> {
    check_dims(cfg.size, cfg.size)?;
    let application = if index % 2 == 0 {
        Application::TextureTransfer
    } else {
        Application::ObjectModification
    };
    let seed = mix_seed(cfg.seed, 2, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = if rng.gen_bool(0.5) { Motion::Linear } else { Motion::Circular };
    let target = random_sprite(&mut rng, cfg.size, cfg.size, motion);
    let bg = background(cfg.size, cfg.size, seed);
    let (video, mut masks) = render_sprites(&bg, std::slice::from_ref(&target), cfg.triplet_frames)?;
    let target_masks = masks.swap_remove(0);
    let masks = match application {
        Application::TextureTransfer => target_masks,
        Application::ObjectModification => target_masks.iter().map(|m| m.to_rectangle(1)).collect(),
    };

    let mut appearance = random_sprite(&mut rng, cfg.size, cfg.size, Motion::Linear);
    if application == Application::TextureTransfer {
        appearance.shape = target.shape;
        appearance.radius = target.radius;
    }
    let centre = (cfg.size as f32 - 1.0) / 2.0;
    appearance.start = [centre, centre];
    appearance.velocity = [0.0, 0.0];
    let ref_bg = background(cfg.size, cfg.size, seed ^ 0x5eed);
    let (ref_clip, _) = render_sprites(&ref_bg, std::slice::from_ref(&appearance), 1)?;
    let reference = ref_clip.frames[0].clone();
    Triplet::new(format!("triplet_{index:03}"), application, video, masks, reference)
}

// ---- file I/O ----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TripletMeta {
    id: String,
    application: Application,
    frame_rate: f32,
    num_frames: usize,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_frame_png(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height, frame.width);
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            buf.push(to_u8(frame.data[c * plane + p]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size matches");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_frame_png(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px.0[c] as f32 / 255.0;
        }
    }
    Frame::new(h, w, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let buf = mask.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, buf).expect("buffer size matches");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_luma8();
    let data = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    Mask::new(img.height() as usize, img.width() as usize, data)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `frames/frame_%05d.png` under `dir`.
pub fn save_frames(clip: &VideoClip, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    create_dir(&frames_dir)?;
    for (i, f) in clip.frames.iter().enumerate() {
        save_frame_png(f, &frames_dir.join(format!("frame_{i:05}.png")))?;
    }
    Ok(())
}

fn numbered_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::format(dir, format!("missing directory: {e}")))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with(prefix) && name.ends_with(".png") {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

pub fn save_triplet(triplet: &Triplet, dir: &Path) -> Result<()> {
    save_frames(&triplet.video, dir)?;
    let masks_dir = dir.join("masks");
    create_dir(&masks_dir)?;
    for (i, m) in triplet.masks.iter().enumerate() {
        save_mask_png(m, &masks_dir.join(format!("mask_{i:05}.png")))?;
    }
    save_frame_png(&triplet.reference, &dir.join("reference.png"))?;
    let meta = TripletMeta {
        id: triplet.id.clone(),
        application: triplet.application,
        frame_rate: triplet.video.frame_rate,
        num_frames: triplet.video.len(),
    };
    let json = serde_json::to_string_pretty(&meta).expect("triplet metadata serializes");
    let path = dir.join("triplet.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_triplet(dir: &Path) -> Result<Triplet> {
    let meta_path = dir.join("triplet.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|_| Error::format(&meta_path, "missing triplet.json"))?;
    let meta: TripletMeta = serde_json::from_str(&meta_text).map_err(|e| Error::format(&meta_path, e.to_string()))?;

    let frame_files = numbered_files(&dir.join("frames"), "frame_")?;
    if frame_files.len() != meta.num_frames {
        return Err(Error::format(
            dir.join("frames"),
            format!("frame count mismatch: {} files, num_frames {}", frame_files.len(), meta.num_frames),
        ));
    }
    let mask_files = numbered_files(&dir.join("masks"), "mask_")?;
    if mask_files.len() != meta.num_frames {
        return Err(Error::format(
            dir.join("masks"),
            format!("mask count mismatch: {} masks for {} frames", mask_files.len(), meta.num_frames),
        ));
    }
    let ref_path = dir.join("reference.png");
    if !ref_path.exists() {
        return Err(Error::format(&ref_path, "missing reference"));
    }
    let frames = frame_files.iter().map(|p| load_frame_png(p)).collect::<Result<Vec<_>>>()?;
    let masks = mask_files.iter().map(|p| load_mask_png(p)).collect::<Result<Vec<_>>>()?;
    let reference = load_frame_png(&ref_path)?;
    let video = VideoClip::new(frames, meta.frame_rate).map_err(|e| Error::format(dir, e.to_string()))?;
    Triplet::new(meta.id, meta.application, video, masks, reference).map_err(|e| Error::format(dir, e.to_string()))
}

/// Loads every triplet directory directly under `dir`, sorted by name.
pub fn load_triplet_dir(dir: &Path) -> Result<Vec<Triplet>> {
    let mut subdirs = Vec::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::format(dir, format!("cannot read directory: {e}")))?;
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.join("triplet.json").exists() {
            subdirs.push(p);
        }
    }
    subdirs.sort();
    subdirs.iter().map(|p| load_triplet(p)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipMeta {
    frame_rate: f32,
    num_frames: usize,
}

/// Writes a training clip as `frames/`, `masks/` and `clip.json`.
pub fn save_train_clip(clip: &TrainClip, dir: &Path) -> Result<()> {
    save_frames(&clip.video, dir)?;
    let masks_dir = dir.join("masks");
    create_dir(&masks_dir)?;
    for (i, m) in clip.masks.iter().enumerate() {
        save_mask_png(m, &masks_dir.join(format!("mask_{i:05}.png")))?;
    }
    let meta = ClipMeta {
        frame_rate: clip.video.frame_rate,
        num_frames: clip.video.len(),
    };
    let path = dir.join("clip.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("clip metadata serializes")).map_err(|e| Error::io(&path, e))
}

pub fn load_train_clip(dir: &Path) -> Result<TrainClip> {
    let meta_path = dir.join("clip.json");
    let text = fs::read_to_string(&meta_path).map_err(|_| Error::format(&meta_path, "missing clip.json"))?;
    let meta: ClipMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let frame_files = numbered_files(&dir.join("frames"), "frame_")?;
    let mask_files = numbered_files(&dir.join("masks"), "mask_")?;
    if frame_files.len() != meta.num_frames || mask_files.len() != meta.num_frames {
        return Err(Error::format(
            dir,
            format!("{} frames and {} masks, num_frames {}", frame_files.len(), mask_files.len(), meta.num_frames),
        ));
    }
    let frames = frame_files.iter().map(|p| load_frame_png(p)).collect::<Result<Vec<_>>>()?;
    let masks = mask_files.iter().map(|p| load_mask_png(p)).collect::<Result<Vec<_>>>()?;
    let video = VideoClip::new(frames, meta.frame_rate).map_err(|e| Error::format(dir, e.to_string()))?;
    if masks.iter().any(|m| m.height != video.height() || m.width != video.width()) {
        return Err(Error::format(dir, "mask dimensions differ from frames"));
    }
    Ok(TrainClip { video, masks })
}

/// Loads every training clip directly under `dir`, sorted by name.
pub fn load_train_dir(dir: &Path) -> Result<Vec<TrainClip>> {
    let mut subdirs = Vec::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::format(dir, format!("cannot read directory: {e}")))?;
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.join("clip.json").exists() {
            subdirs.push(p);
        }
    }
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::Dataset(format!("no training clips under {}", dir.display())));
    }
    subdirs.iter().map(|p| load_train_clip(p)).collect()
}
