//! Optical flow: pyramidal Lucas-Kanade estimation, resampling to coarser
//! grids, forward-backward consistency and Middlebury `.flo` files.
//!
//! A flow maps a pixel `p` of the source frame to `p + flow(p)` in the
//! target frame, so that `source(p) ~= target(p + flow(p))`. Displacements
//! are always in pixels of the grid the field lives on.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::media::Frame;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const FLO_MAGIC: f32 = 202021.25;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Planar `[u..., v...]`.
    data: Vec<f32>,
    /// Index of the frame the field is defined on.
    pub from: usize,
    /// Index of the frame it points into.
    pub to: usize,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f32>, from: usize, to: usize) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(Error::Input(format!(
                "flow {height}x{width} needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("flow values must be finite".into()));
        }
        Ok(FlowField {
            height,
            width,
            data,
            from,
            to,
        })
    }

    pub fn zeros(height: usize, width: usize, from: usize, to: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; 2 * height * width],
            from,
            to,
        }
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32, from: usize, to: usize) -> Self {
        let plane = height * width;
        let mut data = vec![u; 2 * plane];
        data[plane..].fill(v);
        FlowField {
            height,
            width,
            data,
            from,
            to,
        }
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

    pub fn u(&self) -> &[f32] {
        &self.data[..self.height * self.width]
    }

    pub fn v(&self) -> &[f32] {
        &self.data[self.height * self.width..]
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let p = y * self.width + x;
        (self.data[p], self.data[self.height * self.width + p])
    }

    pub fn scaled(&self, c: f32) -> FlowField {
        FlowField {
            data: self.data.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u()
            .iter()
            .zip(self.v())
            .map(|(u, v)| (u * u + v * v).sqrt())
            .fold(0.0, f32::max)
    }

    /// `[2, h, w]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[2, self.height, self.width],
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("flow tensor shape")
    }
}

/// Binary validity map: 1 flow-consistent, 0 occluded or inconsistent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl OcclusionMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.iter().any(|&v| v > 1) {
            return Err(Error::Input(format!("validity map needs {} binary values", height * width)));
        }
        Ok(OcclusionMask { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        OcclusionMask {
            height,
            width,
            data: vec![1; height * width],
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

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    pub levels: usize,
    pub iters: usize,
    /// Lucas-Kanade window radius (window side `2r + 1`).
    pub radius: usize,
    /// Tikhonov term added to the normal-equation diagonal.
    pub lambda: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            levels: 3,
            iters: 3,
            radius: 2,
            lambda: 1e-3,
        }
    }
}

#[derive(Clone)]
struct Gray {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Gray {
    #[inline]
    fn at(&self, y: isize, x: isize) -> f32 {
        let yy = y.clamp(0, self.h as isize - 1) as usize;
        let xx = x.clamp(0, self.w as isize - 1) as usize;
        self.data[yy * self.w + xx]
    }

    #[inline]
    fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let d = &self.data;
        (1.0 - fy) * ((1.0 - fx) * d[y0 * self.w + x0] + fx * d[y0 * self.w + x1])
            + fy * ((1.0 - fx) * d[y1 * self.w + x0] + fx * d[y1 * self.w + x1])
    }

    fn half(&self) -> Gray {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (2 * y as isize, 2 * x as isize);
                data[y * w + x] =
                    0.25 * (self.at(sy, sx) + self.at(sy, sx + 1) + self.at(sy + 1, sx) + self.at(sy + 1, sx + 1));
            }
        }
        Gray { h, w, data }
    }
}

fn box_sum(img: &[f32], h: usize, w: usize, r: usize) -> Vec<f32> {
    let r = r as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dx in -r..=r {
                let xx = x + dx;
                if xx >= 0 && xx < w as isize {
                    s += img[y * w + xx as usize];
                }
            }
            tmp[y * w + x as usize] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = y + dy;
                if yy >= 0 && yy < h as isize {
                    s += tmp[yy as usize * w + x];
                }
            }
            out[y as usize * w + x] = s;
        }
    }
    out
}

/// Dense flow from `frame_a` into `frame_b` with default parameters and the
/// given pyramid depth and warp iterations per level.
pub fn estimate_flow(frame_a: &Frame, frame_b: &Frame, levels: usize, iters: usize) -> Result<FlowField> {
    estimate_flow_with(
        frame_a,
        frame_b,
        &FlowParams {
            levels,
            iters,
            ..FlowParams::default()
        },
    )
}

pub fn estimate_flow_with(frame_a: &Frame, frame_b: &Frame, params: &FlowParams) -> Result<FlowField> {
    if !frame_a.same_dims(frame_b) {
        return Err(Error::Input(format!(
            "flow frames differ in size: {}x{} vs {}x{}",
            frame_a.height(),
            frame_a.width(),
            frame_b.height(),
            frame_b.width()
        )));
    }
    let (h, w) = (frame_a.height(), frame_a.width());
    if params.levels == 0 || (h >> (params.levels - 1)) < 8 || (w >> (params.levels - 1)) < 8 {
        return Err(Error::Config(format!(
            "{} pyramid levels leave a coarsest level below 8x8 for {h}x{w}",
            params.levels
        )));
    }
    let mut pa = vec![Gray {
        h,
        w,
        data: frame_a.luminance(),
    }];
    let mut pb = vec![Gray {
        h,
        w,
        data: frame_b.luminance(),
    }];
    for _ in 1..params.levels {
        pa.push(pa.last().unwrap().half());
        pb.push(pb.last().unwrap().half());
    }

    let mut u: Vec<f32> = Vec::new();
    let mut v: Vec<f32> = Vec::new();
    let (mut ph, mut pw) = (0, 0);
    for level in (0..params.levels).rev() {
        let (a, b) = (&pa[level], &pb[level]);
        let (lh, lw) = (a.h, a.w);
        if u.is_empty() {
            u = vec![0.0; lh * lw];
            v = vec![0.0; lh * lw];
        } else {
            let prev_u = Gray { h: ph, w: pw, data: std::mem::take(&mut u) };
            let prev_v = Gray { h: ph, w: pw, data: std::mem::take(&mut v) };
            u = vec![0.0; lh * lw];
            v = vec![0.0; lh * lw];
            let (sy, sx) = (ph as f32 / lh as f32, pw as f32 / lw as f32);
            for y in 0..lh {
                for x in 0..lw {
                    let cx = (x as f32 + 0.5) * sx - 0.5;
                    let cy = (y as f32 + 0.5) * sy - 0.5;
                    u[y * lw + x] = prev_u.sample(cx, cy) / sx;
                    v[y * lw + x] = prev_v.sample(cx, cy) / sy;
                }
            }
        }
        for _ in 0..params.iters {
            lk_iteration(a, b, &mut u, &mut v, params);
        }
        ph = lh;
        pw = lw;
    }
    let limit = h.max(w) as f32;
    let mut data = u;
    data.extend(v);
    for d in &mut data {
        *d = d.clamp(-limit, limit);
    }
    FlowField::new(h, w, data, 0, 1)
}

fn lk_iteration(a: &Gray, b: &Gray, u: &mut [f32], v: &mut [f32], params: &FlowParams) {
    let (h, w) = (a.h, a.w);
    let n = h * w;
    let mut warped = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            warped[p] = b.sample(x as f32 + u[p], y as f32 + v[p]);
        }
    }
    let avg = Gray {
        h,
        w,
        data: a.data.iter().zip(&warped).map(|(p, q)| 0.5 * (p + q)).collect(),
    };
    let mut ixx = vec![0.0; n];
    let mut ixy = vec![0.0; n];
    let mut iyy = vec![0.0; n];
    let mut ixt = vec![0.0; n];
    let mut iyt = vec![0.0; n];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = y as usize * w + x as usize;
            let gx = 0.5 * (avg.at(y, x + 1) - avg.at(y, x - 1));
            let gy = 0.5 * (avg.at(y + 1, x) - avg.at(y - 1, x));
            let it = warped[p] - a.data[p];
            ixx[p] = gx * gx;
            ixy[p] = gx * gy;
            iyy[p] = gy * gy;
            ixt[p] = gx * it;
            iyt[p] = gy * it;
        }
    }
    let r = params.radius;
    let (sxx, sxy, syy, sxt, syt) = (
        box_sum(&ixx, h, w, r),
        box_sum(&ixy, h, w, r),
        box_sum(&iyy, h, w, r),
        box_sum(&ixt, h, w, r),
        box_sum(&iyt, h, w, r),
    );
    let lam = params.lambda;
    for p in 0..n {
        let (g11, g12, g22) = (sxx[p] + lam, sxy[p], syy[p] + lam);
        let det = g11 * g22 - g12 * g12;
        if det <= 0.0 || !det.is_finite() {
            continue;
        }
        let (b1, b2) = (-sxt[p], -syt[p]);
        u[p] += (g22 * b1 - g12 * b2) / det;
        v[p] += (g11 * b2 - g12 * b1) / det;
    }
}

/// 1-D area-overlap weights mapping `src` cells onto `dst` cells.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = (j + 1) as f64 * scale;
            let mut ws = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((i, overlap / scale));
                }
                i += 1;
            }
            ws
        })
        .collect()
}

/// Area-average resampling onto a coarser grid; displacements are rescaled
/// into units of the target grid.
pub fn downsample_flow(flow: &FlowField, target_h: usize, target_w: usize) -> Result<FlowField> {
    if target_h == 0 || target_w == 0 || target_h > flow.height || target_w > flow.width {
        return Err(Error::Input(format!(
            "cannot resample {}x{} flow to {target_h}x{target_w}",
            flow.height, flow.width
        )));
    }
    if target_h == flow.height && target_w == flow.width {
        return Ok(flow.clone());
    }
    let wy = area_weights(flow.height, target_h);
    let wx = area_weights(flow.width, target_w);
    let sx = target_w as f64 / flow.width as f64;
    let sy = target_h as f64 / flow.height as f64;
    let plane = target_h * target_w;
    let mut data = vec![0.0f32; 2 * plane];
    for (ch, scale) in [(0usize, sx), (1, sy)] {
        let src = &flow.data[ch * flow.height * flow.width..(ch + 1) * flow.height * flow.width];
        for (ty, ry) in wy.iter().enumerate() {
            for (tx, rx) in wx.iter().enumerate() {
                let mut acc = 0.0f64;
                for &(iy, wyv) in ry {
                    for &(ix, wxv) in rx {
                        acc += wyv * wxv * src[iy * flow.width + ix] as f64;
                    }
                }
                data[ch * plane + ty * target_w + tx] = (acc * scale) as f32;
            }
        }
    }
    FlowField::new(target_h, target_w, data, flow.from, flow.to)
}

/// Marks `p` valid iff `|fwd(p) + bwd(p + fwd(p))| <= tau`, with bilinear,
/// clamp-to-edge lookup of `bwd`.
pub fn forward_backward_check(flow_fwd: &FlowField, flow_bwd: &FlowField, tau: f32) -> Result<OcclusionMask> {
    if flow_fwd.from != flow_bwd.to || flow_fwd.to != flow_bwd.from {
        return Err(Error::Contract(format!(
            "flows {}->{} and {}->{} are not opposite",
            flow_fwd.from, flow_fwd.to, flow_bwd.from, flow_bwd.to
        )));
    }
    if flow_fwd.height != flow_bwd.height || flow_fwd.width != flow_bwd.width {
        return Err(Error::Input("forward/backward flow sizes differ".into()));
    }
    let (h, w) = (flow_fwd.height, flow_fwd.width);
    let bu = Gray { h, w, data: flow_bwd.u().to_vec() };
    let bv = Gray { h, w, data: flow_bwd.v().to_vec() };
    let mut data = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow_fwd.at(y, x);
            let (tx, ty) = (x as f32 + u, y as f32 + v);
            let ru = u + bu.sample(tx, ty);
            let rv = v + bv.sample(tx, ty);
            data[y * w + x] = u8::from((ru * ru + rv * rv).sqrt() <= tau);
        }
    }
    Ok(OcclusionMask { height: h, width: w, data })
}

/// Serializes a field in the Middlebury `.flo` layout.
pub fn flo_bytes(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.height * flow.width);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for y in 0..flow.height {
        for x in 0..flow.width {
            let (u, v) = flow.at(y, x);
            out.extend_from_slice(&u.to_le_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(i..i + 4)
            .map(|s| [s[0], s[1], s[2], s[3]])
            .ok_or_else(|| Error::format(path, "truncated .flo file"))
    };
    if f32::from_le_bytes(word(0)?) != FLO_MAGIC {
        return Err(Error::format(path, "bad .flo magic"));
    }
    let w = i32::from_le_bytes(word(4)?);
    let h = i32::from_le_bytes(word(8)?);
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("invalid .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + 8 * w * h {
        return Err(Error::format(path, "payload size does not match dimensions"));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; 2 * plane];
    for p in 0..plane {
        data[p] = f32::from_le_bytes(word(12 + 8 * p)?);
        data[plane + p] = f32::from_le_bytes(word(16 + 8 * p)?);
    }
    FlowField::new(h, w, data, 0, 1).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    fs::write(path, flo_bytes(flow)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_flo(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::background;
    use proptest::prelude::*;

    /// Translates by integer `(dx, dy)` with replicated borders: `b(p) = a(p - d)`.
    pub(crate) fn translate(frame: &Frame, dx: i32, dy: i32) -> Frame {
        let (h, w) = (frame.height(), frame.width());
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let sx = (x as i32 - dx).clamp(0, w as i32 - 1) as usize;
                    let sy = (y as i32 - dy).clamp(0, h as i32 - 1) as usize;
                    data[(c * h + y) * w + x] = frame.get(c, sy, sx);
                }
            }
        }
        Frame::new(h, w, data).unwrap()
    }

    fn interior_epe(flow: &FlowField, du: f32, dv: f32, margin: usize) -> f32 {
        let (mut s, mut n) = (0.0, 0.0);
        for y in margin..flow.height() - margin {
            for x in margin..flow.width() - margin {
                let (u, v) = flow.at(y, x);
                s += ((u - du).powi(2) + (v - dv).powi(2)).sqrt();
                n += 1.0;
            }
        }
        s / n
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = background(64, 64, 1);
        let flow = estimate_flow(&f, &f, 3, 3).unwrap();
        assert!(flow.max_magnitude() < 1e-3);
    }

    #[test]
    fn constant_frames_give_zero_flow() {
        let a = Frame::filled(32, 32, [0.3; 3]).unwrap();
        let b = Frame::filled(32, 32, [0.6; 3]).unwrap();
        let flow = estimate_flow(&a, &b, 2, 3).unwrap();
        assert_eq!(flow.max_magnitude(), 0.0);
    }

    #[test]
    fn recovers_translation() {
        let a = background(64, 64, 5);
        let b = translate(&a, 3, 0);
        let flow = estimate_flow(&a, &b, 3, 3).unwrap();
        let epe = interior_epe(&flow, 3.0, 0.0, 8);
        assert!(epe < 0.5, "epe {epe}");
    }

    #[test]
    fn rejects_mismatched_frames_and_shallow_pyramids() {
        let a = background(32, 32, 1);
        let b = background(64, 64, 1);
        assert!(matches!(estimate_flow(&a, &b, 2, 1), Err(Error::Input(_))));
        assert!(matches!(estimate_flow(&a, &a, 4, 1), Err(Error::Config(_))));
    }

    #[test]
    fn downsample_constant_flow_rescales() {
        let f = FlowField::constant(16, 256, 8.0, 0.0, 0, 1);
        let d = downsample_flow(&f, 16, 64).unwrap();
        assert!(d.u().iter().all(|&u| (u - 2.0).abs() < 1e-6));
        assert!(d.v().iter().all(|&v| v == 0.0));
        let z = downsample_flow(&FlowField::zeros(32, 32, 0, 1), 5, 7).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(downsample_flow(&f, 16, 256).unwrap(), f);
        assert!(downsample_flow(&f, 32, 256).is_err());
    }

    #[test]
    fn fb_check_cases() {
        let fwd = FlowField::constant(8, 8, 2.0, -1.0, 0, 1);
        let bwd = FlowField::constant(8, 8, -2.0, 1.0, 1, 0);
        assert_eq!(forward_backward_check(&fwd, &bwd, 0.01).unwrap().valid_count(), 64);
        let fwd5 = FlowField::constant(8, 8, 5.0, 0.0, 0, 1);
        let zero = FlowField::zeros(8, 8, 1, 0);
        assert_eq!(forward_backward_check(&fwd5, &zero, 1.0).unwrap().valid_count(), 0);
        assert_eq!(forward_backward_check(&fwd5, &zero, f32::INFINITY).unwrap().valid_count(), 64);
        let same_dir = FlowField::zeros(8, 8, 0, 1);
        assert!(matches!(forward_backward_check(&fwd, &same_dir, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn flo_byte_layout() {
        let f = FlowField::new(1, 2, vec![1.0, 3.0, 2.0, 4.0], 0, 1).unwrap();
        let bytes = flo_bytes(&f);
        assert_eq!(bytes.len(), 28);
        let mut expect = Vec::new();
        expect.extend_from_slice(&202021.25f32.to_le_bytes());
        expect.extend_from_slice(&2i32.to_le_bytes());
        expect.extend_from_slice(&1i32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expect);
        assert_eq!(&bytes[0..4], b"PIEH");
    }

    #[test]
    fn flo_bad_magic() {
        let mut bytes = flo_bytes(&FlowField::zeros(2, 2, 0, 1));
        bytes[0..4].copy_from_slice(&0.0f32.to_le_bytes());
        assert!(matches!(parse_flo(&bytes, Path::new("x.flo")), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn flo_roundtrip_bitwise(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut s = seed;
            let data: Vec<f32> = (0..2 * h * w).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / 16777216.0 - 0.5) * 40.0
            }).collect();
            let f = FlowField::new(h, w, data, 0, 1).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.flo");
            write_flo(&f, &p).unwrap();
            let g = read_flo(&p).unwrap();
            prop_assert_eq!(f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn downsample_commutes_with_scaling(c in -4.0f32..4.0, seed in 0u64..50) {
            let f = estimate_flow(&background(32, 32, seed), &background(32, 32, seed + 1), 2, 1).unwrap();
            let a = downsample_flow(&f.scaled(c), 8, 8).unwrap();
            let b = downsample_flow(&f, 8, 8).unwrap().scaled(c);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
            }
        }
    }
}
