//! Editing pipeline, the four benchmark metrics, report files and ablation
//! sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_frames, encode_frames, encode_latent};
use crate::denoiser::{embed_frame, flow_pyramid, pyramid_tensors, ConditioningBundle, EditModel};
use crate::diffusion::{ddim_sample_from, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, forward_backward_check, FlowField, OcclusionMask};
use crate::media::{pseudo_depth, Application, Frame, Mask, TrainClip, Triplet, VideoClip, CODEC_FACTOR};
use crate::motref::bilinear_warp;
use crate::params::{Group, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{train_mmm, MaskStrategy, TrainConfig};

/// Frames denoised jointly by the inflated model.
pub const WINDOW: usize = 8;
/// Forward-backward consistency threshold for metric validity, in pixels.
pub const VALIDITY_TAU: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Each frame edited alone by the spatial model.
    FrameWiseBaseline,
    /// Windows of frames denoised jointly with the temporal components.
    Inflated,
}

impl EditMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EditMode::FrameWiseBaseline => "frame_wise_baseline",
            EditMode::Inflated => "inflated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "frame_wise_baseline" => Ok(EditMode::FrameWiseBaseline),
            "inflated" => Ok(EditMode::Inflated),
            _ => Err(Error::Config(format!("unknown mode {s}, expected frame_wise_baseline or inflated"))),
        }
    }
}

fn frame_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Starting noise of frame `index`, shared by every editing mode so that
/// the modes differ only in how frames interact.
pub fn initial_noise<T: Scalar>(seed: u64, index: usize, shape: &[usize]) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(frame_seed(seed, index)))
}

/// Per-pixel selection of generated content inside the edit mask.
pub fn composite(source: &Frame, generated: &Frame, mask: &Mask) -> Result<Frame> {
    if !source.same_dims(generated) || mask.height() != source.height() || mask.width() != source.width() {
        return Err(Error::Input("composite inputs differ in size".into()));
    }
    let plane = source.height() * source.width();
    let data = (0..3 * plane)
        .map(|i| {
            if mask.data()[i % plane] == 1 {
                generated.data()[i]
            } else {
                source.data()[i]
            }
        })
        .collect();
    Frame::new(source.height(), source.width(), data)
}

fn reference_latent<T: Scalar>(reference: &Frame) -> Result<Tensor<T>> {
    let z = encode_latent::<T>(reference)?;
    let s = z.shape().to_vec();
    z.reshape(&[1, s[0], s[1], s[2]])
}

/// Conditioning of one editing window: keep mask is the complement of the
/// edit mask, depth is zeroed for object modification.
pub fn edit_conditioning<T: Scalar>(
    frames: &[Frame],
    masks: &[Mask],
    reference_latent: &Tensor<T>,
    application: Application,
) -> Result<ConditioningBundle<T>> {
    let z0 = encode_frames::<T>(frames)?;
    let (n, h, w) = (z0.dim(0), z0.dim(2), z0.dim(3));
    let keep = Tensor::cat0(&masks.iter().map(|m| m.keep_latent::<T>(CODEC_FACTOR).reshape(&[1, 1, h, w])).collect::<Result<Vec<_>>>()?)?;
    let depth = match application {
        Application::ObjectModification => Tensor::zeros(&[n, 1, h, w]),
        Application::TextureTransfer => Tensor::cat0(
            &frames
                .iter()
                .map(|f| pseudo_depth(f).to_latent::<T>(CODEC_FACTOR).reshape(&[1, 1, h, w]))
                .collect::<Result<Vec<_>>>()?,
        )?,
    };
    ConditioningBundle::from_clean(&z0, keep, depth, reference_latent.clone())
}

/// Edits frames inside their masks toward the reference appearance.
pub fn edit_frames<T: Scalar>(
    video: &VideoClip,
    masks: &[Mask],
    reference: &Frame,
    application: Application,
    params: &ModelParams<T>,
    sampler: &SamplerConfig,
    mode: EditMode,
) -> Result<VideoClip> {
    if !params.is_frozen(Group::Spatial) || !params.is_frozen(Group::RefEnc) {
        return Err(Error::Contract("editing needs a trained model with frozen spatial groups".into()));
    }
    if masks.len() != video.len() {
        return Err(Error::Input(format!("{} masks for {} frames", masks.len(), video.len())));
    }
    let schedule = NoiseSchedule::<T>::default();
    let window = match mode {
        EditMode::FrameWiseBaseline => 1,
        EditMode::Inflated => WINDOW,
    };
    let ref_latent = reference_latent::<T>(reference)?;
    let frames = video.frames();
    let mut out = Vec::with_capacity(frames.len());
    let mut start = 0;
    while start < frames.len() {
        let end = (start + window).min(frames.len());
        let src = &frames[start..end];
        let wm = &masks[start..end];
        if wm.iter().all(Mask::is_empty) {
            out.extend_from_slice(src);
            start = end;
            continue;
        }
        let cond = edit_conditioning::<T>(src, wm, &ref_latent, application)?;
        let (n, h, w) = (cond.frames(), cond.masked_latents.dim(2), cond.masked_latents.dim(3));
        let flows = match mode {
            EditMode::Inflated if n > 1 => pyramid_tensors(&flow_pyramid(src)?)?,
            _ => None,
        };
        let model = EditModel {
            params,
            flows,
            inflated: mode == EditMode::Inflated,
        };
        let item = [1, cond.masked_latents.dim(1), h, w];
        let z_start = Tensor::cat0(&(start..end).map(|i| initial_noise::<T>(sampler.seed, i, &item)).collect::<Vec<_>>())?;
        let z = ddim_sample_from(&model, &cond, &schedule, sampler, z_start)?;
        for ((s, g), m) in src.iter().zip(decode_frames(&z)?).zip(wm) {
            out.push(composite(s, &g, m)?);
        }
        start = end;
    }
    VideoClip::new(out, video.frame_rate)
}

pub fn edit_video<T: Scalar>(triplet: &Triplet, params: &ModelParams<T>, sampler: &SamplerConfig, mode: EditMode) -> Result<VideoClip> {
    edit_frames(
        &triplet.video,
        &triplet.masks,
        &triplet.reference,
        triplet.application,
        params,
        sampler,
        mode,
    )
}

/// Backward flows (frame `i + 1` into frame `i`) of a video with their
/// forward-backward validity on the frame `i + 1` grid.
pub fn source_flows(video: &VideoClip) -> Result<(Vec<FlowField>, Vec<OcclusionMask>)> {
    let frames = video.frames();
    let mut flows = Vec::new();
    let mut valid = Vec::new();
    for i in 0..frames.len().saturating_sub(1) {
        let mut bwd = estimate_flow(&frames[i + 1], &frames[i], 3, 3)?;
        bwd.from = i + 1;
        bwd.to = i;
        let mut fwd = estimate_flow(&frames[i], &frames[i + 1], 3, 3)?;
        fwd.from = i;
        fwd.to = i + 1;
        valid.push(forward_backward_check(&bwd, &fwd, VALIDITY_TAU)?);
        flows.push(bwd);
    }
    Ok((flows, valid))
}

/// Warp error and the number of frame pairs whose validity region was empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpError {
    pub value: f64,
    pub empty_pairs: usize,
}

/// Mean over consecutive pairs of the validity-masked squared difference
/// between frame `i + 1` and frame `i` warped by the backward flow.
pub fn warp_error(video: &VideoClip, flows: &[FlowField], validity: &[OcclusionMask]) -> Result<WarpError> {
    let f = video.len();
    if flows.len() + 1 != f || validity.len() + 1 != f {
        return Err(Error::Input(format!(
            "{f} frames need {} flows and validity maps, got {} and {}",
            f - 1,
            flows.len(),
            validity.len()
        )));
    }
    let frames = video.frames();
    let mut total = 0.0;
    let mut empty = 0;
    for i in 0..f - 1 {
        let warped = bilinear_warp(&frames[i].to_tensor::<f64>(), &flows[i])?;
        let target = &frames[i + 1];
        let plane = target.height() * target.width();
        let v = validity[i].data();
        if v.len() != plane {
            return Err(Error::Input("validity map size differs from frames".into()));
        }
        let count = v.iter().filter(|&&x| x == 1).count();
        if count == 0 {
            empty += 1;
            continue;
        }
        let mut acc = 0.0;
        for c in 0..3 {
            for p in 0..plane {
                if v[p] == 1 {
                    let d = target.data()[c * plane + p] as f64 - warped.data()[c * plane + p];
                    acc += d * d;
                }
            }
        }
        total += acc / (3 * count) as f64;
    }
    Ok(WarpError {
        value: total / (f - 1) as f64,
        empty_pairs: empty,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// A frame feature extractor.
pub type Encoder<'a> = &'a dyn Fn(&Frame) -> Result<Vec<f64>>;

/// Mean cosine similarity of consecutive frames' embeddings.
pub fn temporal_consistency(video: &VideoClip, encoder: Encoder) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::Input("temporal consistency needs at least two frames".into()));
    }
    let emb = video.frames().iter().map(encoder).collect::<Result<Vec<_>>>()?;
    let sum: f64 = emb.windows(2).map(|w| cosine(&w[0], &w[1])).sum();
    Ok(sum / (emb.len() - 1) as f64)
}

fn moments(x: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.len(), x[0].len());
    let mut mu = vec![0.0; d];
    for v in x {
        for (m, &a) in mu.iter_mut().zip(v) {
            *m += a / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for v in x {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (v[i] - mu[i]) * (v[j] - mu[j]) / (n - 1) as f64;
            }
        }
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two feature sets. The trace of
/// `(Sa Sb)^(1/2)` is taken as that of the symmetric
/// `(Sa^(1/2) Sb Sa^(1/2))^(1/2)`, negative eigenvalues clamped to zero.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Input("frechet distance needs at least two vectors per set".into()));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Input("feature vectors differ in dimension".into()));
    }
    let (ma, ca) = moments(a);
    let (mb, cb) = moments(b);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&ra * &cb * &ra));
    let fd = mean_term + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(fd.max(0.0))
}

/// `100 x` mean cosine between the reference embedding and the embedding of
/// each edited frame's mask bounding box, resized to the frame size.
pub fn ref_alignment(edited: &VideoClip, masks: &[Mask], reference: &Frame, encoder: Encoder) -> Result<f64> {
    if masks.len() != edited.len() {
        return Err(Error::Input(format!("{} masks for {} frames", masks.len(), edited.len())));
    }
    let r = encoder(reference)?;
    let mut sum = 0.0;
    let mut count = 0;
    for (frame, mask) in edited.frames().iter().zip(masks) {
        let Some(bbox) = mask.bbox() else { continue };
        let crop = frame.crop_resize(bbox, frame.height(), frame.width())?;
        sum += cosine(&encoder(&crop)?, &r);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("every mask is empty".into()));
    }
    Ok(100.0 * sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletMetrics {
    pub triplet_id: String,
    pub application: Application,
    pub warp_error: f64,
    pub temporal_consistency: f64,
    pub frechet: f64,
    pub ref_alignment: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub warp_error: f64,
    pub temporal_consistency: f64,
    pub frechet: f64,
    pub ref_alignment: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_triplet: Vec<TripletMetrics>,
    /// Unweighted means per application, plus `all` over every triplet.
    pub aggregates: BTreeMap<String, Aggregate>,
    /// Frame pairs whose flow validity region was empty.
    pub empty_validity_pairs: usize,
}

impl MetricsReport {
    pub fn from_rows(per_triplet: Vec<TripletMetrics>, empty_validity_pairs: usize) -> Self {
        let mut aggregates: BTreeMap<String, Aggregate> = BTreeMap::new();
        for row in &per_triplet {
            for key in ["all", row.application.as_str()] {
                let a = aggregates.entry(key.to_string()).or_default();
                a.count += 1;
                a.warp_error += row.warp_error;
                a.temporal_consistency += row.temporal_consistency;
                a.frechet += row.frechet;
                a.ref_alignment += row.ref_alignment;
            }
        }
        for a in aggregates.values_mut() {
            let n = a.count as f64;
            a.warp_error /= n;
            a.temporal_consistency /= n;
            a.frechet /= n;
            a.ref_alignment /= n;
        }
        MetricsReport {
            per_triplet,
            aggregates,
            empty_validity_pairs,
        }
    }

    pub fn overall(&self) -> Aggregate {
        self.aggregates.get("all").cloned().unwrap_or_default()
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("triplet_id,application,warp_error,temporal_consistency,frechet,ref_alignment\n");
        for r in &self.per_triplet {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.triplet_id,
                r.application.as_str(),
                r.warp_error,
                r.temporal_consistency,
                r.frechet,
                r.ref_alignment
            );
        }
        s
    }
}

/// All four metrics for one edited video, using flows of the source.
pub fn triplet_metrics<T: Scalar>(triplet: &Triplet, edited: &VideoClip, params: &ModelParams<T>) -> Result<(TripletMetrics, usize)> {
    let encoder = |f: &Frame| embed_frame(f, params);
    let (flows, valid) = source_flows(&triplet.video)?;
    let we = warp_error(edited, &flows, &valid)?;
    let tc = temporal_consistency(edited, &encoder)?;
    let src_feats = triplet.video.frames().iter().map(encoder).collect::<Result<Vec<_>>>()?;
    let edit_feats = edited.frames().iter().map(encoder).collect::<Result<Vec<_>>>()?;
    let fd = frechet_distance(&edit_feats, &src_feats)?;
    let ra = ref_alignment(edited, &triplet.masks, &triplet.reference, &encoder)?;
    Ok((
        TripletMetrics {
            triplet_id: triplet.id.clone(),
            application: triplet.application,
            warp_error: we.value,
            temporal_consistency: tc,
            frechet: fd,
            ref_alignment: ra,
        },
        we.empty_pairs,
    ))
}

/// Edits and scores every triplet.
pub fn evaluate<T: Scalar>(triplets: &[Triplet], params: &ModelParams<T>, sampler: &SamplerConfig, mode: EditMode) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(triplets.len());
    let mut empty = 0;
    for t in triplets {
        let edited = edit_video(t, params, sampler, mode)?;
        let (row, e) = triplet_metrics(t, &edited, params)?;
        rows.push(row);
        empty += e;
    }
    Ok(MetricsReport::from_rows(rows, empty))
}

/// Scores each source video as its own edit.
pub fn evaluate_sources<T: Scalar>(triplets: &[Triplet], params: &ModelParams<T>) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(triplets.len());
    let mut empty = 0;
    for t in triplets {
        let (row, e) = triplet_metrics(t, &t.video, params)?;
        rows.push(row);
        empty += e;
    }
    Ok(MetricsReport::from_rows(rows, empty))
}

#[derive(Clone, Debug, Serialize)]
struct ReportJson<'a> {
    mode: &'a str,
    seed: u64,
    checkpoint: &'a str,
    sampler: &'a SamplerConfig,
    aggregates: &'a BTreeMap<String, Aggregate>,
    empty_validity_pairs: usize,
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path, mode: &str, checkpoint: &str, sampler: &SamplerConfig) -> Result<()> {
    let csv = dir.join("report.csv");
    fs::write(&csv, report.csv()).map_err(|e| Error::io(&csv, e))?;
    let json = ReportJson {
        mode,
        seed: sampler.seed,
        checkpoint,
        sampler,
        aggregates: &report.aggregates,
        empty_validity_pairs: report.empty_validity_pairs,
    };
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&json).expect("report serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    MaskRatio,
    MaskStrategy,
    Stride,
    Components,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask_ratio" => Ok(AblationAxis::MaskRatio),
            "mask_strategy" => Ok(AblationAxis::MaskStrategy),
            "stride" => Ok(AblationAxis::Stride),
            "components" => Ok(AblationAxis::Components),
            _ => Err(Error::Config(format!(
                "unknown axis {s}, expected mask_ratio, mask_strategy, stride or components"
            ))),
        }
    }
}

/// Labelled fine-tuning configurations of a sweep, derived from `base`.
pub fn ablation_configs(axis: AblationAxis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match axis {
        AblationAxis::MaskRatio => [0.0, 0.25, 0.5, 0.75]
            .into_iter()
            .map(|r| (format!("mask_ratio={r}"), TrainConfig { mask_ratio: r, ..base.clone() }))
            .collect(),
        AblationAxis::MaskStrategy => [MaskStrategy::FrameWise, MaskStrategy::ClipWise]
            .into_iter()
            .map(|s| (format!("mask_strategy={}", s.as_str()), TrainConfig { mask_strategy: s, ..base.clone() }))
            .collect(),
        AblationAxis::Stride => [2, 4, 8]
            .into_iter()
            .map(|s| (format!("stride={s}"), TrainConfig { stride: s, ..base.clone() }))
            .collect(),
        AblationAxis::Components => vec![
            (
                "Exp0".to_string(),
                TrainConfig {
                    mask_ratio: 0.0,
                    use_motref: false,
                    ..base.clone()
                },
            ),
            (
                "Exp1".to_string(),
                TrainConfig {
                    use_motref: false,
                    ..base.clone()
                },
            ),
            (
                "Exp2".to_string(),
                TrainConfig {
                    use_motref: true,
                    ..base.clone()
                },
            ),
        ],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: TrainConfig,
    pub overall: Aggregate,
}

/// Fine-tunes the stage A model once per configuration and evaluates the
/// inflated editor on the benchmark.
pub fn run_ablation<T: Scalar>(
    axis: AblationAxis,
    stage_a: &ModelParams<T>,
    dataset: &[TrainClip],
    triplets: &[Triplet],
    base: &TrainConfig,
    sampler: &SamplerConfig,
) -> Result<Vec<AblationRow>> {
    ablation_configs(axis, base)
        .into_iter()
        .map(|(label, cfg)| {
            let tuned = train_mmm(stage_a, dataset, &cfg)?.params;
            let report = evaluate(triplets, &tuned, sampler, EditMode::Inflated)?;
            Ok(AblationRow {
                label,
                config: cfg,
                overall: report.overall(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("label,warp_error,temporal_consistency,frechet,ref_alignment\n");
    for r in rows {
        let a = &r.overall;
        let _ = writeln!(s, "{},{},{},{},{}", r.label, a.warp_error, a.temporal_consistency, a.frechet, a.ref_alignment);
    }
    s
}
