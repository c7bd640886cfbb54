//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always print. Exact and property criteria
//! gate the exit code; the directional ones (7 to 10) are reported only.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ivediff::bench::{edit_conditioning, edit_video, evaluate, frechet_distance, warp_error, Aggregate, EditMode};
use ivediff::cli::{cmd_edit, cmd_eval, cmd_gen_data, EditArgs, EvalArgs, GenDataArgs, SamplerArgs};
use ivediff::codec::encode_latent;
use ivediff::denoiser::EditModel;
use ivediff::diffusion::{ddim_sample, ddim_timesteps, q_sample_with, NoisePredictor, NoiseSchedule, SamplerConfig};
use ivediff::flow::{estimate_flow, FlowField, OcclusionMask};
use ivediff::media::{
    background, generate_sprite_video, generate_training_corpus, generate_triplet, CorpusConfig, Frame, Motion, SpriteConfig,
    Triplet, VideoClip,
};
use ivediff::motref::bilinear_warp;
use ivediff::params::{load_checkpoint, save_checkpoint, Group, ModelConfig, ModelParams};
use ivediff::training::{make_grid_mask, mmm_batch_loss, prepare_mmm_batch, train_mmm, train_stage_a, MaskStrategy, StageAConfig, TrainConfig};
use ivediff::{Result, Tensor};

const STAGE_A_STEPS: usize = 5000;
const MMM_STEPS: usize = 1000;
const FREEZE_STEPS: usize = 500;
const SAMPLE_STEPS: usize = 20;
const SEED: u64 = 0;
const DIRECTIONAL: [usize; 4] = [7, 8, 9, 10];

#[derive(Default)]
struct Outcome {
    passed: usize,
    failed_gating: Vec<usize>,
    failed_directional: Vec<usize>,
}

impl Outcome {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        println!("{} {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if pass {
            self.passed += 1;
        } else if DIRECTIONAL.contains(&id) {
            self.failed_directional.push(id);
        } else {
            self.failed_gating.push(id);
        }
    }
}

fn frames_bits_eq(a: &VideoClip, b: &VideoClip) -> bool {
    a.len() == b.len()
        && a.frames().iter().zip(b.frames()).all(|(x, y)| {
            x.data().len() == y.data().len() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn translate(frame: &Frame, dx: i32, dy: i32) -> Frame {
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

fn inflation_identity(stage_a: &ModelParams<f32>, triplet: &Triplet) -> Result<(bool, String)> {
    let s = SamplerConfig { num_steps: SAMPLE_STEPS, seed: SEED, ..Default::default() };
    let fresh = ModelParams::<f32>::new(stage_a.config(), 99)?;
    let mut p = stage_a.clone();
    p.copy_group_from(&fresh, Group::Motion)?;
    p.copy_group_from(&fresh, Group::MotRef)?;
    let inflated = edit_video(triplet, &p, &s, EditMode::Inflated)?;
    let frame_wise = edit_video(triplet, &p, &s, EditMode::FrameWiseBaseline)?;
    let differs = inflated.frames().iter().zip(triplet.video.frames()).any(|(a, b)| a.data() != b.data());
    Ok((
        frames_bits_eq(&inflated, &frame_wise) && differs,
        format!("{} frames bit-identical across modes", triplet.video.len()),
    ))
}

fn gradient_check() -> Result<(bool, String)> {
    let mut p = ModelParams::<f64>::new(&ModelConfig::default(), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // move every tensor off its initial value so zero-initialised branches carry gradient
    for id in 0..p.len() {
        let t = p.tensor_mut(id);
        let noise = Tensor::<f64>::randn(t.shape(), 0.05, &mut rng);
        *t = t.zip_map(&noise, |a, b| a + b)?;
    }
    for g in Group::ALL {
        p.set_frozen(g, false);
    }
    let (video, _) = generate_sprite_video(&SpriteConfig {
        num_frames: 3,
        height: 64,
        width: 64,
        num_sprites: 1,
        motion: Motion::Linear,
        seed: 5,
    })?;
    let reference = video.frames()[0].clone();
    let clip = VideoClip::new(video.frames()[1..].to_vec(), video.frame_rate)?;
    let cfg = TrainConfig::default();
    let batch = prepare_mmm_batch(&reference, &clip, &NoiseSchedule::<f64>::default(), &cfg, &mut rng)?;
    let analytic = mmm_batch_loss(&p, &batch)?;
    let h = 1e-4;
    let (mut good, mut total, mut worst) = (0, 0, 0.0f64);
    for g in Group::ALL {
        let ids = p.ids_in(g);
        let sizes: Vec<usize> = ids.iter().map(|&id| p.tensor(id).len()).collect();
        let sum: usize = sizes.iter().sum();
        for _ in 0..10 {
            let mut k = rng.gen_range(0..sum);
            let mut pick = 0;
            while k >= sizes[pick] {
                k -= sizes[pick];
                pick += 1;
            }
            let id = ids[pick];
            let a = analytic.grads.iter().find(|(i, _)| *i == id).map_or(0.0, |(_, t)| t.data()[k]);
            let orig = p.tensor(id).data()[k];
            p.tensor_mut(id).data_mut()[k] = orig + h;
            let lp = mmm_batch_loss(&p, &batch)?.loss;
            p.tensor_mut(id).data_mut()[k] = orig - h;
            let lm = mmm_batch_loss(&p, &batch)?.loss;
            p.tensor_mut(id).data_mut()[k] = orig;
            let n = (lp - lm) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            worst = worst.max(rel);
            total += 1;
            if rel < 1e-3 {
                good += 1;
            }
        }
    }
    let frac = good as f64 / total as f64;
    Ok((frac >= 0.95, format!("{good}/{total} within 1e-3 (worst {worst:.2e})")))
}

fn flow_quality() -> Result<(bool, String)> {
    let shifts = [(1, 0), (0, 1), (-1, 0), (0, -1), (2, 0), (0, 2), (-2, 1), (1, -2), (3, 0), (0, -3), (2, 2), (-2, -2), (3, 1), (-1, 3), (4, 0), (0, 4), (-4, 0), (0, -4), (2, -3), (-3, 2)];
    let margin = 8;
    let mut total = 0.0;
    for (i, &(dx, dy)) in shifts.iter().enumerate() {
        let a = background(64, 64, 100 + i as u64);
        let b = translate(&a, dx, dy);
        let f = estimate_flow(&a, &b, 3, 3)?;
        let (mut s, mut n) = (0.0, 0.0);
        for y in margin..64 - margin {
            for x in margin..64 - margin {
                let (u, v) = f.at(y, x);
                s += ((u - dx as f32).powi(2) + (v - dy as f32).powi(2)).sqrt();
                n += 1.0;
            }
        }
        total += s / n;
    }
    let epe = total / shifts.len() as f32;
    Ok((epe < 0.5, format!("mean EPE {epe:.4} px over {} translations", shifts.len())))
}

fn standardized(n: usize, mean: f64, sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let m = x.iter().sum::<f64>() / n as f64;
    let s = (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
    x.iter().map(|v| vec![mean + sd * (v - m) / s]).collect()
}

fn metric_oracles() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = Tensor::<f64>::randn(&[3, 6, 7], 1.0, &mut rng);
    let shifted = bilinear_warp(&field, &FlowField::constant(6, 7, 2.0, -1.0, 1, 0))?;
    let mut integer_ok = true;
    for c in 0..3 {
        for y in 0..6 {
            for x in 0..7 {
                let sy = (y as i32 - 1).clamp(0, 5) as usize;
                let sx = (x + 2).min(6);
                integer_ok &= shifted.data()[(c * 6 + y) * 7 + x].to_bits() == field.data()[(c * 6 + sy) * 7 + sx].to_bits();
            }
        }
    }
    let row = Tensor::<f64>::from_vec(&[1, 1, 4], vec![0.0, 1.0, 4.0, 9.0])?;
    let half = bilinear_warp(&row, &FlowField::constant(1, 4, 0.5, 0.0, 1, 0))?;
    let half_err = half
        .data()
        .iter()
        .zip([0.5, 2.5, 6.5, 9.0])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let a = standardized(50, 0.0, 1.0, 1);
    let fd_mean = frechet_distance(&a, &standardized(70, 1.0, 1.0, 2))?;
    let fd_var = frechet_distance(&a, &standardized(70, 0.0, 2.0, 3))?;
    let fd_err = (fd_mean - 1.0).abs().max((fd_var - 1.0).abs());

    let f0 = background(32, 32, 4);
    let flow = FlowField::constant(32, 32, 0.5, -0.25, 1, 0);
    let f1 = Frame::from_tensor_clamped(&bilinear_warp(&f0.to_tensor::<f64>(), &flow)?)?;
    let we = warp_error(&VideoClip::new(vec![f0, f1], 8.0)?, &[flow], &[OcclusionMask::full(32, 32)])?.value;

    let pass = integer_ok && half_err < 1e-6 && fd_err < 1e-6 && we < 1e-6;
    Ok((
        pass,
        format!("integer shift exact {integer_ok}, half pixel err {half_err:.1e}, frechet err {fd_err:.1e}, warp error {we:.1e}"),
    ))
}

struct ZeroNoise;

impl NoisePredictor<f64> for ZeroNoise {
    type Cond = ();
    fn predict(&self, z: &Tensor<f64>, _: &(), _: usize, _: bool) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(z.shape()))
    }
}

fn sampler_identities(stage_a: &ModelParams<f32>, triplet: &Triplet) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z0 = Tensor::<f64>::randn(&[4, 8, 8], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[4, 8, 8], 1.0, &mut rng);
    let limits = q_sample_with(&z0, &eps, 1.0)?.bits_eq(&z0) && q_sample_with(&z0, &eps, 0.0)?.bits_eq(&eps);

    let schedule = NoiseSchedule::<f64>::default();
    let plain = SamplerConfig { num_steps: 50, seed: 5, clip_x0: None, ..Default::default() };
    let out = ddim_sample(&ZeroNoise, &(), &schedule, &plain, &[2, 8, 8])?;
    let z_t = Tensor::<f64>::randn(&[2, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let first = ddim_timesteps(schedule.steps(), 50)?[0];
    let scale = schedule.alpha_bar(first).sqrt();
    let stub_err = out
        .data()
        .iter()
        .zip(z_t.data())
        .map(|(o, z)| (o - z / scale).abs() / (z / scale).abs().max(1.0))
        .fold(0.0, f64::max);

    let rl = encode_latent::<f32>(&triplet.reference)?.reshape(&[1, 48, 8, 8])?;
    let cond = edit_conditioning::<f32>(&triplet.video.frames()[..2], &triplet.masks[..2], &rl, triplet.application)?;
    let model = EditModel { params: stage_a, flows: None, inflated: false };
    let s = SamplerConfig { num_steps: SAMPLE_STEPS, seed: 21, ..Default::default() };
    let sched32 = NoiseSchedule::<f32>::default();
    let a = ddim_sample(&model, &cond, &sched32, &s, &[2, 48, 8, 8])?;
    let b = ddim_sample(&model, &cond, &sched32, &s, &[2, 48, 8, 8])?;
    let same = a.bits_eq(&b);
    Ok((
        limits && stub_err < 1e-5 && same,
        format!("q_sample limits exact {limits}, zero-noise DDIM rel err {stub_err:.1e}, same-seed sampling identical {same}"),
    ))
}

fn grid_counts() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = Vec::new();
    for r in [0.0, 0.25, 0.5, 0.75, 1.0] {
        counts.push(make_grid_mask(8, 8, 8, r, &mut rng)?.occluded_cells());
        counts.push(make_grid_mask(64, 64, 8, r, &mut rng)?.occluded_cells());
    }
    let expect = [0, 0, 16, 16, 32, 32, 48, 48, 64, 64];
    Ok((counts == expect, format!("occluded cells {counts:?}")))
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<(PathBuf, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().into(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism(stage_a: &ModelParams<f32>, root: &Path) -> Result<(bool, String)> {
    let data = root.join("data");
    cmd_gen_data(&GenDataArgs {
        out: data.clone(),
        config: None,
        clips: Some(1),
        frames: Some(30),
        size: Some(32),
        triplets: Some(2),
        seed: Some(7),
    })?;
    let ckpt = root.join("stage_a.ived");
    save_checkpoint(stage_a, &ckpt)?;
    let sampler = || SamplerArgs {
        config: None,
        seed: Some(13),
        steps: Some(SAMPLE_STEPS),
        guidance: None,
        mode: Some("inflated".into()),
    };
    let mut pngs = Vec::new();
    let mut reports = Vec::new();
    for run in 0..2 {
        let out = root.join(format!("edit_{run}"));
        cmd_edit(&EditArgs {
            triplet: data.join("bench/triplet_000"),
            ckpt: ckpt.clone(),
            source: None,
            out: out.clone(),
            sampler: sampler(),
        })?;
        pngs.push(tree_bytes(&out.join("frames")));
        let out = root.join(format!("eval_{run}"));
        cmd_eval(&EvalArgs {
            bench: data.clone(),
            ckpt: ckpt.clone(),
            out: out.clone(),
            sampler: sampler(),
        })?;
        reports.push(tree_bytes(&out));
    }
    let png_same = !pngs[0].is_empty() && pngs[0] == pngs[1];
    let report_same = reports[0].iter().any(|(n, _)| n == Path::new("report.json")) && reports[0] == reports[1];
    Ok((
        png_same && report_same,
        format!("{} PNGs byte-identical {png_same}, {} report files byte-identical {report_same}", pngs[0].len(), reports[0].len()),
    ))
}

fn fmt(a: &Aggregate) -> String {
    format!("warp {:.5} tc {:.4}", a.warp_error, a.temporal_consistency)
}

fn main() {
    let t0 = Instant::now();
    let mut out = Outcome::default();
    let mut check = |id: usize, name: &str, r: Result<(bool, String)>| match r {
        Ok((pass, detail)) => out.record(id, name, pass, detail),
        Err(e) => out.record(id, name, false, format!("error: {e}")),
    };

    check(11, "grid-mask exactness", grid_counts());
    check(4, "flow quality", flow_quality());
    check(5, "warp and metric oracles", metric_oracles());
    check(2, "end-to-end gradients", gradient_check());

    let corpus = CorpusConfig::default();
    let dataset = generate_training_corpus(&corpus).expect("training corpus");
    let triplets: Vec<Triplet> = (0..corpus.triplets).map(|i| generate_triplet(&corpus, i).expect("triplet")).collect();
    let tmp = tempfile::tempdir().expect("tempdir");
    let mc = ModelConfig::default();
    let stage_a = train_stage_a::<f32>(&dataset, &mc, &StageAConfig { steps: STAGE_A_STEPS, seed: SEED, ..Default::default() })
        .expect("stage A training")
        .params;
    let ckpt = tmp.path().join("stage_a.ived");
    save_checkpoint(&stage_a, &ckpt).expect("save");
    let stage_a = load_checkpoint::<f32>(&ckpt, &mc).expect("reload");
    println!("      stage A: {STAGE_A_STEPS} steps, {:.0}s elapsed", t0.elapsed().as_secs_f64());

    check(1, "inflation identity", inflation_identity(&stage_a, &triplets[0]));
    check(6, "schedule and sampler identities", sampler_identities(&stage_a, &triplets[0]));
    check(12, "end-to-end determinism", determinism(&stage_a, tmp.path()));

    let freeze = train_mmm(&stage_a, &dataset, &TrainConfig { steps: FREEZE_STEPS, seed: SEED, ..Default::default() }).map(|m| {
        let kept = [Group::Spatial, Group::RefEnc].iter().all(|&g| m.params.group_bits_eq(&stage_a, g));
        let moved = !m.params.group_bits_eq(&stage_a, Group::Motion) && !m.params.group_bits_eq(&stage_a, Group::MotRef);
        (kept && moved, format!("spatial and reference encoder bit-identical {kept}, temporal groups updated {moved}"))
    });
    check(3, "freeze contract", freeze);

    let sampler = SamplerConfig { num_steps: SAMPLE_STEPS, seed: SEED, ..Default::default() };
    let base = TrainConfig { steps: MMM_STEPS, seed: SEED, ..Default::default() };
    let runs: Vec<(&str, TrainConfig)> = vec![
        ("Exp2", base.clone()),
        ("Exp1", TrainConfig { use_motref: false, ..base.clone() }),
        ("Exp0", TrainConfig { use_motref: false, mask_ratio: 0.0, ..base.clone() }),
        ("ratio 0", TrainConfig { mask_ratio: 0.0, ..base.clone() }),
        ("ratio 0.25", TrainConfig { mask_ratio: 0.25, ..base.clone() }),
        ("ratio 0.5", TrainConfig { mask_ratio: 0.5, ..base.clone() }),
        ("clip_wise", TrainConfig { mask_strategy: MaskStrategy::ClipWise, ..base.clone() }),
    ];
    let baseline = evaluate(&triplets, &stage_a, &sampler, EditMode::FrameWiseBaseline).expect("baseline").overall();
    println!("      frame-wise baseline: {}", fmt(&baseline));
    let mut agg = std::collections::HashMap::new();
    for (label, cfg) in &runs {
        let tuned = train_mmm(&stage_a, &dataset, cfg).expect("fine-tuning").params;
        let a = evaluate(&triplets, &tuned, &sampler, EditMode::Inflated).expect("evaluation").overall();
        println!("      {label}: {} ({:.0}s elapsed)", fmt(&a), t0.elapsed().as_secs_f64());
        agg.insert(*label, a);
    }
    let w = |l: &str| agg[l].warp_error;

    let main_run = &agg["Exp2"];
    check(
        7,
        "inflated editing beats frame-wise baseline",
        Ok((
            main_run.warp_error <= 0.9 * baseline.warp_error && main_run.temporal_consistency > baseline.temporal_consistency,
            format!(
                "warp {:.5} vs 0.9 x {:.5}, tc {:.4} vs {:.4}",
                main_run.warp_error, baseline.warp_error, main_run.temporal_consistency, baseline.temporal_consistency
            ),
        )),
    );
    check(
        8,
        "component ordering Exp2 <= Exp1 <= Exp0",
        Ok((
            w("Exp2") <= 1.02 * w("Exp1") && w("Exp1") <= w("Exp0"),
            format!("Exp2 {:.5}, Exp1 {:.5}, Exp0 {:.5}", w("Exp2"), w("Exp1"), w("Exp0")),
        )),
    );
    let r75 = w("Exp2");
    check(
        9,
        "masking helps at every ratio",
        Ok((
            [w("ratio 0.25"), w("ratio 0.5"), r75].iter().all(|&x| x < w("ratio 0")) && r75 <= 1.02 * w("ratio 0.25"),
            format!("0 {:.5}, 0.25 {:.5}, 0.5 {:.5}, 0.75 {:.5}", w("ratio 0"), w("ratio 0.25"), w("ratio 0.5"), r75),
        )),
    );
    check(
        10,
        "frame-wise masking <= clip-wise",
        Ok((r75 <= w("clip_wise"), format!("frame_wise {r75:.5}, clip_wise {:.5}", w("clip_wise")))),
    );

    println!("\n{} of 12 criteria passed in {:.0}s", out.passed, t0.elapsed().as_secs_f64());
    if !out.failed_directional.is_empty() {
        println!("directional criteria not met: {:?}", out.failed_directional);
    }
    if !out.failed_gating.is_empty() {
        println!("exact or property criteria failed: {:?}", out.failed_gating);
        std::process::exit(1);
    }
}
