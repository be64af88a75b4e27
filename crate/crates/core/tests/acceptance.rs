//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits nonzero if any fails. Criteria 6, 7, 8, 10 and 11 share one
//! trained pipeline built on first use.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use volsynth::codec::LabelCodec;
use volsynth::diffusion::{ddpm_loss, ddpm_loss_grad, q_sample, DiffusionSchedule, NoisePrediction};
use volsynth::eval::downstream::{downstream_study, Segmenter, Strategy};
use volsynth::eval::metrics::{occupancy_profile, pearson};
use volsynth::eval::report::mean_alignment;
use volsynth::io;
use volsynth::mcdpm::{cfg_combine, sample_condition_mode, ConditionMode, McDenoiser, McDpmShape, ModeProbabilities};
use volsynth::nn::{Network, PointwiseConfig, PointwiseNet};
use volsynth::pipeline::{self, Models, Pair, Paths, PipelineConfig, Stage};
use volsynth::refiner::{refine_volume, SdmModel};
use volsynth::rng::{self, Rng};
use volsynth::sampler::{stitch, BlockSampler};
use volsynth::volume::{MaskVolume, Volume};

type Check = fn() -> String;

fn main() {
    let criteria: [(&str, Check); 11] = [
        ("forward-process oracle", forward_process),
        ("gradient correctness", gradients),
        ("guidance identities", guidance),
        ("stitching exactness", stitching),
        ("condition-mode statistics", mode_statistics),
        ("overfit mask fidelity", mask_fidelity),
        ("alignment proxy", alignment),
        ("refiner identities", refiner_identities),
        ("codec round-trip", codec_round_trip),
        ("end-to-end determinism", determinism),
        ("downstream study smoke", downstream),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({secs:.1}s): {detail}", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
                println!("criterion {:>2} FAIL {name} ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn normals(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

// 1. Closed-form q_sample against the iterated one-step kernel.

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn forward_process() -> String {
    let sched = PipelineConfig::default().schedule().unwrap();
    let big_t = sched.steps();
    let draws = 10_000;
    let x0: Vec<f64> = (0..16).map(|i| -1.0 + 1.5 * i as f64 / 15.0).collect();
    let mut r = rng::rng(11);
    let mut out = Vec::new();
    for t in [1, big_t / 2, big_t] {
        let (mut closed, mut iterated) = (Vec::new(), Vec::new());
        for _ in 0..draws {
            closed.extend(q_sample(&x0, t, &normals(&mut r, x0.len()), &sched).unwrap());
            let mut x = x0.clone();
            for s in 1..=t {
                let (a, b) = (sched.alpha(s).sqrt(), sched.beta(s).sqrt());
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut r);
                    *v = a * *v + b * z;
                }
            }
            iterated.extend(x);
        }
        let (mc, sc) = mean_std(&closed);
        let (mi, si) = mean_std(&iterated);
        let sigma = (1.0 - sched.alpha_bar(t)).sqrt();
        let mean_rel = (mc - mi).abs() / (mc.abs().max(sigma));
        let std_rel = (sc / si - 1.0).abs();
        assert!(mean_rel < 0.02 && std_rel < 0.02, "t={t}: mean {mc:.5} vs {mi:.5}, std {sc:.5} vs {si:.5}");
        out.push(format!("t={t} dmean {:.2}% dstd {:.2}%", 100.0 * mean_rel, 100.0 * std_rel));
    }
    out.join(", ")
}

// 2. Analytic gradients against central differences in f64.

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    diff / scale.max(1e-12)
}

fn central_diff(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..params.len())
        .map(|i| {
            let mut p = params.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn gradients() -> String {
    let sched = DiffusionSchedule::linear(50, 1e-3, 0.1).unwrap();
    let mut r = rng::rng(3);
    let dims = [1, 3, 3];
    let plane = 9;

    // plain noise-prediction loss
    let net = PointwiseNet::new(PointwiseConfig { in_channels: 1, out_channels: 1, hidden: 4, cond_inputs: 1, freq_dim: 2 });
    assert!(net.num_params() <= 50);
    let params: Vec<f64> = net.init_params(&mut r);
    let x0: Vec<f64> = (0..plane).map(|_| r.gen_range(-1.0..1.0)).collect();
    let eps = normals(&mut r, plane);
    let mut worst_plain: f64 = 0.0;
    for t in [1, 17, 50] {
        let (_, grad) = ddpm_loss_grad(&net, &params, &x0, dims, t, &eps, &sched).unwrap();
        let num = central_diff(&params, |p| ddpm_loss(|x: &[f64], t| net.infer(p, x, dims, &[t as f64]), &x0, t, &eps, &sched).unwrap());
        worst_plain = worst_plain.max(rel_err(&grad, &num));
    }

    // multi-condition loss over each conditioning mode
    let (m, n) = (2, 1);
    let mc_net = PointwiseNet::new(PointwiseConfig { in_channels: 3 * m, out_channels: m, hidden: 3, cond_inputs: 2, freq_dim: 2 });
    assert!(mc_net.num_params() <= 50);
    let den = McDenoiser::new(McDpmShape { m, n, h: 3, w: 3 }, mc_net).unwrap();
    let params: Vec<f64> = den.net.init_params(&mut r);
    let mut worst_mc: f64 = 0.0;
    for mode in [ConditionMode::Unconditional, ConditionMode::Forward, ConditionMode::Backward] {
        let target: Vec<f64> = (0..mode.target_slots(m, n).len() * plane).map(|_| r.gen_range(-1.0..1.0)).collect();
        let cond: Vec<f64> = (0..mode.condition_count(n) * plane).map(|_| r.gen_range(-1.0..1.0)).collect();
        let eps = normals(&mut r, target.len());
        let t = 23;
        let (_, grad) = den.loss_grad_raw(&params, &target, &cond, mode, 0.4, t, &eps, &sched).unwrap();
        let num = central_diff(&params, |p| den.loss(p, &target, &cond, mode, 0.4, t, &eps, &sched).unwrap());
        worst_mc = worst_mc.max(rel_err(&grad, &num));
    }
    assert!(worst_plain < 1e-3 && worst_mc < 1e-3, "plain {worst_plain:.2e}, multi-condition {worst_mc:.2e}");
    format!("plain loss ({} params) rel err {worst_plain:.1e}, multi-condition loss ({} params) rel err {worst_mc:.1e}", net.num_params(), den.net.num_params())
}

// 3. Guidance combination identities, bitwise.

fn guidance() -> String {
    let mut r = rng::rng(5);
    let mut checked = 0;
    for _ in 0..200 {
        let u = NoisePrediction(normals(&mut r, 64).into_iter().map(|v| v as f32 * 1e3).collect::<Vec<f32>>());
        let c = NoisePrediction(normals(&mut r, 64).into_iter().map(|v| v as f32 * 1e-3).collect::<Vec<f32>>());
        let out = cfg_combine(&u, &c, 1.0).unwrap();
        assert!(out.iter().zip(c.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "s=1 is not the conditional prediction");
        for s in [1.0, 1.5, 3.0, 7.5] {
            let same = cfg_combine(&c, &c, s).unwrap();
            assert!(same.iter().zip(c.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "fixed point broken at s={s}");
        }
        checked += 64;
    }
    assert!(cfg_combine(&NoisePrediction(vec![0.0f32]), &NoisePrediction(vec![1.0f32]), 0.5).is_err());
    format!("{checked} elements bitwise at s=1 and at u=c for s in {{1, 1.5, 3, 7.5}}")
}

// 4. Stitching with a recording stub sampler.

struct Recorder {
    shape: McDpmShape,
    calls: Mutex<Vec<(Vec<f32>, Vec<f32>)>>,
}

impl BlockSampler for Recorder {
    fn shape(&self) -> McDpmShape {
        self.shape
    }

    fn sample(&self, condition: &[f32], mode: ConditionMode, _: f64, r: &mut Rng) -> volsynth::Result<Vec<f32>> {
        let McDpmShape { m, n, h, w } = self.shape;
        let out: Vec<f32> = (0..mode.target_slots(m, n).len() * h * w).map(|_| r.gen()).collect();
        self.calls.lock().unwrap().push((condition.to_vec(), out.clone()));
        Ok(out)
    }
}

fn stitching() -> String {
    let (h, w) = (2, 3);
    let plane = h * w;
    let mut runs = 0;
    let mut max_ratio: f64 = 0.0;
    for m in [4, 6] {
        for n in [1, 2] {
            for depth in 6..=40 {
                if depth < m {
                    continue;
                }
                for seed in 0..3 {
                    let rec = Recorder { shape: McDpmShape { m, n, h, w }, calls: Mutex::new(Vec::new()) };
                    let (vol, trace) = stitch(&rec, depth, &mut rng::rng(seed)).unwrap();
                    let calls = rec.calls.into_inner().unwrap();
                    let ctx = format!("L={depth} m={m} n={n} seed={seed}");
                    assert_eq!(vol.dims(), [depth, h, w], "{ctx}");
                    assert_eq!(calls.len(), trace.steps.len(), "{ctx}");
                    let bound = 2 * depth.div_ceil(m - n);
                    assert!(trace.steps.len() <= bound, "{ctx}: {} iterations", trace.steps.len());
                    max_ratio = max_ratio.max(trace.steps.len() as f64 / bound as f64);
                    let slice = |z: i64| &vol.data()[z as usize * plane..(z as usize + 1) * plane];
                    let mut covered = vec![false; depth];
                    for (i, (step, (cond, out))) in trace.steps.iter().zip(&calls).enumerate() {
                        match step.mode {
                            ConditionMode::Unconditional => {
                                assert_eq!(i, 0, "{ctx}");
                                assert_eq!(step.produced, (trace.z0 as i64, (trace.z0 + m) as i64), "{ctx}");
                            }
                            ConditionMode::Forward => {
                                assert_eq!(step.produced.0, step.condition.1, "{ctx}");
                                assert_eq!(step.z_norm, step.condition.0 as f64 / depth as f64, "{ctx}");
                            }
                            ConditionMode::Backward => {
                                assert_eq!(step.produced.1, step.condition.0, "{ctx}");
                                assert_eq!(step.z_norm, step.produced.0.max(0) as f64 / depth as f64, "{ctx}");
                            }
                        }
                        for (k, z) in (step.condition.0..step.condition.1).enumerate() {
                            assert_eq!(slice(z), &cond[k * plane..(k + 1) * plane], "{ctx}: condition slice {z} altered");
                        }
                        for (k, z) in (step.produced.0..step.produced.1).enumerate() {
                            if (0..depth as i64).contains(&z) {
                                assert_eq!(slice(z), &out[k * plane..(k + 1) * plane], "{ctx}: slice {z} not from its producer");
                                covered[z as usize] = true;
                            }
                        }
                    }
                    let first_backward = trace.steps.iter().position(|s| s.mode == ConditionMode::Backward).unwrap_or(trace.steps.len());
                    assert!(trace.steps[first_backward..].iter().all(|s| s.mode == ConditionMode::Backward), "{ctx}");
                    assert!(covered.iter().all(|&c| c), "{ctx}: uncovered slices");
                    runs += 1;
                }
            }
        }
    }
    format!("{runs} stitched volumes, max iterations {:.0}% of the bound", 100.0 * max_ratio)
}

// 5. Empirical mode frequencies.

fn mode_counts(probs: &ModeProbabilities, draws: usize, seed: u64) -> [usize; 3] {
    let mut r = rng::rng(seed);
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        counts[match sample_condition_mode(probs, &mut r).unwrap() {
            ConditionMode::Forward => 0,
            ConditionMode::Backward => 1,
            ConditionMode::Unconditional => 2,
        }] += 1;
    }
    counts
}

fn worst_z(counts: &[usize; 3], want: [f64; 3], draws: usize) -> f64 {
    counts.iter().zip(want).map(|(&c, p)| (c as f64 / draws as f64 - p).abs() / (p * (1.0 - p) / draws as f64).sqrt()).fold(0.0, f64::max)
}

/// Pearson χ² of observed mode counts; cells with zero probability must be empty.
fn chi_square(counts: &[usize; 3], want: [f64; 3], draws: usize) -> f64 {
    counts
        .iter()
        .zip(want)
        .map(|(&c, p)| {
            let e = p * draws as f64;
            if e == 0.0 {
                assert_eq!(c, 0, "mode drawn with zero probability");
                0.0
            } else {
                (c as f64 - e).powi(2) / e
            }
        })
        .sum()
}

fn mode_statistics() -> String {
    // 2 dof χ² quantile at the two-sigma level 0.9545: -2 ln(1 - 0.9545)
    let bound = -2.0 * (1.0f64 - 0.9545).ln();
    let mut out = Vec::new();
    for (i, probs) in
        [ModeProbabilities::default(), ModeProbabilities::new(0.5, 0.3, 0.2).unwrap(), ModeProbabilities::new(0.1, 0.1, 0.8).unwrap()].iter().enumerate()
    {
        let want = [probs.p_forward, probs.p_backward, probs.p_uncondition];
        let counts = mode_counts(probs, 10_000, 100 + i as u64);
        let chi = chi_square(&counts, want, 10_000);
        let z = worst_z(&counts, want, 10_000);
        assert!(chi <= bound, "counts {counts:?} for {want:?}: chi2 {chi:.2} > {bound:.2}");
        let big = worst_z(&mode_counts(probs, 1_000_000, 200 + i as u64), want, 1_000_000);
        assert!(big <= 4.0, "10^6 draws for {want:?}: {big:.2} sigma");
        out.push(format!("{want:?} chi2 {chi:.2} (max cell {z:.2} sigma, 10^6 draws {big:.2} sigma)"));
    }
    format!("{}; bound {bound:.2}", out.join(", "))
}

// 9. Codec round trip on random volumes.

fn codec_round_trip() -> String {
    let mut r = rng::rng(9);
    for k in 2..=8usize {
        // background 0 plus k - 1 distinct foreground labels
        let mut labels: Vec<u8> = (0..=255u8).collect();
        for i in 1..k {
            let j = r.gen_range(i..labels.len());
            labels.swap(i, j);
        }
        labels.truncate(k);
        let codec = LabelCodec::new(labels.clone()).unwrap();
        let dims = [5, 7, 6];
        let data: Vec<u8> = (0..dims.iter().product()).map(|_| labels[r.gen_range(0..k)]).collect();
        let mask = MaskVolume::new(Volume::new(dims, data).unwrap(), labels).unwrap();
        let enc = codec.encode(&mask).unwrap();
        assert!(enc.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(codec.decode(&enc).voxels(), mask.voxels(), "K={k}");
    }
    "K = 2..8 on random label subsets".into()
}

// Shared trained pipeline.

const MASK_STEPS: usize = 2000;
const IMAGE_STEPS: usize = 5000;
const REFINER_STEPS: usize = 800;
const SYNTH_SEEDS: [u64; 3] = [0, 1, 2];

struct Trained {
    _dir: tempfile::TempDir,
    cfg: PipelineConfig,
    train: Vec<Pair>,
    val: Vec<Pair>,
    synth: Vec<Pair>,
    mask_loss: (f64, f64),
    timings: String,
}

fn loss_window(csv: &Path, model: &str, last: bool) -> f64 {
    let text = std::fs::read_to_string(csv).unwrap();
    let losses: Vec<f64> =
        text.lines().skip(1).filter(|l| l.starts_with(&format!("{model},"))).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let w = 200.min(losses.len());
    let part = if last { &losses[losses.len() - w..] } else { &losses[..w] };
    part.iter().sum::<f64>() / w as f64
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig { seed: 1, count: 10, checkpoint_every: 0, ..Default::default() };
        cfg.mask.steps = MASK_STEPS;
        cfg.image.steps = IMAGE_STEPS;
        cfg.refiner.steps = REFINER_STEPS;
        cfg.paths = Paths { data: dir.path().join("data"), checkpoints: dir.path().join("ckpt"), output: dir.path().join("out") };
        let mut timings = Vec::new();
        let mut timed = |name: &str, f: &mut dyn FnMut()| {
            let t = Instant::now();
            f();
            timings.push(format!("{name} {:.0}s", t.elapsed().as_secs_f64()));
        };
        timed("data", &mut || {
            pipeline::cmd_make_data(&cfg).unwrap();
        });
        for stage in [Stage::Mask, Stage::Image, Stage::Refiner] {
            timed(stage.name(), &mut || {
                pipeline::cmd_train(&cfg, stage, false).unwrap();
            });
        }
        timed("synthesis", &mut || {
            pipeline::cmd_synthesize(&cfg, &SYNTH_SEEDS).unwrap();
        });
        let (_, train, val) = pipeline::load_data(&cfg.paths.data).unwrap();
        let synth = pipeline::load_synthetic(&cfg.paths.output).unwrap();
        let csv = cfg.paths.checkpoints.join("mask_loss.csv");
        let mask_loss = (loss_window(&csv, "mask", false), loss_window(&csv, "mask", true));
        Trained { _dir: dir, cfg, train, val, synth, mask_loss, timings: timings.join(", ") }
    })
}

// 6. Occupancy profile of generated masks against the training set.

fn mask_fidelity() -> String {
    let tr = trained();
    let k = tr.cfg.phantom.labels as u8;
    let train_labels: Vec<u8> = {
        let mut all: Vec<u8> = tr.train.iter().flat_map(|(m, _)| m.label_set().to_vec()).collect();
        all.sort_unstable();
        all.dedup();
        all
    };
    for (m, _) in &tr.synth {
        assert!(m.label_set().iter().all(|l| train_labels.contains(l)), "label outside the training set");
        assert_eq!(m.dims(), tr.cfg.phantom.dims);
    }
    let labels: Vec<u8> = (1..k).collect();
    let bins = tr.cfg.phantom.dims[0];
    let truth: Vec<&MaskVolume> = tr.train.iter().map(|(m, _)| m).collect();
    let gen: Vec<&MaskVolume> = tr.synth.iter().map(|(m, _)| m).collect();
    let tp = occupancy_profile(&truth, &labels, bins);
    let r = pearson(&tp, &occupancy_profile(&gen, &labels, bins));
    let per: Vec<String> = gen.iter().map(|m| format!("{:.2}", pearson(&tp, &occupancy_profile(&[*m], &labels, bins)))).collect();
    let detail = format!("pooled r={r:.3} (per volume {}), mask loss {:.4} -> {:.4}, {}", per.join("/"), tr.mask_loss.0, tr.mask_loss.1, tr.timings);
    assert!(r >= 0.8, "{detail}");
    detail
}

// 7. Refined images agree with their generated masks.

fn alignment() -> String {
    let tr = trained();
    let pairs: Vec<_> = tr.synth.iter().map(|(m, i)| (i, m)).collect();
    let (scores, mean) = mean_alignment(&pairs, &tr.cfg.phantom).unwrap();
    let mean = mean.expect("foreground labels present");
    let per: Vec<String> = scores.iter().map(|s| format!("{}:{}", s.label, s.dice.map_or("-".into(), |d| format!("{d:.3}")))).collect();
    let detail = format!("mean alignment Dice {mean:.3} ({})", per.join(" "));
    assert!(mean >= 0.9, "{detail}");
    detail
}

// 8. Refiner identities with the trained refiners.

fn refiner_identities() -> String {
    let tr = trained();
    let models = Models::load(&tr.cfg.paths.checkpoints).unwrap();
    let sched = tr.cfg.schedule().unwrap();
    let codec = tr.cfg.codec();
    let (mask, image) = &tr.val[0];
    let refs: Vec<&SdmModel> = models.refiners.iter().collect();
    let run = |order: &[&SdmModel], k: usize| refine_volume(image, mask, order, k, &sched, &codec, &mut rng::rng(77)).unwrap();
    let same = run(&refs, 0);
    assert!(same.data().iter().zip(image.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "k=0 is not the identity");
    let permuted = [refs[2], refs[0], refs[1]];
    let (a, b) = (run(&refs, 5), run(&permuted, 5));
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "view order changed the result");
    let mut changes = Vec::new();
    for k in [0, 2, 5, 10] {
        let out = run(&refs, k);
        let d = out.data().iter().zip(image.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / image.data().len() as f64;
        assert!(d <= 3.0 * (1.0 - sched.alpha_bar(k)).sqrt() + 1e-12, "k={k}: mean change {d} above bound");
        changes.push(d);
    }
    assert!(changes.windows(2).all(|w| w[0] <= w[1]), "perturbation not monotone: {changes:?}");
    format!("k=0 identity, permutation bitwise, mean |change| over k=0,2,5,10: {changes:.4?}")
}

// 10. Same seed, same bytes.

fn determinism() -> String {
    let tr = trained();
    let mut again = tr.cfg.clone();
    again.paths.output = tr.cfg.paths.output.with_file_name("out_again");
    pipeline::cmd_synthesize(&again, &[SYNTH_SEEDS[0]]).unwrap();
    let stem = format!("synth_{}", SYNTH_SEEDS[0]);
    let (a, b) = (tr.cfg.paths.output.join(&stem), again.paths.output.join(&stem));
    let mut files = 0;
    for (pa, pb) in [(io::mask_paths(&a), io::mask_paths(&b)), (io::image_paths(&a), io::image_paths(&b))] {
        for (fa, fb) in [(pa.0, pb.0), (pa.1, pb.1)] {
            assert_eq!(std::fs::read(&fa).unwrap(), std::fs::read(&fb).unwrap(), "{} differs", fa.display());
            files += 1;
        }
    }
    format!("{files} files byte-identical across two runs with seed {}", SYNTH_SEEDS[0])
}

// 11. Downstream identical-data control and table bounds.

fn downstream() -> String {
    let tr = trained();
    let study = &tr.cfg.eval.study;
    let classes = tr.cfg.phantom.labels;
    let control = downstream_study(&tr.train, &tr.train.clone(), &tr.val, classes, &[Strategy::RealOnly, Strategy::SynthOnly], &Segmenter::ALL, study).unwrap();
    let mut deltas = Vec::new();
    for seg in Segmenter::ALL {
        let real = control.row(Strategy::RealOnly, seg).unwrap().mean.unwrap_or(0.0);
        let copy = control.row(Strategy::SynthOnly, seg).unwrap().mean.unwrap_or(0.0);
        assert!((real - copy).abs() < 0.02, "{seg:?}: real-only {real:.3} vs identical copy {copy:.3}");
        deltas.push(format!("{seg:?} {:.4}", (real - copy).abs()));
    }
    let table = downstream_study(&tr.train, &tr.synth, &tr.val, classes, &Strategy::ALL, &Segmenter::ALL, study).unwrap();
    for t in [&control, &table] {
        assert!(t.rows.iter().all(|r| r.dice.iter().flatten().chain(r.mean.iter()).all(|d| (0.0..=1.0).contains(d))), "Dice outside [0, 1]");
    }
    println!("{}", table.to_text());
    format!("identical-data |dDice|: {}; full table above", deltas.join(", "))
}
