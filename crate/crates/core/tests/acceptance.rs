//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially so
//! the timing budgets are measured without contention from other checks.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use dehaze_core::bench::{run_bench, BenchSpec, InferenceTarget};
use dehaze_core::datasets::{generate_scenes, procedural_scene, synthesize_dataset, verify_record, SynthesisSpec};
use dehaze_core::imagecore::Image;
use dehaze_core::losses::{loss_forward_backward, ContentExtractor, LossKind, LossSpec};
use dehaze_core::metrics::{psnr, ssim, SsimParams};
use dehaze_core::models::{
    check_graph, decoder_block, DualFastNet, FastNetConfig, ModelGraph, ModelKind, ResidualBlock, REFERENCE_BIG,
    REFERENCE_DUAL, REFERENCE_REFINEMENT_BUDGET, REFERENCE_SMALL,
};
use dehaze_core::nn::gradcheck::check_input_gradient;
use dehaze_core::nn::{
    check_module, AdaptiveAvgPool2d, BatchNorm2d, Conv2d, ConvTranspose2d, GradCheckOptions, MaxPool2d, Mode, Module,
    Relu, Sigmoid, Tensor4, UpsampleBilinear,
};
use dehaze_core::scattering::{
    apply_k_raw, k_transform, recover_scene, recover_scene_raw, synthesize_haze, transmission_from_depth,
    AtmosphericLight, TransmissionMap, RECOVER_T_MIN,
};
use dehaze_core::training::{
    load_checkpoint, save_checkpoint, train, train_stage, train_with_refinement, Checkpoint, EarlyStopping, Sample,
    StopReason, TrainConfig, LOSS_STUDY,
};
use dehaze_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn random_image(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Image<f64> {
    Image::new(h, w, c, (0..h * w * c).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn random_tensor(dims: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor4<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Tensor4::from_vec(dims, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Shuffled multiples of 0.01: no ties for pooling, no values near ReLU's kink
/// other than the single exact zero, which is shifted away.
fn distinct(dims: [usize; 4], seed: u64) -> Tensor4<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01 + 0.005).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    Tensor4::from_vec(dims, vals).unwrap()
}

// ---------------------------------------------------------------------------

fn scattering_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let j = random_image(&mut r, h, w, 3, 0.0, 1.0);
        let t = TransmissionMap::new(h, w, (0..h * w).map(|_| r.random_range(0.2..=1.0)).collect()).unwrap();
        let a = AtmosphericLight::rgb([r.random_range(0.5..=1.0), r.random_range(0.5..=1.0), r.random_range(0.5..=1.0)]).unwrap();
        let hazy = synthesize_haze(&j, &t, &a).unwrap();
        let back = recover_scene(&hazy, &t, &a, RECOVER_T_MIN).unwrap();
        for (x, y) in back.data().iter().zip(j.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-5 && secs < 5.0, format!("max err {worst:.2e} over 1000 draws, {secs:.2} s"))
}

fn k_equivalence() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let (mut compared, mut masked) = (0usize, 0usize);
    for _ in 0..1000 {
        let (h, w) = (r.random_range(1..7), r.random_range(1..7));
        let mut hazy = random_image(&mut r, h, w, 3, 0.0, 1.0);
        if r.random_bool(0.2) {
            // push some values into the excluded band near 1
            hazy = Image::new(h, w, 3, hazy.data().iter().map(|v| 1.0 - v * 2e-3).collect()).unwrap();
        }
        let t = TransmissionMap::new(h, w, (0..h * w).map(|_| r.random_range(0.05..=1.0)).collect()).unwrap();
        let a = AtmosphericLight::rgb([r.random_range(0.5..=1.0), r.random_range(0.5..=1.0), r.random_range(0.5..=1.0)]).unwrap();
        let b = r.random_range(0.0..0.5);
        let via_k = apply_k_raw(&k_transform(&hazy, &t, &a, b).unwrap(), &hazy, b).unwrap();
        let direct = recover_scene_raw(&hazy, &t, &a, 1e-12).unwrap();
        for ((k, d), i) in via_k.iter().zip(&direct).zip(hazy.data()) {
            if *i <= 1.0 - 1e-3 {
                worst = worst.max((k - d).abs());
                compared += 1;
            } else {
                masked += 1;
            }
        }
    }
    outcome(worst <= 1e-5, format!("max err {worst:.2e} on {compared} values ({masked} with I > 1-1e-3 excluded)"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions::exhaustive(1e-6, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut layer_worst = 0.0f64;
    let mut worst_name = String::new();
    let mut note = |name: &str, err: f64| {
        if err >= layer_worst {
            layer_worst = err;
            worst_name = name.to_string();
        }
    };

    let x = random_tensor([2, 3, 6, 6], 10, -1.0, 1.0);
    note("conv2d", check_module(&mut Conv2d::<f64>::new(&mut rng, 3, 4, 3, 2, 1, true), &x, Mode::Eval, &opts).unwrap().max_rel_err);
    note(
        "conv_transpose2d",
        check_module(&mut ConvTranspose2d::<f64>::new(&mut rng, 3, 2, 3, 2, 1, 1, true), &x, Mode::Eval, &opts)
            .unwrap()
            .max_rel_err,
    );
    for mode in [Mode::Train, Mode::Eval] {
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.data_mut().copy_from_slice(&[0.5, 1.5, -0.7]);
        bn.beta.data_mut().copy_from_slice(&[0.1, 0.0, 0.3]);
        bn.running_mean.data_mut().copy_from_slice(&[0.2, -0.1, 0.4]);
        bn.running_var.data_mut().copy_from_slice(&[1.3, 0.8, 2.0]);
        note(&format!("batchnorm {mode:?}"), check_module(&mut bn, &x, mode, &opts).unwrap().max_rel_err);
    }
    let d = distinct([2, 3, 8, 8], 11);
    note("relu", check_module(&mut Relu::new(), &d, Mode::Eval, &opts).unwrap().max_rel_err);
    note("sigmoid", check_module(&mut Sigmoid::new(), &d, Mode::Eval, &opts).unwrap().max_rel_err);
    note("maxpool", check_module(&mut MaxPool2d::new(3, 2, 1), &d, Mode::Eval, &opts).unwrap().max_rel_err);
    for g in [1, 2, 3, 6] {
        note("adaptive avgpool", check_module(&mut AdaptiveAvgPool2d::new(g, g), &d, Mode::Eval, &opts).unwrap().max_rel_err);
    }
    note("upsample", check_module(&mut UpsampleBilinear::new(13, 16), &d, Mode::Eval, &opts).unwrap().max_rel_err);
    let mut block = ResidualBlock::<f64>::basic(&mut rng, 3, 4, 2);
    dehaze_core::nn::randomize_affine(&mut block.all_tensors_mut(), 4);
    note("residual basic", check_module(&mut block, &x, Mode::Eval, &opts).unwrap().max_rel_err);
    let mut block = ResidualBlock::<f64>::bottleneck(&mut rng, 3, 2, 2, true);
    dehaze_core::nn::randomize_affine(&mut block.all_tensors_mut(), 5);
    note("residual bottleneck", check_module(&mut block, &x, Mode::Eval, &opts).unwrap().max_rel_err);
    let mut dec = decoder_block::<f64, _>(&mut rng, 3, 2);
    dehaze_core::nn::randomize_affine(&mut dec.all_tensors_mut(), 6);
    note("decoder block", check_module(&mut dec, &x, Mode::Eval, &opts).unwrap().max_rel_err);

    // losses
    let truth = random_tensor([1, 3, 32, 32], 12, 0.1, 0.9);
    let pred = random_tensor([1, 3, 32, 32], 13, 0.1, 0.9);
    let pred_l1 = pred.zip_map(&truth, |p, t| if (p - t).abs() < 1e-3 { t + 0.01 } else { p }).unwrap();
    let mut ext = ContentExtractor::snapshot(&{
        let mut g = ModelGraph::<f64>::fastnet(&FastNetConfig::toy(), 1).unwrap();
        g.randomize_affine(5);
        g
    });
    for kind in [LossKind::Mse, LossKind::L1, LossKind::Ssim, LossKind::Content] {
        let x = if kind == LossKind::L1 { &pred_l1 } else { &pred };
        let spec = LossSpec::new(kind);
        let g = loss_forward_backward(x, &truth, &spec, Some(&mut ext)).unwrap().grad;
        let e = check_input_gradient(
            kind.label(),
            |p| Ok(loss_forward_backward(p, &truth, &spec, Some(&mut ext.clone()))?.value),
            x,
            &g,
            &opts,
        )
        .unwrap();
        note(&format!("loss {}", kind.label()), e.max_rel_err);
    }

    // whole toy graphs
    let graph_opts = GradCheckOptions::sampled(1e-6, 1e-4, 6, 7);
    let cfg = FastNetConfig {
        feature_channels: 8,
        ..FastNetConfig::toy()
    };
    let mut graph_worst = [0.0f64; 2];
    for (slot, kind) in [ModelKind::Fast, ModelKind::Dual].into_iter().enumerate() {
        let mut g = ModelGraph::<f64>::build(kind, &cfg, 5).unwrap();
        g.randomize_affine(11);
        let x = random_tensor([1, 3, 32, 32], 6, 0.05, 0.95);
        graph_worst[slot] = check_graph(&mut g, &x, Mode::Eval, &graph_opts).unwrap().max_rel_err;
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = layer_worst < 1e-6 && graph_worst.iter().all(|&e| e < 1e-4) && secs < 120.0;
    outcome(
        passed,
        format!(
            "layers+losses max rel err {layer_worst:.2e} ({worst_name}); FastNet {:.2e}, DualFastNet {:.2e}; {secs:.1} s",
            graph_worst[0], graph_worst[1]
        ),
    )
}

/// Direct per-window SSIM: Gaussian-weighted statistics at every valid
/// window position, computed from scratch, on the channel-mean plane.
fn naive_ssim(a: &Image<f64>, b: &Image<f64>, p: &SsimParams) -> f64 {
    let (h, w, c) = a.dims();
    let gray = |img: &Image<f64>, y: usize, x: usize| (0..c).map(|ch| img.get(y, x, ch)).sum::<f64>() / c as f64;
    let k = p.window;
    let rad = (k / 2) as f64;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - rad, j as f64 - rad);
            win[i * k + j] = (-(dy * dy + dx * dx) / (2.0 * p.sigma * p.sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= total);
    let c1 = (p.k1 * p.l).powi(2);
    let c2 = (p.k2 * p.l).powi(2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    mx += win[i * k + j] * gray(a, y0 + i, x0 + j);
                    my += win[i * k + j] * gray(b, y0 + i, x0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (dx, dy) = (gray(a, y0 + i, x0 + j) - mx, gray(b, y0 + i, x0 + j) - my);
                    vx += win[i * k + j] * dx * dx;
                    vy += win[i * k + j] * dy * dy;
                    cxy += win[i * k + j] * dx * dy;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn metric_oracles() -> Outcome {
    let p = SsimParams::default();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (mut ssim_err, mut psnr_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (h, w) = (r.random_range(11..24), r.random_range(11..24));
        let a = random_image(&mut r, h, w, 3, 0.0, 1.0);
        let noise = r.random_range(0.01..0.3);
        let b = Image::from_clamped(h, w, 3, a.data().iter().map(|v| v + r.random_range(-noise..noise)).collect()).unwrap();
        ssim_err = ssim_err.max((ssim(&a, &b, &p).unwrap() - naive_ssim(&a, &b, &p)).abs());
        let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
        let direct = 10.0 * (1.0 / mse).log10();
        psnr_err = psnr_err.max((psnr(&a, &b, 1.0).unwrap().finite().unwrap() - direct).abs());
    }
    let x = random_image(&mut r, 16, 16, 3, 0.0, 1.0);
    let self_ssim = ssim(&x, &x, &p).unwrap();
    let base = Image::filled(16, 16, 3, 0.5f64).unwrap();
    let offset = Image::filled(16, 16, 3, 0.6f64).unwrap();
    let db = psnr(&base, &offset, 1.0).unwrap().finite().unwrap();
    let passed = ssim_err <= 1e-6 && psnr_err <= 1e-9 && self_ssim == 1.0 && (db - 20.0).abs() <= 1e-9;
    outcome(
        passed,
        format!(
            "SSIM vs naive {ssim_err:.2e}, PSNR vs formula {psnr_err:.2e} dB, ssim(x,x) = {self_ssim}, offset 0.1 -> {db:.12} dB"
        ),
    )
}

/// One procedural 64×64 scene hazed with β = 1.5 and gray A = 0.8, with its
/// transmission and airlight truths.
fn overfit_pair() -> Sample<f32> {
    let (clean, depth) = procedural_scene(64, 64, 5).unwrap();
    let t = transmission_from_depth(&depth, 1.5).unwrap();
    let hazy = synthesize_haze(&clean, &t, &AtmosphericLight::gray(0.8f32).unwrap()).unwrap();
    let t_img = Image::new(64, 64, 1, t.data().to_vec()).unwrap();
    let a_img = Image::filled(64, 64, 3, 0.8f32).unwrap();
    Sample::from_images(&hazy, &clean, Some(&t_img), Some(&a_img)).unwrap()
}

fn tensor_bits(m: &ModelGraph<f32>, prefixes: &[&str]) -> Vec<u32> {
    m.tensors()
        .iter()
        .filter(|t| prefixes.is_empty() || prefixes.iter().any(|p| t.name.starts_with(p)))
        .flat_map(|t| t.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = vec![overfit_pair()];
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 500,
        early_stop_patience: 500,
        ..TrainConfig::default()
    };
    let mut model = ModelGraph::<f32>::fastnet(&FastNetConfig::toy(), 0).unwrap();
    let run = train(&mut model, &data, &data, &cfg).unwrap();
    let first = run
        .history
        .epochs
        .iter()
        .find(|e| e.train_psnr.finite().is_some_and(|v| v >= 25.0))
        .map(|e| e.steps);
    let last = run.history.epochs.last().unwrap();

    let mut dual = ModelGraph::<f32>::dualfastnet(&FastNetConfig::toy(), 0).unwrap();
    let air_prefixes = ["air.", "air_head."];
    let air_before = tensor_bits(&dual, &air_prefixes);
    let a_hat_before = dual.forward(&data[0].hazy, Mode::Infer).unwrap().airlight.unwrap();
    let stage_cfg = TrainConfig {
        max_epochs: 400,
        early_stop_patience: 400,
        ..cfg.clone()
    };
    let stage = train_stage(&mut dual, 0, &data, &data, &stage_cfg).unwrap();
    // The stage loss is MSE on t̂ from training-mode outputs, the same reading
    // as train PSNR above.
    let t_first = stage.history.epochs.iter().find(|e| e.train_loss < 1e-3).map(|e| e.epoch);
    let t_last = stage.history.epochs.last().unwrap().train_loss;
    let out = dual.forward(&data[0].hazy, Mode::Infer).unwrap();
    let t_hat = out.transmission.unwrap();
    let t_truth = data[0].transmission.as_ref().unwrap();
    let t_infer = t_hat.data().iter().zip(t_truth.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / t_hat.len() as f64;
    let air_same = tensor_bits(&dual, &air_prefixes) == air_before;
    let a_hat_same = out.airlight.unwrap().data() == a_hat_before.data();
    let secs = start.elapsed().as_secs_f64();
    let passed = first.is_some_and(|s| s <= 500) && t_first.is_some() && air_same && a_hat_same && secs < 300.0;
    outcome(
        passed,
        format!(
            "FastNet train PSNR >= 25 dB at step {} (step {}: {:.2} dB); stage 1 train t MSE < 1e-3 at epoch {} ({t_last:.2e} at {}, running-stats MSE {t_infer:.2e}); A branch unchanged: {}; {secs:.1} s",
            first.map_or("never".into(), |s| s.to_string()),
            last.steps,
            last.train_psnr,
            t_first.map_or("never".into(), |e| e.to_string()),
            stage.history.epochs_run,
            air_same && a_hat_same,
        ),
    )
}

fn parameter_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let units = [
        (Conv2d::<f32>::new(&mut rng, 3, 64, 7, 2, 3, false).param_count(), 3 * 64 * 49),
        (Conv2d::<f32>::new(&mut rng, 16, 32, 3, 1, 1, true).param_count(), 16 * 32 * 9 + 32),
        (ConvTranspose2d::<f32>::new(&mut rng, 16, 8, 3, 2, 1, 1, true).param_count(), 16 * 8 * 9 + 8),
        (BatchNorm2d::<f32>::new(64).param_count(), 128),
        (Module::<f32>::param_count(&Relu::<f32>::new()), 0),
        (Module::<f32>::param_count(&MaxPool2d::new(3, 2, 1)), 0),
    ];
    let units_ok = units.iter().all(|(a, b)| a == b);

    let small = ModelGraph::<f32>::fastnet(&FastNetConfig::small(), 0).unwrap().param_count();
    let big = ModelGraph::<f32>::fastnet(&FastNetConfig::big(), 0).unwrap().param_count();
    let dual_graph = ModelGraph::<f32>::dualfastnet(&FastNetConfig::small(), 0).unwrap();
    let dual = dual_graph.param_count();
    let rel = |got: usize, want: usize| (got as f64 - want as f64) / want as f64;
    let rels = [rel(small, REFERENCE_SMALL), rel(big, REFERENCE_BIG), rel(dual, REFERENCE_DUAL)];
    let within = rels.iter().all(|r| r.abs() <= 0.05);

    let mut identity = true;
    for cfg in [FastNetConfig::small(), FastNetConfig::big(), FastNetConfig::toy()] {
        let g = ModelGraph::<f32>::dualfastnet(&cfg, 0).unwrap();
        let ModelGraph::Dual { net, .. } = &g else { unreachable!() };
        let net: &DualFastNet<f32> = net;
        identity &= g.param_count() == 2 * net.trunk_params() + net.head_params();
    }
    let refine: usize = dual_graph
        .param_groups()
        .iter()
        .filter(|(k, _)| k.starts_with("refine") || k.ends_with("_head"))
        .map(|(_, n)| n)
        .sum();
    outcome(
        units_ok && within && identity,
        format!(
            "unit layers exact: {units_ok}; small {small} ({:+.2}%), big {big} ({:+.2}%), dual {dual} ({:+.2}%); dual = 2*ED + heads: {identity}; refinement+heads {refine} vs budget {REFERENCE_REFINEMENT_BUDGET}",
            100.0 * rels[0],
            100.0 * rels[1],
            100.0 * rels[2]
        ),
    )
}

fn training_protocol() -> Outcome {
    let mut es = EarlyStopping::new(3);
    let script = [1.0, 0.9, 0.95, 0.92, 0.91, 0.5];
    let mut stop_at = None;
    for (i, &l) in script.iter().enumerate() {
        es.update(l);
        if es.should_stop() {
            stop_at = Some(i + 1);
            break;
        }
    }
    let early_ok = stop_at == Some(5);

    let data = vec![overfit_pair()];
    let cfg = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = ModelGraph::<f32>::fastnet(&FastNetConfig::toy(), 9).unwrap();
        let out = train(&mut m, &data, &data, &cfg).unwrap();
        (tensor_bits(&m, &[]), out.history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    let deterministic = a == b && ha == hb;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fdhz");
    let mut m = ModelGraph::<f32>::fastnet(&FastNetConfig::toy(), 4).unwrap();
    train(&mut m, &data, &data, &TrainConfig { max_epochs: 1, ..cfg.clone() }).unwrap();
    save_checkpoint(&m, &path).unwrap();
    let back: ModelGraph<f32> = load_checkpoint(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let ckpt_ok = tensor_bits(&back, &[]) == tensor_bits(&m, &[]) && Checkpoint::capture(&back).to_bytes() == bytes;

    let mut rows = 0;
    for (base, refine) in LOSS_STUDY {
        let cfg = TrainConfig {
            max_epochs: 1,
            loss: base.parse().unwrap(),
            refine_loss: refine.map(|r| r.parse().unwrap()),
            ..TrainConfig::default()
        };
        let mut m = ModelGraph::<f32>::fastnet(&FastNetConfig::toy(), 2).unwrap();
        let ok = train_with_refinement(&mut m, &data, &data, &cfg)
            .is_ok_and(|runs| runs.len() == 1 + refine.is_some() as usize && runs.iter().all(|r| r.history.stop_reason != StopReason::Diverged));
        rows += ok as usize;
    }
    outcome(
        early_ok && deterministic && ckpt_ok && rows == LOSS_STUDY.len(),
        format!(
            "early stop at epoch {stop_at:?} with patience 3; same-seed bit-identical: {deterministic}; checkpoint bit-exact: {ckpt_ok}; loss study rows {rows}/{}",
            LOSS_STUDY.len()
        ),
    )
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn dataset_generation() -> Outcome {
    let n = 5;
    let dir = tempfile::tempdir().unwrap();
    let (clean, depth) = generate_scenes(&dir.path().join("src"), n, 32, 32, 7).unwrap();
    let spec = SynthesisSpec {
        seed: 7,
        ..SynthesisSpec::default()
    };
    let m = synthesize_dataset(&clean, &depth, &dir.path().join("a"), &spec).unwrap();
    synthesize_dataset(&clean, &depth, &dir.path().join("b"), &spec).unwrap();
    let checks: Vec<bool> = m.records.iter().map(|r| verify_record(&m.root, r).unwrap().passes()).collect();
    let passing = checks.iter().filter(|&&c| c).count();
    let (a, b) = (dir_bytes(&dir.path().join("a")), dir_bytes(&dir.path().join("b")));
    let identical = a == b;
    outcome(
        m.records.len() == 4 * n && passing == m.records.len() && identical,
        format!(
            "{n} scenes -> {} records; {passing} pass convex-hull and re-synthesis checks; regeneration byte-identical over {} files: {identical}",
            m.records.len(),
            a.len()
        ),
    )
}

/// Counts forwards while delegating to a real model.
struct Counted {
    inner: ModelGraph<f32>,
    calls: usize,
}

impl InferenceTarget<f32> for Counted {
    fn label(&self) -> String {
        self.inner.label()
    }

    fn forward(&mut self, x: &Tensor4<f32>) -> Result<()> {
        self.calls += 1;
        InferenceTarget::forward(&mut self.inner, x)
    }

    fn estimate_bytes(&self, batch: usize, height: usize, width: usize) -> usize {
        self.inner.estimate_bytes(batch, height, width)
    }
}

fn bench_harness() -> Outcome {
    let start = Instant::now();
    let spec = BenchSpec::default();
    let mut target = Counted {
        inner: ModelGraph::fastnet(&FastNetConfig::toy(), 0).unwrap(),
        calls: 0,
    };
    let report = run_bench(&mut target, &spec).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let cells = report.cells.len();
    let counters = report.cells.iter().all(|c| c.timed_runs == 20 && c.warmup_runs == 3) && target.calls == cells * 23;

    let mut latency_ok = true;
    let mut latency_ratio = 0.0f64;
    for &(h, w) in &spec.resolutions {
        let (one, eight) = (report.cell(h, w, 1).unwrap(), report.cell(h, w, 8).unwrap());
        let ratio = eight.latency_ms_per_image / one.latency_ms_per_image;
        latency_ratio = latency_ratio.max(ratio);
        latency_ok &= ratio <= 1.2;
    }
    let mut fps_ok = true;
    let mut fps_ratio = 0.0f64;
    for &b in &spec.batch_sizes {
        for pair in spec.resolutions.windows(2) {
            let (lo, hi) = (report.cell(pair[0].0, pair[0].1, b).unwrap(), report.cell(pair[1].0, pair[1].1, b).unwrap());
            let ratio = hi.fps / lo.fps;
            fps_ratio = fps_ratio.max(ratio);
            fps_ok &= ratio <= 1.1;
        }
    }
    outcome(
        counters && latency_ok && fps_ok && secs < 60.0,
        format!(
            "{cells} cells x (20 timed + 3 warmup) = {} forwards counted; worst batch-8/batch-1 latency ratio {latency_ratio:.3}; worst FPS ratio across resolution {fps_ratio:.3}; sweep {secs:.1} s",
            target.calls
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("scattering round-trip", scattering_round_trip),
        ("K-transform equivalence", k_equivalence),
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("overfit", overfit),
        ("parameter accounting", parameter_accounting),
        ("training protocol", training_protocol),
        ("dataset generation", dataset_generation),
        ("bench harness", bench_harness),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        // Straight to the handle so the lines survive libtest's output capture.
        let line = format!("criterion {} [{name}]: {} ({})\n", i + 1, if o.passed { "PASS" } else { "FAIL" }, o.detail);
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if !o.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
