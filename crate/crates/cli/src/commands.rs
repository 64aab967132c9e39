use std::fs;
use std::path::{Path, PathBuf};

use dehaze_core::bench::{run_bench, BenchSpec, InferenceTarget};
use dehaze_core::datasets::{
    generate_scenes, list_images, load_dataset, synthesize_dataset, Split,
};
use dehaze_core::imagecore::{images_to_tensor, load_image, save_image, tensor_to_images, Image};
use dehaze_core::losses::CompositeSpec;
use dehaze_core::metrics::{evaluate_pairs, Psnr, QualityReport, SsimParams};
use dehaze_core::models::{
    check_graph, ModelGraph, ModelKind, REFERENCE_BIG, REFERENCE_DUAL, REFERENCE_REFINEMENT_BUDGET, REFERENCE_SMALL,
};
use dehaze_core::nn::gradcheck::random_weights;
use dehaze_core::nn::{GradCheckOptions, Mode};
use dehaze_core::training::{
    load_checkpoint, save_checkpoint, train_stagewise, train_with_refinement, StopReason, TrainConfig, TrainOutcome,
};
use dehaze_core::{Error, Result};

use crate::config::FileConfig;
use crate::{BenchArgs, Cli, Command, DehazeArgs, EvalArgs, GradcheckArgs, ParamsArgs, SynthArgs, TrainArgs};

/// Dispatches a parsed invocation; the returned code is the process exit status.
pub fn run(cli: Cli) -> Result<u8> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed);
    match cli.command {
        Command::Synth(a) => synth(a, &file, seed),
        Command::Train(a) => train(a, &file, seed),
        Command::Dehaze(a) => dehaze(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a, &file, seed),
        Command::Params(a) => params(a, &file),
        Command::Gradcheck(a) => gradcheck(a, seed),
    }
}

/// `1234567` as `1,234,567`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn synth(a: SynthArgs, file: &FileConfig, seed: Option<u64>) -> Result<u8> {
    let mut spec = file.synth.clone().unwrap_or_default();
    if let Some(v) = a.variations {
        spec.variations = v;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let (clean, depth) = match a.procedural {
        Some(n) => {
            if n == 0 {
                return Err(Error::InvalidArgument("--procedural needs at least one scene".into()));
            }
            let (h, w) = a.size;
            generate_scenes(&a.out.join("source"), n, h, w, spec.seed)?
        }
        None => {
            let (clean, depth) = (a.clean.expect("clap enforces --clean"), a.depth.expect("clap enforces --depth"));
            require_dir(&clean)?;
            require_dir(&depth)?;
            (clean, depth)
        }
    };
    let manifest = synthesize_dataset(&clean, &depth, &a.out, &spec)?;
    println!(
        "{} records ({} train, {} val, {} test) -> {}",
        manifest.records.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test),
        manifest.path().display()
    );
    Ok(0)
}

fn train_config(a: &TrainArgs, file: &FileConfig, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = file.train.clone().unwrap_or_default();
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.patience {
        cfg.early_stop_patience = v;
    }
    if let Some(v) = &a.loss {
        cfg.loss = v.parse::<CompositeSpec>()?;
    }
    if let Some(v) = &a.refine_loss {
        cfg.refine_loss = Some(v.parse::<CompositeSpec>()?);
    }
    if let Some(v) = a.refine_epochs {
        cfg.refine_epochs = Some(v);
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.checkpoint_dir = Some(a.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs, file: &FileConfig, seed: Option<u64>) -> Result<u8> {
    let cfg = train_config(&a, file, seed)?;
    let train_set = load_dataset(&a.data, Some(Split::Train))?.samples::<f32>()?;
    if train_set.is_empty() {
        return Err(Error::Manifest(format!("{} has no train records", a.data.display())));
    }
    let val = load_dataset(&a.data, Some(Split::Val))?;
    let val_set = if val.is_empty() { train_set.clone() } else { val.samples::<f32>()? };

    let mut model: ModelGraph<f32> = match &a.init {
        Some(path) => load_checkpoint(path)?,
        None => {
            let (kind, mcfg) = file.model.resolve(a.model.as_deref(), "toy")?;
            ModelGraph::build(kind, &mcfg, cfg.seed)?
        }
    };

    fs::create_dir_all(&a.out).map_err(|source| Error::Unwritable {
        path: a.out.clone(),
        source,
    })?;
    let history = a.out.join("history.jsonl");
    if history.exists() {
        fs::remove_file(&history).map_err(|source| Error::Unwritable {
            path: history.clone(),
            source,
        })?;
    }

    let outcomes: Vec<TrainOutcome<f32>> = if a.stagewise {
        train_stagewise(&mut model, &train_set, &val_set, &cfg)?
    } else {
        train_with_refinement(&mut model, &train_set, &val_set, &cfg)?
    };
    let mut diverged = false;
    for o in &outcomes {
        o.history.append_jsonl(&history)?;
        let last = o.history.epochs.last();
        println!(
            "{}: {} epochs, stop {}, final train loss {:.6}, val PSNR {:.2} dB, best val loss {:.6}",
            o.history.tag,
            o.history.epochs_run,
            o.history.stop_reason,
            last.map_or(f64::NAN, |e| e.train_loss),
            last.map_or(Psnr::Finite(f64::NAN), |e| e.val_psnr),
            o.best_loss.as_ref().map_or(f64::NAN, |b| b.val_loss),
        );
        diverged |= o.history.stop_reason == StopReason::Diverged;
    }
    save_checkpoint(&model, a.out.join("final.fdhz"))?;
    if diverged {
        eprintln!("error: training diverged (non-finite loss or gradient)");
        return Ok(1);
    }
    Ok(0)
}

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_images(p)?);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    Ok(files)
}

fn to_rgb(img: Image<f32>) -> Result<Image<f32>> {
    match img.channels() {
        3 => Ok(img),
        1 => Image::from_fn(img.height(), img.width(), 3, |y, x, _| img.get(y, x, 0)),
        c => Err(Error::InvalidImage(format!("expected 1 or 3 channels, got {c}"))),
    }
}

fn side_by_side(left: &Image<f32>, right: &Image<f32>) -> Result<Image<f32>> {
    let w = left.width();
    Image::from_fn(left.height(), 2 * w, 3, |y, x, c| if x < w { left.get(y, x, c) } else { right.get(y, x - w, c) })
}

fn dehaze_one(model: &mut ModelGraph<f32>, img: &Image<f32>) -> Result<Image<f32>> {
    let out = model.infer_padded(&images_to_tensor(std::slice::from_ref(img))?)?;
    let refined = out.refined.ok_or_else(|| Error::MissingTarget("refined".into()))?;
    Ok(tensor_to_images(&refined)?.remove(0))
}

fn dehaze(a: DehazeArgs) -> Result<u8> {
    let mut model: ModelGraph<f32> = load_checkpoint(&a.checkpoint)?;
    let files = collect_inputs(&a.inputs)?;
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|source| Error::Unwritable {
            path: out.clone(),
            source,
        })?;
    }
    for path in files {
        let hazy = to_rgb(load_image::<f32>(&path)?)?;
        let clean = dehaze_one(&mut model, &hazy)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dir = match &a.out {
            Some(d) => d.clone(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let single = dir.join(format!("{stem}_dehazed.png"));
        save_image(&clean, &single)?;
        save_image(&side_by_side(&hazy, &clean)?, dir.join(format!("{stem}_compare.png")))?;
        println!("{} -> {}", path.display(), single.display());
    }
    Ok(0)
}

/// Header and one row: model, PSNR (dB, 2 decimals), SSIM (4 decimals),
/// learnable parameters with thousands separators.
pub fn eval_row(model: &str, report: &QualityReport, params: Option<usize>) -> String {
    format!(
        "Model\tPSNR\tSSIM\tParameters\n{model}\t{:.2}\t{:.4}\t{}\n",
        report.psnr_mean,
        report.ssim_mean,
        params.map_or_else(|| "-".to_string(), thousands)
    )
}

fn eval(a: EvalArgs) -> Result<u8> {
    let ssim = SsimParams::default();
    let (report, label, params) = if let Some(dirs) = &a.pairs {
        let (preds, truths) = (list_images(&dirs[0])?, list_images(&dirs[1])?);
        if preds.len() != truths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} has {} images but {} has {}",
                dirs[0].display(),
                preds.len(),
                dirs[1].display(),
                truths.len()
            )));
        }
        let pairs = preds
            .iter()
            .zip(&truths)
            .map(|(p, t)| Ok((load_image::<f32>(p)?, load_image::<f32>(t)?)))
            .collect::<Result<Vec<_>>>()?;
        (evaluate_pairs(&pairs, &ssim)?, "-".to_string(), None)
    } else {
        let ckpt = a.checkpoint.as_ref().expect("clap enforces --checkpoint");
        let data = a.data.as_ref().expect("clap enforces --data");
        let split: Split = a.split.parse()?;
        let mut model: ModelGraph<f32> = load_checkpoint(ckpt)?;
        let set = load_dataset(data, Some(split))?;
        if set.is_empty() {
            return Err(Error::Manifest(format!("{} has no {split} records", data.display())));
        }
        let mut pairs = Vec::with_capacity(set.len());
        for rec in set.iter::<f32>() {
            let rec = rec?;
            pairs.push((dehaze_one(&mut model, &rec.hazy)?, rec.clean));
        }
        (evaluate_pairs(&pairs, &ssim)?, InferenceTarget::label(&model), Some(model.param_count()))
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?);
    } else {
        print!("{}", eval_row(&label, &report, params));
    }
    Ok(0)
}

fn bench(a: BenchArgs, file: &FileConfig, seed: Option<u64>) -> Result<u8> {
    let mut spec: BenchSpec = file.bench.clone().unwrap_or_default();
    if let Some(v) = a.resolutions {
        spec.resolutions = v;
    }
    if let Some(v) = a.batches {
        spec.batch_sizes = v;
    }
    if let Some(v) = a.runs {
        spec.runs = v;
    }
    if let Some(v) = a.warmup {
        spec.warmup = v;
    }
    if let Some(v) = a.budget_mb {
        spec.memory_budget_bytes = Some(v << 20);
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let mut model: ModelGraph<f32> = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let (kind, cfg) = file.model.resolve(a.model.as_deref(), "toy")?;
            ModelGraph::build(kind, &cfg, spec.seed)?
        }
    };
    let report = run_bench(&mut model, &spec)?;
    print!("{}", report.to_table());
    if let Some(path) = &a.json {
        fs::write(path, report.to_json()).map_err(|source| Error::Unwritable {
            path: path.clone(),
            source,
        })?;
    }
    Ok(0)
}

fn reference_line(label: &str, total: usize, reference: usize) -> String {
    let delta = total as i64 - reference as i64;
    let pct = 100.0 * delta as f64 / reference as f64;
    format!("{label} {} (delta {delta:+}, {pct:+.2}%)", thousands(reference))
}

fn params(a: ParamsArgs, file: &FileConfig) -> Result<u8> {
    let preset = a.model.as_deref().or(file.model.preset.as_deref()).unwrap_or("small");
    let (kind, cfg) = file.model.resolve(Some(preset), "small")?;
    let model = ModelGraph::<f32>::build(kind, &cfg, 0)?;
    let groups = model.param_groups();
    let width = groups.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(5);
    for (name, n) in &groups {
        println!("{name:<width$}  {:>12}", thousands(*n));
    }
    let total = model.param_count();
    println!("{:<width$}  {:>12}", "total", thousands(total));
    let refine: usize = groups.iter().filter(|(k, _)| k.starts_with("refine")).map(|(_, n)| n).sum();
    println!("{}", reference_line(&format!("{:<width$}  {:>12}  budget", "refinement", thousands(refine)), refine, REFERENCE_REFINEMENT_BUDGET));
    let reference = match (preset, kind) {
        ("small", ModelKind::Fast) => Some(REFERENCE_SMALL),
        ("big", ModelKind::Fast) => Some(REFERENCE_BIG),
        ("dual", ModelKind::Dual) => Some(REFERENCE_DUAL),
        _ => None,
    };
    if let Some(r) = reference {
        println!("{}", reference_line("reference", total, r));
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs, seed: Option<u64>) -> Result<u8> {
    if !matches!(a.model.as_str(), "toy" | "toy-dual") {
        return Err(Error::InvalidArgument(format!("gradcheck supports toy and toy-dual, got {:?}", a.model)));
    }
    if a.size == 0 || a.size % 32 != 0 {
        return Err(Error::InvalidArgument(format!("--size must be a positive multiple of 32, got {}", a.size)));
    }
    let seed = seed.unwrap_or(0);
    let (kind, mut cfg) = dehaze_core::models::FastNetConfig::preset(&a.model)?;
    cfg.feature_channels = a.features;
    cfg.validate()?;
    let mut model = ModelGraph::<f64>::build(kind, &cfg, seed)?;
    model.randomize_affine(seed.wrapping_add(1));
    // Random input in (0.05, 0.95) keeps pooling and ReLU away from ties.
    let x = random_weights::<f64>([1, 3, a.size, a.size], seed ^ 0x5eed).map(|v| 0.5 + 0.45 * v);
    let opts = GradCheckOptions::sampled(1e-6, a.tol, a.samples, seed);
    let report = check_graph(&mut model, &x, Mode::Eval, &opts)?;
    println!("{report}");
    Ok(if report.passed { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dehaze_core::metrics::PairQuality;

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(1000), "1,000");
        assert_eq!(thousands(11_554_167), "11,554,167");
    }

    #[test]
    fn eval_row_schema() {
        let report = QualityReport::from_pairs(vec![PairQuality {
            index: 0,
            psnr_db: Psnr::Finite(21.234),
            ssim: 0.87654,
        }])
        .unwrap();
        assert_eq!(
            eval_row("fastnet(basic, w8, f32)", &report, Some(107_539)),
            "Model\tPSNR\tSSIM\tParameters\nfastnet(basic, w8, f32)\t21.23\t0.8765\t107,539\n"
        );
        let same = QualityReport::from_pairs(vec![PairQuality {
            index: 0,
            psnr_db: Psnr::Infinite,
            ssim: 1.0,
        }])
        .unwrap();
        assert_eq!(eval_row("-", &same, None), "Model\tPSNR\tSSIM\tParameters\n-\tinf\t1.0000\t-\n");
    }
}
