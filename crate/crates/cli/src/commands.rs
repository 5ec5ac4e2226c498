use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use s2d::checkpoint::Checkpoint;
use s2d::dataset::{InMemoryDataset, Manifest, Split, MANIFEST_FILE};
use s2d::geometry::{back_project, landmarks_to_sparse, parse_landmarks, trusted_region_mask, CameraIntrinsics};
use s2d::gradcheck;
use s2d::image::{DepthMap, Frame};
use s2d::pnm;
use s2d::sampling::{make_input, scanline_sample, Problem};
use s2d::synth::{compute_normalization, generate_scene};
use s2d::trainer::{self, evaluate, log_csv, Architecture, EvalSettings, Predictor, SampleCount, TrainConfig, Trainer};
use s2d::{compute_metrics, MetricsReport};

use crate::args::{ArchitectureArg, EvalArgs, GradcheckArgs, PredictArgs, SplitArg, SweepArgs, SynthArgs, TrainArgs, TrainingFlags};
use crate::{usage, Failure, Outcome};

fn require_file(path: &Path, flag: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        usage(format!("{flag}: no such file '{}'", path.display()))
    }
}

fn load_manifest(root: &Path, flag: &str) -> Result<Manifest, Failure> {
    if !root.join(MANIFEST_FILE).is_file() {
        return usage(format!("{flag}: '{}' has no {MANIFEST_FILE}", root.display()));
    }
    let m = Manifest::load(root)?;
    if m.ids.is_empty() {
        return usage(format!("{flag}: '{}' lists no frames", root.display()));
    }
    Ok(m)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    require_file(path, "--checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

fn read_text(path: &Path, flag: &str) -> Result<String, Failure> {
    require_file(path, flag)?;
    fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{flag}: {e}")))
}

fn smallest_frame(frames: &[Frame]) -> (usize, usize) {
    frames.iter().fold((usize::MAX, usize::MAX), |(h, w), f| (h.min(f.height()), w.min(f.width())))
}

/// Preset plus flag overrides. The input size defaults to the preset's,
/// shrunk to fit the smallest frame.
fn build_config(flags: &TrainingFlags, problem: Problem, samples: SampleCount, smallest: (usize, usize)) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::preset(flags.preset, problem, samples);
    let (ph, pw) = cfg.crop();
    let size = match flags.size {
        Some(s) => (s.height, s.width),
        None => (ph.min(smallest.0), pw.min(smallest.1)),
    };
    if size.0 > smallest.0 || size.1 > smallest.1 {
        return usage(format!(
            "--size {}x{} exceeds the smallest frame, {}x{}",
            size.0, size.1, smallest.0, smallest.1
        ));
    }
    cfg = cfg.with_size(size.0, size.1);
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = flags.lr {
        cfg.lr0 = lr;
    }
    if let Some(l) = flags.loss {
        cfg.loss = l;
    }
    if let Some(f) = flags.first_layer {
        cfg.model.first_layer = f;
    }
    if let Some(d) = flags.decoder {
        cfg.model.decoder_kind = d;
    }
    if let Some(w) = &flags.widths {
        cfg.model.encoder_widths = w.clone();
    }
    if let Some(s) = flags.decoder_stages {
        cfg.model.decoder_stages = s;
    }
    cfg.augment = !flags.no_augment;
    Ok(cfg)
}

pub fn synth(a: SynthArgs) -> Outcome {
    if a.count == 0 {
        return usage("--count must be positive");
    }
    if a.size.height < 16 || a.size.width < 16 {
        return usage("--size must be at least 16x16");
    }
    let frames: Vec<Frame> = (0..a.count as u64)
        .into_par_iter()
        .map(|i| generate_scene(s2d::seed::derive_seed(a.seed, &[i]), a.size.height, a.size.width, a.objects))
        .collect::<s2d::Result<_>>()?;
    let normalization = match &a.normalization_from {
        Some(root) => load_manifest(root, "--normalization-from")?.normalization,
        None => compute_normalization(&frames)?,
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ids = frames.iter().map(|f| f.id.clone()).collect();
    let manifest = Manifest::new(&a.out, split, normalization, ids);
    frames.par_iter().try_for_each(|f| manifest.write_frame(f))?;
    manifest.save()?;
    eprintln!("wrote {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Outcome {
    let manifest = load_manifest(&a.data, "--data")?;
    let data = manifest.load_all()?;
    let samples = a.samples.unwrap_or(match a.problem {
        Problem::Rgb => SampleCount::Fixed(0),
        _ => SampleCount::Fixed(100),
    });
    let mut cfg = build_config(&a.training, a.problem, samples, smallest_frame(data.frames()))?;
    cfg.seed = a.seed;
    cfg.normalization = manifest.normalization;
    if a.architecture == ArchitectureArg::SparseEcho {
        cfg.architecture = Architecture::SparseEcho;
    }
    if let Err(e) = cfg.validate() {
        return usage(format!("inconsistent training flags: {e}"));
    }
    fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("--out: {e}")))?;
    let ckpt_path = a.out.join("model.ckpt");
    let log_path = a.out.join("log.csv");
    if cfg.architecture == Architecture::SparseEcho {
        Checkpoint::bare(cfg).save(&ckpt_path)?;
        fs::write(&log_path, log_csv(&[])).map_err(|e| Failure::Runtime(e.to_string()))?;
        return Ok(());
    }
    let mut t = Trainer::new(cfg)?;
    let start = Instant::now();
    t.run(&data, |trainer, log| {
        trainer.checkpoint().save(&ckpt_path)?;
        fs::write(&log_path, log_csv(trainer.history()))?;
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  {}  [{:.1}s]",
            log.epoch,
            log.lr,
            log.train_loss,
            log.metrics,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> Outcome {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let manifest = load_manifest(&a.data, "--data")?;
    let predictor = Predictor::from_checkpoint(&ckpt)?;
    let mut settings = EvalSettings::from(&ckpt.config);
    if let Some(s) = a.samples {
        if !settings.problem.uses_depth() {
            return usage("--samples cannot be used with a model trained on problem RGB");
        }
        settings.samples = s;
    }
    let report = evaluate(&predictor, &settings, &manifest, a.seed)?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn same_size(what: &str, got: (usize, usize), want: (usize, usize)) -> Outcome {
    if got == want {
        Ok(())
    } else {
        usage(format!(
            "{what} is {}x{} but --rgb is {}x{}",
            got.0, got.1, want.0, want.1
        ))
    }
}

pub fn predict(a: PredictArgs) -> Outcome {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = &ckpt.config;
    let problem = cfg.problem;
    require_file(&a.rgb, "--rgb")?;
    for (flag, path) in [("--sparse", &a.sparse), ("--depth", &a.depth)] {
        if let Some(p) = path {
            require_file(p, flag)?;
        }
    }
    if !(a.depth_scale.is_finite() && a.depth_scale > 0.0) {
        return usage("--depth-scale must be positive");
    }
    let max_encodable = f64::from(u16::MAX) / a.depth_scale;
    if max_encodable < cfg.depth_min {
        return usage(format!("--depth-scale {} cannot encode depths of {} m", a.depth_scale, cfg.depth_min));
    }

    let sources: Vec<&str> = [
        ("--sparse", a.sparse.is_some()),
        ("--landmarks", a.landmarks.is_some()),
        ("--scanline-stride", a.scanline_stride.is_some()),
    ]
    .iter()
    .filter(|s| s.1)
    .map(|s| s.0)
    .collect();
    if problem.uses_depth() {
        match sources.as_slice() {
            [] => {
                return usage(format!(
                    "problem {problem} needs one of --sparse, --landmarks or --scanline-stride"
                ))
            }
            [_] => {}
            [a, b, ..] => return usage(format!("{a} and {b} are mutually exclusive")),
        }
    } else {
        if let Some(flag) = sources.first() {
            return usage(format!("{flag} cannot be used with a model trained on problem RGB"));
        }
        if a.trusted_region {
            return usage("--trusted-region needs sparse samples, which a problem RGB model does not take");
        }
    }
    if a.landmarks.is_some() && a.intrinsics.is_none() {
        return usage("--landmarks needs --intrinsics");
    }
    if a.ply.is_some() && a.intrinsics.is_none() {
        return usage("--ply needs --intrinsics");
    }
    if let Some(s) = a.scanline_stride {
        if a.depth.is_none() {
            return usage("--scanline-stride needs --depth");
        }
        if s < 2 {
            return usage("--scanline-stride must be at least 2");
        }
    }

    let rgb = pnm::read_ppm(&a.rgb)?;
    let size = (rgb.height(), rgb.width());
    let predictor = Predictor::from_checkpoint(&ckpt)?;
    if let Some(want) = predictor.input_size() {
        if want != size {
            return usage(format!(
                "--rgb is {}x{} but the model expects {}x{}",
                size.0, size.1, want.0, want.1
            ));
        }
    }
    let k = match &a.intrinsics {
        Some(p) => {
            let k = CameraIntrinsics::parse(&read_text(p, "--intrinsics")?)?;
            same_size("--intrinsics", (k.height(), k.width()), size)?;
            Some(k)
        }
        None => None,
    };
    let gt = match &a.depth {
        Some(p) => {
            let d = pnm::read_depth_pgm(p, a.depth_scale)?;
            same_size("--depth", (d.height(), d.width()), size)?;
            Some(d)
        }
        None => None,
    };

    let sparse = if let Some(p) = &a.sparse {
        let s = pnm::read_depth_pgm(p, a.depth_scale)?;
        same_size("--sparse", (s.height(), s.width()), size)?;
        Some(s)
    } else if let Some(p) = &a.landmarks {
        let points = parse_landmarks(&read_text(p, "--landmarks")?)?;
        let proj = landmarks_to_sparse(&points, k.as_ref().expect("checked above"))?;
        eprintln!(
            "{} landmarks: {} placed, {} out of frame, {} behind the camera",
            points.len(),
            proj.sparse.valid_count(),
            proj.out_of_frame,
            proj.behind_camera
        );
        Some(proj.sparse)
    } else if let Some(stride) = a.scanline_stride {
        Some(scanline_sample(gt.as_ref().expect("checked above"), stride, 0)?)
    } else {
        None
    };

    let input = make_input(Some(&cfg.normalization.apply(&rgb)), sparse.as_ref(), problem)?;
    let out = predictor.predict(&input)?;
    let mut pred = DepthMap::from_tensor(&out, 0, 0);
    let hi = cfg.depth_max.min(max_encodable);
    for v in pred.as_mut_slice() {
        *v = v.clamp(cfg.depth_min, hi);
    }
    let mask = if a.trusted_region {
        trusted_region_mask(sparse.as_ref().expect("depth problems have samples"))?
    } else {
        vec![true; size.0 * size.1]
    };
    for (v, &keep) in pred.as_mut_slice().iter_mut().zip(&mask) {
        if !keep {
            *v = 0.0;
        }
    }
    pnm::write_depth_pgm(&a.out, &pred, a.depth_scale)?;
    if let Some(k) = &k {
        let ply = a.ply.clone().unwrap_or_else(|| a.out.with_extension("ply"));
        back_project(&pred, k, &mask, Some(&rgb))?.save_ply(&ply)?;
    }
    if let Some(gt) = &gt {
        let scored: Vec<bool> = gt.valid_mask().iter().zip(&mask).map(|(a, b)| *a && *b).collect();
        let report = compute_metrics(pred.as_slice(), gt.as_slice(), &scored)?;
        println!("{}", MetricsReport::CSV_HEADER);
        println!("{}", report.csv_row());
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Outcome {
    if a.problems.is_empty() || a.sample_counts.is_empty() || a.seeds.is_empty() {
        return usage("--problems, --sample-counts and --seeds each need at least one value");
    }
    if a.sample_counts.contains(&0) {
        return usage("--sample-counts must be positive");
    }
    let train_manifest = load_manifest(&a.data, "--data")?;
    let all = train_manifest.load_all()?;
    let (train_set, test_set): (InMemoryDataset, InMemoryDataset) = match &a.test_data {
        Some(root) => {
            if a.test_count.is_some() {
                return usage("--test-count and --test-data are mutually exclusive");
            }
            (all, load_manifest(root, "--test-data")?.load_all()?)
        }
        None => {
            let n = a.test_count.unwrap_or(all.frames().len() / 4);
            if n == 0 || n >= all.frames().len() {
                return usage(format!(
                    "--test-count {n} must leave at least one training and one test frame out of {}",
                    all.frames().len()
                ));
            }
            all.split_tail(n)
        }
    };
    let smallest = {
        let (a, b) = (smallest_frame(train_set.frames()), smallest_frame(test_set.frames()));
        (a.0.min(b.0), a.1.min(b.1))
    };
    let mut template = build_config(&a.training, Problem::Rgbd, SampleCount::Fixed(a.sample_counts[0]), smallest)?;
    template.normalization = train_manifest.normalization;
    if let Err(e) = template.validate() {
        return usage(format!("inconsistent training flags: {e}"));
    }
    let rows = trainer::sweep(&template, &a.problems, &a.sample_counts, &a.seeds, &train_set, &test_set, |line| {
        eprintln!("{line}")
    })?;
    fs::write(&a.out, trainer::sweep_csv(&rows)).map_err(|e| Failure::Runtime(format!("--out: {e}")))?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Outcome {
    if !(a.eps.is_finite() && a.eps > 0.0) {
        return usage("--eps must be positive");
    }
    let start = Instant::now();
    let results = gradcheck::run_suite(a.seed, a.eps)?;
    println!("case,max_rel_err,tolerance,checked,skipped,status");
    for r in &results {
        println!(
            "{},{:e},{:e},{},{},{}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.checked,
            r.skipped,
            if r.passed() { "pass" } else { "fail" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    eprintln!("{} cases in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}
