use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ccdet::dataset::io::load_gray_png;
use ccdet::dataset::{generate_synthetic, load_corpus, save_corpus, AnnotatedImage, CorpusSummary, SplitPlan, CLASS_APD, CLASS_HC};
use ccdet::detector::DetectorWeights;
use ccdet::eigencam::{average_cam, cam_stats, multilayer_cam};
use ccdet::evalmetrics::{evaluate, mean_metrics, predict, MeanMetrics};
use ccdet::render::{save_heatmap_png, save_overlay_png, write_text};
use ccdet::train::holdout_with;
use ccdet::weightfile;
use serde::Serialize;

use crate::output::{resolve_config, run_dir, write_json, write_report};
use crate::{CamArgs, EvalArgs, SynthArgs, TrainArgs};

pub fn synth(a: SynthArgs) -> Result<()> {
    let corpus = generate_synthetic(a.subjects, a.slices, a.size, a.seed)?;
    save_corpus(&a.out, &corpus).with_context(|| format!("cannot write corpus to {}", a.out.display()))?;
    let s = CorpusSummary::of(&corpus);
    println!(
        "wrote {} images of {} subjects ({} HC, {} APD) to {}",
        s.images,
        s.subjects,
        s.subjects_per_class.get(&CLASS_HC).unwrap_or(&0),
        s.subjects_per_class.get(&CLASS_APD).unwrap_or(&0),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RoundSummary {
    round: usize,
    train_subjects: usize,
    test_subjects: usize,
    test_images: usize,
    accuracy: f64,
    auc: Option<f64>,
    iou_fraction_at_least_half: f64,
    train_seconds: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    rounds: Vec<RoundSummary>,
    mean: MeanMetrics,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg, None)?;
    if let Some(n) = a.epochs {
        cfg = cfg.with_override("train.epochs", &n.to_string())?;
    }
    if a.rounds == 0 {
        bail!("--rounds must be at least 1");
    }
    let corpus = load_corpus(&a.data)?;
    let dir = run_dir(&a.out, &cfg)?;
    eprintln!("run directory {}", dir.display());
    let results = holdout_with(&corpus, a.rounds, &cfg.detector, &cfg.train, &cfg.eval, &|round, e| {
        eprintln!("round {round} epoch {:>3} box {:.4} obj {:.4} cls {:.4} ({:.1}s)", e.epoch, e.box_loss, e.obj_loss, e.cls_loss, e.seconds);
    })?;

    let mut rounds = Vec::new();
    for r in &results {
        let rd = dir.join(format!("round{}", r.plan.round_id));
        fs::create_dir_all(&rd).with_context(|| format!("cannot create {}", rd.display()))?;
        weightfile::save(&rd.join("weights.ccyd"), &r.weights)?;
        write_text(&rd.join("train_log.csv"), &r.log.to_csv())?;
        write_json(&rd.join("split.json"), &r.plan)?;
        if let Some(e) = write_report(&rd, &r.report)? {
            eprintln!("round {}: ROC not computed: {e}", r.plan.round_id);
        }
        rounds.push(RoundSummary {
            round: r.plan.round_id,
            train_subjects: r.plan.train_subjects.len(),
            test_subjects: r.plan.test_subjects.len(),
            test_images: r.report.n_images,
            accuracy: r.report.accuracy(),
            auc: r.report.auc,
            iou_fraction_at_least_half: r.report.iou.fraction_at_least_half,
            train_seconds: r.log.epochs.iter().map(|e| e.seconds).sum(),
        });
    }
    let reports: Vec<_> = results.iter().map(|r| &r.report).collect();
    let summary = TrainSummary { rounds, mean: mean_metrics(&reports) };
    write_json(&dir.join("summary.json"), &summary)?;
    for r in &summary.rounds {
        println!("round {}: accuracy {:.4}, AUC {}, IoU>=0.5 {:.4}", r.round, r.accuracy, fmt_opt(r.auc), r.iou_fraction_at_least_half);
    }
    println!("mean accuracy {:.4}, mean AUC {}", summary.mean.accuracy, fmt_opt(summary.mean.auc));
    println!("{}", dir.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn load_model(path: &Path, cfg: &ccdet::config::RunConfig) -> Result<DetectorWeights> {
    weightfile::load(path, &cfg.detector).with_context(|| format!("cannot load model {}", path.display()))
}

fn load_split(path: &Path) -> Result<SplitPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read split {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a split plan", path.display()))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, Some(&a.model))?;
    let weights = load_model(&a.model, &cfg)?;
    let corpus = load_corpus(&a.data)?;
    let indices: Vec<usize> = match &a.split {
        Some(p) => load_split(p)?.test_indices(&corpus),
        None => (0..corpus.len()).collect(),
    };
    if indices.is_empty() {
        bail!("no images to evaluate in {}", a.data.display());
    }
    let report = evaluate(&weights, &corpus, &indices, &cfg.eval, cfg.train.exec)?;
    let dir = run_dir(&a.out, &cfg)?;
    if let Some(e) = write_report(&dir, &report)? {
        eprintln!("ROC not computed: {e}");
    }
    let s = &report.scores;
    println!(
        "{} images: accuracy {:.4}, AUC {}, abstained {}",
        report.n_images,
        s.accuracy,
        fmt_opt(report.auc),
        report.confusion.abstained.iter().sum::<usize>()
    );
    println!("{}", dir.display());
    Ok(())
}

fn parse_class(s: &str) -> Result<usize> {
    match s.to_ascii_lowercase().as_str() {
        "hc" | "0" => Ok(CLASS_HC),
        "apd" | "1" => Ok(CLASS_APD),
        _ => bail!("unknown class `{s}` (expected hc, apd, 0 or 1)"),
    }
}

pub fn cam(a: CamArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, Some(&a.model))?;
    let weights = load_model(&a.model, &cfg)?;
    let layers = if a.layers.is_empty() { cfg.cam_layers.clone() } else { a.layers.clone() };
    if a.image.is_dir() {
        return cam_batch(&a, &cfg, &weights, &layers);
    }
    let image = load_gray_png(&a.image)?;
    let size = cfg.detector.input_size;
    if (image.width, image.height) != (size, size) {
        bail!("{} is {}x{}, the model expects {size}x{size}", a.image.display(), image.width, image.height);
    }
    let (heat, verdict) = multilayer_cam(&weights, &image, &layers, &cfg.eval)?;
    let stats = cam_stats(&heat, None, verdict.is_abstain())?;
    let dir = run_dir(&a.out, &cfg)?;
    save_heatmap_png(&dir.join("heatmap.png"), &heat)?;
    save_overlay_png(&dir.join("overlay.png"), &image, &heat)?;
    write_json(&dir.join("heatmap.json"), &heat)?;
    write_json(&dir.join("cam_stats.json"), &serde_json::json!({ "verdict": verdict, "stats": stats }))?;
    match verdict.predicted_class {
        Some(c) => println!("class {c} (confidence {:.3}), brightest pixel at {:?}", verdict.confidence, stats.argmax),
        None => println!("no detection; heatmap covers the full image, brightest pixel at {:?}", stats.argmax),
    }
    println!("{}", dir.display());
    Ok(())
}

fn cam_batch(a: &CamArgs, cfg: &ccdet::config::RunConfig, weights: &DetectorWeights, layers: &[String]) -> Result<()> {
    let corpus = load_corpus(&a.image)?;
    let mut chosen: Vec<&AnnotatedImage> = match &a.split {
        Some(p) => {
            let plan = load_split(p)?;
            plan.test_indices(&corpus).into_iter().map(|i| &corpus[i]).collect()
        }
        None => corpus.iter().collect(),
    };
    if let Some(c) = &a.class {
        let c = parse_class(c)?;
        chosen.retain(|s| s.class_id() == c);
    }
    if a.correct_only {
        let verdicts = predict(weights, &chosen, &cfg.eval, cfg.train.exec)?;
        chosen = chosen.into_iter().zip(verdicts).filter(|(s, v)| v.predicted_class == Some(s.class_id())).map(|(s, _)| s).collect();
    }
    if chosen.is_empty() {
        bail!("no images selected from {}", a.image.display());
    }
    let (avg, stats) = average_cam(weights, &chosen, layers, &cfg.eval, cfg.train.exec)?;
    let dir = run_dir(&a.out, cfg)?;
    let overlays = dir.join("overlays");
    fs::create_dir_all(&overlays).with_context(|| format!("cannot create {}", overlays.display()))?;
    for s in &chosen {
        let (heat, _) = multilayer_cam(weights, &s.image, layers, &cfg.eval)?;
        save_overlay_png(&overlays.join(format!("{}_{:02}.png", s.subject_id, s.slice_index)), &s.image, &heat)?;
    }
    save_heatmap_png(&dir.join("average.png"), &avg)?;
    write_json(&dir.join("average.json"), &avg)?;
    write_json(&dir.join("cam_stats.json"), &stats)?;
    println!("{} images, {} abstained", stats.images, stats.abstained);
    if let Some(r) = stats.brightest_in_region_rate {
        println!("brightest pixel in mid-body region: {r:.3}");
    }
    println!("{}", dir.display());
    Ok(())
}
