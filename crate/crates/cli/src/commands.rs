use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::Serialize;

use fsdetr_core::evaltool::{evaluate, score_detections, EvalReport};
use fsdetr_core::image::Image;
use fsdetr_core::params::Session;
use fsdetr_core::prompts::{assign_pseudo_classes, TemplateImage};
use fsdetr_core::rng::{component_rng, DetRng};
use fsdetr_core::synthworld::{
    generate_world, load_manifest, load_world, save_world, ClassSplit, World, MANIFEST_FILE, PALETTE, SPLITS,
};
use fsdetr_core::trainpipe::{fit, Checkpoint, FitOutput, MetricsRecord, Trainer};

use crate::config::{apply_override, RunConfig};
use crate::error::CliError;

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let root = &cfg.data_dir;
    let occupied = fs::read_dir(root).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(CliError::Config(format!(
                "{} is not empty; pass --force to regenerate",
                root.display()
            )));
        }
        // Only remove what this command writes.
        for split in SPLITS {
            let p = root.join(split);
            if p.exists() {
                fs::remove_dir_all(&p).map_err(|e| io(&p, e))?;
            }
        }
        let m = root.join(MANIFEST_FILE);
        if m.exists() {
            fs::remove_file(&m).map_err(|e| io(&m, e))?;
        }
    }
    let world = generate_world(&cfg.world_config())?;
    save_world(root, &world, cfg.seed())?;
    eprintln!(
        "wrote {} train / {} val / {} test scenes to {} ({} base, {} novel classes)",
        world.train.len(),
        world.val.len(),
        world.test.len(),
        root.display(),
        world.classes.base.len(),
        world.classes.novel.len()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<World, CliError> {
    let world = load_world(&cfg.data_dir)?;
    if world.classes != cfg.world.classes {
        eprintln!(
            "note: using the class split recorded in {} (novel {:?})",
            cfg.data_dir.display(),
            world.classes.novel
        );
    }
    Ok(world)
}

fn log_record(r: &MetricsRecord) {
    eprintln!(
        "{:<20} epoch {:>3} step {:>6} loss {:.4} (ce {:.4} l1 {:.4} giou {:.4}) lr {:.4} {:.0}s",
        r.phase, r.epoch, r.step, r.loss, r.ce, r.l1, r.giou, r.lr, r.wall_s
    );
}

fn out_for(cfg: &RunConfig) -> FitOutput {
    FitOutput {
        pretrain_log_every: 100,
        ..FitOutput::in_dir(&cfg.out_dir)
    }
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let world = load_data(cfg)?;
    let mut train = cfg.train.clone();
    train.epochs = 0;
    train.lr_decay_epoch = 0;
    let mut trainer = Trainer::new(&cfg.model, &train, &world.classes)?;
    fit(&mut trainer, &world.train, &out_for(cfg), log_record)?;
    eprintln!("checkpoint: {}", cfg.out_dir.join("last.fsdt").display());
    Ok(())
}

pub fn train(cfg: &RunConfig, init: Option<&Path>, resume: Option<&Path>, epochs: Option<usize>) -> Result<(), CliError> {
    let world = load_data(cfg)?;
    let mut trainer = match (init, resume) {
        (_, Some(p)) => {
            let ck = Checkpoint::load(p)?;
            let mut t = Trainer::from_checkpoint(&ck)?;
            if let Some(e) = epochs {
                t.cfg.epochs = e;
                if t.cfg.lr_decay_epoch >= e {
                    t.cfg.lr_decay_epoch = e * 7 / 10;
                }
                t.cfg.validate()?;
            }
            eprintln!("resuming at epoch {} (step {})", t.epoch(), t.rng.step);
            t
        }
        (Some(p), None) => {
            let ck = Checkpoint::load(p)?;
            if ck.model != cfg.model {
                return Err(CliError::Config(format!(
                    "{} was built with a different model config",
                    p.display()
                )));
            }
            let mut t = Trainer::new(&cfg.model, &cfg.train, &world.classes)?;
            t.load_params(&ck)?;
            // Pre-training already done by the source run is not repeated.
            t.rng.pretrain_step = ck.rng.pretrain_step;
            t
        }
        (None, None) => Trainer::new(&cfg.model, &cfg.train, &world.classes)?,
    };
    if trainer.classes != world.classes {
        return Err(CliError::Contamination(format!(
            "run was started with novel classes {:?} but {} holds out {:?}",
            trainer.classes.novel,
            cfg.data_dir.display(),
            world.classes.novel
        )));
    }
    fit(&mut trainer, &world.train, &out_for(cfg), log_record)?;
    eprintln!("checkpoint: {}", cfg.out_dir.join("last.fsdt").display());
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    shots: Option<Vec<usize>>,
    split: &str,
    report: Option<&Path>,
    requested: &[(String, String)],
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    // Ablation flags describe the checkpoint; they must agree with it.
    let mut wanted = serde_json::json!({ "model": ck.model });
    for (k, v) in requested {
        apply_override(&mut wanted, k, v)?;
    }
    if wanted["model"] != serde_json::json!(ck.model) {
        return Err(CliError::Config(format!(
            "{} was trained as a different variant than the flags request",
            checkpoint.display()
        )));
    }
    let manifest = load_manifest(&cfg.data_dir)?;
    let data_split = ClassSplit {
        base: manifest.base,
        novel: manifest.novel,
    };
    if data_split != ck.classes {
        return Err(CliError::Contamination(format!(
            "checkpoint holds out {:?} but {} holds out {:?}",
            ck.classes.novel,
            cfg.data_dir.display(),
            data_split.novel
        )));
    }
    let world = load_world(&cfg.data_dir)?;
    let data = world
        .split(split)
        .ok_or_else(|| CliError::Config(format!("unknown split {split:?}; expected one of {SPLITS:?}")))?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let shots = shots.unwrap_or_else(|| vec![cfg.eval.k]);
    let mut reports: Vec<EvalReport> = Vec::new();
    eprintln!("{:>5} {:>8} {:>8} {:>8} {:>8}", "shots", "novel50", "novel75", "base50", "all50");
    for k in shots {
        let mut e = cfg.eval.clone();
        e.k = k;
        let r = evaluate(&trainer.model, &trainer.store, &ck.classes, data, &world.classes, &e)?;
        eprintln!(
            "{:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            k, r.novel.ap50, r.novel.ap75, r.base.ap50, r.all.ap50
        );
        reports.push(r);
    }
    let json = serde_json::to_string_pretty(&reports).expect("report serializes");
    if let Some(p) = report {
        fs::write(p, &json).map_err(|e| io(p, e))?;
    }
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct DetectionOut {
    /// Index of the template that defines the class.
    class: usize,
    score: f64,
    /// Normalized `[cx, cy, w, h]`.
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn read_ppm(path: &Path) -> Result<Image, CliError> {
    let img = Image::load_pnm(path).map_err(|e| io(path, e))?;
    if img.channels != 3 {
        return Err(io(path, "expected a colour PPM"));
    }
    Ok(img)
}

pub fn detect(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    templates: &[std::path::PathBuf],
    threshold: f64,
    attn: bool,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ck)?;
    let model = &trainer.model;
    let target = read_ppm(image)?;
    let size = model.cfg.template_size;
    let mut t = Vec::with_capacity(templates.len());
    for p in templates {
        let img = read_ppm(p)?;
        t.push(TemplateImage {
            pixels: img.crop_resize(0.0, 0.0, img.width as f64, img.height as f64, size),
            source_class: None,
        });
    }
    let m = t.len();
    let mut rng = component_rng(cfg.seed(), "detect");
    let assignment = assign_pseudo_classes(m, model.cfg.bank_size, &mut rng)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let rows: Vec<usize> = (0..m).collect();
    let mut s = Session::new(&trainer.store, false, DetRng::from_rng(&mut rng));
    let dets = model
        .detect(&mut s, &target, &t, &rows, &assignment)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let kept = score_detections(&dets, threshold);

    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut annotated = target.clone();
    let (w, h) = (target.width as f64, target.height as f64);
    for d in &kept {
        let c = d.bbox.to_xyxy();
        annotated.draw_rect(c.x1 * w, c.y1 * h, c.x2 * w, c.y2 * h, &PALETTE[d.class % PALETTE.len()]);
    }
    let p = out.join("annotated.ppm");
    annotated.save_pnm(&p).map_err(|e| io(&p, e))?;
    let records: Vec<DetectionOut> = kept
        .iter()
        .map(|d| DetectionOut {
            class: d.class,
            score: d.score,
            bbox: d.bbox.to_array(),
        })
        .collect();
    let p = out.join("detections.json");
    fs::write(&p, serde_json::to_string_pretty(&records).expect("detections serialize")).map_err(|e| io(&p, e))?;
    if attn {
        let maps = dets
            .attn_maps
            .ok_or_else(|| CliError::Config("attention maps need the encoder cross-attention (use_encoder_mhca)".into()))?;
        for (i, map) in maps.iter().enumerate() {
            let (gh, gw) = (map.shape()[0], map.shape()[1]);
            let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let mut g = Image::new(1, gh, gw);
            for y in 0..gh {
                for x in 0..gw {
                    g.set(0, y, x, ((map.data()[y * gw + x] - lo) / span) as f32);
                }
            }
            let p = out.join(format!("attn_{i:02}.pgm"));
            g.save_pnm(&p).map_err(|e| io(&p, e))?;
        }
    }
    eprintln!("{} detections written to {}", records.len(), out.display());
    Ok(())
}
