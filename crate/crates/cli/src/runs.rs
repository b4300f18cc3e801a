//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qgn_core::mask::{gen_synthetic, hflip, pad_to_multiple, read_mask, write_mask, Mask};
use qgn_core::model::{
    assemble, mask_to_image, read_checkpoint, write_checkpoint, ActivationReport,
    PropagationScheme, QgnModel,
};
use qgn_core::pyramid::{
    build_t_pyramid, quadtree_decode, quadtree_encode, ratio_from_percentages, read_quadtree,
    sparsity_stats, write_quadtree, TPyramid,
};
use qgn_core::train::{
    metrics, train_step, update_class_weights, ClassWeights, ConfusionMatrix, LossWeights,
    Metrics,
};
use qgn_core::{verify, QgnError};

use crate::config::{RunConfig, Task};

/// Error plus the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl From<QgnError> for CliError {
    fn from(e: QgnError) -> Self {
        Self { code: e.exit_code() as u8, message: e.to_string() }
    }
}

type CmdResult = Result<(), CliError>;

pub fn cmd_encode(
    rc: &RunConfig,
    mask_path: &Path,
    out: Option<PathBuf>,
    pad: bool,
) -> CmdResult {
    let mut mask = read_mask(mask_path)?;
    if pad {
        mask = pad_to_multiple(&mask, 1 << rc.levels);
    }
    let tp = build_t_pyramid(&mask, rc.levels)?;
    let qt = quadtree_encode(&tp);
    let stats = sparsity_stats(&qt, mask.width(), mask.height());
    let out = out.unwrap_or_else(|| mask_path.with_extension("qtr"));
    write_quadtree(&qt, &out)?;
    if rc.report == "csv" {
        println!("level,pixel_percent");
        for (l, p) in stats.pixel_fraction.iter().enumerate().rev() {
            println!("{l},{p}");
        }
        println!("ratio,{}", stats.ratio);
    } else {
        for (l, p) in stats.pixel_fraction.iter().enumerate().rev() {
            println!("level {l}: {p}% of pixels");
        }
        println!("records: {}", qt.records.len());
        println!("ratio: {}%", stats.ratio);
    }
    Ok(())
}

pub fn cmd_decode(qt_path: &Path, out: Option<PathBuf>) -> CmdResult {
    let qt = read_quadtree(qt_path)?;
    let mask = quadtree_decode(&qt, qt.width, qt.height)?;
    let out = out.unwrap_or_else(|| qt_path.with_extension("qmr"));
    write_mask(&mask, &out)?;
    println!("decoded {}x{} mask, {} classes", mask.width(), mask.height(), mask.num_classes());
    Ok(())
}

pub fn cmd_stats(percentages: &str) -> CmdResult {
    let values: Result<Vec<f64>, _> =
        percentages.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let values =
        values.map_err(|_| QgnError::Input(format!("bad percentage list '{percentages}'")))?;
    let ratio = ratio_from_percentages(&values)?;
    println!("{ratio}%");
    Ok(())
}

struct Sample {
    image: qgn_core::sparse::DenseTensor<f32>,
    pyramid: TPyramid,
    mask: Mask,
}

fn make_dataset(rc: &RunConfig) -> Result<Vec<Sample>, QgnError> {
    let mut out = Vec::new();
    let base: Vec<Mask> = match rc.task {
        Task::Halves => {
            let mut data = vec![1u16; (rc.width * rc.height) as usize];
            for y in 0..rc.height {
                for x in rc.width / 2..rc.width {
                    data[(y * rc.width + x) as usize] = 2;
                }
            }
            vec![Mask::new(rc.width, rc.height, 2, data)?]
        }
        Task::Shapes => (0..rc.dataset)
            .map(|i| {
                gen_synthetic(rc.width, rc.height, rc.classes, rc.shapes, rc.seed ^ i as u64)
            })
            .collect(),
    };
    for mask in base {
        let mut variants = vec![mask.clone()];
        if rc.hflip {
            variants.push(hflip(&mask));
        }
        for m in variants {
            out.push(Sample {
                image: mask_to_image(&m),
                pyramid: build_t_pyramid(&m, rc.levels)?,
                mask: m,
            });
        }
    }
    Ok(out)
}

/// Accuracy / IoU over final masks (composite excluded), summed over a
/// set of prediction pairs.
fn scored(
    pairs: &[(Mask, &Mask)],
    num_classes: u16,
) -> (Metrics, Vec<f64>) {
    let k = num_classes as usize;
    let mut cm = ConfusionMatrix::new(k);
    for (pred, gt) in pairs {
        for (p, t) in pred.data().iter().zip(gt.data()) {
            cm.record(t - 1, p - 1);
        }
    }
    let mut per_class = Vec::with_capacity(k);
    let mut present = Vec::new();
    for c in 0..k {
        match cm.iou(c) {
            Some(v) => {
                per_class.push(v);
                present.push(v);
            }
            None => per_class.push(0.0),
        }
    }
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (
        Metrics { accuracy: cm.accuracy(), per_class_iou: per_class.clone(), miou },
        per_class,
    )
}

fn evaluate(
    model: &QgnModel<f32>,
    data: &[Sample],
    scheme: PropagationScheme,
) -> Result<(Metrics, Vec<f64>, u64), QgnError> {
    let mut pairs = Vec::new();
    let mut decoder_scalars = 0;
    for s in data {
        let gt = match scheme {
            PropagationScheme::Gtc => Some(&s.pyramid),
            _ => None,
        };
        let pass = model.forward(&s.image, scheme, gt)?;
        decoder_scalars += pass.report.decoder_scalars();
        pairs.push((assemble(&pass.prediction, s.mask.width(), s.mask.height())?, &s.mask));
    }
    let k = model.cfg.num_classes;
    let (m, per_class) = scored(&pairs, k);
    Ok((m, per_class, decoder_scalars))
}

pub fn cmd_train(rc: &RunConfig, out: &Path) -> CmdResult {
    if rc.scheme == PropagationScheme::Pc {
        return Err(QgnError::Config(
            "PC propagation is unreliable for training from scratch; use all or gtc".into(),
        )
        .into());
    }
    let data = make_dataset(rc)?;
    let cfg = rc.model_config();
    let tc = rc.train_config();
    let mut model = QgnModel::<f32>::init(cfg)?;
    let mut lw = match rc.weight_mode.as_str() {
        "adaptive" => LossWeights::adaptive(rc.delta, rc.levels),
        _ => LossWeights::fixed(rc.gamma, rc.levels),
    };
    let mut cw = ClassWeights::ones(rc.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(rc.seed);
    let mut log = String::new();
    let eval_count = data.len().min(8);

    for i in 0..rc.iters {
        let batch: Vec<_> = (0..rc.batch)
            .map(|_| {
                let s = &data[rng.gen_range(0..data.len())];
                (s.image.clone(), s.pyramid.clone())
            })
            .collect();
        let stats = train_step(&mut model, &batch, rc.scheme, &mut lw, &cw, &tc, i)?;
        let last = i + 1 == rc.iters;
        if i % rc.eval_interval == 0 || last {
            let (m, _, _) = evaluate(&model, &data[..eval_count], PropagationScheme::All)?;
            let mut line = format!("{i}\t{:.8}", qgn_core::train::lr_at(&tc, i)?);
            write!(line, "\t{:.8}", stats.total).unwrap();
            for l in &stats.per_level {
                write!(line, "\t{l:.8}").unwrap();
            }
            for b in lw.beta() {
                write!(line, "\t{b:.8}").unwrap();
            }
            write!(line, "\t{:.6}\t{:.6}", m.miou, m.accuracy).unwrap();
            println!("{line}");
            log.push_str(&line);
            log.push('\n');
        }
        if (i + 1) % rc.reweight_interval == 0 && !last {
            let (_, per_class, _) =
                evaluate(&model, &data[..eval_count], PropagationScheme::All)?;
            cw = update_class_weights(&per_class);
        }
    }
    write_checkpoint(&model, out)?;
    std::fs::write(log_path(out), log).map_err(QgnError::Io)?;
    // effective config next to the checkpoint, so the run can be replayed
    std::fs::write(sibling(out, ".cfg"), rc.to_file_string()).map_err(QgnError::Io)?;
    Ok(())
}

pub fn log_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".log")
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

fn print_report(report: &ActivationReport, format: &str) {
    if format == "csv" {
        println!("layer,scalars,madds");
        for l in &report.layers {
            println!("{},{},{}", l.name, l.scalars, l.madds);
        }
        println!("total,{},{}", report.total_scalars(), report.total_madds());
    } else {
        println!(
            "activations: encoder {} decoder {} total {} scalars, {} madds",
            report.encoder_scalars(),
            report.decoder_scalars(),
            report.total_scalars(),
            report.total_madds()
        );
    }
}

pub fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    gt: Option<&Path>,
    scheme: &str,
    out: Option<PathBuf>,
    report: &str,
) -> CmdResult {
    let scheme = PropagationScheme::from_str(scheme)?;
    let model = read_checkpoint(checkpoint)?;
    let mask = read_mask(input)?;
    if mask.num_classes() != model.cfg.num_classes {
        return Err(QgnError::Shape(format!(
            "mask has {} classes, checkpoint expects {}",
            mask.num_classes(),
            model.cfg.num_classes
        ))
        .into());
    }
    let gt_mask = gt.map(read_mask).transpose()?;
    let gt_pyramid = match (&gt_mask, scheme) {
        (None, PropagationScheme::Gtc) => {
            return Err(QgnError::Config(
                "gtc evaluation requires --gt (ground-truth upper-bound mode)".into(),
            )
            .into())
        }
        (Some(g), _) => Some(build_t_pyramid(g, model.cfg.levels)?),
        (None, _) => None,
    };
    if scheme == PropagationScheme::Gtc {
        eprintln!("note: gtc evaluation uses ground-truth structure (upper-bound mode)");
    }
    let image = mask_to_image::<f32>(&mask);
    let pass = model.forward(&image, scheme, gt_pyramid.as_ref())?;
    let pred = assemble(&pass.prediction, mask.width(), mask.height())?;
    let out = out.unwrap_or_else(|| input.with_extension("pred.qmr"));
    write_mask(&pred, &out)?;
    print_report(&pass.report, report);
    if let Some(g) = &gt_mask {
        let m = metrics(&pred, g)?;
        println!("accuracy: {:.6}", m.accuracy);
        println!("miou: {:.6}", m.miou);
    }
    Ok(())
}

pub fn cmd_verify(seed: u64, out: &Path) -> CmdResult {
    let report = verify::run_all(seed);
    for s in &report.suites {
        println!(
            "{}: {} ({} cases, {} failures)",
            s.name,
            if s.passed() { "PASS" } else { "FAIL" },
            s.cases,
            s.failures.len()
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        std::fs::create_dir_all(out).map_err(QgnError::Io)?;
        report.write_failures(out)?;
        Err(CliError {
            code: 5,
            message: format!("verification failed; failing cases written to {}", out.display()),
        })
    }
}
