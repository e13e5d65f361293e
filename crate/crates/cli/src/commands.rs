//! One function per subcommand. All validation happens up front so failures
//! exit before any files are touched.

use std::path::{Path, PathBuf};

use drnet::resnet::ArchSpec;
use drnet::{
    activation_map, evaluate, generate_synthetic, gradcam, lime, load_dataset, load_image,
    load_manifest, load_model, overlay_ppm, resize_bilinear, rise, save_image, save_model,
    to_pgm, to_tensor, write_atomic, Dataset, Error, LimeConfig, Network, Result, RiseConfig,
    SyntheticSpec, TrainConfig, Variant, CLASS_NAMES,
};

use crate::{
    CompareArgs, EvalArgs, ExplainArgs, ExplainMethod, RfReportArgs, SynthArgs, TrainArgs,
};

pub const CLASS_COUNT: usize = CLASS_NAMES.len();

fn parse_arch(raw: &str) -> Result<Variant> {
    let depth: usize = raw
        .parse()
        .map_err(|_| Error::InvalidArg(format!("unknown variant {raw}; valid: 18, 34, 50, 101, 152")))?;
    Variant::from_depth(depth)
}

/// Class argument: an index or one of the fixed class names.
fn parse_class(raw: &str) -> Result<usize> {
    if let Ok(i) = raw.parse::<usize>() {
        if i < CLASS_COUNT {
            return Ok(i);
        }
        return Err(Error::InvalidArg(format!(
            "class {i} out of range 0..{CLASS_COUNT}"
        )));
    }
    CLASS_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(raw))
        .ok_or_else(|| {
            Error::InvalidArg(format!("unknown class {raw:?}; valid: {CLASS_NAMES:?}"))
        })
}

fn require<T>(slot: Option<T>, flag: &str) -> Result<T> {
    slot.ok_or_else(|| Error::InvalidArg(format!("--{flag} is required")))
}

fn dataset_from(manifest_path: &Path, side: usize) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    load_dataset(root, &manifest, side)
}

fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}

pub fn cmd_train(a: TrainArgs) -> Result<()> {
    let variant = parse_arch(&require(a.arch, "arch")?)?;
    let data = require(a.data, "data")?;
    let out = require(a.out, "out")?;
    let side = a.image_size.unwrap_or(64);
    let cfg = TrainConfig {
        learning_rate: a.learning_rate.unwrap_or(0.01),
        momentum: a.momentum.unwrap_or(0.9),
        weight_decay: a.weight_decay.unwrap_or(1e-4),
        epochs: a.epochs.unwrap_or(10),
        batch_size: a.batch_size.unwrap_or(32),
        seed: a.seed.unwrap_or(0),
        width_mult: a.width_mult.unwrap_or(1.0),
        class_weights: None,
    };

    let train_set = dataset_from(&data, side)?;
    // Without --val the per-epoch metrics track the training set itself.
    let val_set = match &a.val {
        Some(p) => dataset_from(p, side)?,
        None => train_set.clone(),
    };

    let arch = ArchSpec::resnet(
        variant,
        a.dilated,
        CLASS_COUNT,
        cfg.width_mult,
        !a.no_batch_norm,
    )?;
    let mut net = Network::build(arch, cfg.seed)?;
    println!(
        "training resnet-{}{} ({} params) on {} images",
        variant.depth(),
        if a.dilated { " dilated" } else { "" },
        net.param_count(),
        train_set.len()
    );
    let total = cfg.epochs;
    let history = drnet::train(&mut net, &train_set, &val_set, &cfg, |e| {
        println!(
            "epoch {:>3}/{total}  loss {:.4}  val-acc {:.4}  val-f1 {:.4}",
            e.epoch, e.train_loss, e.val_accuracy, e.val_macro_f1
        );
    })?;

    save_model(&out, &net)?;
    let history_path = out.with_extension("history.csv");
    write_atomic(&history_path, history.to_csv().as_bytes())?;
    println!("wrote {} and {}", out.display(), history_path.display());
    Ok(())
}

pub fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = require(a.model, "model")?;
    let data = require(a.data, "data")?;
    let net = load_model(&model)?;
    if net.arch.class_count != CLASS_COUNT {
        return Err(Error::InvalidArg(format!(
            "model has {} classes, this tool evaluates the fixed {CLASS_COUNT}-class scheme",
            net.arch.class_count
        )));
    }
    let ds = dataset_from(&data, a.image_size.unwrap_or(64))?;
    let (report, _) = evaluate(&net, &ds, a.batch_size.unwrap_or(32))?;
    print!("{}", report.table(&class_names()));
    if let Some(out) = a.out {
        write_atomic(&out, report.to_csv(&class_names()).as_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

pub fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let model = require(a.model, "model")?;
    let image_path = require(a.image, "image")?;
    let class = parse_class(&require(a.class, "class")?)?;
    let out_dir = a.out.unwrap_or_else(|| PathBuf::from("."));
    let seed = a.seed.unwrap_or(0);

    let net = load_model(&model)?;
    if class >= net.arch.class_count {
        return Err(Error::InvalidArg(format!(
            "class {class} out of range for a {}-class model",
            net.arch.class_count
        )));
    }
    let mut img = load_image(&image_path)?;
    if let Some(side) = a.image_size {
        if img.width() != side || img.height() != side {
            img = resize_bilinear(&img, side, side)?;
        }
    }
    let x = to_tensor(&img);

    let mut lime_csv = None;
    let map = match a.method {
        ExplainMethod::Gradcam => gradcam(&net, &x, class)?,
        ExplainMethod::Activation => activation_map(&net, &x, a.layer.as_deref())?,
        ExplainMethod::Rise => {
            let cfg = RiseConfig {
                mask_count: a.rise_masks.unwrap_or(4000),
                grid: a.rise_grid.unwrap_or(7),
                keep_prob: a.rise_keep.unwrap_or(0.5),
            };
            rise(&net, &x, class, &cfg, seed)?
        }
        ExplainMethod::Lime => {
            let cfg = LimeConfig {
                grid: a.lime_grid.unwrap_or(7),
                samples: a.lime_samples.unwrap_or(300),
                kernel_width: a.lime_kernel_width.unwrap_or(0.25),
                ridge: a.lime_ridge.unwrap_or(1e-4),
            };
            let exp = lime(&net, &x, class, &cfg, seed)?;
            lime_csv = Some(exp.to_csv());
            exp.saliency(img.width(), img.height())
        }
    };
    if map.degenerate {
        eprintln!("warning: saliency map is flat (raw value {}); outputs are all black", map.raw_min);
    }

    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    let method = a.method.name();
    std::fs::create_dir_all(&out_dir)?;
    let pgm = out_dir.join(format!("{stem}.{method}.{class}.pgm"));
    let ppm = out_dir.join(format!("{stem}.{method}.{class}.ppm"));
    save_image(&pgm, &to_pgm(&map))?;
    save_image(&ppm, &overlay_ppm(&map, &img)?)?;
    println!("wrote {}", pgm.display());
    println!("wrote {}", ppm.display());
    if let Some(csv) = lime_csv {
        let path = out_dir.join(format!("{stem}.lime.{class}.csv"));
        write_atomic(&path, csv.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

pub fn cmd_compare(a: CompareArgs) -> Result<()> {
    let data = require(a.data, "data")?;
    let without = load_model(&a.model_without)?;
    let with = load_model(&a.model_with)?;
    if without.arch.class_count != with.arch.class_count {
        return Err(Error::InvalidArg(format!(
            "class counts differ: {} vs {}",
            without.arch.class_count, with.arch.class_count
        )));
    }
    let ds = dataset_from(&data, a.image_size.unwrap_or(64))?;
    let batch = a.batch_size.unwrap_or(32);
    let (ra, _) = evaluate(&without, &ds, batch)?;
    let (rb, _) = evaluate(&with, &ds, batch)?;

    println!(
        "{:<12}  {:>18}  {:>15}  {:>10}",
        "metric", "without-dilation", "with-dilation", "delta"
    );
    let row = |name: &str, x: f64, y: f64| {
        println!("{name:<12}  {x:>18.4}  {y:>15.4}  {:>+10.4}", y - x);
    };
    row("accuracy", ra.accuracy, rb.accuracy);
    row("macro-F1", ra.macro_f1, rb.macro_f1);
    row("weighted-F1", ra.weighted_f1, rb.weighted_f1);
    let (pa, pb) = (without.param_count(), with.param_count());
    println!(
        "{:<12}  {:>18}  {:>15}  {:>10}",
        "parameters",
        pa,
        pb,
        pb as i64 - pa as i64
    );
    Ok(())
}

pub fn cmd_rf_report(a: RfReportArgs) -> Result<()> {
    let variant = parse_arch(&require(a.arch, "arch")?)?;
    let input = a.input.unwrap_or(224);
    let build = |dilated: bool| -> Result<_> {
        let arch = ArchSpec::resnet(variant, dilated, CLASS_COUNT, 1.0, true)?;
        Network::build(arch, 0)?.audit((input, input))
    };
    let normal = build(false)?;
    let dilated = build(true)?;
    let shown = if a.dilated { &dilated } else { &normal };

    println!(
        "resnet-{}{}, input {input}x{input}",
        variant.depth(),
        if a.dilated { " dilated" } else { "" }
    );
    println!(
        "{:<14} {:<8} {:>6} {:>6} {:>8} {:>9} {:>10} {:>12} {:>12}",
        "layer", "kind", "kernel", "stride", "dilation", "eff-k", "output", "rf", "params"
    );
    for r in &shown.rows {
        let side = if r.main_path { "" } else { "  (side)" };
        println!(
            "{:<14} {:<8} {:>6} {:>6} {:>8} {:>9} {:>10} {:>12} {:>12}{side}",
            r.name,
            r.kind,
            format!("{}x{}", r.kernel.0, r.kernel.1),
            format!("{}x{}", r.stride.0, r.stride.1),
            r.dilation,
            format!("{}x{}", r.effective_kernel.0, r.effective_kernel.1),
            format!("{}x{}", r.output.0, r.output.1),
            format!("{}x{}", r.receptive_field.0, r.receptive_field.1),
            r.params,
        );
    }
    println!(
        "{} conv + {} fc layers, {} params",
        shown.conv_count, shown.fc_count, shown.total_params
    );
    println!(
        "final feature map: normal {}x{}, dilated {}x{}",
        normal.final_feature.0, normal.final_feature.1,
        dilated.final_feature.0, dilated.final_feature.1
    );
    println!(
        "final receptive field: normal {}x{}, dilated {}x{}",
        normal.final_receptive_field.0, normal.final_receptive_field.1,
        dilated.final_receptive_field.0, dilated.final_receptive_field.1
    );
    Ok(())
}

pub fn cmd_synth(a: SynthArgs) -> Result<()> {
    let out = require(a.out, "out")?;
    let spec = SyntheticSpec {
        image_size: a.size.unwrap_or(64),
        per_class: a.per_class.unwrap_or(100),
        disc_brightness: a.disc_brightness.unwrap_or(170.0),
        stroke_count: a.strokes.unwrap_or(6),
        blur_passes: a.blur.unwrap_or(1),
        seed: a.seed.unwrap_or(0),
    };
    let manifest = generate_synthetic(&spec, &out)?;
    println!(
        "wrote {} images and manifest.csv under {}",
        manifest.len(),
        out.display()
    );
    Ok(())
}
