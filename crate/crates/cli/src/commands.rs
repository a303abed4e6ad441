//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde_json::Value;

use lang2color::checkpoint::{load_checkpoint, warm_start, CheckpointMetadata};
use lang2color::data::{
    filter_color_captions, generate_synthetic, load_manifest, object_mask, preprocess_split, Sample, SkippedRecord, Split,
    SyntheticSpec,
};
use lang2color::evaluation::{evaluate, manipulation_eval, write_heatmaps, DEFAULT_HEATMAP_BLOCKS};
use lang2color::imageio::{contact_sheet, read_grey, read_rgb, write_png};
use lang2color::model::{ColorizationModel, EncoderConfig};
use lang2color::network::FusionMode;
use lang2color::quantizer::{write_quantizer_report, QuantizerSpec};
use lang2color::text::lexicon::{swap_color_word, ColorLexicon};
use lang2color::text::vocab::{build_vocab, words};
use lang2color::training::{train, training_weights, TrainConfig, TrainInputs};

use crate::args::{
    merge, Cli, ColorizeArgs, Command, EvalArgs, GenSyntheticArgs, ManipulateArgs, Preset, ServeArgs, TrainArgs,
};
use crate::error::{CliError, CliResult, Classify};

/// Default checkpoint path when `--checkpoint` is absent.
pub const CHECKPOINT_ENV: &str = "LANG2COLOR_CHECKPOINT";

const SECTIONS: [&str; 6] = ["gen-synthetic", "train", "eval", "colorize", "manipulate", "serve"];

pub fn run(cli: Cli) -> CliResult<()> {
    let file = cli.config.as_deref().map(read_config).transpose()?;
    let name = cli.command.name();
    let section = file.as_ref().and_then(|f| f.get(name));
    let bad_config = |e: String| CliError::Input(format!("config section {name:?}: {e}"));
    match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(merge(a, section).map_err(bad_config)?),
        Command::Train(a) => train_cmd(merge(a, section).map_err(bad_config)?),
        Command::Eval(a) => eval_cmd(merge(a, section).map_err(bad_config)?),
        Command::Colorize(a) => colorize_cmd(merge(a, section).map_err(bad_config)?),
        Command::Manipulate(a) => manipulate_cmd(merge(a, section).map_err(bad_config)?),
        Command::Serve(a) => serve_cmd(merge(a, section).map_err(bad_config)?),
    }
}

fn read_config(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("config {}: {e}", path.display())))?;
    let Value::Object(map) = &value else {
        return Err(CliError::Input(format!("config {} must hold a JSON object", path.display())));
    };
    if let Some(k) = map.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(CliError::Input(format!("config {}: unknown section {k:?}", path.display())));
    }
    Ok(value)
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Input(format!("--{flag} is required")))
}

/// `--checkpoint`, else `$LANG2COLOR_CHECKPOINT`.
pub fn checkpoint_path(flag: Option<PathBuf>) -> CliResult<PathBuf> {
    flag.or_else(|| std::env::var_os(CHECKPOINT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .ok_or_else(|| CliError::Checkpoint(format!("no checkpoint given; pass --checkpoint or set {CHECKPOINT_ENV}")))
}

pub fn load_model(path: &Path) -> CliResult<(ColorizationModel<f32>, CheckpointMetadata)> {
    if !path.is_file() {
        return Err(CliError::Checkpoint(format!("{} not found", path.display())));
    }
    load_checkpoint::<f32>(path, None).checkpoint()
}

fn report_skipped(skipped: &[SkippedRecord]) {
    for s in skipped {
        log::warn!("skipping record {} ({}): {}", s.index, s.image_path.display(), s.reason);
    }
}

/// Requested heatmap blocks, or the default ones that exist in this network.
fn heatmap_blocks(requested: Option<Vec<usize>>, num_blocks: usize) -> CliResult<Vec<usize>> {
    let blocks = requested.unwrap_or_else(|| {
        let b: Vec<usize> = DEFAULT_HEATMAP_BLOCKS.into_iter().filter(|&b| b <= num_blocks).collect();
        if b.is_empty() {
            vec![num_blocks]
        } else {
            b
        }
    });
    match blocks.iter().find(|&&b| b == 0 || b > num_blocks) {
        Some(b) => Err(CliError::Input(format!("block {b} does not exist; the network has blocks 1..={num_blocks}"))),
        None => Ok(blocks),
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).other()?;
    fs::write(path, text + "\n").map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn gen_synthetic(a: GenSyntheticArgs) -> CliResult<()> {
    let out = require(a.out, "out")?;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        count: a.count.unwrap_or(d.count),
        val_count: a.val_count.unwrap_or(d.val_count),
        test_count: a.test_count.unwrap_or(d.test_count),
        image_size: a.image_size.unwrap_or(d.image_size),
        shapes: a.shapes.unwrap_or_else(|| d.shapes.clone()),
        color_words: a.colors.unwrap_or_else(|| d.color_words.clone()),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let manifest = generate_synthetic(&spec, &ColorLexicon::default(), a.stride.unwrap_or(4), &out).input()?;
    log::info!("wrote {} samples under {}", manifest.records.len(), out.display());
    println!("{}", out.join("manifest.jsonl").display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let manifest_path = require(a.manifest, "manifest")?;
    let out = require(a.out, "out")?;
    let manifest = load_manifest(&manifest_path).input()?;
    let fusion = a.fusion.unwrap_or(FusionMode::Film);
    let preset = a.preset.unwrap_or(Preset::Desk);
    let net = preset.config(fusion);
    let q = QuantizerSpec::default();
    let (train_set, skipped) = preprocess_split(&manifest, Split::Train, &q, &net);
    report_skipped(&skipped);
    if train_set.is_empty() {
        return Err(CliError::Input(format!("{} has no usable training records", manifest_path.display())));
    }
    let (val_set, skipped) = preprocess_split(&manifest, Split::Val, &q, &net);
    report_skipped(&skipped);

    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        lr_schedule: a.lr_schedule.unwrap_or(d.lr_schedule),
        seed: a.seed.unwrap_or(d.seed),
        epsilon: a.epsilon.unwrap_or(d.epsilon),
        rebalance: a.rebalance.unwrap_or(d.rebalance),
        fusion_mode: fusion,
        eval_every: a.eval_every.unwrap_or(d.eval_every),
        checkpoint_dir: Some(out.clone()),
    };
    cfg.validate().input()?;

    let captions: Vec<&str> = train_set.iter().flat_map(|s| s.captions.iter().map(String::as_str)).collect();
    let vocab = build_vocab(&captions, 1).other()?;
    let encoder = EncoderConfig::for_language_dim(net.language_dim);
    let mut model = ColorizationModel::<f32>::new(&net, encoder, vocab, q, cfg.seed).other()?;
    if let Some(path) = &a.warm_start {
        let report = warm_start(&mut model, path).checkpoint()?;
        log::info!(
            "warm start from {}: {} loaded, {} widened, {} skipped",
            path.display(),
            report.loaded.len(),
            report.widened.len(),
            report.skipped.len()
        );
        for (name, why) in &report.skipped {
            log::warn!("warm start skipped {name}: {why}");
        }
    }
    let weights = training_weights(&train_set, q.num_labels(), &cfg).other()?;
    fs::create_dir_all(&out).map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))?;
    write_quantizer_report(&out.join("quantizer.json"), &q, &weights).other()?;

    let preset_name = preset.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
    let model_id = a.model_id.unwrap_or_else(|| format!("{preset_name}-{}", fusion.to_string().to_lowercase()));
    log::info!("training {model_id} on {} images ({} validation)", train_set.len(), val_set.len());
    let inputs = TrainInputs { train: &train_set, val: &val_set, weights: &weights, model_id: &model_id };
    let epochs = cfg.epochs;
    let outcome = train(&mut model, &inputs, &cfg, |r| match (r.acc1, r.acc5) {
        (Some(a1), Some(a5)) => {
            log::info!("epoch {}/{epochs}: loss {:.4}, val acc@1 {a1:.4}, acc@5 {a5:.4}", r.epoch, r.loss)
        }
        _ => log::info!("epoch {}/{epochs}: loss {:.4}", r.epoch, r.loss),
    })
    .other()?;
    if let Some(path) = outcome.checkpoint {
        println!("{}", path.display());
    }
    Ok(())
}

/// Lexicon words that occur in the samples' captions, in lexicon order.
fn dataset_color_words(samples: &[Sample], lexicon: &ColorLexicon) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    for s in samples {
        for c in &s.captions {
            seen.extend(words(c).filter(|w| lexicon.contains(w)));
        }
    }
    lexicon.words().filter(|w| seen.contains(*w)).map(String::from).collect()
}

#[derive(serde::Serialize)]
struct EvalSummary {
    model_id: String,
    dataset_id: String,
    images: usize,
    acc1: f64,
    acc5: f64,
    region_acc1: Option<f64>,
    manipulation_words: Vec<String>,
    manipulation_images: usize,
    manipulation_success_rate: Option<f64>,
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let (model, meta) = load_model(&checkpoint_path(a.checkpoint)?)?;
    let manifest_path = require(a.manifest, "manifest")?;
    let out = require(a.out, "out")?;
    let split: Split = a.split.as_deref().unwrap_or("test").parse().input()?;
    let lexicon = ColorLexicon::default();
    let manifest = filter_color_captions(&load_manifest(&manifest_path).input()?, &lexicon);
    let (samples, skipped) = preprocess_split(&manifest, split, &model.quantizer, model.config());
    report_skipped(&skipped);
    if samples.is_empty() {
        return Err(CliError::Input(format!("no usable {split:?} records with color-word captions")));
    }
    let blocks = heatmap_blocks(a.blocks, model.config().num_blocks())?;
    let dataset_id = format!("{}:{}", manifest.fingerprint().other()?, format!("{split:?}").to_lowercase());
    let report = evaluate(&model, &samples, &model.quantizer, &meta.model_id, &dataset_id).other()?;
    fs::create_dir_all(&out).map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))?;
    write_json(&out.join("report.json"), &report)?;

    let words = a.words.unwrap_or_else(|| dataset_color_words(&samples, &lexicon));
    if let Some(w) = words.iter().find(|w| !lexicon.contains(w)) {
        return Err(CliError::Input(format!("{w:?} is not a lexicon color word")));
    }
    let (mut hits, mut scored) = (0usize, 0usize);
    let mut lines = String::new();
    if words.len() >= 2 {
        let masked = samples.iter().filter_map(|s| s.mask.as_ref().filter(|m| m.contains(&true)).map(|m| (s, m)));
        for (s, mask) in masked.take(a.manipulation_limit.unwrap_or(usize::MAX)) {
            let size = (s.labels.height, s.labels.width);
            let rec = manipulation_eval(&model, &s.id, &s.lightness, mask, size, &s.captions[0], &words, &lexicon).other()?;
            if let Some(ok) = rec.success {
                scored += 1;
                hits += usize::from(ok);
            }
            lines.push_str(&serde_json::to_string(&rec).other()?);
            lines.push('\n');
        }
    } else {
        log::warn!("fewer than two color words available; skipping the manipulation metric");
    }
    fs::write(out.join("manipulation.jsonl"), lines).other()?;

    for s in samples.iter().take(a.heatmap_images.unwrap_or(4)) {
        let pred = model.predict(&s.lightness, &s.captions[0]).other()?;
        write_heatmaps(&out.join("heatmaps"), &s.id, &pred.features, &blocks).other()?;
    }

    let summary = EvalSummary {
        model_id: report.model_id.clone(),
        dataset_id,
        images: samples.len(),
        acc1: report.acc1,
        acc5: report.acc5,
        region_acc1: report.region_acc1,
        manipulation_words: words,
        manipulation_images: scored,
        manipulation_success_rate: (scored > 0).then(|| hits as f64 / scored as f64),
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).other()?);
    Ok(())
}

fn colorize_cmd(a: ColorizeArgs) -> CliResult<()> {
    let image_path = require(a.image, "image")?;
    let out = require(a.out, "out")?;
    let image = read_rgb(&image_path).input()?;
    let (model, _) = load_model(&checkpoint_path(a.checkpoint)?)?;
    let blocks = heatmap_blocks(a.blocks, model.config().num_blocks())?;
    let result = model.colorize(&image, a.caption.as_deref().unwrap_or("")).other()?;
    write_png(&out, &result.image).map_err(|e| CliError::Input(format!("cannot write {}: {e}", out.display())))?;
    if let Some(dir) = &a.heatmaps {
        write_heatmaps(dir, &file_stem(&image_path), &result.prediction.features, &blocks).other()?;
    }
    println!("{}", out.display());
    Ok(())
}

/// Drops repeated words, keeping first occurrences.
fn dedup_words(words: Vec<String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    for w in words {
        let w = w.trim().to_lowercase();
        if out.contains(&w) {
            log::warn!("color word {w:?} given more than once; using it once");
        } else if !w.is_empty() {
            out.push(w);
        }
    }
    out
}

fn manipulate_cmd(a: ManipulateArgs) -> CliResult<()> {
    let image_path = require(a.image, "image")?;
    let out = require(a.out, "out")?;
    let caption = require(a.caption, "caption")?;
    let lexicon = ColorLexicon::default();
    let known = || lexicon.words().collect::<Vec<_>>().join(", ");
    let words = dedup_words(a.words.unwrap_or_default());
    if words.len() < 2 {
        return Err(CliError::Input("--words needs at least two distinct color words".into()));
    }
    if let Some(w) = words.iter().find(|w| !lexicon.contains(w)) {
        return Err(CliError::Input(format!("{w:?} is not a color word (known: {})", known())));
    }
    if lexicon.find_in(&caption).is_none() {
        return Err(CliError::Caption(format!(
            "{caption:?} has no color word to swap; include one of: {}",
            known()
        )));
    }
    let image = read_rgb(&image_path).input()?;
    let mask = a.mask.as_deref().map(read_grey).transpose().input()?;
    let (model, _) = load_model(&checkpoint_path(a.checkpoint)?)?;
    fs::create_dir_all(&out).map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))?;

    let mut panels = Vec::with_capacity(words.len());
    for w in &words {
        let swapped = swap_color_word(&caption, w, &lexicon).other()?;
        let result = model.colorize(&image, &swapped.text).other()?;
        write_png(&out.join(format!("{w}.png")), &result.image).other()?;
        panels.push(result.image);
    }
    write_png(&out.join("contact_sheet.png"), &contact_sheet(&panels, 4)).other()?;

    if let Some(grey) = mask {
        let m = object_mask(&grey, model.config()).input()?;
        if !m.contains(&true) {
            return Err(CliError::Input("the mask covers no whole output pixel".into()));
        }
        let size = model.config().output_size();
        let lightness = model.input_lightness(&image);
        let rec = manipulation_eval(&model, &file_stem(&image_path), &lightness, &m, (size, size), &caption, &words, &lexicon)
            .other()?;
        write_json(&out.join("record.json"), &rec)?;
        log::info!("manipulation success: {:?}", rec.success);
    }
    println!("{}", out.display());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> CliResult<()> {
    let (model, meta) = load_model(&checkpoint_path(a.checkpoint)?)?;
    let request_log = a
        .request_log
        .as_deref()
        .map(|p| fs::OpenOptions::new().create(true).append(true).open(p))
        .transpose()
        .input()?;
    let state = crate::server::AppState::new(model, meta.model_id, ColorLexicon::default(), request_log);
    let addr = format!("{}:{}", a.host.as_deref().unwrap_or("127.0.0.1"), a.port.unwrap_or(8080));
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().other()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.other()?;
        let local = listener.local_addr().other()?;
        log::info!("serving {} on http://{local}", state.model_id);
        println!("http://{local}");
        axum::serve(listener, crate::server::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .other()
    })
}
