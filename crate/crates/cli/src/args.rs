//! Command-line flags. Every subcommand can also be configured from a JSON
//! file holding one object per subcommand; flags given on the command line
//! take precedence over the file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use lang2color::data::ShapeKind;
use lang2color::network::{FusionMode, NetworkConfig};
use lang2color::training::LrSchedule;

#[derive(Debug, Parser)]
#[command(name = "lang2color", version, about = "Caption-conditioned colorization of greyscale images")]
pub struct Cli {
    /// JSON config file, e.g. {"train": {"epochs": 5}, "serve": {"port": 9000}}.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic colored-shapes dataset.
    GenSynthetic(GenSyntheticArgs),
    /// Trains a model on a manifest and writes model.ckpt.
    Train(TrainArgs),
    /// Accuracy, caption manipulation and heatmaps on one split.
    Eval(EvalArgs),
    /// Colorizes one image under one caption.
    Colorize(ColorizeArgs),
    /// Colorizes one image under caption variants with swapped color words.
    Manipulate(ManipulateArgs),
    /// Serves the HTTP API.
    Serve(ServeArgs),
}

impl Command {
    /// Section name in the config file.
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic(_) => "gen-synthetic",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Colorize(_) => "colorize",
            Command::Manipulate(_) => "manipulate",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Narrow,
    FullResolution,
}

impl Preset {
    pub fn config(self, fusion: FusionMode) -> NetworkConfig {
        match self {
            Preset::Desk => NetworkConfig::desk(fusion),
            Preset::Narrow => NetworkConfig::narrow(fusion),
            Preset::FullResolution => NetworkConfig::full_resolution(fusion),
        }
    }
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSyntheticArgs {
    /// Output directory for images/, masks/ and manifest.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub val_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated lexicon color words.
    #[arg(long, value_delimiter = ',')]
    pub colors: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub shapes: Option<Vec<ShapeKind>>,
    /// Network output stride; shapes always cover at least one output pixel.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory for model.ckpt, history.jsonl and quantizer.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight smoothing; defaults to 1e-3/K.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub rebalance: Option<bool>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Initialize convolutions and batch norm from this checkpoint.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub model_id: Option<String>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Defaults to $LANG2COLOR_CHECKPOINT.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// train, val or test (default test).
    #[arg(long)]
    pub split: Option<String>,
    /// Directory for report.json, manipulation.jsonl and heatmaps/.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Words for the manipulation metric; defaults to the color words found in the split's captions.
    #[arg(long, value_delimiter = ',')]
    pub words: Option<Vec<String>>,
    /// At most this many masked images enter the manipulation metric.
    #[arg(long)]
    pub manipulation_limit: Option<usize>,
    /// Heatmaps are written for this many images (default 4).
    #[arg(long)]
    pub heatmap_images: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorizeArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub caption: Option<String>,
    /// Defaults to $LANG2COLOR_CHECKPOINT.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write activation heatmaps into this directory.
    #[arg(long)]
    pub heatmaps: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulateArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub caption: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub words: Option<Vec<String>>,
    /// Defaults to $LANG2COLOR_CHECKPOINT.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Object mask PNG; enables the success record.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeArgs {
    /// Defaults to $LANG2COLOR_CHECKPOINT.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Append one JSON line per request to this file.
    #[arg(long)]
    pub request_log: Option<PathBuf>,
}

/// Fills flags that were not given from the file's section.
pub fn merge<T: Serialize + DeserializeOwned>(flags: T, section: Option<&Value>) -> Result<T, String> {
    let Some(section) = section else { return Ok(flags) };
    let Value::Object(mut base) = section.clone() else {
        return Err("config section must be a JSON object".into());
    };
    let Value::Object(given) = serde_json::to_value(&flags).map_err(|e| e.to_string())? else {
        unreachable!("argument structs serialize to objects")
    };
    for (k, v) in given {
        if !v.is_null() {
            base.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let flags = TrainArgs { epochs: Some(3), ..Default::default() };
        let file = serde_json::json!({"epochs": 9, "batch_size": 4, "fusion": "CONCAT", "preset": "narrow"});
        let merged = merge(flags, Some(&file)).unwrap();
        assert_eq!(merged.epochs, Some(3));
        assert_eq!(merged.batch_size, Some(4));
        assert_eq!(merged.fusion, Some(FusionMode::Concat));
        assert_eq!(merged.preset, Some(Preset::Narrow));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = serde_json::json!({"epoch": 9});
        let err = merge(TrainArgs::default(), Some(&file)).unwrap_err();
        assert!(err.contains("epoch"), "{err}");
    }

    #[test]
    fn list_flags_split_on_commas() {
        let cli = Cli::try_parse_from(["lang2color", "manipulate", "--words", "red,blue", "--caption", "a red car"]).unwrap();
        let Command::Manipulate(m) = cli.command else { panic!() };
        assert_eq!(m.words.unwrap(), vec!["red", "blue"]);
    }
}
