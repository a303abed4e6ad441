//! Trains NONE, CONCAT and FILM on the synthetic shapes set and reports
//! shape-region accuracy and manipulation success.
//!
//! `cargo run --release --example ordering -- [narrow|desk] [epochs] [train count]`

use std::time::Instant;

use lang2color::data::{generate_synthetic, preprocess_split, Split, SyntheticSpec};
use lang2color::evaluation::{evaluate, manipulation_eval};
use lang2color::model::{ColorizationModel, EncoderConfig};
use lang2color::network::{FusionMode, NetworkConfig};
use lang2color::quantizer::QuantizerSpec;
use lang2color::text::lexicon::ColorLexicon;
use lang2color::text::vocab::build_vocab;
use lang2color::training::{train, training_weights, TrainConfig, TrainInputs};

fn main() -> lang2color::Result<()> {
    let mut args = std::env::args().skip(1);
    let which = args.next().unwrap_or_else(|| "narrow".into());
    let epochs: usize = args.next().map_or(3, |s| s.parse().expect("epochs"));
    let count: usize = args.next().map_or(2000, |s| s.parse().expect("train count"));
    let dir = tempfile::tempdir()?;
    let spec = SyntheticSpec { count: count + 200, test_count: 200, ..Default::default() };
    let lexicon = ColorLexicon::default();
    let manifest = generate_synthetic(&spec, &lexicon, 4, dir.path())?;
    let q = QuantizerSpec::default();
    for fusion in [FusionMode::None, FusionMode::Concat, FusionMode::Film] {
        let net = if which == "desk" { NetworkConfig::desk(fusion) } else { NetworkConfig::narrow(fusion) };
        let (train_set, _) = preprocess_split(&manifest, Split::Train, &q, &net);
        let (test_set, _) = preprocess_split(&manifest, Split::Test, &q, &net);
        let captions: Vec<&str> = train_set.iter().flat_map(|s| s.captions.iter().map(String::as_str)).collect();
        let vocab = build_vocab(&captions, 1)?;
        let enc = EncoderConfig::for_language_dim(net.language_dim);
        let mut model = ColorizationModel::<f32>::new(&net, enc, vocab, q, 1)?;
        let cfg = TrainConfig { epochs, fusion_mode: fusion, ..Default::default() };
        let weights = training_weights(&train_set, q.num_labels(), &cfg)?;
        let start = Instant::now();
        let inputs = TrainInputs { train: &train_set, val: &[], weights: &weights, model_id: "ordering" };
        let out = train(&mut model, &inputs, &cfg, |r| eprintln!("  {fusion} epoch {} loss {:.4}", r.epoch, r.loss))?;
        let secs = start.elapsed().as_secs_f64();
        let report = evaluate(&model, &test_set, &q, "ordering", "synthetic")?;
        let mut ok = 0;
        let mut n = 0;
        for s in test_set.iter().take(100) {
            let words: Vec<String> = spec.color_words.clone();
            let mask = s.mask.as_ref().expect("synthetic masks");
            let rec = manipulation_eval(&model, &s.id, &s.lightness, mask, (s.labels.height, s.labels.width), &s.captions[0], &words, &lexicon)?;
            n += 1;
            ok += usize::from(rec.success == Some(true));
        }
        println!(
            "{which} {fusion}: {secs:.0}s, last loss {:.4}, acc1 {:.3}, region acc1 {:.3}, manipulation {}/{n}",
            out.history.last().map_or(f64::NAN, |r| r.loss),
            report.acc1,
            report.region_acc1.unwrap_or(f64::NAN),
            ok
        );
    }
    Ok(())
}
