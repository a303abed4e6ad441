//! Analytic gradients against central finite differences, in f64.

use lang2color::model::{ColorizationModel, EncoderConfig};
use lang2color::network::{Colorizer, FusionMode, Mode, NetworkConfig};
use lang2color::nn::{Batch, Param, ParamVisitor};
use lang2color::quantizer::{LabelMap, QuantizerSpec};
use lang2color::text::vocab::build_vocab;
use lang2color::training::weighted_ce_batch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-7)
}

fn tiny(fusion: FusionMode, num_labels: usize) -> NetworkConfig {
    NetworkConfig {
        input_size: 8,
        block_channels: vec![4; 8],
        convs_per_block: vec![2; 8],
        block_strides: vec![1, 2, 1, 1, 1, 1, 1, 1],
        block_dilations: vec![1, 1, 1, 1, 2, 2, 1, 1],
        kernel_size: 3,
        fusion_mode: fusion,
        language_dim: 6,
        num_labels,
    }
}

/// Runs `f` on the tensor called `name`.
struct With<'a, F: FnMut(&mut Param<f64>)> {
    name: &'a str,
    f: F,
    found: bool,
}

impl<F: FnMut(&mut Param<f64>)> ParamVisitor<f64> for With<'_, F> {
    fn param(&mut self, name: &str, p: &mut Param<f64>) {
        if name == self.name {
            (self.f)(p);
            self.found = true;
        }
    }
}

fn with_param<F: FnMut(&mut Param<f64>)>(net: &mut Colorizer<f64>, name: &str, f: F) {
    let mut w = With { name, f, found: false };
    net.visit(&mut w);
    assert!(w.found, "no tensor {name}");
}

struct Randomize<'a>(&'a mut ChaCha8Rng);
impl ParamVisitor<f64> for Randomize<'_> {
    fn param(&mut self, _: &str, p: &mut Param<f64>) {
        p.value.iter_mut().for_each(|v| *v += self.0.gen_range(-0.3..0.3));
    }
}

struct Problem {
    input: Batch<f64>,
    lang: Vec<f64>,
    targets: Vec<LabelMap>,
    weights: Vec<f64>,
}

fn problem(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Problem {
    let n = 2;
    let mut input = Batch::zeros(1, n, cfg.input_size, cfg.input_size);
    input.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    let lang = (0..n * cfg.language_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out = cfg.output_size();
    let targets = (0..n)
        .map(|_| LabelMap {
            height: out,
            width: out,
            labels: (0..out * out).map(|_| rng.gen_range(0..cfg.num_labels as u32)).collect(),
        })
        .collect();
    let weights = (0..cfg.num_labels).map(|_| rng.gen_range(0.2..2.0)).collect();
    Problem { input, lang, targets, weights }
}

fn loss(net: &Colorizer<f64>, p: &Problem, lang: &[f64]) -> f64 {
    let fwd = net.forward(&p.input, Some(lang), Mode::Train).unwrap();
    let targets: Vec<&LabelMap> = p.targets.iter().collect();
    weighted_ce_batch(&fwd.logits, &targets, &p.weights).unwrap().0
}

/// Analytic parameter gradients plus the language-code gradient.
fn analytic(net: &mut Colorizer<f64>, p: &Problem) -> Vec<f64> {
    net.zero_grad();
    let fwd = net.forward(&p.input, Some(&p.lang), Mode::Train).unwrap();
    let targets: Vec<&LabelMap> = p.targets.iter().collect();
    let (_, d) = weighted_ce_batch(&fwd.logits, &targets, &p.weights).unwrap();
    net.backward(&fwd, Some(&p.lang), &d).unwrap().unwrap()
}

fn check_tensor(net: &mut Colorizer<f64>, p: &Problem, name: &str, max_entries: usize) -> f64 {
    let mut grad = Vec::new();
    let mut len = 0;
    with_param(net, name, |t| {
        grad = t.grad.clone();
        len = t.len();
    });
    assert!(grad.iter().any(|g| g.abs() > 1e-6), "{name}: gradient is identically zero");
    let stride = (len / max_entries).max(1);
    let mut worst: f64 = 0.0;
    for i in (0..len).step_by(stride) {
        let mut orig = 0.0;
        with_param(net, name, |t| {
            orig = t.value[i];
            t.value[i] = orig + STEP;
        });
        let up = loss(net, p, &p.lang);
        with_param(net, name, |t| t.value[i] = orig - STEP);
        let down = loss(net, p, &p.lang);
        with_param(net, name, |t| t.value[i] = orig);
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(grad[i], numeric));
    }
    worst
}

#[test]
fn film_network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = tiny(FusionMode::Film, 5);
    let mut net = Colorizer::<f64>::new(&cfg, 3).unwrap();
    net.visit(&mut Randomize(&mut rng));
    let p = problem(&cfg, &mut rng);
    let dlang = analytic(&mut net, &p);
    assert!(dlang.iter().any(|g| g.abs() > 1e-6));
    for name in ["block3.film.w_gamma", "block3.film.w_beta", "block8.film.w_gamma", "block2.conv1.weight", "block1.bn.gamma", "head.bias"] {
        let err = check_tensor(&mut net, &p, name, 24);
        assert!(err < TOLERANCE, "{name}: relative error {err:e}");
    }
    for i in 0..p.lang.len() {
        let mut l = p.lang.clone();
        l[i] += STEP;
        let up = loss(&net, &p, &l);
        l[i] -= 2.0 * STEP;
        let down = loss(&net, &p, &l);
        let err = rel_err(dlang[i], (up - down) / (2.0 * STEP));
        assert!(err < TOLERANCE, "h[{i}]: relative error {err:e}");
    }
}

#[test]
fn concat_network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = tiny(FusionMode::Concat, 5);
    let mut net = Colorizer::<f64>::new(&cfg, 5).unwrap();
    net.visit(&mut Randomize(&mut rng));
    let p = problem(&cfg, &mut rng);
    let dlang = analytic(&mut net, &p);
    assert!(dlang.iter().any(|g| g.abs() > 1e-6));
    for name in ["block2.conv1.weight", "block6.conv1.weight", "head.weight"] {
        let err = check_tensor(&mut net, &p, name, 30);
        assert!(err < TOLERANCE, "{name}: relative error {err:e}");
    }
    for i in 0..p.lang.len() {
        let mut l = p.lang.clone();
        l[i] += STEP;
        let up = loss(&net, &p, &l);
        l[i] -= 2.0 * STEP;
        let down = loss(&net, &p, &l);
        let err = rel_err(dlang[i], (up - down) / (2.0 * STEP));
        assert!(err < TOLERANCE, "h[{i}]: relative error {err:e}");
    }
}

#[test]
fn loss_gradient_is_weighted_softmax_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut logits = Batch::<f64>::zeros(7, 2, 2, 3);
    logits.data.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
    let targets: Vec<LabelMap> =
        (0..2).map(|_| LabelMap { height: 2, width: 3, labels: (0..6).map(|_| rng.gen_range(0..7)).collect() }).collect();
    let refs: Vec<&LabelMap> = targets.iter().collect();
    let weights: Vec<f64> = (0..7).map(|_| rng.gen_range(0.1..3.0)).collect();
    let (_, grad) = weighted_ce_batch(&logits, &refs, &weights).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..logits.data.len() {
        let mut l = logits.clone();
        l.data[i] += STEP;
        let up = weighted_ce_batch(&l, &refs, &weights).unwrap().0;
        l.data[i] -= 2.0 * STEP;
        let down = weighted_ce_batch(&l, &refs, &weights).unwrap().0;
        worst = worst.max(rel_err(grad.data[i], (up - down) / (2.0 * STEP)));
    }
    assert!(worst < TOLERANCE, "relative error {worst:e}");
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let vocab = build_vocab(&["red blue"], 1).unwrap();
    let q = QuantizerSpec { ab_min: -110.0, ab_max: 110.0, bins_per_axis: 2 };
    let mut cfg = tiny(FusionMode::Film, 4);
    cfg.language_dim = 8;
    let mut model = ColorizationModel::<f64>::new(&cfg, EncoderConfig { embed_dim: 3, hidden: 4 }, vocab, q, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    model.network.visit(&mut Randomize(&mut rng));
    let p = problem(&cfg, &mut rng);
    let captions = ["red blue", "blue red"];
    let loss_of = |m: &ColorizationModel<f64>| {
        let (fwd, enc) = {
            let ls = lightness_of(&p.input);
            let refs: Vec<_> = ls.iter().collect();
            m.forward(&refs, &captions, Mode::Train).unwrap()
        };
        let targets: Vec<&LabelMap> = p.targets.iter().collect();
        let out = weighted_ce_batch(&fwd.logits, &targets, &p.weights).unwrap();
        (fwd, enc.unwrap(), out)
    };
    model.zero_grad();
    let (fwd, enc, (_, d)) = loss_of(&model);
    let dl = model.network.backward(&fwd, Some(&enc.codes), &d).unwrap().unwrap();
    for (i, cache) in enc.caches.iter().enumerate() {
        model.encoder.backward(cache, &dl[i * 8..(i + 1) * 8]);
    }
    let mut worst: f64 = 0.0;
    for which in 0..4 {
        let (grad, len) = {
            let t = tensor(&mut model, which);
            (t.grad.clone(), t.len())
        };
        for i in (0..len).step_by((len / 12).max(1)) {
            let orig = tensor(&mut model, which).value[i];
            tensor(&mut model, which).value[i] = orig + STEP;
            let up = loss_of(&model).2 .0;
            tensor(&mut model, which).value[i] = orig - STEP;
            let down = loss_of(&model).2 .0;
            tensor(&mut model, which).value[i] = orig;
            worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * STEP)));
        }
    }
    assert!(worst < TOLERANCE, "relative error {worst:e}");
}

fn tensor(m: &mut ColorizationModel<f64>, which: usize) -> &mut Param<f64> {
    match which {
        0 => &mut m.encoder.embedding,
        1 => &mut m.encoder.forward_cell.w_ih,
        2 => &mut m.encoder.backward_cell.w_hh,
        _ => &mut m.encoder.forward_cell.bias,
    }
}

/// Inverts the `L/100 − 0.5` input normalization.
fn lightness_of(b: &Batch<f64>) -> Vec<lang2color::colorspace::LightnessMap> {
    (0..b.batch)
        .map(|n| {
            let start = b.index(0, n, 0, 0);
            lang2color::colorspace::LightnessMap {
                height: b.height,
                width: b.width,
                values: b.data[start..start + b.plane()].iter().map(|v| ((v + 0.5) * 100.0) as f32).collect(),
            }
        })
        .collect()
}
