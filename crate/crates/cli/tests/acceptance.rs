//! Release acceptance checks. Each test prints one PASS/FAIL line to stderr
//! (written directly, so it shows even when test output is captured).
//! Tests take a shared lock so the runtime bounds are measured one at a time.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use fragility_core::attack::{epsilon_grid, fgm_batch, robustness_sweep, AttackConfig};
use fragility_core::data::{
    batch_pixels, generate_synthetic_benchmark, LabelSet, LabeledImage, NormalizationStats, SplitConfig, SyntheticConfig,
};
use fragility_core::defense::{
    ensemble_predict, mini_adversarial_train, mitigation_stress_test, resolve_tally, AdvTrainConfig, Condition,
    EnsembleConfig, MitigationReport, SmoothingConfig, StressTestConfig,
};
use fragility_core::lingua::{
    compare_models, parse_label, run_drift_audit, sample_corpus, AuditOptions, HttpBackend, InferenceEndpoint,
    MockGenerateServer, MockScript, ParsedLabel, Register, SAMPLE_SCRIPT_LLAMA, SAMPLE_SCRIPT_NATLAS,
};
use fragility_core::model::{train, MicroDenseNet, ModelConfig, TrainConfig};
use fragility_core::rng::SplitMix64;
use fragility_core::stats::{wald_interval, wilson_interval};
use fragility_core::tensor::{Graph, Reduction, Tensor, Var};

type Outcome = Result<String, String>;

static SERIAL: Mutex<()> = Mutex::new(());

fn run_criterion(number: u32, title: &str, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(body))
        .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(std::io::stderr().lock(), "criterion {number:>2} [{tag}] {title} ({secs:.1}s): {detail}");
    if let Err(d) = outcome {
        panic!("criterion {number} failed: {d}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Trained {
    model: MicroDenseNet,
    train: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
}

/// The default synthetic run at seed 42, trained once per test binary.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let (train_set, test) = generate_synthetic_benchmark(&SplitConfig::default(), &SyntheticConfig::default()).unwrap();
        let norm = NormalizationStats::from_images(&train_set).unwrap();
        let init = MicroDenseNet::new(ModelConfig::default(), LabelSet::clinical(), norm, 42).unwrap();
        let (model, _) = train(&init, &train_set, &TrainConfig::default()).unwrap();
        Trained {
            model,
            train: train_set,
            test,
        }
    })
}

// ---------------------------------------------------------------- gradients

fn random_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()).unwrap()
}

/// Values in `[-1, 1]` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut SplitMix64, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform(gap, 1.0);
            (if rng.bernoulli(0.5) { m } else { -m }) as f32
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Norm-wise relative error between the reverse-mode gradient and a central
/// difference with step `h`, over every coordinate of every input.
fn gradient_error(inputs: &[Tensor], build: &Build<'_>, h: f32) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0] as f64
    };
    let (mut diff, mut a_norm, mut n_norm) = (0.0f64, 0.0f64, 0.0f64);
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let x = inputs[i].data()[j];
            let (xp, xm) = (x + h, x - h);
            plus[i] = with_value(&inputs[i], j, xp);
            minus[i] = with_value(&inputs[i], j, xm);
            let numeric = (eval(&plus) - eval(&minus)) / (xp as f64 - xm as f64);
            let a = analytic[j] as f64;
            diff += (a - numeric).powi(2);
            a_norm += a * a;
            n_norm += numeric * numeric;
        }
    }
    diff.sqrt() / a_norm.sqrt().max(n_norm.sqrt()).max(1e-12)
}

fn with_value(t: &Tensor, j: usize, v: f32) -> Tensor {
    let mut data = t.data().to_vec();
    data[j] = v;
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// `sum(out * w)` with a fixed random `w`, so every output element matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let w = random_tensor(&mut SplitMix64::derive(seed, 99), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Box<Build<'static>>)> {
    let mut r = SplitMix64::derive(seed, 1);
    let labels: Vec<usize> = (0..4).map(|_| r.below(3) as usize).collect();
    let labels_sum = labels.clone();
    vec![
        (
            "conv2d",
            vec![
                random_tensor(&mut r, &[2, 3, 5, 5], -1.0, 1.0),
                random_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5),
                random_tensor(&mut r, &[4], -0.5, 0.5),
            ],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "conv2d-strided",
            vec![
                random_tensor(&mut r, &[1, 2, 6, 6], -1.0, 1.0),
                random_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5),
                random_tensor(&mut r, &[3], -0.5, 0.5),
            ],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "concat",
            vec![
                random_tensor(&mut r, &[2, 2, 3, 3], -1.0, 1.0),
                random_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0),
            ],
            Box::new(move |g, v| {
                let y = g.concat_channels(v[0], v[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(&mut r, &[2, 3, 4, 4], 0.05)],
            Box::new(move |g, v| {
                let y = g.relu(v[0]);
                project(g, y, seed)
            }),
        ),
        (
            "avgpool2d",
            vec![random_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.avgpool2d(v[0], 2).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "global_avgpool",
            vec![random_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.global_avgpool(v[0]).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "flatten",
            vec![random_tensor(&mut r, &[2, 3, 2, 2], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.flatten(v[0]);
                project(g, y, seed)
            }),
        ),
        (
            "linear",
            vec![
                random_tensor(&mut r, &[3, 5], -1.0, 1.0),
                random_tensor(&mut r, &[4, 5], -1.0, 1.0),
                random_tensor(&mut r, &[4], -1.0, 1.0),
            ],
            Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], v[2]).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "normalize",
            vec![random_tensor(&mut r, &[2, 3, 3, 3], 0.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.normalize(v[0], &[0.485, 0.456, 0.406], &[0.229, 0.224, 0.225]).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "add",
            vec![
                random_tensor(&mut r, &[2, 6], -1.0, 1.0),
                random_tensor(&mut r, &[2, 6], -1.0, 1.0),
            ],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "mul",
            vec![
                random_tensor(&mut r, &[2, 6], -1.0, 1.0),
                random_tensor(&mut r, &[2, 6], -1.0, 1.0),
            ],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1]).unwrap();
                project(g, y, seed)
            }),
        ),
        (
            "sum",
            vec![random_tensor(&mut r, &[7], -1.0, 1.0)],
            Box::new(move |g, v| {
                let y = g.sum(v[0]);
                let two = g.constant(Tensor::scalar(0.5));
                g.mul(y, two).unwrap()
            }),
        ),
        (
            "cross_entropy-mean",
            vec![random_tensor(&mut r, &[4, 3], -2.0, 2.0)],
            Box::new(move |g, v| g.cross_entropy(v[0], &labels, Reduction::Mean).unwrap()),
        ),
        (
            "cross_entropy-sum",
            vec![random_tensor(&mut r, &[4, 3], -2.0, 2.0)],
            Box::new(move |g, v| g.cross_entropy(v[0], &labels_sum, Reduction::Sum).unwrap()),
        ),
    ]
}

/// Signs of every ReLU pre-activation, from a replica of the model's
/// forward pass built on its parameters. Also returns the replica's logits.
fn relu_pattern(model: &MicroDenseNet, pixels: &Tensor) -> (Vec<bool>, Vec<f32>) {
    let cfg = model.config();
    let norm = model.normalization();
    let mut g = Graph::new();
    let vars: Vec<Var> = model.params().iter().map(|p| g.constant(p.tensor.clone())).collect();
    let mut p = vars.into_iter();
    let mut signs = Vec::new();
    let conv_relu = |g: &mut Graph, x: Var, w: Var, b: Var, signs: &mut Vec<bool>| {
        let pre = g.conv2d(x, w, b, 1, 1).unwrap();
        signs.extend(g.value(pre).data().iter().map(|&v| v > 0.0));
        g.relu(pre)
    };
    let x = g.constant(pixels.clone());
    let x = g.normalize(x, &norm.mean, &norm.std).unwrap();
    let (w, b) = (p.next().unwrap(), p.next().unwrap());
    let x = conv_relu(&mut g, x, w, b, &mut signs);
    let mut features = g.avgpool2d(x, 2).unwrap();
    for block in 0..cfg.blocks {
        if block > 0 {
            features = g.avgpool2d(features, 2).unwrap();
        }
        for _ in 0..cfg.layers_per_block {
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            let y = conv_relu(&mut g, features, w, b, &mut signs);
            features = g.concat_channels(features, y).unwrap();
        }
    }
    let pooled = g.global_avgpool(features).unwrap();
    let flat = g.flatten(pooled);
    let (w, b) = (p.next().unwrap(), p.next().unwrap());
    let logits = g.linear(flat, w, b).unwrap();
    (signs, g.value(logits).data().to_vec())
}

/// Relative error of the model's input gradient and the number of
/// coordinates skipped because the `±h` step crosses a ReLU kink, where the
/// derivative does not exist and the central difference is meaningless.
fn model_input_error(seed: u64) -> Result<(f64, usize, usize), String> {
    let cfg = ModelConfig {
        image_size: 8,
        stem_channels: 4,
        growth: 3,
        ..ModelConfig::default()
    };
    let model = MicroDenseNet::new(cfg, LabelSet::clinical(), NormalizationStats::grayscale(), seed).unwrap();
    let mut r = SplitMix64::derive(seed, 2);
    let pixels = random_tensor(&mut r, &[2, 1, 8, 8], 0.05, 0.95);
    let labels: Vec<usize> = (0..2).map(|_| r.below(3) as usize).collect();
    let (base_signs, replica_logits) = relu_pattern(&model, &pixels);
    ensure(replica_logits == model.logits(&pixels).unwrap().data(), || "replica forward pass disagrees with the model".into())?;
    let (grad, _) = model.input_gradient(&pixels, &labels, Reduction::Sum).unwrap();
    let h = 1e-3f32;
    let loss = |t: &Tensor| model.losses(t, &labels).unwrap().iter().map(|&l| l as f64).sum::<f64>();
    let (mut diff, mut a_norm, mut n_norm) = (0.0f64, 0.0f64, 0.0f64);
    let mut kinks = 0;
    for j in 0..pixels.numel() {
        let x = pixels.data()[j];
        let (xp, xm) = (x + h, x - h);
        let (plus, minus) = (with_value(&pixels, j, xp), with_value(&pixels, j, xm));
        if relu_pattern(&model, &plus).0 != base_signs || relu_pattern(&model, &minus).0 != base_signs {
            kinks += 1;
            continue;
        }
        let numeric = (loss(&plus) - loss(&minus)) / (xp as f64 - xm as f64);
        let a = grad.data()[j] as f64;
        diff += (a - numeric).powi(2);
        a_norm += a * a;
        n_norm += numeric * numeric;
    }
    Ok((diff.sqrt() / a_norm.sqrt().max(n_norm.sqrt()).max(1e-12), kinks, pixels.numel()))
}

#[test]
fn criterion_01_gradient_correctness() {
    run_criterion(1, "gradient correctness", || {
        let start = Instant::now();
        let seeds = 20u64;
        let mut worst_primitive = (0.0f64, "");
        let mut worst_model = 0.0f64;
        let (mut checked, mut skipped) = (0usize, 0usize);
        for seed in 0..seeds {
            for (name, inputs, build) in primitive_cases(seed) {
                let err = gradient_error(&inputs, build.as_ref(), 1e-3);
                if err > worst_primitive.0 {
                    worst_primitive = (err, name);
                }
                ensure(err < 1e-3, || format!("{name} seed {seed}: relative error {err:.2e}"))?;
            }
            let (err, kinks, coords) = model_input_error(seed)?;
            worst_model = worst_model.max(err);
            skipped += kinks;
            checked += coords - kinks;
            ensure(err < 1e-2, || format!("model input gradient seed {seed}: relative error {err:.2e}"))?;
        }
        // Kinks are rare at random inputs; a check that skipped most pixels
        // would prove nothing.
        ensure(checked * 4 >= (checked + skipped) * 3, || format!("only {checked} of {} pixels away from kinks", checked + skipped))?;
        let took = start.elapsed();
        ensure(took < Duration::from_secs(30), || format!("took {took:?}"))?;
        Ok(format!(
            "{seeds} seeds, worst primitive {:.1e} ({}), worst end-to-end {worst_model:.1e} over {checked} pixels ({skipped} on ReLU kinks skipped)",
            worst_primitive.0, worst_primitive.1
        ))
    });
}

// ------------------------------------------------------------ epsilon grid

#[test]
fn criterion_02_epsilon_grid() {
    run_criterion(2, "epsilon grid exactness", || {
        let grid = epsilon_grid();
        ensure(grid.levels.len() == 15, || format!("{} levels", grid.levels.len()))?;
        for (i, &e) in grid.levels.iter().enumerate() {
            let want = 0.3 * i as f64 / 14.0;
            ensure((e - want).abs() <= 1e-15, || format!("level {i} = {e}, want {want}"))?;
        }
        let first = grid.levels[1];
        ensure((first - 0.3 / 14.0).abs() <= 1e-12, || format!("level 1 = {first}"))?;
        // The printed literal carries nine decimals, so it pins the value to 5e-10.
        ensure((first - 0.021428571).abs() <= 5e-10, || format!("level 1 = {first}"))?;
        let printed = [
            (1, "0.021"),
            (2, "0.043"),
            (3, "0.064"),
            (4, "0.086"),
            (5, "0.107"),
            (7, "0.150"),
            (10, "0.214"),
            (14, "0.300"),
        ];
        for (i, s) in printed {
            let got = format!("{:.3}", grid.levels[i]);
            ensure(got == s, || format!("level {i} prints {got}, want {s}"))?;
        }
        Ok(format!("15 levels, level 1 = {first:.12}"))
    });
}

// ------------------------------------------------------------- intervals

/// Textbook normal-approximation interval, written out independently.
fn wald_oracle(k: u64, n: u64) -> (f64, f64) {
    let p = k as f64 / n as f64;
    let half = 1.959964 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

#[test]
fn criterion_03_interval_arithmetic() {
    run_criterion(3, "interval arithmetic", || {
        let start = Instant::now();
        for (k, lo, hi) in [(93u64, 0.542, 0.698), (65, 0.354, 0.513)] {
            let ci = wald_interval(k, 150, 0.95).map_err(|e| e.to_string())?;
            let (olo, ohi) = wald_oracle(k, 150);
            ensure((ci.lower - olo).abs() < 1e-9 && (ci.upper - ohi).abs() < 1e-9, || {
                format!("wald({k},150) = [{}, {}] vs oracle [{olo}, {ohi}]", ci.lower, ci.upper)
            })?;
            ensure((ci.lower - lo).abs() <= 0.001 && (ci.upper - hi).abs() <= 0.001, || {
                format!("wald({k},150) = [{:.4}, {:.4}], want [{lo}, {hi}]", ci.lower, ci.upper)
            })?;
        }
        // Each trial draws its own true proportion, so the estimate is the
        // average coverage over p in (0, 1).
        let trials = 100_000u64;
        let n = 150u64;
        let mut rng = SplitMix64::new(42);
        let mut covered = 0u64;
        for _ in 0..trials {
            let p = rng.next_f64();
            let k = (0..n).filter(|_| rng.next_f64() < p).count() as u64;
            let ci = wilson_interval(k, n, 0.95).map_err(|e| e.to_string())?;
            if ci.lower <= p && p <= ci.upper {
                covered += 1;
            }
        }
        let coverage = covered as f64 / trials as f64;
        ensure((coverage - 0.95).abs() <= 0.01, || format!("wilson coverage {coverage:.4}"))?;
        let took = start.elapsed();
        ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
        Ok(format!("wald intervals match; wilson coverage {coverage:.4} over {trials} trials"))
    });
}

// ----------------------------------------------------------------- attack

#[test]
fn criterion_04_attack_contract() {
    run_criterion(4, "attack contract", || {
        let t = trained();
        let grid = epsilon_grid();
        for &eps in &grid.levels {
            let adv = fgm_batch(&t.model, &t.test, &AttackConfig::new(eps)).map_err(|e| e.to_string())?;
            ensure(adv.len() == 150, || format!("{} adversarial images", adv.len()))?;
            for (a, x) in adv.iter().zip(&t.test) {
                for (&pa, &px) in a.pixels.data().iter().zip(x.pixels.data()) {
                    ensure((pa as f64 - px as f64).abs() <= eps, || {
                        format!("{}: |{pa} - {px}| exceeds {eps}", x.source_id)
                    })?;
                    ensure((0.0..=1.0).contains(&pa), || format!("{}: pixel {pa} out of range", x.source_id))?;
                }
            }
        }
        let eps = grid.first_attack().unwrap();
        let adv = fgm_batch(&t.model, &t.test, &AttackConfig::new(eps)).map_err(|e| e.to_string())?;
        let y: Vec<usize> = t.test.iter().map(|i| i.label.index).collect();
        let clean = batch_pixels(&t.test.iter().collect::<Vec<_>>()).unwrap();
        let attacked = batch_pixels(&adv.iter().collect::<Vec<_>>()).unwrap();
        let l0 = t.model.losses(&clean, &y).unwrap();
        let l1 = t.model.losses(&attacked, &y).unwrap();
        let pred = t.model.predict(&t.test).unwrap();
        let correct: Vec<usize> = (0..y.len()).filter(|&i| pred.labels[i].index == y[i]).collect();
        let increased = correct.iter().filter(|&&i| l1[i] > l0[i]).count();
        let share = increased as f64 / correct.len() as f64;
        ensure(share >= 0.9, || format!("loss increased on {increased}/{}", correct.len()))?;
        Ok(format!(
            "budget and range hold at all 15 levels; loss increased on {increased}/{} correct images",
            correct.len()
        ))
    });
}

#[test]
fn criterion_05_decay_shape() {
    run_criterion(5, "qualitative decay", || {
        let t = trained();
        let start = Instant::now();
        let sweep = robustness_sweep(&t.model, &t.test, &epsilon_grid(), fragility_core::stats::IntervalMethod::Wilson, 0.95)
            .map_err(|e| e.to_string())?;
        let took = start.elapsed();
        let clean = sweep.rows[0].accuracy;
        let last = sweep.rows.last().unwrap().accuracy;
        ensure(clean >= 0.80, || format!("clean accuracy {clean:.4}"))?;
        ensure(last <= clean - 0.30, || format!("accuracy at 0.3 is {last:.4}, clean {clean:.4}"))?;
        for r in &sweep.rows[1..] {
            ensure(r.accuracy <= clean, || format!("accuracy {:.4} at {:.3} exceeds clean", r.accuracy, r.epsilon))?;
        }
        ensure(took < Duration::from_secs(600), || format!("sweep took {took:?}"))?;
        Ok(format!("clean {clean:.4}, at 0.3 {last:.4}, sweep {:.1}s", took.as_secs_f64()))
    });
}

// ---------------------------------------------------------------- defenses

/// Independent statement of the tie-break: most votes, then highest mean
/// probability, then lowest index.
fn tie_break_oracle(tally: &[usize], probs: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..tally.len() {
        let better = tally[k] > tally[best] || (tally[k] == tally[best] && probs[k] > probs[best]);
        if better {
            best = k;
        }
    }
    best
}

#[test]
fn criterion_06_defense_contracts() {
    run_criterion(6, "defense contracts", || {
        for sigma in [0.5, 1.0, 1.5, 2.0, 3.0] {
            let k = SmoothingConfig { sigma, truncate: 4.0 }.kernel().map_err(|e| e.to_string())?;
            let sum: f64 = k.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-6, || format!("sigma {sigma}: kernel sums to {sum}"))?;
        }

        let t = trained();
        let identity = EnsembleConfig {
            votes: 5,
            max_shift: 0,
            flip_allowed: false,
            seed: 42,
        };
        let plain = t.model.predict(&t.test[..30]).unwrap();
        for (i, img) in t.test[..30].iter().enumerate() {
            let e = ensemble_predict(&t.model, img, &identity).map_err(|e| e.to_string())?;
            ensure(e.label == plain.labels[i], || format!("{}: ensemble label differs", img.source_id))?;
            let same = e.mean_probabilities.iter().zip(&plain.probabilities[i]).all(|(&m, &p)| m == p as f64);
            ensure(same, || format!("{}: ensemble probabilities differ", img.source_id))?;
        }

        let mut rng = SplitMix64::new(42);
        for trial in 0..1000 {
            let k = 2 + rng.below(3) as usize;
            let tally: Vec<usize> = (0..k).map(|_| rng.below(3) as usize).collect();
            // Coarse probabilities so ties in the second key happen too.
            let probs: Vec<f64> = (0..k).map(|_| rng.below(4) as f64 / 4.0).collect();
            let got = resolve_tally(&tally, &probs);
            ensure(got == resolve_tally(&tally, &probs), || format!("trial {trial} not repeatable"))?;
            let want = tie_break_oracle(&tally, &probs);
            ensure(got == want, || format!("trial {trial}: tally {tally:?} probs {probs:?} gave {got}, want {want}"))?;
        }
        let seeded = EnsembleConfig::default();
        for img in &t.test[..10] {
            let a = ensemble_predict(&t.model, img, &seeded).map_err(|e| e.to_string())?;
            let b = ensemble_predict(&t.model, img, &seeded).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{}: seeded ensemble not repeatable", img.source_id))?;
        }

        let eps = epsilon_grid().first_attack().unwrap();
        let frozen = AdvTrainConfig {
            learning_rate: 0.0,
            ..AdvTrainConfig::default()
        };
        let (same, _) = mini_adversarial_train(&t.model, &t.train, &frozen, &AttackConfig::new(eps)).map_err(|e| e.to_string())?;
        let unchanged = same.params().iter().zip(t.model.params()).all(|(a, b)| a.tensor.data() == b.tensor.data());
        ensure(unchanged, || "lr = 0 changed the weights".into())?;

        let report = mitigation_stress_test(&t.model, &t.train, &t.test, &StressTestConfig::default()).map_err(|e| e.to_string())?;
        let undefended = report.row(Condition::Adversarial).unwrap().accuracy;
        let hardened = report.row(Condition::AdversarialTraining).unwrap().accuracy;
        ensure(hardened >= undefended, || {
            format!("kernel, ensemble and lr=0 checks hold, but adversarial training at epsilon {eps:.4} scores {hardened:.4} against {undefended:.4} undefended")
        })?;
        Ok(format!("adversarial accuracy {undefended:.4} undefended, {hardened:.4} after fine-tuning"))
    });
}

// ------------------------------------------------------------ report maths

#[test]
fn criterion_07_mitigation_arithmetic() {
    run_criterion(7, "mitigation report arithmetic", || {
        let report = MitigationReport::from_accuracies(
            0.3 / 14.0,
            &[
                (Condition::Clean, 0.893),
                (Condition::Adversarial, 0.613),
                (Condition::GaussianSmoothing, 0.347),
                (Condition::EnsembleVoting, 0.727),
            ],
        )
        .map_err(|e| e.to_string())?;
        let table = report.to_table();
        let csv = report.to_csv();
        for (c, pp) in [
            (Condition::Adversarial, "-28.0"),
            (Condition::GaussianSmoothing, "-54.6"),
            (Condition::EnsembleVoting, "-16.6"),
        ] {
            let row = report.row(c).unwrap();
            let want: f64 = pp.parse().unwrap();
            ensure((row.delta_pp - want).abs() < 1e-9, || format!("{}: delta {}", c.key(), row.delta_pp))?;
            ensure(table.contains(&format!("{pp}%")), || format!("table lacks {pp}%:\n{table}"))?;
            let line = csv.lines().find(|l| l.starts_with(c.key())).unwrap_or_default();
            ensure(line.split(',').nth(2) == Some(pp), || format!("csv row {line:?}"))?;
        }
        Ok("deltas -28.0, -54.6, -16.6 pp in table and CSV".into())
    });
}

// -------------------------------------------------------------- drift audit

#[test]
fn criterion_08_drift_audit() {
    run_criterion(8, "drift audit arithmetic", || {
        let start = Instant::now();
        let corpus = sample_corpus();
        let mut profiles = Vec::new();
        for (name, script) in [("llama3.1:8b", SAMPLE_SCRIPT_LLAMA), ("natlas:latest", SAMPLE_SCRIPT_NATLAS)] {
            let server = MockGenerateServer::start(&corpus, MockScript::from_json(script).unwrap()).map_err(|e| e.to_string())?;
            let backend = HttpBackend::new(InferenceEndpoint::new(server.url(), name)).map_err(|e| e.to_string())?;
            profiles.push(run_drift_audit(&backend, &corpus, &AuditOptions::default()).map_err(|e| e.to_string())?);
        }
        let expected = [
            ("llama3.1:8b", [80.0, 65.0, 60.0], [100.0, 85.0, 80.0]),
            ("natlas:latest", [85.0, 55.0, 75.0], [100.0, 50.0, 60.0]),
        ];
        for (p, (name, acc, cons)) in profiles.iter().zip(expected) {
            ensure(p.model_name == name, || format!("profile order {}", p.model_name))?;
            for (i, reg) in Register::ALL.iter().enumerate() {
                let s = p.summary(*reg);
                let a = format!("{:.1}", s.accuracy * 100.0);
                let c = format!("{:.0}", s.consistency * 100.0);
                ensure(a == format!("{:.1}", acc[i]), || format!("{name} {}: accuracy {a}", reg.key()))?;
                ensure(c == format!("{:.0}", cons[i]), || format!("{name} {}: consistency {c}", reg.key()))?;
            }
        }
        let cmp = compare_models(&profiles).map_err(|e| e.to_string())?;
        let drop = cmp.delta("natlas:latest", Register::NigerianPidgin).unwrap().drop_from_english_pp;
        ensure(format!("{drop:.1}") == "-30.0", || format!("natlas pidgin drop {drop}"))?;
        let took = start.elapsed();
        ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
        Ok(format!("both profiles match, natlas pidgin drop {drop:.1} pp"))
    });
}

// ------------------------------------------------------------------ parser

const NON_COVID_MENTIONS: &[&str] = &[
    "Non-COVID Pneumonia",
    "non-covid pneumonia",
    "NON-COVID PNEUMONIA",
    "nOn-CoViD pNeUmOnIa",
    "Non-COVID Pneumonia.",
    "Diagnosis: Non-COVID Pneumonia",
    "**Non-COVID Pneumonia**",
    "'Non-COVID Pneumonia'",
    "\"Non-COVID Pneumonia\"",
    "1. Non-COVID Pneumonia",
    "Final answer: Non-COVID Pneumonia",
    "The most likely diagnosis is Non-COVID Pneumonia.",
    "Answer: non-COVID pneumonia (bacterial)",
    "I think it's Non-COVID pneumonia",
    "Likely non-covid pneumonia given the lobar consolidation",
    "Non COVID Pneumonia",
    "Non-COVID-19 Pneumonia",
    "non-covid-19 pneumonia",
    "non covid-19 pneumonia",
    "Noncovid pneumonia",
    "NonCOVID Pneumonia",
    "Non\u{2011}COVID Pneumonia",
    "Non\u{2013}COVID Pneumonia",
    "Non-COVID   Pneumonia",
    "non-covid\npneumonia",
    "Label = Non-COVID Pneumonia; COVID-19 excluded",
    "COVID-19 is unlikely; Non-COVID Pneumonia",
    "Not COVID-19. Non-COVID Pneumonia.",
    "non-COVID pneumonia, not COVID-19",
    "Non-COVID Pneumonia (not Normal)",
    "Non-COVID Pneumonia\n\nReason: fever and productive cough.",
    "Pneumonia (non-COVID)",
    "Bacterial pneumonia, non-COVID",
    "community-acquired pneumonia",
    "pneumonia",
    "Diagnosis - Non-COVID Pneumonia",
    "NON-COVID-19 PNEUMONIA",
    "Category: non-covid pneumonia (COVID-19 test negative)",
];

const REFUSALS: &[&str] = &[
    "I cannot provide a diagnosis.",
    "As an AI language model, I am unable to give medical advice.",
    "Please consult a qualified physician.",
    "",
    "   ",
    "N/A",
    "I'm sorry, but I can't help with that.",
    "Insufficient information to determine.",
    "Unable to classify.",
    "Refused.",
    "The answer could be any of the options.",
    "Sorry, I don't know.",
];

#[test]
fn criterion_09_parser_safety() {
    run_criterion(9, "parser safety", || {
        let labels = LabelSet::clinical();
        let total = NON_COVID_MENTIONS.len() + REFUSALS.len();
        ensure(total == 50, || format!("corpus has {total} strings"))?;
        for s in NON_COVID_MENTIONS {
            let got = parse_label(s, &labels);
            ensure(got.name() != "COVID-19", || format!("{s:?} parsed as COVID-19"))?;
            ensure(got.name() == "Non-COVID Pneumonia", || format!("{s:?} parsed as {got}"))?;
        }
        for s in REFUSALS {
            let got = parse_label(s, &labels);
            ensure(got == ParsedLabel::Unparseable, || format!("refusal {s:?} parsed as {got}"))?;
        }
        Ok(format!(
            "{} mentions never read as COVID-19, {} refusals unparseable",
            NON_COVID_MENTIONS.len(),
            REFUSALS.len()
        ))
    });
}

// ------------------------------------------------------------- determinism

fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(path.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn audit_all(run_dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fragility-audit"))
        .args(["--log-level", "warn", "--timestamp", "2026-01-01T00:00:00Z", "--run-dir"])
        .arg(run_dir)
        .arg("audit-all")
        .env_remove("AUDIT_ENDPOINT_URL")
        .env_remove("AUDIT_MODEL_NAME")
        .env_remove("RUST_LOG")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("audit-all exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr))
    })
}

#[test]
fn criterion_10_end_to_end_determinism() {
    run_criterion(10, "end-to-end determinism", || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (a, b) = (tmp.path().join("first"), tmp.path().join("second"));
        audit_all(&a)?;
        audit_all(&b)?;
        let (fa, fb) = (artifacts(&a), artifacts(&b));
        ensure(fa.keys().eq(fb.keys()), || format!("file sets differ: {:?} vs {:?}", fa.keys(), fb.keys()))?;
        ensure(fa.len() >= 10, || format!("only {} artifacts", fa.len()))?;
        for (name, bytes) in &fa {
            ensure(&fb[name] == bytes, || format!("{} differs between runs", name.display()))?;
        }
        Ok(format!("{} CSV/JSON artifacts byte-identical", fa.len()))
    });
}
