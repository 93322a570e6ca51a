//! Acceptance suite. Runs every criterion in order and prints one line per
//! criterion; exits non-zero when any fails.
//!
//! `ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use genseg_core::engine::{genseg_iteration, train, Batch, Mode, Networks, TrainConfig, TrainState};
use genseg_core::gradcheck::{self, tiny_config};
use genseg_core::metrics::{dice, jaccard, Split};
use genseg_core::models::{derive_architecture, Activation, GeneratorNet, ModelConfig};
use genseg_core::synthdata::{gen_task, DataSplits, Dataset, Difficulty};
use genseg_core::{augment, Tensor64};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Training protocol shared by criteria 5 to 7, on top of the defaults.
const PROTOCOL: &[&str] = &["iters=2000"];
const SEEDS: [u64; 3] = [0, 1, 2];
/// Data for seed `s` comes from generator seed `DATA_SEED + s`.
const DATA_SEED: u64 = 1000;
const SPLIT: (usize, usize, usize) = (20, 5, 200);
const SIZE: usize = 32;

/// Genseg over baseline, frozen after the pilot (see README).
const MARGIN_BASELINE: f64 = 0.03;
/// Genseg over separate.
const MARGIN_SEPARATE: f64 = 0.0;
/// Slack of the gamma plateau check.
const GAMMA_SLACK: f64 = 0.01;
const SEED_BUDGET: Duration = Duration::from_secs(30 * 60);

const PROP_CASES: u32 = 1000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Check = Box<dyn FnOnce(&mut Shared) -> Verdict>;

fn mins(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, Duration) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed())
}

fn gradient_suite() -> Verdict {
    let (checks, took) = timed(|| {
        let mut c = gradcheck::op_checks(0).unwrap();
        c.extend(gradcheck::network_checks(0).unwrap());
        c
    });
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let biggest = checks.iter().map(|c| c.params).max().unwrap_or(0);
    let pass = failed.is_empty() && biggest <= 2000 && took < Duration::from_secs(120);
    verdict(
        pass,
        format!(
            "{} checks (largest {biggest} params), worst max rel err {worst:.2e}, failed {failed:?}, {:.1}s",
            checks.len(),
            took.as_secs_f64()
        ),
    )
}

fn hvp_suite() -> Verdict {
    let (checks, took) = timed(|| (0..3).map(|s| gradcheck::hvp_check(s, false).unwrap()).collect::<Vec<_>>());
    let worst_cos = checks.iter().map(|c| c.cosine).fold(1.0, f64::min);
    let ratios: Vec<String> = checks.iter().map(|c| format!("{:.5}", c.ratio())).collect();
    let pass = checks.iter().all(|c| c.passed() && c.params <= 600) && took < Duration::from_secs(60);
    verdict(
        pass,
        format!(
            "{} random nets of {} params, min cosine {worst_cos:.6}, ratios [{}], {:.1}s",
            checks.len(),
            checks[0].params,
            ratios.join(", "),
            took.as_secs_f64()
        ),
    )
}

fn hypergradient_oracle() -> Verdict {
    let cfg = tiny_config();
    let (checks, took) = timed(|| (0..3).map(|s| gradcheck::hyper_check(&cfg, s).unwrap()).collect::<Vec<_>>());
    let exact = checks.iter().map(|c| c.exact_cosine()).fold(1.0, f64::min);
    let fd = checks.iter().map(|c| c.fd_cosine()).fold(1.0, f64::min);
    let pass = checks.iter().all(|c| c.passed()) && took < Duration::from_secs(300);
    verdict(
        pass,
        format!(
            "{} instances, min cosine exact {exact:.5} (>= 0.99), fd {fd:.5} (>= 0.95), {:.1}s",
            checks.len(),
            took.as_secs_f64()
        ),
    )
}

fn whole_batch(ds: &Dataset<f64>) -> Batch<f64> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (images, masks) = ds.batch(&idx).unwrap();
    Batch { images, masks }
}

fn zero_step_identity() -> Verdict {
    let frozen = |cfg: TrainConfig, size: usize, n: usize| -> bool {
        let cfg = TrainConfig { eta_g: 0.0, eta_h: 0.0, eta_s: 0.0, eta_a: 0.0, img_size: size, ..cfg };
        let nets = Networks::new(cfg.model_config()).unwrap();
        let data = gen_task::<f64>(7, n, size, Difficulty::Default).unwrap();
        let train_idx: Vec<usize> = (0..n - 2).collect();
        let real = whole_batch(&data.subset(&train_idx, "train").unwrap());
        let val = whole_batch(&data.subset(&[n - 2, n - 1], "val").unwrap());
        let mut state = TrainState::init(&nets, &cfg);
        let before = state.params.clone();
        genseg_iteration(&nets, &cfg, &mut state, &real, &val, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let p = &state.params;
        [(&p.g, &before.g), (&p.h, &before.h), (&p.s, &before.s), (&p.a, &before.a)]
            .iter()
            .all(|(x, y)| x.flatten().iter().zip(y.flatten()).all(|(a, b)| a.to_bits() == b.to_bits()))
    };
    let tiny = frozen(tiny_config(), 8, 6);
    let full = frozen(TrainConfig::default(), SIZE, 8);
    verdict(tiny && full, format!("tiny instance {}, protocol-size instance {}", ok(tiny), ok(full)))
}

fn ok(b: bool) -> &'static str {
    if b {
        "bit-identical"
    } else {
        "CHANGED"
    }
}

fn flat(bits: &[u8]) -> Tensor64 {
    Tensor64::new(vec![bits.len()], bits.iter().map(|&b| b as f64).collect()).unwrap()
}

fn metric_exactness() -> Verdict {
    let a = flat(&[1, 1, 1, 1, 0, 0, 0, 0]);
    let b = flat(&[0, 0, 1, 1, 1, 1, 0, 0]);
    let c = flat(&[0, 0, 0, 0, 0, 0, 1, 1]);
    let units = [
        dice(&a, &a).unwrap() == 1.0,
        jaccard(&a, &a).unwrap() == 1.0,
        dice(&a, &c).unwrap() == 0.0,
        jaccard(&a, &c).unwrap() == 0.0,
        dice(&a, &b).unwrap() == 0.5,
        jaccard(&a, &b).unwrap() == 1.0 / 3.0,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=256);
        let (pa, pb) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let x = Tensor64::from_fn(&[n], |_| rng.gen_bool(pa) as u8 as f64);
        let y = Tensor64::from_fn(&[n], |_| rng.gen_bool(pb) as u8 as f64);
        let (d, j) = (dice(&x, &y).unwrap(), jaccard(&x, &y).unwrap());
        worst = worst.max((d - 2.0 * j / (1.0 + j)).abs());
    }
    let passed = units.iter().filter(|&&u| u).count();
    verdict(
        passed == units.len() && worst <= 1e-12,
        format!("{passed}/{} unit cases exact, max |dice - 2j/(1+j)| {worst:.1e} over 1000 pairs", units.len()),
    )
}

/// Runs one `genseg` command in-process.
fn genseg(args: &[&str]) {
    let argv = std::iter::once("genseg").chain(args.iter().copied());
    if let Err(e) = genseg_cli::run_args(argv) {
        panic!("genseg {}: {e}", args.join(" "));
    }
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    genseg(&["gen-data", "--seed", "4", "--n", "10", "--size", "8", "--split", "6,2,2", "--out", &s(&data)]);
    let mut notes = Vec::new();
    let mut all = true;
    for mode in ["genseg", "separate", "baseline"] {
        let run_dir = tmp.path().join(mode);
        let run = || {
            genseg(&[
                "train", "--mode", mode, "--data", &s(&data), "--out", &s(&run_dir), "--force", "--quiet",
                "--set", "img_size=8", "--set", "enc_cells=1", "--set", "base_channels=2",
                "--set", "iters=80", "--set", "eta_s=0.5", "--set", "batch=3", "--set", "seed=11",
            ]);
            ["metrics.csv", "best.ckpt", "final.ckpt"].map(|f| fs::read(run_dir.join(f)).unwrap())
        };
        let first = run();
        let second = run();
        let same = first == second;
        all &= same;
        notes.push(format!("{mode} {}", if same { "identical" } else { "DIFFERENT" }));
    }
    verdict(all, format!("metrics.csv, best.ckpt, final.ckpt over two runs: {}", notes.join(", ")))
}

fn invariants() -> Verdict {
    let runner = || {
        let cfg = Config { cases: PROP_CASES, failure_persistence: None, ..Config::default() };
        TestRunner::new_with_rng(cfg, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
    };
    let mut notes = Vec::new();

    let binary = runner().run(
        &(any::<u64>(), 1usize..3, prop::sample::select(vec![6usize, 8, 16]), 0.0f64..1.0),
        |(seed, batch, size, density)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = Tensor64::from_fn(&[batch, 1, size, size], |_| rng.gen_bool(density) as u8 as f64);
            let ops = augment::random_sequence(&mut rng, &augment::AugmentKind::ALL, 4, size).unwrap();
            let out = augment::apply_sequence(&ops, &mask).unwrap();
            prop_assert_eq!(out.shape(), mask.shape());
            prop_assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0), "ops {:?}", ops);
            Ok(())
        },
    );
    notes.push(("binary preservation", binary.map_err(|e| e.to_string())));

    let flips = runner().run(&(any::<u64>(), 1usize..4, 1usize..12, 1usize..12), |(seed, b, h, w)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor64::from_fn(&[b, 1, h, w], |_| rng.gen_range(-1.0..1.0));
        for op in [augment::AugmentOp::FlipHorizontal, augment::AugmentOp::FlipVertical] {
            prop_assert_eq!(augment::apply_sequence(&[op, op], &x).unwrap(), x.clone());
        }
        Ok(())
    });
    notes.push(("flip involution", flips.map_err(|e| e.to_string())));

    let gen = GeneratorNet::new(ModelConfig {
        img_size: 16,
        img_channels: 1,
        enc_cells: 2,
        base_channels: 2,
        activation: Activation::Silu,
    })
    .unwrap();
    let (_, arch) = gen.init::<f64>(&mut ChaCha8Rng::seed_from_u64(0));
    let n = arch.numel();
    let cells = arch.len();
    // Dyadic logits and shifts keep every sum exact, so ties survive the shift.
    let shift = runner().run(
        &(prop::collection::vec(-160i32..160, n), prop::collection::vec(-1600i32..1600, cells)),
        |(logits, shifts)| {
            let a = arch.unflatten(&logits.iter().map(|&i| i as f64 / 16.0).collect::<Vec<_>>()).unwrap();
            let moved = a
                .with_tensors(a.tensors().zip(&shifts).map(|(t, &c)| t.add_scalar(c as f64 / 16.0)).collect())
                .unwrap();
            let pick = |p| derive_architecture(&gen, p).unwrap().into_iter().map(|c| c.index).collect::<Vec<_>>();
            prop_assert_eq!(pick(&a), pick(&moved));
            Ok(())
        },
    );
    notes.push(("derive_architecture shift invariance", shift.map_err(|e| e.to_string())));

    let pass = notes.iter().all(|(_, r)| r.is_ok());
    let detail = notes
        .iter()
        .map(|(name, r)| match r {
            Ok(()) => format!("{name} ok"),
            Err(e) => format!("{name} FAILED: {e}"),
        })
        .collect::<Vec<_>>()
        .join(", ");
    verdict(pass, format!("{PROP_CASES} cases each: {detail}"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Arm {
    GenSeg,
    Baseline,
    Separate,
    Gamma0,
    Gamma10,
}

impl Arm {
    fn label(self) -> &'static str {
        match self {
            Arm::GenSeg => "genseg",
            Arm::Baseline => "baseline",
            Arm::Separate => "separate",
            Arm::Gamma0 => "genseg gamma=0",
            Arm::Gamma10 => "genseg gamma=10",
        }
    }

    fn config(self, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        for pair in PROTOCOL {
            cfg.apply_override(pair).unwrap();
        }
        cfg.seed = seed;
        match self {
            Arm::GenSeg => {}
            Arm::Baseline => cfg.mode = Mode::Baseline,
            Arm::Separate => cfg.mode = Mode::Separate,
            Arm::Gamma0 => cfg.gamma = 0.0,
            Arm::Gamma10 => cfg.gamma = 10.0,
        }
        cfg
    }
}

fn protocol_data(seed: u64) -> DataSplits<f64> {
    let (tr, va, te) = SPLIT;
    let all = gen_task::<f64>(DATA_SEED + seed, tr + va + te, SIZE, Difficulty::Default).unwrap();
    let pick = |r: std::ops::Range<usize>, name: &str| all.subset(&r.collect::<Vec<_>>(), name).unwrap();
    DataSplits { train: pick(0..tr, "train"), val: pick(tr..tr + va, "val"), test: Some(pick(tr + va..tr + va + te, "test")) }
}

/// Test Dice per arm and seed, computed once and shared by criteria 5 to 7.
#[derive(Default)]
struct Shared {
    runs: Vec<(Arm, u64, f64, Duration)>,
}

impl Shared {
    fn ensure(&mut self, arms: &[Arm]) {
        for &seed in &SEEDS {
            let data = protocol_data(seed);
            for &arm in arms {
                if self.runs.iter().any(|r| r.0 == arm && r.1 == seed) {
                    continue;
                }
                let cfg = arm.config(seed);
                let (out, took) = timed(|| train(&cfg, &data, &mut |_| {}).unwrap());
                let test = out.records.iter().find(|r| r.split == Split::Test).unwrap();
                println!(
                    "    seed {seed} {:<16} test dice {:.4} (best val iter {}, {:.1} min)",
                    arm.label(),
                    test.dice,
                    test.iter,
                    mins(took)
                );
                self.runs.push((arm, seed, test.dice, took));
            }
        }
    }

    fn mean(&self, arm: Arm) -> f64 {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.0 == arm).map(|r| r.2).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn seed_time(&self, seed: u64, arms: &[Arm]) -> Duration {
        self.runs.iter().filter(|r| r.1 == seed && arms.contains(&r.0)).map(|r| r.3).sum()
    }
}

fn genseg_over_baseline(sh: &mut Shared) -> Verdict {
    let arms = [Arm::GenSeg, Arm::Baseline];
    sh.ensure(&arms);
    let (g, b) = (sh.mean(Arm::GenSeg), sh.mean(Arm::Baseline));
    let slowest = SEEDS.iter().map(|&s| sh.seed_time(s, &arms)).max().unwrap();
    verdict(
        g - b >= MARGIN_BASELINE && slowest < SEED_BUDGET,
        format!(
            "mean test dice genseg {g:.4} vs baseline {b:.4}, gain {:+.4} (need >= {MARGIN_BASELINE}), slowest seed {:.1} min",
            g - b,
            mins(slowest)
        ),
    )
}

fn genseg_over_separate(sh: &mut Shared) -> Verdict {
    sh.ensure(&[Arm::GenSeg, Arm::Separate]);
    let (g, s) = (sh.mean(Arm::GenSeg), sh.mean(Arm::Separate));
    verdict(
        g - s >= MARGIN_SEPARATE,
        format!("mean test dice genseg {g:.4} vs separate {s:.4}, gain {:+.4} (need >= {MARGIN_SEPARATE})", g - s),
    )
}

fn gamma_plateau(sh: &mut Shared) -> Verdict {
    sh.ensure(&[Arm::Gamma0, Arm::GenSeg, Arm::Gamma10]);
    let (z, one, ten) = (sh.mean(Arm::Gamma0), sh.mean(Arm::GenSeg), sh.mean(Arm::Gamma10));
    verdict(
        one >= z - GAMMA_SLACK && one >= ten - GAMMA_SLACK,
        format!("mean test dice gamma 0: {z:.4}, 1: {one:.4}, 10: {ten:.4} (gamma 1 must be >= each endpoint - {GAMMA_SLACK})"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().parse().expect("ACCEPTANCE_ONLY takes criterion numbers")).collect());
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "gradient suite", Box::new(|_| gradient_suite())),
        (2, "hvp suite", Box::new(|_| hvp_suite())),
        (3, "hypergradient oracle", Box::new(|_| hypergradient_oracle())),
        (4, "zero-step identity", Box::new(|_| zero_step_identity())),
        (5, "genseg beats baseline", Box::new(genseg_over_baseline)),
        (6, "genseg vs separate generation", Box::new(genseg_over_separate)),
        (7, "gamma plateau", Box::new(gamma_plateau)),
        (8, "metric exactness", Box::new(|_| metric_exactness())),
        (9, "determinism", Box::new(|_| determinism())),
        (10, "augmentation and architecture invariants", Box::new(|_| invariants())),
    ];
    let mut shared = Shared::default();
    let mut failures = 0;
    let mut ran = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let v = check(&mut shared);
        ran += 1;
        if !v.pass {
            failures += 1;
        }
        println!("criterion {n:>2} {} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
