use std::fs;
use std::path::{Path, PathBuf};

use genseg_core::engine::{evaluate, train, Networks, TrainConfig};
use genseg_core::gradcheck::{self, GradCheck, GRAD_TOLERANCE};
use genseg_core::metrics::{csv_row, read_csv, write_csv, EvalRecord, Split};
use genseg_core::synthdata::{gen_task, load_dataset, load_splits, save_dataset, Checkpoint, Dataset};

use crate::svg::{render, Series};
use crate::{
    Cli, CliError, Command, EvalArgs, GenDataArgs, GradcheckArgs, Level, PlotArgs, TrainArgs,
};

type Outcome = Result<(), CliError>;

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Plot(a) => plot(a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::usage(msg)
}

/// Refuses a non-empty output directory unless forced.
fn check_out_dir(dir: &Path, force: bool) -> Outcome {
    if dir.is_file() {
        return Err(usage(format!("{} is a file, expected a directory", dir.display())));
    }
    if !force && dir.is_dir() && fs::read_dir(dir)?.next().is_some() {
        return Err(usage(format!("{} is not empty (pass --force to write into it)", dir.display())));
    }
    Ok(())
}

fn foreground_fraction(ds: &Dataset<f64>) -> f64 {
    let m = ds.masks().data();
    m.iter().sum::<f64>() / m.len() as f64
}

fn gen_data(a: GenDataArgs) -> Outcome {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    if a.size < 8 || !a.size.is_power_of_two() {
        return Err(usage(format!("--size must be a power of two of at least 8, got {}", a.size)));
    }
    if let Some(sizes) = &a.split {
        if sizes.len() != 3 {
            return Err(usage(format!("--split takes three sizes (train,val,test), got {}", sizes.len())));
        }
        if sizes.iter().sum::<usize>() != a.n {
            return Err(usage(format!("--split sizes {sizes:?} do not sum to --n {}", a.n)));
        }
        if sizes[0] == 0 || sizes[1] == 0 {
            return Err(usage("--split needs at least one train and one val pair"));
        }
    }
    check_out_dir(&a.out, a.force)?;

    let ds = gen_task::<f64>(a.seed, a.n, a.size, a.difficulty)?;
    match &a.split {
        None => save_dataset(&a.out, &ds)?,
        Some(sizes) => {
            let mut start = 0;
            for (name, &len) in ["train", "val", "test"].iter().zip(sizes) {
                if len > 0 {
                    let idx: Vec<usize> = (start..start + len).collect();
                    save_dataset(a.out.join(name), &ds.subset(&idx, *name)?)?;
                }
                start += len;
            }
        }
    }
    println!(
        "wrote {} pairs of {}x{} ({} difficulty, seed {}) to {}; foreground fraction {:.4}",
        a.n,
        a.size,
        a.size,
        a.difficulty,
        a.seed,
        a.out.display(),
        foreground_fraction(&ds)
    );
    Ok(())
}

pub const TRAIN_OUTPUTS: [&str; 4] = ["metrics.csv", "best.ckpt", "final.ckpt", "resolved_config.txt"];

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    for pair in &a.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(d) = &a.data {
        cfg.data_dir = d.display().to_string();
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate()?;
    if cfg.data_dir.is_empty() {
        return Err(usage("no dataset given: pass --data or set data_dir"));
    }
    if cfg.out_dir.is_empty() {
        return Err(usage("no output directory given: pass --out or set out_dir"));
    }
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let cfg = resolve_config(&a)?;
    let out = PathBuf::from(&cfg.out_dir);
    if out.is_file() {
        return Err(usage(format!("{} is a file, expected a directory", out.display())));
    }
    if !a.force {
        if let Some(f) = TRAIN_OUTPUTS.iter().find(|f| out.join(f).exists()) {
            return Err(usage(format!("{} already exists (pass --force to replace it)", out.join(f).display())));
        }
    }
    let data = load_splits::<f64>(&cfg.data_dir, cfg.seed)?;
    let extent = data.train.extent();
    if extent != (cfg.img_size, cfg.img_size) {
        return Err(usage(format!(
            "dataset images are {}x{} but img_size is {}",
            extent.0, extent.1, cfg.img_size
        )));
    }

    fs::create_dir_all(&out)?;
    fs::write(out.join("resolved_config.txt"), cfg.resolved())?;
    let quiet = a.quiet;
    let outcome = train(&cfg, &data, &mut |r: &EvalRecord| {
        if !quiet {
            eprintln!("{}", csv_row(r));
        }
    })?;
    let mut csv = Vec::new();
    write_csv(&mut csv, &outcome.records)?;
    fs::write(out.join("metrics.csv"), csv)?;
    outcome.checkpoint(&cfg, outcome.best_params()).save(out.join("best.ckpt"))?;
    outcome.checkpoint(&cfg, &outcome.state.params).save(out.join("final.ckpt"))?;

    match &outcome.state.best {
        Some(best) => {
            print!("{} mode: best val dice {:.6} at iter {}", cfg.mode, best.dice, best.iter);
            match outcome.records.iter().find(|r| r.split == Split::Test) {
                Some(t) => println!("; test dice {:.6} jaccard {:.6}", t.dice, t.jaccard),
                None => println!(),
            }
        }
        None => println!("{} mode: no evaluation ran (iters = {})", cfg.mode, cfg.iters),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    if !a.ckpt.is_file() {
        return Err(usage(format!("no checkpoint at {}", a.ckpt.display())));
    }
    let ckpt = Checkpoint::<f64>::load(&a.ckpt)?;
    let cfg = TrainConfig::parse(&ckpt.config)?;
    let ds = load_dataset::<f64>(&a.data)?;
    if ds.extent() != (cfg.img_size, cfg.img_size) {
        return Err(usage(format!(
            "dataset images are {:?} but the checkpoint was trained on {}x{}",
            ds.extent(),
            cfg.img_size,
            cfg.img_size
        )));
    }
    let nets = Networks::new(cfg.model_config())?;
    nets.seg.layout().validate(&ckpt.s)?;
    let ev = evaluate(&nets, &ckpt.s, &ds)?;
    println!("dice {:.6} jaccard {:.6} loss_seg {:.6} n {}", ev.dice, ev.jaccard, ev.loss, ds.len());
    Ok(())
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "pass"
    } else {
        "FAIL"
    }
}

fn gradcheck_cmd(a: GradcheckArgs) -> Outcome {
    let passed = match a.level {
        Level::Grad => {
            if !a.overrides.is_empty() {
                return Err(usage("--set applies to --level hyper only"));
            }
            let mut checks: Vec<GradCheck> = gradcheck::op_checks(a.seed)?;
            checks.extend(gradcheck::network_checks(a.seed)?);
            for c in &checks {
                println!("{:<24} params {:>5}  max rel err {:.3e}  {}", c.name, c.params, c.max_rel_error, verdict(c.passed()));
            }
            let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
            let ok = checks.iter().all(GradCheck::passed);
            println!("grad: {} checks, worst max rel err {worst:.3e} (tolerance {GRAD_TOLERANCE:e}): {}", checks.len(), verdict(ok));
            ok
        }
        Level::Hvp => {
            if !a.overrides.is_empty() {
                return Err(usage("--set applies to --level hyper only"));
            }
            let c = gradcheck::hvp_check(a.seed, a.zero_direction)?;
            println!(
                "hvp: params {} |fd| {:.6e} |exact| {:.6e} cosine {:.6} ratio {:.6}: {}",
                c.params,
                c.fd_norm,
                c.exact_norm,
                c.cosine,
                c.ratio(),
                verdict(c.passed())
            );
            c.passed()
        }
        Level::Hyper => {
            let mut cfg = gradcheck::tiny_config();
            for pair in &a.overrides {
                cfg.apply_override(pair)?;
            }
            let c = gradcheck::hyper_check(&cfg, a.seed)?;
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!(
                "hyper: |oracle| {:.6e} |exact| {:.6e} |fd| {:.6e} cosine exact {:.6} fd {:.6}: {}",
                norm(&c.oracle),
                norm(&c.exact),
                norm(&c.fd),
                c.exact_cosine(),
                c.fd_cosine(),
                verdict(c.passed())
            );
            c.passed()
        }
    };
    if passed {
        Ok(())
    } else {
        Err(CliError::failure("gradcheck failed"))
    }
}

fn column(name: &str) -> Option<fn(&EvalRecord) -> f64> {
    Some(match name {
        "dice" => |r| r.dice,
        "jaccard" => |r| r.jaccard,
        "loss_seg" => |r| r.loss_seg,
        "loss_g" => |r| r.loss_g,
        "loss_d" => |r| r.loss_d,
        _ => return None,
    })
}

fn plot(a: PlotArgs) -> Outcome {
    let split = Split::parse(&a.split)
        .ok_or_else(|| usage(format!("unknown split {:?} (expected train, val or test)", a.split)))?;
    let mut columns = Vec::new();
    for name in &a.columns {
        let f = column(name).ok_or_else(|| {
            usage(format!("unknown metric {name:?} (expected dice, jaccard, loss_seg, loss_g or loss_d)"))
        })?;
        columns.push((name.as_str(), f));
    }
    if a.out.is_dir() {
        return Err(usage(format!("{} is a directory", a.out.display())));
    }
    if a.out.exists() && !a.force {
        return Err(usage(format!("{} already exists (pass --force to replace it)", a.out.display())));
    }
    let mut series = Vec::new();
    for path in &a.metrics {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let records =
            read_csv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for (name, f) in &columns {
            let label = match (a.metrics.len(), columns.len()) {
                (1, _) => name.to_string(),
                (_, 1) => path.display().to_string(),
                _ => format!("{} {name}", path.display()),
            };
            let points = records
                .iter()
                .filter(|r| r.split == split)
                .map(|r| (r.iter as f64, f(r)))
                .filter(|p| p.1.is_finite())
                .collect();
            series.push(Series { label, points });
        }
    }
    let names: Vec<&str> = columns.iter().map(|c| c.0).collect();
    let svg = render(&series, &format!("{} metrics", a.split), "iteration", &names.join(", "));
    fs::write(&a.out, svg)?;
    println!(
        "wrote {} series ({} points) to {}",
        series.len(),
        series.iter().map(|s| s.points.len()).sum::<usize>(),
        a.out.display()
    );
    Ok(())
}
