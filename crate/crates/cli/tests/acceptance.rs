//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs the `dtm` binary for the end-to-end criteria.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use dtm_core::checkpoint;
use dtm_core::data::{self, GrayImage};
use dtm_core::longmem::{self, GruParams};
use dtm_core::mask::Mask;
use dtm_core::metrics::{self, BoundaryTolerance};
use dtm_core::numerics::Tensor;
use dtm_core::segnet::{self, ModelConfig};
use dtm_core::stgraph::{build_graph, gcf, normalize, GraphConfig, StGraph, TemporalMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dtm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtm"))
        .args(args)
        .output()
        .unwrap()
}

fn dtm_ok(args: &[&str]) -> Result<Output, String> {
    let out = dtm(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`dtm {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn toy_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/toy.conf")
        .display()
        .to_string()
}

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

fn random_graph_config(rng: &mut ChaCha8Rng, max_nodes: usize) -> GraphConfig {
    let odd = |rng: &mut ChaCha8Rng| 2 * rng.gen_range(0..=2) + 1;
    loop {
        let mut cfg = GraphConfig::new(
            rng.gen_range(0..=3),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        cfg.ws = odd(rng);
        cfg.hs = odd(rng);
        cfg.wt = odd(rng);
        cfg.ht = odd(rng);
        cfg.temporal_mode = if rng.gen_bool(0.5) {
            TemporalMode::Bidirectional
        } else {
            TemporalMode::DirectedNext
        };
        if cfg.node_count() <= max_nodes {
            return cfg;
        }
    }
}

fn degrees(g: &StGraph, values: &[f64]) -> Vec<f64> {
    (0..g.node_count())
        .map(|i| 1.0 + g.edge_range(i).map(|e| values[e]).sum::<f64>())
        .collect()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let out = dtm(&["gradcheck", "--seed", "0", "--eps", "1e-5", "--tol", "1e-4"]);
    let secs = start.elapsed().as_secs_f64();
    let line = String::from_utf8_lossy(&out.stdout).trim().to_string();
    ensure(out.status.success() && secs <= 60.0, line)
}

fn dense_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let cfg = random_graph_config(&mut rng, 200);
        let g = build_graph(&cfg).map_err(|e| e.to_string())?;
        let n = g.node_count();
        let values: Vec<f64> = (0..g.edge_count())
            .map(|_| rng.gen_range(0.01..1.0))
            .collect();
        let x = random(&mut rng, &[n, 3]);
        let sparse = gcf(&g, &normalize(&g, &values).unwrap(), &x).unwrap();
        let mut a = vec![vec![0.0; n]; n];
        for ((i, j), v) in g.edges().zip(&values) {
            a[i][j] = *v;
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1.0;
        }
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let dense = Tensor::from_fn(&[n, 3], |idx| {
            let (i, c) = (idx / 3, idx % 3);
            (0..n)
                .map(|j| a[i][j] / (deg[i] * deg[j]).sqrt() * x.at(&[j, c]))
                .sum()
        });
        worst = worst.max(sparse.max_abs_diff(&dense));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-10 && secs <= 30.0,
        format!("max abs diff {worst:.2e} over 100 graphs"),
    )
}

fn node_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = build_graph(&GraphConfig::new(2, 8, 8)).unwrap();
    let values: Vec<f64> = (0..g.edge_count())
        .map(|_| rng.gen_range(0.01..1.0))
        .collect();
    let x = random(&mut rng, &[g.node_count(), 4]);
    let out = gcf(&g, &normalize(&g, &values).unwrap(), &x).unwrap();
    let deg = degrees(&g, &values);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.gen_range(0..g.node_count());
        for c in 0..4 {
            let mut y = x.at(&[i, c]) / deg[i];
            for e in g.edge_range(i) {
                let j = g.col_indices()[e];
                y += values[e] / (deg[i] * deg[j]).sqrt() * x.at(&[j, c]);
            }
            worst = worst.max((y - out.at(&[i, c])).abs());
        }
    }
    ensure(
        worst <= 1e-12,
        format!("max abs diff {worst:.2e} at 20 nodes"),
    )
}

fn sparsity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let mut cfg = random_graph_config(&mut rng, 400);
        cfg.temporal_mode = TemporalMode::DirectedNext;
        let g = build_graph(&cfg).unwrap();
        let bound = cfg.node_count() * (cfg.ws * cfg.hs + cfg.wt * cfg.ht);
        if g.edge_count() > bound {
            return Err(format!("{} edges > {bound} for {cfg:?}", g.edge_count()));
        }
    }
    Ok("50 directed-next configs within N(ws·hs + wt·ht)".into())
}

fn convexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for draw in 0..1000 {
        let d = rng.gen_range(1..=8);
        let scale = [0.1, 1.0, 10.0][draw % 3];
        let x = random(&mut rng, &[d]).map(|v| v * scale);
        let h = random(&mut rng, &[d]).map(|v| v * scale);
        let params = GruParams {
            w: random(&mut rng, &[d, 2 * d]).map(|v| v * scale),
        };
        let out = longmem::sgru_step(&x, &h, &params).unwrap();
        for c in 0..d {
            let (a, b, v) = (x.data()[c], h.data()[c], out.data()[c]);
            if v < a.min(b) || v > a.max(b) {
                return Err(format!("draw {draw}: {v} outside [{a}, {b}]"));
            }
        }
        if longmem::sgru_step(&h, &h, &params).unwrap() != h {
            return Err(format!("draw {draw}: x = h is not a fixed point"));
        }
    }
    Ok("1000 draws inside [min(h,x), max(h,x)]; x = h fixed".into())
}

fn smoothing() -> Outcome {
    // Two blocks of a 3x8 grid, columns 0..3 and 5..8, with near-zero weight
    // on every edge that leaves a block.
    let mut cfg = GraphConfig::new(0, 8, 3);
    cfg.ws = 5;
    cfg.hs = 5;
    let g = build_graph(&cfg).unwrap();
    let cluster = |i: usize| match g.node_position(i).2 {
        c if c < 3 => Some(0),
        c if c >= 5 => Some(1),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let values: Vec<f64> = g
        .edges()
        .map(|(i, j)| match (cluster(i), cluster(j)) {
            (Some(a), Some(b)) if a == b => rng.gen_range(0.2..1.0),
            _ => 1e-300,
        })
        .collect();
    let members: Vec<usize> = (0..g.node_count())
        .filter(|&i| cluster(i).is_some())
        .collect();
    let spread = |t: &Tensor| {
        let (mut total, mut pairs) = (0.0, 0);
        for (a, &i) in members.iter().enumerate() {
            for &j in members[a + 1..]
                .iter()
                .filter(|&&j| cluster(j) == cluster(i))
            {
                total += (0..4)
                    .map(|c| (t.at(&[i, c]) - t.at(&[j, c])).powi(2))
                    .sum::<f64>()
                    .sqrt();
                pairs += 1;
            }
        }
        total / pairs as f64
    };
    let x = random(&mut rng, &[g.node_count(), 4]);
    let (before, after) = (
        spread(&x),
        spread(&gcf(&g, &normalize(&g, &values).unwrap(), &x).unwrap()),
    );
    ensure(
        after <= before,
        format!("intra-cluster distance {before:.4} -> {after:.4}"),
    )
}

fn block(r0: usize, c0: usize, size: usize) -> Mask {
    Mask::from_fn(10, 10, |r, c| {
        (r0..r0 + size).contains(&r) && (c0..c0 + size).contains(&c)
    })
}

fn metric_suite() -> Outcome {
    let a = block(1, 1, 2);
    let square = block(2, 2, 4);
    let shifted = block(2, 3, 4);
    let tabulated = [
        ("J identical", metrics::jaccard(&a, &a).unwrap(), 1.0),
        (
            "J disjoint",
            metrics::jaccard(&a, &block(5, 5, 2)).unwrap(),
            0.0,
        ),
        (
            "J two shared",
            metrics::jaccard(&a, &block(1, 2, 2)).unwrap(),
            2.0 / 6.0,
        ),
        (
            "J both empty",
            metrics::jaccard(&Mask::empty(4, 4), &Mask::empty(4, 4)).unwrap(),
            1.0,
        ),
        (
            "F identical",
            metrics::boundary_f(&square, &square, 3).unwrap(),
            1.0,
        ),
        (
            "F empty pred",
            metrics::boundary_f(&Mask::empty(10, 10), &square, 2).unwrap(),
            0.0,
        ),
        (
            "F shift tol 1",
            metrics::boundary_f(&shifted, &square, 1).unwrap(),
            1.0,
        ),
        (
            "F shift tol 0",
            metrics::boundary_f(&shifted, &square, 0).unwrap(),
            0.5,
        ),
    ];
    for (name, got, want) in tabulated {
        if got != want {
            return Err(format!("{name}: {got} != {want}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let p = rng.gen_range(0.1..0.9);
        let x = Mask::from_fn(w, h, |_, _| rng.gen_bool(p));
        let y = Mask::from_fn(w, h, |_, _| rng.gen_bool(p));
        if metrics::jaccard(&x, &y).unwrap() != metrics::jaccard(&y, &x).unwrap() {
            return Err("jaccard not symmetric".into());
        }
        let mut last = 0.0;
        for tol in 0..6 {
            if metrics::boundary_f(&x, &x, tol).unwrap() != 1.0 {
                return Err(format!("F(a, a, {tol}) != 1"));
            }
            let f = metrics::boundary_f(&x, &y, tol).unwrap();
            if f < last {
                return Err(format!("F decreased at tol {tol}"));
            }
            last = f;
        }
    }
    Ok(format!(
        "{} tabulated cases; 200 random pairs",
        tabulated.len()
    ))
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn bit_exact_io(tmp: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let img = GrayImage::new(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap();
        let path = tmp.join("img.pgm");
        data::write_pgm(&path, &img).map_err(|e| e.to_string())?;
        let back = data::read_pgm(&path).map_err(|e| e.to_string())?;
        if back != img || data::encode_pgm(&back) != fs::read(&path).unwrap() {
            return Err(format!("PGM {w}x{h} did not round-trip"));
        }
    }
    let params = segnet::init_params(&ModelConfig::default(), 8);
    let ckpt = tmp.join("init.ckpt");
    checkpoint::save(&ckpt, &params).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    if loaded != params || checkpoint::encode(&loaded) != fs::read(&ckpt).unwrap() {
        return Err("checkpoint did not round-trip".into());
    }

    let small = [
        "--set",
        "sequences=3",
        "--set",
        "frames=6",
        "--set",
        "width=32",
        "--set",
        "height=32",
    ];
    let (d1, d2) = (tmp.join("set1"), tmp.join("set2"));
    for d in [&d1, &d2] {
        let mut args = vec!["synth", "--out", d.to_str().unwrap()];
        args.extend(small);
        dtm_ok(&args)?;
    }
    if tree(&d1) != tree(&d2) {
        return Err("synthetic trees differ between reruns".into());
    }
    let model = ["--set", "d=8", "--set", "epochs=2", "--set", "clip_len=3"];
    let (c, p) = (tmp.join("io.ckpt"), tmp.join("io-pred"));
    let (ds, cs, ps) = (
        d1.to_str().unwrap(),
        c.to_str().unwrap(),
        p.to_str().unwrap(),
    );
    let mut args = vec!["train", "--data", ds, "--out", cs];
    args.extend(model);
    dtm_ok(&args)?;
    dtm_ok(&[
        "infer", "--data", ds, "--ckpt", cs, "--out", ps, "--set", "d=8",
    ])?;
    let mut reports = Vec::new();
    for i in 0..2 {
        let r = tmp.join(format!("io-{i}.csv"));
        dtm_ok(&[
            "eval",
            "--pred",
            ps,
            "--gt",
            ds,
            "--report",
            r.to_str().unwrap(),
        ])?;
        reports.push(fs::read(&r).unwrap());
    }
    let report =
        metrics::evaluate(&p, &d1, BoundaryTolerance::Pixels(1)).map_err(|e| e.to_string())?;
    let global = report.global();
    for (col, g) in global.iter().enumerate() {
        let mean = report
            .sequences
            .iter()
            .map(|s| s.columns()[col])
            .sum::<f64>()
            / report.sequences.len() as f64;
        if (mean - g).abs() > 1e-12 {
            return Err(format!("global column {col} is not the mean of sequences"));
        }
    }
    ensure(
        reports[0] == reports[1],
        "PGM x50, checkpoint, synth tree and eval CSV byte-identical".into(),
    )
}

struct RunResult {
    first_loss: f64,
    last_loss: f64,
    steps: usize,
    j_mean: f64,
}

/// Trains on `train`, segments `held_out` and scores it.
fn train_and_score(
    tmp: &Path,
    tag: &str,
    train: &Path,
    held_out: &Path,
    ablation: &[&str],
) -> Result<RunResult, String> {
    let cfg = toy_config();
    let ckpt = tmp.join(format!("{tag}.ckpt"));
    let pred = tmp.join(format!("{tag}-pred"));
    let report = tmp.join(format!("{tag}.csv"));
    let (ts, hs, cs, ps) = (
        train.to_str().unwrap(),
        held_out.to_str().unwrap(),
        ckpt.to_str().unwrap(),
        pred.to_str().unwrap(),
    );
    let mut args = vec!["train", "--config", &cfg, "--data", ts, "--out", cs];
    args.extend(ablation);
    let out = dtm_ok(&args)?;
    let log = String::from_utf8_lossy(&out.stdout);
    let losses: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    let steps: usize = String::from_utf8_lossy(&out.stderr)
        .split_whitespace()
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or("no step count on stderr")?;

    let mut args = vec![
        "infer", "--config", &cfg, "--data", hs, "--ckpt", cs, "--out", ps,
    ];
    args.extend(ablation);
    dtm_ok(&args)?;
    let out = dtm_ok(&[
        "eval",
        "--pred",
        ps,
        "--gt",
        hs,
        "--report",
        report.to_str().unwrap(),
    ])?;
    let text = String::from_utf8_lossy(&out.stdout);
    let global = text
        .lines()
        .find(|l| l.starts_with("GLOBAL,"))
        .ok_or("no GLOBAL row")?;
    let j_mean = global.split(',').nth(1).unwrap().parse().unwrap();
    Ok(RunResult {
        first_loss: losses[0],
        last_loss: *losses.last().unwrap(),
        steps,
        j_mean,
    })
}

fn synth(out: &Path, extra: &[&str]) -> Result<(), String> {
    let mut args = vec!["synth", "--out", out.to_str().unwrap()];
    args.extend(extra);
    dtm_ok(&args).map(|_| ())
}

fn toy_training(tmp: &Path) -> Outcome {
    let start = Instant::now();
    let (train, held) = (tmp.join("toy-train"), tmp.join("toy-held"));
    synth(&train, &[])?;
    synth(&held, &["--seed", "1"])?;
    let run = train_and_score(tmp, "toy", &train, &held, &[])?;
    let secs = start.elapsed().as_secs_f64();
    let ratio = run.last_loss / run.first_loss;
    ensure(
        ratio <= 0.5 && run.j_mean >= 0.70 && run.steps <= 300 && secs <= 600.0,
        format!(
            "loss ratio {ratio:.3}, held-out J {:.4}, {} steps",
            run.j_mean, run.steps
        ),
    )
}

fn ablation_direction(tmp: &Path) -> Outcome {
    let occluded = ["--set", "occluder_rate=1"];
    let (train, held) = (tmp.join("occ-train"), tmp.join("occ-held"));
    synth(&train, &occluded)?;
    synth(&held, &[occluded[0], occluded[1], "--seed", "1"])?;
    let full = train_and_score(tmp, "occ-full", &train, &held, &[])?;
    let no_long = train_and_score(tmp, "occ-nolong", &train, &held, &["--disable-long"])?;
    ensure(
        full.j_mean >= no_long.j_mean,
        format!(
            "full J {:.4} vs no long-term memory J {:.4}",
            full.j_mean, no_long.j_mean
        ),
    )
}

fn schedule(tmp: &Path) -> Outcome {
    let data = tmp.join("sched");
    synth(
        &data,
        &[
            "--set",
            "sequences=1",
            "--set",
            "frames=3",
            "--set",
            "width=32",
            "--set",
            "height=32",
        ],
    )?;
    let ckpt = tmp.join("sched.ckpt");
    let out = dtm_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ])?;
    let log = String::from_utf8_lossy(&out.stdout);
    let mut epochs = 0;
    for line in log.lines().skip(1) {
        let mut cols = line.split(',');
        let e: i32 = cols.next().unwrap().parse().unwrap();
        let lr: f64 = cols.next().unwrap().parse().unwrap();
        let want = 1e-4 * 0.95f64.powi(e);
        if (lr - want).abs() > 1e-15 {
            return Err(format!("epoch {e}: lr {lr:e} != {want:e}"));
        }
        epochs += 1;
    }
    ensure(
        epochs == 15,
        format!("{epochs} logged epochs match 1e-4·0.95^e"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("gradient oracle", Box::new(gradient_oracle)),
        ("graph filter dense oracle", Box::new(dense_oracle)),
        ("node form consistency", Box::new(node_form)),
        ("sparsity bound", Box::new(sparsity)),
        ("gated update convexity", Box::new(convexity)),
        ("smoothing", Box::new(smoothing)),
        ("metric suite", Box::new(metric_suite)),
        ("bit-exact I/O", Box::new(|| bit_exact_io(t))),
        ("toy training run", Box::new(|| toy_training(t))),
        ("ablation direction", Box::new(|| ablation_direction(t))),
        ("schedule fidelity", Box::new(|| schedule(t))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{elapsed:.1?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{elapsed:.1?}]", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
