//! Acceptance criteria A1 to A10, one `A# PASS` or `A# FAIL` line each.
//!
//! Pass criterion names (`A3 A7`) as arguments to run a subset. A9 trains
//! ten desk-scale runs plus the tuning probes and takes most of an hour on
//! one core; set `SEQWARM_SKIP_A9=1` to report it as skipped instead.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqwarm::data::TokenMatrix;
use seqwarm::experiment::{compare, tune_experiment, CompareReport, Grid};
use seqwarm::gradcheck::{check, STEP};
use seqwarm::metrics::{instability_summary, pearson, read_metrics};
use seqwarm::model::{forward, init_parameters, loss_and_grads, loss_on_graph, ModelConfig, Parameters};
use seqwarm::optim::{adam_step, clip_global_norm, variance_stats};
use seqwarm::schedule::{lr_at, mixed_seqlen_at, seqlen_at};
use seqwarm::train::{run, SPIKE_THRESHOLDS};
use seqwarm::tuner::{duration_lattice, tune_duration, tune_seqlen_start};
use seqwarm::{
    AdamConfig, AdamState, ExperimentConfig, FluctuationCriterion, Graph, Method, MixedSeqlen,
    PacingFunction, ProbeOutcome, Tensor, Var,
};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn scrambled(config: &ModelConfig, seed: u64) -> Parameters {
    let p = init_parameters(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = p
        .names()
        .iter()
        .zip(p.tensors())
        .map(|(n, t)| (n.clone(), uniform(&mut rng, t.shape())))
        .collect();
    Parameters::from_named(config.clone(), named).unwrap()
}

fn model(n_layers: usize, hidden: usize, n_heads: usize, vocab: usize, max_seqlen: usize, tied: bool) -> ModelConfig {
    ModelConfig {
        n_layers,
        hidden,
        n_heads,
        vocab,
        max_seqlen,
        init_seed: 1,
        tied_output: tied,
    }
}

// A1

type OpCase = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph, &[Var]) -> seqwarm::Result<Var>>);

fn weighted(g: &mut Graph, y: Var, seed: u64) -> seqwarm::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.value(y).shape());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; weighted(g, y, 1) })),
        ("matmul_nt", vec![vec![3, 4], vec![5, 4]], Box::new(|g, v| { let y = g.matmul_nt(v[0], v[1])?; weighted(g, y, 2) })),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 3]], Box::new(|g, v| { let y = g.bmm(v[0], v[1])?; weighted(g, y, 3) })),
        ("bmm_nt", vec![vec![2, 3, 4], vec![2, 5, 4]], Box::new(|g, v| { let y = g.bmm_nt(v[0], v[1])?; weighted(g, y, 4) })),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| { let y = g.add(v[0], v[1])?; weighted(g, y, 5) })),
        ("add_bias", vec![vec![2, 3, 4], vec![4]], Box::new(|g, v| { let y = g.add_bias(v[0], v[1])?; weighted(g, y, 6) })),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weighted(g, y, 7) })),
        ("scale", vec![vec![5]], Box::new(|g, v| { let y = g.scale(v[0], -2.5); weighted(g, y, 8) })),
        ("sum", vec![vec![2, 3]], Box::new(|g, v| { let s = g.sum(v[0]); g.mul(s, s) })),
        ("softmax", vec![vec![2, 3, 4]], Box::new(|g, v| { let y = g.softmax(v[0], 1)?; weighted(g, y, 9) })),
        ("causal_softmax", vec![vec![2, 4, 4]], Box::new(|g, v| { let y = g.causal_softmax(v[0])?; weighted(g, y, 10) })),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|g, v| { let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted(g, y, 11) })),
        ("gelu", vec![vec![4, 5]], Box::new(|g, v| { let y = g.gelu(v[0]); weighted(g, y, 12) })),
        ("embedding", vec![vec![5, 3]], Box::new(|g, v| { let y = g.embedding(v[0], &[4, 0, 4, 2])?; weighted(g, y, 13) })),
        ("cross_entropy", vec![vec![4, 6]], Box::new(|g, v| { let s = g.scale(v[0], 3.0); g.cross_entropy(s, &[0, 5, 2, 2]) })),
        ("reshape", vec![vec![2, 6]], Box::new(|g, v| { let y = g.reshape(v[0], &[3, 4])?; weighted(g, y, 14) })),
        ("permute", vec![vec![2, 3, 4]], Box::new(|g, v| { let y = g.permute(v[0], &[2, 0, 1])?; weighted(g, y, 15) })),
        ("transpose", vec![vec![3, 5]], Box::new(|g, v| { let y = g.transpose(v[0])?; weighted(g, y, 16) })),
    ]
}

fn a1() -> Check {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, shapes, f) in op_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut rng, s)).collect();
        let r = check(&inputs, STEP, f).map_err(|e| format!("{name}: {e}"))?;
        checked += r.checked;
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, name);
        }
    }
    for (name, cfg) in [
        ("model 2L tied", model(2, 8, 2, 11, 8, true)),
        ("model 1L untied", model(1, 8, 4, 7, 8, false)),
    ] {
        let p = scrambled(&cfg, 99);
        let ids = (0..12).map(|i| (i * 7 % cfg.vocab) as u32).collect();
        let tokens = TokenMatrix::new(2, 6, ids).unwrap();
        let r = check(p.tensors(), STEP, |g, v| loss_on_graph(g, &cfg, v, &tokens)).map_err(|e| format!("{name}: {e}"))?;
        checked += r.checked;
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{checked} elements, max rel err {:.2e} ({}), {secs:.1}s", worst.0, worst.1);
    ensure(worst.0 < 1e-4 && secs < 60.0, || detail.clone())?;
    Ok(detail)
}

// A2

fn post(raw: u64, s: usize) -> usize {
    let raw = raw as usize;
    (raw - raw % 8).max(s.min(8)).max(2)
}

fn oracle_linear(t: u64, s: usize, e: usize, big_t: u64) -> usize {
    if t >= big_t { e } else { post(s as u64 + (e - s) as u64 * t / big_t, s) }
}

fn oracle_square(t: u64, s: usize, e: usize, big_t: u64) -> usize {
    if t >= big_t { e } else { post(s as u64 + ((e - s) as u128 * (t as u128).pow(2) / (big_t as u128).pow(2)) as u64, s) }
}

fn oracle_sqrt(t: u64, s: usize, e: usize, big_t: u64) -> usize {
    if t >= big_t { e } else { post(s as u64 + ((e - s) as u128 * (e - s) as u128 * t as u128 / big_t as u128).isqrt() as u64, s) }
}

fn a2() -> Check {
    let endpoints: [(usize, usize, u64); 6] = [(8, 1024, 1000), (8, 256, 150), (32, 256, 190), (64, 256, 37), (3, 64, 17), (16, 16, 5)];
    let mut points = 0;
    let mut bad = Vec::new();
    let mut tally = |name: &str, t: u64, got: usize, want: usize| {
        points += 1;
        if got != want && bad.len() < 5 {
            bad.push(format!("{name} t={t}: {got} vs {want}"));
        }
    };
    for (s, e, big_t) in endpoints {
        let lin = PacingFunction::linear(s, e, big_t);
        let sq = PacingFunction::root(s, e, big_t, 2.0);
        let rt = PacingFunction::root(s, e, big_t, 0.5);
        for t in 0..=2 * big_t {
            tally("linear", t, seqlen_at(t, &lin), oracle_linear(t, s, e, big_t));
            tally("root2", t, seqlen_at(t, &sq), oracle_square(t, s, e, big_t));
            tally("root0.5", t, seqlen_at(t, &rt), oracle_sqrt(t, s, e, big_t));
        }
    }
    for (l1, e, switch) in [(128usize, 1024usize, 500u64), (8, 256, 1), (16, 64, 40)] {
        let p = PacingFunction::two_stage(l1, e, switch);
        for t in 0..=2 * switch {
            tally("two_stage", t, seqlen_at(t, &p), if t < switch { l1 } else { e });
        }
    }
    let m = MixedSeqlen::new(1024);
    for t in 0..=2 * 1000 {
        tally("mixed", t, mixed_seqlen_at(t, &m), if t % 1000 < 900 { 128 } else { 1024 });
    }
    ensure(bad.is_empty(), || bad.join("; "))?;
    Ok(format!("{points} points, 0 mismatches"))
}

// A3

fn a3() -> Check {
    let cfg = model(2, 16, 4, 32, 24, true);
    let p = scrambled(&cfg, 3);
    let (b, l, v) = (3usize, 24usize, 32usize);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let ids: Vec<u32> = (0..b * l).map(|_| rng.random_range(0..v as u32)).collect();
    let base = TokenMatrix::new(b, l, ids.clone()).unwrap();
    let full = forward(&p, &base).unwrap();
    for k in 0..100 {
        let (row, pos) = (rng.random_range(0..b), rng.random_range(0..l));
        let mut changed = ids.clone();
        changed[row * l + pos] = (changed[row * l + pos] + rng.random_range(1..v as u32)) % v as u32;
        let out = forward(&p, &TokenMatrix::new(b, l, changed).unwrap()).unwrap();
        for r in 0..b {
            let keep = if r == row { pos } else { l };
            let range = r * l * v..(r * l + keep) * v;
            ensure(out.data()[range.clone()] == full.data()[range], || {
                format!("perturbation {k} at (row {row}, pos {pos}) changed row {r} before position {keep}")
            })?;
        }
    }
    for len in 1..=l {
        let short = forward(&p, &base.truncate(len)).unwrap();
        for r in 0..b {
            ensure(
                short.data()[r * len * v..(r + 1) * len * v] == full.data()[r * l * v..(r * l + len) * v],
                || format!("truncation to {len} differs in row {r}"),
            )?;
        }
    }
    Ok(format!("100 perturbations and {l} truncations bit-identical"))
}

// A4

fn small_config(method: serde_json::Value, peak: f64) -> ExperimentConfig {
    ExperimentConfig::from_value(serde_json::json!({
        "model": {"n_layers": 1, "hidden": 16, "n_heads": 2, "vocab": 256, "max_seqlen": 32, "init_seed": 3},
        "lr_schedule": {"peak": peak, "min_lr": 1e-4, "warmup": 300, "decay_horizon": 4000, "unit": "tokens"},
        "method": method,
        "batch_size": 3,
        "target_tokens": 4000,
        "seed": 11,
        "eval_every": 10,
        "val_fraction": 0.1,
        "corpus": {"kind": "synthetic", "seed": 4, "bytes": 8000}
    }))
    .unwrap()
}

fn slw_method() -> serde_json::Value {
    serde_json::json!({"kind": "slw", "pacing": {"shape": {"kind": "linear"}, "seqlen_start": 8, "seqlen_end": 32, "duration": 30}})
}

fn a4() -> Check {
    let dir = scratch("a4");
    let mut notes = Vec::new();
    for (name, method) in [("baseline", serde_json::json!({"kind": "baseline"})), ("slw", slw_method())] {
        let cfg = small_config(method, 2e-3);
        let summary = run(&cfg, &dir.join(name)).map_err(|e| e.to_string())?;
        let recs = read_metrics(&dir.join(name).join("metrics.csv")).map_err(|e| e.to_string())?;
        let mut total = 0u64;
        for r in &recs {
            total += (r.batch_size * r.seqlen_t) as u64;
            ensure(r.tokens_consumed == total, || format!("{name} step {}: tokens {} vs sum {total}", r.step, r.tokens_consumed))?;
            let lr = lr_at(r.tokens_consumed, &cfg.lr_schedule).map_err(|e| e.to_string())?;
            ensure(lr.to_bits() == r.lr.to_bits(), || format!("{name} step {}: logged lr {} vs {lr}", r.step, r.lr))?;
        }
        ensure(total == summary.tokens_consumed, || format!("{name}: sum {total} vs reported {}", summary.tokens_consumed))?;
        notes.push(format!("{name} {} steps / {total} tokens", recs.len()));
    }
    Ok(notes.join(", "))
}

// A5

fn global_norm(ts: &[Tensor]) -> f64 {
    ts.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt()
}

fn a5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut clipped = 0;
    for k in 0..1000 {
        let max_norm = 10f64.powf(rng.random_range(-2.0..2.0));
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let n = rng.random_range(1..5);
        let mut g: Vec<Tensor> = (0..n)
            .map(|_| {
                let len = rng.random_range(1..40);
                Tensor::from_fn([len], |_| rng.random_range(-1.0..1.0) * scale)
            })
            .collect();
        let names: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let out = clip_global_norm(&mut g, &names, max_norm).map_err(|e| e.to_string())?;
        clipped += out.clipped as usize;
        let post = global_norm(&g);
        ensure(post <= max_norm * (1.0 + 1e-12), || format!("set {k}: post norm {post} > {max_norm}"))?;
    }
    let width = 64;
    let mut p = vec![Tensor::zeros([width])];
    let mut st = AdamState::new(AdamConfig::default(), &p);
    let mut prev = 0.0;
    let steps = 2000;
    for step in 0..steps {
        let mut g = vec![Tensor::from_fn([width], |i| if i == 0 { 50.0 } else { 1e-3 * ((i + step) % 7) as f64 })];
        let out = clip_global_norm(&mut g, &["w".to_string()], 1.0).map_err(|e| e.to_string())?;
        ensure(out.clipped, || format!("step {step} not clipped"))?;
        adam_step(&mut p, &g, &mut st, 1e-3).map_err(|e| e.to_string())?;
        let vmax = variance_stats(&st).var_max;
        ensure(vmax > prev, || format!("var_max fell at step {step}: {vmax} <= {prev}"))?;
        prev = vmax;
    }
    Ok(format!("1000 sets ({clipped} clipped) within bound; var_max rose on all {steps} clipped steps to {prev:.3e}"))
}

// A6

fn covariance_r(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn a6() -> Check {
    let dir = scratch("a6");
    // A peak this high spikes often, so the counts are not trivially zero.
    let cfg = small_config(slw_method(), 3e-2);
    let summary = run(&cfg, &dir).map_err(|e| e.to_string())?;
    let mut rdr = csv::Reader::from_path(dir.join("metrics.csv")).map_err(|e| e.to_string())?;
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    let col = |n: &str| header.iter().position(|h| h == n).unwrap();
    let (li, ri) = (col("train_loss"), col("loss_ratio"));
    let mut min = f64::INFINITY;
    let mut ratios = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| e.to_string())?;
        let loss: f64 = row[li].parse().unwrap();
        let logged: f64 = row[ri].parse().unwrap();
        let want = if i == 0 { 1.0 } else { loss / min };
        ensure(logged == want, || format!("row {i}: logged ratio {logged} vs {want}"))?;
        min = min.min(loss);
        ratios.push(want);
    }
    let mut counts = Vec::new();
    for th in SPIKE_THRESHOLDS {
        let above = ratios.iter().filter(|&&r| r > th).count();
        let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let online = summary.instability.iter().find(|s| s.threshold == th).ok_or("missing threshold")?;
        ensure(
            online.count_above == above && online.max_ratio == max && online.steps == ratios.len() && online.fraction == above as f64 / ratios.len() as f64,
            || format!("threshold {th}: online {online:?} vs brute force {above}/{}", ratios.len()),
        )?;
        ensure(*online == instability_summary(&ratios, th).unwrap(), || format!("threshold {th}: summary mismatch"))?;
        counts.push(format!(">{th}: {above}"));
    }
    let cases: [(&[f64], &[f64]); 4] = [
        (&[1.0, 2.0, 3.5, 4.0, 7.0, 8.5], &[2.1, 3.9, 6.2, 7.7, 14.1, 17.3]),
        (&[0.3, -1.2, 2.2, 0.9, -0.4, 1.7, 0.0, -2.5], &[1.0, 0.4, -0.3, 2.2, -1.1, 0.5, 0.9, -0.2]),
        (&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]),
        (&[1.0, 2.0, 3.0, 4.0, 5.0], &[10.0, 8.0, 6.0, 4.0, 2.0]),
    ];
    let mut worst: f64 = 0.0;
    for (x, y) in cases {
        let r = pearson(x, y).map_err(|e| e.to_string())?.r;
        worst = worst.max((r - covariance_r(x, y)).abs());
    }
    let up = pearson(cases[2].0, cases[2].1).unwrap().r;
    let down = pearson(cases[3].0, cases[3].1).unwrap().r;
    ensure(worst < 1e-12 && (up - 1.0).abs() < 1e-12 && (down + 1.0).abs() < 1e-12, || {
        format!("pearson off by {worst:.2e}; r=+1 case {up}, r=-1 case {down}")
    })?;
    Ok(format!("{} rows, spikes {}; pearson max diff {worst:.1e}", ratios.len(), counts.join(", ")))
}

// A7

fn a7() -> Check {
    let dir = scratch("a7");
    let config = repo_root().join("configs/tiny.json");
    for out in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_seqwarm"))
            .arg("train")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(dir.join(out))
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || format!("train exited {:?}: {}", status.status, String::from_utf8_lossy(&status.stderr)))?;
    }
    for file in ["metrics.csv", "checkpoint.bin"] {
        let a = std::fs::read(dir.join("a").join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.join("b").join(file)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{file} differs between invocations"))?;
    }
    Ok("metrics.csv and checkpoint.bin byte-identical across two invocations".into())
}

// A8

fn mock_outcome(fluctuates: bool, crit: &FluctuationCriterion) -> ProbeOutcome {
    let series = if fluctuates { vec![9.0, 5.0, 7.0, 4.0] } else { vec![9.0, 5.0, 6.0, 4.0] };
    ProbeOutcome {
        series: vec![series],
        steps_per_series: crit.window_steps,
    }
}

fn a8() -> Check {
    let mut cases = 0;
    for g in [1u64, 5, 10] {
        let crit = FluctuationCriterion {
            factor: 1.3,
            window_steps: 6 * g,
            eval_every: g,
        };
        for (t_lo, points) in [(10u64, 1u64), (10, 2), (50, 21), (7, 64)] {
            let t_hi = t_lo + (points - 1) * g;
            let lattice = duration_lattice(t_lo, t_hi, g);
            let bound = (usize::BITS - lattice.len().leading_zeros()) as usize;
            for &star in &lattice {
                let mut probes = 0usize;
                let (found, trials) = tune_duration(
                    |t| {
                        probes += 1;
                        Ok((32, mock_outcome(t > star, &crit)))
                    },
                    t_lo,
                    t_hi,
                    &crit,
                )
                .map_err(|e| e.to_string())?;
                let steps: u64 = trials.iter().map(|t| t.cost_steps).sum();
                ensure(found == star, || format!("T*={star} on [{t_lo},{t_hi}] step {g}: found {found}"))?;
                ensure(probes <= bound, || format!("T*={star}: {probes} probes > bound {bound}"))?;
                ensure(steps <= probes as u64 * crit.window_steps, || format!("T*={star}: {steps} probe steps"))?;
                cases += 1;
            }
        }
        let candidates = [8usize, 16, 24, 32, 40, 48];
        for star in candidates {
            let (s, trials) = tune_seqlen_start(|s| Ok((100, mock_outcome(s < star, &crit))), &candidates, &crit)
                .map_err(|e| e.to_string())?;
            let steps: u64 = trials.iter().map(|t| t.cost_steps).sum();
            ensure(s == star, || format!("seqlen_s*={star}: found {s}"))?;
            ensure(steps <= trials.len() as u64 * crit.window_steps, || format!("seqlen_s*={star}: {steps} probe steps"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} mock boundaries recovered exactly within the probe bound"))
}

// A9

fn a9() -> Outcome {
    if std::env::var_os("SEQWARM_SKIP_A9").is_some() {
        return Outcome::Skip("SEQWARM_SKIP_A9 is set".into());
    }
    match a9_run() {
        Ok((true, detail)) => Outcome::Pass(detail),
        Ok((false, detail)) => Outcome::Fail(detail),
        Err(e) => Outcome::Fail(e),
    }
}

fn a9_run() -> Result<(bool, String), String> {
    let dir = scratch("a9");
    let configs = repo_root().join("configs/a9");
    let start = Instant::now();

    let tune_cfg = ExperimentConfig::load(&configs.join("tune.json"), &[]).map_err(|e| e.to_string())?;
    let tokens = tune_cfg.corpus.load_tokens().map_err(|e| e.to_string())?;
    let (result, tuned) = tune_experiment(&tune_cfg, &tokens, &dir.join("tune")).map_err(|e| e.to_string())?;
    println!(
        "  tuned seqlen_start={} duration={} after {} probes ({} steps)",
        result.chosen_seqlen_start,
        result.chosen_duration,
        result.trials.len(),
        result.total_probe_steps()
    );

    let (grid, mut runs) = Grid::load(&configs.join("grid.json")).map_err(|e| e.to_string())?;
    for r in runs.iter_mut().filter(|r| matches!(r.config.method, Method::Slw { .. })) {
        if r.config.method != tuned.method {
            println!("  note: shipped grid pacing differs from the tuner's; using the tuner's");
        }
        r.config.method = tuned.method.clone();
    }
    let report = compare(&runs, grid.threshold, &dir.join("grid"), |row| {
        println!(
            "  {} seed={} spikes={} final_val_ppl={}",
            row.label,
            row.seed,
            row.spikes,
            row.final_val_ppl.map_or("-".into(), |v| format!("{v:.4}"))
        )
    })
    .map_err(|e| e.to_string())?;
    print_table(&report);

    let early_spike_seeds = report
        .rows
        .iter()
        .filter(|r| r.label == "baseline")
        .filter(|r| {
            let path = dir.join("grid/runs/baseline").join(format!("seed{}", r.seed)).join("metrics.csv");
            read_metrics(&path).is_ok_and(|recs| recs.iter().any(|m| m.step < 2000 && m.loss_ratio > 1.2))
        })
        .count();
    let cell = |l: &str| report.cells.iter().find(|c| c.label == l).cloned();
    let (base, slw) = (cell("baseline").ok_or("no baseline cell")?, cell("slw").ok_or("no slw cell")?);
    let fewer = slw.median_spikes < base.median_spikes;
    let ppl_ok = matches!((slw.median_final_val_ppl, base.median_final_val_ppl), (Some(s), Some(b)) if s <= b);
    let detail = format!(
        "baseline spiked early in {early_spike_seeds}/5 seeds; median spikes slw {} vs baseline {}; median final val ppl slw {} vs baseline {}; {:.0} min",
        slw.median_spikes,
        base.median_spikes,
        fmt_ppl(slw.median_final_val_ppl),
        fmt_ppl(base.median_final_val_ppl),
        start.elapsed().as_secs_f64() / 60.0
    );
    Ok((early_spike_seeds >= 3 && fewer && ppl_ok, detail))
}

fn fmt_ppl(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| format!("{v:.4}"))
}

fn print_table(report: &CompareReport) {
    println!("  {:<10} {:>4} {:>10} {:>6} {:>8} {:>10} {:>12}", "label", "seed", "status", "steps", "spikes", "max_ratio", "final_ppl");
    for r in &report.rows {
        println!(
            "  {:<10} {:>4} {:>10} {:>6} {:>8} {:>10.3} {:>12}",
            r.label,
            r.seed,
            format!("{:?}", r.status),
            r.steps,
            r.spikes,
            r.max_loss_ratio,
            fmt_ppl(r.final_val_ppl)
        );
    }
}

// A10

fn a10() -> Check {
    // The desk-scale model: head dim 32 and batch 4 at both lengths.
    let cfg = model(4, 128, 4, 256, 256, true);
    let mut params = init_parameters(&cfg).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let names = params.names().to_vec();
    let mut step = |len: usize| -> Result<Duration, String> {
        let ids = (0..4 * len).map(|_| rng.random_range(0..256)).collect();
        let tokens = TokenMatrix::new(4, len, ids).unwrap();
        let start = Instant::now();
        let (_, mut grads) = loss_and_grads(&params, &tokens).map_err(|e| e.to_string())?;
        clip_global_norm(&mut grads, &names, 1.0).map_err(|e| e.to_string())?;
        adam_step(params.tensors_mut(), &grads, &mut adam, 1e-4).map_err(|e| e.to_string())?;
        Ok(start.elapsed())
    };
    step(128)?;
    step(256)?;
    let (mut short, mut long) = (Duration::ZERO, Duration::ZERO);
    let reps = 6;
    for _ in 0..reps {
        short += step(128)?;
        long += step(256)?;
    }
    let (short, long) = (short.as_secs_f64() / reps as f64, long.as_secs_f64() / reps as f64);
    let ratio = long / short;
    let detail = format!("mean step {:.0} ms at L=128, {:.0} ms at L=256, ratio {ratio:.2}", short * 1e3, long * 1e3);
    ensure(ratio > 2.0, || detail.clone())?;
    Ok(detail)
}

fn guarded(f: fn() -> Check) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(d)) => Outcome::Pass(d),
        Ok(Err(d)) => Outcome::Fail(d),
        Err(_) => Outcome::Fail("panicked".into()),
    }
}

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("A1", || guarded(a1)),
        ("A2", || guarded(a2)),
        ("A3", || guarded(a3)),
        ("A4", || guarded(a4)),
        ("A5", || guarded(a5)),
        ("A6", || guarded(a6)),
        ("A7", || guarded(a7)),
        ("A8", || guarded(a8)),
        ("A9", a9),
        ("A10", || guarded(a10)),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == name) {
            continue;
        }
        match f() {
            Outcome::Pass(d) => println!("{name} PASS: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("{name} FAIL: {d}");
            }
            Outcome::Skip(d) => println!("{name} SKIP: {d}"),
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
