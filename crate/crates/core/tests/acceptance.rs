//! Acceptance suite: one PASS/FAIL line per criterion, then a single assert.
//!
//! The report goes straight to stderr, so it shows up in plain `cargo test`
//! output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use iilab::config::RunConfig;
use iilab::data::{
    decode_tensor, encode_tensor, fd_sample, generate_synthetic, gs_sample, save_dataset, temporal_mean, FeatureSequence,
    SynthConfig,
};
use iilab::encoders::{EncoderConfig, EncoderKind, EncoderParams};
use iilab::experiments;
use iilab::gradcheck::run_grad_checks;
use iilab::losses::{ii_loss, inter_loss, intra_loss_modality, BoundEncoder, LossWeights, PairBatch};
use iilab::numerics::{Tape, Tensor};
use iilab::train::{RetrievalResult, Truth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let rows = run_grad_checks(None).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .ok_or("no checks ran")?;
    let composed: Vec<&str> = rows
        .iter()
        .filter(|r| r.name.starts_with("ii_loss"))
        .map(|r| r.name.as_str())
        .collect();
    let sizes_covered = ["N=2", "N=4", "N=8"].iter().all(|n| composed.iter().any(|c| c.contains(n)));
    check(
        rows.iter().all(|r| r.passed()) && sizes_covered && took < Duration::from_secs(60),
        format!(
            "{} checks, worst {} at {:.2e}, composed rows {}, {:.2}s",
            rows.len(),
            worst.name,
            worst.max_rel_error,
            composed.len(),
            took.as_secs_f64()
        ),
    )
}

fn scalar_of(tape: &Tape, id: iilab::numerics::NodeId) -> f64 {
    tape.value(id).item()
}

fn analytic_losses() -> Outcome {
    let w = LossWeights::default();
    let mut tape = Tape::new();

    let v = tape.constant(Tensor::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap()).unwrap();
    let m = tape.constant(Tensor::from_rows(&[vec![-4.0, 0.5, 0.1]]).unwrap()).unwrap();
    let t = tape.constant(Tensor::scalar(0.07)).unwrap();
    let single = inter_loss(&mut tape, v, m, t, &w).unwrap();
    let single = scalar_of(&tape, single);

    let e = Tensor::identity(2).unwrap();
    let v = tape.constant(e.clone()).unwrap();
    let m = tape.constant(e).unwrap();
    let t0 = tape.constant(Tensor::scalar(0.0)).unwrap();
    let pair = inter_loss(&mut tape, v, m, t0, &w).unwrap();
    let pair = scalar_of(&tape, pair);
    let expect_pair = -(1f64.exp() / (1f64.exp() + 1.0)).ln();

    // identity encoders on a random batch: post-encoder similarity equals the
    // pre-encoder one
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, steps, dim) = (5, 4, 3);
    let mut rand_t = |dims: &[usize]| {
        let len = dims.iter().product();
        Tensor::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), dims).unwrap()
    };
    let batch = PairBatch {
        video: rand_t(&[n, steps, dim]),
        music: rand_t(&[n, steps, dim]),
    };
    let cfg = EncoderConfig::new(EncoderKind::MeanpoolLinear, dim, 8, dim, 0);
    let params = EncoderParams::from_named(
        &cfg,
        vec![
            ("weight".into(), Tensor::identity(dim).unwrap()),
            ("bias".into(), Tensor::zeros(&[dim]).unwrap()),
        ],
    )
    .unwrap();
    let ids = params.bind(&mut tape, false).unwrap();
    let enc = BoundEncoder { cfg: &cfg, params: &ids };
    let nodes = ii_loss(&mut tape, &batch, enc, enc, t, &w).unwrap();
    let parts = nodes.values(&tape);
    let identity = parts.intra_v.abs().max(parts.intra_m.abs());

    let pre = tape.constant(Tensor::identity(2).unwrap()).unwrap();
    let post = tape.constant(Tensor::new(vec![1.0; 4], &[2, 2]).unwrap()).unwrap();
    let collapsed = intra_loss_modality(&mut tape, pre, post).unwrap();
    let collapsed = scalar_of(&tape, collapsed);

    check(
        single == 0.0
            && (pair - 0.313262).abs() <= 1e-6
            && (pair - expect_pair).abs() <= 1e-12
            && identity <= 1e-9
            && (collapsed - 0.292893).abs() <= 1e-6,
        format!("inter(N=1) {single}, inter(N=2) {pair:.9}, intra(identity) {identity:.1e}, intra(collapsed) {collapsed:.9}"),
    )
}

fn recomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let n = rng.random_range(2..=8);
        let steps = rng.random_range(1..=5);
        let (ev, em, d) = (rng.random_range(2..=6), rng.random_range(2..=6), rng.random_range(2..=5));
        let kind = [EncoderKind::MeanpoolLinear, EncoderKind::Mlp, EncoderKind::Attnpool][trial % 3];
        let w = LossWeights {
            alpha1: rng.random_range(0.0..1.0),
            alpha2: rng.random_range(0.0..1.0),
            beta1: rng.random_range(0.0..1.0),
            beta2: rng.random_range(0.0..1.0),
            gamma1: rng.random_range(0.0..2.0),
            gamma2: rng.random_range(0.0..10.0),
            ..LossWeights::default()
        };
        let mut rand_t = |dims: &[usize]| {
            let len = dims.iter().product();
            Tensor::new((0..len).map(|_| rng.random_range(-2.0..2.0)).collect(), dims).unwrap()
        };
        let batch = PairBatch {
            video: rand_t(&[n, steps, ev]),
            music: rand_t(&[n, steps, em]),
        };
        let vc = EncoderConfig::new(kind, ev, 6, d, trial as u64);
        let mc = EncoderConfig::new(kind, em, 6, d, trial as u64 + 500);
        let vp = iilab::encoders::init_params(&vc).unwrap();
        let mp = iilab::encoders::init_params(&mc).unwrap();
        let mut tape = Tape::new();
        let vi = vp.bind(&mut tape, true).unwrap();
        let mi = mp.bind(&mut tape, true).unwrap();
        let t = tape.constant(Tensor::scalar(rng.random_range(-1.0..2.0))).unwrap();
        let nodes = ii_loss(
            &mut tape,
            &batch,
            BoundEncoder { cfg: &vc, params: &vi },
            BoundEncoder { cfg: &mc, params: &mi },
            t,
            &w,
        )
        .map_err(|e| e.to_string())?;
        let p = nodes.values(&tape);
        let by_hand = 0.5 * (w.gamma1 * p.inter + w.gamma2 * (w.beta1 * p.intra_v + w.beta2 * p.intra_m));
        worst = worst.max((p.total - by_hand).abs());
    }
    check(worst <= 1e-12, format!("100 random batches, max |total - parts| = {worst:.1e}"))
}

fn mean_r1(csv: &str, key_cols: usize) -> BTreeMap<Vec<String>, f64> {
    let mut acc: BTreeMap<Vec<String>, (f64, usize)> = BTreeMap::new();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let r1 = header.iter().position(|h| *h == "r1").unwrap();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let key: Vec<String> = f[..key_cols].iter().map(|s| s.to_string()).collect();
        let e = acc.entry(key).or_insert((0.0, 0));
        e.0 += f[r1].parse::<f64>().unwrap();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, c))| (k, 100.0 * s / c as f64)).collect()
}

fn default_run(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.experiment.out_dir = dir.to_path_buf();
    cfg
}

fn gamma_trend() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_run(dir.path());
    let start = Instant::now();
    let path = experiments::cmd_sweep_gamma(&cfg).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let means = mean_r1(&fs::read_to_string(path).unwrap(), 1);
    let by_gamma: Vec<(f64, f64)> = {
        let mut v: Vec<(f64, f64)> = means.iter().map(|(k, r)| (k[0].parse().unwrap(), *r)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let r = |g: f64| by_gamma.iter().find(|(x, _)| *x == g).map(|p| p.1).unwrap();
    let strictly_decreasing = by_gamma.windows(2).all(|w| w[1].1 < w[0].1);
    let curve: Vec<String> = by_gamma.iter().map(|(g, r)| format!("{g}:{r:.2}")).collect();
    check(
        r(3.0) >= r(0.0) && !strictly_decreasing && took < Duration::from_secs(1800),
        format!("mean R@1 by gamma2 [{}], {:.0}s", curve.join(" "), took.as_secs_f64()),
    )
}

fn noise_trend() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_run(dir.path());
    let start = Instant::now();
    let path = experiments::cmd_noise_exp(&cfg).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let means = mean_r1(&fs::read_to_string(path).unwrap(), 2);
    let diff = |mode: &str| {
        let get = |v: &str| means[&vec![mode.to_string(), v.to_string()]];
        get("ii") - get("inter")
    };
    let (most, none) = (diff("most_noise"), diff("no_noise"));
    check(
        most >= 1.0 && none.abs() <= 1.0 && took < Duration::from_secs(1800),
        format!(
            "R@1(ii) - R@1(inter): most_noise {most:+.2}, no_noise {none:+.2} points, {:.0}s",
            took.as_secs_f64()
        ),
    )
}

fn batch_trend() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_run(dir.path());
    let path = experiments::cmd_sweep_batch(&cfg).map_err(|e| e.to_string())?;
    let means = mean_r1(&fs::read_to_string(path).unwrap(), 2);
    let lo = cfg.experiment.batch_list.iter().min().unwrap().to_string();
    let hi = cfg.experiment.batch_list.iter().max().unwrap().to_string();
    let drop = |v: &str| means[&vec![lo.clone(), v.to_string()]] - means[&vec![hi.clone(), v.to_string()]];
    let (inter, ii) = (drop("inter"), drop("ii"));
    check(
        ii < inter,
        format!("R@1 drop from batch {lo} to {hi}: inter {inter:.2}, ii {ii:.2} points"),
    )
}

fn seq(rows: &[&[f64]]) -> FeatureSequence {
    FeatureSequence::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn sampling_exactness() -> Outcome {
    let mut fails = Vec::new();
    let frames: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, -(i as f64)]).collect();
    let ten = FeatureSequence::from_rows(&frames).unwrap();

    let mut expect = |name: &str, got: Tensor, want: Vec<Vec<f64>>| {
        if got != Tensor::from_rows(&want).unwrap() {
            fails.push(name.to_string());
        }
    };
    expect("gs L=t", gs_sample(&ten, 10).unwrap(), frames.clone());
    expect(
        "gs halves",
        gs_sample(&seq(&[&[1., 2.], &[3., 4.], &[5., 6.], &[7., 8.]]), 2).unwrap(),
        vec![vec![2., 3.], vec![6., 7.]],
    );
    expect(
        "gs duplication",
        gs_sample(&seq(&[&[1.], &[2.]]), 4).unwrap(),
        vec![vec![1.], vec![1.], vec![2.], vec![2.]],
    );
    expect("fd center", fd_sample(&ten, 4).unwrap(), frames[3..7].to_vec());
    expect("fd L=w", fd_sample(&ten, 10).unwrap(), frames.clone());
    expect(
        "fd padding",
        fd_sample(&seq(&[&[1., 10.], &[2., 20.]]), 4).unwrap(),
        vec![vec![1., 10.], vec![1., 10.], vec![2., 20.], vec![2., 20.]],
    );
    let constant = seq(&[&[0.5, -3.0][..]; 7]);
    expect("gs constant", gs_sample(&constant, 3).unwrap(), vec![vec![0.5, -3.0]; 3]);
    expect("fd constant", fd_sample(&constant, 11).unwrap(), vec![vec![0.5, -3.0]; 11]);
    if temporal_mean(&seq(&[&[1., 2.], &[3., 4.]])) != vec![2., 3.] {
        fails.push("temporal mean".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let t = rng.random_range(1..=8);
        let l = t * rng.random_range(1..=6);
        let e = rng.random_range(1..=5);
        let rows: Vec<Vec<f64>> = (0..l).map(|_| (0..e).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let s = FeatureSequence::from_rows(&rows).unwrap();
        let g = gs_sample(&s, t).unwrap();
        let clip_mean = iilab::data::temporal_mean_of(&g);
        for (a, b) in clip_mean.iter().zip(temporal_mean(&s)) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-12 {
        fails.push(format!("equal-division mean off by {worst:.1e}"));
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            format!("9 worked examples exact, equal-division mean within {worst:.1e} over 500 draws")
        } else {
            format!("failed: {}", fails.join(", "))
        },
    )
}

fn recall_oracle() -> Outcome {
    let mut fails = Vec::new();
    // query i's partner i ranks 1st, 2nd, 3rd respectively
    let s3 = Tensor::from_rows(&[vec![0.9, 0.1, 0.0], vec![0.8, 0.5, 0.1], vec![0.7, 0.6, 0.2]]).unwrap();
    let r3 = RetrievalResult::from_similarity(&s3).unwrap();
    let pair3 = [0, 1, 2];
    let got3: Vec<f64> = (1..=3).map(|k| r3.recall(Truth::Pair(&pair3), k).unwrap()).collect();
    if got3 != vec![1.0 / 3.0, 2.0 / 3.0, 1.0] {
        fails.push(format!("3x3 {got3:?}"));
    }

    // ties resolved by ascending candidate index; partners permuted
    let s4 = Tensor::from_rows(&[
        vec![0.5, 0.5, 0.1, 0.0],
        vec![0.2, 0.9, 0.9, 0.3],
        vec![0.4, 0.4, 0.4, 0.4],
        vec![0.0, 0.1, 0.2, 0.3],
    ])
    .unwrap();
    let r4 = RetrievalResult::from_similarity(&s4).unwrap();
    // partner ranks: q0 -> 1 (2nd, tie loses to 0), q1 -> 2 (2nd, tie loses to 1),
    // q2 -> 0 (1st, tie wins), q3 -> 3 (1st)
    let pair4 = [1, 2, 0, 3];
    let got4: Vec<f64> = (1..=4).map(|k| r4.recall(Truth::Pair(&pair4), k).unwrap()).collect();
    if got4 != vec![0.5, 1.0, 1.0, 1.0] {
        fails.push(format!("4x4 pair {got4:?}"));
    }
    let labels_q = [0, 1, 2, 1];
    let labels_c = [1, 2, 0, 1];
    // q0 (cat 0) needs c2: rank 3; q1 (cat 1) top is c1 (cat 2), then c2 (cat 0), c3 (cat 1): rank 3;
    // q2 (cat 2) top is c0 (cat 1), then c1 (cat 2): rank 2; q3 (cat 1) top c3 (cat 1): rank 1
    let got4c: Vec<f64> = (1..=4)
        .map(|k| {
            r4.recall(
                Truth::Category {
                    query: &labels_q,
                    corpus: &labels_c,
                },
                k,
            )
            .unwrap()
        })
        .collect();
    if got4c != vec![0.25, 0.5, 1.0, 1.0] {
        fails.push(format!("4x4 category {got4c:?}"));
    }
    if r4.recall(Truth::Pair(&pair4), 0).is_ok() || r4.recall(Truth::Pair(&pair4), 5).is_ok() {
        fails.push("k out of range accepted".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let q = rng.random_range(1..=12);
        let m = rng.random_range(1..=12);
        let data: Vec<f64> = (0..q * m).map(|_| (rng.random_range(-4..=4) as f64) / 4.0).collect();
        let r = RetrievalResult::from_similarity(&Tensor::new(data, &[q, m]).unwrap()).unwrap();
        let pairs: Vec<usize> = (0..q).map(|_| rng.random_range(0..m)).collect();
        let lq: Vec<u32> = (0..q).map(|_| rng.random_range(0..3)).collect();
        let lc: Vec<u32> = (0..m).map(|_| rng.random_range(0..3)).collect();
        for truth in [Truth::Pair(&pairs), Truth::Category { query: &lq, corpus: &lc }] {
            let rs: Vec<f64> = (1..=m).map(|k| r.recall(truth, k).unwrap()).collect();
            if rs.windows(2).any(|w| w[1] < w[0]) {
                violations += 1;
            }
            if matches!(truth, Truth::Pair(_)) && rs[m - 1] != 1.0 {
                violations += 1;
            }
        }
    }
    if violations > 0 {
        fails.push(format!("{violations} monotonicity violations"));
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            "3x3 and 4x4 fixtures exact, R@k nondecreasing on 1000 random instances".into()
        } else {
            format!("failed: {}", fails.join(", "))
        },
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism_io() -> Outcome {
    let mut fails = Vec::new();
    let synth = SynthConfig {
        n_categories: 12,
        pairs_per_category: 6,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&generate_synthetic(&synth).unwrap(), a.path()).unwrap();
    save_dataset(&generate_synthetic(&synth).unwrap(), b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    if fa != fb || fa.len() != 2 * 72 + 1 {
        fails.push(format!("dataset files differ ({} vs {})", fa.len(), fb.len()));
    }

    let mut csvs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = default_run(dir.path());
        cfg.synth = synth.clone();
        cfg.data.test_pairs_per_category = 2;
        cfg.train.epochs = 2;
        cfg.train.batch_n = 12;
        cfg.experiment.gamma2_list = vec![0.0, 3.0];
        let mut texts = Vec::new();
        experiments::cmd_train(&cfg).unwrap();
        texts.push(fs::read(dir.path().join(experiments::METRICS_CSV)).unwrap());
        texts.push(fs::read(experiments::cmd_sweep_gamma(&cfg).unwrap()).unwrap());
        csvs.push(texts);
    }
    if csvs[0] != csvs[1] {
        fails.push("CSV outputs differ between identical runs".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bad = 0;
    for _ in 0..200 {
        let rank = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=6)).collect();
        let len = dims.iter().product();
        let vals: Vec<f64> = (0..len)
            .map(|_| f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff) as f64)
            .collect();
        let t = Tensor::new(vals, &dims).unwrap();
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        if back.dims() != t.dims() || back.data().iter().zip(t.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            bad += 1;
        }
    }
    if bad > 0 {
        fails.push(format!("{bad} tensor round trips not bit-exact"));
    }
    check(
        fails.is_empty(),
        if fails.is_empty() {
            format!("{} dataset files and 2 CSVs byte-identical across runs, 200 tensor round trips bit-exact", fa.len())
        } else {
            format!("failed: {}", fails.join(", "))
        },
    )
}

/// Writes to the process stderr handle directly so the report shows up
/// without `--nocapture`.
fn report(line: &str) {
    use std::io::Write;
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("analytic loss values", analytic_losses),
        ("total recomposes from parts", recomposition),
        ("gamma2 sweep trend", gamma_trend),
        ("noise experiment trend", noise_trend),
        ("batch sweep trend", batch_trend),
        ("sampling exactness", sampling_exactness),
        ("recall@k oracle", recall_oracle),
        ("determinism and io", determinism_io),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => report(&format!("criterion {}: PASS {name}: {msg} [{secs:.1}s]", i + 1)),
            Err(msg) => {
                report(&format!("criterion {}: FAIL {name}: {msg} [{secs:.1}s]", i + 1));
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
