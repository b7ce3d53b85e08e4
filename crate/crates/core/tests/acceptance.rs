//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N ... PASS|FAIL` line (written past the test harness's output
//! capture) and then asserts.
//!
//! cargo test --release --test acceptance -- --test-threads 1

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{bits, random_batch, segment, spread_model, toy_config};
use ktforget::bias::{folibi_slopes, BiasConfig, BiasKind};
use ktforget::cli::{cmd_preprocess, cmd_sweep, cmd_train, PreprocessRun, SweepRun, TrainRun};
use ktforget::data::{
    gen_synthetic, kfold_split, preprocess, write_csv, Batch, PreprocessOptions, Segment, SyntheticSpec,
};
use ktforget::model::{
    batch_loss, biased_attention, dump_attention, forward, gradient_check, init_params, param_count, AttnBias,
    ForwardOptions, KtModel, ModelConfig, Stack,
};
use ktforget::numerics::{GroupMap, Mask, Tape, Tensor};
use ktforget::train_eval::{acc_rmse_wacc, auc, run_fold, train, weighted_accuracy, FoldData, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} {name:<28} {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn weights_of(m: &KtModel, b: &Batch, opts: ForwardOptions<'_>) -> Vec<Vec<f64>> {
    let out = forward(m, b, opts).unwrap();
    out.attention
        .iter()
        .map(|bw| out.tape.value(bw.weights).data().to_vec())
        .collect()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn grads(m: &KtModel, batch: &Batch) -> Vec<Vec<f64>> {
    let mut out = forward(m, batch, ForwardOptions::default()).unwrap();
    let loss = out
        .tape
        .bce_loss(out.preds, &batch.labels(), &batch.valid_mask)
        .unwrap();
    out.tape.backward(loss).unwrap();
    out.params.iter().map(|&v| out.tape.grad_or_zeros(v)).collect()
}

#[test]
fn criterion_1_gradient_fidelity() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for kind in BiasKind::ALL {
        let cfg = ModelConfig {
            max_len: 6,
            ..toy_config(kind)
        };
        let batch = random_batch(31, 2, 6, cfg.vocab_size);
        // Production init and a widened copy that drives every nonlinearity.
        for (label, model) in [
            ("init", init_params(&cfg, 1).unwrap()),
            ("spread", spread_model(&cfg, 1)),
        ] {
            let r = gradient_check(&model, &batch, 64, 1e-5, 17).unwrap();
            worst = worst.max(r.max_rel_error);
            if label == "spread" {
                detail.push(format!("{kind}={:.1e}", r.max_rel_error));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-3 && secs < 120.0;
    report(
        1,
        "gradient fidelity",
        pass,
        &format!("max rel err {worst:.2e} [{}] in {secs:.1}s", detail.join(" ")),
    );
    assert!(pass);
}

#[test]
fn criterion_2_reduction_identities() {
    let none_cfg = ModelConfig {
        d_model: 16,
        num_heads: 4,
        num_blocks: 2,
        ..toy_config(BiasKind::None)
    };
    let with_kind = |kind| ModelConfig {
        bias: BiasConfig {
            kind,
            ..Default::default()
        },
        ..none_cfg.clone()
    };
    let mut folibi_err: f64 = 0.0;
    let mut mono_err: f64 = 0.0;
    for seed in 0..5 {
        let batch = random_batch(100 + seed, 3, 9, none_cfg.vocab_size);
        let none = spread_model(&none_cfg, seed);
        let plain = weights_of(&none, &batch, ForwardOptions::default());

        // (a) FoLiBi with every slope forced to zero.
        let mut folibi = none.clone();
        folibi.config = with_kind(BiasKind::Folibi);
        let opts = ForwardOptions {
            folibi_slopes: Some(vec![0.0; none_cfg.num_heads]),
            ..Default::default()
        };
        folibi_err = folibi_err.max(max_abs_diff(&weights_of(&folibi, &batch, opts), &plain));

        // (b) Mono sharing every common parameter, decay raw set so θ ≈ 4e-18.
        let mut mono = init_params(&with_kind(BiasKind::Mono), seed).unwrap();
        for (name, t) in none.names().iter().zip(none.params()) {
            *mono.param_mut(name).unwrap() = t.clone();
        }
        for name in mono.names().to_vec() {
            if name.ends_with("theta_raw") {
                mono.param_mut(&name).unwrap().data_mut().fill(-40.0);
            }
        }
        mono_err = mono_err.max(max_abs_diff(
            &weights_of(&mono, &batch, ForwardOptions::default()),
            &plain,
        ));
    }

    // (c) Shift equivalence through the attention kernel: β = m·j against
    // β' = −m·(t−1−j) on random scores under a causal mask.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (g, t, dh) = (8, 12, 4);
    let slopes = folibi_slopes(g);
    let mut shift_err: f64 = 0.0;
    for _ in 0..20 {
        let mut tape = Tape::new();
        let mut rand_var = |tape: &mut Tape| {
            let data = (0..g * t * dh).map(|_| rng.gen_range(-2.0..2.0)).collect();
            tape.leaf(Tensor::new([g, t, dh], data).unwrap())
        };
        let (q, k, v) = (rand_var(&mut tape), rand_var(&mut tape), rand_var(&mut tape));
        let mask = Mask::new([g, t, t], (0..g * t * t).map(|c| (c % t) <= (c / t) % t).collect()).unwrap();
        let beta = |form: fn(f64, usize, usize) -> f64| {
            let mut b = vec![0.0; g * t * t];
            for h in 0..g {
                for i in 0..t {
                    for j in 0..t {
                        b[(h * t + i) * t + j] = form(slopes[h], j, t);
                    }
                }
            }
            Tensor::new([g, t, t], b).unwrap()
        };
        let fwd = beta(|m, j, _| m * j as f64);
        let bwd = beta(|m, j, t| -m * (t - 1 - j) as f64);
        let mut weights = Vec::new();
        for b in [fwd, bwd] {
            let bv = tape.constant(b);
            let bias = AttnBias::Beta {
                beta: bv,
                map: GroupMap::Cycle,
            };
            let (_, w) = biased_attention(&mut tape, q, k, v, &mask, &bias).unwrap();
            weights.push(tape.value(w).data().to_vec());
        }
        shift_err = shift_err.max(max_abs_diff(&weights[..1], &weights[1..]));
    }

    let pass = folibi_err <= 1e-8 && mono_err <= 1e-8 && shift_err <= 1e-12;
    report(
        2,
        "reduction identities",
        pass,
        &format!("folibi m=0 {folibi_err:.1e}, mono θ≈0 {mono_err:.1e}, shift {shift_err:.1e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_slope_schedule() {
    let slopes = folibi_slopes(8);
    let expected: Vec<f64> = (1..=8).map(|k| 1.0 / (1u32 << k) as f64).collect();
    let exact = slopes == expected;
    let mut counts = Vec::new();
    let mut equal = true;
    for cfg in [ModelConfig::default(), toy_config(BiasKind::None)] {
        let base = ModelConfig { vocab_size: 50, ..cfg };
        let count = |kind| {
            param_count(&ModelConfig {
                bias: BiasConfig {
                    kind,
                    ..Default::default()
                },
                ..base.clone()
            })
        };
        let (n, f) = (count(BiasKind::None), count(BiasKind::Folibi));
        let built = init_params(
            &ModelConfig {
                bias: BiasConfig {
                    kind: BiasKind::Folibi,
                    ..Default::default()
                },
                ..base.clone()
            },
            0,
        )
        .unwrap()
        .param_count();
        equal &= n == f && f == built;
        counts.push(format!("{n}={f}"));
    }
    let pass = exact && equal;
    report(
        3,
        "slope schedule",
        pass,
        &format!("slopes {slopes:?}; params none=folibi {}", counts.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_4_causality_and_masks() {
    let mut causal = true;
    let mut padding = true;
    let mut dumps = true;
    let mut checked = 0;
    for kind in BiasKind::ALL {
        let cfg = ModelConfig {
            num_blocks: 2,
            ..toy_config(kind)
        };
        let m = spread_model(&cfg, 40);
        let (rows, l) = (2, 10);
        let base = random_batch(41, rows, l, cfg.vocab_size);
        let p0 = forward(&m, &base, ForwardOptions::default())
            .unwrap()
            .predictions()
            .to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for t in 0..l {
            // Responses from t on, and items after t, are hidden from r̂_t.
            let mut b = base.clone();
            for row in 0..rows {
                for s in t..l {
                    b.responses[row * l + s] = rng.gen_range(0..2);
                    if s > t {
                        b.item_ids[row * l + s] = rng.gen_range(0..cfg.vocab_size);
                    }
                }
            }
            let p1 = forward(&m, &b, ForwardOptions::default())
                .unwrap()
                .predictions()
                .to_vec();
            for row in 0..rows {
                causal &= bits(&p0[row * l..=row * l + t]) == bits(&p1[row * l..=row * l + t]);
            }
        }

        // All-padding tail with junk ids against the unpadded batch.
        let rows_data = base.unpad();
        let short = Segment {
            interactions: rows_data[0][..6].to_vec(),
            ..segment("s", &[], &[])
        };
        let long = Segment {
            interactions: rows_data[1].clone(),
            ..segment("t", &[], &[])
        };
        let tight = Batch::from_segments(&[&short, &long], l).unwrap();
        let mut padded = Batch::from_segments(&[&short, &long], cfg.max_tokens()).unwrap();
        for i in 0..padded.item_ids.len() {
            if !padded.valid_mask[i] {
                padded.item_ids[i] = rng.gen_range(0..cfg.vocab_size);
                padded.responses[i] = rng.gen_range(0..2);
            }
        }
        padding &= grads(&m, &tight) == grads(&m, &padded);

        // Dumped retriever maps: strictly lower-triangular, masked cells exactly 0.
        for block in 0..cfg.num_blocks {
            let trace = dump_attention(&m, &padded, Stack::Retriever, block, 20).unwrap();
            for w in &trace.heads {
                for i in 0..trace.n {
                    for j in i..trace.n {
                        dumps &= w[i * trace.n + j] == 0.0;
                    }
                }
                checked += 1;
            }
        }
    }
    let pass = causal && padding && dumps;
    report(
        4,
        "causality and mask hygiene",
        pass,
        &format!("future-blind {causal}, padding grad-free {padding}, {checked} dumped maps lower-triangular {dumps}"),
    );
    assert!(pass);
}

fn brute_auc(preds: &[f64], labels: &[bool]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                credit += if preds[i] > preds[j] {
                    1.0
                } else if preds[i] == preds[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    credit / pairs
}

#[test]
fn criterion_5_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut auc_err: f64 = 0.0;
    let mut mono_err: f64 = 0.0;
    let mut instances = 0;
    while instances < 200 {
        let n = rng.gen_range(2..=100);
        let levels = rng.gen_range(2..=10);
        let preds: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        instances += 1;
        let a = auc(&preds, &labels).unwrap();
        auc_err = auc_err.max((a - brute_auc(&preds, &labels)).abs());
        for f in [|x: f64| x * x * x, |x: f64| 1.0 / (1.0 + (-(5.0 * x - 2.0)).exp())] {
            let t: Vec<f64> = preds.iter().map(|&x| f(x)).collect();
            mono_err = mono_err.max((auc(&t, &labels).unwrap() - a).abs());
        }
    }
    let mut wacc_err: f64 = 0.0;
    let mut tables = 0;
    while tables < 100 {
        let (tp, fnn, tn, fp): (usize, usize, usize, usize) = (
            rng.gen_range(0..40),
            rng.gen_range(0..40),
            rng.gen_range(0..40),
            rng.gen_range(0..40),
        );
        if tp + fnn == 0 || tn + fp == 0 {
            continue;
        }
        tables += 1;
        let formula = 0.5 * (tp as f64 / (tp + fnn) as f64 + tn as f64 / (tn + fp) as f64);
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for (count, p, l) in [(tp, 0.8, true), (fnn, 0.3, true), (tn, 0.1, false), (fp, 0.6, false)] {
            preds.extend(std::iter::repeat_n(p, count));
            labels.extend(std::iter::repeat_n(l, count));
        }
        let from_preds = acc_rmse_wacc(&preds, &labels, 0.5).unwrap().w_acc;
        wacc_err = wacc_err
            .max((from_preds - formula).abs())
            .max((weighted_accuracy(tp, fnn, tn, fp) - formula).abs());
    }
    let pass = auc_err <= 1e-12 && mono_err <= 1e-12 && wacc_err <= 1e-12;
    report(
        5,
        "metric oracles",
        pass,
        &format!("auc vs pairwise {auc_err:.1e} (200), monotone {mono_err:.1e}, w_acc {wacc_err:.1e} (100)"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_overfit_sanity() {
    let t0 = Instant::now();
    // Labels are a fixed function of the item, so the data is memorizable.
    let vocab = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let segs: Vec<Segment> = (0..4)
        .map(|k| {
            let items: Vec<usize> = (0..20).map(|_| rng.gen_range(0..vocab)).collect();
            let correct: Vec<bool> = items.iter().map(|&i| i % 2 == 1).collect();
            segment(&format!("o{k}"), &items, &correct)
        })
        .collect();
    let refs: Vec<&Segment> = segs.iter().collect();
    let all = Batch::from_segments(&refs, 20).unwrap();
    let mut results = Vec::new();
    let mut pass = true;
    for kind in BiasKind::ALL {
        let cfg = ModelConfig {
            d_model: 16,
            num_heads: 2,
            num_blocks: 1,
            max_len: 20,
            vocab_size: vocab,
            bias: BiasConfig {
                kind,
                ..Default::default()
            },
            ..Default::default()
        };
        let tc = TrainConfig {
            lr: 1e-3,
            batch_size: 1,
            max_epochs: 200,
            patience: 200,
            seed: 0,
            ..Default::default()
        };
        let outcome = train(init_params(&cfg, 0).unwrap(), &segs, &[], &tc, |_| {}).unwrap();
        let bce = batch_loss(&outcome.best, &all, ForwardOptions::default()).unwrap();
        let first = outcome.log.iter().find(|e| e.train_loss < 0.05).map(|e| e.epoch);
        pass &= bce < 0.05;
        results.push(format!(
            "{kind}={bce:.4}@{}",
            first.map_or("-".into(), |e| e.to_string())
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    report(
        6,
        "overfit sanity",
        pass,
        &format!("train BCE [{}] in {secs:.0}s", results.join(" ")),
    );
    assert!(pass);
}

/// Scaled directional experiment: half the learners and half the length of
/// the full setting, which exceeds the time budget on one core.
#[test]
fn criterion_7_synthetic_directional() {
    let t0 = Instant::now();
    let spec = SyntheticSpec {
        learners: 250,
        concepts: 50,
        length: 100,
        tau_mem: 20.0,
        seed: 7,
        ..Default::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    let (seqs, vocab) = preprocess(&data.records, PreprocessOptions::default()).unwrap();
    let ids: Vec<String> = seqs.iter().map(|s| s.learner_id.clone()).collect();
    let split = kfold_split(&ids, 5, 0.1, 0).unwrap();
    let fold = FoldData::new(&seqs, split.fold(0).unwrap(), 100);
    let mut means = BTreeMap::new();
    let mut per_seed = Vec::new();
    for kind in [BiasKind::Pe, BiasKind::Folibi] {
        let mut aucs = Vec::new();
        for seed in 0..3 {
            let mc = ModelConfig {
                d_model: 64,
                num_heads: 8,
                num_blocks: 2,
                max_len: 100,
                vocab_size: vocab.len(),
                bias: BiasConfig {
                    kind,
                    ..Default::default()
                },
                ..Default::default()
            };
            let tc = TrainConfig {
                batch_size: 32,
                max_epochs: 30,
                patience: 5,
                seed,
                ..Default::default()
            };
            let r = run_fold(&mc, &tc, &fold, |_| {}).unwrap();
            aucs.push(r.test.auc);
        }
        per_seed.push(format!(
            "{kind} {:?}",
            aucs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
        ));
        means.insert(kind.as_str(), aucs.iter().sum::<f64>() / 3.0);
    }
    let margin = means["folibi"] - means["pe"];
    let secs = t0.elapsed().as_secs_f64();
    let pass = margin >= 0.005 && secs <= 1800.0;
    report(
        7,
        "synthetic directional",
        pass,
        &format!(
            "mean AUC pe {:.4} folibi {:.4} margin {margin:+.4} ({}; 250x100, {secs:.0}s)",
            means["pe"],
            means["folibi"],
            per_seed.join("; ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_length_sweep_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // Learners of varying length, some longer than 300.
    let data = gen_synthetic(&SyntheticSpec {
        learners: 24,
        concepts: 20,
        length: 340,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let keep: BTreeMap<String, usize> = (0..24).map(|k| (format!("s{k:04}"), 40 + 13 * k)).collect();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    let records: Vec<_> = data
        .records
        .iter()
        .filter(|r| {
            let c = seen.entry(&r.learner_id).or_default();
            *c += 1;
            *c <= keep[&r.learner_id]
        })
        .cloned()
        .collect();
    let raw = root.join("raw.csv");
    write_csv(&raw, &records).unwrap();

    let data_dir = root.join("data");
    cmd_preprocess(
        &PreprocessRun {
            input: raw.clone(),
            out_dir: Some(data_dir.clone()),
            max_len: 300,
            ..Default::default()
        },
        root,
    )
    .unwrap();
    let train_dir = root.join("train");
    cmd_train(
        &TrainRun {
            data: data_dir.clone(),
            bias: BiasKind::Folibi,
            d_model: 16,
            heads: 2,
            blocks: 1,
            max_len: 300,
            batch_size: 8,
            max_epochs: 2,
            patience: 2,
            out_dir: Some(train_dir.clone()),
            ..Default::default()
        },
        root,
    )
    .unwrap();
    let sweep_dir = root.join("sweep");
    let lengths = [10, 20, 50, 100, 200, 300];
    cmd_sweep(
        &SweepRun {
            checkpoint: train_dir.join("model_fold0_seed0.ckpt"),
            data: data_dir,
            role: "all".into(),
            lengths: lengths.to_vec(),
            out_dir: Some(sweep_dir.clone()),
            ..Default::default()
        },
        root,
    )
    .unwrap();

    // Counting oracle straight from the raw CSV.
    let text = std::fs::read_to_string(&raw).unwrap();
    let mut lens: BTreeMap<&str, usize> = BTreeMap::new();
    for line in text.lines().skip(1) {
        *lens.entry(line.split(',').next().unwrap()).or_default() += 1;
    }
    let csv = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mut counts_ok = true;
    let mut per_length = Vec::new();
    for n in lengths {
        let want: usize = lens.values().map(|&l| l.saturating_sub(n)).sum();
        let of_n: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == n.to_string()).collect();
        let metrics: Vec<&str> = of_n.iter().map(|r| r[1]).collect();
        counts_ok &= metrics == ["auc", "acc", "rmse", "w_acc"];
        counts_ok &= of_n.iter().all(|r| r[3] == want.to_string() && r[4] == "ok");
        per_length.push(format!("{n}:{want}"));
    }
    let pass = counts_ok && rows.len() == lengths.len() * 4;
    report(
        8,
        "length-sweep protocol",
        pass,
        &format!(
            "{} rows, n_evaluated matches oracle [{}]",
            rows.len(),
            per_length.join(" ")
        ),
    );
    assert!(pass);
}

fn run_bin(root: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ktforget"))
        .current_dir(root)
        .env_remove("KTFORGET_OUTPUT_ROOT")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    run_bin(
        root,
        &[
            "gen-synthetic",
            "--out",
            "raw.csv",
            "--learners",
            "40",
            "--concepts",
            "10",
            "--length",
            "40",
            "--seed",
            "9",
        ],
    );
    run_bin(
        root,
        &[
            "preprocess",
            "--input",
            "raw.csv",
            "--out-dir",
            "data",
            "--max-len",
            "40",
        ],
    );
    let args = [
        "train",
        "--data",
        "data",
        "--bias",
        "mono",
        "--d-model",
        "16",
        "--heads",
        "4",
        "--blocks",
        "2",
        "--max-len",
        "40",
        "--dropout",
        "0.1",
        "--batch-size",
        "8",
        "--max-epochs",
        "3",
        "--fold",
        "1",
        "--seed",
        "3",
        "--out-dir",
        "run",
    ];
    let files = [
        "model_fold1_seed3.ckpt",
        "metrics_fold1_seed3.json",
        "train_log_fold1_seed3.csv",
    ];
    let mut executions = Vec::new();
    for _ in 0..2 {
        run_bin(root, &args);
        executions.push(files.map(|f| std::fs::read(root.join("run").join(f)).unwrap()));
        std::fs::remove_dir_all(root.join("run")).unwrap();
    }
    let pass = executions[0] == executions[1];
    report(
        9,
        "determinism",
        pass,
        &format!(
            "two executions, checkpoint {} bytes, metrics and log identical: {pass}",
            executions[0][0].len()
        ),
    );
    assert!(pass);
}
