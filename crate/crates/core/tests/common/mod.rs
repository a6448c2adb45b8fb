//! Test-only oracles, kept independent of the code paths they check.
#![allow(dead_code)]

use std::collections::BTreeMap;

use gradprune::model::{ModelConfig, ModelState};
use gradprune::numerics::Tensor;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 12,
        max_seq: 12,
        lora_rank: 4,
        lora_alpha: 8.0,
    }
}

/// Mean cross-entropy computed directly from forward logits.
pub fn reference_loss(model: &ModelState, tokens: &[u32], targets: &[u32], score_from: usize) -> f64 {
    let (logits, _) = model.forward(tokens).expect("forward");
    let mut total = 0.0;
    for p in score_from..tokens.len() {
        let row = logits.row(p);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[targets[p] as usize];
    }
    total / (tokens.len() - score_from) as f64
}

/// Central finite differences of `loss` with respect to every entry of the
/// named parameter.
pub fn finite_difference(
    model: &ModelState,
    param: &str,
    h: f64,
    loss: impl Fn(&ModelState) -> f64,
) -> Tensor {
    let mut probe = model.clone();
    let shape = probe.param_mut(param).expect("param exists").shape().to_vec();
    let mut out = Tensor::zeros(&shape);
    for i in 0..out.numel() {
        let orig = probe.param_mut(param).unwrap().data()[i];
        probe.param_mut(param).unwrap().data_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.param_mut(param).unwrap().data_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.param_mut(param).unwrap().data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Norm-wise relative error `‖a − b‖ / max(‖b‖, 1e-12)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / numeric.l2_norm().max(1e-12)
}

/// Gives every adapter a nonzero `B` so gradients through `A` are exercised.
pub fn randomize_adapters(model: &mut ModelState, scale: f64) {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for layer in &mut model.layers {
        for lin in &mut layer.linears {
            for v in lin.lora_b.data_mut() {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                *v = scale * ((state % 2001) as f64 / 1000.0 - 1.0);
            }
        }
    }
}

/// Checks every parameter's analytic gradient against finite differences and
/// returns `(name, relative error)` for each.
pub fn gradient_report(model: &ModelState, tokens: &[u32], targets: &[u32], score_from: usize) -> BTreeMap<String, f64> {
    let (_, tape) = model.forward(tokens).unwrap();
    let out = model.backward(&tape, targets, score_from, true).unwrap();
    let mut report = BTreeMap::new();
    for (name, grad) in &out.grads {
        let numeric = finite_difference(model, name, 1e-5, |m| {
            reference_loss(m, tokens, targets, score_from)
        });
        report.insert(name.clone(), relative_error(grad, &numeric));
    }
    report
}

/// Naive replay of the IGIA definition from a dump of per-step adapter
/// gradients: explicit triple loop for `∇B · ∇A`, square, sum, divide by t.
pub fn naive_igia(records: &[gradprune::model::GradRecord]) -> BTreeMap<String, Vec<f64>> {
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in records {
        for (name, g) in &rec.grads {
            let (out_dim, r) = (g.b.shape()[0], g.b.shape()[1]);
            let in_dim = g.a.shape()[1];
            let sum = sums.entry(name.clone()).or_insert_with(|| vec![0.0; out_dim * in_dim]);
            for i in 0..out_dim {
                for j in 0..in_dim {
                    let mut w = 0.0;
                    for k in 0..r {
                        w += g.b.data()[i * r + k] * g.a.data()[k * in_dim + j];
                    }
                    sum[i * in_dim + j] += w * w;
                }
            }
        }
    }
    let t = records.len() as f64;
    for v in sums.values_mut() {
        for x in v.iter_mut() {
            *x /= t;
        }
    }
    sums
}

/// Entry `i` survives iff fewer than `k` entries beat it, where `j` beats
/// `i` when `f[j] > f[i]`, or when they are equal and `j < i`.
pub fn brute_force_survivors(f: &[f64], k: usize) -> Vec<usize> {
    (0..f.len())
        .filter(|&i| {
            let beaten_by = (0..f.len())
                .filter(|&j| f[j] > f[i] || (f[j] == f[i] && j < i))
                .count();
            beaten_by < k
        })
        .collect()
}

fn scalar_sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Scalar sign-merge rule written case by case.
pub fn sign_merge_oracle(w1: f64, donors: &[f64]) -> f64 {
    let s = scalar_sign(w1);
    let mut out = w1;
    if s == 0 {
        return out;
    }
    for &d in donors {
        if scalar_sign(d) == s {
            out += d;
        }
    }
    out
}

/// Truth table of the adaptive weight rule.
pub fn lambda_oracle(f: f64, sign_r: i8, sign_m: i8, tau: f64) -> (f64, f64) {
    let important = f * f >= tau;
    let agree = sign_r == sign_m;
    let nonzero = sign_r != 0;
    match (important, agree, nonzero) {
        (true, true, true) => (0.5, 0.5),
        _ => (1.0, 0.0),
    }
}

/// Probes the tiny model for `t` steps twice (once dumping raw gradients,
/// once through the accumulator) and returns the worst per-entry relative
/// error and the number of compared entries.
pub fn igia_vs_oracle(seed: u64, t: usize) -> (f64, usize) {
    use gradprune::igia::compute_igia;
    use gradprune::trainer::{make_dataset, run_probe, TaskSpec, TrainConfig};
    let cfg = tiny_config();
    let model = ModelState::build(&cfg, seed).unwrap();
    let spec = TaskSpec {
        vocab_size: cfg.vocab_size,
        max_seq: cfg.max_seq,
    };
    let data = make_dataset("copy", 200, seed, spec).unwrap();
    let train = TrainConfig {
        total_steps: 2000,
        probe_steps: t,
        learning_rate: 0.05,
        seed,
        ..TrainConfig::default()
    };
    let mut dump = Vec::new();
    run_probe(&model, &data, &train, &mut dump).unwrap();
    let oracle = naive_igia(&dump);
    let igia = compute_igia(&model, &data, &train).unwrap();
    assert_eq!(
        igia.keys().collect::<Vec<_>>(),
        oracle.keys().collect::<Vec<_>>()
    );
    let mut worst = 0.0f64;
    let mut count = 0;
    for (name, m) in &igia {
        assert_eq!(m.steps_seen, t);
        for (a, b) in m.f.data().iter().zip(&oracle[name]) {
            let err = if *b == 0.0 {
                if *a == 0.0 { 0.0 } else { f64::INFINITY }
            } else {
                ((a - b) / b).abs()
            };
            worst = worst.max(err);
            count += 1;
        }
    }
    (worst, count)
}

/// Exhaustive scalar checks of sign merging, the adaptive weight rule and
/// top-k sparsification. Returns the number of cases checked or the first
/// disagreement.
pub fn merge_truth_tables(seed: u64) -> Result<usize, String> {
    use gradprune::merging::{adaptive_lambda, keep_count, sign_merge, sparsify, survivors};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // Values drawn from a small set so zeros, sign ties and equal magnitudes
    // all occur often.
    let pick = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        const VALUES: [f64; 9] = [-2.0, -1.0, -0.5, -0.0, 0.0, 0.25, 0.5, 1.0, 3.0];
        VALUES[rng.gen_range(0..VALUES.len())]
    };
    let mut checked = 0;

    let n = 10_000;
    for donors in 1..=3 {
        let w1 = Tensor::new(vec![n], (0..n).map(|_| pick(&mut rng)).collect()).unwrap();
        let ds: Vec<Tensor> = (0..donors)
            .map(|_| Tensor::new(vec![n], (0..n).map(|_| pick(&mut rng)).collect()).unwrap())
            .collect();
        let merged = sign_merge(&w1, &ds).unwrap();
        for i in 0..n {
            let d: Vec<f64> = ds.iter().map(|t| t.data()[i]).collect();
            let want = sign_merge_oracle(w1.data()[i], &d);
            if merged.data()[i].to_bits() != want.to_bits() {
                return Err(format!("sign_merge entry {i}: {} vs {want}", merged.data()[i]));
            }
            checked += 1;
        }
    }

    let signs = [-1i8, 0, 1];
    for _ in 0..n {
        let f = pick(&mut rng);
        let tau = [0.0, 0.25, 1.0, 4.0, f * f][rng.gen_range(0..5)];
        for &sr in &signs {
            for &sm in &signs {
                let got = adaptive_lambda(f, sr as f64, sm as f64, tau);
                let want = lambda_oracle(f, sr, sm, tau);
                if got != want {
                    return Err(format!("lambda f={f} sr={sr} sm={sm} tau={tau}: {got:?} vs {want:?}"));
                }
                checked += 1;
            }
        }
    }

    for trial in 0..200 {
        let len = 1 + (trial * 37) % 1000;
        let levels = 1 + rng.gen_range(0..6);
        let f: Vec<f64> = (0..len).map(|_| rng.gen_range(0..levels) as f64 * 0.125).collect();
        let w: Vec<f64> = (0..len).map(|_| pick(&mut rng) + 5.0).collect();
        let p = [0.0, 0.1, 0.33, 0.5, 0.8, 1.0, rng.gen::<f64>()][trial % 7];
        let k = keep_count(p, len);
        let want = brute_force_survivors(&f, k);
        let ft = Tensor::new(vec![len], f.clone()).unwrap();
        if survivors(&ft, p) != want {
            return Err(format!("survivors differ at len={len} p={p}"));
        }
        let sparse = sparsify(&Tensor::new(vec![len], w.clone()).unwrap(), &ft, p).unwrap();
        let nonzero: Vec<usize> = (0..len).filter(|&i| sparse.data()[i] != 0.0).collect();
        if nonzero != want {
            return Err(format!("sparsify support differs at len={len} p={p}"));
        }
        checked += len;
    }
    Ok(checked)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Checkpoint plus IGIA set: save → load → save must be byte-identical, and
/// corrupt or truncated files must fail with the documented error kinds.
pub fn container_round_trip(dir: &std::path::Path) -> Result<(), String> {
    use gradprune::io::{load_container, load_igia, load_model, save_igia, save_model, DType};
    use gradprune::trainer::{make_dataset, TaskSpec, TrainConfig};
    let cfg = tiny_config();
    let model = ModelState::build(&cfg, 13).unwrap();
    let spec = TaskSpec {
        vocab_size: cfg.vocab_size,
        max_seq: cfg.max_seq,
    };
    let data = make_dataset("copy", 100, 13, spec).unwrap();
    let train = TrainConfig {
        probe_steps: 4,
        ..TrainConfig::default()
    };
    let igia = gradprune::igia::compute_igia(&model, &data, &train).unwrap();
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();

    let (m1, m2) = (dir.join("m1.igpk"), dir.join("m2.igpk"));
    save_model(&m1, &model, DType::F64).map_err(|e| e.to_string())?;
    let back = load_model(&m1).map_err(|e| e.to_string())?;
    if back != model {
        return Err("model changed across save/load".into());
    }
    save_model(&m2, &back, DType::F64).map_err(|e| e.to_string())?;
    if read(&m1) != read(&m2) {
        return Err("model files differ after re-save".into());
    }
    let (i1, i2) = (dir.join("i1.igpk"), dir.join("i2.igpk"));
    save_igia(&i1, &igia).map_err(|e| e.to_string())?;
    let igia_back = load_igia(&i1).map_err(|e| e.to_string())?;
    if igia_back != igia {
        return Err("IGIA changed across save/load".into());
    }
    save_igia(&i2, &igia_back).map_err(|e| e.to_string())?;
    if read(&i1) != read(&i2) {
        return Err("IGIA files differ after re-save".into());
    }

    let bytes = read(&m1);
    let bad = dir.join("bad.igpk");
    let mut corrupt = bytes.clone();
    corrupt[..4].copy_from_slice(b"PKIG");
    std::fs::write(&bad, &corrupt).unwrap();
    match load_container(&bad) {
        Err(e) if e.kind() == "bad_magic" => {}
        other => return Err(format!("corrupt magic gave {other:?}")),
    }
    std::fs::write(&bad, &bytes[..bytes.len() - 100]).unwrap();
    match load_container(&bad) {
        Err(e) if e.kind() == "out_of_bounds" && e.to_string().contains('`') => {}
        other => return Err(format!("truncated payload gave {other:?}")),
    }
    std::fs::write(&bad, &bytes[..40]).unwrap();
    match load_container(&bad) {
        Err(e) if e.kind() == "truncated" => {}
        other => return Err(format!("truncated header gave {other:?}")),
    }
    Ok(())
}

/// Runs probe → score → plan → prune → finetune → eval through the binary
/// in `dir` and returns the SHA-256 of every artifact.
pub fn cli_pipeline(dir: &std::path::Path, seed: u64) -> Result<BTreeMap<String, String>, String> {
    let bin = env!("CARGO_BIN_EXE_gradprune");
    std::fs::write(
        dir.join("run.cfg"),
        "n_layers=4\nd_model=16\nn_heads=2\nd_ff=32\nvocab_size=12\nmax_seq=12\nlora_rank=4\nlora_alpha=8\n\
         total_steps=300\ndataset_size=200\n",
    )
    .unwrap();
    let seed = seed.to_string();
    let steps: [&[&str]; 7] = [
        &["init", "--out", "base.igpk"],
        &["probe", "--model", "base.igpk", "--steps-fraction", "0.05", "--out", "igia.igpk"],
        &["score", "--igia", "igia.igpk", "--out", "scores.csv"],
        &["plan", "--igia", "igia.igpk", "--model", "base.igpk", "--n", "2", "--merge", "1", "--out", "plan.txt"],
        &["prune", "--model", "base.igpk", "--igia", "igia.igpk", "--plan", "plan.txt", "--sparsity", "0.8",
          "--merge-strategy", "sign-sum", "--out", "pruned.igpk"],
        &["finetune", "--model", "pruned.igpk", "--out", "tuned.igpk"],
        &["eval", "--model", "tuned.igpk", "--out", "eval.txt"],
    ];
    let mut hashes = BTreeMap::new();
    for args in steps {
        let out = std::process::Command::new(bin)
            .current_dir(dir)
            .args(["--config", "run.cfg", "--seed", &seed])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{:?} failed: {}", args, String::from_utf8_lossy(&out.stderr)));
        }
        hashes.insert(format!("stdout:{}", args[0]), sha256_hex(&out.stdout));
    }
    for name in ["base.igpk", "igia.igpk", "scores.csv", "plan.txt", "pruned.igpk", "tuned.igpk", "eval.txt"] {
        hashes.insert(name.to_string(), sha256_hex(&std::fs::read(dir.join(name)).unwrap()));
    }
    Ok(hashes)
}
