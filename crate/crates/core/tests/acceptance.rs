//! One PASS/FAIL line per acceptance criterion. Pinned values come from the
//! first verified run with the seeds below.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use gradprune::analysis::{curve_csv, sensitivity_curve, topk_overlap};
use gradprune::experiment::{best_sparsity, ranking_snapshots, sweep_csv, ToyConfig, ToyRun};
use gradprune::igia::IgiaAccumulator;
use gradprune::merging::MergeConfig;
use gradprune::model::ModelState;
use gradprune::trainer::{make_dataset, run_probe, TaskSpec, TrainConfig};

const IGIA_REL_TOL: f64 = 1e-6;
const IGIA_BUDGET: Duration = Duration::from_secs(30);
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const SCALE_REL_TOL: f64 = 1e-12;
const TOY_BUDGET: Duration = Duration::from_secs(300);
/// Top-2 overlap of the 1%-step ranking with the full-run ranking.
const PINNED_EARLY_OVERLAP: f64 = 1.0;
const PINNED_MERGED_LOSS: f64 = 0.005695417431402029;
const PINNED_DISCARD_LOSS: f64 = 0.006575484273924776;
/// Regression anchors are compared with this relative slack to absorb
/// last-ulp differences in platform `exp`/`ln`.
const ANCHOR_REL_TOL: f64 = 1e-6;
const PINNED_BEST_SPARSITY: f64 = 0.7;
const SWEEP: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ANCHOR_REL_TOL * b.abs()
}

fn c1() -> Outcome {
    let start = Instant::now();
    let (worst, entries) = igia_vs_oracle(5, 20);
    let took = start.elapsed();
    check(
        worst <= IGIA_REL_TOL && took < IGIA_BUDGET,
        format!("worst rel err {worst:e} over {entries} entries (tol {IGIA_REL_TOL:e}), {took:.2?}"),
    )
}

fn c2() -> Outcome {
    let start = Instant::now();
    let mut model = ModelState::build(&tiny_config(), 17).unwrap();
    randomize_adapters(&mut model, 0.05);
    let report = gradient_report(&model, &[3, 1, 4, 1, 5, 9, 2], &[1, 4, 1, 5, 9, 2, 6], 2);
    let (name, worst) = report
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    let took = start.elapsed();
    check(
        worst < GRAD_REL_TOL && took < GRAD_BUDGET && report.len() == model.params().len(),
        format!("{} params, worst {name} rel err {worst:e} (tol {GRAD_REL_TOL:e}), {took:.2?}", report.len()),
    )
}

fn c3() -> Outcome {
    match merge_truth_tables(2024) {
        Ok(n) => Ok(format!("{n} cases, exact agreement")),
        Err(e) => Err(e),
    }
}

fn c4() -> Outcome {
    let cfg = tiny_config();
    let model = ModelState::build(&cfg, 8).unwrap();
    let spec = TaskSpec {
        vocab_size: cfg.vocab_size,
        max_seq: cfg.max_seq,
    };
    let data = make_dataset("copy", 200, 8, spec).unwrap();
    let train = TrainConfig {
        probe_steps: 20,
        ..TrainConfig::default()
    };
    let mut dump = Vec::new();
    run_probe(&model, &data, &train, &mut dump).unwrap();
    let finalize = |scale: f64| {
        let mut acc = IgiaAccumulator::for_model(&model);
        for r in &dump {
            acc.accumulate(&r.scaled(1.0, scale)).unwrap();
        }
        acc.finalize().unwrap()
    };
    let (base, scaled) = (finalize(1.0), finalize(3.0));
    let mut worst = 0.0f64;
    for (k, m) in &base {
        for (a, b) in scaled[k].f.data().iter().zip(m.f.data()) {
            if *b != 0.0 {
                worst = worst.max(((a - 9.0 * b) / (9.0 * b)).abs());
            } else if *a != 0.0 {
                worst = f64::INFINITY;
            }
        }
    }
    check(worst <= SCALE_REL_TOL, format!("worst rel deviation from 9x: {worst:e} (tol {SCALE_REL_TOL:e})"))
}

fn c5(run: &ToyRun, prep: Duration) -> Outcome {
    let start = Instant::now();
    let train = TrainConfig {
        seed: run.config.seed.wrapping_add(4),
        ..run.config.train.clone()
    };
    let fractions = [0.0002, 0.0005, 0.0008, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0];
    let (snaps, reference) = ranking_snapshots(&run.base, &run.data, &train, &fractions).unwrap();
    let took = prep + start.elapsed();
    let csv = curve_csv(&sensitivity_curve(&snaps, &reference, 2).unwrap(), 2);
    let path = artifact("sensitivity_curve.csv", &csv);
    let early_step = train.steps_for_fraction(0.01);
    let early = snaps.iter().find(|s| s.step == early_step).unwrap();
    let overlap = topk_overlap(early, &reference, 2).unwrap();
    check(
        overlap >= PINNED_EARLY_OVERLAP && took < TOY_BUDGET,
        format!(
            "top-2 overlap at step {early_step}/{} = {overlap} (pinned {PINNED_EARLY_OVERLAP}), reference {:?}, {took:.2?}, csv {path}",
            train.total_steps, reference.ranking
        ),
    )
}

fn c6(run: &ToyRun) -> Outcome {
    let ranking = run.ranking();
    let (hi, lo) = (ranking[0], *ranking.last().unwrap());
    let loss_lo = run.drop_eval(&BTreeSet::from([lo])).unwrap().loss;
    let loss_hi = run.drop_eval(&BTreeSet::from([hi])).unwrap().loss;
    check(
        loss_lo <= loss_hi,
        format!("drop lowest (layer {lo}) loss {loss_lo:.6} <= drop highest (layer {hi}) loss {loss_hi:.6}"),
    )
}

fn c7(run: &ToyRun) -> Outcome {
    let merged = run.prune_eval(&run.plan(2, 1).unwrap(), &MergeConfig::default()).unwrap().loss;
    let discard = run.prune_eval(&run.plan(2, 0).unwrap(), &MergeConfig::default()).unwrap().loss;
    check(
        merged <= discard && close(merged, PINNED_MERGED_LOSS) && close(discard, PINNED_DISCARD_LOSS),
        format!(
            "N=2 sign-sum merge loss {merged} <= discard loss {discard} (pinned {PINNED_MERGED_LOSS} / {PINNED_DISCARD_LOSS})"
        ),
    )
}

fn c8(run: &ToyRun) -> Outcome {
    let a = run.sparsity_sweep(2, 1, "sign-sum", &SWEEP).unwrap();
    let b = run.sparsity_sweep(2, 1, "sign-sum", &SWEEP).unwrap();
    let csv = sweep_csv(&a);
    let path = artifact("sparsity_sweep.csv", &csv);
    let best = best_sparsity(&a).unwrap();
    check(
        csv == sweep_csv(&b) && best == PINNED_BEST_SPARSITY,
        format!("best p = {best} (pinned {PINNED_BEST_SPARSITY}), sweep reproducible, csv {path}"),
    )
}

fn c9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    container_round_trip(dir.path()).map(|()| "save/load/save byte-identical; bad_magic, out_of_bounds, truncated".into())
}

fn c10() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_pipeline(a.path(), 42)?;
    let second = cli_pipeline(b.path(), 42)?;
    let differing: Vec<&String> = first.keys().filter(|k| first[*k] != second[*k]).collect();
    check(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", first.len()),
    )
}

fn artifact(name: &str, text: &str) -> String {
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn main() -> ExitCode {
    let mut out = std::io::stdout().lock();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        writeln!(out, "criterion {n:>2} [{name}]: {tag} - {detail}").unwrap();
        out.flush().unwrap();
    };
    report(1, "igia oracle", c1());
    report(2, "gradient check", c2());
    report(3, "merge truth tables", c3());
    report(4, "igia scale algebra", c4());
    let start = Instant::now();
    let run = ToyRun::prepare(ToyConfig::default()).unwrap();
    let prep = start.elapsed();
    report(5, "ranking sensitivity", c5(&run, prep));
    report(6, "importance direction", c6(&run));
    report(7, "merging vs discard", c7(&run));
    report(8, "sparsity sweep", c8(&run));
    report(9, "container round trip", c9());
    report(10, "pipeline determinism", c10());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
