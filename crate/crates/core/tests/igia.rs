mod common;

use std::collections::BTreeMap;

use common::*;
use gradprune::igia::{compute_igia, IgiaAccumulator};
use gradprune::io::checkpoint::igia_parts;
use gradprune::io::{encode_container, DType};
use gradprune::model::{AdapterGrad, GradRecord, ModelState};
use gradprune::numerics::Tensor;
use gradprune::trainer::{make_dataset, TaskSpec, TrainConfig};
use proptest::prelude::*;

#[test]
fn matches_naive_replay() {
    let (worst, count) = igia_vs_oracle(5, 20);
    assert!(count > 0);
    assert!(worst <= 1e-6, "worst relative error {worst:e}");
}

#[test]
fn keys_cover_every_adapter_linear_and_runs_repeat() {
    let cfg = tiny_config();
    let model = ModelState::build(&cfg, 2).unwrap();
    let spec = TaskSpec {
        vocab_size: cfg.vocab_size,
        max_seq: cfg.max_seq,
    };
    let data = make_dataset("modadd", 100, 2, spec).unwrap();
    let train = TrainConfig {
        probe_steps: 5,
        ..TrainConfig::default()
    };
    let a = compute_igia(&model, &data, &train).unwrap();
    let names: Vec<String> = a.keys().cloned().collect();
    let mut expected = model.linear_names();
    expected.sort();
    assert_eq!(names, expected);
    for (name, m) in &a {
        let lin = model.linears().find(|l| &l.name == name).unwrap();
        assert_eq!(m.f.shape(), lin.weight.shape());
    }
    let b = compute_igia(&model, &data, &train).unwrap();
    let bytes = |m| {
        let (t, at) = igia_parts(m).unwrap();
        encode_container(&t, &at, DType::F64).unwrap()
    };
    assert_eq!(bytes(&a), bytes(&b));
}

const SHAPES: [(&str, usize, usize); 2] = [("layer.0.q", 3, 4), ("layer.0.k", 2, 3)];
const RANK: usize = 2;

fn stream(values: Vec<Vec<f64>>) -> Vec<GradRecord> {
    values
        .into_iter()
        .enumerate()
        .map(|(step, v)| {
            let mut it = v.into_iter();
            let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
            let grads = SHAPES
                .iter()
                .map(|&(name, out, inp)| {
                    let b = Tensor::new(vec![out, RANK], take(out * RANK)).unwrap();
                    let a = Tensor::new(vec![RANK, inp], take(RANK * inp)).unwrap();
                    (name.to_string(), AdapterGrad { a, b })
                })
                .collect::<BTreeMap<_, _>>();
            GradRecord { step: step + 1, grads }
        })
        .collect()
}

fn per_record() -> usize {
    SHAPES.iter().map(|(_, o, i)| RANK * (o + i)).sum()
}

fn accumulator() -> IgiaAccumulator {
    IgiaAccumulator::new(SHAPES.iter().map(|&(n, o, i)| (n, vec![o, i])))
}

fn finalize(records: &[GradRecord], acc: IgiaAccumulator) -> BTreeMap<String, Tensor> {
    let mut acc = acc;
    for r in records {
        acc.accumulate(r).unwrap();
    }
    acc.finalize().unwrap().into_iter().map(|(k, m)| (k, m.f)).collect()
}

fn real_stream() -> impl Strategy<Value = Vec<GradRecord>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, per_record()), 1..6).prop_map(stream)
}

fn integer_stream() -> impl Strategy<Value = Vec<GradRecord>> {
    prop::collection::vec(
        prop::collection::vec((-20i32..20).prop_map(f64::from), per_record()),
        1..8,
    )
    .prop_map(stream)
}

proptest! {
    #[test]
    fn entries_are_nonnegative_and_sums_grow(records in real_stream()) {
        let mut acc = accumulator();
        let mut prev: Option<BTreeMap<String, Tensor>> = None;
        for r in &records {
            acc.accumulate(r).unwrap();
            let now = acc.sums().clone();
            if let Some(p) = &prev {
                for (k, t) in &now {
                    for (a, b) in t.data().iter().zip(p[k].data()) {
                        prop_assert!(a >= b);
                    }
                }
            }
            prev = Some(now);
        }
        for m in acc.finalize().unwrap().values() {
            prop_assert!(m.f.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn scaling_gradients_by_three_scales_igia_by_nine(records in real_stream()) {
        let base = finalize(&records, accumulator());
        let scaled: Vec<GradRecord> = records.iter().map(|r| r.scaled(1.0, 3.0)).collect();
        let out = finalize(&scaled, accumulator());
        for (k, t) in &base {
            for (a, b) in out[k].data().iter().zip(t.data()) {
                prop_assert!((a - 9.0 * b).abs() <= 1e-12 * (9.0 * b).abs());
            }
        }
    }

    #[test]
    fn order_of_records_does_not_matter(records in integer_stream(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        // Integer-valued gradients keep every partial sum exact.
        prop_assert_eq!(
            finalize(&records, accumulator()),
            finalize(&shuffled, accumulator().unordered())
        );
    }
}
