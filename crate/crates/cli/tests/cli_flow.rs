//! Command-level flows: reproducible reports, baseline delta choices, and
//! hot-swap determinism.

use deltatune_cli::count::run_count;
use deltatune_cli::multitask::{run_multitask, MultitaskInput, MultitaskOptions};
use deltatune_cli::spec::{DeltaChoice, ModelSpec};
use deltatune_cli::tasks::{TaskId, TaskSpec};
use deltatune_cli::train::{run_train, TrainOptions};
use deltatune_cli::viscmd::run_vis;
use deltatune_core::backbones::{NamingConvention, ToyformerConfig};
use deltatune_core::deltas::DeltaKind;

fn spec(seed: u64) -> ModelSpec {
    ModelSpec {
        convention: NamingConvention::A,
        config: ToyformerConfig { seed, ..Default::default() },
    }
}

fn train_opts(delta: DeltaChoice, steps: usize) -> TrainOptions {
    TrainOptions {
        model: spec(5),
        delta,
        task: TaskSpec::new(TaskId::Majority, 5),
        steps,
        lr: 0.5,
        out: None,
        train_pooler: false,
        batch_size: 32,
    }
}

#[test]
fn identical_flags_produce_byte_identical_reports() {
    let a = run_train(&train_opts(DeltaChoice::Kind(DeltaKind::Bitfit), 40)).unwrap();
    let b = run_train(&train_opts(DeltaChoice::Kind(DeltaKind::Bitfit), 40)).unwrap();
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn baseline_delta_choices() {
    // head-only: no delta params, frozen backbone assertion holds
    let none = run_train(&train_opts(DeltaChoice::None, 30)).unwrap();
    assert_eq!(none.delta_params, 0);
    assert_eq!(none.ratio, 0.0);

    // full fine-tuning: nothing frozen, still no delta params
    let full = run_train(&train_opts(DeltaChoice::Full, 30)).unwrap();
    assert_eq!(full.delta_params, 0);
    assert!(full.losses.last().unwrap() < full.losses.first().unwrap());
}

#[test]
fn count_matches_bias_lengths_for_bitfit_defaults() {
    let report = run_count(&spec(1), &DeltaChoice::Kind(DeltaKind::Bitfit)).unwrap();
    // 4 projections of 32, ffn 64 + 32, and 2 layer norms of 32 per layer,
    // plus the embedding layer norm
    let per_layer = 4 * 32 + 64 + 32 + 2 * 32;
    assert_eq!(report.delta_params, 2 * per_layer + 32);
    assert!(report.bindings.iter().all(|b| b.kind == "bitfit"));
}

#[test]
fn multitask_repeats_same_checkpoint_deterministically() {
    let base = std::env::temp_dir().join(format!("deltatune-cliflow-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    for (task, sub) in [(TaskId::Parity, "p"), (TaskId::Majority, "m")] {
        let opts = TrainOptions {
            model: spec(5),
            delta: DeltaChoice::Kind(DeltaKind::Bitfit),
            task: TaskSpec::new(task, 5),
            steps: 40,
            lr: 0.5,
            out: Some(base.join(sub)),
            train_pooler: false,
            batch_size: 32,
        };
        run_train(&opts).unwrap();
    }

    let inputs = vec![
        MultitaskInput { tokens: vec![3, 6], delta: 0 },
        MultitaskInput { tokens: vec![3, 6], delta: 1 },
        // the same checkpoint twice must answer identically
        MultitaskInput { tokens: vec![3, 6], delta: 0 },
    ];
    let report = run_multitask(&MultitaskOptions {
        model: spec(5),
        delta_dirs: vec![base.join("p"), base.join("m")],
        inputs,
    })
    .unwrap();
    assert_eq!(report.predictions[0].prediction, report.predictions[2].prediction);
    std::fs::remove_dir_all(&base).unwrap();
}

#[test]
fn vis_marks_default_lora_positions() {
    let plain = run_vis(&spec(1), &DeltaChoice::None).unwrap();
    assert!(plain.contains("layer.[0-1]"));
    assert!(!plain.contains("[d]"));

    let with_lora = run_vis(&spec(1), &DeltaChoice::Kind(DeltaKind::Lora)).unwrap();
    assert!(with_lora.contains("[d]"));
    // default positions sit on the query/value projections, so the layers
    // still collapse and the delta shows inside the collapsed entry
    assert!(with_lora.contains("layer.[0-1]"));
    let query_block = with_lora.split("query\n").nth(1).unwrap();
    assert!(query_block.trim_start().starts_with("weight"));
    assert!(query_block.contains("lora_0 [d]"));
}

#[test]
fn divergence_is_reported_with_a_diagnostic() {
    let mut opts = train_opts(DeltaChoice::Full, 200);
    opts.lr = 1e6;
    let err = run_train(&opts).unwrap_err();
    assert!(err.to_string().contains("diverged"), "{err}");
}

#[test]
fn incompatible_checkpoint_is_a_strict_load_error() {
    let base = std::env::temp_dir().join(format!("deltatune-cliflow-bad-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    let opts = TrainOptions {
        model: spec(5),
        delta: DeltaChoice::Kind(DeltaKind::Bitfit),
        task: TaskSpec::new(TaskId::Parity, 5),
        steps: 10,
        lr: 0.5,
        out: Some(base.join("a")),
        train_pooler: false,
        batch_size: 32,
    };
    run_train(&opts).unwrap();
    // a backbone with a different head width cannot take this checkpoint
    let mismatched = ModelSpec {
        convention: NamingConvention::A,
        config: ToyformerConfig { seed: 5, n_classes: 3, ..Default::default() },
    };
    let err = run_multitask(&MultitaskOptions {
        model: mismatched,
        delta_dirs: vec![base.join("a"), base.join("a")],
        inputs: vec![MultitaskInput { tokens: vec![1, 2], delta: 0 }],
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("classifier"), "{msg}");
    std::fs::remove_dir_all(&base).unwrap();
}
