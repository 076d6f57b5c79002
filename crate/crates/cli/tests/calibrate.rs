//! Hyperparameter sanity sweep for the learning-signal checks. Ignored by
//! default; run once with `cargo test -p deltatune-cli --test calibrate
//! --release -- --ignored --nocapture` when re-deriving the pinned settings
//! in the acceptance suite.

use deltatune_cli::spec::{DeltaChoice, ModelSpec};
use deltatune_cli::tasks::{TaskId, TaskSpec};
use deltatune_cli::train::{run_train, TrainOptions};
use deltatune_core::backbones::{NamingConvention, ToyformerConfig};
use deltatune_core::deltas::DeltaKind;

fn opts(delta: DeltaChoice, lr: f64, batch: usize, pooler: bool, seed: u64) -> TrainOptions {
    TrainOptions {
        model: ModelSpec {
            convention: NamingConvention::A,
            config: ToyformerConfig { seed, ..Default::default() },
        },
        delta,
        task: TaskSpec::new(TaskId::Parity, seed),
        steps: 500,
        lr,
        out: None,
        train_pooler: pooler,
        batch_size: batch,
    }
}

#[test]
#[ignore]
fn parity_sweep() {
    for seed in [1u64, 2, 3, 7] {
        for (name, delta, lr, batch, pooler) in [
            ("baseline", DeltaChoice::None, 0.5, 32, false),
            ("lora", DeltaChoice::Kind(DeltaKind::Lora), 1.0, 32, false),
            ("lora", DeltaChoice::Kind(DeltaKind::Lora), 2.0, 32, false),
            ("bitfit", DeltaChoice::Kind(DeltaKind::Bitfit), 0.4, 192, true),
            ("bitfit", DeltaChoice::Kind(DeltaKind::Bitfit), 1.0, 32, false),
            ("adapter", DeltaChoice::Kind(DeltaKind::Adapter), 1.0, 32, false),
        ] {
            match run_train(&opts(delta.clone(), lr, batch, pooler, seed)) {
                Ok(r) => println!(
                    "seed {seed} {name} lr {lr} batch {batch} pooler {pooler}: \
                     train {:.3} test {:.3} final loss {:.4}",
                    r.train_acc,
                    r.test_acc,
                    r.losses.last().unwrap()
                ),
                Err(e) => println!("seed {seed} {name} lr {lr}: failed: {e}"),
            }
        }
    }
}
