//! A/B run of dot-product vs L1 attention on the needle retrieval task.
//!
//! `cargo run --release --example needle_ab -- [lr] [epochs] [batch]`

use std::time::Instant;

use ecoattn::train::{train_with, TaskKind, TrainConfig};
use ecoattn::ScoreKind;

fn main() -> ecoattn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arms = [(ScoreKind::DotProduct, 1.0), (ScoreKind::L1, 1.0), (ScoreKind::L1, 3.0)];
    for (kind, lambda) in arms {
        let mut cfg = TrainConfig::needle_baseline(kind, lambda);
        if let Some(lr) = args.first() {
            cfg.lr = lr.parse().expect("lr");
        }
        if let Some(e) = args.get(1) {
            cfg.epochs = e.parse().expect("epochs");
        }
        if let Some(b) = args.get(2) {
            cfg.batch = b.parse().expect("batch");
        }
        let task = cfg.task(TaskKind::NeedleRetrieval);
        let start = Instant::now();
        let res = train_with(&cfg, &task, |r| {
            println!("{kind} λ={lambda} epoch {:>2} loss {:.4} train {:.3} eval {:.3}", r.epoch, r.loss, r.train_acc, r.eval_acc)
        })?;
        println!(
            "{kind} λ={lambda}: eval {:.3} train {:.3} in {:.1?}",
            res.final_eval_acc,
            res.final_train_acc,
            start.elapsed()
        );
    }
    Ok(())
}
