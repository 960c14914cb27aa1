//! Top-k counting metrics: the estimator on hand-made proposals, then a
//! full evaluation of trained checkpoints.
//!
//! `cargo run --release --example topk_eval -- <rpn.ckpt> <dpn.ckpt>`
//! (checkpoints from the `two_stage_training` example).

use repcount::data::{generate_dataset, DatasetSpec, SceneSpec};
use repcount::eval::{evaluate, mae_rmse, topk_count_estimate};
use repcount::geometry::BBox;
use repcount::pipeline::Counter;

fn main() -> repcount::Result<()> {
    let gt = [BBox::new(0.0, 0.0, 10.0, 10.0)];
    let ranked = [
        (BBox::new(10.0 / 3.0, 0.0, 40.0 / 3.0, 10.0), 9.0),
        (BBox::new(60.0 / 14.0, 0.0, 200.0 / 14.0, 10.0), 12.0),
        (BBox::new(50.0, 50.0, 60.0, 60.0), 100.0),
    ];
    for k in 1..=3 {
        println!("k={k}: estimate {}", topk_count_estimate(&ranked, &gt, k)?);
    }
    println!("{:?}", mae_rmse(&[(10.0, 12.0), (20.0, 17.0), (5.0, 5.0)])?);

    let mut args = std::env::args().skip(1);
    let (Some(rpn), Some(dpn)) = (args.next(), args.next()) else {
        println!("pass <rpn.ckpt> <dpn.ckpt> to evaluate trained checkpoints");
        return Ok(());
    };
    let counter = Counter::from_checkpoints(rpn.as_ref(), Some(dpn.as_ref()))?;
    let test = generate_dataset(&DatasetSpec { scenes: 10, scene: SceneSpec::desk(), seed: 2 })?;
    let report = evaluate(&counter, &test, &[1, 3, 5])?;
    for (k, m) in &report.dpn {
        println!("density network, k={k}: mae {:.2} rmse {:.2}", m.mae, m.rmse);
    }
    for (k, m) in &report.fast {
        println!("repetition score, k={k}: mae {:.2} rmse {:.2}", m.mae, m.rmse);
    }
    Ok(())
}
