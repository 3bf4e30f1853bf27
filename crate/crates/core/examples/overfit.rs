//! Trains at the default configuration and reports tracking metrics on the
//! training sequences and on a harsher held-out set.
use std::time::Instant;

use dptrack::data::{gen_dataset, SceneConfig};
use dptrack::eval::{run_ope, ModelTracker};
use dptrack::tracker::{train, TrackerConfig, Variant};

fn main() {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let batch = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let data = gen_dataset(&SceneConfig::default(), 8).expect("scene");
    let cfg = TrackerConfig { steps, batch_size: batch, ..TrackerConfig::default() };
    let start = Instant::now();
    let (model, store, log) = train(&cfg, &data, |r| {
        if r.step % 50 == 0 {
            eprintln!("{} {:.4}", r.step, r.loss)
        }
    })
    .expect("train");
    let secs = start.elapsed().as_secs_f64();
    println!("{} steps in {secs:.2}s, {:.3}s/step, last loss {:.4}", log.len(), secs / log.len() as f64, log.last().unwrap().loss);
    let t = Instant::now();
    let train_rep = run_ope(&ModelTracker { model: &model, store: &store, variant: Variant::Prompted }, &data, 1).unwrap();
    let a = &train_rep.aggregate;
    println!("train: p@20 {:.3} iou {:.3} auc {:.3} ({:.1}s)", a.precision_at_20, a.mean_iou, a.success_auc, t.elapsed().as_secs_f64());
    for seed in 1..=3 {
        let held = gen_dataset(&SceneConfig { seed: 1000 + seed, ..SceneConfig::harsh() }, 8).unwrap();
        let p = run_ope(&ModelTracker { model: &model, store: &store, variant: Variant::Prompted }, &held, 1).unwrap();
        let z = run_ope(&ModelTracker { model: &model, store: &store, variant: Variant::Plain }, &held, 1).unwrap();
        println!("harsh {seed}: prompted auc {:.3} p20 {:.3}, plain auc {:.3} p20 {:.3}", p.aggregate.success_auc, p.aggregate.precision_at_20, z.aggregate.success_auc, z.aggregate.precision_at_20);
    }
}
