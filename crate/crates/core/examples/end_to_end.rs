//! Generate, train, detect and evaluate one preset, printing progress.
//!
//! cargo run --release -p mscred --example end_to_end -- [preset] [epochs]

use std::time::Instant;

use mscred::config::RunConfig;
use mscred::pipeline;
use mscred::Exec;

fn main() -> mscred::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut run = RunConfig::preset(&args.next().unwrap_or_else(|| "toy".into()))?;
    if let Some(epochs) = args.next() {
        run.train.epochs = epochs.parse().map_err(|_| {
            mscred::Error::Config(format!("epochs must be an integer, got {epochs:?}"))
        })?;
    }
    let start = Instant::now();
    let out = pipeline::run_end_to_end(&run, Exec::default(), |e| {
        println!(
            "epoch {:>3} train {:>10.4} valid {:>10.4} {:>7.1}s",
            e.epoch, e.train_loss, e.valid_loss, e.wall_seconds
        )
    })?;
    let m = &out.report.metrics;
    println!(
        "precision {:.3} recall {:.3} f1 {:.3}",
        m.precision, m.recall, m.f1
    );
    println!(
        "recall@{} {:.3} over {} events",
        out.report.k, out.report.recall_at_k, out.report.rca_events
    );
    for d in &out.report.labels {
        println!(
            "label t={} duration={} channels {:?}",
            d.label.start, d.label.duration, d.channels
        );
    }
    for e in &out.detection.events {
        println!(
            "event {}..{} {:?} consistent={} top {:?}",
            e.start,
            e.end,
            e.severity,
            e.consistent,
            e.top_k(run.eval.k)
        );
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
