//! Train one toy-corpus model and print per-epoch validation metrics.
//!
//! `cargo run --release --example toy_run -- [technique] [rate] [seed] [prior] [dual_lr]`

use std::time::Instant;

use senvae::config::RunConfig;
use senvae::train::{self, Datasets};

fn main() -> senvae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_owned());
    let mut cfg = RunConfig::toy();
    cfg.set("objective.technique", &arg(0, "vanilla"))?;
    cfg.set("objective.r", &arg(1, "5"))?;
    cfg.set("run.seed", &arg(2, "0"))?;
    cfg.set("prior.kind", &arg(3, "standard"))?;
    cfg.prior_components = 10;
    if let Some(v) = args.get(4) {
        cfg.set("objective.dual_lr", v)?;
    }
    cfg.train.max_epochs = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(40);
    cfg.train.valid_samples = 16;
    let trace_every: u64 = std::env::var("TRACE_EVERY").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    cfg.train.step_metrics = true;
    let data = Datasets::load(&cfg)?;
    println!("train {} valid {} vocab {}", data.train.len(), data.valid.len(), data.vocab.len());
    let t0 = Instant::now();
    let target = 0.9 * cfg.objective.rate;
    let mut reached: Option<u64> = None;
    let out = train::train(&cfg, &data, None, &mut |row| {
        if row.split == "step" && reached.is_none() && row.rate >= target {
            reached = Some(row.step);
        }
        if row.split == "step" && trace_every > 0 && row.step % trace_every == 0 {
            println!("  step {:>5} D {:.3} R {:.3} u {:.3} beta {:.3} loss {:.3}", row.step, row.distortion, row.rate, row.u, row.beta, row.loss.unwrap());
        }
        if row.split == "valid" {
            println!(
                "epoch {:>2} step {:>5} D {:.3} R {:.3} nll {:.3} ppl {:.2} au {} u {:.3} beta {:.3} [{:.0}s]",
                row.epoch, row.step, row.distortion, row.rate, row.nll.unwrap(), row.ppl.unwrap(),
                row.au.unwrap(), row.u, row.beta, t0.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;
    println!("best epoch {} nll {:.3}; training rate first >= {target:.2} at step {reached:?}", out.best_epoch, out.best_valid_nll);
    Ok(())
}
