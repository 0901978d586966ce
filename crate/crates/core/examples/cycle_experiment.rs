//! Desk-scale clustering-cycle comparison: trains with C = 1 and C = 5 on
//! 2,000 synthetic tiles and prints per-epoch losses.
//!
//!     cargo run --release --example cycle_experiment -- [seed] [epochs] [lr] [cycles] [momentum] [batch]

use std::time::Instant;

use spectrum_xai::data::{prepare_segments, synth_generate, SegmentationConfig, SynthConfig};
use spectrum_xai::trainer::{run_cycle_experiment, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(60);
    let lr: Option<f64> = args.next().map(|s| s.parse()).transpose()?;
    let cycles: Vec<usize> = match args.next() {
        Some(s) => s.split(',').map(|c| c.parse()).collect::<Result<_, _>>()?,
        None => vec![1, 5],
    };
    let momentum: Option<f64> = args.next().map(|s| s.parse()).transpose()?;
    let batch: Option<usize> = args.next().map(|s| s.parse()).transpose()?;

    let synth = SynthConfig::desk(seed);
    let out = synth_generate(&synth)?;
    let segs = prepare_segments(
        &out.matrix,
        &SegmentationConfig {
            window: synth.window,
            ..Default::default()
        },
    )?;
    let mut base = TrainConfig {
        epochs_total: epochs,
        ..TrainConfig::desk(seed)
    };
    if let Some(lr) = lr {
        base.lr = lr;
    }
    if let Some(m) = momentum {
        base.momentum = m;
    }
    if let Some(b) = batch {
        base.batch_size = b;
    }
    let start = Instant::now();
    let exp = run_cycle_experiment(&segs, &base, &cycles)?;
    for run in &exp.runs {
        let losses: Vec<String> = run.history.losses().iter().map(|l| format!("{l:.4}")).collect();
        println!("C={:<2} {}", run.cycle, losses.join(" "));
        println!("     spikes at {:?}", run.history.spike_epochs());
    }
    eprintln!("{} segments, {:.1}s", segs.len(), start.elapsed().as_secs_f64());
    Ok(())
}
