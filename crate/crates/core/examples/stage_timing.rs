//! Times a few steps of every training stage under the toy configuration.

use std::time::Instant;

use hdc_core::pipeline::{train_stage, Dataset, HdcModel, Stage, TrainOptions};
use hdc_core::CodecConfig;

fn main() -> hdc_core::Result<()> {
    let cfg = CodecConfig::toy();
    let mut model = HdcModel::new(&cfg)?;
    println!("{} parameters", model.num_params());
    let data = Dataset::Synthetic { seed: 0 };
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    for stage in Stage::ALL {
        let t = Instant::now();
        let opts = TrainOptions { steps: Some(steps), log_path: None };
        let r = train_stage(&mut model, stage, &data, &opts)?;
        let per = t.elapsed().as_secs_f64() / steps as f64;
        println!(
            "{stage:<14} {per:>7.3} s/step  x{:>5} configured = {:>6.1} s  loss {:.4} -> {:.4}",
            stage.steps(&cfg),
            per * stage.steps(&cfg) as f64,
            r.losses[0],
            r.losses[r.losses.len() - 1]
        );
    }
    Ok(())
}
