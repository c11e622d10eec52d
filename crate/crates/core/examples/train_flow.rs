//! Train a small conditional velocity network and print the loss curve.

use tdm_edit::cli::training_samples;
use tdm_edit::config::RunConfig;
use tdm_edit::flow::{save_checkpoint, train};
use tdm_edit::net::VelocityNet;
use tdm_edit::synth::make_dataset;

fn main() -> tdm_edit::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.set("data.count", "256")?;
    cfg.set("train.epochs", "8")?;
    let ds = make_dataset(&cfg.data)?;
    let samples = training_samples(&cfg, &ds)?;

    let mut net = VelocityNet::new(cfg.model.clone(), cfg.seed)?;
    println!("{} parameters", net.params().count());
    let report = train(&mut net, &samples, &cfg.train)?;
    for (epoch, chunk) in report.history.chunks(report.batches_per_epoch).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("epoch {epoch:2} loss {mean:.4}");
    }
    println!(
        "running loss {:.4}, accepted: {}",
        report.final_running_loss, report.accepted
    );

    let path = std::env::temp_dir().join("train_flow_example.ckpt");
    save_checkpoint(&path, &net)?;
    println!("saved {}", path.display());
    Ok(())
}
