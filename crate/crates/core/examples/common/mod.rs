//! Shared setup: load the checkpoint named on the command line, or train a
//! small model on the spot. The quick model is enough to exercise the code;
//! use `tdm-edit train` for edits worth looking at.

use std::path::Path;

use tdm_edit::cli::train_fresh;
use tdm_edit::config::RunConfig;
use tdm_edit::flow::load_checkpoint;
use tdm_edit::net::VelocityNet;
use tdm_edit::synth::{make_dataset, Dataset};

pub fn setup() -> (RunConfig, Dataset, VelocityNet) {
    let mut cfg = RunConfig::default();
    let checkpoint = std::env::args().nth(1);
    if checkpoint.is_none() {
        cfg.set("data.count", "384").unwrap();
        cfg.set("train.epochs", "6").unwrap();
    }
    let ds = make_dataset(&cfg.data).expect("dataset");
    let net = match checkpoint {
        Some(p) => load_checkpoint(Path::new(&p)).expect("checkpoint"),
        None => {
            eprintln!("no checkpoint given; training a quick model on 384 images");
            train_fresh(&cfg, &ds).expect("training").0
        }
    };
    (cfg, ds, net)
}
