//! Invert a held-out image to noise and denoise it back under the same
//! condition. Optional argument: a checkpoint from `tdm-edit train`.

mod common;

use tdm_edit::edit::round_trip;
use tdm_edit::metrics::{format_db, psnr};
use tdm_edit::solvers::{parse_trajectory, trajectory_bytes, SolverKind};

fn main() -> tdm_edit::Result<()> {
    let (cfg, ds, net) = common::setup();
    let codec = cfg.codec()?;
    for (i, p) in ds.pairs.iter().take(5).enumerate() {
        let src = p.pair.render_source()?;
        let x0 = codec.encode(&src)?;
        for solver in [SolverKind::Euler, SolverKind::SecondOrder] {
            let (up, down) = round_trip(&net, &x0, p.source_cond, 28, solver, 2.0)?;
            let back = codec.decode(down.end())?;
            println!(
                "image {i} {:12} PSNR {} dB, NFE {}",
                solver.name(),
                format_db(psnr(&src, &back)?),
                up.nfe() + down.nfe()
            );
            // Trajectories serialize losslessly.
            let bytes = trajectory_bytes(&up);
            assert_eq!(trajectory_bytes(&parse_trajectory(&bytes)?), bytes);
        }
    }
    Ok(())
}
