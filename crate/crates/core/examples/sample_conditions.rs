//! Draw one image per condition from the same noise, with and without
//! guidance. Optional argument: a checkpoint from `tdm-edit train`.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use tdm_edit::edit::sample;
use tdm_edit::imageio::write_ppm;
use tdm_edit::solvers::SolverKind;
use tdm_edit::{ConditionId, LatentGrid};

fn main() -> tdm_edit::Result<()> {
    let (cfg, _ds, net) = common::setup();
    let codec = cfg.codec()?;
    let m = net.config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = m.grid_height * m.grid_width * m.token_dim;
    let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x1 = LatentGrid::from_vec(m.grid_height, m.grid_width, m.token_dim, noise)?;
    let out = std::env::temp_dir().join("sample_conditions_example");
    std::fs::create_dir_all(&out)?;
    for c in 0..m.vocab as u32 {
        for guidance in [1.0, 3.0] {
            let rec = sample(
                &net,
                &x1,
                ConditionId(c),
                28,
                SolverKind::SecondOrder,
                guidance,
            )?;
            let img = codec.decode(rec.end())?;
            let mean = img.pixels().iter().sum::<f32>() / img.pixels().len() as f32;
            println!("condition {c:2} guidance {guidance}: mean intensity {mean:.3}");
            write_ppm(&out.join(format!("c{c:02}_g{guidance}.ppm")), &img)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
