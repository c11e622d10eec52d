//! Capture attention keys/values from one latent and inject or blend them
//! into another forward pass. Optional argument: a checkpoint.

mod common;

use tdm_edit::edit::blend_kv;
use tdm_edit::flow::interpolate;
use tdm_edit::net::{AttentionHookMode, ForwardRequest, HookPlan};
use tdm_edit::LatentGrid;

fn main() -> tdm_edit::Result<()> {
    let (cfg, ds, net) = common::setup();
    let codec = cfg.codec()?;
    let config = net.config().clone();
    let tokens = config.grid_height * config.grid_width;
    let t = 0.5;
    // Two partly noised latents with the same noise.
    let noise = LatentGrid::filled(config.grid_height, config.grid_width, config.token_dim, 0.1);
    let x = interpolate(
        &codec.encode(&ds.pairs[0].pair.render_source()?)?,
        &noise,
        t,
    )?;
    let y = interpolate(
        &codec.encode(&ds.pairs[1].pair.render_source()?)?,
        &noise,
        t,
    )?;
    let cond = ds.pairs[0].source_cond;
    let run = |x: &LatentGrid, mode: AttentionHookMode, external| {
        let hooks = HookPlan::on_injection_blocks(&config, mode);
        net.forward(
            x,
            t,
            &ForwardRequest {
                cond,
                hooks: &hooks,
                external,
                adapter: None,
            },
        )
    };

    let plain = run(&x, AttentionHookMode::Passthrough, None)?;
    let own = run(&x, AttentionHookMode::Capture, None)?.captured;
    let from_y = run(&y, AttentionHookMode::Capture, None)?.captured;
    let first = *from_y.keys().next().expect("injection blocks");
    println!(
        "captured blocks {:?}, keys {:?}",
        from_y.keys().collect::<Vec<_>>(),
        from_y[&first].keys.dim()
    );

    let injected = run(&x, AttentionHookMode::InjectFull, Some(&from_y))?;
    // Keep x's own keys/values on the right half of the grid, y's on the left.
    let right: Vec<f32> = (0..tokens)
        .map(|i| f32::from(u8::from(i % config.grid_width >= config.grid_width / 2)))
        .collect();
    let blended = run(
        &x,
        AttentionHookMode::InjectBlended(right.clone()),
        Some(&from_y),
    )?;
    let self_injected = run(&x, AttentionHookMode::InjectFull, Some(&own))?;

    let dist = |a: &LatentGrid| a.squared_distance(&plain.velocity).unwrap().sqrt();
    println!("|v(inject y) - v|    = {:.4}", dist(&injected.velocity));
    println!("|v(blend half) - v|  = {:.4}", dist(&blended.velocity));
    println!(
        "|v(inject own) - v|  = {:.4}",
        dist(&self_injected.velocity)
    );

    let (k, _) = blend_kv(
        &right,
        &own[&first].keys,
        &own[&first].values,
        &from_y[&first].keys,
        &from_y[&first].values,
    )?;
    let last = config.grid_width - 1;
    println!(
        "blended key row 0 comes from y: {}, row {last} from x: {}",
        k.row(0) == from_y[&first].keys.row(0),
        k.row(last) == own[&first].keys.row(last)
    );
    Ok(())
}
