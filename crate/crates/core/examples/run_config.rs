//! The line-oriented run configuration: parse, override, validate, render.

use tdm_edit::config::RunConfig;

const TEXT: &str = "
# a smaller edit schedule
[run]
seed = 11

[edit]
steps = 20
k_front = 3
tau = 0.4
";

fn main() -> tdm_edit::Result<()> {
    let mut cfg = RunConfig::from_text(TEXT)?;
    cfg.set_pair("edit.k_tail=3")?;
    cfg.validate()?;
    println!("digest {}", cfg.digest());
    print!("{}", cfg.portable_text());

    for bad in ["edit.k_front=30", "edit.colour=blue", "train.epochs=many"] {
        let mut c = cfg.clone();
        let err = c.set_pair(bad).and_then(|_| c.validate()).unwrap_err();
        println!("{bad}: {err}");
    }

    // Rendering and parsing again is lossless.
    let again = RunConfig::from_text(&cfg.to_text())?;
    assert_eq!(again.digest(), cfg.digest());
    Ok(())
}
