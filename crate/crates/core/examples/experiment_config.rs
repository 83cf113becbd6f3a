// Resolve an experiment config from a preset plus TOML, show the key that a
// bad config trips over, and run the built-in self-check.

use gdr::experiment::{cmd_verify, ExperimentConfig, Preset, VerifyHooks};

pub fn run_example() -> gdr::Result<()> {
    let base = ExperimentConfig::preset(Preset::PaperFashion);
    let cfg = ExperimentConfig::from_toml_over(&base, "[train]\nbeta = 0.25\n\n[seeds]\ninit = 42\n")?;
    cfg.validate()?;
    println!("config hash {}", cfg.hash()?);
    println!("{}", cfg.to_toml()?);

    match ExperimentConfig::from_toml("[gdr]\nsampels = 10\n") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are rejected"),
    }

    let report = cmd_verify(&VerifyHooks::default());
    print!("{}", report.table());
    assert!(report.passed());
    Ok(())
}

#[allow(dead_code)]
fn main() -> gdr::Result<()> {
    run_example()
}
