use crate::config::{CommonArgs, RunConfig};

pub fn run(args: &CommonArgs) -> anyhow::Result<()> {
    let config = RunConfig::resolve(args)?;
    let samples = super::prepare(&config)?;
    let pipeline = config.pipeline()?;
    let out = config.output_path();
    config.snapshot(out)?;

    let report = pipeline.run_benchmark(&samples, Some(out))?;
    let s = &report.summary;
    println!(
        "EX: {} ({}/{} with gold, {} samples, {} failures)",
        s.ex_display(),
        s.matched,
        s.with_gold,
        s.samples,
        s.failures
    );
    println!("results written to {}", out.display());
    Ok(())
}
