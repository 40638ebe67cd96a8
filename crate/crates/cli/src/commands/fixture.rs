use anyhow::Result;
use chili_core::eval::{generate_cbm_fixture, generate_fixture, FixtureSpec};

use crate::args::{FixtureArgs, FixtureKind};

pub fn run(args: &FixtureArgs) -> Result<()> {
    let spec = FixtureSpec::default();
    let fx = match args.kind {
        FixtureKind::Detection => generate_fixture(args.seed, &spec)?,
        FixtureKind::Cbm => generate_cbm_fixture(args.seed, &spec)?,
    };
    fx.write(&args.out_dir)?;
    println!(
        "fixture `{}`: {} probe and {} evaluation samples under {}",
        fx.model_id,
        fx.probe.len(),
        fx.eval.len(),
        args.out_dir.display()
    );
    Ok(())
}
