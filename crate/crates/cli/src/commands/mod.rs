use anyhow::Result;

use crate::args::Command;

mod calibrate;
mod cbm;
mod evaluate;
mod explain;
mod fixture;
mod score;
mod triplet;

/// Runs one subcommand. `Ok(false)` means it ran but reported failed checks.
pub fn run(command: &Command) -> Result<bool> {
    match command {
        Command::Calibrate(a) => calibrate::run(a),
        Command::Score(a) => score::run(a),
        Command::Detect(a) => evaluate::detect(a),
        Command::Segment(a) => evaluate::segment(a),
        Command::Triplet(a) => triplet::run(a),
        Command::CbmTrain(a) => cbm::run(a),
        Command::Explain(a) => explain::run(a),
        Command::Selftest(a) => return crate::selftest::run(a),
        Command::Fixture(a) => fixture::run(a),
    }?;
    Ok(true)
}
