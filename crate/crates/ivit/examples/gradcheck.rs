//! Finite-difference validation of the autodiff engine: every graph op gets
//! an exhaustive check against central differences, then gradients flow
//! end-to-end through a toy model built from a real synthetic ROI. Exits
//! nonzero if any check fails.

use std::process::ExitCode;

fn main() -> ExitCode {
    match ivit::pipeline::run_gradcheck() {
        Ok(outcome) => {
            print!("{}", outcome);
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("gradcheck could not run: {}", e);
            ExitCode::FAILURE
        }
    }
}
