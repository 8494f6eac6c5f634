use std::path::PathBuf;

use aeqa::encoder::EncoderConfig;
use aeqa::verify::{gradcheck_suite, suite_config, CHECKED_OPS};

use crate::config::read_json;
use crate::failure::{CmdResult, Failure};

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    /// Corrupt one op's backward pass (negative control for the suite).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// `config` is an encoder config JSON; the tiny suite config by default.
pub fn run(config: Option<PathBuf>, args: GradcheckArgs) -> CmdResult {
    let config: EncoderConfig = match &config {
        Some(p) => read_json(p)?,
        None => suite_config(),
    };
    let fault = match &args.inject_fault {
        Some(op) => Some(
            CHECKED_OPS
                .iter()
                .copied()
                .find(|o| o == op)
                .ok_or_else(|| Failure::Usage(format!("unknown op {op:?}; checked ops: {}", CHECKED_OPS.join(", "))))?,
        ),
        None => None,
    };
    let report = gradcheck_suite(&config, fault)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "gradient check failed; implicated ops: {}",
            report.implicated_ops.join(", ")
        )))
    }
}
