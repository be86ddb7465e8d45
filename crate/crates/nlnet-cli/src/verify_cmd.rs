//! `nlnet verify`: run the oracle/gradient/identity/inflation suites.

use crate::artifacts::RunDir;
use crate::error::{CliError, CliResult};
use nlnet::verify::{verify_scope, VerifyOptions};
use std::path::Path;

pub fn verify(scope: &str, out: Option<&Path>) -> CliResult<()> {
    let reports = verify_scope(scope, &VerifyOptions::default()).map_err(CliError::from)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&r.render());
    }
    print!("{text}");
    if let Some(dir) = out {
        let mut run = RunDir::create(dir)?;
        run.write("verify.txt", &text)?;
        run.write_manifest()?;
    }
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures().into_iter().map(|c| c.name.clone()))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::verification(format!(
            "{} checks failed: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}
