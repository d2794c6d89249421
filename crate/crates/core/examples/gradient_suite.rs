//! Finite-difference check of every trainable loss on small randomly sized
//! models. The first argument picks the seed.

use fsacdm::gradsuite::{format_suite, run_suite, SuiteEntry};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let entries = run_suite(seed)?;
    print!("{}", format_suite(&entries));
    if !entries.iter().all(SuiteEntry::passed) {
        return Err("gradient check failed".into());
    }
    Ok(())
}
