//! Resolves a run configuration from a file plus `FSACDM_*` overrides and
//! prints the result as TOML, then shows a rejected configuration.

use fsacdm::cli::RunConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "steps = 200\nlr = 5e-4\n")?;
    let env = vec![("FSACDM_LR".to_string(), "1e-3".to_string()), ("FSACDM_OUT_DIR".to_string(), "runs/a".to_string())];
    let cfg = RunConfig::resolve(Some(&path), env)?;
    print!("{}", cfg.to_toml());

    match RunConfig::from_toml("d_model = 7\n") {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected (exit code {}): {e}", e.exit_code()),
    }
    Ok(())
}
