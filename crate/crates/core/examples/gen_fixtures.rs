//! Regenerates the synthetic snitch trace and its companions.
//!
//! cargo run -p mbz --example gen_fixtures -- crates/core/tests/fixtures/snitch

use mbz::io::trace::write_trace;
use mbz::tracegen::SnitchScenario;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/tests/fixtures/snitch".into()));
    std::fs::create_dir_all(&dir)?;
    let g = SnitchScenario::default().generate();
    let mut trace = Vec::new();
    write_trace(&mut trace, &g.trace)?;
    std::fs::write(dir.join("trace.jsonl"), trace)?;
    std::fs::write(dir.join("orgs.csv"), g.org_map_csv)?;
    std::fs::write(dir.join("endpoints.toml"), g.endpoints_toml)?;
    println!("wrote {} events to {}", g.trace.len(), dir.display());
    Ok(())
}
