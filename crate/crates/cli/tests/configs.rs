use std::path::Path;

use obliq_cli::config::load_config;
use serde_json::Value;

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

#[test]
fn every_bundled_config_validates() {
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "config.schema.json" {
            continue;
        }
        load_config(&path, Vec::new()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 2);
}

#[test]
fn schema_covers_the_top_level_fields() {
    let schema: Value = serde_json::from_slice(&std::fs::read(configs_dir().join("config.schema.json")).unwrap()).unwrap();
    let props = schema["properties"].as_object().unwrap();
    for key in ["name", "problem", "diffusion", "solver", "checks"] {
        assert!(props.contains_key(key), "{key}");
    }
    let solver = schema["$defs"]["solver"]["properties"].as_object().unwrap();
    for key in ["lattice", "penalty", "strategy", "monte_carlo", "pde"] {
        assert!(solver.contains_key(key), "{key}");
    }
}
