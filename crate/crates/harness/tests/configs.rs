use std::path::Path;

use dalebp::ExperimentConfig;

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let (cfg, _) = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(cfg.network.seed, cfg.seed, "{}", path.display());
            n += 1;
        }
    }
    assert!(n >= 4);
}
