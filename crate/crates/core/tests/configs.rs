//! The shipped run manifests load, validate, and survive a YAML round trip.

use plgmi::manifest::RunManifest;
use plgmi::testing::workspace_root;

#[test]
fn shipped_configs_are_valid() {
    let dir = workspace_root().join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("yaml") {
            continue;
        }
        let m = RunManifest::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        m.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let back = RunManifest::from_yaml(&m.to_yaml().unwrap()).unwrap();
        assert_eq!(back.config_hash(), m.config_hash(), "{}", path.display());
        assert_eq!(path.file_stem().unwrap().to_str(), Some(m.run_id.as_str()));
        seen += 1;
    }
    assert!(seen >= 3);
}
