use std::path::PathBuf;

use radar_tr::scenarios::{by_name, names};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn shipped_scenario_files_match_the_generators() {
    for name in names() {
        let dir = tempfile::tempdir().unwrap();
        by_name(name).unwrap().write(dir.path()).unwrap();
        let mut files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        files.sort();
        assert!(!files.is_empty());
        for file in files {
            let fresh = std::fs::read(dir.path().join(&file)).unwrap();
            let on_disk = std::fs::read(shipped(name).join(&file))
                .unwrap_or_else(|e| panic!("{name}/{}: {e}", file.to_string_lossy()));
            assert!(
                fresh == on_disk,
                "scenarios/{name}/{} is stale; regenerate with `radar-tr scenario {name} --out scenarios/{name}`",
                file.to_string_lossy()
            );
        }
    }
}
