// SPDX-License-Identifier: Apache-2.0

//! The repository's guest manifest parses and every workload loads.

use std::path::Path;

use virtine::hypercall::HypercallPolicy;
use virtine::manifest::Manifest;

fn repo_manifest() -> Manifest {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../guests/manifest.toml");
    Manifest::load(&path).unwrap()
}

#[test]
fn every_workload_loads() {
    let m = repo_manifest();
    assert!(m.workloads.len() >= 7);
    for (name, entry) in &m.workloads {
        let image = entry.image().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(image.name(), name);
        assert_eq!(image.entry_mode(), entry.entry_mode);
        assert_eq!(image.mem_size(), entry.mem_size);
        assert!(entry.policy().allows(0));
    }
}

#[test]
fn echo_entry_matches_the_echo_policy() {
    let m = repo_manifest();
    assert_eq!(m.get("echo").unwrap().policy().allow_mask(), HypercallPolicy::echo().allow_mask());
}

#[test]
fn binary_entries_resolve_relative_to_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("bin")).unwrap();
    std::fs::write(dir.path().join("bin/f.bin"), [0xf4]).unwrap();
    std::fs::write(
        dir.path().join("manifest.toml"),
        "[workload.f]\nbinary = \"bin/f.bin\"\nentry_mode = \"protected32\"\nmem_size = 131072\nhypercalls = [\"read\", \"write\"]\n",
    )
    .unwrap();
    let m = Manifest::load(&dir.path().join("manifest.toml")).unwrap();
    let f = m.get("f").unwrap();
    assert_eq!(f.image().unwrap().code(), [0xf4]);
    assert_eq!(f.hypercall_mask, 1 | 1 << 4 | 1 << 5);
}
