//! Replays the checked-in fuzz seeds through their parsers: every seed is a
//! valid input, and truncated or bit-flipped variants must be rejected
//! cleanly rather than panic.

use std::path::PathBuf;

use plgmi::classifier::CheckpointSidecar;
use plgmi::data::{cifar, folder, idx, index_file};
use plgmi::eval::ReportBundle;
use plgmi::gan::{parse_history, GanSidecar};
use plgmi::manifest::RunManifest;
use plgmi::pipeline::{read_ablation_csv, StageStamp};
use plgmi::reconstruct::{parse_index, AttackRecord};
use plgmi::select::PseudoLabeledDataset;
use plgmi::testing::workspace_root;

type Parser = fn(&[u8]) -> bool;

fn utf8(data: &[u8], f: impl Fn(&str) -> bool) -> bool {
    std::str::from_utf8(data).is_ok_and(f)
}

const TARGETS: &[(&str, Parser)] = &[
    ("idx_images", |d| idx::parse_images(d).is_ok()),
    ("idx_labels", |d| idx::parse_labels(d).is_ok()),
    ("cifar_batch", |d| cifar::parse_batch(d).is_ok()),
    ("index_file", |d| utf8(d, |t| index_file::parse(t).is_ok())),
    ("image_decode", |d| folder::decode_image(d).is_ok()),
    ("manifest_yaml", |d| utf8(d, |t| RunManifest::from_yaml(t).is_ok())),
    ("selection_json", |d| PseudoLabeledDataset::parse(d).is_ok()),
    ("classifier_sidecar", |d| CheckpointSidecar::parse(d).is_ok()),
    ("gan_sidecar", |d| GanSidecar::parse(d).is_ok()),
    ("gan_history", |d| parse_history(d).is_ok()),
    ("attack_record", |d| AttackRecord::parse(d).is_ok()),
    ("attack_index", |d| parse_index(d).is_ok()),
    ("stage_stamp", |d| StageStamp::parse(d).is_ok()),
    ("ablation_csv", |d| read_ablation_csv(d).is_ok()),
    ("report_json", |d| ReportBundle::parse(d).is_ok()),
];

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = workspace_root().join("fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn every_target_has_accepted_seeds() {
    for &(target, parse) in TARGETS {
        let seeds = seeds(target);
        assert!(!seeds.is_empty(), "{target}: no seeds");
        for (p, bytes) in seeds {
            assert!(parse(&bytes), "{target}: seed {} rejected", p.display());
        }
    }
}

#[test]
fn damaged_seeds_do_not_panic() {
    for &(target, parse) in TARGETS {
        for (_, bytes) in seeds(target) {
            let step = (bytes.len() / 64).max(1);
            for cut in (0..bytes.len()).step_by(step) {
                parse(&bytes[..cut]);
            }
            for i in (0..bytes.len()).step_by(step) {
                let mut flipped = bytes.clone();
                flipped[i] ^= 0x5a;
                parse(&flipped);
            }
        }
    }
}

#[test]
fn index_paths_cannot_escape_the_attack_directory() {
    let header = "class,seed,status,selected,objective,path\n";
    for path in ["../x.safetensors", "/etc/passwd", "class_0/../../x"] {
        let text = format!("{header}0,1,ok,0,0.5,{path}\n");
        assert!(parse_index(text.as_bytes()).is_err(), "{path}");
    }
    let ok = format!("{header}0,1,ok,0,0.5,class_0/seed_1.safetensors\n");
    assert_eq!(parse_index(ok.as_bytes()).unwrap().len(), 1);
}
