#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_attnalign");

/// Runs the binary in `cwd` with `ATTNALIGN_OUT` cleared.
pub fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env_remove("ATTNALIGN_OUT").output().expect("binary runs")
}

pub fn ok(cwd: &Path, args: &[&str]) -> Output {
    let out = run(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A small end-to-end pipeline covering every subcommand, run in `cwd`
/// with relative paths.
pub const PIPELINE: &[&[&str]] = &[
    &["gen-corpus", "--seed", "3", "--sentences", "120", "--out", "corpus"],
    &[
        "train", "--corpus", "corpus", "--seed", "3", "--epochs", "2", "--batch-size", "16", "--dev-size", "20",
        "--encoder-layers", "1", "--decoder-layers", "2", "--heads", "2", "--d-model", "16", "--d-ff", "32",
        "--out", "train",
    ],
    &["align", "--model", "train/best.ckpt", "--corpus", "corpus", "--out", "align-avg"],
    &["align", "--model", "train/best.ckpt", "--corpus", "corpus", "--mode", "head-importance", "--mask", "--out", "align-hi"],
    &["eval-aer", "--hyp", "align-avg/alignments.pharaoh", "--gold", "align-avg/gold.pharaoh", "--out", "aer"],
    &[
        "attrib", "--model", "train/best.ckpt", "--corpus", "corpus", "--limit", "3", "--psi", "--saliency", "--samples",
        "4", "--svg", "1", "--out", "attrib",
    ],
    &["probe", "--model", "train/best.ckpt", "--corpus", "corpus", "--svg", "1", "--out", "probe"],
    &[
        "report", "--model", "train/best.ckpt", "--corpus", "corpus", "--attrib-sentences", "3", "--samples", "4",
        "--svg", "1", "--out", "report",
    ],
];

/// Runs the pipeline twice in fresh directories and compares the trees.
/// Returns the number of files compared, or the first differing path.
pub fn pipeline_is_deterministic(scratch: &Path) -> Result<usize, String> {
    let mut trees = Vec::new();
    for name in ["first", "second"] {
        let dir = scratch.join("run");
        fs::create_dir_all(&dir).unwrap();
        for args in PIPELINE {
            ok(&dir, args);
        }
        let kept = scratch.join(name);
        fs::rename(&dir, &kept).unwrap();
        trees.push(tree(&kept));
    }
    let (a, b) = (&trees[0], &trees[1]);
    if a.keys().ne(b.keys()) {
        return Err(format!("file sets differ: {:?} vs {:?}", a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>()));
    }
    for (path, bytes) in a {
        if &b[path] != bytes {
            return Err(format!("{} differs", path.display()));
        }
    }
    Ok(a.len())
}
