//! Helpers shared by unit, integration and acceptance tests.

use std::path::PathBuf;

/// Directory holding the decompressed MNIST IDX files: `$PLG_DATA_ROOT/mnist`
/// when set, else `<workspace>/data/mnist`. `None` if the files are absent.
pub fn mnist_root() -> Option<PathBuf> {
    dataset_root("mnist", "train-images-idx3-ubyte")
}

/// CIFAR-10 binary batches, located like [`mnist_root`].
pub fn cifar_root() -> Option<PathBuf> {
    dataset_root("cifar10", "data_batch_1.bin")
}

fn dataset_root(name: &str, probe: &str) -> Option<PathBuf> {
    let base = std::env::var_os("PLG_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data"));
    let root = base.join(name);
    root.join(probe).exists().then_some(root)
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}
