use std::path::{Path, PathBuf};

use super::{io_err, DataError, Dataset, Image};

/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn batch_files(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".to_string()],
        }
    }
}

/// Loads CIFAR-10 in the binary batch format.
///
/// `path` is either the batch directory (`data_batch_{1..5}.bin` for the train
/// split, `test_batch.bin` for test) or a single batch file. Ids are 0-based
/// record indices counted across the batches in order; labels are kept.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let files: Vec<PathBuf> = if path.is_dir() {
        split.batch_files().into_iter().map(|f| path.join(f)).collect()
    } else {
        vec![path.to_path_buf()]
    };

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = std::fs::read(file).map_err(io_err(file))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(DataError::RecordCountMismatch {
                bytes: bytes.len(),
                record: CIFAR_RECORD_BYTES,
            });
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            labels.push(u32::from(record[0]));
            images.push(decode_record(&record[1..])?);
        }
    }
    let ids = (0..images.len() as u64).collect();
    let name = match split {
        Split::Train => "cifar10-train",
        Split::Test => "cifar10-test",
    };
    Dataset::new(name, images, ids, Some(labels))
}

fn decode_record(planar: &[u8]) -> Result<Image, DataError> {
    let mut hwc = Vec::with_capacity(3 * PLANE);
    for p in 0..PLANE {
        hwc.extend_from_slice(&[planar[p], planar[PLANE + p], planar[2 * PLANE + p]]);
    }
    Image::from_q(SIDE, SIDE, 3, hwc)
}
