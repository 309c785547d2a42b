//! IDX dataset ingestion.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Batch, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "UNITQ_DATA";
pub const DEFAULT_DATA_DIR: &str = "data/digits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Pixel normalisation applied after scaling bytes to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    /// Statistics of the bundled 8×8 digits training split.
    fn default() -> Self {
        Self {
            mean: 0.306,
            std: 0.377,
        }
    }
}

/// Raw contents of one IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::DatasetMissing {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses an unsigned-byte IDX buffer whose magic must equal `magic`.
pub fn parse_idx(bytes: &[u8], magic: u32, path: &Path) -> Result<IdxArray> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..expected].to_vec(),
    })
}

pub fn load_idx(path: &Path, magic: u32) -> Result<IdxArray> {
    parse_idx(&read_file(path)?, magic, path)
}

/// Loads an image/label file pair into a normalised `N×1×H×W` batch.
pub fn load_pair(images: &Path, labels: &Path, norm: Normalization, classes: usize) -> Result<Batch> {
    let img = load_idx(images, IMAGE_MAGIC)?;
    let lab = load_idx(labels, LABEL_MAGIC)?;
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::Data(format!(
            "{} holds {n} images but {} holds {} labels",
            images.display(),
            labels.display(),
            lab.dims[0]
        )));
    }
    let (h, w) = (img.dims[1], img.dims[2]);
    let data = img
        .data
        .iter()
        .map(|&p| (p as f32 / 255.0 - norm.mean) / norm.std)
        .collect();
    let inputs = Tensor::new(vec![n, 1, h, w], data)?;
    Batch::new(inputs, lab.data.iter().map(|&l| l as usize).collect(), classes)
}

/// `<root>/<split>-images-idx3-ubyte` and `<root>/<split>-labels-idx1-ubyte`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub root: PathBuf,
    pub norm: Normalization,
    pub classes: usize,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            norm: Normalization::default(),
            classes: 10,
        }
    }

    /// Root from `UNITQ_DATA`, else the bundled digits directory.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from(DEFAULT_DATA_DIR), PathBuf::from))
    }

    pub fn paths(&self, split: Split) -> (PathBuf, PathBuf) {
        let p = split.prefix();
        (
            self.root.join(format!("{p}-images-idx3-ubyte")),
            self.root.join(format!("{p}-labels-idx1-ubyte")),
        )
    }

    pub fn load(&self, split: Split) -> Result<Batch> {
        let (i, l) = self.paths(split);
        load_pair(&i, &l, self.norm, self.classes)
    }
}
