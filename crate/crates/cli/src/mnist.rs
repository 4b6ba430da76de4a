//! MNIST in the IDX format: big-endian `u32` magic, then big-endian `u32`
//! dimensions, then raw `u8` data.

use std::fmt;
use std::path::{Path, PathBuf};

use pbsnet::train::{Dataset, Split};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug)]
pub enum MnistError {
    Missing(PathBuf),
    Io(PathBuf, std::io::Error),
    Format(PathBuf, String),
}

impl fmt::Display for MnistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MnistError::Missing(p) => write!(f, "missing MNIST file {}", p.display()),
            MnistError::Io(p, e) => write!(f, "cannot read {}: {e}", p.display()),
            MnistError::Format(p, m) => write!(f, "malformed IDX file {}: {m}", p.display()),
        }
    }
}

impl std::error::Error for MnistError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

impl SplitTag {
    fn prefix(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "t10k",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistDataset {
    pub split: SplitTag,
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` pixels, row major.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl MnistDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.images[i * n..(i + 1) * n]
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn image_f64(&self, i: usize) -> Vec<f64> {
        self.image(i).iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.images.truncate(n * self.rows * self.cols);
    }

    pub fn to_split(&self) -> Split {
        let pixels = self.images.iter().map(|&p| p as f64 / 255.0).collect();
        let labels = self.labels.iter().map(|&l| l as usize).collect();
        Split::from_rows(pixels, self.rows * self.cols, labels).expect("lengths checked at parse time")
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn read(path: &Path) -> Result<Vec<u8>, MnistError> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(MnistError::Missing(path.to_path_buf())),
        Err(e) => Err(MnistError::Io(path.to_path_buf(), e)),
    }
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), String> {
    let magic = be_u32(bytes, 0).ok_or("truncated header")?;
    if magic != IMAGES_MAGIC {
        return Err(format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"));
    }
    let dims: Vec<usize> = (0..3).map(|k| be_u32(bytes, 4 + 4 * k).map(|v| v as usize)).collect::<Option<_>>().ok_or("truncated header")?;
    let len = dims[0] * dims[1] * dims[2];
    let data = &bytes[16..];
    if data.len() != len {
        return Err(format!("{} pixel bytes, header declares {len}", data.len()));
    }
    Ok((dims[0], dims[1], dims[2], data.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, String> {
    let magic = be_u32(bytes, 0).ok_or("truncated header")?;
    if magic != LABELS_MAGIC {
        return Err(format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4).ok_or("truncated header")? as usize;
    let data = &bytes[8..];
    if data.len() != n {
        return Err(format!("{} label bytes, header declares {n}", data.len()));
    }
    if let Some(l) = data.iter().find(|&&l| l > 9) {
        return Err(format!("label {l} outside 0..=9"));
    }
    Ok(data.to_vec())
}

pub fn file_names(split: SplitTag) -> (String, String) {
    let p = split.prefix();
    (format!("{p}-images-idx3-ubyte"), format!("{p}-labels-idx1-ubyte"))
}

pub fn load_split(dir: impl AsRef<Path>, split: SplitTag) -> Result<MnistDataset, MnistError> {
    let dir = dir.as_ref();
    let (img_name, lbl_name) = file_names(split);
    let (img_path, lbl_path) = (dir.join(img_name), dir.join(lbl_name));
    let img = read(&img_path)?;
    let lbl = read(&lbl_path)?;
    let (count, rows, cols, images) = parse_images(&img).map_err(|m| MnistError::Format(img_path.clone(), m))?;
    let labels = parse_labels(&lbl).map_err(|m| MnistError::Format(lbl_path, m))?;
    if labels.len() != count {
        return Err(MnistError::Format(img_path, format!("{count} images but {} labels", labels.len())));
    }
    Ok(MnistDataset { split, rows, cols, images, labels })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, MnistError> {
    let train = load_split(&dir, SplitTag::Train)?;
    let test = load_split(&dir, SplitTag::Test)?;
    Ok(Dataset { train: train.to_split(), test: test.to_split() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, data: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, n, r, c] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(data);
        v
    }

    fn idx_labels(data: &[u8]) -> Vec<u8> {
        let mut v = LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend_from_slice(&(data.len() as u32).to_be_bytes());
        v.extend_from_slice(data);
        v
    }

    #[test]
    fn parses_big_endian_headers() {
        let bytes = idx_images(2, 1, 3, &[0, 128, 255, 1, 2, 3]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_images(&bytes).unwrap(), (2, 1, 3, vec![0, 128, 255, 1, 2, 3]));
        assert_eq!(parse_labels(&idx_labels(&[7, 0])).unwrap(), vec![7, 0]);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(parse_images(&idx_images(2, 1, 3, &[0; 5])).unwrap_err().contains("declares 6"));
        assert!(parse_images(&idx_labels(&[1])).unwrap_err().contains("magic"));
        assert!(parse_labels(&idx_labels(&[10])).unwrap_err().contains("label 10"));
        assert!(parse_labels(&[0, 0]).is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_split(dir.path(), SplitTag::Test).unwrap_err();
        assert!(matches!(err, MnistError::Missing(_)));
        assert!(err.to_string().contains("t10k-images-idx3-ubyte"));

        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_images(1, 2, 2, &[0, 51, 102, 255])).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[4])).unwrap();
        let d = load_split(dir.path(), SplitTag::Test).unwrap();
        assert_eq!(d.image_f64(0), vec![0.0, 0.2, 0.4, 1.0]);
        assert_eq!(d.to_split().labels, vec![4]);
    }
}
