//! IDX image/label file parsing (the MNIST distribution format): big-endian
//! magic and dimension header followed by raw unsigned bytes.

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

const IMAGES_MAGIC: u32 = 2051; // 0x00000803
const LABELS_MAGIC: u32 = 2049; // 0x00000801

struct IdxReader<R> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> IdxReader<R> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            offset: self.offset,
            message: message.into(),
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.err(format!("truncated header: {e}")))?;
        self.offset += 4;
        Ok(u32::from_be_bytes(buf))
    }

    fn read_payload(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.err(format!("truncated payload: {e}")))?;
        self.offset += len as u64;
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(buf),
            Ok(_) => Err(self.err("trailing bytes after payload")),
            Err(e) => Err(self.err(format!("read error: {e}"))),
        }
    }
}

fn open(path: &Path) -> Result<IdxReader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        offset: 0,
        message: format!("cannot open: {e}"),
    })?;
    Ok(IdxReader {
        inner: BufReader::new(file),
        offset: 0,
        path: path.display().to_string(),
    })
}

/// Loads an IDX image file plus the matching IDX label file into a dataset
/// with pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut img = open(images_path)?;
    let magic = img.read_u32()?;
    if magic != IMAGES_MAGIC {
        return Err(img.err(format!(
            "wrong magic {magic:#010x}, expected {IMAGES_MAGIC:#010x} (images)"
        )));
    }
    let count = img.read_u32()? as usize;
    let rows = img.read_u32()? as usize;
    let cols = img.read_u32()? as usize;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(img.err(format!("degenerate dimensions {count}x{rows}x{cols}")));
    }
    let pixels = img.read_payload(count * rows * cols)?;

    let mut lab = open(labels_path)?;
    let magic = lab.read_u32()?;
    if magic != LABELS_MAGIC {
        return Err(lab.err(format!(
            "wrong magic {magic:#010x}, expected {LABELS_MAGIC:#010x} (labels)"
        )));
    }
    let label_count = lab.read_u32()? as usize;
    if label_count != count {
        return Err(lab.err(format!(
            "{label_count} labels for {count} images"
        )));
    }
    let labels = lab.read_payload(label_count)?;

    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::from_vec(vec![count, rows, cols, 1], data)?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(name, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_images(path: &Path, magic: u32, imgs: &[[u8; 4]]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        f.write_all(&(imgs.len() as u32).to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        for img in imgs {
            f.write_all(img).unwrap();
        }
    }

    fn write_labels(path: &Path, magic: u32, labels: &[u8]) {
        let mut f = File::create(path).unwrap();
        f.write_all(&magic.to_be_bytes()).unwrap();
        f.write_all(&(labels.len() as u32).to_be_bytes()).unwrap();
        f.write_all(labels).unwrap();
    }

    #[test]
    fn parses_handwritten_idx_files() {
        // Byte layout built by hand from the published format description.
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        write_images(&ip, IMAGES_MAGIC, &[[0, 51, 102, 255], [10, 20, 30, 40]]);
        write_labels(&lp, LABELS_MAGIC, &[3, 7]);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_dims(), (2, 2, 1));
        assert_eq!(ds.labels(), &[3, 7]);
        let px = ds.images().data();
        assert!((px[1] - 51.0 / 255.0).abs() < 1e-7);
        assert!((px[3] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_wrong_magic() {
        // An images file carrying the labels magic must be refused.
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        write_images(&ip, LABELS_MAGIC, &[[1, 2, 3, 4]]);
        write_labels(&lp, LABELS_MAGIC, &[1]);
        match load_idx(&ip, &lp) {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, 4);
                assert!(message.contains("wrong magic"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        {
            let mut f = File::create(&ip).unwrap();
            f.write_all(&IMAGES_MAGIC.to_be_bytes()).unwrap();
            f.write_all(&2u32.to_be_bytes()).unwrap();
            f.write_all(&2u32.to_be_bytes()).unwrap();
            f.write_all(&2u32.to_be_bytes()).unwrap();
            f.write_all(&[0u8; 3]).unwrap(); // needs 8
        }
        write_labels(&lp, LABELS_MAGIC, &[0, 1]);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("labels");
        write_images(&ip, IMAGES_MAGIC, &[[1, 2, 3, 4]]);
        write_labels(&lp, LABELS_MAGIC, &[1, 2]);
        match load_idx(&ip, &lp) {
            Err(Error::Parse { message, .. }) => {
                assert!(message.contains("2 labels for 1 images"), "{message}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
