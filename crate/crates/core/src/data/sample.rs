use std::path::Path;

use crate::error::{Error, Result, SampleFileError};

const MAGIC: &[u8; 7] = b"ILSEG1\0";

/// One 2D image with its partial label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    /// Category id per pixel; 0 is background or unlabeled.
    pub labels: Vec<u8>,
    /// Sorted ids labeled in this sample.
    pub annotated: Vec<u8>,
}

impl Sample {
    pub fn validate(&self) -> std::result::Result<(), SampleFileError> {
        let n = self.height * self.width;
        if n == 0 || self.image.len() != n || self.labels.len() != n {
            return Err(SampleFileError::ShapeMismatch(format!(
                "{}x{} with {} image and {} label values",
                self.height,
                self.width,
                self.image.len(),
                self.labels.len()
            )));
        }
        if let Some(&label) = self
            .labels
            .iter()
            .find(|&&l| l != 0 && !self.annotated.contains(&l))
        {
            return Err(SampleFileError::LabelNotAnnotated { label });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.image.len() * 5 + self.annotated.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.image {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.labels);
        out.push(self.annotated.len() as u8);
        out.extend_from_slice(&self.annotated);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, SampleFileError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(SampleFileError::BadMagic);
        }
        let mut cur = Cursor { bytes, pos: MAGIC.len() };
        let height = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| SampleFileError::ShapeMismatch(format!("extent {height}x{width}")))?;
        let image = cur
            .take(n.checked_mul(4).ok_or(SampleFileError::Truncated)?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = cur.take(n)?.to_vec();
        let count = cur.take(1)?[0] as usize;
        let annotated = cur.take(count)?.to_vec();
        if cur.pos != bytes.len() {
            return Err(SampleFileError::ShapeMismatch(format!(
                "{} trailing bytes after a {height}x{width} payload",
                bytes.len() - cur.pos
            )));
        }
        let sample = Sample {
            height,
            width,
            image,
            labels,
            annotated,
        };
        sample.validate()?;
        Ok(sample)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], SampleFileError> {
        let end = self.pos.checked_add(n).ok_or(SampleFileError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(SampleFileError::Truncated)?;
        self.pos = end;
        Ok(out)
    }
}

pub fn save_sample(sample: &Sample, path: &Path) -> Result<()> {
    sample.validate().map_err(|kind| Error::SampleFile {
        path: path.to_path_buf(),
        kind,
    })?;
    std::fs::write(path, sample.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Sample::from_bytes(&bytes).map_err(|kind| Error::SampleFile {
        path: path.to_path_buf(),
        kind,
    })
}
