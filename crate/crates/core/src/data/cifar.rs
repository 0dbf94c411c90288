//! Decoder for the CIFAR-10 binary batch format (one label byte followed by
//! a 3x32x32 channel-major image per record).

use crate::error::{Error, Result};

pub const SIDE: usize = 32;
pub const RECORD_PIXELS: usize = 3 * SIDE * SIDE;
const RECORD_LEN: usize = 1 + RECORD_PIXELS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarBatch {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl CifarBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * RECORD_PIXELS..(i + 1) * RECORD_PIXELS]
    }
}

pub fn parse_batch(bytes: &[u8]) -> Result<CifarBatch> {
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(Error::malformed(
            "cifar",
            format!("length {} is not a multiple of {RECORD_LEN}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * RECORD_PIXELS);
    for record in bytes.chunks_exact(RECORD_LEN) {
        if record[0] > 9 {
            return Err(Error::malformed("cifar", format!("label {} > 9", record[0])));
        }
        labels.push(record[0]);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok(CifarBatch { labels, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_records() {
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat(9).take(RECORD_PIXELS));
        bytes.push(2);
        bytes.extend(std::iter::repeat(1).take(RECORD_PIXELS));
        let b = parse_batch(&bytes).unwrap();
        assert_eq!(b.labels, vec![7, 2]);
        assert!(b.image(1).iter().all(|&p| p == 1));
    }

    #[test]
    fn rejects_partial_record_and_bad_label() {
        assert!(parse_batch(&[1, 2, 3]).is_err());
        let mut bytes = vec![11u8];
        bytes.extend(std::iter::repeat(0).take(RECORD_PIXELS));
        assert!(parse_batch(&bytes).is_err());
    }
}
