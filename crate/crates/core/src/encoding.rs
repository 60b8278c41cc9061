//! Canonical length-prefixed encoding used for every hashed or signed payload.
//!
//! Fields are written in declaration order, each as a 4-byte big-endian length
//! followed by the raw bytes. Integers are 8-byte big-endian inside their field,
//! index lists are sorted ascending and written as consecutive 4-byte words.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("payload truncated at byte {0}")]
    Truncated(usize),
    #[error("field {field} has length {len}, expected {expected}")]
    BadLength {
        field: &'static str,
        len: usize,
        expected: usize,
    },
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Debug, Default, Clone)]
pub struct CanonicalWriter {
    buf: Vec<u8>,
}

impl CanonicalWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, data: &[u8]) -> &mut Self {
        let len = u32::try_from(data.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(data);
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.bytes(&v.to_be_bytes())
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.bytes(&[v])
    }

    /// Absent values encode as an empty field.
    pub fn opt_bytes(&mut self, data: Option<&[u8]>) -> &mut Self {
        self.bytes(data.unwrap_or(&[]))
    }

    pub fn opt_u64(&mut self, v: Option<u64>) -> &mut Self {
        match v {
            Some(v) => self.u64(v),
            None => self.bytes(&[]),
        }
    }

    /// Sorted copy of `indices`, one 4-byte word each.
    pub fn index_list(&mut self, indices: &[usize]) -> &mut Self {
        self.bytes(&encode_index_list(indices))
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub fn encode_index_list(indices: &[usize]) -> Vec<u8> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::with_capacity(sorted.len() * 4);
    for i in sorted {
        let i = u32::try_from(i).expect("client index exceeds u32");
        out.extend_from_slice(&i.to_be_bytes());
    }
    out
}

pub fn decode_index_list(raw: &[u8]) -> Result<Vec<usize>, DecodeError> {
    if raw.len() % 4 != 0 {
        return Err(DecodeError::BadLength {
            field: "index_list",
            len: raw.len(),
            expected: raw.len() / 4 * 4,
        });
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

#[derive(Debug, Clone)]
pub struct CanonicalReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> CanonicalReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let header = self
            .data
            .get(self.pos..self.pos + 4)
            .ok_or(DecodeError::Truncated(self.pos))?;
        let len = u32::from_be_bytes(header.try_into().unwrap()) as usize;
        let start = self.pos + 4;
        let field = self
            .data
            .get(start..start + len)
            .ok_or(DecodeError::Truncated(start))?;
        self.pos = start + len;
        Ok(field)
    }

    pub fn array<const N: usize>(&mut self, field: &'static str) -> Result<[u8; N], DecodeError> {
        let raw = self.bytes()?;
        raw.try_into().map_err(|_| DecodeError::BadLength {
            field,
            len: raw.len(),
            expected: N,
        })
    }

    pub fn opt_array<const N: usize>(
        &mut self,
        field: &'static str,
    ) -> Result<Option<[u8; N]>, DecodeError> {
        let raw = self.bytes()?;
        if raw.is_empty() {
            return Ok(None);
        }
        raw.try_into()
            .map(Some)
            .map_err(|_| DecodeError::BadLength {
                field,
                len: raw.len(),
                expected: N,
            })
    }

    pub fn u64(&mut self, field: &'static str) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array::<8>(field)?))
    }

    pub fn u8(&mut self, field: &'static str) -> Result<u8, DecodeError> {
        Ok(self.array::<1>(field)?[0])
    }

    pub fn index_list(&mut self) -> Result<Vec<usize>, DecodeError> {
        decode_index_list(self.bytes()?)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.data.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_length_prefixed_big_endian() {
        let out = CanonicalWriter::new().bytes(b"ab").u64(1).finish();
        assert_eq!(
            out,
            vec![0, 0, 0, 2, b'a', b'b', 0, 0, 0, 8, 0, 0, 0, 0, 0, 0, 0, 1]
        );
    }

    #[test]
    fn index_lists_are_order_independent() {
        let a = CanonicalWriter::new().index_list(&[3, 1, 2]).finish();
        let b = CanonicalWriter::new().index_list(&[1, 2, 3]).finish();
        assert_eq!(a, b);
    }

    #[test]
    fn reader_roundtrip_and_trailing() {
        let out = CanonicalWriter::new()
            .bytes(b"xyz")
            .opt_u64(None)
            .index_list(&[9, 4])
            .finish();
        let mut r = CanonicalReader::new(&out);
        assert_eq!(r.bytes().unwrap(), b"xyz");
        assert!(r.bytes().unwrap().is_empty());
        assert_eq!(r.index_list().unwrap(), vec![4, 9]);
        r.finish().unwrap();

        let mut r = CanonicalReader::new(&out[..5]);
        assert!(matches!(r.bytes(), Err(DecodeError::Truncated(_))));
    }
}
