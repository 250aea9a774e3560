//! Minimal protobuf wire-format reader and writer.
//!
//! Only what the ONNX subset needs: varints, 32/64-bit fixed fields and
//! length-delimited payloads. Group wire types are rejected.

use super::IngestError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value<'a> {
    Varint(u64),
    Fixed64(u64),
    Bytes(&'a [u8]),
    Fixed32(u32),
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> IngestError {
    IngestError::MalformedFile(msg.into())
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn varint(&mut self) -> Result<u64, IngestError> {
        let mut out = 0u64;
        for shift in (0..70).step_by(7) {
            let byte = *self
                .buf
                .get(self.pos)
                .ok_or_else(|| malformed("truncated varint"))?;
            self.pos += 1;
            if shift == 63 && byte > 1 {
                return Err(malformed("varint overflows 64 bits"));
            }
            out |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(out);
            }
        }
        Err(malformed("varint longer than 10 bytes"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IngestError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed(format!("field of {n} bytes overruns buffer")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    /// Reads the next `(field number, value)` pair.
    pub fn field(&mut self) -> Result<(u32, Value<'a>), IngestError> {
        let key = self.varint()?;
        let field = u32::try_from(key >> 3).map_err(|_| malformed("field number too large"))?;
        if field == 0 {
            return Err(malformed("field number 0"));
        }
        let value = match key & 7 {
            0 => Value::Varint(self.varint()?),
            1 => Value::Fixed64(u64::from_le_bytes(self.take(8)?.try_into().unwrap())),
            2 => {
                let len = usize::try_from(self.varint()?)
                    .map_err(|_| malformed("length too large"))?;
                Value::Bytes(self.take(len)?)
            }
            5 => Value::Fixed32(u32::from_le_bytes(self.take(4)?.try_into().unwrap())),
            wt => return Err(malformed(format!("unsupported wire type {wt}"))),
        };
        Ok((field, value))
    }
}

impl<'a> Value<'a> {
    pub fn bytes(self, what: &str) -> Result<&'a [u8], IngestError> {
        match self {
            Value::Bytes(b) => Ok(b),
            _ => Err(malformed(format!("{what}: expected length-delimited field"))),
        }
    }

    pub fn string(self, what: &str) -> Result<String, IngestError> {
        let b = self.bytes(what)?;
        String::from_utf8(b.to_vec()).map_err(|_| malformed(format!("{what}: invalid UTF-8")))
    }

    pub fn int(self, what: &str) -> Result<i64, IngestError> {
        match self {
            Value::Varint(v) => Ok(v as i64),
            _ => Err(malformed(format!("{what}: expected varint"))),
        }
    }

    /// Appends repeated int64 values, accepting both packed and unpacked encodings.
    pub fn push_ints(self, out: &mut Vec<i64>, what: &str) -> Result<(), IngestError> {
        match self {
            Value::Varint(v) => out.push(v as i64),
            Value::Bytes(b) => {
                let mut r = Reader::new(b);
                while !r.is_empty() {
                    out.push(r.varint()? as i64);
                }
            }
            _ => return Err(malformed(format!("{what}: expected int64 list"))),
        }
        Ok(())
    }

    /// Appends repeated float values, accepting both packed and unpacked encodings.
    pub fn push_floats(self, out: &mut Vec<f32>, what: &str) -> Result<(), IngestError> {
        match self {
            Value::Fixed32(v) => out.push(f32::from_bits(v)),
            Value::Bytes(b) => {
                if b.len() % 4 != 0 {
                    return Err(malformed(format!("{what}: packed floats not a multiple of 4 bytes")));
                }
                out.extend(
                    b.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
                );
            }
            _ => return Err(malformed(format!("{what}: expected float list"))),
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    fn raw_varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    fn key(&mut self, field: u32, wire_type: u8) {
        self.raw_varint((u64::from(field) << 3) | u64::from(wire_type));
    }

    pub fn varint(&mut self, field: u32, v: i64) {
        self.key(field, 0);
        self.raw_varint(v as u64);
    }

    pub fn fixed32(&mut self, field: u32, v: u32) {
        self.key(field, 5);
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, field: u32, b: &[u8]) {
        self.key(field, 2);
        self.raw_varint(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn string(&mut self, field: u32, s: &str) {
        self.bytes(field, s.as_bytes());
    }

    pub fn message(&mut self, field: u32, build: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::new();
        build(&mut inner);
        self.bytes(field, &inner.buf);
    }

    pub fn packed_ints(&mut self, field: u32, values: &[i64]) {
        let mut inner = Writer::new();
        for &v in values {
            inner.raw_varint(v as u64);
        }
        self.bytes(field, &inner.buf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn varint_round_trip(v in any::<i64>(), field in 1u32..1000) {
            let mut w = Writer::new();
            w.varint(field, v);
            let bytes = w.into_bytes();
            let mut r = Reader::new(&bytes);
            let (f, val) = r.field().unwrap();
            prop_assert_eq!(f, field);
            prop_assert_eq!(val.int("x").unwrap(), v);
            prop_assert!(r.is_empty());
        }
    }

    #[test]
    fn packed_and_unpacked_ints_decode_alike() {
        let mut w = Writer::new();
        w.packed_ints(8, &[3, 3, -1]);
        w.varint(8, 7);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        let mut out = Vec::new();
        while !r.is_empty() {
            let (_, v) = r.field().unwrap();
            v.push_ints(&mut out, "ints").unwrap();
        }
        assert_eq!(out, vec![3, 3, -1, 7]);
    }

    #[test]
    fn truncated_input_is_malformed() {
        let mut r = Reader::new(&[0x0a, 0x05, 0x01]);
        assert!(matches!(r.field(), Err(IngestError::MalformedFile(_))));
        let mut r = Reader::new(&[0x0b]);
        assert!(matches!(r.field(), Err(IngestError::MalformedFile(_))));
    }
}
