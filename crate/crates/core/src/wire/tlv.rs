//! Tag-length-value field encoding used inside message bodies.
//!
//! Each field is `tag: u8, len: u32 BE, value: [u8; len]`. Integers are fixed
//! width big-endian, strings are UTF-8 and nested records are themselves a
//! sequence of fields.

use super::WireError;

pub(crate) struct FieldWriter {
    buf: Vec<u8>,
}

impl FieldWriter {
    pub fn new(buf: Vec<u8>) -> Self {
        FieldWriter { buf }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    fn header(&mut self, tag: u8, len: usize) {
        self.buf.push(tag);
        self.buf.extend_from_slice(&(len as u32).to_be_bytes());
    }

    pub fn bytes(&mut self, tag: u8, value: &[u8]) {
        self.header(tag, value.len());
        self.buf.extend_from_slice(value);
    }

    pub fn str(&mut self, tag: u8, value: &str) {
        self.bytes(tag, value.as_bytes());
    }

    pub fn u8(&mut self, tag: u8, value: u8) {
        self.bytes(tag, &[value]);
    }

    pub fn i32(&mut self, tag: u8, value: i32) {
        self.bytes(tag, &value.to_be_bytes());
    }

    pub fn u64(&mut self, tag: u8, value: u64) {
        self.bytes(tag, &value.to_be_bytes());
    }

    pub fn u128(&mut self, tag: u8, value: u128) {
        self.bytes(tag, &value.to_be_bytes());
    }

    pub fn nested(&mut self, tag: u8, build: impl FnOnce(&mut FieldWriter)) {
        let start = self.buf.len();
        self.header(tag, 0);
        build(self);
        let len = (self.buf.len() - start - 5) as u32;
        self.buf[start + 1..start + 5].copy_from_slice(&len.to_be_bytes());
    }
}

/// Parsed view over a field sequence. Lookups take the first occurrence of a tag.
pub(crate) struct Fields<'a> {
    msg: &'static str,
    fields: Vec<(u8, &'a [u8])>,
}

impl<'a> Fields<'a> {
    pub fn parse(msg: &'static str, mut body: &'a [u8]) -> Result<Self, WireError> {
        let mut fields = Vec::new();
        while !body.is_empty() {
            if body.len() < 5 {
                return Err(WireError::Truncated {
                    expected: 5,
                    actual: body.len(),
                });
            }
            let tag = body[0];
            let len = u32::from_be_bytes(body[1..5].try_into().unwrap()) as usize;
            let rest = &body[5..];
            if rest.len() < len {
                return Err(WireError::Truncated {
                    expected: len,
                    actual: rest.len(),
                });
            }
            fields.push((tag, &rest[..len]));
            body = &rest[len..];
        }
        Ok(Fields { msg, fields })
    }

    pub fn get(&self, tag: u8) -> Option<&'a [u8]> {
        self.fields.iter().find(|(t, _)| *t == tag).map(|(_, v)| *v)
    }

    pub fn all(&self, tag: u8) -> impl Iterator<Item = &'a [u8]> + '_ {
        self.fields
            .iter()
            .filter(move |(t, _)| *t == tag)
            .map(|(_, v)| *v)
    }

    pub fn require(&self, tag: u8) -> Result<&'a [u8], WireError> {
        self.get(tag).ok_or(WireError::MissingField { msg: self.msg, tag })
    }

    fn fixed<const N: usize>(&self, tag: u8, raw: &[u8]) -> Result<[u8; N], WireError> {
        raw.try_into().map_err(|_| WireError::MalformedField {
            msg: self.msg,
            tag,
        })
    }

    pub fn u8(&self, tag: u8) -> Result<u8, WireError> {
        Ok(self.fixed::<1>(tag, self.require(tag)?)?[0])
    }

    pub fn i32(&self, tag: u8) -> Result<i32, WireError> {
        Ok(i32::from_be_bytes(self.fixed(tag, self.require(tag)?)?))
    }

    pub fn u64(&self, tag: u8) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.fixed(tag, self.require(tag)?)?))
    }

    pub fn u64_raw(&self, tag: u8, raw: &[u8]) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.fixed(tag, raw)?))
    }

    pub fn u128(&self, tag: u8) -> Result<u128, WireError> {
        Ok(u128::from_be_bytes(self.fixed(tag, self.require(tag)?)?))
    }

    pub fn opt_u64(&self, tag: u8) -> Result<Option<u64>, WireError> {
        self.get(tag).map(|_| self.u64(tag)).transpose()
    }

    pub fn str(&self, tag: u8) -> Result<String, WireError> {
        self.str_raw(tag, self.require(tag)?)
    }

    pub fn str_raw(&self, tag: u8, raw: &[u8]) -> Result<String, WireError> {
        String::from_utf8(raw.to_vec()).map_err(|_| WireError::MalformedField {
            msg: self.msg,
            tag,
        })
    }

    pub fn opt_str(&self, tag: u8) -> Result<Option<String>, WireError> {
        self.get(tag).map(|raw| self.str_raw(tag, raw)).transpose()
    }

    pub fn malformed(&self, tag: u8) -> WireError {
        WireError::MalformedField { msg: self.msg, tag }
    }
}
