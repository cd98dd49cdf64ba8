// SPDX-License-Identifier: Apache-2.0

//! Argument and return-value encoding.
//!
//! A packed struct is its fields laid end to end, little-endian, with no
//! padding, in declaration order.

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    U64,
    I64,
    F32,
    F64,
    /// Fixed-length byte array.
    Bytes(usize),
}

impl FieldType {
    pub fn width(self) -> usize {
        match self {
            FieldType::U8 | FieldType::I8 => 1,
            FieldType::U16 | FieldType::I16 => 2,
            FieldType::U32 | FieldType::I32 | FieldType::F32 => 4,
            FieldType::U64 | FieldType::I64 | FieldType::F64 => 8,
            FieldType::Bytes(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    U8(u8),
    I8(i8),
    U16(u16),
    I16(i16),
    U32(u32),
    I32(i32),
    U64(u64),
    I64(i64),
    F32(f32),
    F64(f64),
    Bytes(Vec<u8>),
}

impl Value {
    /// Integer value widened to `i128`, if this is an integer.
    pub fn as_int(&self) -> Option<i128> {
        Some(match *self {
            Value::U8(v) => v.into(),
            Value::I8(v) => v.into(),
            Value::U16(v) => v.into(),
            Value::I16(v) => v.into(),
            Value::U32(v) => v.into(),
            Value::I32(v) => v.into(),
            Value::U64(v) => v.into(),
            Value::I64(v) => v.into(),
            _ => return None,
        })
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("expected {expected} values, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("field {field:?} expects {expected:?}")]
    Type { field: String, expected: FieldType },
    #[error("expected {expected} bytes, got {found}")]
    Length { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub ty: FieldType,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StructLayout {
    fields: Vec<Field>,
}

impl StructLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(mut self, name: &str, ty: FieldType) -> Self {
        self.fields.push(Field {
            name: name.to_owned(),
            ty,
        });
        self
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn size(&self) -> usize {
        self.fields.iter().map(|f| f.ty.width()).sum()
    }

    /// Byte offset of field `name`.
    pub fn offset_of(&self, name: &str) -> Option<usize> {
        let mut off = 0;
        for f in &self.fields {
            if f.name == name {
                return Some(off);
            }
            off += f.ty.width();
        }
        None
    }

    pub fn encode(&self, values: &[Value]) -> Result<Vec<u8>, CodecError> {
        if values.len() != self.fields.len() {
            return Err(CodecError::Arity {
                expected: self.fields.len(),
                found: values.len(),
            });
        }
        let mut out = Vec::with_capacity(self.size());
        for (f, v) in self.fields.iter().zip(values) {
            let mismatch = || CodecError::Type {
                field: f.name.clone(),
                expected: f.ty,
            };
            match (f.ty, v) {
                (FieldType::U8, Value::U8(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::I8, Value::I8(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::U16, Value::U16(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::I16, Value::I16(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::U32, Value::U32(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::I32, Value::I32(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::U64, Value::U64(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::I64, Value::I64(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::F32, Value::F32(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::F64, Value::F64(x)) => out.extend_from_slice(&x.to_le_bytes()),
                (FieldType::Bytes(n), Value::Bytes(b)) if b.len() == n => out.extend_from_slice(b),
                _ => return Err(mismatch()),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<Vec<Value>, CodecError> {
        if bytes.len() != self.size() {
            return Err(CodecError::Length {
                expected: self.size(),
                found: bytes.len(),
            });
        }
        let mut off = 0;
        let mut out = Vec::with_capacity(self.fields.len());
        for f in &self.fields {
            let b = &bytes[off..off + f.ty.width()];
            off += f.ty.width();
            macro_rules! le {
                ($t:ty, $v:ident) => {
                    Value::$v(<$t>::from_le_bytes(b.try_into().unwrap()))
                };
            }
            out.push(match f.ty {
                FieldType::U8 => le!(u8, U8),
                FieldType::I8 => le!(i8, I8),
                FieldType::U16 => le!(u16, U16),
                FieldType::I16 => le!(i16, I16),
                FieldType::U32 => le!(u32, U32),
                FieldType::I32 => le!(i32, I32),
                FieldType::U64 => le!(u64, U64),
                FieldType::I64 => le!(i64, I64),
                FieldType::F32 => le!(f32, F32),
                FieldType::F64 => le!(f64, F64),
                FieldType::Bytes(_) => Value::Bytes(b.to_vec()),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum ArgCodec {
    /// A single [`Value::Bytes`], passed through unchanged.
    #[default]
    RawBytes,
    PackedStruct(StructLayout),
}

impl ArgCodec {
    pub fn encode(&self, values: &[Value]) -> Result<Vec<u8>, CodecError> {
        match self {
            ArgCodec::RawBytes => match values {
                [Value::Bytes(b)] => Ok(b.clone()),
                [_] => Err(CodecError::Type {
                    field: "bytes".into(),
                    expected: FieldType::Bytes(0),
                }),
                _ => Err(CodecError::Arity {
                    expected: 1,
                    found: values.len(),
                }),
            },
            ArgCodec::PackedStruct(layout) => layout.encode(values),
        }
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<Vec<Value>, CodecError> {
        match self {
            ArgCodec::RawBytes => Ok(vec![Value::Bytes(bytes.to_vec())]),
            ArgCodec::PackedStruct(layout) => layout.decode(bytes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> StructLayout {
        StructLayout::new()
            .field("a", FieldType::U8)
            .field("b", FieldType::I32)
            .field("c", FieldType::Bytes(3))
            .field("d", FieldType::U64)
    }

    #[test]
    fn no_padding() {
        let l = layout();
        assert_eq!(l.size(), 1 + 4 + 3 + 8);
        assert_eq!(l.offset_of("d"), Some(8));
        let bytes = l
            .encode(&[
                Value::U8(1),
                Value::I32(-2),
                Value::Bytes(b"xyz".to_vec()),
                Value::U64(0x0102),
            ])
            .unwrap();
        assert_eq!(bytes, [1, 0xfe, 0xff, 0xff, 0xff, b'x', b'y', b'z', 2, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn errors() {
        let l = layout();
        assert!(matches!(l.encode(&[Value::U8(1)]), Err(CodecError::Arity { .. })));
        assert!(matches!(
            l.encode(&[Value::U16(1), Value::I32(0), Value::Bytes(vec![0; 3]), Value::U64(0)]),
            Err(CodecError::Type { .. })
        ));
        assert!(matches!(l.decode(&[0; 3]), Err(CodecError::Length { expected: 16, found: 3 })));
        assert!(ArgCodec::RawBytes.encode(&[Value::U8(1)]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(a: u8, b: i32, c: [u8; 3], d: u64, e: f64) {
            let l = layout().field("e", FieldType::F64);
            let vals = vec![Value::U8(a), Value::I32(b), Value::Bytes(c.to_vec()), Value::U64(d), Value::F64(e)];
            let back = l.decode(&l.encode(&vals).unwrap()).unwrap();
            // Compare bitwise so NaN payloads count as equal.
            prop_assert_eq!(&back[..4], &vals[..4]);
            match back[4] { Value::F64(x) => prop_assert_eq!(x.to_bits(), e.to_bits()), _ => unreachable!() }
        }
    }
}
