//! Serialization of active-message payloads.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! +-------------+----------------------------------------------+
//! | am_id : u32 | arg_0 | arg_1 | ... | arg_n                  |
//! +-------------+----------------------------------------------+
//! ```
//!
//! Scalars are written at their natural width. Tuples are the concatenation of
//! their members with no framing. A view is a `u64` byte length followed by
//! the raw little-endian elements, so a receiver can skip or size it without
//! knowing the element type. There is no schema on the wire: both ends must
//! agree on the signature, and decoding rejects trailing bytes.

use std::fmt;

use crate::error::{Error, Result};

/// Element types usable as scalars and as view elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElemType {
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
}

impl ElemType {
    pub const ALL: [ElemType; 10] = [
        ElemType::U8,
        ElemType::I8,
        ElemType::U16,
        ElemType::I16,
        ElemType::U32,
        ElemType::I32,
        ElemType::U64,
        ElemType::I64,
        ElemType::F32,
        ElemType::F64,
    ];

    pub fn width(self) -> usize {
        match self {
            ElemType::U8 | ElemType::I8 => 1,
            ElemType::U16 | ElemType::I16 => 2,
            ElemType::U32 | ElemType::I32 | ElemType::F32 => 4,
            ElemType::U64 | ElemType::I64 | ElemType::F64 => 8,
        }
    }
}

/// Type descriptor for one argument of a signature.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum TypeDesc {
    Scalar(ElemType),
    Tuple(Vec<TypeDesc>),
    View(ElemType),
}

/// A contiguous buffer of elements, carried by value in a frame.
///
/// Building a view copies the source into little-endian bytes, so the source
/// can be reused as soon as the view (or the send that built it) returns.
#[derive(Clone)]
pub struct View {
    elem: ElemType,
    bytes: Vec<u8>,
}

impl View {
    pub fn from_slice<T: Element>(items: &[T]) -> View {
        let mut bytes = Vec::with_capacity(items.len() * T::TYPE.width());
        for &item in items {
            item.write_le(&mut bytes);
        }
        View {
            elem: T::TYPE,
            bytes,
        }
    }

    pub fn from_bytes(elem: ElemType, bytes: Vec<u8>) -> Result<View> {
        if !bytes.len().is_multiple_of(elem.width()) {
            return Err(Error::InvalidArgument(format!(
                "view of {elem:?} needs a multiple of {} bytes, got {}",
                elem.width(),
                bytes.len()
            )));
        }
        Ok(View { elem, bytes })
    }

    pub fn elem(&self) -> ElemType {
        self.elem
    }

    pub fn len(&self) -> usize {
        self.bytes.len() / self.elem.width()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_vec<T: Element>(&self) -> Result<Vec<T>> {
        if T::TYPE != self.elem {
            return Err(Error::InvalidArgument(format!(
                "view holds {:?}, requested {:?}",
                self.elem,
                T::TYPE
            )));
        }
        Ok(decode_elems(&self.bytes))
    }
}

impl fmt::Debug for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "View<{:?}>[{} elems]", self.elem, self.len())
    }
}

impl PartialEq for View {
    fn eq(&self, other: &View) -> bool {
        self.elem == other.elem && self.bytes == other.bytes
    }
}

impl Eq for View {}

/// A dynamically typed argument. Floats compare by bit pattern.
#[derive(Clone, Debug)]
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
    Tuple(Vec<Value>),
    View(View),
}

impl PartialEq for Value {
    fn eq(&self, other: &Value) -> bool {
        use Value::*;
        match (self, other) {
            (U8(a), U8(b)) => a == b,
            (I8(a), I8(b)) => a == b,
            (U16(a), U16(b)) => a == b,
            (I16(a), I16(b)) => a == b,
            (U32(a), U32(b)) => a == b,
            (I32(a), I32(b)) => a == b,
            (U64(a), U64(b)) => a == b,
            (I64(a), I64(b)) => a == b,
            (F32(a), F32(b)) => a.to_bits() == b.to_bits(),
            (F64(a), F64(b)) => a.to_bits() == b.to_bits(),
            (Tuple(a), Tuple(b)) => a == b,
            (View(a), View(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Value {
    /// The descriptor this value encodes under.
    pub fn type_desc(&self) -> TypeDesc {
        use Value::*;
        match self {
            U8(_) => TypeDesc::Scalar(ElemType::U8),
            I8(_) => TypeDesc::Scalar(ElemType::I8),
            U16(_) => TypeDesc::Scalar(ElemType::U16),
            I16(_) => TypeDesc::Scalar(ElemType::I16),
            U32(_) => TypeDesc::Scalar(ElemType::U32),
            I32(_) => TypeDesc::Scalar(ElemType::I32),
            U64(_) => TypeDesc::Scalar(ElemType::U64),
            I64(_) => TypeDesc::Scalar(ElemType::I64),
            F32(_) => TypeDesc::Scalar(ElemType::F32),
            F64(_) => TypeDesc::Scalar(ElemType::F64),
            Tuple(items) => TypeDesc::Tuple(items.iter().map(Value::type_desc).collect()),
            View(v) => TypeDesc::View(v.elem),
        }
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        use Value::*;
        match self {
            U8(v) => v.write_le(out),
            I8(v) => v.write_le(out),
            U16(v) => v.write_le(out),
            I16(v) => v.write_le(out),
            U32(v) => v.write_le(out),
            I32(v) => v.write_le(out),
            U64(v) => v.write_le(out),
            I64(v) => v.write_le(out),
            F32(v) => v.write_le(out),
            F64(v) => v.write_le(out),
            Tuple(items) => items.iter().for_each(|item| item.encode_into(out)),
            View(v) => {
                out.extend_from_slice(&(v.bytes.len() as u64).to_le_bytes());
                out.extend_from_slice(&v.bytes);
            }
        }
    }
}

/// Encodes a frame: `am_id` followed by each argument in order.
pub fn encode(am_id: u32, args: &[Value]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + args.len() * 8);
    out.extend_from_slice(&am_id.to_le_bytes());
    for arg in args {
        arg.encode_into(&mut out);
    }
    out
}

/// Decodes a frame produced by [`encode`] under `signature`.
pub fn decode(frame: &[u8], signature: &[TypeDesc]) -> Result<(u32, Vec<Value>)> {
    let mut reader = Reader::new(frame);
    let id = reader.read::<u32>()?;
    let values = signature
        .iter()
        .map(|desc| reader.read_value(desc))
        .collect::<Result<Vec<_>>>()?;
    reader.finish()?;
    Ok((id, values))
}

/// Reads the `am_id` prefix without decoding the rest.
pub fn peek_am_id(frame: &[u8]) -> Result<u32> {
    Reader::new(frame).read::<u32>()
}

/// Stable 64-bit FNV-1a hash of a signature, used to detect registration
/// order mismatches between ranks.
pub fn signature_hash(signature: &[TypeDesc]) -> u64 {
    fn feed(hash: &mut u64, byte: u8) {
        *hash ^= byte as u64;
        *hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    fn walk(hash: &mut u64, desc: &TypeDesc) {
        match desc {
            TypeDesc::Scalar(e) => {
                feed(hash, 1);
                feed(hash, *e as u8);
            }
            TypeDesc::View(e) => {
                feed(hash, 2);
                feed(hash, *e as u8);
            }
            TypeDesc::Tuple(items) => {
                feed(hash, 3);
                feed(hash, items.len() as u8);
                items.iter().for_each(|d| walk(hash, d));
                feed(hash, 4);
            }
        }
    }
    let mut hash = 0xcbf2_9ce4_8422_2325;
    for desc in signature {
        walk(&mut hash, desc);
    }
    hash
}

/// Cursor over a frame.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::MalformedFrame(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn read<T: Element>(&mut self) -> Result<T> {
        Ok(T::read_le(self.take(T::TYPE.width())?))
    }

    pub fn read_view_bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.read::<u64>()?;
        let len = usize::try_from(len)
            .map_err(|_| Error::MalformedFrame(format!("view length {len} overflows")))?;
        self.take(len)
    }

    pub fn read_value(&mut self, desc: &TypeDesc) -> Result<Value> {
        Ok(match desc {
            TypeDesc::Scalar(e) => match e {
                ElemType::U8 => Value::U8(self.read()?),
                ElemType::I8 => Value::I8(self.read()?),
                ElemType::U16 => Value::U16(self.read()?),
                ElemType::I16 => Value::I16(self.read()?),
                ElemType::U32 => Value::U32(self.read()?),
                ElemType::I32 => Value::I32(self.read()?),
                ElemType::U64 => Value::U64(self.read()?),
                ElemType::I64 => Value::I64(self.read()?),
                ElemType::F32 => Value::F32(self.read()?),
                ElemType::F64 => Value::F64(self.read()?),
            },
            TypeDesc::Tuple(items) => Value::Tuple(
                items
                    .iter()
                    .map(|d| self.read_value(d))
                    .collect::<Result<Vec<_>>>()?,
            ),
            TypeDesc::View(e) => {
                let bytes = self.read_view_bytes()?;
                Value::View(
                    View::from_bytes(*e, bytes.to_vec())
                        .map_err(|err| Error::MalformedFrame(err.to_string()))?,
                )
            }
        })
    }

    /// Fails if any bytes are left.
    pub fn finish(self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::MalformedFrame(format!(
                "{} trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// Fixed-width little-endian element.
pub trait Element: Copy + Send + Sync + 'static {
    const TYPE: ElemType;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` has exactly `TYPE.width()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($($ty:ty => $tag:ident),* $(,)?) => {$(
        impl Element for $ty {
            const TYPE: ElemType = ElemType::$tag;
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$ty>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    )*};
}

impl_element!(
    u8 => U8, i8 => I8, u16 => U16, i16 => I16, u32 => U32,
    i32 => I32, u64 => U64, i64 => I64, f32 => F32, f64 => F64,
);

fn decode_elems<T: Element>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(T::TYPE.width())
        .map(T::read_le)
        .collect()
}

/// Statically typed argument list for an active message.
///
/// `encode` must produce exactly the bytes [`encode`](fn@encode) would for the
/// equivalent [`Value`]s, which keeps typed and dynamic peers interoperable.
pub trait Payload: Sized + Send + 'static {
    fn signature() -> Vec<TypeDesc>;
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(reader: &mut Reader<'_>) -> Result<Self>;
}

impl<T: Element> Payload for T {
    fn signature() -> Vec<TypeDesc> {
        vec![TypeDesc::Scalar(T::TYPE)]
    }
    fn encode(&self, out: &mut Vec<u8>) {
        self.write_le(out)
    }
    fn decode(reader: &mut Reader<'_>) -> Result<Self> {
        reader.read()
    }
}

impl<T: Element> Payload for Vec<T> {
    fn signature() -> Vec<TypeDesc> {
        vec![TypeDesc::View(T::TYPE)]
    }
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&((self.len() * T::TYPE.width()) as u64).to_le_bytes());
        for &item in self {
            item.write_le(out);
        }
    }
    fn decode(reader: &mut Reader<'_>) -> Result<Self> {
        let bytes = reader.read_view_bytes()?;
        if bytes.len() % T::TYPE.width() != 0 {
            return Err(Error::MalformedFrame(format!(
                "view of {} bytes is not a whole number of {:?}",
                bytes.len(),
                T::TYPE
            )));
        }
        Ok(decode_elems(bytes))
    }
}

impl Payload for View {
    fn signature() -> Vec<TypeDesc> {
        // Element type is unknown statically; raw bytes it is.
        vec![TypeDesc::View(ElemType::U8)]
    }
    fn encode(&self, out: &mut Vec<u8>) {
        Value::View(self.clone()).encode_into(out)
    }
    fn decode(reader: &mut Reader<'_>) -> Result<Self> {
        View::from_bytes(ElemType::U8, reader.read_view_bytes()?.to_vec())
    }
}

impl Payload for () {
    fn signature() -> Vec<TypeDesc> {
        Vec::new()
    }
    fn encode(&self, _out: &mut Vec<u8>) {}
    fn decode(_reader: &mut Reader<'_>) -> Result<Self> {
        Ok(())
    }
}

macro_rules! impl_payload_tuple {
    ($($name:ident),+) => {
        impl<$($name: Payload),+> Payload for ($($name,)+) {
            fn signature() -> Vec<TypeDesc> {
                let mut sig = Vec::new();
                $(sig.extend($name::signature());)+
                sig
            }
            #[allow(non_snake_case)]
            fn encode(&self, out: &mut Vec<u8>) {
                let ($($name,)+) = self;
                $($name.encode(out);)+
            }
            fn decode(reader: &mut Reader<'_>) -> Result<Self> {
                Ok(($($name::decode(reader)?,)+))
            }
        }
    };
}

impl_payload_tuple!(A);
impl_payload_tuple!(A, B);
impl_payload_tuple!(A, B, C);
impl_payload_tuple!(A, B, C, D);
impl_payload_tuple!(A, B, C, D, E);
impl_payload_tuple!(A, B, C, D, E, F);

/// Encodes a typed payload as a complete frame.
pub fn encode_payload<T: Payload>(am_id: u32, payload: &T) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(&am_id.to_le_bytes());
    payload.encode(&mut out);
    out
}

/// Decodes a complete frame as a typed payload.
pub fn decode_payload<T: Payload>(frame: &[u8]) -> Result<(u32, T)> {
    let mut reader = Reader::new(frame);
    let id = reader.read::<u32>()?;
    let payload = T::decode(&mut reader)?;
    reader.finish()?;
    Ok((id, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_payload_is_four_bytes() {
        let frame = encode(0, &[]);
        assert_eq!(frame, vec![0, 0, 0, 0]);
        assert_eq!(decode(&frame, &[]).unwrap(), (0, vec![]));
    }

    #[test]
    fn scalar_and_view_length() {
        let view = View::from_slice(&[1.0f64, 2.0, 3.0]);
        let frame = encode(7, &[Value::I64(-1), Value::View(view.clone())]);
        assert_eq!(frame.len(), 4 + 8 + 8 + 24);
        assert_eq!(&frame[..4], &7u32.to_le_bytes());
        assert_eq!(&frame[4..12], &(-1i64).to_le_bytes());
        assert_eq!(&frame[12..20], &24u64.to_le_bytes());
        let sig = [
            TypeDesc::Scalar(ElemType::I64),
            TypeDesc::View(ElemType::F64),
        ];
        let (id, values) = decode(&frame, &sig).unwrap();
        assert_eq!(id, 7);
        assert_eq!(values, vec![Value::I64(-1), Value::View(view)]);
    }

    #[test]
    fn u32_round_trip() {
        let frame = encode(3, &[Value::U32(42)]);
        let (id, values) = decode(&frame, &[TypeDesc::Scalar(ElemType::U32)]).unwrap();
        assert_eq!((id, values), (3, vec![Value::U32(42)]));
    }

    #[test]
    fn truncated_frame_is_malformed() {
        let frame = encode(3, &[Value::U64(42)]);
        let err = decode(&frame[..frame.len() - 1], &[TypeDesc::Scalar(ElemType::U64)]);
        assert!(matches!(err, Err(Error::MalformedFrame(_))));
        assert!(matches!(decode(&[1, 2], &[]), Err(Error::MalformedFrame(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let frame = encode(3, &[Value::U64(42)]);
        let err = decode(&frame, &[TypeDesc::Scalar(ElemType::U32)]);
        assert!(matches!(err, Err(Error::MalformedFrame(_))));
    }

    #[test]
    fn view_with_partial_element_rejected() {
        assert!(matches!(
            View::from_bytes(ElemType::F64, vec![0; 9]),
            Err(Error::InvalidArgument(_))
        ));
        let frame = encode(1, &[Value::View(View::from_slice(&[1u8, 2, 3]))]);
        assert!(matches!(
            decode(&frame, &[TypeDesc::View(ElemType::U16)]),
            Err(Error::MalformedFrame(_))
        ));
    }

    #[test]
    fn typed_payload_matches_dynamic_layout() {
        let typed = (5u32, -3i64, vec![1.5f64, -2.0], 9u8);
        let frame = encode_payload(11, &typed);
        let dynamic = encode(
            11,
            &[
                Value::U32(5),
                Value::I64(-3),
                Value::View(View::from_slice(&[1.5f64, -2.0])),
                Value::U8(9),
            ],
        );
        assert_eq!(frame, dynamic);
        let (id, values) = decode(&frame, &<(u32, i64, Vec<f64>, u8)>::signature()).unwrap();
        assert_eq!(id, 11);
        assert_eq!(values.len(), 4);
        let (id2, back) = decode_payload::<(u32, i64, Vec<f64>, u8)>(&frame).unwrap();
        assert_eq!(id2, 11);
        assert_eq!(back, typed);
    }

    #[test]
    fn signature_hash_distinguishes_order() {
        let a = <(u32, f64)>::signature();
        let b = <(f64, u32)>::signature();
        assert_ne!(signature_hash(&a), signature_hash(&b));
        assert_eq!(signature_hash(&a), signature_hash(&<(u32, f64)>::signature()));
        // Nesting is part of the shape.
        let flat = vec![
            TypeDesc::Scalar(ElemType::U8),
            TypeDesc::Scalar(ElemType::U8),
        ];
        let nested = vec![TypeDesc::Tuple(flat.clone())];
        assert_ne!(signature_hash(&flat), signature_hash(&nested));
    }

    fn arb_elem() -> impl Strategy<Value = ElemType> {
        proptest::sample::select(ElemType::ALL.to_vec())
    }

    fn arb_scalar(elem: ElemType) -> BoxedStrategy<Value> {
        match elem {
            ElemType::U8 => any::<u8>().prop_map(Value::U8).boxed(),
            ElemType::I8 => any::<i8>().prop_map(Value::I8).boxed(),
            ElemType::U16 => any::<u16>().prop_map(Value::U16).boxed(),
            ElemType::I16 => any::<i16>().prop_map(Value::I16).boxed(),
            ElemType::U32 => any::<u32>().prop_map(Value::U32).boxed(),
            ElemType::I32 => any::<i32>().prop_map(Value::I32).boxed(),
            ElemType::U64 => any::<u64>().prop_map(Value::U64).boxed(),
            ElemType::I64 => any::<i64>().prop_map(Value::I64).boxed(),
            ElemType::F32 => any::<u32>().prop_map(|b| Value::F32(f32::from_bits(b))).boxed(),
            ElemType::F64 => any::<u64>().prop_map(|b| Value::F64(f64::from_bits(b))).boxed(),
        }
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            arb_elem().prop_flat_map(arb_scalar),
            (arb_elem(), 0usize..5).prop_flat_map(|(e, n)| {
                proptest::collection::vec(any::<u8>(), n * e.width())
                    .prop_map(move |bytes| Value::View(View::from_bytes(e, bytes).unwrap()))
            }),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            proptest::collection::vec(inner, 0..4).prop_map(Value::Tuple)
        })
    }

    proptest! {
        #[test]
        fn round_trip_identity(id in any::<u32>(), args in proptest::collection::vec(arb_value(), 0..6)) {
            let sig: Vec<TypeDesc> = args.iter().map(Value::type_desc).collect();
            let frame = encode(id, &args);
            prop_assert_eq!(&frame, &encode(id, &args));
            let (back_id, back) = decode(&frame, &sig).unwrap();
            prop_assert_eq!(back_id, id);
            prop_assert_eq!(back, args);
        }
    }
}
