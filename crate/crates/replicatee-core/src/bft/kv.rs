//! The replicated key-value state machine.
//!
//! Keys map to `(value, version)` pairs. An absent key reads as the reserved
//! default ⊥ — surfaced as `None` — and ⊥ can never be written: empty keys
//! and empty values are rejected at execution (clients also refuse to send
//! them). Writes are whole-record and carry a [`PutGuard`] so read-modify-
//! write callers get lost-update protection: a guard mismatch yields a
//! retriable [`KvResult::CasConflict`] with the current version.

use std::collections::BTreeMap;
use std::fmt;

use crate::crypto::sha256;
use crate::wire::{WireDecode, WireEncode, WireError, WireReader, WireWriter};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PutGuard {
    /// Unconditional overwrite.
    Any,
    /// Succeed only if the key is currently unwritten.
    Absent,
    /// Succeed only if the record is at exactly this version.
    Version(u64),
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum KvOp {
    Put { key: Vec<u8>, value: Vec<u8>, guard: PutGuard },
    Get { key: Vec<u8> },
}

impl KvOp {
    pub fn key(&self) -> &[u8] {
        match self {
            KvOp::Put { key, .. } | KvOp::Get { key } => key,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum KvResult {
    PutOk { version: u64 },
    /// Guard mismatch; carries the record's current version (`None` =
    /// absent). Retriable: re-read, re-derive, re-put.
    CasConflict { current: Option<u64> },
    /// GET result; `None` is ⊥.
    Value(Option<(Vec<u8>, u64)>),
    /// Malformed operation (⊥ payload or empty key); never retriable.
    Rejected,
}

fn short_hex(bytes: &[u8]) -> String {
    let shown = &bytes[..bytes.len().min(12)];
    let mut s: String = shown.iter().map(|b| format!("{b:02x}")).collect();
    if bytes.len() > 12 {
        s.push_str("..");
    }
    s
}

impl fmt::Display for KvOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KvOp::Put { key, value, guard } => {
                write!(f, "put({}, {} bytes", short_hex(key), value.len())?;
                match guard {
                    PutGuard::Any => write!(f, ")"),
                    PutGuard::Absent => write!(f, ", if-absent)"),
                    PutGuard::Version(v) => write!(f, ", if-v{v})"),
                }
            }
            KvOp::Get { key } => write!(f, "get({})", short_hex(key)),
        }
    }
}

impl fmt::Display for KvResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KvResult::PutOk { version } => write!(f, "ok@v{version}"),
            KvResult::CasConflict { current: Some(v) } => write!(f, "conflict@v{v}"),
            KvResult::CasConflict { current: None } => write!(f, "conflict@absent"),
            KvResult::Value(Some((v, ver))) => write!(f, "{}@v{ver}", short_hex(v)),
            KvResult::Value(None) => write!(f, "bottom"),
            KvResult::Rejected => write!(f, "rejected"),
        }
    }
}

impl WireEncode for KvOp {
    fn encode_into(&self, w: &mut WireWriter) {
        match self {
            KvOp::Put { key, value, guard } => {
                w.put_u8(1);
                w.put_bytes(key);
                w.put_bytes(value);
                match guard {
                    PutGuard::Any => w.put_u8(0),
                    PutGuard::Absent => w.put_u8(1),
                    PutGuard::Version(v) => {
                        w.put_u8(2);
                        w.put_u64(*v);
                    }
                }
            }
            KvOp::Get { key } => {
                w.put_u8(2);
                w.put_bytes(key);
            }
        }
    }
}

impl WireDecode for KvOp {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        match r.get_u8()? {
            1 => {
                let key = r.get_bytes()?;
                let value = r.get_bytes()?;
                let guard = match r.get_u8()? {
                    0 => PutGuard::Any,
                    1 => PutGuard::Absent,
                    2 => PutGuard::Version(r.get_u64()?),
                    t => return Err(WireError::BadTag(t)),
                };
                Ok(KvOp::Put { key, value, guard })
            }
            2 => Ok(KvOp::Get { key: r.get_bytes()? }),
            t => Err(WireError::BadTag(t)),
        }
    }
}

impl WireEncode for KvResult {
    fn encode_into(&self, w: &mut WireWriter) {
        match self {
            KvResult::PutOk { version } => {
                w.put_u8(1);
                w.put_u64(*version);
            }
            KvResult::CasConflict { current } => {
                w.put_u8(2);
                w.put_opt_u64(*current);
            }
            KvResult::Value(v) => {
                w.put_u8(3);
                match v {
                    Some((bytes, ver)) => {
                        w.put_u8(1);
                        w.put_bytes(bytes);
                        w.put_u64(*ver);
                    }
                    None => w.put_u8(0),
                }
            }
            KvResult::Rejected => w.put_u8(4),
        }
    }
}

impl WireDecode for KvResult {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        match r.get_u8()? {
            1 => Ok(KvResult::PutOk { version: r.get_u64()? }),
            2 => Ok(KvResult::CasConflict { current: r.get_opt_u64()? }),
            3 => match r.get_u8()? {
                0 => Ok(KvResult::Value(None)),
                1 => {
                    let bytes = r.get_bytes()?;
                    let ver = r.get_u64()?;
                    Ok(KvResult::Value(Some((bytes, ver))))
                }
                t => Err(WireError::BadTag(t)),
            },
            4 => Ok(KvResult::Rejected),
            t => Err(WireError::BadTag(t)),
        }
    }
}

#[derive(Clone, Default, PartialEq, Eq, Debug)]
pub struct KvStore {
    map: BTreeMap<Vec<u8>, (Vec<u8>, u64)>,
}

impl KvStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, op: &KvOp) -> KvResult {
        match op {
            KvOp::Put { key, value, guard } => {
                if key.is_empty() || value.is_empty() {
                    return KvResult::Rejected;
                }
                let current = self.map.get(key).map(|(_, v)| *v);
                let ok = match guard {
                    PutGuard::Any => true,
                    PutGuard::Absent => current.is_none(),
                    PutGuard::Version(v) => current == Some(*v),
                };
                if !ok {
                    return KvResult::CasConflict { current };
                }
                let version = current.unwrap_or(0) + 1;
                self.map.insert(key.clone(), (value.clone(), version));
                KvResult::PutOk { version }
            }
            KvOp::Get { key } => KvResult::Value(self.map.get(key).cloned()),
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<&(Vec<u8>, u64)> {
        self.map.get(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<u8>, &(Vec<u8>, u64))> {
        self.map.iter()
    }

    pub fn encode_snapshot(&self, w: &mut WireWriter) {
        w.put_u32(self.map.len() as u32);
        for (k, (v, ver)) in &self.map {
            w.put_bytes(k);
            w.put_bytes(v);
            w.put_u64(*ver);
        }
    }

    pub fn decode_snapshot(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        let n = r.get_u32()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let k = r.get_bytes()?;
            let v = r.get_bytes()?;
            let ver = r.get_u64()?;
            map.insert(k, (v, ver));
        }
        Ok(KvStore { map })
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut w = WireWriter::new();
        self.encode_snapshot(&mut w);
        sha256(&w.finish())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unwritten_key_reads_bottom() {
        let mut kv = KvStore::new();
        assert_eq!(kv.apply(&KvOp::Get { key: b"k".to_vec() }), KvResult::Value(None));
    }

    #[test]
    fn versions_count_writes() {
        let mut kv = KvStore::new();
        let put = |v: &[u8], g| KvOp::Put { key: b"k".to_vec(), value: v.to_vec(), guard: g };
        assert_eq!(kv.apply(&put(b"a", PutGuard::Absent)), KvResult::PutOk { version: 1 });
        assert_eq!(kv.apply(&put(b"b", PutGuard::Version(1))), KvResult::PutOk { version: 2 });
        assert_eq!(
            kv.apply(&KvOp::Get { key: b"k".to_vec() }),
            KvResult::Value(Some((b"b".to_vec(), 2)))
        );
    }

    #[test]
    fn guard_mismatch_reports_current_version() {
        let mut kv = KvStore::new();
        let put = |g| KvOp::Put { key: b"k".to_vec(), value: b"x".to_vec(), guard: g };
        assert_eq!(
            kv.apply(&put(PutGuard::Version(3))),
            KvResult::CasConflict { current: None }
        );
        kv.apply(&put(PutGuard::Any));
        assert_eq!(
            kv.apply(&put(PutGuard::Absent)),
            KvResult::CasConflict { current: Some(1) }
        );
    }

    #[test]
    fn bottom_is_never_a_legal_put() {
        let mut kv = KvStore::new();
        let empty_val = KvOp::Put { key: b"k".to_vec(), value: vec![], guard: PutGuard::Any };
        let empty_key = KvOp::Put { key: vec![], value: b"v".to_vec(), guard: PutGuard::Any };
        assert_eq!(kv.apply(&empty_val), KvResult::Rejected);
        assert_eq!(kv.apply(&empty_key), KvResult::Rejected);
        assert!(kv.is_empty());
    }

    #[test]
    fn snapshot_roundtrip_preserves_digest() {
        let mut kv = KvStore::new();
        for i in 0u8..5 {
            kv.apply(&KvOp::Put {
                key: vec![i],
                value: vec![i; (i as usize) + 1],
                guard: PutGuard::Any,
            });
        }
        let mut w = WireWriter::new();
        kv.encode_snapshot(&mut w);
        let bytes = w.finish();
        let mut r = WireReader::new(&bytes);
        let restored = KvStore::decode_snapshot(&mut r).unwrap();
        r.expect_end().unwrap();
        assert_eq!(restored, kv);
        assert_eq!(restored.digest(), kv.digest());
    }

    #[test]
    fn op_and_result_wire_roundtrip() {
        let ops = [
            KvOp::Put { key: b"a".to_vec(), value: b"1".to_vec(), guard: PutGuard::Any },
            KvOp::Put { key: b"b".to_vec(), value: b"2".to_vec(), guard: PutGuard::Version(9) },
            KvOp::Get { key: b"c".to_vec() },
        ];
        for op in &ops {
            assert_eq!(&KvOp::decode(&op.encode()).unwrap(), op);
        }
        let results = [
            KvResult::PutOk { version: 3 },
            KvResult::CasConflict { current: Some(1) },
            KvResult::CasConflict { current: None },
            KvResult::Value(Some((b"v".to_vec(), 7))),
            KvResult::Value(None),
            KvResult::Rejected,
        ];
        for res in &results {
            assert_eq!(&KvResult::decode(&res.encode()).unwrap(), res);
        }
    }
}
