//! Node, application, and enclave identifiers shared across the whole stack.

use std::fmt;

/// Simulated time. One unit is interpreted as roughly a millisecond by the
/// latency-model configs, but nothing in the protocol logic depends on that.
pub type SimTime = u64;

/// Every participant in a deployment, simulated or live.
///
/// The ordering is meaningful in two places: EML master election picks the
/// largest `Eml` identifier, and deterministic iteration over node sets uses
/// `Ord` so runs do not depend on hash-map order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum NodeId {
    /// BFT storage replica.
    Replica(u8),
    /// Enclave Management Layer member.
    Eml(u8),
    /// Application enclave instance.
    Enclave(u16),
    /// Application owner (ISV).
    Owner(u8),
    /// The cloud controller issuing lifecycle requests.
    Cloud,
    /// Attestation proxy registered with the mock IAS.
    Proxy,
    /// The mock Intel Attestation Service.
    Ias,
    /// External application client (e.g. a key-derivation user).
    Client(u8),
}

impl NodeId {
    pub fn is_replica(&self) -> bool {
        matches!(self, NodeId::Replica(_))
    }

    pub fn is_eml(&self) -> bool {
        matches!(self, NodeId::Eml(_))
    }

    pub fn is_enclave(&self) -> bool {
        matches!(self, NodeId::Enclave(_))
    }

    /// Stable byte encoding used inside authenticated payloads.
    pub fn to_wire(self) -> [u8; 3] {
        match self {
            NodeId::Replica(i) => [0x01, i, 0],
            NodeId::Eml(i) => [0x02, i, 0],
            NodeId::Enclave(i) => [0x03, (i & 0xff) as u8, (i >> 8) as u8],
            NodeId::Owner(i) => [0x04, i, 0],
            NodeId::Cloud => [0x05, 0, 0],
            NodeId::Proxy => [0x06, 0, 0],
            NodeId::Ias => [0x07, 0, 0],
            NodeId::Client(i) => [0x08, i, 0],
        }
    }

    pub fn from_wire(bytes: [u8; 3]) -> Option<NodeId> {
        let idx16 = u16::from(bytes[1]) | (u16::from(bytes[2]) << 8);
        match bytes[0] {
            0x01 => Some(NodeId::Replica(bytes[1])),
            0x02 => Some(NodeId::Eml(bytes[1])),
            0x03 => Some(NodeId::Enclave(idx16)),
            0x04 => Some(NodeId::Owner(bytes[1])),
            0x05 => Some(NodeId::Cloud),
            0x06 => Some(NodeId::Proxy),
            0x07 => Some(NodeId::Ias),
            0x08 => Some(NodeId::Client(bytes[1])),
            _ => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Replica(i) => write!(f, "r{i}"),
            NodeId::Eml(i) => write!(f, "eml{i}"),
            NodeId::Enclave(i) => write!(f, "enc{i}"),
            NodeId::Owner(i) => write!(f, "owner{i}"),
            NodeId::Cloud => write!(f, "cloud"),
            NodeId::Proxy => write!(f, "proxy"),
            NodeId::Ias => write!(f, "ias"),
            NodeId::Client(i) => write!(f, "c{i}"),
        }
    }
}

/// Application identifier assigned by the EML at upload time.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct AppId(pub Vec<u8>);

impl AppId {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", String::from_utf8_lossy(&self.0))
    }
}

impl From<&str> for AppId {
    fn from(s: &str) -> Self {
        AppId(s.as_bytes().to_vec())
    }
}

/// Code identity digest of an enclave (32 bytes).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mrenclave(pub [u8; 32]);

impl fmt::Debug for Mrenclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Mrenclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..")
    }
}

/// Enclave identifier `α ∥ mr_α ∥ h_α`: the application id, the code
/// identity, and the hash of the attestation session key.
///
/// The two digest components have fixed width, so the byte form parses
/// unambiguously from the tail.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct EnclaveId {
    pub app: AppId,
    pub mr: Mrenclave,
    pub key_hash: [u8; 32],
}

impl EnclaveId {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.app.0.len() + 64);
        out.extend_from_slice(&self.app.0);
        out.extend_from_slice(&self.mr.0);
        out.extend_from_slice(&self.key_hash);
        out
    }

    /// Parses `α ∥ mr ∥ h` from the back; the app id is the variable-length
    /// prefix and must be non-empty.
    pub fn parse(bytes: &[u8]) -> Option<EnclaveId> {
        if bytes.len() < 65 {
            return None;
        }
        let split = bytes.len() - 64;
        let mut mr = [0u8; 32];
        mr.copy_from_slice(&bytes[split..split + 32]);
        let mut kh = [0u8; 32];
        kh.copy_from_slice(&bytes[split + 32..]);
        Some(EnclaveId {
            app: AppId(bytes[..split].to_vec()),
            mr: Mrenclave(mr),
            key_hash: kh,
        })
    }
}

impl fmt::Display for EnclaveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:", self.app, self.mr)?;
        for b in &self.key_hash[..4] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_id_wire_roundtrip() {
        let ids = [
            NodeId::Replica(0),
            NodeId::Replica(255),
            NodeId::Eml(3),
            NodeId::Enclave(0x1234),
            NodeId::Owner(1),
            NodeId::Cloud,
            NodeId::Proxy,
            NodeId::Ias,
            NodeId::Client(9),
        ];
        for id in ids {
            assert_eq!(NodeId::from_wire(id.to_wire()), Some(id));
        }
        assert_eq!(NodeId::from_wire([0xff, 0, 0]), None);
    }

    #[test]
    fn enclave_id_parses_from_tail() {
        let eid = EnclaveId {
            app: AppId::from("a1"),
            mr: Mrenclave([7; 32]),
            key_hash: [9; 32],
        };
        let bytes = eid.to_bytes();
        assert_eq!(EnclaveId::parse(&bytes), Some(eid));
        assert_eq!(EnclaveId::parse(&bytes[..64]), None);
    }
}
