//! Canonical byte layouts for the three message kinds, so ledger byte
//! counts are deterministic and comparable against the analytic bit-length
//! formulas.
//!
//! All integers are big-endian and fixed width; symbol lists are length
//! prefixed. Field elements occupy `ceil(m/8)` bytes.
//!
//! ```text
//! seed assign  : kind(1) scope(4) member(4) leaf(8) position(2) secret(eb)
//! rekey bcast  : kind(1) scope(4) target(8) epoch(8) tail_count(2)
//!                r(eb) tail_symbols(eb * tail_count)
//! sealed keys  : kind(1) scope(4) sealing(8) sealing_epoch(8) epoch(8)
//!                carried_count(2) carried_ids(8 * n) ct_len(2) ct tag(16)
//! ```
//!
//! The rekey broadcast's variable part after the fixed header is exactly
//! `n * ceil(m/8)` bytes for n participants: the nonce plus n-1 public
//! symbols.

use crate::error::{Error, Result};
use crate::gf_mds::FieldElem;
use crate::ids::{MemberId, NodeId, ScopeId};
use crate::rekey::{CryptoConfig, RekeyBroadcast, SealedKeyMsg, SeedKey};
use serde::{Deserialize, Serialize};

pub const KIND_SEED_ASSIGN: u8 = 1;
pub const KIND_REKEY_BROADCAST: u8 = 2;
pub const KIND_SEALED_KEYS: u8 = 3;

/// Fixed header size of a rekey broadcast; everything after it is the
/// n-symbol payload the bit-length formulas talk about.
pub const BROADCAST_HEADER_BYTES: usize = 1 + 4 + 8 + 8 + 2;

/// Secure unicast delivering a member its long-term seed. The transport is
/// assumed confidential; node authentication is out of scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedAssign {
    pub scope: ScopeId,
    pub member: MemberId,
    pub leaf: NodeId,
    pub seed: SeedKey,
}

fn push_elem(out: &mut Vec<u8>, cfg: &CryptoConfig, e: FieldElem) {
    if cfg.field.elem_bytes() == 2 {
        out.extend_from_slice(&e.0.to_be_bytes());
    } else {
        out.push(e.0 as u8);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::ParseError {
                line: 0,
                msg: "truncated wire message".into(),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn elem(&mut self, cfg: &CryptoConfig) -> Result<FieldElem> {
        if cfg.field.elem_bytes() == 2 {
            Ok(FieldElem(self.u16()?))
        } else {
            Ok(FieldElem(self.u8()? as u16))
        }
    }

    fn done(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::ParseError {
                line: 0,
                msg: "trailing bytes in wire message".into(),
            });
        }
        Ok(())
    }
}

pub fn encode_seed_assign(cfg: &CryptoConfig, sa: &SeedAssign) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + cfg.field.elem_bytes());
    out.push(KIND_SEED_ASSIGN);
    out.extend_from_slice(&sa.scope.0.to_be_bytes());
    out.extend_from_slice(&sa.member.0.to_be_bytes());
    out.extend_from_slice(&sa.leaf.0.to_be_bytes());
    out.extend_from_slice(&sa.seed.position.to_be_bytes());
    push_elem(&mut out, cfg, sa.seed.secret);
    out
}

pub fn decode_seed_assign(cfg: &CryptoConfig, bytes: &[u8]) -> Result<SeedAssign> {
    let mut r = Reader::new(bytes);
    if r.u8()? != KIND_SEED_ASSIGN {
        return Err(Error::ParseError { line: 0, msg: "bad message kind".into() });
    }
    let sa = SeedAssign {
        scope: ScopeId(r.u32()?),
        member: MemberId(r.u32()?),
        leaf: NodeId(r.u64()?),
        seed: SeedKey { position: r.u16()?, secret: r.elem(cfg)? },
    };
    r.done()?;
    Ok(sa)
}

pub fn encode_broadcast(cfg: &CryptoConfig, b: &RekeyBroadcast) -> Vec<u8> {
    let eb = cfg.field.elem_bytes();
    let mut out = Vec::with_capacity(BROADCAST_HEADER_BYTES + eb * (1 + b.public_symbols.len()));
    out.push(KIND_REKEY_BROADCAST);
    out.extend_from_slice(&b.scope.0.to_be_bytes());
    out.extend_from_slice(&b.target_node.0.to_be_bytes());
    out.extend_from_slice(&b.epoch.to_be_bytes());
    out.extend_from_slice(&(b.public_symbols.len() as u16).to_be_bytes());
    push_elem(&mut out, cfg, b.r);
    for s in &b.public_symbols {
        push_elem(&mut out, cfg, *s);
    }
    out
}

pub fn decode_broadcast(cfg: &CryptoConfig, bytes: &[u8]) -> Result<RekeyBroadcast> {
    let mut r = Reader::new(bytes);
    if r.u8()? != KIND_REKEY_BROADCAST {
        return Err(Error::ParseError { line: 0, msg: "bad message kind".into() });
    }
    let scope = ScopeId(r.u32()?);
    let target_node = NodeId(r.u64()?);
    let epoch = r.u64()?;
    let tail = r.u16()? as usize;
    let nonce = r.elem(cfg)?;
    let mut public_symbols = Vec::with_capacity(tail);
    for _ in 0..tail {
        public_symbols.push(r.elem(cfg)?);
    }
    r.done()?;
    Ok(RekeyBroadcast { scope, target_node, epoch, r: nonce, public_symbols })
}

pub fn encode_sealed(msg: &SealedKeyMsg) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(31 + 8 * msg.carried_nodes.len() + 2 + msg.ciphertext.len() + 16);
    out.push(KIND_SEALED_KEYS);
    out.extend_from_slice(&msg.scope.0.to_be_bytes());
    out.extend_from_slice(&msg.sealing_node.0.to_be_bytes());
    out.extend_from_slice(&msg.sealing_epoch.to_be_bytes());
    out.extend_from_slice(&msg.epoch.to_be_bytes());
    out.extend_from_slice(&(msg.carried_nodes.len() as u16).to_be_bytes());
    for n in &msg.carried_nodes {
        out.extend_from_slice(&n.0.to_be_bytes());
    }
    out.extend_from_slice(&(msg.ciphertext.len() as u16).to_be_bytes());
    out.extend_from_slice(&msg.ciphertext);
    out.extend_from_slice(&msg.tag);
    out
}

pub fn decode_sealed(bytes: &[u8]) -> Result<SealedKeyMsg> {
    let mut r = Reader::new(bytes);
    if r.u8()? != KIND_SEALED_KEYS {
        return Err(Error::ParseError { line: 0, msg: "bad message kind".into() });
    }
    let scope = ScopeId(r.u32()?);
    let sealing_node = NodeId(r.u64()?);
    let sealing_epoch = r.u64()?;
    let epoch = r.u64()?;
    let n = r.u16()? as usize;
    let mut carried_nodes = Vec::with_capacity(n);
    for _ in 0..n {
        carried_nodes.push(NodeId(r.u64()?));
    }
    let ct_len = r.u16()? as usize;
    let ciphertext = r.take(ct_len)?.to_vec();
    let mut tag = [0u8; 16];
    tag.copy_from_slice(r.take(16)?);
    r.done()?;
    Ok(SealedKeyMsg {
        scope,
        sealing_node,
        sealing_epoch,
        epoch,
        carried_nodes,
        ciphertext,
        tag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(m: u8) -> CryptoConfig {
        CryptoConfig::for_bits(m).unwrap()
    }

    #[test]
    fn broadcast_payload_is_n_symbols() {
        // n participants -> nonce + n-1 symbols = n elements after header.
        for m in [4u8, 8, 16] {
            let c = cfg(m);
            for n in 1..=5usize {
                let b = RekeyBroadcast {
                    scope: ScopeId(1),
                    target_node: NodeId(42),
                    epoch: 9,
                    r: FieldElem(3),
                    public_symbols: vec![FieldElem(1); n - 1],
                };
                let bytes = encode_broadcast(&c, &b);
                assert_eq!(
                    bytes.len() - BROADCAST_HEADER_BYTES,
                    n * c.field.elem_bytes()
                );
            }
        }
    }

    proptest! {
        #[test]
        fn broadcast_roundtrip(
            scope in 0u32..8, target in 0u64..1000, epoch in 0u64..1000,
            r in 0u16..256, tail in proptest::collection::vec(0u16..256, 0..6)
        ) {
            let c = cfg(8);
            let b = RekeyBroadcast {
                scope: ScopeId(scope),
                target_node: NodeId(target),
                epoch,
                r: FieldElem(r),
                public_symbols: tail.into_iter().map(FieldElem).collect(),
            };
            prop_assert_eq!(decode_broadcast(&c, &encode_broadcast(&c, &b)).unwrap(), b);
        }

        #[test]
        fn sealed_roundtrip(
            sealing in 0u64..1000, se in 0u64..50, e in 0u64..50,
            carried in proptest::collection::vec(0u64..1000, 0..4),
            ct in proptest::collection::vec(any::<u8>(), 0..200),
            tag in proptest::array::uniform16(any::<u8>())
        ) {
            let msg = SealedKeyMsg {
                scope: ScopeId(2),
                sealing_node: NodeId(sealing),
                sealing_epoch: se,
                epoch: e,
                carried_nodes: carried.into_iter().map(NodeId).collect(),
                ciphertext: ct,
                tag,
            };
            prop_assert_eq!(decode_sealed(&encode_sealed(&msg)).unwrap(), msg);
        }

        #[test]
        fn seed_assign_roundtrip(
            member in 0u32..5000, leaf in 0u64..5000,
            pos in 1u16..256, secret in 0u16..256
        ) {
            let c = cfg(8);
            let sa = SeedAssign {
                scope: ScopeId(3),
                member: MemberId(member),
                leaf: NodeId(leaf),
                seed: SeedKey { position: pos, secret: FieldElem(secret) },
            };
            prop_assert_eq!(decode_seed_assign(&c, &encode_seed_assign(&c, &sa)).unwrap(), sa);
        }
    }

    #[test]
    fn truncated_input_rejected() {
        let c = cfg(8);
        let b = RekeyBroadcast {
            scope: ScopeId(1),
            target_node: NodeId(42),
            epoch: 9,
            r: FieldElem(3),
            public_symbols: vec![FieldElem(1), FieldElem(2)],
        };
        let bytes = encode_broadcast(&c, &b);
        assert!(decode_broadcast(&c, &bytes[..bytes.len() - 1]).is_err());
    }
}
