//! The key-derivation codec: seed keys, hash-to-symbol derivation,
//! controller-side session-key generation, member-side recovery, logic-node
//! seed composition, and sealed key-path messages.
//!
//! Every node key is the first message symbol of an MDS decode over the
//! node's children. Leaf-layer keys travel as public broadcasts that only
//! seed holders can finish; interior keys travel sealed under child keys,
//! because a member cannot form a sibling's logic seed.

use crate::error::{Error, Result};
use crate::gf_mds::{FieldElem, FieldParams, Position};
use crate::ids::{NodeId, ScopeId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};
use std::collections::BTreeSet;

/// Hash behind `H`; pluggable so the instantiation can change without
/// touching trace formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HashKind {
    #[default]
    Sha256,
    Sha512,
}

/// Cipher behind `E_k(.)`. The default is a keyed-hash stream cipher with a
/// keyed-hash tag, deterministic for reproducible traces. `BrokenNullKey`
/// ignores the key entirely; it exists as a negative control so the secrecy
/// probes can prove they would catch a real break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CipherKind {
    #[default]
    StreamMac,
    BrokenNullKey,
}

/// Field, hash, and cipher choices for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CryptoConfig {
    pub field: FieldParams,
    pub hash: HashKind,
    pub cipher: CipherKind,
}

impl CryptoConfig {
    pub fn for_bits(m: u8) -> Result<Self> {
        Ok(CryptoConfig {
            field: FieldParams::for_bits(m)?,
            hash: HashKind::default(),
            cipher: CipherKind::default(),
        })
    }

    fn digest(&self, domain: u8, parts: &[&[u8]]) -> [u8; 32] {
        match self.hash {
            HashKind::Sha256 => {
                let mut h = Sha256::new();
                h.update([domain]);
                for p in parts {
                    h.update((p.len() as u32).to_be_bytes());
                    h.update(p);
                }
                h.finalize().into()
            }
            HashKind::Sha512 => {
                let mut h = Sha512::new();
                h.update([domain]);
                for p in parts {
                    h.update((p.len() as u32).to_be_bytes());
                    h.update(p);
                }
                let full = h.finalize();
                let mut out = [0u8; 32];
                out.copy_from_slice(&full[..32]);
                out
            }
        }
    }
}

// Domain separators for the keyed-hash constructions.
const DOM_SYMBOL: u8 = 1;
const DOM_NONCE: u8 = 2;
const DOM_EXPAND: u8 = 3;
const DOM_STREAM: u8 = 4;
const DOM_TAG: u8 = 5;

/// A leaf's long-term secret: an evaluation position and an m-bit secret.
/// Pseudo-leaves and logic nodes carry the same shape; logic secrets are
/// the XOR of their children's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedKey {
    pub position: Position,
    pub secret: FieldElem,
}

/// The public half of one node-key refresh: the nonce and all message
/// symbols except the first. Decodable only with a participant seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RekeyBroadcast {
    pub scope: ScopeId,
    pub target_node: NodeId,
    pub epoch: u64,
    pub r: FieldElem,
    pub public_symbols: Vec<FieldElem>,
}

/// A node key at a given epoch. `raw` is the protocol-level m-bit value;
/// `expanded` is the cipher key derived from (raw, r, node).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionKey {
    pub node: NodeId,
    pub epoch: u64,
    pub raw: FieldElem,
    pub expanded: [u8; 32],
}

/// One or more refreshed path keys sealed under an existing node key.
/// `carried_nodes` mirrors the encrypted payload order so receivers and the
/// ledger can reason about the message without opening it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedKeyMsg {
    pub scope: ScopeId,
    pub sealing_node: NodeId,
    pub sealing_epoch: u64,
    pub epoch: u64,
    pub carried_nodes: Vec<NodeId>,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
}

/// H(s || r) truncated to the first m bits, as a field element.
pub fn derive_symbol(cfg: &CryptoConfig, seed: &SeedKey, r: FieldElem) -> FieldElem {
    let d = cfg.digest(
        DOM_SYMBOL,
        &[&seed.secret.0.to_be_bytes(), &r.0.to_be_bytes()],
    );
    let first = u16::from_be_bytes([d[0], d[1]]);
    FieldElem(first >> (16 - cfg.field.m as u32))
}

/// Derives the l_r-bit wire nonce from the structurally fresh
/// (scope, epoch, node) triple. Epochs never repeat per scope, so the
/// derivation input never repeats even though the m-bit wire value may
/// collide at chance level.
pub fn wire_nonce(cfg: &CryptoConfig, scope: ScopeId, epoch: u64, node: NodeId) -> FieldElem {
    let d = cfg.digest(
        DOM_NONCE,
        &[
            &scope.0.to_be_bytes(),
            &epoch.to_be_bytes(),
            &node.0.to_be_bytes(),
        ],
    );
    let first = u16::from_be_bytes([d[0], d[1]]);
    FieldElem(first >> (16 - cfg.field.m as u32))
}

/// Deterministic fixed-length expansion of the m-bit key symbol into a
/// cipher key, bound to the structural nonce (epoch) and the node. The
/// truncated wire nonce may collide across epochs — and with unchanged
/// participants a collision reproduces the raw symbol exactly — but the
/// epoch never repeats, so cipher keys never do.
pub fn kdf_expand(cfg: &CryptoConfig, raw: FieldElem, epoch: u64, node: NodeId) -> [u8; 32] {
    cfg.digest(
        DOM_EXPAND,
        &[
            &raw.0.to_be_bytes(),
            &epoch.to_be_bytes(),
            &node.0.to_be_bytes(),
        ],
    )
}

/// XOR composition of 2 or 3 child secrets into a logic-node secret.
pub fn logic_seed(children: &[FieldElem]) -> Result<FieldElem> {
    if !(2..=3).contains(&children.len()) {
        return Err(Error::DegreeViolation(children.len()));
    }
    Ok(children
        .iter()
        .fold(FieldElem(0), |acc, s| FieldElem(acc.0 ^ s.0)))
}

/// A (position, seed) pair participating in one key generation.
pub type Participant = (Position, FieldElem);

/// Controller-side key generator for one scope. Nonce freshness is
/// structural: epochs must not decrease and a (epoch, node) pair is never
/// issued twice.
#[derive(Debug, Clone)]
pub struct KeySource {
    cfg: CryptoConfig,
    scope: ScopeId,
    last_epoch: Option<u64>,
    issued_this_epoch: BTreeSet<NodeId>,
}

impl KeySource {
    pub fn new(cfg: CryptoConfig, scope: ScopeId) -> Self {
        KeySource {
            cfg,
            scope,
            last_epoch: None,
            issued_this_epoch: BTreeSet::new(),
        }
    }

    pub fn scope(&self) -> ScopeId {
        self.scope
    }

    /// Generates the session key for `target` over the given participants
    /// and returns it with the public broadcast. The number of H(s || r)
    /// evaluations equals `participants.len()`.
    pub fn generate(
        &mut self,
        epoch: u64,
        target: NodeId,
        participants: &[Participant],
    ) -> Result<(SessionKey, RekeyBroadcast)> {
        if let Some(last) = self.last_epoch {
            if epoch < last
                || (epoch == last && self.issued_this_epoch.contains(&target))
            {
                return Err(Error::FreshnessViolation { scope: self.scope.0, epoch });
            }
        }
        if participants.is_empty() {
            return Err(Error::ProtocolError("key generation needs participants".into()));
        }
        let mut seen = BTreeSet::new();
        for (pos, _) in participants {
            if !seen.insert(*pos) {
                return Err(Error::ProtocolError(format!(
                    "duplicate participant position {pos}"
                )));
            }
        }

        let r = wire_nonce(&self.cfg, self.scope, epoch, target);
        let points: Vec<Position> = participants.iter().map(|(p, _)| *p).collect();
        let symbols: Vec<FieldElem> = participants
            .iter()
            .map(|(pos, secret)| {
                derive_symbol(&self.cfg, &SeedKey { position: *pos, secret: *secret }, r)
            })
            .collect();
        let message = self.cfg.field.vandermonde_solve(&points, &symbols)?;
        let raw = message[0];
        let key = SessionKey {
            node: target,
            epoch,
            raw,
            expanded: kdf_expand(&self.cfg, raw, epoch, target),
        };
        let broadcast = RekeyBroadcast {
            scope: self.scope,
            target_node: target,
            epoch,
            r,
            public_symbols: message[1..].to_vec(),
        };
        if self.last_epoch != Some(epoch) {
            self.issued_this_epoch.clear();
        }
        self.last_epoch = Some(epoch);
        self.issued_this_epoch.insert(target);
        Ok((key, broadcast))
    }
}

/// Member-side recovery: one hash, one row of the Vandermonde system.
/// A caller whose seed was not among the participants obtains a value that
/// matches the true key only at chance level; that is the revocation
/// property, not an error channel.
pub fn member_recover_key(cfg: &CryptoConfig, seed: &SeedKey, b: &RekeyBroadcast) -> SessionKey {
    let own = derive_symbol(cfg, seed, b.r);
    let raw = cfg
        .field
        .first_symbol_from_own_row(seed.position, own, &b.public_symbols);
    SessionKey {
        node: b.target_node,
        epoch: b.epoch,
        raw,
        expanded: kdf_expand(cfg, raw, b.epoch, b.target_node),
    }
}

const NULL_KEY: [u8; 32] = [0u8; 32];

fn cipher_key_bytes<'a>(cfg: &CryptoConfig, key: &'a SessionKey) -> &'a [u8] {
    match cfg.cipher {
        CipherKind::StreamMac => &key.expanded,
        // Negative control: the cipher ignores the key entirely.
        CipherKind::BrokenNullKey => &NULL_KEY,
    }
}

fn seal_header(msg: &SealedKeyMsg) -> Vec<u8> {
    let mut header = Vec::with_capacity(32 + msg.carried_nodes.len() * 8);
    header.extend_from_slice(&msg.scope.0.to_be_bytes());
    header.extend_from_slice(&msg.sealing_node.0.to_be_bytes());
    header.extend_from_slice(&msg.sealing_epoch.to_be_bytes());
    header.extend_from_slice(&msg.epoch.to_be_bytes());
    for n in &msg.carried_nodes {
        header.extend_from_slice(&n.0.to_be_bytes());
    }
    header
}

fn seal_tag(cfg: &CryptoConfig, key: &SessionKey, msg: &SealedKeyMsg) -> [u8; 16] {
    let d = cfg.digest(DOM_TAG, &[cipher_key_bytes(cfg, key), &seal_header(msg), &msg.ciphertext]);
    let mut tag = [0u8; 16];
    tag.copy_from_slice(&d[..16]);
    tag
}

/// Keystream bound to the key bytes and the message header, never to the
/// supplied key's own labels: secrecy rests on the key material alone.
fn xor_stream(cfg: &CryptoConfig, key: &SessionKey, msg: &SealedKeyMsg, data: &mut [u8]) {
    let header = seal_header(msg);
    for (block_idx, chunk) in data.chunks_mut(32).enumerate() {
        let ks = cfg.digest(
            DOM_STREAM,
            &[cipher_key_bytes(cfg, key), &header, &(block_idx as u32).to_be_bytes()],
        );
        for (b, k) in chunk.iter_mut().zip(ks.iter()) {
            *b ^= k;
        }
    }
}

fn encode_payload(cfg: &CryptoConfig, keys: &[SessionKey]) -> Vec<u8> {
    let eb = cfg.field.elem_bytes();
    let mut out = Vec::with_capacity(keys.len() * (16 + eb + 32));
    for k in keys {
        out.extend_from_slice(&k.node.0.to_be_bytes());
        out.extend_from_slice(&k.epoch.to_be_bytes());
        if eb == 2 {
            out.extend_from_slice(&k.raw.0.to_be_bytes());
        } else {
            out.push(k.raw.0 as u8);
        }
        out.extend_from_slice(&k.expanded);
    }
    out
}

fn decode_payload(cfg: &CryptoConfig, bytes: &[u8]) -> Result<Vec<SessionKey>> {
    let eb = cfg.field.elem_bytes();
    let rec = 16 + eb + 32;
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::AuthFailure);
    }
    let mut keys = Vec::with_capacity(bytes.len() / rec);
    for chunk in bytes.chunks(rec) {
        let node = NodeId(u64::from_be_bytes(chunk[0..8].try_into().unwrap()));
        let epoch = u64::from_be_bytes(chunk[8..16].try_into().unwrap());
        let raw = if eb == 2 {
            FieldElem(u16::from_be_bytes([chunk[16], chunk[17]]))
        } else {
            FieldElem(chunk[16] as u16)
        };
        let mut expanded = [0u8; 32];
        expanded.copy_from_slice(&chunk[16 + eb..]);
        keys.push(SessionKey { node, epoch, raw, expanded });
    }
    Ok(keys)
}

/// Seals refreshed path keys under an existing node key. The payload order
/// matches `carried_nodes`, bottom of the path first.
pub fn seal_keys(
    cfg: &CryptoConfig,
    sealing: &SessionKey,
    payload: &[SessionKey],
    msg_epoch: u64,
) -> SealedKeyMsg {
    let mut msg = SealedKeyMsg {
        scope: sealing.node.scope(),
        sealing_node: sealing.node,
        sealing_epoch: sealing.epoch,
        epoch: msg_epoch,
        carried_nodes: payload.iter().map(|k| k.node).collect(),
        ciphertext: Vec::new(),
        tag: [0u8; 16],
    };
    let mut ct = encode_payload(cfg, payload);
    xor_stream(cfg, sealing, &msg, &mut ct);
    msg.ciphertext = ct;
    msg.tag = seal_tag(cfg, sealing, &msg);
    msg
}

/// Single-key convenience over [`seal_keys`].
pub fn seal_key(
    cfg: &CryptoConfig,
    sealing: &SessionKey,
    payload: &SessionKey,
    msg_epoch: u64,
) -> SealedKeyMsg {
    seal_keys(cfg, sealing, std::slice::from_ref(payload), msg_epoch)
}

/// Opens a sealed message. Fails with `AuthFailure` unless the supplied
/// key matches what sealed it and the ciphertext is intact. The decision
/// rests on the tag alone — the header names the intended key but cannot
/// be trusted to gate an attacker.
pub fn open_keys(
    cfg: &CryptoConfig,
    sealing: &SessionKey,
    msg: &SealedKeyMsg,
) -> Result<Vec<SessionKey>> {
    let expect = seal_tag(cfg, sealing, msg);
    if expect != msg.tag {
        return Err(Error::AuthFailure);
    }
    let mut plain = msg.ciphertext.clone();
    xor_stream(cfg, sealing, msg, &mut plain);
    let keys = decode_payload(cfg, &plain)?;
    if keys.len() != msg.carried_nodes.len()
        || keys.iter().zip(&msg.carried_nodes).any(|(k, n)| k.node != *n)
    {
        return Err(Error::AuthFailure);
    }
    Ok(keys)
}

/// Single-key convenience over [`open_keys`].
pub fn open_key(cfg: &CryptoConfig, sealing: &SessionKey, msg: &SealedKeyMsg) -> Result<SessionKey> {
    let keys = open_keys(cfg, sealing, msg)?;
    keys.into_iter().next().ok_or(Error::AuthFailure)
}
