//! Simulated proxied remote attestation.
//!
//! A verifier establishes a shared key with a prover enclave it reaches
//! only through a relay proxy; the proxy — not the verifier — is the party
//! registered with the (mock) attestation service, so the service's
//! registration requirement stops gating who may verify. Message names
//! follow the handshake figure for trace readability:
//!
//! ```text
//! verifier            proxy              prover              service
//!   ── msg0 ─────────▶ ── msg0 ─────────▶          session open
//!   ◀──────── msg1 ── ◀──────── msg1 ──            prover ephemeral key
//!   ── msg2 ─────────▶ ── msg2 ─────────▶          verifier ephemeral key, signed
//!   ◀──────── msg3 ── ◀──────── msg3 ──            wrapped quote + key confirmation
//!                       ── ias-submit ─────────────────▶
//!                       ◀──────────────────── ias-reply
//!   ◀─── statement ──                               msg3, quote swapped for statement
//!   ── msg4 ─────────▶ ── msg4 ─────────▶          verdict + key confirmation
//! ```
//!
//! The two flavors differ only in who signs the verifier's ephemeral key in
//! msg2. In the known-verifier flavor the verifier signs it itself and the
//! prover carries the verifier's public key as its embedded trust root; in
//! the proxied flavor the proxy signs on relay and the prover carries the
//! proxy's key instead. Either way the prover reveals its quote only after
//! that signature verifies — a prover that cannot authenticate the key it
//! was offered never emits msg3.
//!
//! The signed key exchange authenticates the verifier *channel*; the quote
//! (mrenclave plus report data binding the prover's ephemeral key)
//! authenticates the prover; and confirmation MACs in msg3/msg4 prove both
//! ends actually derived the same key, which is what exposes a relay that
//! substituted an ephemeral key it is allowed to sign.
//!
//! The enclave boundary is simulated by [`QuoteMinter`]: only nodes the
//! harness casts as enclaves hold one, and the minter authenticates quotes
//! to the service with a platform key the adversary never learns. A node
//! without a minter — or with a forged platform key — can at best produce
//! ciphertext the service rejects.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    hmac_sha256, hybrid_unwrap, hybrid_wrap, kdf, sha256_parts, CryptoSuite, KxPriv, KxPub,
    SigPrivKey, SigPubKey, Signature, SymKey,
};
use crate::ids::{Mrenclave, NodeId, SimTime};
use crate::runtime::{Envelope, Node, NodeCtx, TimerKind};
use crate::trace::TraceEvent;
use crate::wire::{WireDecode, WireEncode, WireError, WireReader, WireWriter};

// ---------------------------------------------------------------------------
// Wire messages
// ---------------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum AttestMsg {
    /// Session open, verifier → prover. The proxy rewrites `verifier` to
    /// the transport-stamped sender on relay, so the field is authentic by
    /// the time the prover sees it (used for bookkeeping, never trust).
    Msg0 { session: u64, verifier: NodeId, prover: NodeId },
    /// Prover's ephemeral key-exchange value.
    Msg1 { session: u64, prover_eph: KxPub },
    /// Verifier's ephemeral value plus a signature over both ephemerals.
    /// `None` means "proxy, sign this on relay" (proxied flavor).
    Msg2 { session: u64, verifier_eph: KxPub, sig: Option<Signature> },
    /// Quote encrypted to the attestation service, plus the prover's key
    /// confirmation MAC.
    Msg3 { session: u64, wrapped_quote: Vec<u8>, confirm: [u8; 32] },
    /// Proxy → service: the encrypted quote, unopened.
    IasSubmit { session: u64, wrapped_quote: Vec<u8> },
    /// Service → proxy: a signed statement, or `None` on rejection.
    IasReply { session: u64, statement: Option<IasStatement> },
    /// Proxy → verifier: msg3 with the opaque quote replaced by the
    /// service's statement; everything else passes through untouched.
    Statement { session: u64, statement: Option<IasStatement>, confirm: [u8; 32] },
    /// Verifier's verdict and its own key confirmation MAC.
    Msg4 { session: u64, accept: bool, confirm: [u8; 32] },
}

const AM_MSG0: u8 = 1;
const AM_MSG1: u8 = 2;
const AM_MSG2: u8 = 3;
const AM_MSG3: u8 = 4;
const AM_IAS_SUBMIT: u8 = 5;
const AM_IAS_REPLY: u8 = 6;
const AM_STATEMENT: u8 = 7;
const AM_MSG4: u8 = 8;

impl WireEncode for AttestMsg {
    fn encode_into(&self, w: &mut WireWriter) {
        match self {
            AttestMsg::Msg0 { session, verifier, prover } => {
                w.put_u8(AM_MSG0);
                w.put_u64(*session);
                w.put_node(*verifier);
                w.put_node(*prover);
            }
            AttestMsg::Msg1 { session, prover_eph } => {
                w.put_u8(AM_MSG1);
                w.put_u64(*session);
                w.put_bytes(&prover_eph.0);
            }
            AttestMsg::Msg2 { session, verifier_eph, sig } => {
                w.put_u8(AM_MSG2);
                w.put_u64(*session);
                w.put_bytes(&verifier_eph.0);
                w.put_opt_bytes(sig.as_ref().map(|s| s.0.as_slice()));
            }
            AttestMsg::Msg3 { session, wrapped_quote, confirm } => {
                w.put_u8(AM_MSG3);
                w.put_u64(*session);
                w.put_bytes(wrapped_quote);
                w.put_array(confirm);
            }
            AttestMsg::IasSubmit { session, wrapped_quote } => {
                w.put_u8(AM_IAS_SUBMIT);
                w.put_u64(*session);
                w.put_bytes(wrapped_quote);
            }
            AttestMsg::IasReply { session, statement } => {
                w.put_u8(AM_IAS_REPLY);
                w.put_u64(*session);
                put_opt_statement(w, statement);
            }
            AttestMsg::Statement { session, statement, confirm } => {
                w.put_u8(AM_STATEMENT);
                w.put_u64(*session);
                put_opt_statement(w, statement);
                w.put_array(confirm);
            }
            AttestMsg::Msg4 { session, accept, confirm } => {
                w.put_u8(AM_MSG4);
                w.put_u64(*session);
                w.put_bool(*accept);
                w.put_array(confirm);
            }
        }
    }
}

impl WireDecode for AttestMsg {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(match r.get_u8()? {
            AM_MSG0 => AttestMsg::Msg0 {
                session: r.get_u64()?,
                verifier: r.get_node()?,
                prover: r.get_node()?,
            },
            AM_MSG1 => AttestMsg::Msg1 {
                session: r.get_u64()?,
                prover_eph: KxPub(r.get_bytes()?),
            },
            AM_MSG2 => AttestMsg::Msg2 {
                session: r.get_u64()?,
                verifier_eph: KxPub(r.get_bytes()?),
                sig: r.get_opt_bytes()?.map(Signature),
            },
            AM_MSG3 => AttestMsg::Msg3 {
                session: r.get_u64()?,
                wrapped_quote: r.get_bytes()?,
                confirm: r.get_array()?,
            },
            AM_IAS_SUBMIT => AttestMsg::IasSubmit {
                session: r.get_u64()?,
                wrapped_quote: r.get_bytes()?,
            },
            AM_IAS_REPLY => AttestMsg::IasReply {
                session: r.get_u64()?,
                statement: get_opt_statement(r)?,
            },
            AM_STATEMENT => AttestMsg::Statement {
                session: r.get_u64()?,
                statement: get_opt_statement(r)?,
                confirm: r.get_array()?,
            },
            AM_MSG4 => AttestMsg::Msg4 {
                session: r.get_u64()?,
                accept: r.get_bool()?,
                confirm: r.get_array()?,
            },
            t => return Err(WireError::BadTag(t)),
        })
    }
}

fn put_opt_statement(w: &mut WireWriter, st: &Option<IasStatement>) {
    match st {
        Some(st) => {
            w.put_bool(true);
            st.encode_into(w);
        }
        None => w.put_bool(false),
    }
}

fn get_opt_statement(r: &mut WireReader<'_>) -> Result<Option<IasStatement>, WireError> {
    Ok(if r.get_bool()? { Some(IasStatement::decode_from(r)?) } else { None })
}

// ---------------------------------------------------------------------------
// Quotes and statements
// ---------------------------------------------------------------------------

const QUOTE_AAD: &[u8] = b"enclave-quote";

/// What the platform attests to: the code identity and a report-data digest
/// chosen by the enclave, authenticated toward the service with the
/// platform key. Travels only inside the hybrid wrapping.
#[derive(Clone, PartialEq, Eq, Debug)]
struct Quote {
    mr: Mrenclave,
    report_data: [u8; 32],
    platform_mac: [u8; 32],
}

impl Quote {
    fn encode(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_array(&self.mr.0);
        w.put_array(&self.report_data);
        w.put_array(&self.platform_mac);
        w.finish()
    }

    fn decode(bytes: &[u8]) -> Option<Quote> {
        let mut r = WireReader::new(bytes);
        let q = Quote {
            mr: Mrenclave(r.get_array().ok()?),
            report_data: r.get_array().ok()?,
            platform_mac: r.get_array().ok()?,
        };
        r.expect_end().ok()?;
        Some(q)
    }
}

fn platform_mac(platform: &SymKey, mr: &Mrenclave, report_data: &[u8; 32]) -> [u8; 32] {
    let mut w = WireWriter::new();
    w.put_bytes(b"platform-quote");
    w.put_array(&mr.0);
    w.put_array(report_data);
    hmac_sha256(platform, &w.finish())
}

/// The simulated enclave boundary: holding a minter is what it means to run
/// inside an enclave. It mints quotes only for its own measured identity
/// and encrypts them to the attestation service.
#[derive(Clone)]
pub struct QuoteMinter {
    mr: Mrenclave,
    platform: SymKey,
    ias_wrap: KxPub,
}

impl QuoteMinter {
    pub fn new(mr: Mrenclave, platform: SymKey, ias_wrap: KxPub) -> QuoteMinter {
        QuoteMinter { mr, platform, ias_wrap }
    }

    pub fn mr(&self) -> Mrenclave {
        self.mr
    }

    fn mint(
        &self,
        suite: &dyn CryptoSuite,
        report_data: [u8; 32],
        rng: &mut dyn rand::RngCore,
    ) -> Option<Vec<u8>> {
        let quote = Quote {
            mr: self.mr,
            report_data,
            platform_mac: platform_mac(&self.platform, &self.mr, &report_data),
        };
        hybrid_wrap(suite, &self.ias_wrap, QUOTE_AAD, &quote.encode(), rng)
    }
}

/// The service's signed verdict on a quote. The nonce is fresh per
/// statement, which is what makes replay detection observable.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct IasStatement {
    pub mrenclave: Mrenclave,
    pub report_data: [u8; 32],
    pub nonce: u64,
    pub sig: Signature,
}

impl IasStatement {
    fn body(mr: &Mrenclave, report_data: &[u8; 32], nonce: u64) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_bytes(b"ias-statement");
        w.put_array(&mr.0);
        w.put_array(report_data);
        w.put_u64(nonce);
        w.finish()
    }

    pub fn verify(&self, suite: &dyn CryptoSuite, ias_pub: &SigPubKey) -> bool {
        suite.verify(ias_pub, &Self::body(&self.mrenclave, &self.report_data, self.nonce), &self.sig)
    }
}

impl WireEncode for IasStatement {
    fn encode_into(&self, w: &mut WireWriter) {
        w.put_array(&self.mrenclave.0);
        w.put_array(&self.report_data);
        w.put_u64(self.nonce);
        w.put_bytes(&self.sig.0);
    }
}

impl WireDecode for IasStatement {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(IasStatement {
            mrenclave: Mrenclave(r.get_array()?),
            report_data: r.get_array()?,
            nonce: r.get_u64()?,
            sig: Signature(r.get_bytes()?),
        })
    }
}

// ---------------------------------------------------------------------------
// Key schedule
// ---------------------------------------------------------------------------

fn report_data(session: u64, prover_eph: &KxPub) -> [u8; 32] {
    sha256_parts(&[b"att-report-data", &session.to_le_bytes(), &prover_eph.0])
}

fn msg2_body(session: u64, verifier_eph: &KxPub, prover_eph: &KxPub) -> Vec<u8> {
    let mut w = WireWriter::new();
    w.put_bytes(b"att-eph-key");
    w.put_u64(session);
    w.put_bytes(&verifier_eph.0);
    w.put_bytes(&prover_eph.0);
    w.finish()
}

/// (session key, confirmation key) from the raw exchange output.
fn session_keys(shared: &SymKey) -> (SymKey, SymKey) {
    (kdf(shared, "att-session"), kdf(shared, "att-confirm"))
}

fn confirm_mac(
    confirm_key: &SymKey,
    direction: &'static str,
    session: u64,
    prover_eph: &KxPub,
    verifier_eph: &KxPub,
) -> [u8; 32] {
    let mut w = WireWriter::new();
    w.put_bytes(direction.as_bytes());
    w.put_u64(session);
    w.put_bytes(&prover_eph.0);
    w.put_bytes(&verifier_eph.0);
    hmac_sha256(confirm_key, &w.finish())
}

// ---------------------------------------------------------------------------
// Endpoint sessions
// ---------------------------------------------------------------------------

/// The prover's embedded trust root: whose signature it requires on the
/// verifier's ephemeral key before revealing a quote.
#[derive(Clone, Debug)]
pub enum TrustRoot {
    /// Known-verifier flavor: the verifier's own public key is baked in.
    Verifier(SigPubKey),
    /// Proxied flavor: only the relay proxy's key is baked in.
    Proxy(SigPubKey),
}

impl TrustRoot {
    fn key(&self) -> &SigPubKey {
        match self {
            TrustRoot::Verifier(k) | TrustRoot::Proxy(k) => k,
        }
    }
}

/// Per-node attestation configuration. A node may play verifier, prover, or
/// both; absent pieces disable the corresponding role.
#[derive(Clone)]
pub struct AttConfig {
    pub suite: Arc<dyn CryptoSuite>,
    /// Where handshake traffic is routed; also the only accepted source.
    pub proxy: NodeId,
    /// The service's statement-verification key.
    pub ias_pub: SigPubKey,
    /// Prover role: the simulated enclave boundary. `None` means this node
    /// cannot be attested and silently fails any challenge.
    pub minter: Option<QuoteMinter>,
    /// Prover role: the embedded trust root.
    pub prover_trust: Option<TrustRoot>,
    /// Verifier role: signing key for msg2 in the known-verifier flavor;
    /// `None` sends msg2 unsigned and relies on the proxy's signature.
    pub verifier_key: Option<SigPrivKey>,
    /// Watchdog for every session this node participates in.
    pub timeout: SimTime,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AttRole {
    Verifier,
    Prover,
}

/// Terminal result of a session, handed to the host node for action.
#[derive(Clone, Debug)]
pub struct AttOutcome {
    pub session: u64,
    pub role: AttRole,
    /// Verifier side: the prover endpoint. Prover side: the verifier as
    /// authenticated by the relay (bookkeeping only).
    pub peer: NodeId,
    pub result: Result<SymKey, &'static str>,
    /// Prover side: the session chains up to a known-verifier trust root
    /// (the management layer's verification key in deployments), so
    /// directives under this key are management-rooted.
    pub eml_rooted: bool,
}

struct VerifierSession {
    prover: NodeId,
    expected_mr: Mrenclave,
    eph_priv: KxPriv,
    eph_pub: KxPub,
    /// Set once msg1 arrives; doubles as the state marker.
    prover_eph: Option<KxPub>,
}

struct ProverSession {
    verifier: NodeId,
    eph_priv: KxPriv,
    eph_pub: KxPub,
    /// Set once msg2 verifies: (session key, confirm key, verifier eph).
    keys: Option<(SymKey, SymKey, KxPub)>,
}

/// All attestation sessions a node participates in, in either role. Host
/// nodes feed it `Envelope::Attest` payloads and timeout fires, and act on
/// the returned outcomes.
pub struct AttSessions {
    cfg: AttConfig,
    next: u64,
    verifier: BTreeMap<u64, VerifierSession>,
    prover: BTreeMap<u64, ProverSession>,
    /// Statement nonces this node has ever accepted; replays are rejected.
    seen_nonces: BTreeSet<u64>,
}

/// Session ids carry a per-node tag so concurrent verifiers never collide
/// at a shared prover or proxy, while staying small enough to read in
/// traces.
fn session_tag(id: NodeId) -> u64 {
    match id {
        NodeId::Owner(i) => 1 + 2 * i as u64,
        NodeId::Eml(i) => 2 + 2 * i as u64,
        NodeId::Replica(i) => 100 + i as u64,
        NodeId::Client(i) => 130 + i as u64,
        NodeId::Enclave(i) => 160 + (i % 32) as u64,
        NodeId::Cloud => 192,
        NodeId::Proxy => 193,
        NodeId::Ias => 194,
    }
}

impl AttSessions {
    pub fn new(cfg: AttConfig) -> AttSessions {
        AttSessions {
            cfg,
            next: 0,
            verifier: BTreeMap::new(),
            prover: BTreeMap::new(),
            seen_nonces: BTreeSet::new(),
        }
    }

    /// Installs the verifier signing key after the fact (the management
    /// group key exists only once group setup completes).
    pub fn set_verifier_key(&mut self, key: SigPrivKey) {
        self.cfg.verifier_key = Some(key);
    }

    /// Starts attesting `prover`, expecting code identity `expected_mr`.
    /// Returns the session id; the result arrives later as an
    /// [`AttOutcome`].
    pub fn begin(&mut self, ctx: &mut dyn NodeCtx, prover: NodeId, expected_mr: Mrenclave) -> u64 {
        self.next += 1;
        let session = self.next * 256 + session_tag(ctx.self_id());
        let (eph_priv, eph_pub) = self.cfg.suite.kx_keypair(ctx.rng());
        self.verifier.insert(
            session,
            VerifierSession { prover, expected_mr, eph_priv, eph_pub, prover_eph: None },
        );
        ctx.trace(TraceEvent::AttestMsg { session, step: "msg0-sent" });
        ctx.send(
            self.cfg.proxy,
            Envelope::Attest(AttestMsg::Msg0 { session, verifier: ctx.self_id(), prover }),
        );
        ctx.set_timer(self.cfg.timeout, TimerKind::AttestTimeout { session });
        session
    }

    pub fn on_message(
        &mut self,
        ctx: &mut dyn NodeCtx,
        from: NodeId,
        msg: AttestMsg,
    ) -> Vec<AttOutcome> {
        // Handshake traffic is only ever accepted from the relay channel.
        if from != self.cfg.proxy {
            return Vec::new();
        }
        match msg {
            AttestMsg::Msg0 { session, verifier, prover } => {
                self.prover_on_msg0(ctx, session, verifier, prover);
                Vec::new()
            }
            AttestMsg::Msg1 { session, prover_eph } => {
                self.verifier_on_msg1(ctx, session, prover_eph);
                Vec::new()
            }
            AttestMsg::Msg2 { session, verifier_eph, sig } => {
                self.prover_on_msg2(ctx, session, verifier_eph, sig).into_iter().collect()
            }
            AttestMsg::Statement { session, statement, confirm } => {
                self.verifier_on_statement(ctx, session, statement, confirm).into_iter().collect()
            }
            AttestMsg::Msg4 { session, accept, confirm } => {
                self.prover_on_msg4(ctx, session, accept, confirm).into_iter().collect()
            }
            // Proxy/service-internal messages; endpoints ignore them.
            AttestMsg::Msg3 { .. } | AttestMsg::IasSubmit { .. } | AttestMsg::IasReply { .. } => {
                Vec::new()
            }
        }
    }

    pub fn on_timeout(&mut self, ctx: &mut dyn NodeCtx, session: u64) -> Vec<AttOutcome> {
        if let Some(s) = self.verifier.remove(&session) {
            ctx.trace(TraceEvent::AttestFailed { session, reason: "timeout" });
            return vec![AttOutcome {
                session,
                role: AttRole::Verifier,
                peer: s.prover,
                result: Err("timeout"),
                eml_rooted: false,
            }];
        }
        if let Some(s) = self.prover.remove(&session) {
            ctx.trace(TraceEvent::AttestFailed { session, reason: "timeout" });
            return vec![AttOutcome {
                session,
                role: AttRole::Prover,
                peer: s.verifier,
                result: Err("timeout"),
                eml_rooted: false,
            }];
        }
        Vec::new()
    }

    fn prover_on_msg0(
        &mut self,
        ctx: &mut dyn NodeCtx,
        session: u64,
        verifier: NodeId,
        prover: NodeId,
    ) {
        if prover != ctx.self_id()
            || self.prover.contains_key(&session)
            || self.verifier.contains_key(&session)
        {
            return;
        }
        if self.cfg.minter.is_none() || self.cfg.prover_trust.is_none() {
            // Not inside the simulated enclave boundary: cannot be attested.
            ctx.trace(TraceEvent::AttestFailed { session, reason: "not-attestable" });
            return;
        }
        let (eph_priv, eph_pub) = self.cfg.suite.kx_keypair(ctx.rng());
        ctx.trace(TraceEvent::AttestMsg { session, step: "msg1-sent" });
        ctx.send(
            self.cfg.proxy,
            Envelope::Attest(AttestMsg::Msg1 { session, prover_eph: eph_pub.clone() }),
        );
        ctx.set_timer(self.cfg.timeout, TimerKind::AttestTimeout { session });
        self.prover.insert(session, ProverSession { verifier, eph_priv, eph_pub, keys: None });
    }

    fn verifier_on_msg1(&mut self, ctx: &mut dyn NodeCtx, session: u64, prover_eph: KxPub) {
        let Some(s) = self.verifier.get_mut(&session) else { return };
        if s.prover_eph.is_some() {
            return; // duplicate delivery
        }
        let sig = self
            .cfg
            .verifier_key
            .as_ref()
            .map(|k| self.cfg.suite.sign(k, &msg2_body(session, &s.eph_pub, &prover_eph)));
        let verifier_eph = s.eph_pub.clone();
        s.prover_eph = Some(prover_eph);
        ctx.trace(TraceEvent::AttestMsg { session, step: "msg2-sent" });
        ctx.send(self.cfg.proxy, Envelope::Attest(AttestMsg::Msg2 { session, verifier_eph, sig }));
    }

    fn prover_on_msg2(
        &mut self,
        ctx: &mut dyn NodeCtx,
        session: u64,
        verifier_eph: KxPub,
        sig: Option<Signature>,
    ) -> Option<AttOutcome> {
        let s = self.prover.get(&session)?;
        if s.keys.is_some() {
            return None; // duplicate delivery
        }
        let trust = self.cfg.prover_trust.as_ref().expect("checked at msg0");
        let fail = |this: &mut Self, ctx: &mut dyn NodeCtx, reason: &'static str| {
            let s = this.prover.remove(&session).expect("present");
            ctx.trace(TraceEvent::AttestFailed { session, reason });
            Some(AttOutcome {
                session,
                role: AttRole::Prover,
                peer: s.verifier,
                result: Err(reason),
                eml_rooted: false,
            })
        };
        let Some(sig) = sig else {
            return fail(self, ctx, "unsigned-eph-key");
        };
        let body = msg2_body(session, &verifier_eph, &s.eph_pub);
        if !self.cfg.suite.verify(trust.key(), &body, &sig) {
            // The offered key does not chain to the embedded root; the
            // quote is never produced, let alone revealed.
            return fail(self, ctx, "untrusted-eph-sig");
        }
        ctx.trace(TraceEvent::AttestMsg { session, step: "msg2-verified" });
        let Some(shared) = self.cfg.suite.kx_shared(&s.eph_priv, &verifier_eph) else {
            return fail(self, ctx, "malformed-eph-key");
        };
        let (session_key, confirm_key) = session_keys(&shared);
        let rd = report_data(session, &s.eph_pub);
        let minter = self.cfg.minter.as_ref().expect("checked at msg0");
        let Some(wrapped) = minter.mint(self.cfg.suite.as_ref(), rd, ctx.rng()) else {
            return fail(self, ctx, "quote-wrap-failed");
        };
        let mac = confirm_mac(&confirm_key, "prover-confirm", session, &s.eph_pub, &verifier_eph);
        ctx.trace(TraceEvent::AttestMsg { session, step: "msg3-sent" });
        ctx.send(
            self.cfg.proxy,
            Envelope::Attest(AttestMsg::Msg3 { session, wrapped_quote: wrapped, confirm: mac }),
        );
        let s = self.prover.get_mut(&session).expect("present");
        s.keys = Some((session_key, confirm_key, verifier_eph));
        None
    }

    fn verifier_on_statement(
        &mut self,
        ctx: &mut dyn NodeCtx,
        session: u64,
        statement: Option<IasStatement>,
        confirm: [u8; 32],
    ) -> Option<AttOutcome> {
        match self.verifier.get(&session) {
            Some(s) if s.prover_eph.is_some() => {}
            _ => return None,
        }
        let verdict = self.check_statement(session, statement, confirm);
        let s = self.verifier.remove(&session).expect("present");
        match verdict {
            Ok((key, confirm_key)) => {
                let prover_eph = s.prover_eph.as_ref().expect("present");
                let mac =
                    confirm_mac(&confirm_key, "verifier-confirm", session, prover_eph, &s.eph_pub);
                ctx.trace(TraceEvent::AttestMsg { session, step: "statement-verified" });
                ctx.send(
                    self.cfg.proxy,
                    Envelope::Attest(AttestMsg::Msg4 { session, accept: true, confirm: mac }),
                );
                ctx.trace(TraceEvent::AttestComplete {
                    session,
                    peer: s.prover,
                    eml_rooted: false,
                });
                Some(AttOutcome {
                    session,
                    role: AttRole::Verifier,
                    peer: s.prover,
                    result: Ok(key),
                    eml_rooted: false,
                })
            }
            Err(reason) => {
                // Tell the prover the session is dead so it cleans up; the
                // rejection itself carries no key material.
                ctx.send(
                    self.cfg.proxy,
                    Envelope::Attest(AttestMsg::Msg4 { session, accept: false, confirm: [0; 32] }),
                );
                ctx.trace(TraceEvent::AttestFailed { session, reason });
                Some(AttOutcome {
                    session,
                    role: AttRole::Verifier,
                    peer: s.prover,
                    result: Err(reason),
                    eml_rooted: false,
                })
            }
        }
    }

    /// All acceptance checks, in order: statement signature, statement
    /// freshness, code identity, report-data binding, key confirmation.
    /// Any miss yields the failure reason and no key.
    fn check_statement(
        &mut self,
        session: u64,
        statement: Option<IasStatement>,
        confirm: [u8; 32],
    ) -> Result<(SymKey, SymKey), &'static str> {
        let st = statement.ok_or("ias-rejected")?;
        if !st.verify(self.cfg.suite.as_ref(), &self.cfg.ias_pub) {
            return Err("bad-statement");
        }
        if !self.seen_nonces.insert(st.nonce) {
            return Err("statement-replay");
        }
        let s = self.verifier.get(&session).expect("caller checked");
        let prover_eph = s.prover_eph.as_ref().expect("caller checked");
        if st.mrenclave != s.expected_mr {
            return Err("mr-mismatch");
        }
        if st.report_data != report_data(session, prover_eph) {
            return Err("report-data-mismatch");
        }
        let shared =
            self.cfg.suite.kx_shared(&s.eph_priv, prover_eph).ok_or("malformed-eph-key")?;
        let (session_key, confirm_key) = session_keys(&shared);
        if confirm != confirm_mac(&confirm_key, "prover-confirm", session, prover_eph, &s.eph_pub)
        {
            // The prover derived a different key than we did: someone
            // substituted an ephemeral value they were allowed to sign.
            return Err("key-confirm-failed");
        }
        Ok((session_key, confirm_key))
    }

    fn prover_on_msg4(
        &mut self,
        ctx: &mut dyn NodeCtx,
        session: u64,
        accept: bool,
        confirm: [u8; 32],
    ) -> Option<AttOutcome> {
        let s = self.prover.get(&session)?;
        let Some((_, confirm_key, verifier_eph)) = s.keys.as_ref() else {
            return None; // msg4 before msg2: out of order, drop
        };
        let reason = if !accept {
            Some("rejected-by-verifier")
        } else if confirm
            != confirm_mac(confirm_key, "verifier-confirm", session, &s.eph_pub, verifier_eph)
        {
            Some("bad-verifier-confirm")
        } else {
            None
        };
        let s = self.prover.remove(&session).expect("present");
        match reason {
            Some(reason) => {
                ctx.trace(TraceEvent::AttestFailed { session, reason });
                Some(AttOutcome {
                    session,
                    role: AttRole::Prover,
                    peer: s.verifier,
                    result: Err(reason),
                    eml_rooted: false,
                })
            }
            None => {
                let eml_rooted =
                    matches!(self.cfg.prover_trust, Some(TrustRoot::Verifier(_)));
                ctx.trace(TraceEvent::AttestComplete { session, peer: s.verifier, eml_rooted });
                let (key, _, _) = s.keys.expect("present");
                Some(AttOutcome {
                    session,
                    role: AttRole::Prover,
                    peer: s.verifier,
                    result: Ok(key),
                    eml_rooted,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Relay proxy
// ---------------------------------------------------------------------------

struct Relay {
    verifier: NodeId,
    prover: NodeId,
    prover_eph: Option<KxPub>,
    confirm: Option<[u8; 32]>,
}

/// The registered relay between verifiers and provers. Forwards handshake
/// messages unchanged, with two exceptions: it signs unsigned msg2
/// ephemeral keys (the proxied flavor) and swaps msg3's encrypted quote for
/// the service's signed statement.
pub struct ProxyNode {
    suite: Arc<dyn CryptoSuite>,
    sig: SigPrivKey,
    ias: NodeId,
    timeout: SimTime,
    relays: BTreeMap<u64, Relay>,
}

impl ProxyNode {
    pub fn new(suite: Arc<dyn CryptoSuite>, sig: SigPrivKey, ias: NodeId, timeout: SimTime) -> Self {
        ProxyNode { suite, sig, ias, timeout, relays: BTreeMap::new() }
    }

    fn on_attest(&mut self, ctx: &mut dyn NodeCtx, from: NodeId, msg: AttestMsg) {
        match msg {
            AttestMsg::Msg0 { session, prover, .. } => {
                if self.relays.contains_key(&session) {
                    return;
                }
                self.relays.insert(
                    session,
                    Relay { verifier: from, prover, prover_eph: None, confirm: None },
                );
                ctx.set_timer(self.timeout, TimerKind::AttestTimeout { session });
                // Rewrite the verifier field to the transport-stamped
                // sender so the prover's bookkeeping cannot be spoofed.
                ctx.send(prover, Envelope::Attest(AttestMsg::Msg0 { session, verifier: from, prover }));
            }
            AttestMsg::Msg1 { session, prover_eph } => {
                let Some(r) = self.relays.get_mut(&session) else { return };
                if from != r.prover || r.prover_eph.is_some() {
                    return;
                }
                r.prover_eph = Some(prover_eph.clone());
                let to = r.verifier;
                ctx.send(to, Envelope::Attest(AttestMsg::Msg1 { session, prover_eph }));
            }
            AttestMsg::Msg2 { session, verifier_eph, sig } => {
                let Some(r) = self.relays.get(&session) else { return };
                if from != r.verifier {
                    return;
                }
                let sig = match sig {
                    Some(sig) => Some(sig),
                    None => {
                        // Proxied flavor: vouch for the verifier's key.
                        let Some(prover_eph) = r.prover_eph.as_ref() else { return };
                        ctx.trace(TraceEvent::AttestMsg { session, step: "eph-signed" });
                        Some(self.suite.sign(
                            &self.sig,
                            &msg2_body(session, &verifier_eph, prover_eph),
                        ))
                    }
                };
                ctx.send(r.prover, Envelope::Attest(AttestMsg::Msg2 { session, verifier_eph, sig }));
            }
            AttestMsg::Msg3 { session, wrapped_quote, confirm } => {
                let Some(r) = self.relays.get_mut(&session) else { return };
                if from != r.prover || r.confirm.is_some() {
                    return;
                }
                r.confirm = Some(confirm);
                ctx.trace(TraceEvent::AttestMsg { session, step: "ias-submit" });
                ctx.send(self.ias, Envelope::Attest(AttestMsg::IasSubmit { session, wrapped_quote }));
            }
            AttestMsg::IasReply { session, statement } => {
                if from != self.ias {
                    return;
                }
                let Some(r) = self.relays.get(&session) else { return };
                let Some(confirm) = r.confirm else { return };
                let to = r.verifier;
                ctx.send(to, Envelope::Attest(AttestMsg::Statement { session, statement, confirm }));
            }
            AttestMsg::Msg4 { session, accept, confirm } => {
                let Some(r) = self.relays.get(&session) else { return };
                if from != r.verifier {
                    return;
                }
                let to = r.prover;
                self.relays.remove(&session);
                ctx.send(to, Envelope::Attest(AttestMsg::Msg4 { session, accept, confirm }));
            }
            AttestMsg::IasSubmit { .. } | AttestMsg::Statement { .. } => {}
        }
    }
}

impl Node for ProxyNode {
    fn on_start(&mut self, _ctx: &mut dyn NodeCtx) {}

    fn on_message(&mut self, ctx: &mut dyn NodeCtx, from: NodeId, msg: Envelope) {
        if let Envelope::Attest(m) = msg {
            self.on_attest(ctx, from, m);
        }
    }

    fn on_timer(&mut self, _ctx: &mut dyn NodeCtx, kind: TimerKind) {
        if let TimerKind::AttestTimeout { session } = kind {
            self.relays.remove(&session);
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

// ---------------------------------------------------------------------------
// Mock attestation service
// ---------------------------------------------------------------------------

/// The published half of the service's identity.
#[derive(Clone)]
pub struct IasKeys {
    /// Quotes are encrypted to this value.
    pub wrap: KxPub,
    /// Statements verify under this key.
    pub verify: SigPubKey,
}

/// Mock attestation service: accepts encrypted quotes from registered
/// parties only, checks platform authenticity, and signs statements with a
/// fresh nonce each. Processes one submission at a time by construction.
pub struct MockIas {
    suite: Arc<dyn CryptoSuite>,
    kx_priv: KxPriv,
    sig: SigPrivKey,
    platform: SymKey,
    registered: BTreeSet<NodeId>,
    next_nonce: u64,
}

impl MockIas {
    pub fn new(
        suite: Arc<dyn CryptoSuite>,
        platform: SymKey,
        registered: BTreeSet<NodeId>,
        seed: u64,
    ) -> (MockIas, IasKeys) {
        let mut rng =
            ChaCha20Rng::from_seed(sha256_parts(&[b"mock-ias", &seed.to_le_bytes()]));
        let (kx_priv, kx_pub) = suite.kx_keypair(&mut rng);
        let (sig_priv, sig_pub) = suite.sig_keypair(&mut rng);
        let ias = MockIas { suite, kx_priv, sig: sig_priv, platform, registered, next_nonce: 0 };
        (ias, IasKeys { wrap: kx_pub, verify: sig_pub })
    }

    fn evaluate(&mut self, from: NodeId, wrapped: &[u8]) -> Result<IasStatement, &'static str> {
        if !self.registered.contains(&from) {
            return Err("unregistered-proxy");
        }
        let plain = hybrid_unwrap(self.suite.as_ref(), &self.kx_priv, QUOTE_AAD, wrapped)
            .ok_or("malformed-quote")?;
        let quote = Quote::decode(&plain).ok_or("malformed-quote")?;
        if quote.platform_mac != platform_mac(&self.platform, &quote.mr, &quote.report_data) {
            return Err("forged-quote");
        }
        self.next_nonce += 1;
        let nonce = self.next_nonce;
        let body = IasStatement::body(&quote.mr, &quote.report_data, nonce);
        Ok(IasStatement {
            mrenclave: quote.mr,
            report_data: quote.report_data,
            nonce,
            sig: self.suite.sign(&self.sig, &body),
        })
    }
}

impl Node for MockIas {
    fn on_start(&mut self, _ctx: &mut dyn NodeCtx) {}

    fn on_message(&mut self, ctx: &mut dyn NodeCtx, from: NodeId, msg: Envelope) {
        let Envelope::Attest(AttestMsg::IasSubmit { session, wrapped_quote }) = msg else {
            return;
        };
        let statement = match self.evaluate(from, &wrapped_quote) {
            Ok(st) => {
                ctx.trace(TraceEvent::AttestMsg { session, step: "statement-signed" });
                Some(st)
            }
            Err(reason) => {
                ctx.trace(TraceEvent::AttestFailed { session, reason });
                None
            }
        };
        ctx.send(from, Envelope::Attest(AttestMsg::IasReply { session, statement }));
    }

    fn on_timer(&mut self, _ctx: &mut dyn NodeCtx, _kind: TimerKind) {}

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{suite, CryptoMode};
    use crate::testutil::TestCtx;

    const PLATFORM: SymKey = [0x44; 32];

    fn mr(label: &str) -> Mrenclave {
        Mrenclave(sha256_parts(&[b"mr", label.as_bytes()]))
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Flavor {
        Known,
        Proxied,
    }

    struct Rig {
        suite: Arc<dyn CryptoSuite>,
        verifier_id: NodeId,
        prover_id: NodeId,
        verifier: AttSessions,
        vctx: TestCtx,
        prover: AttSessions,
        pctx: TestCtx,
        proxy: ProxyNode,
        xctx: TestCtx,
        ias: MockIas,
        ictx: TestCtx,
        proxy_sig: SigPrivKey,
        outcomes: Vec<(NodeId, AttOutcome)>,
        /// (incoming to proxy, outgoing from proxy) encoded bytes, for the
        /// relay-transparency assertion.
        proxy_in: Vec<Vec<u8>>,
        proxy_out: Vec<Vec<u8>>,
    }

    fn rig(mode: CryptoMode, flavor: Flavor, registered: bool) -> Rig {
        let suite = suite(mode);
        let verifier_id = NodeId::Eml(0);
        let prover_id = NodeId::Enclave(0);
        let mut seedrng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let (proxy_sig, proxy_pub) = suite.sig_keypair(&mut seedrng);
        let (verifier_sig, verifier_pub) = suite.sig_keypair(&mut seedrng);
        let reg: BTreeSet<NodeId> =
            if registered { [NodeId::Proxy].into_iter().collect() } else { BTreeSet::new() };
        let (ias, ias_keys) = MockIas::new(suite.clone(), PLATFORM, reg, 3);
        let minter = QuoteMinter::new(mr("app"), PLATFORM, ias_keys.wrap.clone());
        let (prover_trust, verifier_key) = match flavor {
            Flavor::Known => (TrustRoot::Verifier(verifier_pub), Some(verifier_sig)),
            Flavor::Proxied => (TrustRoot::Proxy(proxy_pub), None),
        };
        let verifier = AttSessions::new(AttConfig {
            suite: suite.clone(),
            proxy: NodeId::Proxy,
            ias_pub: ias_keys.verify.clone(),
            minter: None,
            prover_trust: None,
            verifier_key,
            timeout: 1_000,
        });
        let prover = AttSessions::new(AttConfig {
            suite: suite.clone(),
            proxy: NodeId::Proxy,
            ias_pub: ias_keys.verify,
            minter: Some(minter),
            prover_trust: Some(prover_trust),
            verifier_key: None,
            timeout: 1_000,
        });
        let proxy = ProxyNode::new(suite.clone(), proxy_sig.clone(), NodeId::Ias, 2_000);
        Rig {
            suite,
            verifier_id,
            prover_id,
            verifier,
            vctx: TestCtx::new(verifier_id, 11),
            prover,
            pctx: TestCtx::new(prover_id, 12),
            proxy,
            xctx: TestCtx::new(NodeId::Proxy, 13),
            ias,
            ictx: TestCtx::new(NodeId::Ias, 14),
            proxy_sig,
            outcomes: Vec::new(),
            proxy_in: Vec::new(),
            proxy_out: Vec::new(),
        }
    }

    impl Rig {
        fn begin(&mut self, expected: Mrenclave) -> u64 {
            self.verifier.begin(&mut self.vctx, self.prover_id, expected)
        }

        /// Delivers queued messages until quiescent. `tamper` may rewrite
        /// or drop (return false) any message in flight.
        fn pump(&mut self, tamper: &mut dyn FnMut(NodeId, NodeId, &mut AttestMsg) -> bool) {
            loop {
                let mut queue: Vec<(NodeId, NodeId, Envelope)> = Vec::new();
                for (src, ctx) in [
                    (self.verifier_id, &mut self.vctx),
                    (self.prover_id, &mut self.pctx),
                    (NodeId::Proxy, &mut self.xctx),
                    (NodeId::Ias, &mut self.ictx),
                ] {
                    for (to, env) in ctx.drain() {
                        queue.push((src, to, env));
                    }
                }
                if queue.is_empty() {
                    return;
                }
                for (src, dst, env) in queue {
                    let Envelope::Attest(mut msg) = env else { continue };
                    if !tamper(src, dst, &mut msg) {
                        continue;
                    }
                    if dst == NodeId::Proxy {
                        self.proxy_in.push(msg.encode());
                    }
                    if src == NodeId::Proxy {
                        self.proxy_out.push(msg.encode());
                    }
                    let env = Envelope::Attest(msg);
                    if dst == self.verifier_id {
                        let Envelope::Attest(m) = env else { unreachable!() };
                        for o in self.verifier.on_message(&mut self.vctx, src, m) {
                            self.outcomes.push((dst, o));
                        }
                    } else if dst == self.prover_id {
                        let Envelope::Attest(m) = env else { unreachable!() };
                        for o in self.prover.on_message(&mut self.pctx, src, m) {
                            self.outcomes.push((dst, o));
                        }
                    } else if dst == NodeId::Proxy {
                        self.proxy.on_message(&mut self.xctx, src, env);
                    } else if dst == NodeId::Ias {
                        self.ias.on_message(&mut self.ictx, src, env);
                    }
                }
            }
        }

        fn run(&mut self, expected: Mrenclave) -> u64 {
            let s = self.begin(expected);
            self.pump(&mut |_, _, _| true);
            s
        }

        fn outcome_of(&self, host: NodeId) -> &AttOutcome {
            &self.outcomes.iter().find(|(h, _)| *h == host).expect("outcome present").1
        }

        fn steps(&self, host: NodeId) -> Vec<&'static str> {
            let ctx = if host == self.verifier_id { &self.vctx } else { &self.pctx };
            ctx.traces
                .iter()
                .filter_map(|e| match e {
                    TraceEvent::AttestMsg { step, .. } => Some(*step),
                    _ => None,
                })
                .collect()
        }
    }

    fn keys_match(r: &Rig) -> SymKey {
        let v = r.outcome_of(r.verifier_id).result.expect("verifier key");
        let p = r.outcome_of(r.prover_id).result.expect("prover key");
        assert_eq!(v, p, "both endpoints must derive the same key");
        v
    }

    #[test]
    fn known_verifier_flavor_completes() {
        for mode in [CryptoMode::Test, CryptoMode::Real] {
            let mut r = rig(mode, Flavor::Known, true);
            r.run(mr("app"));
            let key = keys_match(&r);
            assert_ne!(key, [0; 32]);
            assert!(r.outcome_of(r.prover_id).eml_rooted, "known-verifier root is management-rooted");
            assert!(!r.outcome_of(r.verifier_id).eml_rooted);
        }
    }

    #[test]
    fn proxied_flavor_completes() {
        for mode in [CryptoMode::Test, CryptoMode::Real] {
            let mut r = rig(mode, Flavor::Proxied, true);
            r.run(mr("app"));
            keys_match(&r);
            assert!(!r.outcome_of(r.prover_id).eml_rooted);
            let steps = r.steps(r.prover_id);
            let verified = steps.iter().position(|s| *s == "msg2-verified").unwrap();
            let revealed = steps.iter().position(|s| *s == "msg3-sent").unwrap();
            assert!(verified < revealed, "quote must not be revealed before the key verifies");
        }
    }

    #[test]
    fn honest_relay_is_transparent_except_statement() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        r.run(mr("app"));
        // Everything the proxy emitted toward the endpoints must be
        // byte-identical to something it received, except the statement
        // (quote substitution) — and in this flavor there is no re-signing.
        for out in &r.proxy_out {
            let msg = AttestMsg::decode(out).unwrap();
            match msg {
                AttestMsg::Statement { statement, confirm, .. } => {
                    assert!(statement.is_some());
                    // The confirmation MAC is carried over from msg3 untouched.
                    let msg3 = r.proxy_in.iter().find_map(|b| match AttestMsg::decode(b) {
                        Ok(AttestMsg::Msg3 { confirm: c, .. }) => Some(c),
                        _ => None,
                    });
                    assert_eq!(msg3, Some(confirm));
                }
                AttestMsg::IasSubmit { wrapped_quote, .. } => {
                    let msg3_quote = r.proxy_in.iter().any(|b| {
                        matches!(AttestMsg::decode(b), Ok(AttestMsg::Msg3 { wrapped_quote: q, .. }) if q == wrapped_quote)
                    });
                    assert!(msg3_quote, "submitted quote is the one received");
                }
                _ => {
                    assert!(
                        r.proxy_in.contains(out),
                        "relayed message must be byte-identical to an input: {msg:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn mr_mismatch_rejected() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        r.run(mr("different-app"));
        assert_eq!(r.outcome_of(r.verifier_id).result, Err("mr-mismatch"));
        assert_eq!(r.outcome_of(r.prover_id).result, Err("rejected-by-verifier"));
    }

    #[test]
    fn tampered_quote_rejected() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        let s = r.begin(mr("app"));
        r.pump(&mut |_, _, msg| {
            if let AttestMsg::Msg3 { wrapped_quote, .. } = msg {
                wrapped_quote[0] ^= 0x01;
            }
            true
        });
        assert_eq!(r.outcome_of(r.verifier_id).result, Err("ias-rejected"));
        assert!(r
            .ictx
            .traces
            .contains(&TraceEvent::AttestFailed { session: s, reason: "malformed-quote" }));
    }

    #[test]
    fn quote_without_platform_key_rejected() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        // A forger outside the enclave boundary: wraps a well-formed quote
        // but authenticates it with a guessed platform key.
        let wrong = QuoteMinter::new(mr("app"), [0x55; 32], r.ias_wrap());
        r.prover.cfg.minter = Some(wrong);
        let s = r.begin(mr("app"));
        r.pump(&mut |_, _, _| true);
        assert_eq!(r.outcome_of(r.verifier_id).result, Err("ias-rejected"));
        assert!(r
            .ictx
            .traces
            .contains(&TraceEvent::AttestFailed { session: s, reason: "forged-quote" }));
    }

    impl Rig {
        fn ias_wrap(&self) -> KxPub {
            // Reconstructable because the service keys derive from the seed.
            let (_, keys) = MockIas::new(self.suite.clone(), PLATFORM, BTreeSet::new(), 3);
            keys.wrap
        }
    }

    #[test]
    fn node_without_minter_never_yields_key() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        r.prover.cfg.minter = None;
        let s = r.begin(mr("app"));
        r.pump(&mut |_, _, _| true);
        assert!(r.outcomes.is_empty(), "no session may complete");
        assert!(r
            .pctx
            .traces
            .contains(&TraceEvent::AttestFailed { session: s, reason: "not-attestable" }));
        // The verifier's watchdog resolves the hang as ⊥.
        let out = r.verifier.on_timeout(&mut r.vctx, s);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].result, Err("timeout"));
    }

    #[test]
    fn proxy_substituting_verifier_eph_fails_key_confirmation() {
        // Proxied flavor: the relay is allowed to sign ephemeral keys, so a
        // malicious relay can offer the prover a key of its own and the
        // prover cannot tell. The substitution must then surface at the
        // verifier as a key-confirmation failure — never as a usable key.
        let mut r = rig(CryptoMode::Test, Flavor::Proxied, true);
        let suite = r.suite.clone();
        let proxy_sig = r.proxy_sig.clone();
        let mut evil_rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        let (_evil_priv, evil_pub) = suite.kx_keypair(&mut evil_rng);
        let prover_id = r.prover_id;
        let mut prover_eph_seen: Option<KxPub> = None;
        let s = r.begin(mr("app"));
        r.pump(&mut |_, dst, msg| {
            if let AttestMsg::Msg1 { prover_eph, .. } = msg {
                prover_eph_seen = Some(prover_eph.clone());
            }
            if dst == prover_id {
                if let AttestMsg::Msg2 { session, verifier_eph, sig } = msg {
                    *verifier_eph = evil_pub.clone();
                    let body =
                        msg2_body(*session, verifier_eph, prover_eph_seen.as_ref().unwrap());
                    *sig = Some(suite.sign(&proxy_sig, &body));
                }
            }
            true
        });
        assert_eq!(r.outcome_of(r.verifier_id).result, Err("key-confirm-failed"));
        assert_eq!(r.outcome_of(r.prover_id).result, Err("rejected-by-verifier"));
        assert!(r
            .vctx
            .traces
            .contains(&TraceEvent::AttestFailed { session: s, reason: "key-confirm-failed" }));
    }

    #[test]
    fn proxy_substituting_prover_eph_fails_binding() {
        // The mirror-image substitution: the quote's report data binds the
        // prover's true ephemeral key, so a swapped msg1 cannot pass the
        // binding check at the verifier.
        let mut r = rig(CryptoMode::Test, Flavor::Proxied, true);
        let suite = r.suite.clone();
        let mut evil_rng = rand_chacha::ChaCha12Rng::seed_from_u64(98);
        let (_evil_priv, evil_pub) = suite.kx_keypair(&mut evil_rng);
        let verifier_id = r.verifier_id;
        r.begin(mr("app"));
        r.pump(&mut |_, dst, msg| {
            if dst == verifier_id {
                if let AttestMsg::Msg1 { prover_eph, .. } = msg {
                    *prover_eph = evil_pub.clone();
                }
            }
            true
        });
        assert_eq!(r.outcome_of(r.verifier_id).result, Err("report-data-mismatch"));
    }

    #[test]
    fn unregistered_proxy_refused() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, false);
        let s = r.run(mr("app"));
        assert_eq!(r.outcome_of(r.verifier_id).result, Err("ias-rejected"));
        assert!(r
            .ictx
            .traces
            .contains(&TraceEvent::AttestFailed { session: s, reason: "unregistered-proxy" }));
    }

    #[test]
    fn statement_replay_rejected() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        r.run(mr("app"));
        keys_match(&r);
        let replayed: IasStatement = r
            .proxy_out
            .iter()
            .find_map(|b| match AttestMsg::decode(b) {
                Ok(AttestMsg::Statement { statement: Some(st), .. }) => Some(st),
                _ => None,
            })
            .expect("first session produced a statement");
        r.outcomes.clear();
        // Second session toward the same verifier: splice in the old
        // statement. Its signature still verifies; the stale nonce is what
        // gives it away.
        r.begin(mr("app"));
        r.pump(&mut |_, _, msg| {
            if let AttestMsg::Statement { statement, .. } = msg {
                *statement = Some(replayed.clone());
            }
            true
        });
        assert_eq!(r.outcome_of(r.verifier_id).result, Err("statement-replay"));
    }

    #[test]
    fn untrusted_eph_signature_stops_quote() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        let prover_id = r.prover_id;
        let s = r.begin(mr("app"));
        r.pump(&mut |_, dst, msg| {
            if dst == prover_id {
                if let AttestMsg::Msg2 { sig: Some(sig), .. } = msg {
                    sig.0[0] ^= 0x01;
                }
            }
            true
        });
        assert_eq!(r.outcome_of(r.prover_id).result, Err("untrusted-eph-sig"));
        assert!(
            !r.steps(r.prover_id).contains(&"msg3-sent"),
            "no quote may be revealed under an unverified key"
        );
        let out = r.verifier.on_timeout(&mut r.vctx, s);
        assert_eq!(out[0].result, Err("timeout"));
    }

    #[test]
    fn messages_from_off_channel_sources_dropped() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        let s = r.begin(mr("app"));
        // A non-proxy sender cannot inject handshake traffic.
        let out = r.verifier.on_message(
            &mut r.vctx,
            NodeId::Client(9),
            AttestMsg::Statement { session: s, statement: None, confirm: [0; 32] },
        );
        assert!(out.is_empty());
        assert!(r.verifier.verifier.contains_key(&s), "session unharmed");
    }

    #[test]
    fn duplicate_deliveries_are_idempotent() {
        let mut r = rig(CryptoMode::Test, Flavor::Known, true);
        let mut saved: Vec<AttestMsg> = Vec::new();
        r.begin(mr("app"));
        r.pump(&mut |_, _, msg| {
            saved.push(msg.clone());
            true
        });
        keys_match(&r);
        let n = r.outcomes.len();
        // Replaying the whole transcript at both endpoints changes nothing:
        // sessions are gone and re-creation is keyed off fresh state.
        for msg in saved {
            r.verifier.on_message(&mut r.vctx, NodeId::Proxy, msg.clone());
            if !matches!(msg, AttestMsg::Msg0 { .. }) {
                r.prover.on_message(&mut r.pctx, NodeId::Proxy, msg);
            }
        }
        assert_eq!(r.outcomes.len(), n);
    }

    #[test]
    fn session_ids_stay_distinct_across_verifiers() {
        let mut ids = BTreeSet::new();
        for node in [NodeId::Owner(0), NodeId::Owner(1), NodeId::Eml(0), NodeId::Eml(1), NodeId::Eml(2)] {
            for nr in 1..=3u64 {
                assert!(ids.insert(nr * 256 + session_tag(node)));
            }
        }
    }

    #[test]
    fn codec_roundtrip() {
        let st = IasStatement {
            mrenclave: mr("x"),
            report_data: [9; 32],
            nonce: 77,
            sig: Signature(vec![1, 2, 3]),
        };
        let msgs = [
            AttestMsg::Msg0 { session: 1, verifier: NodeId::Eml(1), prover: NodeId::Enclave(2) },
            AttestMsg::Msg1 { session: 2, prover_eph: KxPub(vec![4; 36]) },
            AttestMsg::Msg2 { session: 3, verifier_eph: KxPub(vec![5; 36]), sig: None },
            AttestMsg::Msg2 {
                session: 3,
                verifier_eph: KxPub(vec![5; 36]),
                sig: Some(Signature(vec![6; 32])),
            },
            AttestMsg::Msg3 { session: 4, wrapped_quote: vec![7; 40], confirm: [8; 32] },
            AttestMsg::IasSubmit { session: 5, wrapped_quote: vec![9; 40] },
            AttestMsg::IasReply { session: 6, statement: Some(st.clone()) },
            AttestMsg::IasReply { session: 6, statement: None },
            AttestMsg::Statement { session: 7, statement: Some(st), confirm: [1; 32] },
            AttestMsg::Msg4 { session: 8, accept: true, confirm: [2; 32] },
        ];
        for msg in msgs {
            let env = Envelope::Attest(msg);
            let bytes = env.encode();
            assert_eq!(Envelope::decode(&bytes).unwrap(), env);
        }
    }
}
