//! Wire messages of the replication protocol.
//!
//! Every replica-to-replica message carries a [`UniqueIdentifier`] minted by
//! the sender's USIG over the message's *body* — the canonical bytes
//! returned by each type's `body()`, which exclude the UI itself. Keeping
//! every UI-bearing message in one per-sender counter sequence is what makes
//! the O-logs exchanged during view changes verifiably complete: a gap in
//! the counters is proof of omission.
//!
//! REPLY is the one replica message without a UI — replies go to clients,
//! which judge them by counting matching results from distinct senders, so
//! replies stay outside the counter sequence (and outside O-logs).

use crate::bft::kv::{KvOp, KvResult};
use crate::crypto::{hmac_sha256, sha256, SymKey};
use crate::ids::NodeId;
use crate::usig::UniqueIdentifier;
use crate::wire::{WireDecode, WireEncode, WireError, WireReader, WireWriter};

pub const TAG_REQUEST: u8 = 1;
pub const TAG_PREPARE: u8 = 2;
pub const TAG_COMMIT: u8 = 3;
pub const TAG_REPLY: u8 = 4;
pub const TAG_REQ_VIEW_CHANGE: u8 = 5;
pub const TAG_VIEW_CHANGE: u8 = 6;
pub const TAG_NEW_VIEW: u8 = 7;
pub const TAG_CHECKPOINT: u8 = 8;
pub const TAG_NEW_VIEW_ACK: u8 = 9;

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClientRequest {
    pub client: NodeId,
    pub seq: u64,
    pub op: KvOp,
    /// HMAC under the client's pre-shared key, over the signed bytes.
    pub auth: [u8; 32],
}

impl ClientRequest {
    fn signed_bytes(client: NodeId, seq: u64, op: &KvOp) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_u8(0xC1);
        w.put_node(client);
        w.put_u64(seq);
        op.encode_into(&mut w);
        w.finish()
    }

    pub fn new_signed(client: NodeId, seq: u64, op: KvOp, key: &SymKey) -> Self {
        let auth = hmac_sha256(key, &Self::signed_bytes(client, seq, &op));
        ClientRequest { client, seq, op, auth }
    }

    pub fn verify(&self, key: &SymKey) -> bool {
        hmac_sha256(key, &Self::signed_bytes(self.client, self.seq, &self.op)) == self.auth
    }

    pub fn digest(&self) -> [u8; 32] {
        sha256(&self.encode())
    }
}

impl WireEncode for ClientRequest {
    fn encode_into(&self, w: &mut WireWriter) {
        w.put_node(self.client);
        w.put_u64(self.seq);
        self.op.encode_into(w);
        w.put_array(&self.auth);
    }
}

impl WireDecode for ClientRequest {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(ClientRequest {
            client: r.get_node()?,
            seq: r.get_u64()?,
            op: KvOp::decode_from(r)?,
            auth: r.get_array()?,
        })
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Prepare {
    pub view: u64,
    pub primary: NodeId,
    pub request: ClientRequest,
    pub ui: UniqueIdentifier,
}

impl Prepare {
    pub fn body(view: u64, primary: NodeId, request: &ClientRequest) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_u8(TAG_PREPARE);
        w.put_u64(view);
        w.put_node(primary);
        request.encode_into(&mut w);
        w.finish()
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Commit {
    pub view: u64,
    pub replica: NodeId,
    /// The full request being acknowledged. Carrying the content (not just a
    /// digest) means any commit found in a view-change O-log reconstructs
    /// the prepare it certifies, so no committed request can become
    /// unrecoverable.
    pub request: ClientRequest,
    /// The prepare's UI this commit acknowledges.
    pub ui_p: UniqueIdentifier,
    pub ui: UniqueIdentifier,
}

impl Commit {
    pub fn body(view: u64, replica: NodeId, request: &ClientRequest, ui_p: &UniqueIdentifier) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_u8(TAG_COMMIT);
        w.put_u64(view);
        w.put_node(replica);
        w.put_array(&request.digest());
        ui_p.encode_into(&mut w);
        w.finish()
    }

    /// The prepare this commit certifies, reconstructed.
    pub fn implied_prepare(&self) -> Prepare {
        Prepare {
            view: self.view,
            primary: self.ui_p.replica,
            request: self.request.clone(),
            ui: self.ui_p.clone(),
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Reply {
    pub replica: NodeId,
    pub seq: u64,
    pub result: KvResult,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ReqViewChange {
    pub replica: NodeId,
    pub from_view: u64,
    pub to_view: u64,
    pub ui: UniqueIdentifier,
}

impl ReqViewChange {
    pub fn body(replica: NodeId, from_view: u64, to_view: u64) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_u8(TAG_REQ_VIEW_CHANGE);
        w.put_node(replica);
        w.put_u64(from_view);
        w.put_u64(to_view);
        w.finish()
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Checkpoint {
    pub replica: NodeId,
    /// The view the snapshot was produced in. When a checkpoint becomes the
    /// base of a view-change state reconstruction, this is the fence below
    /// which stray uncertified prepares from dead views must not be
    /// replayed on top of it.
    pub view: u64,
    /// Total requests executed when the snapshot was taken.
    pub exec_count: u64,
    pub state_digest: [u8; 32],
    pub ui: UniqueIdentifier,
}

impl Checkpoint {
    pub fn body(replica: NodeId, view: u64, exec_count: u64, state_digest: &[u8; 32]) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_u8(TAG_CHECKPOINT);
        w.put_node(replica);
        w.put_u64(view);
        w.put_u64(exec_count);
        w.put_array(state_digest);
        w.finish()
    }
}

/// Proof that a snapshot is a stable checkpoint: either the genesis state
/// (nothing executed yet) or f+1 matching checkpoint messages from distinct
/// replicas.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum CheckpointCert {
    Genesis,
    Quorum(Vec<Checkpoint>),
}

impl CheckpointCert {
    /// `(exec_count, state_digest)` this certificate vouches for; `None`
    /// when the quorum is empty or internally inconsistent.
    pub fn claim(&self, genesis_digest: [u8; 32]) -> Option<(u64, [u8; 32])> {
        match self {
            CheckpointCert::Genesis => Some((0, genesis_digest)),
            CheckpointCert::Quorum(ckpts) => {
                let first = ckpts.first()?;
                let claim = (first.exec_count, first.state_digest);
                ckpts
                    .iter()
                    .all(|c| (c.exec_count, c.state_digest) == claim)
                    .then_some(claim)
            }
        }
    }

    /// The newest view any member checkpoint was produced in — the replay
    /// fence when this certificate's snapshot seeds a reconstruction.
    pub fn claim_view(&self) -> u64 {
        match self {
            CheckpointCert::Genesis => 0,
            CheckpointCert::Quorum(ckpts) => ckpts.iter().map(|c| c.view).max().unwrap_or(0),
        }
    }

    /// The USIG counter `replica`'s own checkpoint message holds within this
    /// certificate — the anchor its O-log density is measured from.
    pub fn anchor_counter(&self, replica: NodeId) -> Option<u64> {
        match self {
            CheckpointCert::Genesis => Some(0),
            CheckpointCert::Quorum(ckpts) => {
                ckpts.iter().find(|c| c.replica == replica).map(|c| c.ui.counter)
            }
        }
    }
}

/// One entry of a view-change O-log. Prepares, commits, and new-views
/// travel whole (state reconstruction replays prepares and commits, and
/// chains through embedded new-views when their checkpoints never
/// stabilized); everything else is reduced to a stub that still proves the
/// counter was spent on that exact body.
///
/// A `NewView` entry appears in two flavors distinguished by its outer
/// `ui`: the view's primary logs the NEW-VIEW it multicast (outer `ui`
/// equals the message's own), while every other adopter logs the
/// NEW-VIEW-ACK it multicast on adoption (outer `ui` is the ack's). Either
/// way the entry proves, inside a counter-dense log, which canonical state
/// the replica's subsequent messages build on.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum OLogEntry {
    Prepare(Prepare),
    Commit(Commit),
    NewView { nv: Box<NewView>, ui: UniqueIdentifier },
    Stub { tag: u8, body_digest: [u8; 32], ui: UniqueIdentifier },
}

impl OLogEntry {
    pub fn counter(&self) -> u64 {
        match self {
            OLogEntry::Prepare(p) => p.ui.counter,
            OLogEntry::Commit(c) => c.ui.counter,
            OLogEntry::NewView { ui, .. } => ui.counter,
            OLogEntry::Stub { ui, .. } => ui.counter,
        }
    }

    pub fn sender(&self) -> NodeId {
        match self {
            OLogEntry::Prepare(p) => p.ui.replica,
            OLogEntry::Commit(c) => c.ui.replica,
            OLogEntry::NewView { ui, .. } => ui.replica,
            OLogEntry::Stub { ui, .. } => ui.replica,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ViewChange {
    pub replica: NodeId,
    pub new_view: u64,
    /// Latest stable checkpoint: certificate plus the full snapshot bytes.
    pub cp_cert: CheckpointCert,
    pub snapshot: Vec<u8>,
    /// The stable checkpoint one step older; the O-log is counter-dense
    /// from this sender's checkpoint message in it. Anchoring one boundary
    /// back guarantees every commit for a request above the *latest*
    /// checkpoint state is inside O, whatever order commits and checkpoint
    /// messages were sent in (requires concurrent clients ≤ the checkpoint
    /// interval, asserted at cluster construction).
    pub anchor_cert: CheckpointCert,
    pub o_log: Vec<OLogEntry>,
    pub ui: UniqueIdentifier,
}

impl ViewChange {
    pub fn body(
        replica: NodeId,
        new_view: u64,
        cp_cert: &CheckpointCert,
        snapshot: &[u8],
        anchor_cert: &CheckpointCert,
        o_log: &[OLogEntry],
    ) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_u8(TAG_VIEW_CHANGE);
        w.put_node(replica);
        w.put_u64(new_view);
        cp_cert.encode_into(&mut w);
        w.put_bytes(snapshot);
        anchor_cert.encode_into(&mut w);
        encode_o_log(o_log, &mut w);
        w.finish()
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NewView {
    pub primary: NodeId,
    pub new_view: u64,
    /// f+1 valid VIEW-CHANGE messages; receivers recompute the new state
    /// from exactly this set and check it against `state_digest`.
    pub vcs: Vec<ViewChange>,
    pub state_digest: [u8; 32],
    pub ui: UniqueIdentifier,
}

impl NewView {
    pub fn body(primary: NodeId, new_view: u64, vcs: &[ViewChange], state_digest: &[u8; 32]) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_u8(TAG_NEW_VIEW);
        w.put_node(primary);
        w.put_u64(new_view);
        w.put_u32(vcs.len() as u32);
        for vc in vcs {
            encode_view_change(vc, &mut w);
        }
        w.put_array(state_digest);
        w.finish()
    }
}

/// Multicast by every replica (other than the issuing primary) the moment it
/// adopts a NEW-VIEW. Serves two purposes: replicas that missed the original
/// NEW-VIEW can adopt from any ack, and the ack's place in the sender's
/// counter-dense log proves — to any later state reconstruction — which
/// canonical state its subsequent commits build on.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct NewViewAck {
    pub replica: NodeId,
    pub nv: Box<NewView>,
    pub ui: UniqueIdentifier,
}

impl NewViewAck {
    pub fn body(replica: NodeId, nv: &NewView) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.put_u8(TAG_NEW_VIEW_ACK);
        w.put_node(replica);
        let mut inner = WireWriter::new();
        encode_new_view(nv, &mut inner);
        w.put_array(&sha256(&inner.finish()));
        w.finish()
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum BftMsg {
    Request(ClientRequest),
    Prepare(Prepare),
    Commit(Commit),
    Reply(Reply),
    ReqViewChange(ReqViewChange),
    ViewChange(ViewChange),
    NewView(NewView),
    NewViewAck(NewViewAck),
    Checkpoint(Checkpoint),
}

impl BftMsg {
    pub fn tag(&self) -> u8 {
        match self {
            BftMsg::Request(_) => TAG_REQUEST,
            BftMsg::Prepare(_) => TAG_PREPARE,
            BftMsg::Commit(_) => TAG_COMMIT,
            BftMsg::Reply(_) => TAG_REPLY,
            BftMsg::ReqViewChange(_) => TAG_REQ_VIEW_CHANGE,
            BftMsg::ViewChange(_) => TAG_VIEW_CHANGE,
            BftMsg::NewView(_) => TAG_NEW_VIEW,
            BftMsg::NewViewAck(_) => TAG_NEW_VIEW_ACK,
            BftMsg::Checkpoint(_) => TAG_CHECKPOINT,
        }
    }

    /// The UI on this message, for messages that carry one.
    pub fn ui(&self) -> Option<&UniqueIdentifier> {
        match self {
            BftMsg::Prepare(m) => Some(&m.ui),
            BftMsg::Commit(m) => Some(&m.ui),
            BftMsg::ReqViewChange(m) => Some(&m.ui),
            BftMsg::ViewChange(m) => Some(&m.ui),
            BftMsg::NewView(m) => Some(&m.ui),
            BftMsg::NewViewAck(m) => Some(&m.ui),
            BftMsg::Checkpoint(m) => Some(&m.ui),
            BftMsg::Request(_) | BftMsg::Reply(_) => None,
        }
    }

    /// Canonical certified bytes (the UI's message), for UI-bearing kinds.
    pub fn ui_body(&self) -> Option<Vec<u8>> {
        match self {
            BftMsg::Prepare(m) => Some(Prepare::body(m.view, m.primary, &m.request)),
            BftMsg::Commit(m) => Some(Commit::body(m.view, m.replica, &m.request, &m.ui_p)),
            BftMsg::ReqViewChange(m) => Some(ReqViewChange::body(m.replica, m.from_view, m.to_view)),
            BftMsg::ViewChange(m) => Some(ViewChange::body(
                m.replica,
                m.new_view,
                &m.cp_cert,
                &m.snapshot,
                &m.anchor_cert,
                &m.o_log,
            )),
            BftMsg::NewView(m) => Some(NewView::body(m.primary, m.new_view, &m.vcs, &m.state_digest)),
            BftMsg::NewViewAck(m) => Some(NewViewAck::body(m.replica, &m.nv)),
            BftMsg::Checkpoint(m) => {
                Some(Checkpoint::body(m.replica, m.view, m.exec_count, &m.state_digest))
            }
            BftMsg::Request(_) | BftMsg::Reply(_) => None,
        }
    }
}

// --- encoding ---------------------------------------------------------------

impl WireEncode for CheckpointCert {
    fn encode_into(&self, w: &mut WireWriter) {
        match self {
            CheckpointCert::Genesis => w.put_u8(0),
            CheckpointCert::Quorum(ckpts) => {
                w.put_u8(1);
                w.put_u32(ckpts.len() as u32);
                for c in ckpts {
                    encode_checkpoint(c, w);
                }
            }
        }
    }
}

impl WireDecode for CheckpointCert {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        match r.get_u8()? {
            0 => Ok(CheckpointCert::Genesis),
            1 => {
                let n = r.get_u32()? as usize;
                let mut ckpts = Vec::with_capacity(n.min(r.remaining()));
                for _ in 0..n {
                    ckpts.push(decode_checkpoint(r)?);
                }
                Ok(CheckpointCert::Quorum(ckpts))
            }
            t => Err(WireError::BadTag(t)),
        }
    }
}

fn encode_checkpoint(c: &Checkpoint, w: &mut WireWriter) {
    w.put_node(c.replica);
    w.put_u64(c.view);
    w.put_u64(c.exec_count);
    w.put_array(&c.state_digest);
    c.ui.encode_into(w);
}

fn decode_checkpoint(r: &mut WireReader<'_>) -> Result<Checkpoint, WireError> {
    Ok(Checkpoint {
        replica: r.get_node()?,
        view: r.get_u64()?,
        exec_count: r.get_u64()?,
        state_digest: r.get_array()?,
        ui: UniqueIdentifier::decode_from(r)?,
    })
}

fn encode_prepare(p: &Prepare, w: &mut WireWriter) {
    w.put_u64(p.view);
    w.put_node(p.primary);
    p.request.encode_into(w);
    p.ui.encode_into(w);
}

fn decode_prepare(r: &mut WireReader<'_>) -> Result<Prepare, WireError> {
    Ok(Prepare {
        view: r.get_u64()?,
        primary: r.get_node()?,
        request: ClientRequest::decode_from(r)?,
        ui: UniqueIdentifier::decode_from(r)?,
    })
}

fn encode_commit(c: &Commit, w: &mut WireWriter) {
    w.put_u64(c.view);
    w.put_node(c.replica);
    c.request.encode_into(w);
    c.ui_p.encode_into(w);
    c.ui.encode_into(w);
}

fn decode_commit(r: &mut WireReader<'_>) -> Result<Commit, WireError> {
    Ok(Commit {
        view: r.get_u64()?,
        replica: r.get_node()?,
        request: ClientRequest::decode_from(r)?,
        ui_p: UniqueIdentifier::decode_from(r)?,
        ui: UniqueIdentifier::decode_from(r)?,
    })
}

fn encode_o_log(o: &[OLogEntry], w: &mut WireWriter) {
    w.put_u32(o.len() as u32);
    for entry in o {
        match entry {
            OLogEntry::Prepare(p) => {
                w.put_u8(1);
                encode_prepare(p, w);
            }
            OLogEntry::Commit(c) => {
                w.put_u8(2);
                encode_commit(c, w);
            }
            OLogEntry::Stub { tag, body_digest, ui } => {
                w.put_u8(3);
                w.put_u8(*tag);
                w.put_array(body_digest);
                ui.encode_into(w);
            }
            OLogEntry::NewView { nv, ui } => {
                w.put_u8(4);
                encode_new_view(nv, w);
                ui.encode_into(w);
            }
        }
    }
}

fn decode_o_log(r: &mut WireReader<'_>) -> Result<Vec<OLogEntry>, WireError> {
    let n = r.get_u32()? as usize;
    let mut out = Vec::with_capacity(n.min(r.remaining()));
    for _ in 0..n {
        out.push(match r.get_u8()? {
            1 => OLogEntry::Prepare(decode_prepare(r)?),
            2 => OLogEntry::Commit(decode_commit(r)?),
            3 => OLogEntry::Stub {
                tag: r.get_u8()?,
                body_digest: r.get_array()?,
                ui: UniqueIdentifier::decode_from(r)?,
            },
            4 => OLogEntry::NewView {
                nv: Box::new(decode_new_view(r)?),
                ui: UniqueIdentifier::decode_from(r)?,
            },
            t => return Err(WireError::BadTag(t)),
        });
    }
    Ok(out)
}

fn encode_view_change(vc: &ViewChange, w: &mut WireWriter) {
    w.put_node(vc.replica);
    w.put_u64(vc.new_view);
    vc.cp_cert.encode_into(w);
    w.put_bytes(&vc.snapshot);
    vc.anchor_cert.encode_into(w);
    encode_o_log(&vc.o_log, w);
    vc.ui.encode_into(w);
}

fn decode_view_change(r: &mut WireReader<'_>) -> Result<ViewChange, WireError> {
    Ok(ViewChange {
        replica: r.get_node()?,
        new_view: r.get_u64()?,
        cp_cert: CheckpointCert::decode_from(r)?,
        snapshot: r.get_bytes()?,
        anchor_cert: CheckpointCert::decode_from(r)?,
        o_log: decode_o_log(r)?,
        ui: UniqueIdentifier::decode_from(r)?,
    })
}

fn encode_new_view(nv: &NewView, w: &mut WireWriter) {
    w.put_node(nv.primary);
    w.put_u64(nv.new_view);
    w.put_u32(nv.vcs.len() as u32);
    for vc in &nv.vcs {
        encode_view_change(vc, w);
    }
    w.put_array(&nv.state_digest);
    nv.ui.encode_into(w);
}

fn decode_new_view(r: &mut WireReader<'_>) -> Result<NewView, WireError> {
    let primary = r.get_node()?;
    let new_view = r.get_u64()?;
    let n = r.get_u32()? as usize;
    let mut vcs = Vec::with_capacity(n.min(r.remaining()));
    for _ in 0..n {
        vcs.push(decode_view_change(r)?);
    }
    Ok(NewView { primary, new_view, vcs, state_digest: r.get_array()?, ui: UniqueIdentifier::decode_from(r)? })
}

impl WireEncode for BftMsg {
    fn encode_into(&self, w: &mut WireWriter) {
        w.put_u8(self.tag());
        match self {
            BftMsg::Request(m) => m.encode_into(w),
            BftMsg::Prepare(m) => encode_prepare(m, w),
            BftMsg::Commit(m) => encode_commit(m, w),
            BftMsg::Reply(m) => {
                w.put_node(m.replica);
                w.put_u64(m.seq);
                m.result.encode_into(w);
            }
            BftMsg::ReqViewChange(m) => {
                w.put_node(m.replica);
                w.put_u64(m.from_view);
                w.put_u64(m.to_view);
                m.ui.encode_into(w);
            }
            BftMsg::ViewChange(m) => encode_view_change(m, w),
            BftMsg::NewView(m) => encode_new_view(m, w),
            BftMsg::NewViewAck(m) => {
                w.put_node(m.replica);
                encode_new_view(&m.nv, w);
                m.ui.encode_into(w);
            }
            BftMsg::Checkpoint(m) => encode_checkpoint(m, w),
        }
    }
}

impl WireDecode for BftMsg {
    fn decode_from(r: &mut WireReader<'_>) -> Result<Self, WireError> {
        Ok(match r.get_u8()? {
            TAG_REQUEST => BftMsg::Request(ClientRequest::decode_from(r)?),
            TAG_PREPARE => BftMsg::Prepare(decode_prepare(r)?),
            TAG_COMMIT => BftMsg::Commit(decode_commit(r)?),
            TAG_REPLY => BftMsg::Reply(Reply {
                replica: r.get_node()?,
                seq: r.get_u64()?,
                result: KvResult::decode_from(r)?,
            }),
            TAG_REQ_VIEW_CHANGE => BftMsg::ReqViewChange(ReqViewChange {
                replica: r.get_node()?,
                from_view: r.get_u64()?,
                to_view: r.get_u64()?,
                ui: UniqueIdentifier::decode_from(r)?,
            }),
            TAG_VIEW_CHANGE => BftMsg::ViewChange(decode_view_change(r)?),
            TAG_NEW_VIEW => BftMsg::NewView(decode_new_view(r)?),
            TAG_NEW_VIEW_ACK => BftMsg::NewViewAck(NewViewAck {
                replica: r.get_node()?,
                nv: Box::new(decode_new_view(r)?),
                ui: UniqueIdentifier::decode_from(r)?,
            }),
            TAG_CHECKPOINT => BftMsg::Checkpoint(decode_checkpoint(r)?),
            t => return Err(WireError::BadTag(t)),
        })
    }
}
