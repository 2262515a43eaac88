//! Complaints against rendezvous servers.
//!
//! A peer that keeps hearing from friends that the information served for
//! it is wrong files a signed, timestamped complaint against the server.
//! Only peers registered with that server may complain, each only once. A
//! server is isolated once it has collected `r_threshold` distinct accepted
//! complaints.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Ring;
use crate::ca::CertificateDirectory;
use crate::crypto::{sign_digest, verify_digest, Envelope, PrivateKey, Signature};
use crate::ring_id::RingId;
use crate::Millis;

pub const DEFAULT_NOTIFICATION_THRESHOLD: usize = 2;

/// A friend's signed report that a server handed out bad information for
/// `subject`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub reporter: String,
    pub subject: String,
    pub server: RingId,
    pub observed_at: Millis,
    pub signature: Signature,
}

impl Notification {
    fn fields(reporter: &str, subject: &str, server: &RingId, at: Millis) -> Vec<Vec<u8>> {
        vec![
            b"myzone-notification".to_vec(),
            reporter.as_bytes().to_vec(),
            subject.as_bytes().to_vec(),
            server.0.to_vec(),
            at.to_be_bytes().to_vec(),
        ]
    }

    pub fn signed(env: &dyn Envelope, key: &PrivateKey, reporter: &str, subject: &str, server: RingId, at: Millis) -> Self {
        let signature = sign_digest(env, key, &Self::fields(reporter, subject, &server, at));
        Notification {
            reporter: reporter.into(),
            subject: subject.into(),
            server,
            observed_at: at,
            signature,
        }
    }

    pub fn verify(&self, env: &dyn Envelope, certs: &dyn CertificateDirectory) -> bool {
        certs.certificate(&self.reporter).is_some_and(|c| {
            verify_digest(
                env,
                &c.public_key,
                &Self::fields(&self.reporter, &self.subject, &self.server, self.observed_at),
                &self.signature,
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complaint {
    pub complainant: String,
    pub accused: RingId,
    pub timestamp: Millis,
    pub evidence: Vec<Notification>,
    pub signature: Signature,
}

impl Complaint {
    fn fields(complainant: &str, accused: &RingId, ts: Millis, evidence: &[Notification]) -> Vec<Vec<u8>> {
        let mut f = vec![
            b"myzone-complaint".to_vec(),
            complainant.as_bytes().to_vec(),
            accused.0.to_vec(),
            ts.to_be_bytes().to_vec(),
        ];
        f.extend(evidence.iter().map(|n| n.signature.0.clone()));
        f
    }

    pub fn signed(
        env: &dyn Envelope,
        key: &PrivateKey,
        complainant: &str,
        accused: RingId,
        timestamp: Millis,
        evidence: Vec<Notification>,
    ) -> Self {
        let signature = sign_digest(env, key, &Self::fields(complainant, &accused, timestamp, &evidence));
        Complaint {
            complainant: complainant.into(),
            accused,
            timestamp,
            evidence,
            signature,
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ComplaintError {
    #[error("complainant is not registered with the accused server")]
    NotRegisteredWithServer,
    #[error("complainant already complained about this server")]
    DuplicateComplaint,
    #[error("complaint or evidence signature does not verify")]
    BadSignature,
    #[error("complaint timestamp is outside the freshness window")]
    StaleTimestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Retained,
    Isolated,
}

/// One line of the exported complaint log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub at: Millis,
    pub complainant: String,
    pub accused: String,
    pub outcome: Result<(), ComplaintError>,
    /// Nodes the accepted complaint was spread to.
    pub gossiped_to: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplaintBoard {
    pub r_threshold: usize,
    pub freshness_ms: Millis,
    accepted: BTreeMap<RingId, BTreeSet<String>>,
    log: Vec<LogEntry>,
}

impl ComplaintBoard {
    pub fn new(r_threshold: usize, freshness_ms: Millis) -> Self {
        ComplaintBoard {
            r_threshold: r_threshold.max(1),
            freshness_ms,
            accepted: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn file_complaint(
        &mut self,
        ring: &Ring,
        env: &dyn Envelope,
        certs: &dyn CertificateDirectory,
        complaint: &Complaint,
        now: Millis,
    ) -> Result<(), ComplaintError> {
        let outcome = self.check(ring, env, certs, complaint, now);
        let mut gossiped_to = Vec::new();
        if outcome.is_ok() {
            self.accepted
                .entry(complaint.accused)
                .or_default()
                .insert(complaint.complainant.clone());
            gossiped_to = ring.holders_of(&complaint.accused).iter().map(RingId::to_hex).collect();
        }
        self.log.push(LogEntry {
            at: now,
            complainant: complaint.complainant.clone(),
            accused: complaint.accused.to_hex(),
            outcome,
            gossiped_to,
        });
        outcome
    }

    fn check(
        &self,
        ring: &Ring,
        env: &dyn Envelope,
        certs: &dyn CertificateDirectory,
        c: &Complaint,
        now: Millis,
    ) -> Result<(), ComplaintError> {
        let cert = certs.certificate(&c.complainant).ok_or(ComplaintError::BadSignature)?;
        let fields = Complaint::fields(&c.complainant, &c.accused, c.timestamp, &c.evidence);
        if !verify_digest(env, &cert.public_key, &fields, &c.signature) {
            return Err(ComplaintError::BadSignature);
        }
        if c.evidence.iter().any(|n| !n.verify(env, certs) || n.server != c.accused) {
            return Err(ComplaintError::BadSignature);
        }
        if c.timestamp > now || now - c.timestamp > self.freshness_ms {
            return Err(ComplaintError::StaleTimestamp);
        }
        if !ring.registered_with(&c.accused, &c.complainant) {
            return Err(ComplaintError::NotRegisteredWithServer);
        }
        if self
            .accepted
            .get(&c.accused)
            .is_some_and(|s| s.contains(&c.complainant))
        {
            return Err(ComplaintError::DuplicateComplaint);
        }
        Ok(())
    }

    pub fn distinct_complaints(&self, server: &RingId) -> usize {
        self.accepted.get(server).map_or(0, BTreeSet::len)
    }

    /// Isolates `server` iff it has at least `r_threshold` distinct accepted
    /// complaints.
    pub fn ring_judge(&self, ring: &mut Ring, server: &RingId) -> Verdict {
        if self.distinct_complaints(server) >= self.r_threshold {
            if !ring.isolated.contains(server) {
                ring.isolate(server);
            }
            Verdict::Isolated
        } else {
            Verdict::Retained
        }
    }

    /// Judges every accused server.
    pub fn judge_all(&self, ring: &mut Ring) -> Vec<(RingId, Verdict)> {
        let accused: Vec<RingId> = self.accepted.keys().copied().collect();
        accused.into_iter().map(|s| (s, self.ring_judge(ring, &s))).collect()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// The log as one JSON object per line.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Peer-side tally of friend notifications per server.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationTally {
    pub threshold: usize,
    pending: BTreeMap<RingId, Vec<Notification>>,
    filed: BTreeSet<RingId>,
}

impl NotificationTally {
    pub fn new(threshold: usize) -> Self {
        NotificationTally {
            threshold: threshold.max(1),
            ..Default::default()
        }
    }

    /// Records a notification. Returns the evidence once enough distinct
    /// friends have reported the same server and no complaint was filed yet.
    pub fn record(&mut self, n: Notification) -> Option<Vec<Notification>> {
        if self.filed.contains(&n.server) {
            return None;
        }
        let list = self.pending.entry(n.server).or_default();
        if !list.iter().any(|m| m.reporter == n.reporter) {
            list.push(n.clone());
        }
        if list.len() >= self.threshold {
            self.filed.insert(n.server);
            self.pending.remove(&n.server)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ca::{obtain_certificate, CaServer};
    use crate::chord::Behavior;
    use crate::crypto::{KeyPair, SharedEnvelope, ToyScheme};
    use std::sync::Arc;

    struct Fixture {
        env: SharedEnvelope,
        ca: CaServer,
        keys: BTreeMap<String, KeyPair>,
        ring: Ring,
        server: RingId,
    }

    fn fixture(peers: &[&str]) -> Fixture {
        let env: SharedEnvelope = Arc::new(ToyScheme);
        let mut ca = CaServer::new(env.clone(), "ca", 1);
        let mut keys = BTreeMap::new();
        for (i, p) in peers.iter().chain(["f1", "f2"].iter()).enumerate() {
            let k = env.generate_keypair(100 + i as u64);
            obtain_certificate(&mut ca, &env, &k, p).unwrap();
            keys.insert(p.to_string(), k);
        }
        let addrs: Vec<(String, Behavior)> = (0..8).map(|i| (format!("c{i}"), Behavior::Correct)).collect();
        let mut ring = Ring::build(&addrs);
        let server = ring.live_ids()[3];
        for p in peers {
            ring.store_record(&server, p, "ci");
        }
        Fixture { env, ca, keys, ring, server }
    }

    fn complaint(f: &Fixture, who: &str, at: Millis) -> Complaint {
        let evidence = ["f1", "f2"]
            .iter()
            .map(|fr| Notification::signed(f.env.as_ref(), &f.keys[*fr].private_key, fr, who, f.server, at))
            .collect();
        Complaint::signed(f.env.as_ref(), &f.keys[who].private_key, who, f.server, at, evidence)
    }

    #[test]
    fn threshold_boundary() {
        let mut f = fixture(&["p1", "p2", "p3"]);
        let mut board = ComplaintBoard::new(3, 30_000);
        for p in ["p1", "p2"] {
            let c = complaint(&f, p, 1_000);
            board.file_complaint(&f.ring, f.env.as_ref(), &f.ca, &c, 2_000).unwrap();
        }
        assert_eq!(board.ring_judge(&mut f.ring, &f.server), Verdict::Retained);
        assert!(f.ring.is_live(&f.server));
        let c = complaint(&f, "p3", 1_000);
        board.file_complaint(&f.ring, f.env.as_ref(), &f.ca, &c, 2_000).unwrap();
        assert_eq!(board.ring_judge(&mut f.ring, &f.server), Verdict::Isolated);
        assert!(!f.ring.live_ids().contains(&f.server));
        assert!(f.ring.successors_correct());
    }

    #[test]
    fn duplicate_and_unregistered_rejected() {
        let f = fixture(&["p1"]);
        let mut board = ComplaintBoard::new(3, 30_000);
        board
            .file_complaint(&f.ring, f.env.as_ref(), &f.ca, &complaint(&f, "p1", 10), 20)
            .unwrap();
        assert_eq!(
            board.file_complaint(&f.ring, f.env.as_ref(), &f.ca, &complaint(&f, "p1", 15), 20),
            Err(ComplaintError::DuplicateComplaint)
        );
        // f1 has a certificate but is not registered with the server.
        assert_eq!(
            board.file_complaint(&f.ring, f.env.as_ref(), &f.ca, &complaint(&f, "f1", 15), 20),
            Err(ComplaintError::NotRegisteredWithServer)
        );
        assert_eq!(board.distinct_complaints(&f.server), 1);
    }

    #[test]
    fn forged_and_stale_rejected() {
        let f = fixture(&["p1", "p2"]);
        let mut board = ComplaintBoard::new(3, 30_000);
        let mut c = complaint(&f, "p1", 10);
        c.timestamp += 1;
        assert_eq!(
            board.file_complaint(&f.ring, f.env.as_ref(), &f.ca, &c, 20),
            Err(ComplaintError::BadSignature)
        );
        let c = complaint(&f, "p2", 10);
        assert_eq!(
            board.file_complaint(&f.ring, f.env.as_ref(), &f.ca, &c, 40_011),
            Err(ComplaintError::StaleTimestamp)
        );
        let lines: Vec<LogEntry> = board
            .log_jsonl()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].outcome, Err(ComplaintError::StaleTimestamp));
    }

    #[test]
    fn accepted_complaint_is_gossiped_to_holders() {
        let f = fixture(&["p1"]);
        let mut board = ComplaintBoard::new(3, 30_000);
        board
            .file_complaint(&f.ring, f.env.as_ref(), &f.ca, &complaint(&f, "p1", 10), 20)
            .unwrap();
        let holders = f.ring.holders_of(&f.server);
        assert!(!holders.is_empty());
        assert_eq!(board.log()[0].gossiped_to.len(), holders.len());
    }

    #[test]
    fn tally_waits_for_distinct_friends() {
        let f = fixture(&["p1"]);
        let mut tally = NotificationTally::new(DEFAULT_NOTIFICATION_THRESHOLD);
        let n1 = Notification::signed(f.env.as_ref(), &f.keys["f1"].private_key, "f1", "p1", f.server, 5);
        assert!(tally.record(n1.clone()).is_none());
        assert!(tally.record(n1).is_none());
        let n2 = Notification::signed(f.env.as_ref(), &f.keys["f2"].private_key, "f2", "p1", f.server, 6);
        assert_eq!(tally.record(n2.clone()).map(|e| e.len()), Some(2));
        assert!(tally.record(n2).is_none());
    }
}
