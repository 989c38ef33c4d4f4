//! Per-task authorization tokens: `base64url(claims JSON) "." hex(HMAC-SHA256)`.
//!
//! The MAC covers the canonical claims encoding (fields in alphabetical
//! order, compact JSON), recomputed on verification.

use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use super::manifest::{FederationManifest, SigningSecret};
use super::FederationError;

type HmacSha256 = Hmac<Sha256>;

/// Field order is the canonical (alphabetical) order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    pub expiry: i64,
    pub group_id: String,
    pub round: u32,
    pub sender: String,
    pub task_id: String,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    #[error("bad signature")]
    BadSignature,
    #[error("token belongs to another group")]
    WrongGroup,
    #[error("sender is not a member")]
    UnknownSender,
    #[error("token was issued for another task")]
    TaskMismatch,
    #[error("token expired")]
    Expired,
}

pub fn unix_now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

fn mac(secret: &SigningSecret, canonical: &[u8]) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(secret.as_bytes()).expect("hmac accepts any key length");
    mac.update(canonical);
    mac
}

/// Encodes and signs arbitrary claims. Issuance goes through
/// [`issue_token`]; this is exposed for building deliberately bad tokens.
pub fn sign_claims(secret: &SigningSecret, claims: &Claims) -> String {
    let canonical = serde_json::to_vec(claims).expect("claims serialize");
    let signature = hex::encode(mac(secret, &canonical).finalize().into_bytes());
    format!("{}.{signature}", URL_SAFE_NO_PAD.encode(&canonical))
}

pub fn issue_token_at(
    manifest: &FederationManifest,
    sender: &str,
    task_id: &str,
    round: u32,
    ttl_secs: u64,
    now: i64,
) -> Result<String, FederationError> {
    if manifest.member(sender).is_none() {
        return Err(FederationError::NotAMember(sender.to_string()));
    }
    let claims = Claims {
        expiry: now.saturating_add(ttl_secs.min(i64::MAX as u64) as i64),
        group_id: manifest.group_id.clone(),
        round,
        sender: sender.to_string(),
        task_id: task_id.to_string(),
    };
    Ok(sign_claims(manifest.secret(), &claims))
}

pub fn issue_token(
    manifest: &FederationManifest,
    sender: &str,
    task_id: &str,
    round: u32,
    ttl_secs: u64,
) -> Result<String, FederationError> {
    issue_token_at(manifest, sender, task_id, round, ttl_secs, unix_now())
}

/// Checks signature, group, membership, task binding and expiry, in that
/// order. A token is live while `now < expiry + skew_secs`.
pub fn verify_token_at(
    manifest: &FederationManifest,
    token: &str,
    expected_task_id: &str,
    now: i64,
    skew_secs: i64,
) -> Result<Claims, RejectReason> {
    let (body, signature) = token.split_once('.').ok_or(RejectReason::BadSignature)?;
    let raw = URL_SAFE_NO_PAD.decode(body).map_err(|_| RejectReason::BadSignature)?;
    let claims: Claims = serde_json::from_slice(&raw).map_err(|_| RejectReason::BadSignature)?;
    let signature = hex::decode(signature).map_err(|_| RejectReason::BadSignature)?;
    let canonical = serde_json::to_vec(&claims).expect("claims serialize");
    mac(manifest.secret(), &canonical)
        .verify_slice(&signature)
        .map_err(|_| RejectReason::BadSignature)?;
    if claims.group_id != manifest.group_id {
        return Err(RejectReason::WrongGroup);
    }
    if manifest.member(&claims.sender).is_none() {
        return Err(RejectReason::UnknownSender);
    }
    if claims.task_id != expected_task_id {
        return Err(RejectReason::TaskMismatch);
    }
    if now >= claims.expiry.saturating_add(skew_secs) {
        return Err(RejectReason::Expired);
    }
    Ok(claims)
}

/// Strict verification against the current clock, without skew allowance.
pub fn verify_token(manifest: &FederationManifest, token: &str, expected_task_id: &str) -> Result<Claims, RejectReason> {
    verify_token_at(manifest, token, expected_task_id, unix_now(), 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::{add_member, create_federation};

    fn fed() -> FederationManifest {
        let mut m = create_federation("owner", "owner@lab.org").unwrap();
        add_member(&mut m, "site-b", "b@uni.edu").unwrap();
        m
    }

    #[test]
    fn issue_then_verify() {
        let m = fed();
        let token = issue_token(&m, "owner", "task-1", 3, 60).unwrap();
        let claims = verify_token(&m, &token, "task-1").unwrap();
        assert_eq!(claims.round, 3);
        assert_eq!(claims.sender, "owner");
        assert_eq!(verify_token(&m, &token, "task-2"), Err(RejectReason::TaskMismatch));
    }

    #[test]
    fn canonical_claims_order() {
        let m = fed();
        let token = issue_token_at(&m, "owner", "t", 0, 10, 100).unwrap();
        let body = URL_SAFE_NO_PAD.decode(token.split_once('.').unwrap().0).unwrap();
        let text = String::from_utf8(body).unwrap();
        assert_eq!(
            text,
            format!(r#"{{"expiry":110,"group_id":"{}","round":0,"sender":"owner","task_id":"t"}}"#, m.group_id)
        );
    }

    #[test]
    fn foreign_secret_is_bad_signature() {
        let a = fed();
        let b = fed();
        let token = issue_token(&a, "owner", "t", 0, 60).unwrap();
        assert_eq!(verify_token(&b, &token, "t"), Err(RejectReason::BadSignature));
    }

    #[test]
    fn issuing_requires_membership() {
        assert_eq!(
            issue_token(&fed(), "eve", "t", 0, 60),
            Err(FederationError::NotAMember("eve".into()))
        );
    }

    #[test]
    fn every_reject_reason() {
        let m = fed();
        let now = 1_000;
        let good = Claims {
            expiry: now + 60,
            group_id: m.group_id.clone(),
            round: 0,
            sender: "owner".into(),
            task_id: "t".into(),
        };
        let check = |claims: &Claims| verify_token_at(&m, &sign_claims(m.secret(), claims), "t", now, 0);
        assert!(check(&good).is_ok());
        assert_eq!(
            check(&Claims { group_id: "other".into(), ..good.clone() }),
            Err(RejectReason::WrongGroup)
        );
        assert_eq!(
            check(&Claims { sender: "eve".into(), ..good.clone() }),
            Err(RejectReason::UnknownSender)
        );
        assert_eq!(
            check(&Claims { task_id: "u".into(), ..good.clone() }),
            Err(RejectReason::TaskMismatch)
        );
        assert_eq!(check(&Claims { expiry: now, ..good.clone() }), Err(RejectReason::Expired));

        let token = sign_claims(m.secret(), &good);
        let mut tampered = token.clone().into_bytes();
        let last = tampered.len() - 1;
        tampered[last] = if tampered[last] == b'0' { b'1' } else { b'0' };
        let tampered = String::from_utf8(tampered).unwrap();
        assert_eq!(verify_token_at(&m, &tampered, "t", now, 0), Err(RejectReason::BadSignature));
        assert_eq!(verify_token_at(&m, "garbage", "t", now, 0), Err(RejectReason::BadSignature));
        assert_eq!(verify_token_at(&m, "", "t", now, 0), Err(RejectReason::BadSignature));
    }

    #[test]
    fn zero_ttl_expires() {
        let m = fed();
        let token = issue_token_at(&m, "owner", "t", 0, 0, 500).unwrap();
        assert_eq!(verify_token_at(&m, &token, "t", 501, 0), Err(RejectReason::Expired));
        assert!(verify_token_at(&m, &token, "t", 501, 30).is_ok());
        assert_eq!(verify_token_at(&m, &token, "t", 530, 30), Err(RejectReason::Expired));
    }

    #[test]
    fn zero_ttl_expires_on_the_wall_clock() {
        let m = fed();
        let token = issue_token(&m, "owner", "t", 0, 0).unwrap();
        std::thread::sleep(std::time::Duration::from_millis(1_100));
        assert_eq!(verify_token(&m, &token, "t"), Err(RejectReason::Expired));
    }
}
