//! Signed week-later survey links.

use std::sync::atomic::{AtomicI64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub const WEEK_SECS: i64 = 7 * 24 * 60 * 60;

/// Seconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> i64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> i64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs() as i64)
    }
}

#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(now: i64) -> Self {
        ManualClock(AtomicI64::new(now))
    }

    pub fn advance(&self, secs: i64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekToken {
    pub token: String,
    /// Unix seconds before which the token is refused.
    pub not_before: i64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenError {
    #[error("week-later link is invalid")]
    Invalid,
    #[error("week-later survey opens at {not_before}")]
    NotYet { not_before: i64 },
}

#[derive(Clone)]
pub struct WeekTokens {
    secret: Vec<u8>,
    delay_secs: i64,
}

impl std::fmt::Debug for WeekTokens {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WeekTokens").field("delay_secs", &self.delay_secs).finish_non_exhaustive()
    }
}

type HmacSha256 = Hmac<Sha256>;

impl WeekTokens {
    pub fn new(secret: impl Into<Vec<u8>>, delay_secs: i64) -> Self {
        WeekTokens { secret: secret.into(), delay_secs }
    }

    pub fn random(delay_secs: i64) -> Self {
        Self::new(rand::random::<[u8; 32]>().to_vec(), delay_secs)
    }

    fn mac(&self, session_id: &str, not_before: i64) -> HmacSha256 {
        let mut mac = HmacSha256::new_from_slice(&self.secret).expect("hmac accepts any key length");
        mac.update(session_id.as_bytes());
        mac.update(b":");
        mac.update(not_before.to_string().as_bytes());
        mac
    }

    pub fn issue(&self, session_id: &str, now: i64) -> WeekToken {
        let not_before = now + self.delay_secs;
        let sig = self.mac(session_id, not_before).finalize().into_bytes();
        WeekToken { token: format!("{not_before}.{}", URL_SAFE_NO_PAD.encode(sig)), not_before }
    }

    pub fn verify(&self, session_id: &str, token: &str, now: i64) -> Result<(), TokenError> {
        let (nbf, sig) = token.split_once('.').ok_or(TokenError::Invalid)?;
        let not_before: i64 = nbf.parse().map_err(|_| TokenError::Invalid)?;
        let sig = URL_SAFE_NO_PAD.decode(sig).map_err(|_| TokenError::Invalid)?;
        self.mac(session_id, not_before).verify_slice(&sig).map_err(|_| TokenError::Invalid)?;
        if now < not_before {
            return Err(TokenError::NotYet { not_before });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_lifecycle() {
        let t = WeekTokens::new(b"k".to_vec(), WEEK_SECS);
        let tok = t.issue("s1", 1_000);
        assert_eq!(tok.not_before, 1_000 + WEEK_SECS);
        assert_eq!(t.verify("s1", &tok.token, 1_000), Err(TokenError::NotYet { not_before: tok.not_before }));
        assert_eq!(t.verify("s1", &tok.token, tok.not_before), Ok(()));
        assert_eq!(t.verify("s2", &tok.token, tok.not_before), Err(TokenError::Invalid));
        let forged = format!("0.{}", tok.token.split_once('.').unwrap().1);
        assert_eq!(t.verify("s1", &forged, tok.not_before), Err(TokenError::Invalid));
        assert_eq!(WeekTokens::new(b"other".to_vec(), 0).verify("s1", &tok.token, i64::MAX), Err(TokenError::Invalid));
        assert_eq!(t.verify("s1", "garbage", 0), Err(TokenError::Invalid));
    }

    #[test]
    fn manual_clock() {
        let c = ManualClock::new(5);
        c.advance(10);
        assert_eq!(c.now(), 15);
    }
}
