//! API-key authentication for the client gateway and bearer tokens for the
//! internal callbacks.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use hmac::{KeyInit, Mac};
use rand::RngCore;
use thiserror::Error;

use crate::clock::Timestamp;
use crate::model::{EndpointJobId, KeyDigest, TenantId};
use crate::store::{StateStore, StoreError, StoreExt};
use crate::telemetry::ControlPlaneMetrics;

type HmacSha256 = hmac::Hmac<sha2::Sha256>;

pub const DEFAULT_AUTH_CACHE_TTL: Duration = Duration::from_secs(60);

fn mac(secret: &[u8]) -> HmacSha256 {
    HmacSha256::new_from_slice(secret).expect("HMAC accepts keys of any length")
}

/// Keyed one-way digest of API keys. The store only ever sees the digest.
#[derive(Clone)]
pub struct KeyDigester {
    secret: Arc<[u8]>,
}

impl KeyDigester {
    pub fn new(secret: impl AsRef<[u8]>) -> Self {
        Self {
            secret: secret.as_ref().into(),
        }
    }

    pub fn digest(&self, api_key: &str) -> KeyDigest {
        let mut m = mac(&self.secret);
        m.update(b"api-key\0");
        m.update(api_key.as_bytes());
        KeyDigest(m.finalize().into_bytes().into())
    }
}

/// Random secret with a recognizable prefix, e.g. for new API keys.
pub fn generate_secret(prefix: &str, rng: &mut impl RngCore) -> String {
    let mut bytes = [0u8; 24];
    rng.fill_bytes(&mut bytes);
    format!("{prefix}{}", hex::encode(bytes))
}

/// Issues and checks the per-submission token a job presents when it
/// registers. Tokens are derived from the endpoint job id, so nothing extra
/// needs to be stored.
#[derive(Clone)]
pub struct CallbackTokens {
    secret: Arc<[u8]>,
}

impl CallbackTokens {
    pub fn new(secret: impl AsRef<[u8]>) -> Self {
        Self {
            secret: secret.as_ref().into(),
        }
    }

    fn mac_for(&self, job: EndpointJobId) -> HmacSha256 {
        let mut m = mac(&self.secret);
        m.update(b"callback\0");
        m.update(job.0.to_string().as_bytes());
        m
    }

    pub fn token_for(&self, job: EndpointJobId) -> String {
        hex::encode(self.mac_for(job).finalize().into_bytes())
    }

    pub fn verify(&self, job: EndpointJobId, presented: &str) -> bool {
        let Ok(bytes) = hex::decode(presented) else {
            return false;
        };
        self.mac_for(job).verify_slice(&bytes).is_ok()
    }
}

/// Extracts the token from an `Authorization: Bearer <token>` header value.
pub fn bearer_token(header: Option<&str>) -> Option<&str> {
    let value = header?.trim();
    let (scheme, token) = value.split_once(' ')?;
    if !scheme.eq_ignore_ascii_case("bearer") {
        return None;
    }
    let token = token.trim();
    (!token.is_empty()).then_some(token)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthCacheEntry {
    pub key_digest: KeyDigest,
    pub tenant_id: TenantId,
    pub expires_at: Timestamp,
}

/// Recently authenticated keys. A shared implementation (e.g. backed by a
/// network cache) can stand in for [`LocalAuthCache`] when the gateway is
/// replicated.
pub trait AuthCache: Send + Sync {
    fn get(&self, digest: &KeyDigest, now: Timestamp) -> Option<TenantId>;
    fn insert(&self, entry: AuthCacheEntry);
    fn invalidate(&self, digest: &KeyDigest);
}

#[derive(Default)]
pub struct LocalAuthCache {
    entries: Mutex<HashMap<KeyDigest, AuthCacheEntry>>,
}

impl AuthCache for LocalAuthCache {
    fn get(&self, digest: &KeyDigest, now: Timestamp) -> Option<TenantId> {
        let mut entries = self.entries.lock().unwrap_or_else(|p| p.into_inner());
        match entries.get(digest) {
            Some(e) if now < e.expires_at => Some(e.tenant_id),
            Some(_) => {
                entries.remove(digest);
                None
            }
            None => None,
        }
    }

    fn insert(&self, entry: AuthCacheEntry) {
        self.entries
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(entry.key_digest, entry);
    }

    fn invalidate(&self, digest: &KeyDigest) {
        self.entries
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .remove(digest);
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("missing bearer credentials")]
    MissingCredentials,
    #[error("unknown or revoked API key")]
    Unauthorized,
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub struct Authenticator {
    store: Arc<dyn StateStore>,
    digester: KeyDigester,
    cache: Arc<dyn AuthCache>,
    ttl: Duration,
    metrics: Arc<ControlPlaneMetrics>,
}

impl Authenticator {
    pub fn new(
        store: Arc<dyn StateStore>,
        digester: KeyDigester,
        cache: Arc<dyn AuthCache>,
        ttl: Duration,
        metrics: Arc<ControlPlaneMetrics>,
    ) -> Self {
        Self {
            store,
            digester,
            cache,
            ttl,
            metrics,
        }
    }

    /// Authenticates the value of an `Authorization` header. Cache hits do
    /// not touch the store.
    pub fn authenticate(&self, authorization: Option<&str>, now: Timestamp) -> Result<TenantId, AuthError> {
        let key = bearer_token(authorization).ok_or(AuthError::MissingCredentials)?;
        let digest = self.digester.digest(key);
        if let Some(tenant) = self.cache.get(&digest, now) {
            self.metrics.auth_cache_hits.inc();
            return Ok(tenant);
        }
        self.metrics.auth_cache_misses.inc();
        let tenant = self.store.transact(|tx| {
            Ok::<_, StoreError>(
                tx.authentication_by_digest(&digest)
                    .filter(|a| !a.is_revoked())
                    .map(|a| a.tenant_id),
            )
        })?;
        let tenant = tenant.ok_or(AuthError::Unauthorized)?;
        self.cache.insert(AuthCacheEntry {
            key_digest: digest,
            tenant_id: tenant,
            expires_at: now + self.ttl,
        });
        Ok(tenant)
    }
}
