//! S3-compatible object store over plain HTTP with path-style URLs
//! (`<endpoint>/<bucket>/<key>`), signed with AWS Signature Version 4.

use std::io::Read;
use std::time::Duration;

use chrono::{DateTime, Utc};
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{check_key, ObjectStore, StoreError};

pub const KEY_ENV: &str = "FEDSILO_S3_KEY";
pub const SECRET_ENV: &str = "FEDSILO_S3_SECRET";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct S3Config {
    /// Base URL, e.g. `http://127.0.0.1:9000`.
    pub endpoint: String,
    pub bucket: String,
    #[serde(default = "default_region")]
    pub region: String,
}

fn default_region() -> String {
    "us-east-1".into()
}

#[derive(Clone)]
pub struct Credentials {
    pub access_key: String,
    pub secret_key: String,
}

impl std::fmt::Debug for Credentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Credentials")
            .field("access_key", &self.access_key)
            .finish_non_exhaustive()
    }
}

type HmacSha256 = Hmac<Sha256>;

fn hmac(key: &[u8], data: &[u8]) -> Vec<u8> {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().to_vec()
}

fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Percent-encodes everything but RFC 3986 unreserved characters, keeping
/// `/` when `keep_slash` is set.
pub fn uri_encode(s: &str, keep_slash: bool) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => out.push(b as char),
            b'/' if keep_slash => out.push('/'),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

/// A request to sign: method, encoded path, and headers (lowercase names)
/// that take part in the signature. `host`, `x-amz-date` and
/// `x-amz-content-sha256` must be among them.
pub struct SigningRequest<'a> {
    pub method: &'a str,
    pub canonical_uri: &'a str,
    pub canonical_query: &'a str,
    pub headers: Vec<(&'a str, String)>,
    pub payload_sha256: &'a str,
}

/// The `Authorization` header value for `req`.
pub fn sign_v4(req: &SigningRequest<'_>, creds: &Credentials, region: &str, now: DateTime<Utc>) -> String {
    let amz_date = now.format("%Y%m%dT%H%M%SZ").to_string();
    let day = now.format("%Y%m%d").to_string();
    let mut headers: Vec<(String, String)> = req
        .headers
        .iter()
        .map(|(k, v)| (k.to_ascii_lowercase(), v.trim().to_string()))
        .collect();
    headers.sort();
    let canonical_headers: String = headers.iter().map(|(k, v)| format!("{k}:{v}\n")).collect();
    let signed_headers = headers.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(";");
    let canonical_request = format!(
        "{}\n{}\n{}\n{}\n{}\n{}",
        req.method, req.canonical_uri, req.canonical_query, canonical_headers, signed_headers, req.payload_sha256
    );
    let scope = format!("{day}/{region}/s3/aws4_request");
    let string_to_sign = format!(
        "AWS4-HMAC-SHA256\n{amz_date}\n{scope}\n{}",
        sha256_hex(canonical_request.as_bytes())
    );
    let k_date = hmac(format!("AWS4{}", creds.secret_key).as_bytes(), day.as_bytes());
    let k_region = hmac(&k_date, region.as_bytes());
    let k_service = hmac(&k_region, b"s3");
    let k_signing = hmac(&k_service, b"aws4_request");
    let signature = hex::encode(hmac(&k_signing, string_to_sign.as_bytes()));
    format!(
        "AWS4-HMAC-SHA256 Credential={}/{scope}, SignedHeaders={signed_headers}, Signature={signature}",
        creds.access_key
    )
}

pub struct S3Store {
    config: S3Config,
    creds: Credentials,
    agent: ureq::Agent,
}

impl S3Store {
    pub fn new(config: S3Config, creds: Credentials) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(10))
            .timeout(Duration::from_secs(300))
            .build();
        Self { config, creds, agent }
    }

    /// Credentials from `FEDSILO_S3_KEY` / `FEDSILO_S3_SECRET`.
    pub fn from_env(config: S3Config) -> Result<Self, StoreError> {
        let get = |name: &str| {
            std::env::var(name).map_err(|_| StoreError::Unavailable(format!("environment variable {name} is not set")))
        };
        Ok(Self::new(
            config,
            Credentials {
                access_key: get(KEY_ENV)?,
                secret_key: get(SECRET_ENV)?,
            },
        ))
    }

    fn host(&self) -> Result<String, StoreError> {
        let rest = self
            .config
            .endpoint
            .strip_prefix("http://")
            .or_else(|| self.config.endpoint.strip_prefix("https://"))
            .ok_or_else(|| StoreError::Unavailable(format!("endpoint {} is not an http url", self.config.endpoint)))?;
        Ok(rest.split('/').next().unwrap_or(rest).to_string())
    }

    fn request(&self, method: &str, key: &str, body: &[u8]) -> Result<ureq::Response, StoreError> {
        check_key(key)?;
        let path = format!("/{}/{}", uri_encode(&self.config.bucket, false), uri_encode(key, true));
        let url = format!("{}{}", self.config.endpoint.trim_end_matches('/'), path);
        let payload_hash = sha256_hex(body);
        let now = Utc::now();
        let amz_date = now.format("%Y%m%dT%H%M%SZ").to_string();
        let host = self.host()?;
        let auth = sign_v4(
            &SigningRequest {
                method,
                canonical_uri: &path,
                canonical_query: "",
                headers: vec![
                    ("host", host),
                    ("x-amz-content-sha256", payload_hash.clone()),
                    ("x-amz-date", amz_date.clone()),
                ],
                payload_sha256: &payload_hash,
            },
            &self.creds,
            &self.config.region,
            now,
        );
        let req = self
            .agent
            .request(method, &url)
            .set("x-amz-content-sha256", &payload_hash)
            .set("x-amz-date", &amz_date)
            .set("authorization", &auth);
        let result = if method == "PUT" { req.send_bytes(body) } else { req.call() };
        match result {
            Ok(resp) => Ok(resp),
            Err(ureq::Error::Status(404, _)) => Err(StoreError::NotFound(key.to_string())),
            Err(ureq::Error::Status(code, resp)) => Err(StoreError::Unavailable(format!(
                "{method} {url}: HTTP {code} {}",
                resp.status_text()
            ))),
            Err(e) => Err(StoreError::Unavailable(format!("{method} {url}: {e}"))),
        }
    }
}

impl ObjectStore for S3Store {
    fn put(&self, key: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.request("PUT", key, bytes).map(|_| ())
    }

    fn get(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        let resp = self.request("GET", key, b"")?;
        let mut out = Vec::new();
        resp.into_reader()
            .read_to_end(&mut out)
            .map_err(|e| StoreError::Unavailable(e.to_string()))?;
        Ok(out)
    }

    fn exists(&self, key: &str) -> Result<bool, StoreError> {
        match self.request("HEAD", key, b"") {
            Ok(_) => Ok(true),
            Err(StoreError::NotFound(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn delete(&self, key: &str) -> Result<(), StoreError> {
        self.request("DELETE", key, b"").map(|_| ())
    }

    fn describe(&self) -> String {
        format!("s3:{}/{}", self.config.endpoint.trim_end_matches('/'), self.config.bucket)
    }
}
