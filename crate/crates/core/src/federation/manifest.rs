//! Group roster, endpoint records and the shared signing secret.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::FederationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Owner,
    Member,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub identity: String,
    pub email: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointRecord {
    pub endpoint_id: String,
    pub owner_identity: String,
    pub dataloader_name: String,
    /// Transport-specific; for TCP the server address the endpoint dials.
    #[serde(default)]
    pub address: String,
}

/// 32-byte HMAC key. Never serialized with the manifest and redacted in
/// debug output.
#[derive(Clone, PartialEq, Eq)]
pub struct SigningSecret([u8; 32]);

impl SigningSecret {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(text: &str) -> Result<Self, FederationError> {
        let bytes = hex::decode(text.trim()).map_err(|e| FederationError::BadSecret(e.to_string()))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| FederationError::BadSecret(format!("expected 32 bytes, got {}", b.len())))?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for SigningSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningSecret(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationManifest {
    pub group_id: String,
    pub members: Vec<Member>,
    #[serde(default)]
    pub endpoints: Vec<EndpointRecord>,
    #[serde(skip, default = "placeholder_secret")]
    secret: SigningSecret,
}

fn placeholder_secret() -> SigningSecret {
    SigningSecret([0; 32])
}

fn random_uuid<R: RngCore>(rng: &mut R) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
}

fn check_identity(identity: &str, email: &str) -> Result<(), FederationError> {
    if identity.trim().is_empty() {
        return Err(FederationError::InvalidManifest("identity must not be empty".into()));
    }
    if !email.contains('@') {
        return Err(FederationError::InvalidManifest(format!("{email:?} is not an email address")));
    }
    Ok(())
}

impl FederationManifest {
    fn create_with<R: RngCore>(owner: &str, email: &str, rng: &mut R) -> Result<Self, FederationError> {
        check_identity(owner, email)?;
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Ok(Self {
            group_id: random_uuid(rng),
            members: vec![Member {
                identity: owner.to_string(),
                email: email.to_string(),
                role: Role::Owner,
            }],
            endpoints: Vec::new(),
            secret: SigningSecret(secret),
        })
    }

    pub fn owner(&self) -> &Member {
        self.members
            .iter()
            .find(|m| m.role == Role::Owner)
            .expect("validated manifests have an owner")
    }

    pub fn member(&self, identity: &str) -> Option<&Member> {
        self.members.iter().find(|m| m.identity == identity)
    }

    pub fn endpoint(&self, endpoint_id: &str) -> Option<&EndpointRecord> {
        self.endpoints.iter().find(|e| e.endpoint_id == endpoint_id)
    }

    pub fn endpoint_ids(&self) -> Vec<String> {
        self.endpoints.iter().map(|e| e.endpoint_id.clone()).collect()
    }

    pub fn secret(&self) -> &SigningSecret {
        &self.secret
    }

    pub fn with_secret(mut self, secret: SigningSecret) -> Self {
        self.secret = secret;
        self
    }

    pub fn validate(&self) -> Result<(), FederationError> {
        let invalid = |m: String| Err(FederationError::InvalidManifest(m));
        if Uuid::parse_str(&self.group_id).is_err() {
            return invalid(format!("group_id {:?} is not a UUID", self.group_id));
        }
        let owners = self.members.iter().filter(|m| m.role == Role::Owner).count();
        if owners != 1 {
            return invalid(format!("expected exactly one owner, found {owners}"));
        }
        let mut ids = HashSet::new();
        for m in &self.members {
            check_identity(&m.identity, &m.email)?;
            if !ids.insert(m.identity.as_str()) {
                return invalid(format!("member {} listed twice", m.identity));
            }
        }
        let mut eps = HashSet::new();
        for e in &self.endpoints {
            if !ids.contains(e.owner_identity.as_str()) {
                return invalid(format!("endpoint {} is owned by non-member {}", e.endpoint_id, e.owner_identity));
            }
            if !eps.insert(e.endpoint_id.as_str()) {
                return invalid(format!("endpoint {} listed twice", e.endpoint_id));
            }
        }
        Ok(())
    }

    /// Path of the secret file that accompanies a manifest at `manifest_path`.
    pub fn secret_path(&self, manifest_path: &Path) -> PathBuf {
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        dir.join(format!("{}.secret", self.group_id))
    }

    /// Writes the manifest JSON and, next to it, `<group_id>.secret` with
    /// owner-only permissions.
    pub fn save(&self, manifest_path: &Path) -> Result<(), FederationError> {
        self.validate()?;
        let io = |e: std::io::Error| FederationError::Io(e.to_string());
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(manifest_path, json + "\n").map_err(io)?;
        let secret_path = self.secret_path(manifest_path);
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::{OpenOptionsExt, PermissionsExt};
            opts.mode(0o600);
            let mut f = opts.open(&secret_path).map_err(io)?;
            f.set_permissions(fs::Permissions::from_mode(0o600)).map_err(io)?;
            writeln!(f, "{}", self.secret.to_hex()).map_err(io)?;
        }
        #[cfg(not(unix))]
        {
            let mut f = opts.open(&secret_path).map_err(io)?;
            writeln!(f, "{}", self.secret.to_hex()).map_err(io)?;
        }
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self, FederationError> {
        let io = |e: std::io::Error| FederationError::Io(format!("{}: {e}", manifest_path.display()));
        let text = fs::read_to_string(manifest_path).map_err(io)?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| FederationError::InvalidManifest(e.to_string()))?;
        manifest.validate()?;
        let secret_path = manifest.secret_path(manifest_path);
        let secret_text = fs::read_to_string(&secret_path)
            .map_err(|e| FederationError::Io(format!("{}: {e}", secret_path.display())))?;
        let secret = SigningSecret::from_hex(&secret_text)?;
        Ok(manifest.with_secret(secret))
    }
}

/// A new federation with fresh random group id and secret, owned by `owner`.
pub fn create_federation(owner: &str, email: &str) -> Result<FederationManifest, FederationError> {
    FederationManifest::create_with(owner, email, &mut rand::rng())
}

/// Like [`create_federation`] but with group id, secret and later endpoint
/// ids drawn from `seed`, for reproducible simulations.
pub fn create_federation_seeded(owner: &str, email: &str, seed: u64) -> Result<FederationManifest, FederationError> {
    FederationManifest::create_with(owner, email, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn add_member(manifest: &mut FederationManifest, identity: &str, email: &str) -> Result<(), FederationError> {
    check_identity(identity, email)?;
    if manifest.member(identity).is_some() {
        return Err(FederationError::DuplicateMember(identity.to_string()));
    }
    manifest.members.push(Member {
        identity: identity.to_string(),
        email: email.to_string(),
        role: Role::Member,
    });
    Ok(())
}

fn register_with(
    manifest: &mut FederationManifest,
    owner_identity: &str,
    dataloader_name: &str,
    address: &str,
    endpoint_id: String,
) -> Result<EndpointRecord, FederationError> {
    if manifest.member(owner_identity).is_none() {
        return Err(FederationError::NotAMember(owner_identity.to_string()));
    }
    if dataloader_name.trim().is_empty() {
        return Err(FederationError::InvalidManifest("dataloader name must not be empty".into()));
    }
    let record = EndpointRecord {
        endpoint_id,
        owner_identity: owner_identity.to_string(),
        dataloader_name: dataloader_name.to_string(),
        address: address.to_string(),
    };
    manifest.endpoints.push(record.clone());
    Ok(record)
}

pub fn register_endpoint(
    manifest: &mut FederationManifest,
    owner_identity: &str,
    dataloader_name: &str,
    address: &str,
) -> Result<EndpointRecord, FederationError> {
    register_with(manifest, owner_identity, dataloader_name, address, Uuid::new_v4().to_string())
}

/// Endpoint registration with an id drawn from `rng`.
pub fn register_endpoint_with_rng<R: Rng>(
    manifest: &mut FederationManifest,
    owner_identity: &str,
    dataloader_name: &str,
    address: &str,
    rng: &mut R,
) -> Result<EndpointRecord, FederationError> {
    let id = random_uuid(rng);
    register_with(manifest, owner_identity, dataloader_name, address, id)
}
