use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Authenticated caller; every query is scoped by its tenant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub tenant_id: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TenantEntry {
    pub id: String,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub tenant_id: String,
    pub user: String,
}

/// Static bearer-token table:
///
/// ```toml
/// [[tenants]]
/// id = "lab-a"
/// name = "Cytogenetics A"
///
/// [[tokens]]
/// token = "secret-a"
/// tenant_id = "lab-a"
/// user = "alice"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFile {
    #[serde(default)]
    pub tenants: Vec<TenantEntry>,
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
}

impl TokenFile {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let file: TokenFile = toml::from_str(text).map_err(|e| Error::InvalidRequest(format!("token file: {e}")))?;
        let mut seen = HashMap::new();
        for t in &file.tokens {
            if t.token.is_empty() {
                return Err(Error::InvalidRequest("token file: empty token".into()));
            }
            if seen.insert(t.token.as_str(), ()).is_some() {
                return Err(Error::InvalidRequest(format!("token file: duplicate token for {}", t.user)));
            }
        }
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidRequest(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn resolve(&self, token: &str) -> Option<Principal> {
        self.tokens.iter().find(|t| t.token == token).map(|t| Principal {
            tenant_id: t.tenant_id.clone(),
            user: t.user.clone(),
        })
    }

    /// Every tenant named either in `[[tenants]]` or by a token.
    pub fn tenant_ids(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.tenants.iter().map(|t| (t.id.clone(), t.name.clone())).collect();
        for t in &self.tokens {
            if !out.iter().any(|(id, _)| *id == t.tenant_id) {
                out.push((t.tenant_id.clone(), t.tenant_id.clone()));
            }
        }
        out
    }
}
