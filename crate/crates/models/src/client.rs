use std::time::Duration;

use kayra_core::pipeline::{BackendError, StageBackends};
use kayra_core::protocol::{
    ClassifyRequest, ClassifyResponse, DedupRequest, DedupResponse, Health, InstanceRequest,
    InstanceResponse, SemSegRequest, SemSegResponse,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ureq::Agent;

use crate::server::{Endpoint, MAX_BODY_BYTES};

/// Base URLs of the four model services. One service may back several.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEndpoints {
    pub semseg: String,
    pub instances: String,
    pub dedup: String,
    pub classify: String,
}

impl ServiceEndpoints {
    pub fn all(base: &str) -> Self {
        Self {
            semseg: base.into(),
            instances: base.into(),
            dedup: base.into(),
            classify: base.into(),
        }
    }

    pub fn base(&self, e: Endpoint) -> &str {
        match e {
            Endpoint::SemSeg => &self.semseg,
            Endpoint::Instances => &self.instances,
            Endpoint::Dedup => &self.dedup,
            Endpoint::Classify => &self.classify,
        }
    }

    /// Checks every URL is absolute http(s) with a host.
    pub fn validate(&self) -> Result<(), String> {
        for e in Endpoint::ALL {
            let url = self.base(e);
            let rest = url
                .strip_prefix("http://")
                .or_else(|| url.strip_prefix("https://"))
                .ok_or_else(|| format!("{}: {url:?} is not an http(s) URL", e.path()))?;
            let host = rest.split('/').next().unwrap_or("");
            if host.is_empty() || host.contains(char::is_whitespace) {
                return Err(format!("{}: {url:?} has no host", e.path()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTimeouts {
    pub semseg_ms: u64,
    pub instances_ms: u64,
    pub dedup_ms: u64,
    pub classify_ms: u64,
}

impl Default for StageTimeouts {
    fn default() -> Self {
        Self {
            semseg_ms: 30_000,
            instances_ms: 60_000,
            dedup_ms: 30_000,
            classify_ms: 10_000,
        }
    }
}

impl StageTimeouts {
    pub fn get(&self, e: Endpoint) -> u64 {
        match e {
            Endpoint::SemSeg => self.semseg_ms,
            Endpoint::Instances => self.instances_ms,
            Endpoint::Dedup => self.dedup_ms,
            Endpoint::Classify => self.classify_ms,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if Endpoint::ALL.iter().any(|&e| self.get(e) == 0) {
            return Err("stage timeouts must be positive".into());
        }
        Ok(())
    }
}

/// Blocking HTTP client for the model services, one agent per stage so each
/// carries its own timeout.
#[derive(Debug, Clone)]
pub struct HttpBackends {
    endpoints: ServiceEndpoints,
    timeouts: StageTimeouts,
    agents: [Agent; 4],
}

fn agent(timeout_ms: u64) -> Agent {
    Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into()
}

impl HttpBackends {
    pub fn new(endpoints: ServiceEndpoints, timeouts: StageTimeouts) -> Self {
        let agents = Endpoint::ALL.map(|e| agent(timeouts.get(e)));
        Self {
            endpoints,
            timeouts,
            agents,
        }
    }

    pub fn endpoints(&self) -> &ServiceEndpoints {
        &self.endpoints
    }

    fn url(&self, e: Endpoint) -> String {
        format!("{}{}", self.endpoints.base(e).trim_end_matches('/'), e.path())
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, e: Endpoint, req: &Req) -> Result<Resp, BackendError> {
        let timeout = self.timeouts.get(e);
        let result = self.agents[e as usize].post(&self.url(e)).send_json(req);
        let mut resp = result.map_err(|err| transport_error(err, timeout))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            let msg = format!("{} returned HTTP {status}: {body}", e.path());
            return Err(if status >= 500 {
                BackendError::Unavailable(msg)
            } else {
                BackendError::Rejected(msg)
            });
        }
        resp.body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES as u64)
            .read_json()
            .map_err(|err| match err {
                ureq::Error::Timeout(_) => BackendError::Timeout(timeout),
                other => BackendError::Protocol(format!("{}: {other}", e.path())),
            })
    }

    /// `GET /healthz` of the service behind `e`.
    pub fn health(&self, e: Endpoint) -> Result<Health, BackendError> {
        let url = format!("{}/healthz", self.endpoints.base(e).trim_end_matches('/'));
        let timeout = self.timeouts.get(e);
        let mut resp = self.agents[e as usize]
            .get(&url)
            .call()
            .map_err(|err| transport_error(err, timeout))?;
        if resp.status().as_u16() != 200 {
            return Err(BackendError::Unavailable(format!("{url} returned {}", resp.status())));
        }
        resp.body_mut()
            .read_json()
            .map_err(|err| BackendError::Protocol(err.to_string()))
    }
}

fn transport_error(err: ureq::Error, timeout_ms: u64) -> BackendError {
    match err {
        ureq::Error::Timeout(_) => BackendError::Timeout(timeout_ms),
        ureq::Error::Io(e) if e.kind() == std::io::ErrorKind::TimedOut => BackendError::Timeout(timeout_ms),
        other => BackendError::Unavailable(other.to_string()),
    }
}

impl StageBackends for HttpBackends {
    fn semseg(&self, req: &SemSegRequest) -> Result<SemSegResponse, BackendError> {
        self.post(Endpoint::SemSeg, req)
    }
    fn instances(&self, req: &InstanceRequest) -> Result<InstanceResponse, BackendError> {
        self.post(Endpoint::Instances, req)
    }
    fn dedup(&self, req: &DedupRequest) -> Result<DedupResponse, BackendError> {
        self.post(Endpoint::Dedup, req)
    }
    fn classify(&self, req: &ClassifyRequest) -> Result<ClassifyResponse, BackendError> {
        self.post(Endpoint::Classify, req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_validation() {
        assert!(ServiceEndpoints::all("http://127.0.0.1:9000").validate().is_ok());
        assert!(ServiceEndpoints::all("127.0.0.1:9000").validate().is_err());
        assert!(ServiceEndpoints::all("http://").validate().is_err());
        assert!(StageTimeouts {
            dedup_ms: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn refused_connection_is_unavailable() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        drop(listener);
        let client = HttpBackends::new(
            ServiceEndpoints::all(&format!("http://127.0.0.1:{port}")),
            StageTimeouts::default(),
        );
        assert!(matches!(client.health(Endpoint::SemSeg), Err(BackendError::Unavailable(_))));
    }
}
