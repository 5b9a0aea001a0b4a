//! Minimal Kubernetes REST client: create, list pods by label, read pod
//! logs, delete by label. Nothing else.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use url::Url;

use crate::sched::PodPhase;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiEndpoint {
    pub base_url: Url,
    pub token: Option<String>,
    pub namespace: String,
    pub verify_tls: bool,
}

impl ApiEndpoint {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let base_url = Url::parse(base_url).map_err(|e| ClientError::InvalidEndpoint(format!("{base_url}: {e}")))?;
        if !matches!(base_url.scheme(), "http" | "https") || base_url.host().is_none() {
            return Err(ClientError::InvalidEndpoint(format!("{base_url}: expected an http(s) URL with a host")));
        }
        Ok(Self { base_url, token: None, namespace: "default".to_string(), verify_tls: true })
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn with_namespace(mut self, namespace: impl Into<String>) -> Self {
        self.namespace = namespace.into();
        self
    }

    pub fn insecure(mut self) -> Self {
        self.verify_tls = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("connection error: {0}")]
    Connection(String),
    #[error("API error {status}: {message}")]
    Api { status: u16, message: String },
    #[error("cannot decode response: {0}")]
    Decode(String),
    #[error("invalid label selector `{0}`: expected key=value")]
    InvalidSelector(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
}

impl ClientError {
    /// Connection failures and server-side errors are worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self, ClientError::Connection(_)) || matches!(self, ClientError::Api { status, .. } if *status >= 500)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(100) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PodRecord {
    pub name: String,
    pub namespace: String,
    pub labels: BTreeMap<String, String>,
    pub phase: PodPhase,
    pub exit_codes: Vec<Option<i32>>,
    /// `state.waiting.reason` of the first container stuck waiting, e.g.
    /// `ImagePullBackOff`.
    pub waiting_reason: Option<String>,
}

impl PodRecord {
    pub fn from_json(v: &Value) -> Result<Self, ClientError> {
        let meta = v.get("metadata").ok_or_else(|| ClientError::Decode("pod without metadata".into()))?;
        let name = meta
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| ClientError::Decode("pod without metadata.name".into()))?
            .to_string();
        let namespace = meta.get("namespace").and_then(Value::as_str).unwrap_or_default().to_string();
        let labels = meta
            .get("labels")
            .and_then(Value::as_object)
            .map(|m| m.iter().filter_map(|(k, v)| Some((k.clone(), v.as_str()?.to_string()))).collect())
            .unwrap_or_default();
        let phase = match v.pointer("/status/phase").and_then(Value::as_str) {
            None => PodPhase::Pending,
            Some(p) => p.parse().map_err(ClientError::Decode)?,
        };
        let statuses = v.pointer("/status/containerStatuses").and_then(Value::as_array).cloned().unwrap_or_default();
        let exit_codes = statuses
            .iter()
            .map(|s| s.pointer("/state/terminated/exitCode").and_then(Value::as_i64).map(|c| c as i32))
            .collect();
        let waiting_reason = statuses
            .iter()
            .find_map(|s| s.pointer("/state/waiting/reason").and_then(Value::as_str))
            .map(str::to_string);
        Ok(PodRecord { name, namespace, labels, phase, exit_codes, waiting_reason })
    }
}

/// Byte offset into a pod's log.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct LogCursor(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogChunk {
    pub text: String,
    pub cursor: LogCursor,
}

/// REST path of the collection holding `kind` objects of `api_version`.
pub fn collection_path(api_version: &str, kind: &str, namespace: &str) -> String {
    let plural = match kind {
        "Pod" => "pods".to_string(),
        "Job" => "jobs".to_string(),
        other => format!("{}s", other.to_ascii_lowercase()),
    };
    let root = if api_version.contains('/') { format!("/apis/{api_version}") } else { format!("/api/{api_version}") };
    format!("{root}/namespaces/{namespace}/{plural}")
}

fn check_selector(selector: &str) -> Result<(), ClientError> {
    let valid = selector.split(',').all(|term| match term.split_once('=') {
        Some((k, v)) => !k.is_empty() && !v.contains('=') && !k.ends_with('!'),
        None => false,
    });
    if valid {
        Ok(())
    } else {
        Err(ClientError::InvalidSelector(selector.to_string()))
    }
}

/// Shareable across threads; holds no state besides the connection pool.
#[derive(Clone)]
pub struct KubeClient {
    endpoint: ApiEndpoint,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl std::fmt::Debug for KubeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KubeClient").field("endpoint", &self.endpoint.base_url.as_str()).finish()
    }
}

impl KubeClient {
    pub fn new(endpoint: ApiEndpoint) -> Result<Self, ClientError> {
        Self::with_retry(endpoint, RetryPolicy::default())
    }

    pub fn with_retry(endpoint: ApiEndpoint, retry: RetryPolicy) -> Result<Self, ClientError> {
        let mut builder = ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(10)).timeout(Duration::from_secs(60));
        if endpoint.base_url.scheme() == "https" {
            let tls = native_tls::TlsConnector::builder()
                .danger_accept_invalid_certs(!endpoint.verify_tls)
                .danger_accept_invalid_hostnames(!endpoint.verify_tls)
                .build()
                .map_err(|e| ClientError::InvalidEndpoint(format!("TLS setup failed: {e}")))?;
            builder = builder.tls_connector(Arc::new(tls));
        }
        Ok(Self { endpoint, agent: builder.build(), retry })
    }

    pub fn endpoint(&self) -> &ApiEndpoint {
        &self.endpoint
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint.base_url.as_str().trim_end_matches('/'), path)
    }

    fn with_retries<T>(&self, mut op: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.retry.max_retries => {
                    let delay = self.retry.base_delay * 2u32.saturating_pow(attempt);
                    log::debug!("transient API error ({e}), retry {} in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn request(&self, method: &str, path: &str, query: &[(&str, &str)]) -> ureq::Request {
        let mut req = self.agent.request(method, &self.url(path));
        for (k, v) in query {
            req = req.query(k, v);
        }
        if let Some(token) = &self.endpoint.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        req
    }

    fn send(&self, req: ureq::Request, body: Option<&Value>) -> Result<ureq::Response, ClientError> {
        let what = format!("{} {}", req.method(), req.url());
        let result = match body {
            Some(b) => req.send_json(b),
            None => req.call(),
        };
        result.map_err(|e| match e {
            ureq::Error::Status(status, resp) => {
                let body = resp.into_string().unwrap_or_default();
                let message = serde_json::from_str::<Value>(&body)
                    .ok()
                    .and_then(|v| v.get("message").and_then(Value::as_str).map(str::to_string))
                    .unwrap_or(body);
                let message = format!("{what}: {message}");
                match status {
                    401 => ClientError::Unauthorized(message),
                    403 => ClientError::Forbidden(message),
                    404 => ClientError::NotFound(message),
                    409 => ClientError::Conflict(message),
                    _ => ClientError::Api { status, message },
                }
            }
            ureq::Error::Transport(t) => ClientError::Connection(format!("{what}: {t}")),
        })
    }

    fn json(resp: ureq::Response) -> Result<Value, ClientError> {
        resp.into_json().map_err(|e| ClientError::Decode(e.to_string()))
    }

    /// Creates an object and returns the name the server assigned or echoed.
    pub fn create_resource(
        &self,
        api_version: &str,
        kind: &str,
        namespace: &str,
        body: &Value,
    ) -> Result<String, ClientError> {
        let path = collection_path(api_version, kind, namespace);
        let created = self.with_retries(|| Self::json(self.send(self.request("POST", &path, &[]), Some(body))?))?;
        created
            .pointer("/metadata/name")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ClientError::Decode("created object has no metadata.name".into()))
    }

    pub fn list_pods(&self, namespace: &str, label_selector: &str) -> Result<Vec<PodRecord>, ClientError> {
        check_selector(label_selector)?;
        let path = collection_path("v1", "Pod", namespace);
        let list = self.with_retries(|| {
            Self::json(self.send(self.request("GET", &path, &[("labelSelector", label_selector)]), None)?)
        })?;
        list.get("items")
            .and_then(Value::as_array)
            .map(|items| items.iter().map(PodRecord::from_json).collect())
            .unwrap_or_else(|| Ok(Vec::new()))
    }

    /// Log text written after `since`. The logs endpoint is read whole and
    /// sliced at the byte cursor; an incomplete trailing UTF-8 sequence is
    /// left for the next call.
    pub fn get_pod_logs(&self, namespace: &str, pod: &str, since: LogCursor) -> Result<LogChunk, ClientError> {
        let path = format!("{}/{pod}/log", collection_path("v1", "Pod", namespace));
        let bytes = self.with_retries(|| {
            let resp = self.send(self.request("GET", &path, &[]), None)?;
            let mut buf = Vec::new();
            std::io::Read::read_to_end(&mut resp.into_reader(), &mut buf)
                .map_err(|e| ClientError::Connection(e.to_string()))?;
            Ok(buf)
        })?;
        let start = (since.0 as usize).min(bytes.len());
        let tail = &bytes[start..];
        let (text, used) = match std::str::from_utf8(tail) {
            Ok(s) => (s.to_string(), tail.len()),
            Err(e) if e.error_len().is_none() => {
                let valid = e.valid_up_to();
                (String::from_utf8_lossy(&tail[..valid]).into_owned(), valid)
            }
            Err(_) => (String::from_utf8_lossy(tail).into_owned(), tail.len()),
        };
        Ok(LogChunk { text, cursor: LogCursor((start + used) as u64) })
    }

    /// Deletes every `kind` object matching the selector and returns how many
    /// went. Deleting an already empty selection returns 0.
    pub fn delete_collection(
        &self,
        namespace: &str,
        api_version: &str,
        kind: &str,
        label_selector: &str,
    ) -> Result<usize, ClientError> {
        check_selector(label_selector)?;
        let path = collection_path(api_version, kind, namespace);
        let query = [("labelSelector", label_selector), ("propagationPolicy", "Background")];
        let resp = self.with_retries(|| Self::json(self.send(self.request("DELETE", &path, &query), None)?))?;
        Ok(resp.get("items").and_then(Value::as_array).map_or(0, Vec::len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn collection_paths() {
        assert_eq!(collection_path("v1", "Pod", "ns"), "/api/v1/namespaces/ns/pods");
        assert_eq!(collection_path("batch/v1", "Job", "ns"), "/apis/batch/v1/namespaces/ns/jobs");
        assert_eq!(collection_path("graphcore.ai/v1alpha1", "IPUJob", "x"), "/apis/graphcore.ai/v1alpha1/namespaces/x/ipujobs");
    }

    #[test]
    fn selector_syntax() {
        assert!(check_selector("rfm=abc123xy").is_ok());
        assert!(check_selector("rfm=a,app=b").is_ok());
        for bad in ["rfm", "=x", "rfm!=x", "a==b", ""] {
            assert!(check_selector(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn endpoint_validation() {
        assert!(ApiEndpoint::new("http://127.0.0.1:8080").is_ok());
        assert!(ApiEndpoint::new("not a url").is_err());
        assert!(ApiEndpoint::new("ftp://host").is_err());
        assert!(ApiEndpoint::new("https://k8s.example:6443").unwrap().verify_tls);
    }

    #[test]
    fn pod_record_from_api_json() {
        let v = json!({
            "metadata": {"name": "p", "namespace": "default", "labels": {"rfm": "abc123xy"}},
            "status": {"phase": "Failed", "containerStatuses": [
                {"name": "c", "state": {"terminated": {"exitCode": 2}}},
                {"name": "d", "state": {"waiting": {"reason": "CrashLoopBackOff"}}}]}
        });
        let pod = PodRecord::from_json(&v).unwrap();
        assert_eq!(pod.phase, PodPhase::Failed);
        assert_eq!(pod.exit_codes, [Some(2), None]);
        assert_eq!(pod.labels["rfm"], "abc123xy");
        assert_eq!(pod.waiting_reason.as_deref(), Some("CrashLoopBackOff"));
        assert!(PodRecord::from_json(&json!({"metadata": {"name": "p"}, "status": {"phase": "Weird"}})).is_err());
    }

    #[test]
    fn unreachable_endpoint_is_a_connection_error() {
        // Bind then drop a listener so the port is very likely closed.
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let ep = ApiEndpoint::new(&format!("http://127.0.0.1:{port}")).unwrap();
        let client =
            KubeClient::with_retry(ep, RetryPolicy { max_retries: 1, base_delay: Duration::from_millis(1) }).unwrap();
        assert!(matches!(client.list_pods("default", "rfm=abc"), Err(ClientError::Connection(_))));
    }
}
