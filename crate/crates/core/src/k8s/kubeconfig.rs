//! The few kubeconfig fields needed to reach a cluster: `current-context`,
//! `contexts[].{name, cluster, user}`, `clusters[].server`, `users[].token`.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::client::{ApiEndpoint, ClientError};

pub const KUBECONFIG_ENV: &str = "KUBECONFIG";

#[derive(Debug, Clone, Deserialize)]
pub struct Kubeconfig {
    #[serde(rename = "current-context", default)]
    pub current_context: Option<String>,
    #[serde(default)]
    pub contexts: Vec<NamedContext>,
    #[serde(default)]
    pub clusters: Vec<NamedCluster>,
    #[serde(default)]
    pub users: Vec<NamedUser>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NamedContext {
    pub name: String,
    pub context: ContextRef,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ContextRef {
    pub cluster: String,
    #[serde(default)]
    pub user: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NamedCluster {
    pub name: String,
    pub cluster: Cluster,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Cluster {
    pub server: String,
    #[serde(rename = "insecure-skip-tls-verify", default)]
    pub insecure_skip_tls_verify: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct NamedUser {
    pub name: String,
    #[serde(default)]
    pub user: User,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct User {
    #[serde(default)]
    pub token: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum KubeconfigError {
    #[error("environment variable {KUBECONFIG_ENV} is not set")]
    Unset,
    #[error("cannot read kubeconfig {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("kubeconfig {0} has no current-context")]
    NoCurrentContext(PathBuf),
    #[error("kubeconfig has no {what} named `{name}`")]
    Missing { what: &'static str, name: String },
    #[error(transparent)]
    Endpoint(#[from] ClientError),
}

impl Kubeconfig {
    pub fn load(path: &Path) -> Result<Self, KubeconfigError> {
        let unreadable = |message: String| KubeconfigError::Unreadable { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| unreadable(e.to_string()))?;
        serde_yaml::from_str(&text).map_err(|e| unreadable(e.to_string()))
    }

    /// The file named by `KUBECONFIG`; only the first entry of a
    /// colon-separated list is read.
    pub fn from_env(value: Option<&str>) -> Result<(PathBuf, Self), KubeconfigError> {
        let value = value.filter(|v| !v.is_empty()).ok_or(KubeconfigError::Unset)?;
        let path = PathBuf::from(value.split(':').next().unwrap_or(value));
        let cfg = Self::load(&path)?;
        Ok((path, cfg))
    }

    pub fn endpoint_for(&self, context: &str) -> Result<ApiEndpoint, KubeconfigError> {
        let ctx = self
            .contexts
            .iter()
            .find(|c| c.name == context)
            .ok_or_else(|| KubeconfigError::Missing { what: "context", name: context.to_string() })?;
        let cluster = self
            .clusters
            .iter()
            .find(|c| c.name == ctx.context.cluster)
            .ok_or_else(|| KubeconfigError::Missing { what: "cluster", name: ctx.context.cluster.clone() })?;
        let mut ep = ApiEndpoint::new(&cluster.cluster.server)?;
        ep.verify_tls = !cluster.cluster.insecure_skip_tls_verify;
        if let Some(user) = &ctx.context.user {
            let user = self
                .users
                .iter()
                .find(|u| &u.name == user)
                .ok_or_else(|| KubeconfigError::Missing { what: "user", name: user.clone() })?;
            ep.token = user.user.token.clone();
        }
        Ok(ep)
    }
}
