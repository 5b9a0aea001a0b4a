use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

pub const IDENTIFIER_LEN: usize = 8;
pub const IDENTIFIER_ALPHABET: &[u8; 36] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Random 8-character `[a-z0-9]` value naming every resource of one run,
/// carried as the `rfm` label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RunIdentifier(String);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("`{0}` is not an 8-character [a-z0-9] run identifier")]
pub struct InvalidIdentifier(pub String);

impl RunIdentifier {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let value = (0..IDENTIFIER_LEN)
            .map(|_| IDENTIFIER_ALPHABET[rng.gen_range(0..IDENTIFIER_ALPHABET.len())] as char)
            .collect();
        RunIdentifier(value)
    }

    /// `rfm=<id>`
    pub fn selector(&self) -> String {
        format!("{}={}", super::RUN_LABEL, self.0)
    }
}

impl FromStr for RunIdentifier {
    type Err = InvalidIdentifier;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == IDENTIFIER_LEN && s.bytes().all(|b| IDENTIFIER_ALPHABET.contains(&b)) {
            Ok(RunIdentifier(s.to_string()))
        } else {
            Err(InvalidIdentifier(s.to_string()))
        }
    }
}

impl TryFrom<String> for RunIdentifier {
    type Error = InvalidIdentifier;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<RunIdentifier> for String {
    fn from(id: RunIdentifier) -> String {
        id.0
    }
}

impl fmt::Display for RunIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Draws from `draw` until the value is not in `existing`.
pub fn generate_identifier(
    existing: &HashSet<RunIdentifier>,
    mut draw: impl FnMut() -> RunIdentifier,
) -> RunIdentifier {
    loop {
        let id = draw();
        if !existing.contains(&id) {
            return id;
        }
        log::debug!("run identifier collision on {id}, redrawing");
    }
}

/// Hands out identifiers that are unique for the lifetime of the pool.
#[derive(Debug)]
pub struct IdentifierPool {
    inner: Mutex<PoolState>,
}

#[derive(Debug)]
struct PoolState {
    used: HashSet<RunIdentifier>,
    rng: StdRng,
}

impl IdentifierPool {
    pub fn new() -> Self {
        Self::with_rng(StdRng::from_entropy())
    }

    pub fn seeded(seed: u64) -> Self {
        Self::with_rng(StdRng::seed_from_u64(seed))
    }

    fn with_rng(rng: StdRng) -> Self {
        Self { inner: Mutex::new(PoolState { used: HashSet::new(), rng }) }
    }

    pub fn next(&self) -> RunIdentifier {
        let mut state = self.inner.lock().unwrap();
        let PoolState { used, rng } = &mut *state;
        let id = generate_identifier(used, || RunIdentifier::random(rng));
        used.insert(id.clone());
        id
    }

    pub fn issued(&self) -> usize {
        self.inner.lock().unwrap().used.len()
    }
}

impl Default for IdentifierPool {
    fn default() -> Self {
        Self::new()
    }
}
