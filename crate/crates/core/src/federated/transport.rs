//! Message carriers for client updates.

use std::fs;
use std::path::{Path, PathBuf};

use super::FedError;

/// Moves serialized client updates from sites to the server.
pub trait Transport {
    fn send(&mut self, round: u32, client: &str, payload: Vec<u8>) -> Result<(), FedError>;

    /// Every payload sent for `round`, in send order.
    fn collect(&mut self, round: u32) -> Result<Vec<(String, Vec<u8>)>, FedError>;
}

/// In-process queue.
#[derive(Debug, Default)]
pub struct InMemory {
    pending: Vec<(u32, String, Vec<u8>)>,
}

impl Transport for InMemory {
    fn send(&mut self, round: u32, client: &str, payload: Vec<u8>) -> Result<(), FedError> {
        self.pending.push((round, client.to_string(), payload));
        Ok(())
    }

    fn collect(&mut self, round: u32) -> Result<Vec<(String, Vec<u8>)>, FedError> {
        let (hit, rest) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|m| m.0 == round);
        self.pending = rest;
        Ok(hit.into_iter().map(|(_, c, p)| (c, p)).collect())
    }
}

/// One file per message, `round_<r>_client_<id>.bin`, in a spool directory.
#[derive(Debug)]
pub struct SpoolDir {
    dir: PathBuf,
    sent: Vec<(u32, String)>,
}

impl SpoolDir {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, FedError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| FedError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, sent: Vec::new() })
    }

    pub fn path_for(&self, round: u32, client: &str) -> PathBuf {
        spool_path(&self.dir, round, client)
    }
}

pub fn spool_path(dir: &Path, round: u32, client: &str) -> PathBuf {
    dir.join(format!("round_{round}_client_{client}.bin"))
}

impl Transport for SpoolDir {
    fn send(&mut self, round: u32, client: &str, payload: Vec<u8>) -> Result<(), FedError> {
        let path = self.path_for(round, client);
        fs::write(&path, payload).map_err(|e| FedError::Io(format!("{}: {e}", path.display())))?;
        self.sent.push((round, client.to_string()));
        Ok(())
    }

    fn collect(&mut self, round: u32) -> Result<Vec<(String, Vec<u8>)>, FedError> {
        let mut out = Vec::new();
        for (_, client) in self.sent.iter().filter(|(r, _)| *r == round) {
            let path = self.path_for(round, client);
            let bytes = fs::read(&path).map_err(|e| FedError::Io(format!("{}: {e}", path.display())))?;
            out.push((client.clone(), bytes));
        }
        self.sent.retain(|(r, _)| *r != round);
        Ok(out)
    }
}
