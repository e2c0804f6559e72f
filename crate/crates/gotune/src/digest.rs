use sha2::{Digest, Sha256};

/// Content hash over labelled inputs, hex-encoded.
#[derive(Debug, Clone, Default)]
pub struct ConfigDigest(Sha256);

impl ConfigDigest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, label: &str, bytes: &[u8]) -> &mut Self {
        for part in [label.as_bytes(), bytes] {
            self.0.update((part.len() as u64).to_le_bytes());
            self.0.update(part);
        }
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}
