//! Small shared helpers: stable hashing and a counting semaphore.

use std::sync::{Condvar, Mutex};

use sha2::{Digest, Sha256};

/// Hashes a sequence of byte strings with length framing and returns the
/// first eight bytes of the SHA-256 digest as a little-endian integer.
///
/// Stable across platforms and releases, unlike `std::hash`.
pub fn stable_hash64<I, B>(parts: I) -> u64
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let digest = framed_digest(parts);
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(buf)
}

/// Hex SHA-256 of length-framed parts.
pub fn stable_hash_hex<I, B>(parts: I) -> String
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    hex::encode(framed_digest(parts))
}

fn framed_digest<I, B>(parts: I) -> Vec<u8>
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for part in parts {
        let bytes = part.as_ref();
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hasher.finalize().to_vec()
}

/// Derives a child seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    stable_hash64([&master.to_le_bytes()[..], label.as_bytes()])
}

/// Blocking counting semaphore that also records the peak number of
/// concurrently held permits.
#[derive(Debug)]
pub struct Semaphore {
    state: Mutex<SemState>,
    cvar: Condvar,
    permits: usize,
}

#[derive(Debug, Default)]
struct SemState {
    in_use: usize,
    peak: usize,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            state: Mutex::new(SemState::default()),
            cvar: Condvar::new(),
            permits: permits.max(1),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while st.in_use >= self.permits {
            st = self.cvar.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.in_use += 1;
        st.peak = st.peak.max(st.in_use);
        Permit { sem: self }
    }

    pub fn permits(&self) -> usize {
        self.permits
    }

    pub fn in_use(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).in_use
    }

    /// Highest number of permits ever held at once.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).peak
    }
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.sem.state.lock().unwrap_or_else(|e| e.into_inner());
        st.in_use -= 1;
        drop(st);
        self.sem.cvar.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn hash_is_framed() {
        assert_ne!(stable_hash64(["ab", "c"]), stable_hash64(["a", "bc"]));
        assert_eq!(stable_hash64(["x"]), stable_hash64(["x"]));
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Arc::new(Semaphore::new(3));
        std::thread::scope(|s| {
            for _ in 0..12 {
                let sem = Arc::clone(&sem);
                s.spawn(move || {
                    let _p = sem.acquire();
                    std::thread::sleep(std::time::Duration::from_millis(5));
                });
            }
        });
        assert!(sem.peak() <= 3);
        assert_eq!(sem.in_use(), 0);
    }
}
