use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    pub input: Vec<u8>,
    /// Cumulative covered blocks right after this entry was admitted.
    pub covered_blocks: usize,
}

/// Admitted inputs in admission order, optionally mirrored to a directory
/// with one file per input named by its content hash.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    dir: Option<PathBuf>,
}

pub fn content_name(input: &[u8]) -> String {
    hex::encode(Sha256::digest(input))
}

impl Corpus {
    pub fn in_memory() -> Self {
        Corpus::default()
    }

    pub fn persisted(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Corpus { entries: Vec::new(), dir: Some(dir.to_path_buf()) })
    }

    /// Reads every file of `dir` as an input, in file-name order.
    pub fn load_inputs(dir: &Path) -> io::Result<Vec<Vec<u8>>> {
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        paths.iter().map(fs::read).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &[u8] {
        &self.entries[i].input
    }

    pub fn admit(&mut self, input: Vec<u8>, covered_blocks: usize) -> io::Result<()> {
        if let Some(dir) = &self.dir {
            fs::write(dir.join(content_name(&input)), &input)?;
        }
        self.entries.push(CorpusEntry { input, covered_blocks });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persisted_files_are_named_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Corpus::persisted(dir.path()).unwrap();
        c.admit(b"abc".to_vec(), 1).unwrap();
        let name = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
        assert_eq!(content_name(b"abc"), name);
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), b"abc");
        assert_eq!(Corpus::load_inputs(dir.path()).unwrap(), vec![b"abc".to_vec()]);
    }
}
