use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::dataset::SequenceDataset;
use crate::error::{bail, Result};

const MAGIC: &[u8; 8] = b"S4RDATA\0";
pub const CACHE_VERSION: u32 = 1;

pub type ContentHash = [u8; 32];

/// Digest of the raw log bytes together with the preprocessing settings.
pub fn content_hash(raw: &[u8], settings: &str) -> ContentHash {
    let mut h = Sha256::new();
    h.update((raw.len() as u64).to_le_bytes());
    h.update(raw);
    h.update(settings.as_bytes());
    h.finalize().into()
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| crate::Error::Data(format!("cache holds invalid utf-8: {e}")))
}

pub fn write_cache(path: &Path, dataset: &SequenceDataset, hash: &ContentHash) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION)?;
    w.write_all(hash)?;
    for ids in [&dataset.user_ids, &dataset.item_ids] {
        w.write_u64::<LittleEndian>(ids.len() as u64)?;
        for s in ids {
            write_str(&mut w, s)?;
        }
    }
    w.write_u64::<LittleEndian>(dataset.sequences.len() as u64)?;
    for seq in &dataset.sequences {
        w.write_u64::<LittleEndian>(seq.len() as u64)?;
        for &i in seq {
            w.write_u32::<LittleEndian>(i as u32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<(ContentHash, SequenceDataset)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        bail!(Data, "{} is not a dataset cache", path.display());
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CACHE_VERSION {
        bail!(Data, "cache version {version} unsupported (expected {CACHE_VERSION})");
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    let read_ids = |r: &mut BufReader<File>| -> Result<Vec<String>> {
        let n = r.read_u64::<LittleEndian>()? as usize;
        (0..n).map(|_| read_str(r)).collect()
    };
    let user_ids = read_ids(&mut r)?;
    let item_ids = read_ids(&mut r)?;
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.read_u64::<LittleEndian>()? as usize;
        let seq = (0..len).map(|_| r.read_u32::<LittleEndian>().map(|i| i as usize)).collect::<std::io::Result<Vec<_>>>()?;
        if seq.iter().any(|&i| i == 0 || i >= item_ids.len()) {
            bail!(Data, "cache sequence references an unknown item");
        }
        sequences.push(seq);
    }
    if sequences.len() != user_ids.len() {
        bail!(Data, "cache has {} sequences for {} users", sequences.len(), user_ids.len());
    }
    Ok((hash, SequenceDataset { user_ids, item_ids, sequences }))
}

/// Cached dataset when the file exists and its hash matches.
pub fn load_if_fresh(path: &Path, expected: &ContentHash) -> Result<Option<SequenceDataset>> {
    if !path.exists() {
        return Ok(None);
    }
    let (hash, ds) = read_cache(path)?;
    Ok((&hash == expected).then_some(ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let ds = SequenceDataset {
            user_ids: vec!["ü".into(), "b".into()],
            item_ids: vec![String::new(), "x".into(), "y".into()],
            sequences: vec![vec![1, 2, 1], vec![2]],
        };
        let h = content_hash(b"raw", "k=5");
        write_cache(&path, &ds, &h).unwrap();
        assert_eq!(read_cache(&path).unwrap(), (h, ds.clone()));
        assert_eq!(load_if_fresh(&path, &h).unwrap(), Some(ds));
        assert_eq!(load_if_fresh(&path, &content_hash(b"raw", "k=3")).unwrap(), None);
        assert_eq!(load_if_fresh(&dir.path().join("none"), &h).unwrap(), None);
        std::fs::write(&path, b"garbage!garbage").unwrap();
        assert!(read_cache(&path).is_err());
    }
}
