//! Cohort bank file format ("CNBK", version 1).
//!
//! A bank is the inference-side artifact: speaker names plus their center
//! tensor. It deliberately carries no optimizer or gate state — a trained
//! run's full state lives in the checkpoint format, which embeds one of
//! these banks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "CNBK"
//! version   u8       1
//! speakers  u32
//! n_sub     u32
//! dim       u32
//! names     speakers × (u16 length + UTF-8 bytes)
//! centers   speakers · n_sub · dim × f64
//! ```

use std::fs;
use std::path::Path;

use super::archive::{archive_err as bank_err, Cursor};
use crate::error::{Error, Result};
use crate::types::ImpostorBank;

const MAGIC: &[u8; 4] = b"CNBK";
const VERSION: u8 = 1;

pub fn write_bank(path: &Path, bank: &ImpostorBank) -> Result<()> {
    let mut buf =
        Vec::with_capacity(17 + bank.len() * 18 + bank.centers().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.n_sub() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.dim() as u32).to_le_bytes());
    for s in bank.speakers() {
        let bytes = s.name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig(format!(
                "speaker name longer than {} bytes",
                u16::MAX
            )));
        }
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    for v in bank.centers() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_bank(path: &Path) -> Result<ImpostorBank> {
    let data = fs::read(path)?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(bank_err(path, "bad magic (not a cohort bank)", 0));
    }
    let version = cur.take(1, "version byte")?[0];
    if version != VERSION {
        return Err(bank_err(
            path,
            format!("unsupported version {version} (expected {VERSION})"),
            4,
        ));
    }
    let speakers = cur.u32("speaker count")? as usize;
    let n_sub = cur.u32("sub-center count")? as usize;
    let dim = cur.u32("dimension")? as usize;
    if n_sub == 0 || dim == 0 {
        return Err(bank_err(path, "n_sub and dim must be nonzero", 5));
    }
    let mut names = Vec::with_capacity(speakers);
    for i in 0..speakers {
        names.push(cur.string(&format!("name of speaker {i}"))?);
    }
    let at = cur.pos;
    let payload = cur.take(speakers * n_sub * dim * 8, "center tensor")?;
    let centers: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if cur.pos != data.len() {
        return Err(bank_err(
            path,
            format!(
                "{} trailing byte(s) after the center tensor",
                data.len() - cur.pos
            ),
            cur.pos as u64,
        ));
    }
    if centers.iter().any(|v| !v.is_finite()) {
        return Err(bank_err(path, "non-finite center value", at as u64));
    }
    let speakers = names
        .into_iter()
        .enumerate()
        .map(|(c, n)| crate::types::SpeakerId::with_class(n, c))
        .collect();
    ImpostorBank::new(speakers, centers, n_sub, dim)
}

/// Return the 4-byte magic of a bank or checkpoint file so callers can
/// dispatch without parsing the whole file.
pub fn sniff_magic(path: &Path) -> Result<[u8; 4]> {
    let data = fs::read(path)?;
    if data.len() < 4 {
        return Err(bank_err(path, "file too short to carry a magic", 0));
    }
    Ok([data[0], data[1], data[2], data[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::make_temp_dir;
    use crate::types::SpeakerId;

    fn sample_bank(n_sub: usize) -> ImpostorBank {
        let speakers: Vec<SpeakerId> = (0..3)
            .map(|c| SpeakerId::with_class(format!("spk{c}"), c))
            .collect();
        let centers: Vec<f64> = (0..3 * n_sub * 4)
            .map(|i| (i as f64).mul_add(0.25, -1.5))
            .collect();
        ImpostorBank::new(speakers, centers, n_sub, 4).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        for n_sub in [1, 2] {
            let dir = make_temp_dir("bank");
            let path = dir.join("b.cnbk");
            let bank = sample_bank(n_sub);
            write_bank(&path, &bank).unwrap();
            let back = read_bank(&path).unwrap();
            assert_eq!(back.len(), bank.len());
            assert_eq!(back.n_sub(), bank.n_sub());
            assert_eq!(back.dim(), bank.dim());
            assert_eq!(back.speakers(), bank.speakers());
            let bits =
                |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(back.centers()), bits(bank.centers()));
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = make_temp_dir("bank");
        let path = dir.join("b.cnbk");
        let bank = sample_bank(2);
        write_bank(&path, &bank).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_bank(&path),
            Err(Error::Archive { offset: 0, .. })
        ));

        bytes[0] = b'C';
        let cut = bytes.len() - 5;
        fs::write(&path, &bytes[..cut]).unwrap();
        let err = read_bank(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = make_temp_dir("bank");
        let path = dir.join("b.cnbk");
        write_bank(&path, &sample_bank(1)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        let err = read_bank(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn sniffs_magic() {
        let dir = make_temp_dir("bank");
        let path = dir.join("b.cnbk");
        write_bank(&path, &sample_bank(1)).unwrap();
        assert_eq!(&sniff_magic(&path).unwrap(), b"CNBK");
        fs::write(dir.join("tiny"), b"ab").unwrap();
        assert!(sniff_magic(&dir.join("tiny")).is_err());
    }
}
