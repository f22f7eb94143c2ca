//! Online backup and restore.
//!
//! A backup is a destination directory holding copied data files, a prefix
//! copy of the metadata log, and a line-oriented manifest. Data files are
//! immutable, so incremental mode skips any file the previous manifest
//! already lists at the same size; the manifest, not the directory contents,
//! defines the snapshot, and stale files from older backups are simply
//! ignored on restore. Restore verifies sizes and checksums before copying
//! anything back.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::crc32;

pub const MANIFEST: &str = "MANIFEST";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BackupReport {
    pub files_total: usize,
    /// Data files actually copied (log and manifest excluded).
    pub files_copied: usize,
    pub bytes_copied: u64,
}

fn read_manifest(path: &Path) -> Result<Vec<(String, u64, u32)>> {
    let mut out = Vec::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split('\t');
        let (p, s, h) = match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(s), Some(h)) => (p, s, h),
            _ => return Err(Error::Corrupt(format!("manifest line {} malformed", i + 1))),
        };
        let size: u64 = s
            .parse()
            .map_err(|_| Error::Corrupt(format!("manifest line {} bad size", i + 1)))?;
        let hash = u32::from_str_radix(h, 16)
            .map_err(|_| Error::Corrupt(format!("manifest line {} bad hash", i + 1)))?;
        out.push((p.to_string(), size, hash));
    }
    Ok(out)
}

fn copy_into(dest: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dest.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = File::create(&path)?;
    f.write_all(bytes)?;
    f.sync_data()?;
    Ok(())
}

/// Copies `files` (paths relative to `data_dir`) plus the first `log_len`
/// bytes of the metadata log into `dest`, then writes the manifest. When
/// `incremental`, files already present in the destination's previous
/// manifest at the same size are not re-read or re-copied.
pub fn backup_snapshot(
    data_dir: &Path,
    dest: &Path,
    files: &[String],
    log_rel: &str,
    log_len: u64,
    incremental: bool,
) -> Result<BackupReport> {
    fs::create_dir_all(dest)?;
    let prior: std::collections::BTreeMap<String, (u64, u32)> = if incremental {
        read_manifest(&dest.join(MANIFEST))?
            .into_iter()
            .map(|(p, s, h)| (p, (s, h)))
            .collect()
    } else {
        Default::default()
    };

    let mut report = BackupReport::default();
    let mut manifest = String::new();
    for rel in files {
        let src = data_dir.join(rel);
        let size = fs::metadata(&src)?.len();
        let hash = match prior.get(rel) {
            Some(&(psize, phash)) if psize == size => phash,
            _ => {
                let bytes = fs::read(&src)?;
                copy_into(dest, rel, &bytes)?;
                report.files_copied += 1;
                report.bytes_copied += size;
                crc32(&bytes)
            }
        };
        manifest.push_str(&format!("{rel}\t{size}\t{hash:08x}\n"));
        report.files_total += 1;
    }

    // The log prefix is always copied; records past log_len belong to
    // transactions newer than this snapshot.
    let mut log_bytes = vec![0u8; log_len as usize];
    File::open(data_dir.join(log_rel))?.read_exact(&mut log_bytes)?;
    copy_into(dest, log_rel, &log_bytes)?;
    manifest.push_str(&format!("{log_rel}\t{log_len}\t{:08x}\n", crc32(&log_bytes)));
    report.files_total += 1;

    copy_into(dest, MANIFEST, manifest.as_bytes())?;
    Ok(report)
}

/// Copies a verified backup into an empty data directory. Every manifest
/// entry must exist in the backup with matching size and checksum.
pub fn restore_snapshot(src: &Path, data_dir: &Path) -> Result<usize> {
    let entries = read_manifest(&src.join(MANIFEST))?;
    if entries.is_empty() {
        return Err(Error::Storage("backup manifest missing or empty".into()));
    }
    // Verify everything before writing anything.
    let mut contents = Vec::with_capacity(entries.len());
    for (rel, size, hash) in &entries {
        let bytes = fs::read(src.join(rel))
            .map_err(|e| Error::Storage(format!("backup file {rel} unreadable: {e}")))?;
        if bytes.len() as u64 != *size || crc32(&bytes) != *hash {
            return Err(Error::Corrupt(format!("backup file {rel} fails verification")));
        }
        contents.push((rel.clone(), bytes));
    }
    fs::create_dir_all(data_dir)?;
    for (rel, bytes) in &contents {
        copy_into(data_dir, rel, bytes)?;
    }
    Ok(contents.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(dir: &Path) -> (Vec<String>, u64) {
        fs::create_dir_all(dir.join("node0/ros")).unwrap();
        fs::write(dir.join("node0/ros/c1_a.dat"), b"aaaa").unwrap();
        fs::write(dir.join("node0/ros/c1_a.idx"), b"iiii").unwrap();
        fs::write(dir.join("catalog.log"), b"record1\nrecord2\n").unwrap();
        (
            vec!["node0/ros/c1_a.dat".into(), "node0/ros/c1_a.idx".into()],
            16,
        )
    }

    #[test]
    fn backup_restore_roundtrip() {
        let data = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        let (files, log_len) = setup(data.path());
        let report =
            backup_snapshot(data.path(), dest.path(), &files, "catalog.log", log_len, false)
                .unwrap();
        assert_eq!(report.files_copied, 2);
        assert_eq!(report.files_total, 3);

        let restored = tempfile::tempdir().unwrap();
        let n = restore_snapshot(dest.path(), restored.path()).unwrap();
        assert_eq!(n, 3);
        assert_eq!(fs::read(restored.path().join("node0/ros/c1_a.dat")).unwrap(), b"aaaa");
        assert_eq!(fs::read(restored.path().join("catalog.log")).unwrap(), b"record1\nrecord2\n");
    }

    #[test]
    fn unchanged_incremental_copies_nothing() {
        let data = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        let (files, log_len) = setup(data.path());
        backup_snapshot(data.path(), dest.path(), &files, "catalog.log", log_len, true).unwrap();
        let second =
            backup_snapshot(data.path(), dest.path(), &files, "catalog.log", log_len, true)
                .unwrap();
        assert_eq!(second.files_copied, 0);
        assert_eq!(second.bytes_copied, 0);
    }

    #[test]
    fn incremental_copies_only_new_files() {
        let data = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        let (mut files, log_len) = setup(data.path());
        backup_snapshot(data.path(), dest.path(), &files, "catalog.log", log_len, true).unwrap();
        fs::write(data.path().join("node0/ros/c2_a.dat"), b"bbbbbb").unwrap();
        files.push("node0/ros/c2_a.dat".into());
        let report =
            backup_snapshot(data.path(), dest.path(), &files, "catalog.log", log_len, true)
                .unwrap();
        assert_eq!(report.files_copied, 1);
        assert_eq!(report.bytes_copied, 6);
    }

    #[test]
    fn log_prefix_excludes_later_records() {
        let data = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        let (files, _) = setup(data.path());
        // Snapshot taken when the log was only 8 bytes long.
        backup_snapshot(data.path(), dest.path(), &files, "catalog.log", 8, false).unwrap();
        assert_eq!(fs::read(dest.path().join("catalog.log")).unwrap(), b"record1\n");
    }

    #[test]
    fn restore_detects_corruption() {
        let data = tempfile::tempdir().unwrap();
        let dest = tempfile::tempdir().unwrap();
        let (files, log_len) = setup(data.path());
        backup_snapshot(data.path(), dest.path(), &files, "catalog.log", log_len, false).unwrap();
        fs::write(dest.path().join("node0/ros/c1_a.dat"), b"aaXa").unwrap();
        let restored = tempfile::tempdir().unwrap();
        let err = restore_snapshot(dest.path(), restored.path());
        assert!(err.is_err());
        // Nothing partially restored.
        assert!(!restored.path().join("catalog.log").exists());
    }
}
