use std::path::PathBuf;

/// Everything the file formats and the command line can fail with.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported {what} version {found} (this build reads {supported})")]
    Version { what: &'static str, found: u32, supported: u32 },
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("truncated {0}")]
    Truncated(String),
    #[error("unknown section {name:?} in version {version} checkpoint")]
    UnknownSection { name: String, version: u32 },
    #[error("malformed {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Core(#[from] vqdd_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for this error.
    ///
    /// | code | meaning |
    /// |------|---------|
    /// | 1 | internal or numerical failure |
    /// | 2 | usage: bad or missing flag |
    /// | 3 | input file missing |
    /// | 4 | shape or category-count mismatch |
    /// | 5 | corrupt or unreadable input file |
    /// | 6 | output could not be written |
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::NotFound(_) => 3,
            Error::Shape(_) | Error::Core(vqdd_core::Error::Shape(_)) => 4,
            Error::Read { .. }
            | Error::BadMagic { .. }
            | Error::Version { .. }
            | Error::Checksum(_)
            | Error::Truncated(_)
            | Error::UnknownSection { .. }
            | Error::Format(_) => 5,
            Error::Write { .. } => 6,
            Error::Core(_) => 1,
        }
    }

    /// Short machine-readable tag printed in front of the message.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::NotFound(_) => "not-found",
            Error::Read { .. } => "read",
            Error::Write { .. } => "write",
            Error::BadMagic { .. } => "bad-magic",
            Error::Version { .. } => "version",
            Error::Checksum(_) => "checksum",
            Error::Truncated(_) => "truncated",
            Error::UnknownSection { .. } => "unknown-section",
            Error::Format(_) => "format",
            Error::Shape(_) | Error::Core(vqdd_core::Error::Shape(_)) => "shape",
            Error::Core(_) => "internal",
        }
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.to_path_buf())
        } else {
            Error::Read { path: path.to_path_buf(), source }
        }
    })
}

/// Writes through a temporary file in the same directory, then renames.
pub(crate) fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let wrap = |source| Error::Write { path: path.to_path_buf(), source };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => std::path::Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
    tmp.write_all(bytes).map_err(wrap)?;
    tmp.as_file().sync_all().map_err(wrap)?;
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}
