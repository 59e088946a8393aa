//! Edge/server co-inference over TCP.
//!
//! The edge runs the network prefix and sends the bit-packed spikes of the
//! split point in one [`Frame`]; the server runs the suffix and answers with
//! a logits frame (or an error frame). Frames are self-delimiting:
//!
//! ```text
//! magic[4] version:u8 arch_id:u16 split:u8 T:u8 c:u16 w:u16 h:u16 payload_len:u32
//! payload[payload_len] crc32:u32
//! ```
//!
//! All integers are little-endian; the CRC covers header and payload.

mod client;
mod frame;
mod server;

pub use client::{edge_infer, Connection, SessionStats};
pub use frame::{read_frame, write_frame, ErrorCode, Frame, FrameKind, CHECKSUM_LEN, HEADER_LEN, MAX_PAYLOAD, VERSION};
pub use server::{serve, ServerHandle};

/// Environment variable consulted when no endpoint is given.
pub const ENDPOINT_ENV: &str = "SPIKESPLIT_ENDPOINT";
pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7878";

/// Explicit endpoint, else `$SPIKESPLIT_ENDPOINT`, else the default.
pub fn resolve_endpoint(explicit: Option<&str>) -> String {
    explicit
        .map(str::to_string)
        .or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_ENDPOINT.to_string())
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("protocol version {got}, expected {expected}")]
    VersionMismatch { got: u8, expected: u8 },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    /// Declared payload larger than [`MAX_PAYLOAD`]; the stream cannot be resynchronized.
    #[error("payload length {0} exceeds the limit")]
    Oversized(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    /// The transport failed; the request may be retried on a new connection.
    #[error("connection lost: {0}")]
    ConnectionLost(#[source] std::io::Error),
    /// The peer answered with an error frame.
    #[error("server error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("unexpected frame: {0}")]
    Unexpected(String),
    #[error(transparent)]
    Core(#[from] spikesplit_core::Error),
}

impl WireError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::ConnectionLost(_))
    }

    /// Code carried in an error frame describing this error.
    pub fn code(&self) -> ErrorCode {
        match self {
            Self::BadMagic(_) => ErrorCode::BadMagic,
            Self::VersionMismatch { .. } => ErrorCode::VersionMismatch,
            Self::LengthMismatch(_) | Self::Oversized(_) => ErrorCode::LengthMismatch,
            Self::ChecksumMismatch { .. } => ErrorCode::ChecksumMismatch,
            Self::Remote { code, .. } => *code,
            Self::ConnectionLost(_) | Self::Unexpected(_) | Self::Core(_) => ErrorCode::Protocol,
        }
    }
}

pub type Result<T, E = WireError> = std::result::Result<T, E>;
