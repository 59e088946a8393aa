use std::net::{TcpStream, ToSocketAddrs};

use spikesplit_core::network::SpikingNetwork;
use spikesplit_core::spike::SpikeTensor;
use spikesplit_core::Tensor;

use crate::frame::{read_frame, write_frame, Frame, FrameKind, CHECKSUM_LEN, HEADER_LEN};
use crate::{Result, WireError};

/// Transmission accounting for one client session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionStats {
    pub frames_sent: u64,
    /// Spike payload bytes only.
    pub payload_bytes_total: u64,
    /// Header and checksum bytes of sent frames.
    pub header_overhead_bytes: u64,
    pub round_trips: u64,
}

impl SessionStats {
    pub fn merge(&mut self, other: &SessionStats) {
        self.frames_sent += other.frames_sent;
        self.payload_bytes_total += other.payload_bytes_total;
        self.header_overhead_bytes += other.header_overhead_bytes;
        self.round_trips += other.round_trips;
    }
}

/// Synchronous request/response connection to a server.
#[derive(Debug)]
pub struct Connection {
    stream: TcpStream,
    pub stats: SessionStats,
}

impl Connection {
    pub fn connect(endpoint: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(endpoint).map_err(WireError::ConnectionLost)?;
        stream.set_nodelay(true).map_err(WireError::ConnectionLost)?;
        Ok(Self {
            stream,
            stats: SessionStats::default(),
        })
    }

    /// Sends one frame and waits for the reply.
    pub fn request(&mut self, frame: &Frame) -> Result<Frame> {
        write_frame(&mut self.stream, frame)?;
        self.stats.frames_sent += 1;
        self.stats.payload_bytes_total += frame.payload.len() as u64;
        self.stats.header_overhead_bytes += (HEADER_LEN + CHECKSUM_LEN) as u64;
        let reply = read_frame(&mut self.stream)?.ok_or_else(|| {
            WireError::ConnectionLost(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "server closed the connection",
            ))
        })?;
        self.stats.round_trips += 1;
        Ok(reply)
    }
}

/// Runs the prefix for a single image, ships the split-point spikes and
/// returns the server's logits.
pub fn edge_infer(
    image: &Tensor<f32>,
    net: &SpikingNetwork<f32>,
    split: usize,
    conn: &mut Connection,
) -> Result<Vec<f32>> {
    let spikes = SpikeTensor::pack(&net.forward_prefix(image, split)?)?;
    let frame = Frame::spikes(net.arch.arch_id, split, &spikes)?;
    let reply = conn.request(&frame)?;
    if reply.kind == FrameKind::Logits && reply.dims.0 as usize != net.arch.classes {
        return Err(WireError::Unexpected(format!(
            "{} logits, expected {}",
            reply.dims.0, net.arch.classes
        )));
    }
    reply.to_logits()
}
