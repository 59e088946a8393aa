use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use spikesplit_core::network::SpikingNetwork;

use crate::frame::{read_frame, write_frame, ErrorCode, Frame, FrameKind};
use crate::{Result, WireError};

/// A running server; dropping it does not stop it, call [`shutdown`](Self::shutdown).
#[derive(Debug)]
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections. Open connections finish on their own.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the accept loop ends.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

/// Binds `endpoint` (port 0 picks a free port) and serves `net` from a
/// background thread, one thread per connection.
pub fn serve(net: Arc<SpikingNetwork<f32>>, endpoint: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(endpoint).map_err(WireError::ConnectionLost)?;
    let addr = listener.local_addr().map_err(WireError::ConnectionLost)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let accept = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let net = Arc::clone(&net);
            std::thread::spawn(move || {
                let _ = handle_connection(stream, &net);
            });
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        accept: Some(accept),
    })
}

fn handle_connection(mut stream: TcpStream, net: &SpikingNetwork<f32>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    loop {
        let reply = match read_frame(&mut stream) {
            Ok(None) => return Ok(()),
            Ok(Some(frame)) => respond(&frame, net).unwrap_or_else(|e| Frame::error(e.code(), &e.to_string())),
            Err(WireError::ConnectionLost(e)) => return Err(e),
            Err(e @ WireError::Oversized(_)) => {
                let _ = write_frame(&mut stream, &Frame::error(e.code(), &e.to_string()));
                return Ok(());
            }
            Err(e) => Frame::error(e.code(), &e.to_string()),
        };
        if write_frame(&mut stream, &reply).is_err() {
            return Ok(());
        }
    }
}

fn respond(frame: &Frame, net: &SpikingNetwork<f32>) -> Result<Frame> {
    if frame.kind != FrameKind::Spikes {
        return Err(WireError::Unexpected(format!("server accepts spike frames, got {:?}", frame.kind)));
    }
    if frame.arch_id != net.arch.arch_id {
        return Err(WireError::Remote {
            code: ErrorCode::UnknownArch,
            message: format!("arch id {} not served (serving {})", frame.arch_id, net.arch.arch_id),
        });
    }
    let split = frame.split_point as usize;
    if net.arch.check_split(split).is_err() {
        return Err(WireError::Remote {
            code: ErrorCode::SplitOutOfRange,
            message: format!("split {split} outside 1..={}", net.arch.num_splits()),
        });
    }
    let expected = net.transmitted_shape(split, 1)?;
    if frame.spike_shape() != expected {
        return Err(WireError::Unexpected(format!(
            "split {split} expects {expected}, frame declares {}",
            frame.spike_shape()
        )));
    }
    let logits = net.forward_suffix(&frame.spike_values()?, split).map_err(|e| WireError::Remote {
        code: ErrorCode::Internal,
        message: e.to_string(),
    })?;
    Frame::logits(net.arch.arch_id, frame.split_point, frame.timesteps, &logits)
}
