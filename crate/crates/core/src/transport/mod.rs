//! Datagram protocol and relay.
//!
//! One [`SignalPacket`] per UDP datagram. Clients JOIN a relay
//! [`server::Server`], which forwards every data packet it receives to all
//! other clients, dropping anything stale. On the client side relayed
//! streams surface in a [`crate::router::Router`] as `(type, peer, Network)`
//! streams, and everything the client sends is echoed locally as
//! `(type, self, Local)`.
//!
//! Control payloads (signal type `Control`): JOIN is empty; JOIN-ACK and
//! LEAVE both carry a 2-byte little-endian user id. A client tells them apart
//! by the id: its own id can only be an ACK, since nobody is told about their
//! own departure.

pub mod client;
pub mod packet;
pub mod server;

use std::io;
use std::net::UdpSocket;

use thiserror::Error;

pub use client::{Client, ClientConfig, SessionState, SessionStats};
pub use packet::{frame_packet, parse_packet, PacketError, SignalPacket, SignalType};
pub use server::{Server, ServerConfig, ServerHandle, ServerStats, ServerStatsSnapshot};

use crate::router::RouterError;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("socket error: {0}")]
    Io(#[from] io::Error),
    #[error("no JOIN-ACK from {0} after retries")]
    ConnectTimeout(String),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error("{0:?} packets cannot be sent as data")]
    InvalidSignalType(SignalType),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub(crate) fn control_id(payload: &[u8]) -> Option<u16> {
    (payload.len() == 2).then(|| u16::from_le_bytes([payload[0], payload[1]]))
}

/// Best-effort enlargement of the kernel socket buffers; a relay fanning
/// out to dozens of peers can outrun the default.
pub(crate) fn tune_socket(socket: &UdpSocket, bytes: usize) {
    #[cfg(unix)]
    {
        use std::os::fd::AsRawFd;
        let v = bytes as libc::c_int;
        for opt in [libc::SO_RCVBUF, libc::SO_SNDBUF] {
            // SAFETY: setsockopt reads an int-sized option value from a valid pointer.
            unsafe {
                libc::setsockopt(
                    socket.as_raw_fd(),
                    libc::SOL_SOCKET,
                    opt,
                    &v as *const libc::c_int as *const libc::c_void,
                    std::mem::size_of::<libc::c_int>() as libc::socklen_t,
                );
            }
        }
    }
    #[cfg(not(unix))]
    let _ = (socket, bytes);
}
