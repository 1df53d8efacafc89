//! Network-side boundary: the sockets the engine opens on behalf of apps.

use crate::time::Timestamp;
use serde::{Deserialize, Serialize};
use std::net::SocketAddrV4;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DatagramId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectFailure {
    Refused,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpstreamEvent {
    /// Fires exactly once per stream.
    Connected {
        stream: StreamId,
        result: Result<(), ConnectFailure>,
    },
    /// Bytes can be pulled with [`UpstreamNetwork::recv`].
    Readable { stream: StreamId },
    /// Previously refused bytes may now be accepted.
    Writable { stream: StreamId },
    /// The remote end finished sending; already-buffered bytes stay readable.
    PeerClosed { stream: StreamId },
    PeerReset { stream: StreamId },
    Datagram {
        socket: DatagramId,
        from: SocketAddrV4,
        payload: Vec<u8>,
    },
}

#[derive(Debug, Error)]
pub enum UpstreamError {
    #[error("unknown or released handle")]
    UnknownHandle,
    #[error("stream is not connected")]
    NotConnected,
    #[error("write side already shut down")]
    WriteClosed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stream and datagram sockets toward the outside network.
///
/// Completions are delivered through [`poll_event`](Self::poll_event) in a
/// single ordered queue. `active_handle_count` is opened minus released.
pub trait UpstreamNetwork {
    fn open_stream(&mut self, now: Timestamp, dst: SocketAddrV4) -> Result<StreamId, UpstreamError>;

    /// Queues bytes; returns how many were accepted.
    fn send(&mut self, now: Timestamp, stream: StreamId, data: &[u8]) -> Result<usize, UpstreamError>;

    /// Pulls up to `max` received bytes.
    fn recv(&mut self, now: Timestamp, stream: StreamId, max: usize) -> Result<Vec<u8>, UpstreamError>;

    /// Half-close: no more bytes will be sent.
    fn shutdown_write(&mut self, now: Timestamp, stream: StreamId) -> Result<(), UpstreamError>;

    /// Releases the handle after an orderly exchange.
    fn close_stream(&mut self, now: Timestamp, stream: StreamId);

    /// Releases the handle, resetting the connection.
    fn abort_stream(&mut self, now: Timestamp, stream: StreamId);

    fn open_datagram(&mut self, now: Timestamp) -> Result<DatagramId, UpstreamError>;

    fn send_to(
        &mut self,
        now: Timestamp,
        socket: DatagramId,
        dst: SocketAddrV4,
        payload: &[u8],
    ) -> Result<(), UpstreamError>;

    fn close_datagram(&mut self, now: Timestamp, socket: DatagramId);

    fn active_handle_count(&self) -> usize;

    /// Next completion due at or before `now`.
    fn poll_event(&mut self, now: Timestamp) -> Option<UpstreamEvent>;

    /// Time of the next scheduled completion, for virtual-clock drivers.
    /// Wall-clock implementations return `None`.
    fn next_event_at(&self) -> Option<Timestamp>;
}
