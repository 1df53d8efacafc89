//! Real OS sockets behind [`UpstreamNetwork`], driven by a non-blocking poller.

use super::upstream::{
    ConnectFailure, DatagramId, StreamId, UpstreamError, UpstreamEvent, UpstreamNetwork,
};
use crate::time::Timestamp;
use mio::net::{TcpStream, UdpSocket};
use mio::{Events, Interest, Poll, Token};
use std::collections::{HashMap, VecDeque};
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, SocketAddrV4};
use std::time::Duration;

struct StreamSlot {
    sock: TcpStream,
    connected: bool,
    eof_reported: bool,
}

pub struct SocketUpstream {
    poll: Poll,
    events: Events,
    next_id: u64,
    streams: HashMap<u64, StreamSlot>,
    sockets: HashMap<u64, UdpSocket>,
    ready: VecDeque<UpstreamEvent>,
}

impl SocketUpstream {
    pub fn new() -> std::io::Result<Self> {
        Ok(SocketUpstream {
            poll: Poll::new()?,
            events: Events::with_capacity(256),
            next_id: 1,
            streams: HashMap::new(),
            sockets: HashMap::new(),
            ready: VecDeque::new(),
        })
    }

    /// Blocks up to `timeout` for socket readiness and queues the resulting events.
    pub fn wait(&mut self, timeout: Option<Duration>) -> std::io::Result<()> {
        if !self.ready.is_empty() {
            return Ok(());
        }
        self.poll.poll(&mut self.events, timeout)?;
        let tokens: Vec<_> = self
            .events
            .iter()
            .map(|e| (e.token().0 as u64, e.is_readable() || e.is_read_closed(), e.is_writable(), e.is_error()))
            .collect();
        for (id, readable, writable, error) in tokens {
            if let Some(slot) = self.streams.get_mut(&id) {
                let stream = StreamId(id);
                if !slot.connected {
                    if !(writable || error || readable) {
                        continue;
                    }
                    let failed = matches!(slot.sock.take_error(), Ok(Some(_)) | Err(_))
                        || slot.sock.peer_addr().is_err();
                    if failed {
                        self.ready.push_back(UpstreamEvent::Connected {
                            stream,
                            result: Err(ConnectFailure::Refused),
                        });
                        continue;
                    }
                    slot.connected = true;
                    self.ready.push_back(UpstreamEvent::Connected { stream, result: Ok(()) });
                } else if writable {
                    self.ready.push_back(UpstreamEvent::Writable { stream });
                }
                if readable && slot.connected {
                    self.ready.push_back(UpstreamEvent::Readable { stream });
                }
            } else if let Some(sock) = self.sockets.get(&id) {
                let mut buf = [0u8; 65535];
                loop {
                    match sock.recv_from(&mut buf) {
                        Ok((n, SocketAddr::V4(from))) => self.ready.push_back(UpstreamEvent::Datagram {
                            socket: DatagramId(id),
                            from,
                            payload: buf[..n].to_vec(),
                        }),
                        Ok(_) => {}
                        Err(_) => break,
                    }
                }
            }
        }
        Ok(())
    }
}

impl UpstreamNetwork for SocketUpstream {
    fn open_stream(&mut self, _now: Timestamp, dst: SocketAddrV4) -> Result<StreamId, UpstreamError> {
        let mut sock = TcpStream::connect(SocketAddr::V4(dst))?;
        let id = self.next_id;
        self.next_id += 1;
        self.poll
            .registry()
            .register(&mut sock, Token(id as usize), Interest::READABLE | Interest::WRITABLE)?;
        sock.set_nodelay(true).ok();
        self.streams.insert(
            id,
            StreamSlot {
                sock,
                connected: false,
                eof_reported: false,
            },
        );
        Ok(StreamId(id))
    }

    fn send(&mut self, _now: Timestamp, stream: StreamId, data: &[u8]) -> Result<usize, UpstreamError> {
        let slot = self.streams.get_mut(&stream.0).ok_or(UpstreamError::UnknownHandle)?;
        if !slot.connected {
            return Err(UpstreamError::NotConnected);
        }
        match slot.sock.write(data) {
            Ok(n) => Ok(n),
            Err(e) if e.kind() == ErrorKind::WouldBlock => Ok(0),
            Err(e) => Err(e.into()),
        }
    }

    fn recv(&mut self, _now: Timestamp, stream: StreamId, max: usize) -> Result<Vec<u8>, UpstreamError> {
        let slot = self.streams.get_mut(&stream.0).ok_or(UpstreamError::UnknownHandle)?;
        let mut out = vec![0u8; max];
        let mut n = 0;
        while n < max {
            match slot.sock.read(&mut out[n..]) {
                Ok(0) => {
                    if !slot.eof_reported {
                        slot.eof_reported = true;
                        self.ready.push_back(UpstreamEvent::PeerClosed { stream });
                    }
                    break;
                }
                Ok(k) => n += k,
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == ErrorKind::ConnectionReset => {
                    self.ready.push_back(UpstreamEvent::PeerReset { stream });
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        out.truncate(n);
        Ok(out)
    }

    fn shutdown_write(&mut self, _now: Timestamp, stream: StreamId) -> Result<(), UpstreamError> {
        let slot = self.streams.get_mut(&stream.0).ok_or(UpstreamError::UnknownHandle)?;
        slot.sock.shutdown(Shutdown::Write).or_else(|e| match e.kind() {
            ErrorKind::NotConnected => Ok(()),
            _ => Err(e),
        })?;
        Ok(())
    }

    fn close_stream(&mut self, _now: Timestamp, stream: StreamId) {
        if let Some(mut slot) = self.streams.remove(&stream.0) {
            let _ = self.poll.registry().deregister(&mut slot.sock);
        }
    }

    fn abort_stream(&mut self, now: Timestamp, stream: StreamId) {
        if let Some(slot) = self.streams.get(&stream.0) {
            let _ = slot.sock.shutdown(Shutdown::Both);
        }
        self.close_stream(now, stream);
    }

    fn open_datagram(&mut self, _now: Timestamp) -> Result<DatagramId, UpstreamError> {
        let mut sock = UdpSocket::bind("0.0.0.0:0".parse().expect("valid"))?;
        let id = self.next_id;
        self.next_id += 1;
        self.poll
            .registry()
            .register(&mut sock, Token(id as usize), Interest::READABLE)?;
        self.sockets.insert(id, sock);
        Ok(DatagramId(id))
    }

    fn send_to(
        &mut self,
        _now: Timestamp,
        socket: DatagramId,
        dst: SocketAddrV4,
        payload: &[u8],
    ) -> Result<(), UpstreamError> {
        let sock = self.sockets.get(&socket.0).ok_or(UpstreamError::UnknownHandle)?;
        match sock.send_to(payload, SocketAddr::V4(dst)) {
            Ok(_) => Ok(()),
            Err(e) if e.kind() == ErrorKind::WouldBlock => Ok(()),
            Err(e) => Err(e.into()),
        }
    }

    fn close_datagram(&mut self, _now: Timestamp, socket: DatagramId) {
        if let Some(mut sock) = self.sockets.remove(&socket.0) {
            let _ = self.poll.registry().deregister(&mut sock);
        }
    }

    fn active_handle_count(&self) -> usize {
        self.streams.len() + self.sockets.len()
    }

    fn poll_event(&mut self, _now: Timestamp) -> Option<UpstreamEvent> {
        if self.ready.is_empty() {
            let _ = self.wait(Some(Duration::ZERO));
        }
        self.ready.pop_front()
    }

    fn next_event_at(&self) -> Option<Timestamp> {
        None
    }
}
