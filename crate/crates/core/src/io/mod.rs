//! The two I/O boundaries of the engine: the app-side packet conduit and
//! the network-side upstream.

pub mod conduit;
pub mod dns;
pub mod pcap;
pub mod sim;
pub mod socket;
pub mod trace;
pub mod upstream;

pub use conduit::{ConduitPacket, MemoryConduit, PacketConduit, ReplayConduit, Speed};
pub use sim::{Behavior, DnsTamper, SimEndpointScript, SimUpstream};
pub use socket::SocketUpstream;
pub use trace::{Direction, TraceEvent};
pub use upstream::{ConnectFailure, DatagramId, StreamId, UpstreamError, UpstreamEvent, UpstreamNetwork};
