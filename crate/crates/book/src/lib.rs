//! Runs the code blocks in the guide under `book/` as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/packets.md")]
pub mod packets {}

#[doc = include_str!("../../../book/src/engine.md")]
pub mod engine {}

#[doc = include_str!("../../../book/src/plugins.md")]
pub mod plugins {}

#[doc = include_str!("../../../book/src/firewall.md")]
pub mod firewall {}

#[doc = include_str!("../../../book/src/snitch.md")]
pub mod snitch {}

#[doc = include_str!("../../../book/src/whatif.md")]
pub mod whatif {}

#[doc = include_str!("../../../book/src/advisor.md")]
pub mod advisor {}

#[doc = include_str!("../../../book/src/replay.md")]
pub mod replay {}

#[doc = include_str!("../../../book/src/benchmark.md")]
pub mod benchmark {}
