pub mod bench;
pub mod config;
pub mod engine;
pub mod io;
pub mod live;
pub mod packet;
pub mod plugin;
pub mod plugins;
pub mod replay;
pub mod report;
pub mod time;
pub mod tracegen;
