pub mod advisor;
pub mod firewall;
pub mod orgmap;
pub mod sniff;
pub mod snitch;
pub mod whatif;
