//! Recordings never leave the device's network: the listener may only bind
//! to loopback or private addresses.

use std::net::{IpAddr, SocketAddr};

/// True for loopback, RFC 1918, IPv4 link-local, IPv6 unique-local and IPv6
/// link-local addresses.
pub fn is_local(ip: IpAddr) -> bool {
    match ip {
        IpAddr::V4(v4) => v4.is_loopback() || v4.is_private() || v4.is_link_local(),
        IpAddr::V6(v6) => {
            if let Some(v4) = v6.to_ipv4_mapped() {
                return is_local(IpAddr::V4(v4));
            }
            let first = v6.segments()[0];
            v6.is_loopback() || (first & 0xfe00) == 0xfc00 || (first & 0xffc0) == 0xfe80
        }
    }
}

/// Rejects wildcard and public bind addresses.
pub fn check_bind(addr: SocketAddr) -> Result<(), String> {
    if addr.ip().is_unspecified() {
        return Err(format!(
            "{addr} listens on every interface; bind to a loopback or private address"
        ));
    }
    if !is_local(addr.ip()) {
        return Err(format!("{addr} is not a loopback or private address"));
    }
    Ok(())
}
