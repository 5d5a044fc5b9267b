use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed gid `{0}`: expected 16 colon-separated hex bytes")]
pub struct GidParseError(pub String);

/// 16-byte global endpoint address. Text form is `xx:xx:...:xx`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Gid(pub [u8; 16]);

impl Gid {
    pub const fn new(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    /// Link-local style gid for simulated host `host`, device `dev`.
    pub fn for_device(host: u32, dev: u32) -> Self {
        let mut b = [0u8; 16];
        b[0] = 0xfe;
        b[1] = 0x80;
        b[8..12].copy_from_slice(&host.to_be_bytes());
        b[12..16].copy_from_slice(&dev.to_be_bytes());
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// Stable 64-bit digest, used as an argument to path resolution.
    pub fn digest(&self) -> i64 {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.0 {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h as i64
    }
}

impl fmt::Display for Gid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(":")?;
            }
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Gid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Gid({self})")
    }
}

impl FromStr for Gid {
    type Err = GidParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || GidParseError(s.to_owned());
        let mut out = [0u8; 16];
        let mut n = 0;
        for part in s.split(':') {
            if n == 16 || part.len() != 2 {
                return Err(err());
            }
            out[n] = u8::from_str_radix(part, 16).map_err(|_| err())?;
            n += 1;
        }
        if n != 16 {
            return Err(err());
        }
        Ok(Self(out))
    }
}

impl Serialize for Gid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Gid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
