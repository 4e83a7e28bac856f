//! Geohash encoding and the per-item geohash target.

use std::fmt;

/// The 32-symbol geohash alphabet.
pub const ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
/// Pad symbol used for positions an item cannot resolve.
pub const PAD: char = '*';
/// Classes per position: 32 symbols plus the pad.
pub const NUM_CLASSES: usize = 33;
pub const DEFAULT_CHARS: usize = 6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("geohash length must be at least 1")]
    ZeroLength,
    #[error("invalid geohash code {0:?}")]
    InvalidCode(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatLon {
    lat: f64,
    lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Fixed-length geohash over the alphabet plus trailing `*` pads.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GeohashCode(String);

impl GeohashCode {
    /// Validates alphabet membership and pad closure.
    pub fn parse(s: &str) -> Result<Self, GeoError> {
        let mut padded = false;
        for ch in s.chars() {
            if ch == PAD {
                padded = true;
            } else if padded || class_of(ch).is_none() {
                return Err(GeoError::InvalidCode(s.to_string()));
            }
        }
        if s.is_empty() {
            return Err(GeoError::InvalidCode(s.to_string()));
        }
        Ok(Self(s.to_string()))
    }

    pub fn all_pad(n_chars: usize) -> Self {
        Self(PAD.to_string().repeat(n_chars))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Class index per position; `*` maps to 32.
    pub fn classes(&self) -> Vec<usize> {
        self.0
            .chars()
            .map(|c| class_of(c).expect("validated on construction"))
            .collect()
    }
}

impl fmt::Display for GeohashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Class index of a geohash character, with `*` as the last class.
pub fn class_of(c: char) -> Option<usize> {
    if c == PAD {
        return Some(NUM_CLASSES - 1);
    }
    ALPHABET.iter().position(|&a| a as char == c)
}

/// Standard geohash; a coordinate on a midpoint goes to the upper half.
pub fn geohash_encode(p: LatLon, n_chars: usize) -> Result<GeohashCode, GeoError> {
    if n_chars == 0 {
        return Err(GeoError::ZeroLength);
    }
    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let mut out = String::with_capacity(n_chars);
    let mut even = true;
    for _ in 0..n_chars {
        let mut idx = 0usize;
        for _ in 0..5 {
            let (v, lo, hi) = if even {
                (p.lon, &mut lon_lo, &mut lon_hi)
            } else {
                (p.lat, &mut lat_lo, &mut lat_hi)
            };
            let mid = (*lo + *hi) / 2.0;
            idx <<= 1;
            if v >= mid {
                idx |= 1;
                *lo = mid;
            } else {
                *hi = mid;
            }
            even = !even;
        }
        out.push(ALPHABET[idx] as char);
    }
    Ok(GeohashCode(out))
}

/// Longest prefix shared by every code (empty for an empty list).
pub fn common_prefix(codes: &[GeohashCode]) -> String {
    let Some(first) = codes.first() else {
        return String::new();
    };
    let mut n = first.len();
    for c in &codes[1..] {
        n = n.min(
            first
                .0
                .bytes()
                .zip(c.0.bytes())
                .take_while(|(a, b)| a == b)
                .count(),
        );
    }
    first.0[..n].to_string()
}

/// Geohash target for an item from the coordinates of the geography it names:
/// none gives all pads, one gives its code, several give their longest common
/// prefix padded out with `*`.
pub fn item_geohash_target(entities: &[LatLon], n_chars: usize) -> Result<GeohashCode, GeoError> {
    if n_chars == 0 {
        return Err(GeoError::ZeroLength);
    }
    match entities {
        [] => Ok(GeohashCode::all_pad(n_chars)),
        [one] => geohash_encode(*one, n_chars),
        many => {
            let codes = many
                .iter()
                .map(|p| geohash_encode(*p, n_chars))
                .collect::<Result<Vec<_>, _>>()?;
            let mut s = common_prefix(&codes);
            while s.len() < n_chars {
                s.push(PAD);
            }
            Ok(GeohashCode(s))
        }
    }
}
