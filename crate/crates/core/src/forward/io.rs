//! Spectra serialization.
//!
//! CSV: header `station_id,direction,freq_hz,re,im`, one row per station,
//! direction (NS, EW, UD) and frequency sample in that nesting order. Numbers
//! are written in Rust's shortest round-trip form (`{:e}` for re/im, `{}` for
//! frequency), so reading back is bit-exact. Lines starting with `#` are
//! comments.
//!
//! Binary (`.wfsp`), all integers and floats little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `WFSP` |
//! | 2 | version, currently 1 |
//! | 2 | reserved, 0 |
//! | 4 | station count `n` (u32) |
//! | 4 | frequency count `i` (u32) |
//! | 8 | `f_max` (f64) |
//! | per station | id length (u32) then UTF-8 bytes |
//! | 8 * 6 * i * n | flattened spectra (f64), station-major |

use std::io::{Read, Write};

use num_complex::Complex64;

use super::{Direction, FrequencyGrid, StationSpectrum, WavefieldSpectra};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"WFSP";
pub const BINARY_VERSION: u16 = 1;
pub const CSV_HEADER: [&str; 5] = ["station_id", "direction", "freq_hz", "re", "im"];

pub fn write_csv<W: Write>(spectra: &WavefieldSpectra, preamble: Option<&str>, mut out: W) -> Result<()> {
    if let Some(p) = preamble {
        for line in p.lines() {
            writeln!(out, "# {line}").map_err(|e| Error::io("<csv>", e))?;
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let freqs = spectra.grid.frequencies();
    for (id, st) in spectra.station_ids.iter().zip(&spectra.stations) {
        for d in Direction::ALL {
            for (k, z) in st.component(d).iter().enumerate() {
                w.write_record([
                    id.as_str(),
                    d.as_str(),
                    &format!("{}", freqs[k]),
                    &format!("{:e}", z.re),
                    &format!("{:e}", z.im),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<WavefieldSpectra> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Format(format!("unexpected spectra header {header:?}")));
    }
    // id -> per direction list of (freq, value), in file order.
    let mut ids: Vec<String> = Vec::new();
    let mut rows: Vec<[Vec<(f64, Complex64)>; 3]> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("bad number {:?}: {e}", &rec[i])))
        };
        let id = &rec[0];
        let d = Direction::parse(&rec[1])
            .ok_or_else(|| Error::Format(format!("bad direction {:?}", &rec[1])))?;
        let j = match ids.last() {
            Some(last) if last == id => ids.len() - 1,
            _ => {
                if ids.iter().any(|x| x == id) {
                    return Err(Error::Format(format!("station {id:?} rows are not contiguous")));
                }
                ids.push(id.to_string());
                rows.push(Default::default());
                ids.len() - 1
            }
        };
        rows[j][d.index()].push((parse(2)?, Complex64::new(parse(3)?, parse(4)?)));
    }
    let first = rows
        .first()
        .ok_or_else(|| Error::Format("spectra CSV has no rows".into()))?;
    let freqs: Vec<f64> = first[0].iter().map(|(f, _)| *f).collect();
    let count = freqs.len();
    let grid = FrequencyGrid::new(count, *freqs.last().unwrap_or(&0.0))
        .map_err(|e| Error::Format(e.to_string()))?;
    if freqs != grid.frequencies() {
        return Err(Error::Format("frequencies are not an evenly spaced DC-based grid".into()));
    }
    let mut stations = Vec::with_capacity(rows.len());
    for per_dir in rows {
        let mut s = StationSpectrum::zeros(count);
        for (c, list) in per_dir.into_iter().enumerate() {
            if list.len() != count || list.iter().zip(&freqs).any(|((f, _), g)| f != g) {
                return Err(Error::Format("inconsistent frequency rows".into()));
            }
            s.components[c] = list.into_iter().map(|(_, z)| z).collect();
        }
        stations.push(s);
    }
    WavefieldSpectra::new(grid, ids, stations)
}

pub fn write_binary<W: Write>(spectra: &WavefieldSpectra, mut out: W) -> Result<()> {
    let io = |e| Error::io("<binary>", e);
    let mut buf = Vec::with_capacity(32 + spectra.flat_len() * 8);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    let n = u32::try_from(spectra.station_count()).map_err(|_| Error::Format("too many stations".into()))?;
    let i = u32::try_from(spectra.grid.count).map_err(|_| Error::Format("grid too large".into()))?;
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&i.to_le_bytes());
    buf.extend_from_slice(&spectra.grid.f_max.to_le_bytes());
    for id in &spectra.station_ids {
        let len = u32::try_from(id.len()).map_err(|_| Error::Format("station id too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for x in spectra.flatten() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&buf).map_err(io)
}

pub fn read_binary<R: Read>(mut input: R) -> Result<WavefieldSpectra> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io("<binary>", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != BINARY_MAGIC {
        return Err(Error::Format("not a spectra container (bad magic)".into()));
    }
    let version = u16::from_le_bytes(cur.array()?);
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported spectra container version {version}")));
    }
    let _reserved = u16::from_le_bytes(cur.array()?);
    let n = u32::from_le_bytes(cur.array()?) as usize;
    let count = u32::from_le_bytes(cur.array()?) as usize;
    let f_max = f64::from_le_bytes(cur.array()?);
    let grid = FrequencyGrid::new(count, f_max).map_err(|e| Error::Format(e.to_string()))?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32::from_le_bytes(cur.array()?) as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Format(format!("station id is not UTF-8: {e}")))?;
        ids.push(id.to_string());
    }
    let total = grid.entries_per_station() * n;
    let flat: Vec<f64> = (0..total)
        .map(|_| cur.array().map(f64::from_le_bytes))
        .collect::<Result<_>>()?;
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after spectra payload".into()));
    }
    WavefieldSpectra::from_flat(grid, ids, &flat)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated spectra container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{ForwardModel, ReferenceModel};
    use crate::model::Scenario;

    fn sample() -> WavefieldSpectra {
        let s = Scenario::hypocenter2();
        let few = s.stations.subset(&[0, 7, 3]).unwrap();
        ReferenceModel::default()
            .simulate(&s.layer_model(), &s.source, &few, &FrequencyGrid::new(21, 5.0).unwrap())
            .unwrap()
    }

    #[test]
    fn csv_roundtrip_is_bit_exact() {
        let w = sample();
        let mut buf = Vec::new();
        write_csv(&w, Some("tool test\nsecond line"), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# tool test\n# second line\nstation_id,direction,freq_hz,re,im\n"));
        assert_eq!(text.lines().count(), 3 + 3 * 3 * 21);
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn binary_roundtrip_and_layout() {
        let w = sample();
        let mut buf = Vec::new();
        write_binary(&w, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"WFSP");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 21);
        assert_eq!(f64::from_le_bytes(buf[16..24].try_into().unwrap()), 5.0);
        let ids_len: usize = w.station_ids.iter().map(|s| 4 + s.len()).sum();
        assert_eq!(buf.len(), 24 + ids_len + 8 * 6 * 21 * 3);
        assert_eq!(read_binary(buf.as_slice()).unwrap(), w);
        assert!(read_binary(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_binary(bad.as_slice()).is_err());
    }
}
