//! EDF (1992) reader and writer.
//!
//! Layout: a 256-byte fixed header, then 256 bytes per signal holding the
//! per-signal fields column-wise, then data records of little-endian `i16`
//! samples, signal by signal. Annotation channels are not interpreted.

use log::warn;

use super::Recording;
use crate::error::{bail, Result};

const FIXED_HEADER: usize = 256;
const PER_SIGNAL: usize = 256;

struct SignalHeader {
    label: String,
    phys_min: f64,
    phys_max: f64,
    dig_min: f64,
    dig_max: f64,
    samples_per_record: usize,
}

fn field(bytes: &[u8], start: usize, len: usize, name: &str) -> Result<String> {
    let Some(raw) = bytes.get(start..start + len) else {
        bail!(Parse, "header truncated while reading {name}");
    };
    if !raw.iter().all(|b| (0x20..=0x7e).contains(b)) {
        bail!(Parse, "non-ASCII bytes in {name}");
    }
    Ok(String::from_utf8_lossy(raw).trim().to_string())
}

fn number<T: std::str::FromStr>(bytes: &[u8], start: usize, len: usize, name: &str) -> Result<T> {
    let text = field(bytes, start, len, name)?;
    match text.parse() {
        Ok(v) => Ok(v),
        Err(_) => bail!(Parse, "{name}: cannot parse {text:?}"),
    }
}

/// Parses an EDF byte stream into a recording with physical-unit samples.
///
/// Every signal must share one sampling rate. A truncated final data record
/// is dropped with a warning.
pub fn parse_edf(bytes: &[u8], subject_id: &str) -> Result<Recording> {
    if bytes.len() < FIXED_HEADER {
        bail!(Parse, "file shorter than the fixed header");
    }
    let version = field(bytes, 0, 8, "version")?;
    if version != "0" {
        bail!(Parse, "unsupported version field {version:?}");
    }
    let header_bytes: usize = number(bytes, 184, 8, "header byte count")?;
    let n_records: i64 = number(bytes, 236, 8, "number of data records")?;
    let record_duration: f64 = number(bytes, 244, 8, "data record duration")?;
    let ns: usize = number(bytes, 252, 4, "number of signals")?;

    if header_bytes != FIXED_HEADER + ns * PER_SIGNAL {
        bail!(
            Parse,
            "header byte count {header_bytes} inconsistent with {ns} signals"
        );
    }
    if bytes.len() < header_bytes {
        bail!(Parse, "file shorter than its declared header");
    }
    if !(record_duration > 0.0) {
        bail!(Parse, "record duration must be positive");
    }

    // Signal fields are stored column-wise: all labels, then all transducers, ...
    let col = |offset_per_field: usize, width: usize, i: usize| {
        FIXED_HEADER + offset_per_field * ns + i * width
    };
    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let label = field(bytes, col(0, 16, i), 16, "label")?;
        let phys_min: f64 = number(bytes, col(104, 8, i), 8, "physical minimum")?;
        let phys_max: f64 = number(bytes, col(112, 8, i), 8, "physical maximum")?;
        let dig_min: f64 = number(bytes, col(120, 8, i), 8, "digital minimum")?;
        let dig_max: f64 = number(bytes, col(128, 8, i), 8, "digital maximum")?;
        let samples_per_record: usize = number(bytes, col(216, 8, i), 8, "samples per record")?;
        if dig_max == dig_min {
            bail!(Parse, "signal {label:?}: digital maximum equals digital minimum");
        }
        if phys_max == phys_min {
            bail!(Parse, "signal {label:?}: physical maximum equals physical minimum");
        }
        if samples_per_record == 0 {
            bail!(Parse, "signal {label:?}: zero samples per record");
        }
        signals.push(SignalHeader {
            label,
            phys_min,
            phys_max,
            dig_min,
            dig_max,
            samples_per_record,
        });
    }

    let spr = signals.first().map_or(0, |s| s.samples_per_record);
    if let Some(s) = signals.iter().find(|s| s.samples_per_record != spr) {
        bail!(
            Parse,
            "signal {:?} has {} samples per record, expected {spr}; mixed rates are not supported",
            s.label,
            s.samples_per_record
        );
    }
    let fs = spr as f64 / record_duration;
    if fs.fract() != 0.0 {
        bail!(Parse, "non-integer sampling rate {fs}");
    }

    let record_bytes = 2 * spr * ns;
    let body = &bytes[header_bytes..];
    let available = body.len().checked_div(record_bytes).unwrap_or(0);
    let declared = usize::try_from(n_records).ok();
    let n_records = match declared {
        Some(n) if n <= available => n,
        Some(n) => {
            warn!("{subject_id}: header declares {n} records, only {available} complete records present");
            available
        }
        None => available,
    };
    if record_bytes > 0 && !body.len().is_multiple_of(record_bytes) {
        warn!("{subject_id}: dropping truncated final data record");
    }

    let mut data = vec![Vec::with_capacity(n_records * spr); ns];
    for r in 0..n_records {
        let rec = &body[r * record_bytes..(r + 1) * record_bytes];
        for (s, sig) in signals.iter().enumerate() {
            let scale = (sig.phys_max - sig.phys_min) / (sig.dig_max - sig.dig_min);
            let chunk = &rec[s * 2 * spr..(s + 1) * 2 * spr];
            data[s].extend(chunk.chunks_exact(2).map(|b| {
                let d = f64::from(i16::from_le_bytes([b[0], b[1]]));
                (d - sig.dig_min) * scale + sig.phys_min
            }));
        }
    }

    let electrodes = signals.into_iter().map(|s| s.label).collect();
    Recording::new(subject_id, fs as u32, electrodes, data)
}

fn put(out: &mut Vec<u8>, text: &str, width: usize) {
    let mut bytes: Vec<u8> = text.bytes().take(width).collect();
    bytes.resize(width, b' ');
    out.extend_from_slice(&bytes);
}

/// Formats a value into at most 8 ASCII characters.
fn fit8(v: f64) -> String {
    for prec in (0..=6).rev() {
        let s = format!("{v:.prec$}");
        if s.len() <= 8 {
            return s;
        }
    }
    format!("{}", v.round() as i64)
}

/// Writes a recording as EDF with one-second data records.
///
/// Each signal's physical range is widened to cover its samples and then
/// quantized to the full `i16` range, so a round trip is accurate to one
/// quantization step. The recording length must be a whole number of seconds.
pub fn write_edf(rec: &Recording) -> Result<Vec<u8>> {
    rec.validate()?;
    let fs = rec.fs as usize;
    let n = rec.n_samples();
    if !n.is_multiple_of(fs) {
        bail!(Length, "{n} samples is not a whole number of 1-s records at {fs} Hz");
    }
    let ns = rec.electrodes.len();
    let n_records = n / fs;
    let (dig_min, dig_max) = (-32768.0_f64, 32767.0_f64);

    let ranges: Vec<(f64, f64)> = rec
        .data
        .iter()
        .map(|row| {
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (lo, hi) = if row.is_empty() { (-1.0, 1.0) } else { (lo, hi) };
            let (lo, hi) = if hi - lo < 1e-6 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
            // outward rounding so that the printed 8-char bounds still cover the data
            let lo_s = fit8(lo.floor() - 1.0);
            let hi_s = fit8(hi.ceil() + 1.0);
            (lo_s.parse().unwrap_or(lo), hi_s.parse().unwrap_or(hi))
        })
        .collect();

    let mut out = Vec::with_capacity(FIXED_HEADER + ns * PER_SIGNAL + 2 * n * ns);
    put(&mut out, "0", 8);
    put(&mut out, &rec.subject_id, 80);
    put(&mut out, "Startdate X X X X", 80);
    put(&mut out, "01.01.00", 8);
    put(&mut out, "00.00.00", 8);
    put(&mut out, &(FIXED_HEADER + ns * PER_SIGNAL).to_string(), 8);
    put(&mut out, "", 44);
    put(&mut out, &n_records.to_string(), 8);
    put(&mut out, "1", 8);
    put(&mut out, &ns.to_string(), 4);

    for label in &rec.electrodes {
        put(&mut out, label, 16);
    }
    for _ in 0..ns {
        put(&mut out, "", 80);
    }
    for _ in 0..ns {
        put(&mut out, "uV", 8);
    }
    for &(lo, _) in &ranges {
        put(&mut out, &fit8(lo), 8);
    }
    for &(_, hi) in &ranges {
        put(&mut out, &fit8(hi), 8);
    }
    for _ in 0..ns {
        put(&mut out, &fit8(dig_min), 8);
    }
    for _ in 0..ns {
        put(&mut out, &fit8(dig_max), 8);
    }
    for _ in 0..ns {
        put(&mut out, "", 80);
    }
    for _ in 0..ns {
        put(&mut out, &fs.to_string(), 8);
    }
    for _ in 0..ns {
        put(&mut out, "", 32);
    }

    for r in 0..n_records {
        for (row, &(lo, hi)) in rec.data.iter().zip(&ranges) {
            let scale = (dig_max - dig_min) / (hi - lo);
            for &v in &row[r * fs..(r + 1) * fs] {
                let d = ((v - lo) * scale + dig_min).round().clamp(dig_min, dig_max) as i16;
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(ns: usize, n_records: usize, spr: &[usize], dig: (i32, i32)) -> Vec<u8> {
        let mut out = Vec::new();
        put(&mut out, "0", 8);
        put(&mut out, "patient", 80);
        put(&mut out, "recording", 80);
        put(&mut out, "01.01.00", 8);
        put(&mut out, "00.00.00", 8);
        put(&mut out, &(256 + ns * 256).to_string(), 8);
        put(&mut out, "", 44);
        put(&mut out, &n_records.to_string(), 8);
        put(&mut out, "1", 8);
        put(&mut out, &ns.to_string(), 4);
        for i in 0..ns {
            put(&mut out, &format!("  S{i}  "), 16);
        }
        for _ in 0..ns {
            put(&mut out, "", 80);
        }
        for _ in 0..ns {
            put(&mut out, "uV", 8);
        }
        for _ in 0..ns {
            put(&mut out, "-100", 8);
        }
        for _ in 0..ns {
            put(&mut out, "100", 8);
        }
        for _ in 0..ns {
            put(&mut out, &dig.0.to_string(), 8);
        }
        for _ in 0..ns {
            put(&mut out, &dig.1.to_string(), 8);
        }
        for _ in 0..ns {
            put(&mut out, "", 80);
        }
        for s in spr {
            put(&mut out, &s.to_string(), 8);
        }
        for _ in 0..ns {
            put(&mut out, "", 32);
        }
        out
    }

    #[test]
    fn two_signals_ten_records() {
        let mut bytes = header(2, 10, &[256, 256], (-32768, 32767));
        bytes.resize(bytes.len() + 10 * 2 * 256 * 2, 0);
        let rec = parse_edf(&bytes, "s1").unwrap();
        assert_eq!(rec.fs, 256);
        assert_eq!(rec.data.len(), 2);
        assert_eq!(rec.n_samples(), 2560);
        assert_eq!(rec.electrodes, vec!["S0", "S1"]);
    }

    #[test]
    fn digital_min_maps_to_physical_min() {
        let mut bytes = header(1, 1, &[4], (-2048, 2047));
        for d in [-2048i16, 2047, 0, -1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        let rec = parse_edf(&bytes, "s").unwrap();
        assert_eq!(rec.data[0][0], -100.0);
        assert!((rec.data[0][1] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_digital_range_is_rejected() {
        let mut bytes = header(1, 1, &[4], (5, 5));
        bytes.resize(bytes.len() + 8, 0);
        assert!(matches!(parse_edf(&bytes, "s"), Err(crate::Error::Parse(_))));
    }

    #[test]
    fn mixed_rates_are_rejected() {
        let mut bytes = header(2, 1, &[4, 8], (-10, 10));
        bytes.resize(bytes.len() + 24, 0);
        assert!(parse_edf(&bytes, "s").is_err());
    }

    #[test]
    fn truncated_record_is_dropped() {
        let mut bytes = header(1, 3, &[4], (-10, 10));
        bytes.resize(bytes.len() + 2 * 8 + 3, 0);
        let rec = parse_edf(&bytes, "s").unwrap();
        assert_eq!(rec.n_samples(), 8);
    }

    #[test]
    fn malformed_header() {
        assert!(parse_edf(b"0       short", "s").is_err());
        let mut bytes = header(1, 1, &[4], (-10, 10));
        bytes[252..256].copy_from_slice(b"xx  ");
        assert!(parse_edf(&bytes, "s").is_err());
    }

    #[test]
    fn fit8_stays_within_width() {
        for v in [-1234567.0, 0.5, -0.123456789, 99999999.0, 3.0] {
            assert!(fit8(v).len() <= 8, "{v}");
        }
    }
}
