use crate::error::{Error, Result};
use crate::signal_io::Recording;

/// The 18 bipolar derivations of the nine-electrode reduced montage.
pub const DEFAULT_PAIRS: [(&str, &str); 18] = [
    ("Fp1", "T3"),
    ("T3", "O1"),
    ("Fp1", "C3"),
    ("C3", "O1"),
    ("Fp2", "C4"),
    ("C4", "O2"),
    ("Fp2", "T4"),
    ("T4", "O2"),
    ("T3", "C3"),
    ("C3", "Cz"),
    ("Cz", "C4"),
    ("C4", "T4"),
    ("Fp1", "Cz"),
    ("Cz", "O1"),
    ("Fp2", "Cz"),
    ("Cz", "O2"),
    ("Fp1", "O2"),
    ("Fp2", "O1"),
];

pub const MONTAGE_PAIRS: usize = 18;

#[derive(Debug, Clone, PartialEq)]
pub struct MontageConfig {
    pub eeg_pairs: Vec<(String, String)>,
    pub ecg_label: String,
}

impl Default for MontageConfig {
    fn default() -> Self {
        MontageConfig {
            eeg_pairs: DEFAULT_PAIRS
                .iter()
                .map(|&(a, c)| (a.to_string(), c.to_string()))
                .collect(),
            ecg_label: "ECG".into(),
        }
    }
}

impl MontageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eeg_pairs.len() != MONTAGE_PAIRS {
            return Err(Error::Config(format!(
                "montage needs {MONTAGE_PAIRS} pairs, got {}",
                self.eeg_pairs.len()
            )));
        }
        let names = self.channel_names();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("montage channel {n} listed twice")));
            }
        }
        Ok(())
    }

    /// Row names of the montaged matrix: `anode-cathode` then the ECG label.
    pub fn channel_names(&self) -> Vec<String> {
        self.eeg_pairs
            .iter()
            .map(|(a, c)| format!("{a}-{c}"))
            .chain(std::iter::once(self.ecg_label.clone()))
            .collect()
    }

    /// Distinct electrode labels the montage reads, ECG last.
    pub fn electrodes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (a, c) in &self.eeg_pairs {
            for l in [a, c] {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out.push(self.ecg_label.clone());
        out
    }
}

/// Canonical form used to match recording labels against montage labels:
/// trimmed, a leading `EEG ` and a trailing `-REF` removed, lower-cased.
pub fn normalize_label(label: &str) -> String {
    let mut s = label.trim();
    if s.len() > 4 && s[..4].eq_ignore_ascii_case("EEG ") {
        s = s[4..].trim_start();
    }
    if s.len() > 4 && s[s.len() - 4..].eq_ignore_ascii_case("-REF") {
        s = &s[..s.len() - 4];
    }
    s.to_ascii_lowercase()
}

pub(crate) fn find_rows(r: &Recording, labels: &[String]) -> Result<Vec<usize>> {
    let normalized: Vec<String> = r.electrodes.iter().map(|l| normalize_label(l)).collect();
    let mut missing = Vec::new();
    let mut rows = Vec::with_capacity(labels.len());
    for l in labels {
        let key = normalize_label(l);
        match normalized.iter().position(|n| *n == key) {
            Some(i) => rows.push(i),
            None => missing.push(l.clone()),
        }
    }
    if missing.is_empty() {
        Ok(rows)
    } else {
        missing.dedup();
        Err(Error::Montage { missing })
    }
}

/// Bipolar montage: row k is `anode_k - cathode_k`; the last row is the ECG
/// copied verbatim. The result is a recording whose labels are the channel
/// names.
pub fn build_montage(r: &Recording, m: &MontageConfig) -> Result<Recording> {
    m.validate()?;
    let names = m.electrodes();
    let rows = find_rows(r, &names)?;
    let row_of = |label: &str| rows[names.iter().position(|n| n == label).expect("listed")];

    let mut data = Vec::with_capacity(MONTAGE_PAIRS + 1);
    for (a, c) in &m.eeg_pairs {
        let (xa, xc) = (&r.data[row_of(a)], &r.data[row_of(c)]);
        data.push(xa.iter().zip(xc).map(|(p, q)| p - q).collect());
    }
    data.push(r.data[row_of(&m.ecg_label)].clone());
    let mut out = Recording::new(r.subject_id.clone(), r.fs, m.channel_names(), data)?;
    out.start_time = r.start_time;
    Ok(out)
}
