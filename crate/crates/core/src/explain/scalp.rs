//! Scalp map of bipolar-channel importance as an SVG 1.1 document.

use std::fmt::Write;

use super::ChannelImportance;
use crate::error::{bail, Result};
use crate::preprocess::{normalize_label, MontageConfig};

const SIZE: f64 = 300.0;
const CENTER: (f64, f64) = (150.0, 160.0);
const HEAD_R: f64 = 120.0;
const MIN_OPACITY: f64 = 0.1;

/// 2-D projection of the ten-twenty positions on a unit head, x to the
/// right and y towards the back; the ear ring sits at radius 0.8.
pub const ELECTRODE_POSITIONS: [(&str, f64, f64); 9] = [
    ("Fp1", -0.247, -0.761),
    ("Fp2", 0.247, -0.761),
    ("T3", -0.8, 0.0),
    ("C3", -0.4, 0.0),
    ("Cz", 0.0, 0.0),
    ("C4", 0.4, 0.0),
    ("T4", 0.8, 0.0),
    ("O1", -0.247, 0.761),
    ("O2", 0.247, 0.761),
];

/// Electrode positions, montage edges and per-edge intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalpMap {
    pub electrodes: Vec<(String, f64, f64)>,
    /// `(channel name, anode index, cathode index, intensity)` in montage order.
    pub edges: Vec<(String, usize, usize, f64)>,
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    (CENTER.0 + HEAD_R * x, CENTER.1 + HEAD_R * y)
}

/// Opacity for an importance in [0, 1].
pub fn edge_opacity(v: f64) -> f64 {
    MIN_OPACITY + (1.0 - MIN_OPACITY) * v.clamp(0.0, 1.0)
}

impl ScalpMap {
    pub fn new(imp: &ChannelImportance, montage: &MontageConfig) -> Result<Self> {
        montage.validate()?;
        if imp.processed.len() != montage.eeg_pairs.len() {
            bail!(Shape, "{} importances for {} montage channels", imp.processed.len(), montage.eeg_pairs.len());
        }
        let electrodes: Vec<(String, f64, f64)> =
            ELECTRODE_POSITIONS.iter().map(|&(n, x, y)| (n.to_string(), x, y)).collect();
        let find = |label: &str| {
            let key = normalize_label(label);
            electrodes.iter().position(|e| normalize_label(&e.0) == key)
        };
        let mut edges = Vec::with_capacity(montage.eeg_pairs.len());
        for ((a, c), &v) in montage.eeg_pairs.iter().zip(&imp.processed) {
            let (Some(ia), Some(ic)) = (find(a), find(c)) else {
                bail!(Config, "no scalp position for channel {a}-{c}");
            };
            edges.push((format!("{a}-{c}"), ia, ic, v));
        }
        Ok(ScalpMap { electrodes, edges })
    }

    /// Head outline, one line per channel and labeled electrodes. Each
    /// line carries its channel name and importance as data attributes.
    pub fn to_svg(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(s, "<title>{}</title>", escape(title));
        let (cx, cy) = CENTER;
        let _ = writeln!(
            s,
            r##"<polygon class="nose" points="{:.1},{:.1} {cx:.1},{:.1} {:.1},{:.1}" fill="none" stroke="#000000" stroke-width="2"/>"##,
            cx - 12.0,
            cy - HEAD_R + 2.0,
            cy - HEAD_R - 18.0,
            cx + 12.0,
            cy - HEAD_R + 2.0
        );
        let _ = writeln!(
            s,
            r##"<circle class="head" cx="{cx:.1}" cy="{cy:.1}" r="{HEAD_R:.1}" fill="#ffffff" stroke="#000000" stroke-width="2"/>"##
        );
        for (name, a, c, v) in &self.edges {
            let (x1, y1) = to_px(self.electrodes[*a].1, self.electrodes[*a].2);
            let (x2, y2) = to_px(self.electrodes[*c].1, self.electrodes[*c].2);
            let _ = writeln!(
                s,
                r##"<line class="edge" data-channel="{}" data-importance="{v:?}" x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="#b00000" stroke-width="4" stroke-opacity="{:.4}"/>"##,
                escape(name),
                edge_opacity(*v)
            );
        }
        for (name, x, y) in &self.electrodes {
            let (px, py) = to_px(*x, *y);
            let _ = writeln!(
                s,
                r##"<circle class="electrode" cx="{px:.2}" cy="{py:.2}" r="10" fill="#ffffff" stroke="#000000" stroke-width="1.5"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text class="label" x="{px:.2}" y="{:.2}" font-family="sans-serif" font-size="8" text-anchor="middle">{}</text>"#,
                py + 3.0,
                escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders `imp` over the montage; see [`ScalpMap::to_svg`].
pub fn render_scalp_svg(imp: &ChannelImportance, montage: &MontageConfig) -> Result<String> {
    Ok(ScalpMap::new(imp, montage)?.to_svg(&format!("Channel importance: {}", imp.subject)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use regex::Regex;

    fn imp(processed: Vec<f64>) -> ChannelImportance {
        ChannelImportance { subject: "s<1>".into(), raw: vec![0.0; 19], processed }
    }

    fn edges(svg: &str) -> Vec<(String, f64, f64)> {
        let re = Regex::new(r#"<line class="edge" data-channel="([^"]+)" data-importance="([^"]+)"[^>]* stroke-opacity="([^"]+)"/>"#)
            .unwrap();
        re.captures_iter(svg).map(|c| (c[1].to_string(), c[2].parse().unwrap(), c[3].parse().unwrap())).collect()
    }

    #[test]
    fn zero_importance_is_faint_everywhere() {
        let svg = render_scalp_svg(&imp(vec![0.0; 18]), &MontageConfig::default()).unwrap();
        let e = edges(&svg);
        assert_eq!(e.len(), 18);
        assert!(e.iter().all(|x| x.2 == 0.1));
    }

    #[test]
    fn single_channel_is_fully_dark() {
        let mut v = vec![0.0; 18];
        v[5] = 1.0;
        let e = edges(&render_scalp_svg(&imp(v), &MontageConfig::default()).unwrap());
        for (i, x) in e.iter().enumerate() {
            assert_eq!(x.2, if i == 5 { 1.0 } else { 0.1 });
        }
    }

    #[test]
    fn values_round_trip_in_montage_order() {
        let v: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin().abs() / 3.0).collect();
        let m = MontageConfig::default();
        let svg = render_scalp_svg(&imp(v.clone()), &m).unwrap();
        let e = edges(&svg);
        let names = m.channel_names();
        for (i, (name, val, _)) in e.iter().enumerate() {
            assert_eq!(name, &names[i]);
            assert_eq!(*val, v[i]);
        }
        assert!(svg.contains("s&lt;1&gt;"));
        let tags = Regex::new(r"<([a-z]+)[ >]").unwrap();
        for t in tags.captures_iter(&svg) {
            assert!(["svg", "title", "polygon", "circle", "line", "text"].contains(&&t[1]), "{}", &t[1]);
        }
        assert_eq!(svg, render_scalp_svg(&imp(v), &m).unwrap());
    }

    #[test]
    fn unknown_electrode_is_rejected() {
        let mut m = MontageConfig::default();
        m.eeg_pairs[0].0 = "F7".into();
        assert!(render_scalp_svg(&imp(vec![0.0; 18]), &m).is_err());
    }
}
