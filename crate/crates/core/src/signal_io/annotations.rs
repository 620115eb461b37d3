//! Annotation sidecar: UTF-8 CSV with header `expert,onset_s,offset_s`.

use super::{AnnotationSet, SeizureInterval};
use crate::error::{bail, Error, Result};

const HEADER: [&str; 3] = ["expert", "onset_s", "offset_s"];

pub fn read_annotations_csv(text: &str) -> Result<AnnotationSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("annotation header: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != HEADER {
        bail!(Parse, "annotation header must be {:?}", HEADER.join(","));
    }
    let mut set = AnnotationSet::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("annotation row {}: {e}", line + 2)))?;
        let parse = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("annotation row {}: bad number {:?}", line + 2, &row[i])))
        };
        let interval = SeizureInterval::new(parse(1)?, parse(2)?)?;
        set.insert(&row[0], interval);
    }
    Ok(set)
}

pub fn write_annotations_csv(ann: &AnnotationSet) -> String {
    let mut out = String::from("expert,onset_s,offset_s\n");
    for (expert, list) in ann.experts() {
        for iv in list {
            out.push_str(&format!("{expert},{},{}\n", iv.onset_s, iv.offset_s));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let text = "expert,onset_s,offset_s\nA,10,60\nB,12.5,58\nC,15,70\nA,100,130\n";
        let set = read_annotations_csv(text).unwrap();
        assert_eq!(set.n_experts(), 3);
        assert_eq!(read_annotations_csv(&write_annotations_csv(&set)).unwrap(), set);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(read_annotations_csv("a,b,c\n").is_err());
        assert!(read_annotations_csv("expert,onset_s,offset_s\nA,20,10\n").is_err());
        assert!(read_annotations_csv("expert,onset_s,offset_s\nA,x,10\n").is_err());
    }

    #[test]
    fn header_only_is_empty() {
        let set = read_annotations_csv("expert,onset_s,offset_s\n").unwrap();
        assert_eq!(set.n_experts(), 0);
    }
}
