use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// Clinical fields encoded in `{patient_id}_{year}_{image_no}_{cultivation}_{type}.tif`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalFields {
    pub patient_id: String,
    pub year: u16,
    pub image_no: u32,
    pub cultivation: String,
    #[serde(rename = "type")]
    pub kind: String,
}

fn grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^([^_/\\]+)_(\d{4})_(\d+)_([^_]+)_([^_.]+)\.(tif|tiff|png|bmp)$").expect("valid regex")
    })
}

/// Parses the final path component; `None` when it does not follow the
/// naming convention. Tokens other than year and image number are opaque.
pub fn parse_filename(name: &str) -> Option<ClinicalFields> {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let caps = grammar().captures(base)?;
    Some(ClinicalFields {
        patient_id: caps[1].to_string(),
        year: caps[2].parse().ok()?,
        image_no: caps[3].parse().ok()?,
        cultivation: caps[4].to_string(),
        kind: caps[5].to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conventional_name() {
        let f = parse_filename("12345_2023_07_PHA_BM.tif").unwrap();
        assert_eq!(
            f,
            ClinicalFields {
                patient_id: "12345".into(),
                year: 2023,
                image_no: 7,
                cultivation: "PHA".into(),
                kind: "BM".into(),
            }
        );
        assert_eq!(parse_filename("uploads/p9_2021_3_BM_x.TIFF").unwrap().patient_id, "p9");
    }

    #[test]
    fn unconventional_names() {
        for name in ["scan.tif", "1_23_4_A_B.tif", "1_2023_x_A_B.tif", "1_2023_4_A_B.jpg", "1_2023_4_A.tif"] {
            assert_eq!(parse_filename(name), None, "{name}");
        }
    }
}
