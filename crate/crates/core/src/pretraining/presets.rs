use super::trainer::DesignSpec;
use crate::deconfound::{Design, ScopeMode};
use crate::error::{Error, Result};

/// Named intervention setups. `V` adds vision intervention, `L` language
/// intervention and `C` cross-modal intervention.
pub const PRESETS: [&str; 8] = ["baseline", "A-V", "A-VL", "B-V", "C-V", "D-V", "D-VL", "D-VLC"];

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub designs: Vec<DesignSpec>,
    /// Language masking restricted to nouns.
    pub noun_only: bool,
}

pub fn preset(name: &str) -> Result<Preset> {
    use Design::*;
    use ScopeMode::*;
    let (designs, noun_only): (Vec<(Design, ScopeMode)>, bool) = match name {
        "baseline" => (vec![], false),
        "A-V" => (vec![(A, VisionIntra)], false),
        "A-VL" => (vec![(A, VisionIntra), (A, LanguageIntra)], true),
        "B-V" => (vec![(B, VisionIntra)], false),
        "C-V" => (vec![(C, VisionIntra)], false),
        "D-V" => (vec![(D, VisionIntra)], false),
        "D-VL" => (vec![(D, VisionIntra), (D, LanguageIntra)], false),
        "D-VLC" => (vec![(D, VisionIntra), (D, LanguageIntra), (D, InterModal)], false),
        other => {
            return Err(Error::validation(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(Preset {
        name: name.to_string(),
        designs: designs.into_iter().map(|(d, s)| DesignSpec::new(d, s)).collect(),
        noun_only,
    })
}
