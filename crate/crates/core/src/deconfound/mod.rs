//! Backdoor-adjusted intervention heads: confounder dictionaries with
//! priors, importance weights with same-class exclusion, and the four ways
//! of picking `x` and `y` from an encoder pass.

mod designs;
mod dictionary;
mod head;

pub use designs::{
    scope_positions, select, select_r_design_d, select_xy_design_a, select_xy_design_b,
    select_xy_design_c, Design, ScopeMode, Selection, TokenRef,
};
pub use dictionary::{
    build_language_dictionary, build_vision_dictionary, ConfounderDictionary, ConfounderEntry,
    DictionaryModality, Stream,
};
pub use head::{AlphaNorm, DictView, Dictionaries, HeadOptions, InterventionHead};
