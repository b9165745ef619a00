use super::dictionary::Stream;
use crate::two_stream::{RegionSequence, TokenSequence};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Where the intervention head gets `x` and `y` (or `r`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    /// `x` = masked-pass token, `y` = the same token from a clean pass.
    A,
    /// `x` over unmasked tokens, `y` = masked token, single pass.
    B,
    /// `x` over unmasked tokens, `y` from a clean pass.
    C,
    /// One integrated `r` per unmasked token, predicting that token.
    D,
}

impl Design {
    pub fn needs_clean_pass(self) -> bool {
        matches!(self, Design::A | Design::C)
    }

    /// A and B take over the MTM objective at the positions they intervene on.
    pub fn replaces_mtm(self) -> bool {
        matches!(self, Design::A | Design::B)
    }

    pub fn has_x(self) -> bool {
        self != Design::D
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeMode {
    /// Regions only, vision confounders.
    VisionIntra,
    /// Noun tokens only, language confounders.
    LanguageIntra,
    /// `x` and `y` from different streams, joint confounders.
    InterModal,
}

impl fmt::Display for ScopeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScopeMode::VisionIntra => "vision_intra",
            ScopeMode::LanguageIntra => "language_intra",
            ScopeMode::InterModal => "inter_modal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenRef {
    pub stream: Stream,
    pub pos: usize,
}

impl TokenRef {
    pub fn lang(pos: usize) -> Self {
        Self {
            stream: Stream::Language,
            pos,
        }
    }

    pub fn vis(pos: usize) -> Self {
        Self {
            stream: Stream::Vision,
            pos,
        }
    }
}

/// One head invocation. `y` is the query token (`r` for Design D) and
/// `target` the token whose label is predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    pub x: Option<TokenRef>,
    pub y: TokenRef,
    /// Read `y` from the clean pass rather than the masked one.
    pub y_clean: bool,
    pub target: TokenRef,
}

/// Masked and unmasked positions eligible under `scope`. Row 0 of either
/// stream is never eligible; language scopes keep nouns only.
pub fn scope_positions(
    scope: ScopeMode,
    tokens: &TokenSequence,
    regions: &RegionSequence,
) -> (Vec<TokenRef>, Vec<TokenRef>) {
    let mut masked = Vec::new();
    let mut unmasked = Vec::new();
    if scope != ScopeMode::VisionIntra {
        for t in (1..tokens.len()).filter(|&t| tokens.is_noun(t)) {
            if tokens.is_masked(t) {
                masked.push(TokenRef::lang(t));
            } else {
                unmasked.push(TokenRef::lang(t));
            }
        }
    }
    if scope != ScopeMode::LanguageIntra {
        for i in 1..regions.len() {
            if regions.is_masked(i) {
                masked.push(TokenRef::vis(i));
            } else {
                unmasked.push(TokenRef::vis(i));
            }
        }
    }
    (masked, unmasked)
}

pub fn select_xy_design_a(masked: &[TokenRef]) -> Vec<Selection> {
    masked
        .iter()
        .map(|&t| Selection {
            x: Some(t),
            y: t,
            y_clean: true,
            target: t,
        })
        .collect()
}

fn cartesian(
    masked: &[TokenRef],
    unmasked: &[TokenRef],
    cross_modal: bool,
    y_clean: bool,
) -> Vec<Selection> {
    let mut out = Vec::with_capacity(masked.len() * unmasked.len());
    for &t in masked {
        for &k in unmasked {
            if cross_modal && k.stream == t.stream {
                continue;
            }
            out.push(Selection {
                x: Some(k),
                y: t,
                y_clean,
                target: t,
            });
        }
    }
    out
}

/// Every (unmasked `k`, masked `t`) pair; with `cross_modal`, only pairs
/// whose tokens sit in different streams.
pub fn select_xy_design_b(
    masked: &[TokenRef],
    unmasked: &[TokenRef],
    cross_modal: bool,
) -> Vec<Selection> {
    cartesian(masked, unmasked, cross_modal, false)
}

pub fn select_xy_design_c(
    masked: &[TokenRef],
    unmasked: &[TokenRef],
    cross_modal: bool,
) -> Vec<Selection> {
    cartesian(masked, unmasked, cross_modal, true)
}

pub fn select_r_design_d(unmasked: &[TokenRef]) -> Vec<Selection> {
    unmasked
        .iter()
        .map(|&k| Selection {
            x: None,
            y: k,
            y_clean: false,
            target: k,
        })
        .collect()
}

/// Dispatches to the selector of `design` for one example.
pub fn select(
    design: Design,
    scope: ScopeMode,
    tokens: &TokenSequence,
    regions: &RegionSequence,
) -> Vec<Selection> {
    let (masked, unmasked) = scope_positions(scope, tokens, regions);
    let cross = scope == ScopeMode::InterModal;
    match design {
        Design::A => select_xy_design_a(&masked),
        Design::B => select_xy_design_b(&masked, &unmasked, cross),
        Design::C => select_xy_design_c(&masked, &unmasked, cross),
        Design::D => select_r_design_d(&unmasked),
    }
}
