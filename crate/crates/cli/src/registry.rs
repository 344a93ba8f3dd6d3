//! The method registry: three editors under three targets, four unlearners.

use std::fmt;

use forgetedit::targets::TargetKind;
use forgetedit::unlearners::UnlearnMethod;
use forgetedit::{Error, Result};

/// Column label of the retain-only reference model.
pub const GROUND_TRUTH: &str = "ground_truth";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Editor {
    Rome,
    Wise,
    Ike,
}

impl Editor {
    pub const ALL: [Editor; 3] = [Editor::Rome, Editor::Wise, Editor::Ike];

    pub fn name(self) -> &'static str {
        match self {
            Editor::Rome => "rome",
            Editor::Wise => "wise",
            Editor::Ike => "ike",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Edit(Editor, TargetKind),
    Unlearn(UnlearnMethod),
}

impl Method {
    /// Every method in matrix column order.
    pub fn registry() -> Vec<Method> {
        let mut out = Vec::with_capacity(13);
        for e in Editor::ALL {
            for t in TargetKind::ALL {
                out.push(Method::Edit(e, t));
            }
        }
        out.extend(UnlearnMethod::ALL.map(Method::Unlearn));
        out
    }

    pub fn name(self) -> String {
        match self {
            Method::Edit(e, t) => format!("{}:{}", e.name(), t.name()),
            Method::Unlearn(u) => u.name().to_string(),
        }
    }

    /// Directory-safe form of the name.
    pub fn slug(self) -> String {
        self.name().replace(':', "_")
    }

    pub fn parse(s: &str) -> Option<Method> {
        Self::registry().into_iter().find(|m| m.name() == s)
    }

    pub fn is_edit(self) -> bool {
        matches!(self, Method::Edit(..))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// `all`, one name, or a comma-separated list; result is in registry order
/// without duplicates.
pub fn parse_selection(spec: &str) -> Result<Vec<Method>> {
    let spec = spec.trim();
    if spec == "all" {
        return Ok(Method::registry());
    }
    let mut picked = Vec::new();
    for part in spec.split(',').map(str::trim) {
        let m = Method::parse(part).ok_or_else(|| {
            let known: Vec<String> = Method::registry().iter().map(|m| m.name()).collect();
            Error::config("method", format!("unknown method {part:?}; expected \"all\" or one of {}", known.join(", ")))
        })?;
        picked.push(m);
    }
    Ok(Method::registry().into_iter().filter(|m| picked.contains(m)).collect())
}
