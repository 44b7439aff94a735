//! Ground-truth metadata attached to every scan, profile and signature.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid metadata: {0}")]
pub struct MetaError(pub String);

/// Tool side. One side of one tool is a "source".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Push,
    Pull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

/// Identity of a mark source: a (tool, side) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceId {
    pub tool_id: u32,
    pub side: Side,
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.tool_id, self.side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceMeta {
    pub tool_id: u32,
    pub side: Side,
    pub angle_deg: Option<u32>,
    pub direction: Option<Direction>,
    pub replicate: u32,
    pub size_class: Option<SizeClass>,
}

impl SourceMeta {
    pub fn new(tool_id: u32, side: Side, replicate: u32) -> Result<Self, MetaError> {
        let meta = SourceMeta { tool_id, side, angle_deg: None, direction: None, replicate, size_class: None };
        meta.validate()?;
        Ok(meta)
    }

    pub fn with_angle(mut self, angle_deg: u32) -> Self {
        self.angle_deg = Some(angle_deg);
        self
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = Some(direction);
        self
    }

    pub fn with_size_class(mut self, size_class: SizeClass) -> Self {
        self.size_class = Some(size_class);
        self
    }

    pub fn source(&self) -> SourceId {
        SourceId { tool_id: self.tool_id, side: self.side }
    }

    pub fn validate(&self) -> Result<(), MetaError> {
        if self.tool_id < 1 {
            return Err(MetaError("tool_id must be >= 1".into()));
        }
        if self.replicate < 1 {
            return Err(MetaError("replicate must be >= 1".into()));
        }
        if let Some(angle) = self.angle_deg {
            if ![60, 70, 80].contains(&angle) {
                return Err(MetaError(format!("angle_deg must be 60, 70 or 80, got {angle}")));
            }
        }
        Ok(())
    }

    /// Key/value pairs used by the text formats' header lines.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = vec![
            ("tool_id", self.tool_id.to_string()),
            ("side", self.side.to_string()),
            ("replicate", self.replicate.to_string()),
        ];
        if let Some(a) = self.angle_deg {
            pairs.push(("angle_deg", a.to_string()));
        }
        if let Some(d) = self.direction {
            pairs.push(("direction", d.to_string()));
        }
        if let Some(s) = self.size_class {
            pairs.push(("size_class", s.to_string()));
        }
        pairs
    }

    /// Applies one header key/value pair. Returns `Ok(false)` for keys that
    /// are not metadata.
    pub fn apply_pair(&mut self, key: &str, value: &str) -> Result<bool, MetaError> {
        let bad = |what: &str| MetaError(format!("bad {what} value {value:?}"));
        match key {
            "tool_id" => self.tool_id = value.parse().map_err(|_| bad("tool_id"))?,
            "side" => self.side = value.parse()?,
            "replicate" => self.replicate = value.parse().map_err(|_| bad("replicate"))?,
            "angle_deg" => {
                self.angle_deg = optional(value).map(|v| v.parse().map_err(|_| bad("angle_deg"))).transpose()?
            }
            "direction" => self.direction = optional(value).map(str::parse).transpose()?,
            "size_class" => self.size_class = optional(value).map(str::parse).transpose()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

impl Default for SourceMeta {
    fn default() -> Self {
        SourceMeta { tool_id: 1, side: Side::A, angle_deg: None, direction: None, replicate: 1, size_class: None }
    }
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "-" | "na" | "NA" => None,
        v => Some(v),
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

impl FromStr for Side {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Side::A),
            "B" | "b" => Ok(Side::B),
            _ => Err(MetaError(format!("unknown side {s:?}"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Direction::Push => "push",
            Direction::Pull => "pull",
        })
    }
}

impl FromStr for Direction {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "push" => Ok(Direction::Push),
            "pull" => Ok(Direction::Pull),
            _ => Err(MetaError(format!("unknown direction {s:?}"))),
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        })
    }
}

impl FromStr for SizeClass {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(SizeClass::Small),
            "large" => Ok(SizeClass::Large),
            _ => Err(MetaError(format!("unknown size class {s:?}"))),
        }
    }
}

/// Compact label used in matrix exports, e.g. `3A_80_pull_r2_small`.
/// Unspecified fields are written as `-`.
impl fmt::Display for SourceMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dash = |o: Option<String>| o.unwrap_or_else(|| "-".to_string());
        write!(
            f,
            "{}{}_{}_{}_r{}_{}",
            self.tool_id,
            self.side,
            dash(self.angle_deg.map(|a| a.to_string())),
            dash(self.direction.map(|d| d.to_string())),
            self.replicate,
            dash(self.size_class.map(|s| s.to_string())),
        )
    }
}

impl FromStr for SourceMeta {
    type Err = MetaError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MetaError(format!("malformed label {s:?}"));
        let parts: Vec<&str> = s.split('_').collect();
        if parts.len() != 5 {
            return Err(bad());
        }
        let source = parts[0];
        if source.len() < 2 {
            return Err(bad());
        }
        let (tool, side) = source.split_at(source.len() - 1);
        let replicate = parts[3].strip_prefix('r').ok_or_else(bad)?;
        let mut meta = SourceMeta {
            tool_id: tool.parse().map_err(|_| bad())?,
            side: side.parse()?,
            replicate: replicate.parse().map_err(|_| bad())?,
            ..SourceMeta::default()
        };
        meta.apply_pair("angle_deg", parts[1])?;
        meta.apply_pair("direction", parts[2])?;
        meta.apply_pair("size_class", parts[4])?;
        meta.validate()?;
        Ok(meta)
    }
}
