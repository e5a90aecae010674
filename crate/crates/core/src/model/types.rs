use serde::{Deserialize, Serialize};

use crate::align::BBox;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MentionKind {
    #[serde(rename = "np")]
    NounPhrase,
    #[serde(rename = "pron")]
    Pronoun,
}

/// Token span `[start, end)` of one mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSpan {
    pub start: usize,
    pub end: usize,
    pub kind: MentionKind,
}

impl MentionSpan {
    pub fn new(start: usize, end: usize, kind: MentionKind) -> Self {
        MentionSpan { start, end, kind }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Detected regions of one image: joint feature rows, boxes, detector classes.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSet {
    pub features: Tensor,
    pub boxes: Vec<BBox>,
    pub class_ids: Vec<usize>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        if self.features.shape().len() != 2 || self.features.rows() != n || self.class_ids.len() != n {
            return Err(Error::Dimension(format!(
                "region set: features {:?}, {} boxes, {} class ids",
                self.features.shape(),
                n,
                self.class_ids.len()
            )));
        }
        for b in &self.boxes {
            b.validate_normalized()?;
        }
        if !self.features.is_finite() {
            return Err(Error::Data("region features contain non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NarrationTokens {
    pub token_ids: Vec<usize>,
    pub mentions: Vec<MentionSpan>,
}

impl NarrationTokens {
    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.mentions.iter().enumerate() {
            if m.is_empty() || m.end > self.token_ids.len() {
                return Err(Error::Data(format!(
                    "mention {} span [{}, {}) invalid for {} tokens",
                    i,
                    m.start,
                    m.end,
                    self.token_ids.len()
                )));
            }
        }
        Ok(())
    }

    pub fn spans(&self) -> Vec<Vec<usize>> {
        self.mentions.iter().map(|m| (m.start..m.end).collect()).collect()
    }
}
