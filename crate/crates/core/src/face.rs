//! Landmark topology and emotion categories shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points in the 68-point facial landmark convention.
pub const NUM_POINTS: usize = 68;
/// Flattened landmark width (68 × xyz).
pub const LANDMARK_DIM: usize = NUM_POINTS * 3;
/// Mouth points 48–67 (outer and inner lip contours).
pub const MOUTH_POINTS: std::ops::Range<usize> = 48..68;

pub fn mouth_indices() -> Vec<usize> {
    MOUTH_POINTS.collect()
}

pub fn is_mouth_point(i: usize) -> bool {
    MOUTH_POINTS.contains(&i)
}

/// Discrete emotion category. Integer codes follow declaration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Angry,
    Disgust,
    Contempt,
    Fear,
    Happy,
    Neutral,
    Sad,
    Surprise,
}

impl EmotionLabel {
    pub const ALL: [EmotionLabel; 8] = [
        EmotionLabel::Angry,
        EmotionLabel::Disgust,
        EmotionLabel::Contempt,
        EmotionLabel::Fear,
        EmotionLabel::Happy,
        EmotionLabel::Neutral,
        EmotionLabel::Sad,
        EmotionLabel::Surprise,
    ];

    pub const COUNT: usize = 8;

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL.get(code).copied().ok_or_else(|| Error::UnknownEmotion {
            found: code.to_string(),
            valid: Self::valid_list(),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Angry => "angry",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Contempt => "contempt",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Surprise => "surprise",
        }
    }

    pub fn valid_list() -> String {
        Self::ALL.iter().map(|e| e.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == lower)
            .ok_or_else(|| Error::UnknownEmotion { found: s.to_string(), valid: Self::valid_list() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_listed_order() {
        let names: Vec<_> = EmotionLabel::ALL.iter().map(|e| e.name()).collect();
        assert_eq!(names, ["angry", "disgust", "contempt", "fear", "happy", "neutral", "sad", "surprise"]);
        for (i, e) in EmotionLabel::ALL.iter().enumerate() {
            assert_eq!(e.code(), i);
            assert_eq!(EmotionLabel::from_code(i).unwrap(), *e);
            assert_eq!(e.name().parse::<EmotionLabel>().unwrap(), *e);
        }
    }

    #[test]
    fn unknown_label_lists_valid_set() {
        let err = "joyful".parse::<EmotionLabel>().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("joyful") && msg.contains("surprise") && msg.contains("angry"));
        assert!(EmotionLabel::from_code(8).is_err());
    }

    #[test]
    fn dimensions() {
        assert_eq!(LANDMARK_DIM, 204);
        assert_eq!(mouth_indices().len(), 20);
    }
}
