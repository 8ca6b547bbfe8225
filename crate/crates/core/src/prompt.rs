//! Weak prompts (boxes and labeled points) synthesized from a mask.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::rng::seeded;

/// Inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub boxes: Vec<BoxPrompt>,
    pub points: Vec<PointPrompt>,
}

impl PromptSet {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty() && self.points.is_empty()
    }

    /// Every coordinate must lie inside an `height × width` frame.
    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for b in &self.boxes {
            if b.row_min > b.row_max || b.col_min > b.col_max || b.row_max >= height || b.col_max >= width {
                return Err(Error::param("prompt.box", format!("{b:?} invalid for {height}x{width}")));
            }
        }
        for p in &self.points {
            if p.row >= height || p.col >= width {
                return Err(Error::param("prompt.point", format!("{p:?} outside {height}x{width}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    /// End-to-end: no prompts, the learned no-prompt token is used.
    #[default]
    #[serde(rename = "end2end", alias = "none")]
    None,
    #[serde(rename = "box")]
    Box,
    #[serde(rename = "point")]
    Point,
    #[serde(rename = "box+point")]
    BoxPoint,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::None => "end2end",
            PromptMode::Box => "box",
            PromptMode::Point => "point",
            PromptMode::BoxPoint => "box+point",
        })
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "end2end" => Ok(PromptMode::None),
            "box" => Ok(PromptMode::Box),
            "point" => Ok(PromptMode::Point),
            "box+point" | "point+box" => Ok(PromptMode::BoxPoint),
            other => Err(Error::param("prompt_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Tight inclusive bounding box of all foreground pixels.
pub fn box_prompt(mask: &Mask) -> Result<BoxPrompt> {
    let mut bounds: Option<BoxPrompt> = None;
    for (r, c) in mask.foreground() {
        let b = bounds.get_or_insert(BoxPrompt {
            row_min: r,
            col_min: c,
            row_max: r,
            col_max: c,
        });
        b.row_min = b.row_min.min(r);
        b.row_max = b.row_max.max(r);
        b.col_min = b.col_min.min(c);
        b.col_max = b.col_max.max(c);
    }
    bounds.ok_or(Error::NoForeground)
}

/// `n` positive points from the foreground and `n` negative points from the
/// background, each drawn uniformly without replacement.
pub fn point_prompts(mask: &Mask, n: usize, seed: u64) -> Result<PromptSet> {
    if n == 0 {
        return Ok(PromptSet::default());
    }
    let fg = mask.foreground();
    let bg = mask.background();
    for (polarity, pool) in [("positive", &fg), ("negative", &bg)] {
        if pool.len() < n {
            return Err(Error::InsufficientPixels {
                polarity,
                needed: n,
                available: pool.len(),
            });
        }
    }
    let mut rng = seeded(seed);
    let mut points = Vec::with_capacity(2 * n);
    for (polarity, pool) in [(Polarity::Positive, &fg), (Polarity::Negative, &bg)] {
        for i in sample(&mut rng, pool.len(), n).into_iter() {
            let (row, col) = pool[i];
            points.push(PointPrompt { row, col, polarity });
        }
    }
    Ok(PromptSet {
        boxes: Vec::new(),
        points,
    })
}

pub fn make_prompts(mask: &Mask, mode: PromptMode, n: usize, seed: u64) -> Result<PromptSet> {
    let mut set = PromptSet::default();
    if matches!(mode, PromptMode::Box | PromptMode::BoxPoint) {
        set.boxes.push(box_prompt(mask)?);
    }
    if matches!(mode, PromptMode::Point | PromptMode::BoxPoint) {
        set.points = point_prompts(mask, n, seed)?.points;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(h: usize, w: usize, fg: &[(usize, usize)]) -> Mask {
        let mut m = Mask::filled(h, w, 0);
        for &(r, c) in fg {
            m.set(r, c, 1);
        }
        m
    }

    #[test]
    fn box_of_two_pixels() {
        let m = mask_with(8, 8, &[(2, 3), (5, 7)]);
        let b = box_prompt(&m).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (2, 3, 5, 7));
    }

    #[test]
    fn box_of_full_mask_and_empty_mask() {
        let b = box_prompt(&Mask::filled(6, 9, 1)).unwrap();
        assert_eq!((b.row_min, b.col_min, b.row_max, b.col_max), (0, 0, 5, 8));
        assert!(matches!(box_prompt(&Mask::filled(6, 9, 0)), Err(Error::NoForeground)));
    }

    #[test]
    fn points_respect_polarity_and_count() {
        let fg: Vec<_> = (0..200).map(|i| (i / 20, i % 20)).collect();
        let m = mask_with(32, 32, &fg);
        let set = point_prompts(&m, 5, 1).unwrap();
        assert_eq!(set.points.len(), 10);
        for p in &set.points {
            let on = *m.get(p.row, p.col) == 1;
            assert_eq!(on, p.polarity == Polarity::Positive);
        }
        assert_eq!(point_prompts(&m, 5, 1).unwrap(), set);
        assert!(point_prompts(&m, 0, 1).unwrap().points.is_empty());
    }

    #[test]
    fn insufficient_pixels() {
        let m = mask_with(4, 4, &[(0, 0)]);
        assert!(matches!(point_prompts(&m, 2, 0), Err(Error::InsufficientPixels { .. })));
    }

    #[test]
    fn modes() {
        let fg: Vec<_> = (0..30).map(|i| (3, i)).collect();
        let m = mask_with(16, 32, &fg);
        let bp = make_prompts(&m, PromptMode::BoxPoint, 5, 2).unwrap();
        assert_eq!((bp.boxes.len(), bp.points.len()), (1, 10));
        assert!(make_prompts(&m, PromptMode::None, 5, 2).unwrap().is_empty());
        assert!(matches!(
            make_prompts(&Mask::filled(4, 4, 0), PromptMode::Box, 1, 0),
            Err(Error::NoForeground)
        ));
        assert_eq!("box+point".parse::<PromptMode>().unwrap(), PromptMode::BoxPoint);
        assert!("boxes".parse::<PromptMode>().is_err());
    }
}
