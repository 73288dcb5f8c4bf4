//! Frequency ramp schedule: which half-spectrum bins each layer's dynamic
//! and static filters may touch.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::scalar::BinRatio;

/// Direction a filter window travels as depth increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlideDirection {
    /// Layer 0 sits at the highest frequencies; deeper layers move lower.
    HighToLow,
    /// Layer 0 sits at the lowest frequencies; deeper layers move higher.
    LowToHigh,
}

/// The four (dynamic, static) direction pairings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum SlideMode {
    /// Dynamic high-to-low, static low-to-high.
    Mode1,
    /// Dynamic low-to-high, static high-to-low.
    Mode2,
    /// Both low-to-high.
    Mode3,
    /// Both high-to-low (the default).
    Mode4,
}

impl SlideMode {
    pub const ALL: [SlideMode; 4] = [SlideMode::Mode1, SlideMode::Mode2, SlideMode::Mode3, SlideMode::Mode4];

    pub fn dynamic_direction(self) -> SlideDirection {
        match self {
            SlideMode::Mode1 | SlideMode::Mode4 => SlideDirection::HighToLow,
            SlideMode::Mode2 | SlideMode::Mode3 => SlideDirection::LowToHigh,
        }
    }

    pub fn static_direction(self) -> SlideDirection {
        match self {
            SlideMode::Mode2 | SlideMode::Mode4 => SlideDirection::HighToLow,
            SlideMode::Mode1 | SlideMode::Mode3 => SlideDirection::LowToHigh,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            SlideMode::Mode1 => 1,
            SlideMode::Mode2 => 2,
            SlideMode::Mode3 => 3,
            SlideMode::Mode4 => 4,
        }
    }
}

impl Default for SlideMode {
    fn default() -> Self {
        SlideMode::Mode4
    }
}

impl TryFrom<u8> for SlideMode {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(SlideMode::Mode1),
            2 => Ok(SlideMode::Mode2),
            3 => Ok(SlideMode::Mode3),
            4 => Ok(SlideMode::Mode4),
            other => Err(format!("slide mode must be 1-4, got {other}")),
        }
    }
}

impl From<SlideMode> for u8 {
    fn from(m: SlideMode) -> u8 {
        m.number()
    }
}

/// Half-open bin range `[start, end)` assigned to one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterWindow {
    pub layer: usize,
    pub start: usize,
    pub end: usize,
}

impl FilterWindow {
    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn contains(&self, bin: usize) -> bool {
        (self.start..self.end).contains(&bin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RampSchedule<R> {
    pub bins: usize,
    pub dynamic: Vec<FilterWindow>,
    pub fixed: Vec<FilterWindow>,
    pub alpha: R,
    pub beta: R,
    pub mode: SlideMode,
}

fn to_bin(v: i64, bins: usize) -> usize {
    v.clamp(0, bins as i64) as usize
}

/// Builds the per-layer windows over `bins` half-spectrum bins.
///
/// Dynamic windows are `alpha * bins` wide (at least one bin). In the
/// high-to-low layout layer `l` ends at `round(bins - l * step)` with
/// `step = (1 - alpha) * bins / (layers - 1)`, so the first layer touches the
/// Nyquist end and the last touches DC. Static windows split the spectrum
/// into `layers` contiguous blocks whose boundaries `round(bins - l * bins /
/// layers)` are rounded individually, which keeps them an exact partition.
/// With more layers than bins some static blocks are empty.
/// Low-to-high layouts are the same lists in reverse layer order.
pub fn build_ramp_schedule<R: BinRatio>(bins: usize, layers: usize, alpha: R, mode: SlideMode) -> Result<RampSchedule<R>> {
    if layers == 0 {
        bail!(Config, "at least one layer is required");
    }
    if !(alpha > R::zero()) || alpha > R::one() {
        bail!(Config, "alpha must lie in (0, 1], got {:?}", alpha);
    }
    if bins == 0 {
        bail!(Config, "the spectrum needs at least one bin");
    }
    let m = R::from_count(bins);
    let width = alpha.mul(m).round_half_up().max(1);
    let step = if layers == 1 {
        R::zero()
    } else {
        R::one().sub(alpha).mul(m).div(R::from_count(layers - 1))
    };
    let mut dynamic: Vec<FilterWindow> = (0..layers)
        .map(|l| {
            let end = to_bin(m.sub(R::from_count(l).mul(step)).round_half_up(), bins);
            let start = to_bin(end as i64 - width, bins);
            FilterWindow { layer: l, start, end }
        })
        .collect();

    let static_width = m.div(R::from_count(layers));
    let boundary = |l: usize| to_bin(m.sub(R::from_count(l).mul(static_width)).round_half_up(), bins);
    let mut fixed: Vec<FilterWindow> =
        (0..layers).map(|l| FilterWindow { layer: l, start: boundary(l + 1), end: boundary(l) }).collect();

    if mode.dynamic_direction() == SlideDirection::LowToHigh {
        reverse_layers(&mut dynamic);
    }
    if mode.static_direction() == SlideDirection::LowToHigh {
        reverse_layers(&mut fixed);
    }
    let schedule = RampSchedule {
        bins,
        dynamic,
        fixed,
        alpha,
        beta: R::one().div(R::from_count(layers)),
        mode,
    };
    schedule.validate()?;
    Ok(schedule)
}

fn reverse_layers(windows: &mut [FilterWindow]) {
    windows.reverse();
    for (l, w) in windows.iter_mut().enumerate() {
        w.layer = l;
    }
}

impl<R: BinRatio> RampSchedule<R> {
    pub fn layers(&self) -> usize {
        self.dynamic.len()
    }

    /// Checks the structural window invariants.
    pub fn validate(&self) -> Result<()> {
        for w in &self.dynamic {
            if w.start >= w.end || w.end > self.bins {
                bail!(Contract, "dynamic window {:?} is empty or exceeds {} bins", w, self.bins);
            }
        }
        if self.fixed.iter().any(|w| w.start > w.end) {
            bail!(Contract, "static window is reversed");
        }
        if !is_partition(&self.fixed, self.bins) {
            bail!(Contract, "static windows do not partition [0, {})", self.bins);
        }
        Ok(())
    }

    /// Whether every bin falls inside at least one dynamic window.
    pub fn dynamic_covers_all(&self) -> bool {
        let mut covered = vec![false; self.bins];
        for w in &self.dynamic {
            covered[w.start..w.end].iter_mut().for_each(|c| *c = true);
        }
        covered.into_iter().all(|c| c)
    }
}

fn is_partition(windows: &[FilterWindow], bins: usize) -> bool {
    let mut hits = vec![0usize; bins];
    for w in windows {
        if w.end > bins {
            return false;
        }
        hits[w.start..w.end].iter_mut().for_each(|h| *h += 1);
    }
    hits.into_iter().all(|h| h == 1)
}
