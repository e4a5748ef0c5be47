//! Deterministic software rasterizer for the pendulum scene.
//!
//! A fixed-length rod is drawn from the image center at the current angle on
//! a constant white background, with a dark axle disc at the pivot. Edges are
//! anti-aliased by signed-distance coverage and the result is quantized to
//! the 8-bit grid, so frames round-trip exactly through the on-disk format.
//! The renderer depends only on the (wrapped) angle; velocity is conveyed by
//! frame pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FRAME_SIZE: usize = 64;
pub const FRAME_CHANNELS: usize = 3;
/// Channels of an observation: two stacked RGB frames.
pub const OBS_CHANNELS: usize = 2 * FRAME_CHANNELS;

const ROD_LENGTH: f64 = 22.0;
const ROD_HALF_WIDTH: f64 = 2.6;
const AXLE_RADIUS: f64 = 2.2;
const CENTER: f64 = (FRAME_SIZE / 2) as f64 - 0.5;

// Saturated palette: backgrounds and rod interiors carry zero Bernoulli
// entropy, so reconstruction error concentrates on geometry, not on color.
const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
const ROD: [f64; 3] = [1.0, 0.0, 0.0];
const AXLE: [f64; 3] = [0.0, 0.0, 0.0];

/// One 64x64 RGB frame. Pixels are stored on the 8-bit grid and exposed as
/// reals in `[0, 1]`; layout is channel-major (`[3, 64, 64]`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    data: Vec<u8>,
}

impl Frame {
    pub fn from_bytes(data: Vec<u8>) -> Result<Self> {
        if data.len() != FRAME_CHANNELS * FRAME_SIZE * FRAME_SIZE {
            return Err(Error::Shape(format!(
                "frame byte length {} != {}",
                data.len(),
                FRAME_CHANNELS * FRAME_SIZE * FRAME_SIZE
            )));
        }
        Ok(Frame { data })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Pixel in `[0, 1]` at channel `c`, row `y`, column `x`.
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * FRAME_SIZE + y) * FRAME_SIZE + x] as f64 / 255.0
    }

    /// Full frame as `[0, 1]` reals, channel-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn mean_pixel(&self) -> f64 {
        self.data.iter().map(|&b| b as f64 / 255.0).sum::<f64>() / self.data.len() as f64
    }
}

/// Renders the scene for a physical state. Depends only on the angle: two
/// states with identical `theta` produce identical frames.
pub fn render(state: &crate::env::PhysicalState) -> Frame {
    render_angle(state.theta)
}

/// Renders an empty scene (background + axle, no rod); test/diagnostic aid.
pub fn render_background() -> Frame {
    render_impl(None)
}

fn render_angle(theta: f64) -> Frame {
    let theta = crate::env::wrap_angle(theta);
    // rod tip in screen coordinates; theta = 0 points up (negative row)
    let tip = (
        CENTER + ROD_LENGTH * theta.sin(),
        CENTER - ROD_LENGTH * theta.cos(),
    );
    render_impl(Some(tip))
}

fn render_impl(tip: Option<(f64, f64)>) -> Frame {
    let mut data = vec![0u8; FRAME_CHANNELS * FRAME_SIZE * FRAME_SIZE];
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let px = x as f64;
            let py = y as f64;
            let mut color = BACKGROUND;
            if let Some((tx, ty)) = tip {
                let cov = segment_coverage(px, py, CENTER, CENTER, tx, ty, ROD_HALF_WIDTH);
                if cov > 0.0 {
                    for (c, r) in color.iter_mut().zip(ROD.iter()) {
                        *c = *c * (1.0 - cov) + r * cov;
                    }
                }
            }
            let axle_cov = disc_coverage(px, py, CENTER, CENTER, AXLE_RADIUS);
            if axle_cov > 0.0 {
                for (c, a) in color.iter_mut().zip(AXLE.iter()) {
                    *c = *c * (1.0 - axle_cov) + a * axle_cov;
                }
            }
            for ch in 0..FRAME_CHANNELS {
                data[(ch * FRAME_SIZE + y) * FRAME_SIZE + x] =
                    (color[ch].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Frame { data }
}

/// Coverage of a pixel by a capsule (segment with radius), by signed distance.
fn segment_coverage(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64, radius: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    let dist = ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt();
    (radius + 0.5 - dist).clamp(0.0, 1.0)
}

fn disc_coverage(px: f64, py: f64, cx: f64, cy: f64, radius: f64) -> f64 {
    let dist = ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt();
    (radius + 0.5 - dist).clamp(0.0, 1.0)
}

/// Two consecutive frames, channel-stacked `(previous, current)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub prev: Frame,
    pub cur: Frame,
}

impl Observation {
    /// Channel-stacked `[6 * 64 * 64]` reals: channels 0-2 are the previous
    /// frame, channels 3-5 the current one.
    pub fn to_f64(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_CHANNELS * FRAME_SIZE * FRAME_SIZE);
        v.extend(self.prev.to_f64());
        v.extend(self.cur.to_f64());
        v
    }

    pub fn unstack(&self) -> (&Frame, &Frame) {
        (&self.prev, &self.cur)
    }
}

/// Stacks two frames into an observation, `(previous, current)`.
pub fn make_observation(prev: Frame, cur: Frame) -> Observation {
    Observation { prev, cur }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PhysicalState;

    #[test]
    fn depends_only_on_angle() {
        let a = render(&PhysicalState::new(0.0, 0.0));
        let b = render(&PhysicalState::new(0.0, 5.0));
        assert_eq!(a, b);
    }

    #[test]
    fn periodic_in_angle() {
        use std::f64::consts::PI;
        for theta in [0.0, 0.3, -1.2, 2.9] {
            let a = render(&PhysicalState::new(theta, 0.0));
            let b = render(&PhysicalState::new(theta + 2.0 * PI, 0.0));
            assert_eq!(a, b, "theta {theta}");
        }
    }

    #[test]
    fn rod_visible_against_background() {
        let scene = render(&PhysicalState::new(0.0, 0.0));
        let empty = render_background();
        assert!(
            (scene.mean_pixel() - empty.mean_pixel()).abs() > 1e-3,
            "rod should change the mean pixel value"
        );
        // distinct angles give distinct frames
        let down = render(&PhysicalState::new(std::f64::consts::PI, 0.0));
        assert_ne!(scene, down);
    }

    #[test]
    fn pixels_in_unit_range() {
        let f = render(&PhysicalState::new(1.1, 0.0));
        for c in 0..FRAME_CHANNELS {
            for y in 0..FRAME_SIZE {
                for x in 0..FRAME_SIZE {
                    let v = f.get(c, y, x);
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn observation_stacking_contract() {
        let f1 = render(&PhysicalState::new(0.5, 0.0));
        let f2 = render(&PhysicalState::new(0.9, 0.0));
        let obs = make_observation(f1.clone(), f2.clone());
        let v = obs.to_f64();
        assert_eq!(v.len(), OBS_CHANNELS * FRAME_SIZE * FRAME_SIZE);
        let half = v.len() / 2;
        assert_eq!(&v[..half], &f1.to_f64()[..]);
        assert_eq!(&v[half..], &f2.to_f64()[..]);
        // round-trip
        let (p, c) = obs.unstack();
        assert_eq!(p, &f1);
        assert_eq!(c, &f2);
        // identical halves for identical frames
        let same = make_observation(f1.clone(), f1.clone());
        let sv = same.to_f64();
        assert_eq!(&sv[..half], &sv[half..]);
    }
}
