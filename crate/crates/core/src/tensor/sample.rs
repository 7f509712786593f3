use crate::error::{Error, Result};

/// Continuous source pixel coordinates `(u, v)` for every cell of an output
/// raster (an inverse warp). Cells that should read nothing carry a
/// far-out-of-bounds sentinel.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl SamplingGrid {
    pub const SENTINEL: [f64; 2] = [-1e6, -1e6];

    pub fn new(height: usize, width: usize, coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.len() != height * width {
            return Err(Error::shape(format!(
                "sampling grid {height}x{width} needs {} coordinates, got {}",
                height * width,
                coords.len()
            )));
        }
        Ok(SamplingGrid {
            height,
            width,
            coords,
        })
    }

    /// Maps every output cell `(i, j)` to source pixel `(j, i)`.
    pub fn identity(height: usize, width: usize) -> Self {
        let coords = (0..height)
            .flat_map(|i| (0..width).map(move |j| [j as f64, i as f64]))
            .collect();
        SamplingGrid {
            height,
            width,
            coords,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        self.coords[i * self.width + j]
    }

    /// Same grid for a source image downsampled by `factor` (coordinates
    /// divided by it). Sentinels stay out of bounds.
    pub fn scaled(&self, factor: f64) -> Self {
        let coords = self
            .coords
            .iter()
            .map(|&c| {
                if c == Self::SENTINEL {
                    c
                } else {
                    [c[0] / factor, c[1] / factor]
                }
            })
            .collect();
        SamplingGrid {
            height: self.height,
            width: self.width,
            coords,
        }
    }

    /// Bilinear taps for every output cell against an `h x w` source.
    pub(crate) fn taps(&self, h: usize, w: usize) -> Vec<Option<Taps>> {
        self.coords
            .iter()
            .map(|&[u, v]| Taps::new(u, v, h, w))
            .collect()
    }
}

/// Four source indices and weights of one bilinear read.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub wt: [f64; 4],
}

impl Taps {
    /// `None` when `(u, v)` falls outside `[0, w-1] x [0, h-1]`.
    fn new(u: f64, v: f64, h: usize, w: usize) -> Option<Taps> {
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(w - 1);
        let y0 = (v.floor() as usize).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        Some(Taps {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            wt: [
                (1.0 - ax) * (1.0 - ay),
                ax * (1.0 - ay),
                (1.0 - ax) * ay,
                ax * ay,
            ],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_on_last_pixel_are_in_bounds() {
        let t = Taps::new(3.0, 2.0, 3, 4).unwrap();
        assert_eq!(t.idx[0], 2 * 4 + 3);
        assert!((t.wt.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t.wt[0], 1.0);
    }

    #[test]
    fn taps_reject_outside() {
        assert!(Taps::new(-0.01, 0.0, 3, 4).is_none());
        assert!(Taps::new(0.0, 2.01, 3, 4).is_none());
        assert!(Taps::new(f64::NAN, 0.0, 3, 4).is_none());
    }

    #[test]
    fn scaled_keeps_sentinel() {
        let g = SamplingGrid::new(1, 2, vec![[8.0, 4.0], SamplingGrid::SENTINEL]).unwrap();
        let s = g.scaled(4.0);
        assert_eq!(s.at(0, 0), [2.0, 1.0]);
        assert_eq!(s.at(0, 1), SamplingGrid::SENTINEL);
    }
}
