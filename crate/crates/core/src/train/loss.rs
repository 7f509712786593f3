use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Axis-aligned block of scene-grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn full(hs: usize, ws: usize) -> Self {
        Rect {
            row: 0,
            col: 0,
            height: hs,
            width: ws,
        }
    }

    fn fits(&self, hs: usize, ws: usize) -> bool {
        self.height > 0
            && self.width > 0
            && self.row + self.height <= hs
            && self.col + self.width <= ws
    }
}

/// `[1, Hs, Ws]` indicator of the union of `patches`, and its pixel count.
pub fn patch_mask(hs: usize, ws: usize, patches: &[Rect]) -> Result<(Tensor, usize)> {
    if patches.is_empty() {
        return Err(Error::invalid("mse_loss needs at least one patch"));
    }
    let mut m = vec![0.0; hs * ws];
    for r in patches {
        if !r.fits(hs, ws) {
            return Err(Error::invalid(format!(
                "patch {r:?} does not fit a {hs}x{ws} grid"
            )));
        }
        for i in r.row..r.row + r.height {
            m[i * ws + r.col..i * ws + r.col + r.width].fill(1.0);
        }
    }
    let n = m.iter().filter(|&&v| v > 0.0).count();
    Ok((Tensor::new(&[1, hs, ws], m)?, n))
}

/// Mean squared error over the union of patch pixels, recorded on `tape`.
pub fn mse_loss_on(tape: &mut Tape, pred: Var, gt: &Tensor, patches: &[Rect]) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != gt.shape() || shape.len() != 3 {
        return Err(Error::shape(format!(
            "mse_loss wants matching [1, Hs, Ws] maps, got {shape:?} and {:?}",
            gt.shape()
        )));
    }
    let (mask, n) = patch_mask(shape[1], shape[2], patches)?;
    let gt = tape.constant(gt.clone());
    let mask = tape.constant(mask);
    let d = tape.sub(pred, gt)?;
    let d = tape.mul(d, mask)?;
    let d = tape.square(d);
    let s = tape.sum(d);
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// Value-only [`mse_loss_on`].
pub fn mse_loss(pred: &Tensor, gt: &Tensor, patches: &[Rect]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = mse_loss_on(&mut tape, p, gt, patches)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::new(&[1, 4, 5], (0..20).map(|v| v as f64 * 0.1).collect()).unwrap()
    }

    #[test]
    fn identical_maps_give_zero() {
        assert_eq!(
            mse_loss(&ramp(), &ramp(), &[Rect::full(4, 5)]).unwrap(),
            0.0
        );
    }

    #[test]
    fn offset_by_one_gives_one() {
        let p = ramp().map(|v| v + 1.0);
        let patches = [
            Rect {
                row: 0,
                col: 0,
                height: 2,
                width: 2,
            },
            Rect {
                row: 1,
                col: 1,
                height: 3,
                width: 3,
            },
        ];
        assert!((mse_loss(&p, &ramp(), &patches).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_is_scaled_residual_inside_patches() {
        let gt = ramp();
        let pred = gt.map(|v| 0.5 - v * v);
        let patches = [
            Rect {
                row: 0,
                col: 0,
                height: 2,
                width: 3,
            },
            Rect {
                row: 1,
                col: 2,
                height: 2,
                width: 3,
            },
        ];
        let (mask, n) = patch_mask(4, 5, &patches).unwrap();
        // the rects share the single cell (1, 2)
        assert_eq!(n, 6 + 6 - 1);
        let mut t = Tape::new();
        let p = t.leaf(pred.clone());
        let l = mse_loss_on(&mut t, p, &gt, &patches).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(p).unwrap();
        for i in 0..20 {
            let want = if mask.data()[i] > 0.0 {
                2.0 * (pred.data()[i] - gt.data()[i]) / n as f64
            } else {
                0.0
            };
            assert!((g.data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn bad_patches_are_errors() {
        assert!(mse_loss(&ramp(), &ramp(), &[]).is_err());
        let out = Rect {
            row: 3,
            col: 0,
            height: 2,
            width: 1,
        };
        assert!(mse_loss(&ramp(), &ramp(), &[out]).is_err());
    }
}
