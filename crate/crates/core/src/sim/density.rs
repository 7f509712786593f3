use super::Person;
use crate::error::{Error, Result};
use crate::geometry::ScenePlaneGrid;
use crate::tensor::Tensor;

/// Scene-plane density `[1, Hs, Ws]`: one unit-mass Gaussian per person
/// (std `sigma` cells, truncated at `4 sigma`, renormalized over the cells
/// that survive truncation and the grid border).
pub fn gt_density(people: &[Person], grid: &ScenePlaneGrid, sigma: f64) -> Result<Tensor> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid("density sigma must be positive"));
    }
    let (hs, ws) = (grid.hs, grid.ws);
    let mut map = vec![0.0; hs * ws];
    let radius = 4.0 * sigma;
    let mut kernel = Vec::new();
    for p in people {
        let (r, c) = grid.world_to_cell(p.x, p.y);
        let i0 = (r - radius).ceil().max(0.0) as usize;
        let j0 = (c - radius).ceil().max(0.0) as usize;
        let i1 = ((r + radius).floor() as isize).min(hs as isize - 1);
        let j1 = ((c + radius).floor() as isize).min(ws as isize - 1);
        if i1 < i0 as isize || j1 < j0 as isize {
            continue;
        }
        kernel.clear();
        let mut mass = 0.0;
        for i in i0..=i1 as usize {
            for j in j0..=j1 as usize {
                let d2 = (i as f64 - r).powi(2) + (j as f64 - c).powi(2);
                if d2 <= radius * radius {
                    let k = (-d2 / (2.0 * sigma * sigma)).exp();
                    mass += k;
                    kernel.push((i * ws + j, k));
                }
            }
        }
        if mass > 0.0 {
            for &(idx, k) in &kernel {
                map[idx] += k / mass;
            }
        }
    }
    Tensor::new(&[1, hs, ws], map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_H_AVG;

    fn grid() -> ScenePlaneGrid {
        ScenePlaneGrid::covering(32.0, 0.5, DEFAULT_H_AVG).unwrap()
    }

    #[test]
    fn empty_crowd_is_zero() {
        let d = gt_density(&[], &grid(), 2.0).unwrap();
        assert_eq!(d.shape(), &[1, 64, 64]);
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mass_equals_count() {
        let people: Vec<Person> = (0..7)
            .map(|k| Person {
                id: k,
                x: 8.0 + 2.3 * k as f64,
                y: 12.0 + 1.1 * k as f64,
            })
            .collect();
        let d = gt_density(&people, &grid(), 2.0).unwrap();
        assert!((d.sum() - 7.0).abs() < 1e-6);
    }

    #[test]
    fn mass_preserved_at_border() {
        let people = [Person {
            id: 0,
            x: 0.0,
            y: 31.9,
        }];
        let d = gt_density(&people, &grid(), 2.0).unwrap();
        assert!((d.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn peak_at_person_cell() {
        let g = grid();
        let people = [Person {
            id: 0,
            x: 10.3,
            y: 20.6,
        }];
        let d = gt_density(&people, &g, 2.0).unwrap();
        let (r, c) = g.world_to_cell(10.3, 20.6);
        let (r, c) = (r.round() as usize, c.round() as usize);
        let argmax = d
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, r * 64 + c);
    }

    #[test]
    fn sigma_must_be_positive() {
        assert!(gt_density(&[], &grid(), 0.0).is_err());
    }
}
