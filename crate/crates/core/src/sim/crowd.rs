use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Person, SceneSpec};

/// Minimum distance between two people, meters.
pub const MIN_SPACING: f64 = 0.3;

const BACKGROUND_FRACTION: f64 = 0.25;

/// Places `N ~ U{people.0..=people.1}` people from a mixture of 1-4
/// Gaussian clusters plus a uniform background, clipped to the scene and
/// kept at least [`MIN_SPACING`] apart.
pub fn place_crowd<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Vec<Person> {
    let (lo, hi) = spec.people;
    let n = rng.random_range(lo..=hi);
    let e = spec.extent;
    let n_clusters = rng.random_range(1..=4usize);
    let clusters: Vec<([f64; 2], f64)> = (0..n_clusters)
        .map(|_| {
            (
                [
                    rng.random_range(0.2 * e..0.8 * e),
                    rng.random_range(0.2 * e..0.8 * e),
                ],
                rng.random_range(0.05 * e..0.12 * e),
            )
        })
        .collect();

    let mut people: Vec<Person> = Vec::with_capacity(n);
    let clear = |people: &[Person], x: f64, y: f64| {
        people
            .iter()
            .all(|p| (p.x - x).hypot(p.y - y) >= MIN_SPACING)
    };
    while people.len() < n {
        let mut placed = None;
        for _ in 0..50 {
            let (x, y) = if rng.random_bool(BACKGROUND_FRACTION) {
                (rng.random_range(0.0..e), rng.random_range(0.0..e))
            } else {
                let (c, sd) = clusters[rng.random_range(0..n_clusters)];
                let d = Normal::new(0.0, sd).expect("positive sd");
                (
                    (c[0] + d.sample(rng)).clamp(0.0, e),
                    (c[1] + d.sample(rng)).clamp(0.0, e),
                )
            };
            if clear(&people, x, y) {
                placed = Some((x, y));
                break;
            }
        }
        // crowded clusters: fall back to uniform placement
        let (x, y) = match placed {
            Some(p) => p,
            None => loop {
                let (x, y) = (rng.random_range(0.0..e), rng.random_range(0.0..e));
                if clear(&people, x, y) {
                    break (x, y);
                }
            },
        };
        people.push(Person {
            id: people.len() as u32,
            x,
            y,
        });
    }
    people
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_count_inside_extent_and_spaced() {
        let spec = SceneSpec {
            people: (5, 5),
            ..SceneSpec::default()
        };
        for seed in 0..20 {
            let p = place_crowd(&spec, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(p.len(), 5);
            for (i, a) in p.iter().enumerate() {
                assert_eq!(a.id, i as u32);
                assert!((0.0..=spec.extent).contains(&a.x) && (0.0..=spec.extent).contains(&a.y));
                for b in &p[i + 1..] {
                    assert!((a.x - b.x).hypot(a.y - b.y) >= MIN_SPACING);
                }
            }
        }
    }

    #[test]
    fn dense_crowd_terminates() {
        let spec = SceneSpec {
            people: (300, 300),
            extent: 16.0,
            ..SceneSpec::default()
        };
        let p = place_crowd(&spec, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(p.len(), 300);
    }

    #[test]
    fn same_seed_same_crowd() {
        let spec = SceneSpec::default();
        let a = place_crowd(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        let b = place_crowd(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }
}
