use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Person, Style, ViewDot};
use crate::geometry::CameraParams;
use crate::tensor::Tensor;

struct StyleParams {
    bg_mean: f64,
    bg_amp: f64,
    person: f64,
    contrast: f64,
    noise_sd: f64,
}

fn style_params(style: Style) -> StyleParams {
    match style {
        Style::A => StyleParams {
            bg_mean: 0.30,
            bg_amp: 0.12,
            person: 0.90,
            contrast: 1.0,
            noise_sd: 0.02,
        },
        Style::B => StyleParams {
            bg_mean: 0.45,
            bg_amp: 0.20,
            person: 0.80,
            contrast: 0.75,
            noise_sd: 0.06,
        },
    }
}

/// Static low-frequency background of one camera: two octaves of
/// bilinearly interpolated lattice noise.
#[derive(Clone, Debug)]
pub struct Background {
    coarse: Lattice,
    fine: Lattice,
    style: Style,
}

#[derive(Clone, Debug)]
struct Lattice {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Lattice {
    fn sample<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Lattice {
            rows,
            cols,
            values: (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        }
    }

    /// Value at normalized position `(s, t)` in `[0, 1]^2`.
    fn at(&self, s: f64, t: f64) -> f64 {
        let x = s * (self.cols - 1) as f64;
        let y = t * (self.rows - 1) as f64;
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.cols - 1), (y0 + 1).min(self.rows - 1));
        let (ax, ay) = (x - x0 as f64, y - y0 as f64);
        let v = |r: usize, c: usize| self.values[r * self.cols + c];
        (1.0 - ay) * ((1.0 - ax) * v(y0, x0) + ax * v(y0, x1))
            + ay * ((1.0 - ax) * v(y1, x0) + ax * v(y1, x1))
    }
}

impl Background {
    pub fn sample<R: Rng + ?Sized>(style: Style, rng: &mut R) -> Self {
        Background {
            coarse: Lattice::sample(4, 5, rng),
            fine: Lattice::sample(7, 9, rng),
            style,
        }
    }

    fn value(&self, s: f64, t: f64) -> f64 {
        let p = style_params(self.style);
        p.bg_mean + p.bg_amp * (0.7 * self.coarse.at(s, t) + 0.3 * self.fine.at(s, t))
    }
}

/// Image-space head-point annotations of everyone visible in `cam`: the
/// head point `(x, y, h_avg)` must be in front of the camera and inside the
/// image.
pub fn project_dots(cam: &CameraParams, people: &[Person], h_avg: f64) -> Vec<ViewDot> {
    people
        .iter()
        .filter_map(|p| {
            let q = cam.world_to_image([p.x, p.y, h_avg])?;
            cam.in_image(&q).then_some(ViewDot {
                id: p.id,
                u: q.u,
                v: q.v,
            })
        })
        .collect()
}

/// Renders one grayscale view `[1, H, W]` in `[0, 1]` and its dots.
///
/// Every person in front of the camera is a vertical Gaussian blob centered
/// on the image of `(x, y, h_avg / 2)`, about `fy * h_avg / depth` pixels
/// tall, painted far to near. Pixel values are rounded to `f32` precision
/// so they survive a single-precision round trip unchanged.
pub fn render_view<R: Rng + ?Sized>(
    cam: &CameraParams,
    people: &[Person],
    style: Style,
    background: &Background,
    h_avg: f64,
    rng: &mut R,
) -> (Tensor, Vec<ViewDot>) {
    let p = style_params(style);
    let (w, h) = (cam.width, cam.height);
    let mut img: Vec<f64> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .map(|(i, j)| background.value(j as f64 / (w - 1) as f64, i as f64 / (h - 1) as f64))
        .collect();

    let mut blobs: Vec<(f64, f64, f64)> = people
        .iter()
        .filter_map(|q| cam.world_to_image([q.x, q.y, h_avg / 2.0]))
        .map(|q| (q.depth, q.u, q.v))
        .collect();
    blobs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (depth, uc, vc) in blobs {
        let height = cam.fy * h_avg / depth;
        let (sv, su) = (height / 4.0, (height / 10.0).max(0.5));
        let (i0, i1) = (vc - 3.0 * sv, vc + 3.0 * sv);
        let (j0, j1) = (uc - 3.0 * su, uc + 3.0 * su);
        if i1 < 0.0 || j1 < 0.0 || i0 > (h - 1) as f64 || j0 > (w - 1) as f64 {
            continue;
        }
        let (i0, i1) = (
            i0.max(0.0).ceil() as usize,
            (i1.min((h - 1) as f64)).floor() as usize,
        );
        let (j0, j1) = (
            j0.max(0.0).ceil() as usize,
            (j1.min((w - 1) as f64)).floor() as usize,
        );
        for i in i0..=i1 {
            let dv = (i as f64 - vc) / sv;
            for j in j0..=j1 {
                let du = (j as f64 - uc) / su;
                let a = (-0.5 * (du * du + dv * dv)).exp();
                let px = &mut img[i * w + j];
                *px = *px * (1.0 - a) + p.person * a;
            }
        }
    }

    let noise = Normal::new(0.0, p.noise_sd).expect("positive sd");
    for px in img.iter_mut() {
        let v = 0.5 + p.contrast * (*px - 0.5) + noise.sample(rng);
        *px = v.clamp(0.0, 1.0) as f32 as f64;
    }
    let img = Tensor::new(&[1, h, w], img).expect("image shape");
    (img, project_dots(cam, people, h_avg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DEFAULT_H_AVG;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraParams {
        CameraParams::look_at(0, [-8.0, 16.0, 6.0], [16.0, 16.0, 0.0], 90.0, 90.0, 128, 96).unwrap()
    }

    fn render(people: &[Person]) -> (Tensor, Vec<ViewDot>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bg = Background::sample(Style::A, &mut rng);
        render_view(&cam(), people, Style::A, &bg, DEFAULT_H_AVG, &mut rng)
    }

    #[test]
    fn person_behind_camera_is_absent() {
        let behind = [Person {
            id: 4,
            x: -20.0,
            y: 16.0,
        }];
        let (img, dots) = render(&behind);
        let (empty, _) = render(&[]);
        assert!(dots.is_empty());
        assert_eq!(img, empty);
    }

    #[test]
    fn dots_match_projection() {
        let people = [
            Person {
                id: 2,
                x: 14.0,
                y: 15.0,
            },
            Person {
                id: 9,
                x: 20.0,
                y: 18.0,
            },
        ];
        let (_, dots) = render(&people);
        assert_eq!(dots.len(), 2);
        for d in &dots {
            let p = people.iter().find(|p| p.id == d.id).unwrap();
            let q = cam().world_to_image([p.x, p.y, DEFAULT_H_AVG]).unwrap();
            assert!((q.u - d.u).abs() < 1e-6 && (q.v - d.v).abs() < 1e-6);
        }
    }

    #[test]
    fn nearer_person_is_taller() {
        // measure blob height as the vertical run of pixels brighter than
        // the background by a margin, in the blob's column
        let measure = |x: f64| {
            let people = [Person { id: 0, x, y: 16.0 }];
            let (img, _) = render(&people);
            let (bg, _) = render(&[]);
            let q = cam()
                .world_to_image([x, 16.0, DEFAULT_H_AVG / 2.0])
                .unwrap();
            let j = q.u.round() as usize;
            (0..96)
                .filter(|&i| img.data()[i * 128 + j] - bg.data()[i * 128 + j] > 0.2)
                .count()
        };
        let near = measure(4.0);
        let far = measure(24.0);
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn pixels_are_f32_exact() {
        let (img, _) = render(&[Person {
            id: 0,
            x: 16.0,
            y: 16.0,
        }]);
        assert!(img.data().iter().all(|&v| v as f32 as f64 == v));
    }

    #[test]
    fn styles_differ_in_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bga = Background::sample(Style::A, &mut rng);
        let bgb = Background::sample(Style::B, &mut rng);
        let (a, _) = render_view(&cam(), &[], Style::A, &bga, DEFAULT_H_AVG, &mut rng);
        let (b, _) = render_view(&cam(), &[], Style::B, &bgb, DEFAULT_H_AVG, &mut rng);
        let mean = |t: &Tensor| t.sum() / t.len() as f64;
        assert!(mean(&b) > mean(&a) + 0.05);
    }
}
