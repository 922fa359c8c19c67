use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Shape classes shared by the image and the video sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Cross,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Disc, Shape::Cross, Shape::Triangle];

    /// Binary `(2r+1)²` mask centered on the middle pixel.
    pub fn mask(self, r: usize) -> Vec<f64> {
        let n = 2 * r + 1;
        let ri = r as i64;
        let arm = (r as f64 / 3.0).round() as i64;
        let mut m = vec![0.0; n * n];
        for y in -ri..=ri {
            for x in -ri..=ri {
                let inside = match self {
                    Shape::Square => y.abs() < ri && x.abs() < ri,
                    Shape::Disc => x * x + y * y <= ri * ri,
                    Shape::Cross => x.abs() <= arm || y.abs() <= arm,
                    Shape::Triangle => 2 * x.abs() <= y + ri,
                };
                if inside {
                    m[((y + ri) as usize) * n + (x + ri) as usize] = 1.0;
                }
            }
        }
        m
    }
}

/// Appearance of one example, fixed across its frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub shape: Shape,
    pub radius: usize,
    pub color: Vec<f64>,
    pub background: Vec<f64>,
    pub noise: f64,
}

impl Scene {
    pub fn random(shape: Shape, radius: usize, channels: usize, noise: f64, rng: &mut impl Rng) -> Self {
        Scene {
            shape,
            radius,
            color: (0..channels).map(|_| rng.random_range(0.55..1.0)).collect(),
            background: (0..channels).map(|_| rng.random_range(0.0..0.35)).collect(),
            noise,
        }
    }

    /// Coverage of the shape centered at `(cx, cy)` in pixel coordinates.
    /// Each mask pixel is spread bilinearly over its four neighbours, so the
    /// coverage centroid moves exactly with the center.
    pub fn coverage(&self, h: usize, w: usize, cx: f64, cy: f64) -> Vec<f64> {
        let r = self.radius;
        let n = 2 * r + 1;
        let mask = self.shape.mask(r);
        let (x0, y0) = (cx - r as f64, cy - r as f64);
        let (fx, fy) = (x0.floor(), y0.floor());
        let (ax, ay) = (x0 - fx, y0 - fy);
        let weights = [(0, 0, (1.0 - ax) * (1.0 - ay)), (0, 1, ax * (1.0 - ay)), (1, 0, (1.0 - ax) * ay), (1, 1, ax * ay)];
        let mut alpha = vec![0.0; h * w];
        for ty in 0..n {
            for tx in 0..n {
                let m = mask[ty * n + tx];
                if m == 0.0 {
                    continue;
                }
                for &(dy, dx, wgt) in &weights {
                    let py = fy as i64 + (ty + dy) as i64;
                    let px = fx as i64 + (tx + dx) as i64;
                    if (0..h as i64).contains(&py) && (0..w as i64).contains(&px) {
                        alpha[py as usize * w + px as usize] += m * wgt;
                    }
                }
            }
        }
        alpha
    }

    /// Appends one `C×H×W` frame (channel planes for this frame only) to
    /// `planes`, one vector per channel, with fresh pixel noise.
    pub fn render(&self, h: usize, w: usize, cx: f64, cy: f64, rng: &mut impl Rng, planes: &mut [Vec<f64>]) {
        let alpha = self.coverage(h, w, cx, cy);
        let normal = (self.noise > 0.0).then(|| Normal::new(0.0, self.noise).expect("finite noise level"));
        for (c, plane) in planes.iter_mut().enumerate() {
            let (fg, bg) = (self.color[c], self.background[c]);
            for &a in &alpha {
                let a = a.min(1.0);
                let eps = normal.as_ref().map_or(0.0, |d| d.sample(rng));
                plane.push((bg * (1.0 - a) + fg * a + eps).clamp(0.0, 1.0));
            }
        }
    }
}
