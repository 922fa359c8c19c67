//! Synthetic image and video sources sharing one shape renderer, image to
//! clip inflation, frame sampling for auxiliary losses and the mixed
//! multi-source batch stream.
//!
//! Image labels are shape classes. Video labels combine a shape with a motion
//! direction (`shape · directions + direction`), so a single frame reveals the
//! shape while the direction needs several frames. Every example is a pure
//! function of `(seed, source_id, index)`.

mod pnm;
mod render;
mod stream;

pub use pnm::{write_pgm, write_ppm, write_frame};
pub use render::{Scene, Shape};
pub use stream::{MixedBatch, MixedStream, SubBatch};

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Modality;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageExample<T> {
    /// `C×1×H×W` in `[0, 1]`.
    pub pixels: Tensor<T>,
    pub label: usize,
    pub source_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipExample<T> {
    /// `C×L×H×W` in `[0, 1]`.
    pub pixels: Tensor<T>,
    pub label: usize,
    pub source_id: usize,
}

/// Which frame of a clip feeds the image-pathway auxiliary loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStrategy {
    Center,
    #[default]
    Random,
}

impl FromStr for FrameStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "center" => Ok(FrameStrategy::Center),
            "random" => Ok(FrameStrategy::Random),
            _ => Err(Error::InvalidArgument(format!("frame strategy must be center or random, got `{s}`"))),
        }
    }
}

/// Unit displacement per frame for each direction class; opposite directions
/// are adjacent (`d ^ 1`).
/// Unit motion vectors `(dx, dy)` indexed by direction label.
pub const DIRECTIONS: [(f64, f64); 4] = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];

pub fn opposite_direction(d: usize) -> usize {
    d ^ 1
}

/// One labelled source of examples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: usize,
    pub modality: Modality,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frames per training clip (video sources).
    pub clip_len: usize,
    /// Frames of a full evaluation video (video sources).
    pub full_len: usize,
    /// Number of shape classes used, taken from the front of [`Shape::ALL`].
    pub shapes: usize,
    /// 2 (horizontal) or 4 (horizontal and vertical) motion directions.
    pub directions: usize,
    /// Pixels per frame.
    pub speed: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Half-size of the shape masks in pixels.
    pub radius: usize,
    /// Relative sampling rate in a mixed stream.
    pub weight: f64,
}

impl SourceSpec {
    pub fn image(source_id: usize, channels: usize, height: usize, width: usize) -> Self {
        SourceSpec {
            source_id,
            modality: Modality::Image,
            channels,
            height,
            width,
            clip_len: 1,
            full_len: 1,
            shapes: 4,
            directions: 4,
            speed: 1.0,
            noise: 0.05,
            radius: (height.min(width) / 8).max(2),
            weight: 1.0,
        }
    }

    pub fn video(source_id: usize, channels: usize, height: usize, width: usize, clip_len: usize) -> Self {
        SourceSpec {
            modality: Modality::Video,
            clip_len,
            full_len: 2 * clip_len,
            ..SourceSpec::image(source_id, channels, height, width)
        }
    }

    /// Label count: shapes for images, shapes × directions for videos.
    pub fn classes(&self) -> usize {
        match self.modality {
            Modality::Image => self.shapes,
            Modality::Video => self.shapes * self.directions,
        }
    }

    /// Frames per example.
    pub fn frames(&self) -> usize {
        match self.modality {
            Modality::Image => 1,
            Modality::Video => self.clip_len,
        }
    }

    pub fn example_shape(&self) -> [usize; 4] {
        [self.channels, self.frames(), self.height, self.width]
    }

    /// Distance from the border to the center of a moving shape at its
    /// reference frame, keeping every frame of a full video inside.
    fn motion_margin(&self) -> f64 {
        (self.radius + 1) as f64 + self.speed * (self.full_len / 2) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("source {}: {m}", self.source_id)));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return fail("channels, height and width must be positive".into());
        }
        if !(1..=4).contains(&self.shapes) {
            return fail(format!("shapes must be in 1..=4, got {}", self.shapes));
        }
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return fail(format!("weight must be finite and ≥ 0, got {}", self.weight));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be finite and ≥ 0, got {}", self.noise));
        }
        if 2 * self.radius + 3 > self.height.min(self.width) {
            return fail(format!("radius {} does not fit {}×{}", self.radius, self.height, self.width));
        }
        if self.modality == Modality::Video {
            if self.directions != 2 && self.directions != 4 {
                return fail(format!("directions must be 2 or 4, got {}", self.directions));
            }
            if self.clip_len == 0 || self.full_len < self.clip_len {
                return fail(format!("need 1 ≤ clip_len ≤ full_len, got {} and {}", self.clip_len, self.full_len));
            }
            if !(self.speed > 0.0 && self.speed.is_finite()) {
                return fail(format!("speed must be positive, got {}", self.speed));
            }
            let m = self.motion_margin();
            if 2.0 * m > self.height.min(self.width) as f64 - 1.0 {
                return fail(format!(
                    "{} frames at {} px/frame do not fit {}×{}",
                    self.full_len, self.speed, self.height, self.width
                ));
            }
        }
        Ok(())
    }

    fn expect(&self, modality: Modality, op: &str) {
        assert_eq!(self.modality, modality, "{op} needs a {modality} source");
    }
}

fn example_rng(seed: u64, source_id: usize, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (source_id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

fn to_tensor<T: Real>(shape: [usize; 4], planes: Vec<Vec<f64>>) -> Tensor<T> {
    let data = planes.into_iter().flatten().map(T::from_f64).collect();
    Tensor::new(shape.to_vec(), data).expect("generator extents")
}

/// One shape at a uniformly random position on a noisy background.
pub fn gen_shape_image<T: Real>(source: &SourceSpec, seed: u64, index: u64) -> ImageExample<T> {
    source.expect(Modality::Image, "gen_shape_image");
    let mut rng = example_rng(seed, source.source_id, index);
    let label = rng.random_range(0..source.shapes);
    let scene = Scene::random(Shape::ALL[label], source.radius, source.channels, source.noise, &mut rng);
    let lo = (source.radius + 1) as f64;
    let cx = rng.random_range(lo..=source.width as f64 - 1.0 - lo);
    let cy = rng.random_range(lo..=source.height as f64 - 1.0 - lo);
    let mut planes = vec![Vec::new(); source.channels];
    scene.render(source.height, source.width, cx, cy, &mut rng, &mut planes);
    ImageExample {
        pixels: to_tensor([source.channels, 1, source.height, source.width], planes),
        label,
        source_id: source.source_id,
    }
}

/// Full description of a moving-shape sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Motion {
    pub scene: Scene,
    pub direction: usize,
    /// Center of the shape at the reference frame `frames / 2`.
    pub center: (f64, f64),
    pub frames: usize,
}

impl Motion {
    pub fn velocity(&self, speed: f64) -> (f64, f64) {
        let (dx, dy) = DIRECTIONS[self.direction];
        (dx * speed, dy * speed)
    }

    /// Shape center at frame `k`.
    pub fn position(&self, k: usize, speed: f64) -> (f64, f64) {
        let (vx, vy) = self.velocity(speed);
        let dt = k as f64 - (self.frames / 2) as f64;
        (self.center.0 + dt * vx, self.center.1 + dt * vy)
    }

    /// Renders `C×frames×H×W` planes, drawing frame noise from `rng` in frame order.
    pub fn render<T: Real>(&self, source: &SourceSpec, rng: &mut impl Rng) -> Tensor<T> {
        let mut planes = vec![Vec::new(); source.channels];
        for k in 0..self.frames {
            let (cx, cy) = self.position(k, source.speed);
            self.scene.render(source.height, source.width, cx, cy, rng, &mut planes);
        }
        to_tensor([source.channels, self.frames, source.height, source.width], planes)
    }
}

/// Draws the label, appearance and reference position of a video example.
/// The reference-frame position is uniform over a box that is the same for
/// every direction, so that frame alone says nothing about the motion.
fn sample_motion(source: &SourceSpec, rng: &mut impl Rng, frames: usize) -> (usize, Motion) {
    let label = rng.random_range(0..source.classes());
    let (shape, direction) = (label / source.directions, label % source.directions);
    let scene = Scene::random(Shape::ALL[shape], source.radius, source.channels, source.noise, rng);
    let m = source.motion_margin();
    let cx = rng.random_range(m..=source.width as f64 - 1.0 - m);
    let cy = rng.random_range(m..=source.height as f64 - 1.0 - m);
    let motion = Motion {
        scene,
        direction,
        center: (cx, cy),
        frames,
    };
    (label, motion)
}

fn gen_motion<T: Real>(source: &SourceSpec, seed: u64, index: u64, frames: usize) -> ClipExample<T> {
    source.expect(Modality::Video, "gen_motion_clip");
    let mut rng = example_rng(seed, source.source_id, index);
    let (label, motion) = sample_motion(source, &mut rng, frames);
    ClipExample {
        pixels: motion.render(source, &mut rng),
        label,
        source_id: source.source_id,
    }
}

/// A `clip_len`-frame clip of one shape moving at constant velocity.
///
/// # Panics
/// If `source` fails [`SourceSpec::validate`].
pub fn gen_motion_clip<T: Real>(source: &SourceSpec, seed: u64, index: u64) -> ClipExample<T> {
    gen_motion(source, seed, index, source.clip_len)
}

/// A `full_len`-frame video for multi-clip evaluation.
///
/// # Panics
/// If `source` fails [`SourceSpec::validate`].
pub fn gen_full_video<T: Real>(source: &SourceSpec, seed: u64, index: u64) -> ClipExample<T> {
    gen_motion(source, seed, index, source.full_len)
}

/// Copies the image into every frame of an `frames`-frame static clip.
pub fn inflate_image_to_clip<T: Real>(img: &ImageExample<T>, frames: usize) -> Result<ClipExample<T>> {
    Ok(ClipExample {
        pixels: img.pixels.inflate_frames(frames)?,
        label: img.label,
        source_id: img.source_id,
    })
}

/// Frame index chosen by `strategy` for an `frames`-frame clip.
pub fn aux_frame_index(frames: usize, strategy: FrameStrategy, seed: u64) -> usize {
    match strategy {
        FrameStrategy::Center => frames / 2,
        FrameStrategy::Random => ChaCha8Rng::seed_from_u64(seed).random_range(0..frames),
    }
}

/// One frame of a clip as an image carrying the video label.
pub fn sample_aux_frame<T: Real>(clip: &ClipExample<T>, strategy: FrameStrategy, seed: u64) -> Result<ImageExample<T>> {
    let frames = clip.pixels.shape().get(1).copied().unwrap_or(0);
    if frames == 0 {
        return Err(Error::shape("sample_aux_frame", "clip has no frames"));
    }
    Ok(ImageExample {
        pixels: clip.pixels.frame(aux_frame_index(frames, strategy, seed))?,
        label: clip.label,
        source_id: clip.source_id,
    })
}
