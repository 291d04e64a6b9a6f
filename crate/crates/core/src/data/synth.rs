//! Layered moving-shape scenes with exact masks, depth, and flow.
//!
//! Every object is a flat-colored shape at a constant depth translating with a
//! constant velocity over a static textured background. Colors are attenuated
//! toward a haze color with distance, which gives single frames a depth cue.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{VideoSample, VideoSequence};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const BACKGROUND_DEPTH: f64 = 10.0;
const HAZE_RATE: f64 = 0.15;
const HAZE_COLOR: [f64; 3] = [0.72, 0.76, 0.82];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Radius of a disc, half side of a rectangle, circumradius of a triangle.
    pub size: f64,
    /// Center `(x, y)` at frame 0, in pixels.
    pub position: [f64; 2],
    /// `(dx, dy)` per frame.
    pub velocity: [f64; 2],
    pub depth: f64,
    pub is_primary: bool,
    pub color: [f64; 3],
}

impl ObjectSpec {
    fn center(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        (self.position[0] + self.velocity[0] * t, self.position[1] + self.velocity[1] * t)
    }

    /// Whether the pixel center `(px, py)` is covered at frame `t`.
    fn covers(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center(t);
        let (dx, dy) = (px - cx, py - cy);
        let s = self.size;
        match self.shape {
            Shape::Disc => dx * dx + dy * dy <= s * s,
            Shape::Rectangle => dx.abs() <= s && dy.abs() <= s,
            Shape::Triangle => {
                // upward-pointing equilateral triangle
                let h = 3f64.sqrt() / 2.0 * s;
                let v = [(0.0, -s), (-h, 0.5 * s), (h, 0.5 * s)];
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let (d0, d1, d2) = (side(v[0], v[1]), side(v[1], v[2]), side(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhotometricRegime {
    /// Per-video brightness offset range.
    pub brightness: [f64; 2],
    /// Per-video contrast factor range.
    pub contrast: [f64; 2],
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_std: f64,
}

impl Default for PhotometricRegime {
    fn default() -> Self {
        Self { brightness: [-0.05, 0.05], contrast: [0.9, 1.1], noise_std: 0.01 }
    }
}

impl PhotometricRegime {
    pub fn shifted(&self, shift: &DomainShift) -> Self {
        Self {
            brightness: self.brightness.map(|b| b + shift.brightness),
            contrast: self.contrast.map(|c| c * shift.contrast),
            noise_std: self.noise_std + shift.noise_std,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.brightness[0] <= self.brightness[1]) {
            return Err(Error::validation("photometric.brightness", "range is inverted"));
        }
        if !(self.contrast[0] > 0.0 && self.contrast[0] <= self.contrast[1]) {
            return Err(Error::validation("photometric.contrast", "range must be positive and ordered"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::validation("photometric.noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

/// Photometric difference between the training and test domains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Added to both ends of the brightness range.
    pub brightness: f64,
    /// Multiplies both ends of the contrast range.
    pub contrast: f64,
    /// Added to the noise standard deviation.
    pub noise_std: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::NONE
    }
}

impl DomainShift {
    pub const NONE: DomainShift = DomainShift { brightness: 0.0, contrast: 1.0, noise_std: 0.0 };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background_depth: f64,
    pub background_color: [f64; 3],
    pub objects: Vec<ObjectSpec>,
    pub photometric: PhotometricRegime,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::validation("frames", "a scene needs at least one frame"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("height/width", "canvas must be non-empty"));
        }
        if !(self.background_depth > 0.0) {
            return Err(Error::validation("background_depth", "must be positive"));
        }
        self.photometric.validate()?;
        let primaries: Vec<usize> = (0..self.objects.len()).filter(|&i| self.objects[i].is_primary).collect();
        if primaries.len() != 1 {
            return Err(Error::validation("objects", format!("expected exactly one primary object, found {}", primaries.len())));
        }
        let extent = self.height.min(self.width) as f64;
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size > 0.0) || 2.0 * o.size > extent {
                return Err(Error::validation(format!("objects[{i}].size"), format!("{} does not fit a {extent}-pixel canvas", o.size)));
            }
            if !(o.depth > 0.0) {
                return Err(Error::validation(format!("objects[{i}].depth"), "must be positive"));
            }
        }
        let p = &self.objects[primaries[0]];
        let nearest = self
            .objects
            .iter()
            .filter(|o| !o.is_primary)
            .map(|o| o.depth)
            .fold(self.background_depth, f64::min);
        if !(p.depth < nearest) {
            return Err(Error::validation(
                format!("objects[{}].depth", primaries[0]),
                "the primary object must be strictly nearest",
            ));
        }
        if p.velocity == [0.0, 0.0] {
            return Err(Error::validation(format!("objects[{}].velocity", primaries[0]), "the primary object must move"));
        }
        Ok(())
    }

    fn background_albedo(&self, x: usize, y: usize) -> [f64; 3] {
        // smooth stripes with a per-scene phase so the static background carries texture
        let phase = (self.seed % 997) as f64 * 0.37;
        let t = 0.5 + 0.5 * ((x as f64) * 0.45 + phase).sin() * ((y as f64) * 0.3 - phase).cos();
        self.background_color.map(|c| (c * (0.75 + 0.5 * t)).min(1.0))
    }

    /// Per-video brightness and contrast drawn from the regime.
    fn photometric_draw(&self) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let r = &self.photometric;
        (r.brightness[0] + u * (r.brightness[1] - r.brightness[0]), r.contrast[0] + v * (r.contrast[1] - r.contrast[0]))
    }
}

/// Renders frame `t`; `with_noise = false` gives the noise-free render with
/// the same brightness and contrast.
pub fn render_frame(spec: &SceneSpec, t: usize, with_noise: bool) -> VideoSample {
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut image = vec![0.0; 3 * n];
    let mut flow = vec![0.0; 2 * n];
    let mut depth = vec![0.0; n];
    let mut mask = vec![false; n];
    let (brightness, contrast) = spec.photometric_draw();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(t as u64 + 1);
    let noise = (with_noise && spec.photometric.noise_std > 0.0)
        .then(|| Normal::new(0.0, spec.photometric.noise_std).expect("valid std"));
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let visible = spec
                .objects
                .iter()
                .filter(|o| o.covers(t, px, py))
                .min_by(|a, b| a.depth.total_cmp(&b.depth));
            let i = y * w + x;
            let (d, albedo) = match visible {
                Some(o) => {
                    flow[i] = o.velocity[0];
                    flow[n + i] = o.velocity[1];
                    mask[i] = o.is_primary;
                    (o.depth, o.color)
                }
                None => (spec.background_depth, spec.background_albedo(x, y)),
            };
            depth[i] = d;
            let a = (-HAZE_RATE * d).exp();
            for c in 0..3 {
                let v = albedo[c] * a + HAZE_COLOR[c] * (1.0 - a);
                image[c * n + i] = (v - 0.5) * contrast + 0.5 + brightness;
            }
        }
    }
    // noise is drawn in a fixed channel-major order independent of scene content
    for v in image.iter_mut() {
        if let Some(nd) = &noise {
            *v += nd.sample(&mut noise_rng);
        }
        *v = v.clamp(0.0, 1.0);
    }
    VideoSample {
        frame_index: t,
        image: Tensor::from_vec(3, h, w, image),
        flow: Tensor::from_vec(2, h, w, flow),
        depth,
        has_depth: true,
        mask: Some(mask),
    }
}

pub fn generate_video(spec: &SceneSpec) -> Result<VideoSequence> {
    spec.validate()?;
    let samples: Vec<VideoSample> = (0..spec.frames).map(|t| render_frame(spec, t, true)).collect();
    Ok(VideoSequence { video_id: spec.id.clone(), samples, annotated: (0..spec.frames).collect::<BTreeSet<_>>() })
}

/// One video per spec, rendered independently (and in parallel).
pub fn generate_dataset(specs: &[SceneSpec]) -> Result<Vec<VideoSequence>> {
    use rayon::prelude::*;
    for (i, s) in specs.iter().enumerate() {
        s.validate().map_err(|e| match e {
            Error::Validation { field, reason } => Error::validation(format!("specs[{i}].{field}"), reason),
            other => other,
        })?;
    }
    specs.par_iter().map(generate_video).collect()
}

/// Parameters of the synthetic train/test splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_videos: usize,
    pub train_frames: usize,
    pub test_videos: usize,
    pub test_frames: usize,
    pub height: usize,
    pub width: usize,
    pub distractors: [usize; 2],
    /// Regime of the training domain.
    pub photometric: PhotometricRegime,
    /// Applied to the test domain.
    pub shift: DomainShift,
    /// Taken from the experiment seed rather than the config section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_videos: 24,
            train_frames: 24,
            test_videos: 6,
            test_frames: 40,
            height: 64,
            width: 64,
            distractors: [1, 3],
            photometric: PhotometricRegime::default(),
            shift: DomainShift { brightness: 0.2, contrast: 0.6, noise_std: 0.06 },
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("data.train_videos", self.train_videos),
            ("data.train_frames", self.train_frames),
            ("data.test_videos", self.test_videos),
            ("data.test_frames", self.test_frames),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::validation("data.height/width", "canvas must be at least 32x32"));
        }
        if self.distractors[0] > self.distractors[1] {
            return Err(Error::validation("data.distractors", "range is inverted"));
        }
        self.photometric.validate()?;
        self.photometric.shifted(&self.shift).validate()
    }
}

fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    [Shape::Disc, Shape::Rectangle, Shape::Triangle][rng.random_range(0..3)]
}

fn random_velocity(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let speed = rng.random_range(0.4..0.9);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    [speed * angle.cos(), speed * angle.sin()]
}

/// Start position such that the midpoint of the trajectory lies near `mid`.
fn start_for(mid: [f64; 2], velocity: [f64; 2], frames: usize) -> [f64; 2] {
    let half = (frames.saturating_sub(1)) as f64 / 2.0;
    [mid[0] - velocity[0] * half, mid[1] - velocity[1] * half]
}

/// Draws `count` scene specs from the shared geometry distribution.
pub fn sample_scene_specs(
    cfg: &SplitConfig,
    prefix: &str,
    count: usize,
    frames: usize,
    stream: u64,
    photometric: PhotometricRegime,
) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let color = |rng: &mut ChaCha8Rng| [0; 3].map(|_| rng.random_range(0.05..0.95));
    (0..count)
        .map(|i| {
            let seed = rng.random();
            let mut objects = Vec::new();
            let velocity = random_velocity(&mut rng);
            let mid = [w / 2.0 + rng.random_range(-0.15..0.15) * w, h / 2.0 + rng.random_range(-0.15..0.15) * h];
            objects.push(ObjectSpec {
                shape: random_shape(&mut rng),
                size: rng.random_range(0.11..0.17) * h.min(w),
                position: start_for(mid, velocity, frames),
                velocity,
                depth: rng.random_range(1.5..3.0),
                is_primary: true,
                color: color(&mut rng),
            });
            let k = rng.random_range(cfg.distractors[0]..=cfg.distractors[1]);
            for _ in 0..k {
                let velocity = if rng.random_bool(0.6) { random_velocity(&mut rng) } else { [0.0, 0.0] };
                let mid = [rng.random_range(0.15..0.85) * w, rng.random_range(0.15..0.85) * h];
                objects.push(ObjectSpec {
                    shape: random_shape(&mut rng),
                    size: rng.random_range(0.08..0.15) * h.min(w),
                    position: start_for(mid, velocity, frames),
                    velocity,
                    depth: rng.random_range(4.5..8.0),
                    is_primary: false,
                    color: color(&mut rng),
                });
            }
            SceneSpec {
                id: format!("{prefix}_{i:03}"),
                height: cfg.height,
                width: cfg.width,
                frames,
                background_depth: BACKGROUND_DEPTH,
                background_color: [0; 3].map(|_| rng.random_range(0.15..0.6)),
                objects,
                photometric,
                seed,
            }
        })
        .collect()
}

/// Training and test scene specs drawn from one geometry distribution; the
/// test specs carry the training regime shifted by `shift`.
pub fn split_domains(base: &SplitConfig, shift: &DomainShift) -> Result<(Vec<SceneSpec>, Vec<SceneSpec>)> {
    base.validate()?;
    let train = sample_scene_specs(base, "train", base.train_videos, base.train_frames, 1, base.photometric);
    let test = sample_scene_specs(base, "test", base.test_videos, base.test_frames, 2, base.photometric.shifted(shift));
    for s in train.iter().chain(&test) {
        s.validate()?;
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_scene(frames: usize) -> SceneSpec {
        SceneSpec {
            id: "disc".into(),
            height: 32,
            width: 32,
            frames,
            background_depth: 10.0,
            background_color: [0.3; 3],
            objects: vec![ObjectSpec {
                shape: Shape::Disc,
                size: 4.0,
                position: [10.0, 16.0],
                velocity: [1.0, 0.0],
                depth: 2.0,
                is_primary: true,
                color: [0.9, 0.1, 0.1],
            }],
            photometric: PhotometricRegime { brightness: [0.0, 0.0], contrast: [1.0, 1.0], noise_std: 0.0 },
            seed: 7,
        }
    }

    fn centroid(mask: &[bool], w: usize) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            sx += (i % w) as f64;
            sy += (i / w) as f64;
            n += 1.0;
        }
        (sx / n, sy / n)
    }

    #[test]
    fn mask_centroid_tracks_velocity_and_flow_matches() {
        let v = generate_video(&disc_scene(3)).unwrap();
        let c: Vec<(f64, f64)> = v.samples.iter().map(|s| centroid(s.mask.as_ref().unwrap(), 32)).collect();
        for k in 1..3 {
            assert_eq!(c[k].0 - c[k - 1].0, 1.0);
            assert_eq!(c[k].1 - c[k - 1].1, 0.0);
        }
        for s in &v.samples {
            let m = s.mask.as_ref().unwrap();
            for (i, &inside) in m.iter().enumerate() {
                let f = (s.flow.data()[i], s.flow.data()[1024 + i]);
                assert_eq!(f, if inside { (1.0, 0.0) } else { (0.0, 0.0) });
            }
        }
    }

    #[test]
    fn nearest_layer_wins_in_overlap() {
        let mut spec = disc_scene(1);
        spec.objects.push(ObjectSpec {
            shape: Shape::Rectangle,
            size: 5.0,
            position: [12.0, 16.0],
            velocity: [0.0, 0.0],
            depth: 5.0,
            is_primary: false,
            color: [0.1, 0.9, 0.1],
        });
        let s = &generate_video(&spec).unwrap().samples[0];
        let i = 16 * 32 + 11;
        assert_eq!(s.depth[i], 2.0);
        assert!(s.mask.as_ref().unwrap()[i]);
        let j = 16 * 32 + 16;
        assert_eq!(s.depth[j], 5.0);
        assert!(!s.mask.as_ref().unwrap()[j]);
    }

    #[test]
    fn degenerate_specs_name_the_field() {
        let mut spec = disc_scene(0);
        assert!(matches!(spec.validate(), Err(Error::Validation { field, .. }) if field == "frames"));
        spec.frames = 2;
        spec.objects[0].size = 20.0;
        assert!(matches!(spec.validate(), Err(Error::Validation { field, .. }) if field == "objects[0].size"));
        spec.objects[0].size = 3.0;
        spec.objects[0].depth = 12.0;
        assert!(matches!(spec.validate(), Err(Error::Validation { field, .. }) if field == "objects[0].depth"));
    }

    #[test]
    fn split_is_deterministic_and_valid() {
        let cfg = SplitConfig { train_videos: 3, test_videos: 2, ..Default::default() };
        let (a, b) = split_domains(&cfg, &cfg.shift).unwrap();
        let (c, d) = split_domains(&cfg, &cfg.shift).unwrap();
        assert_eq!((a.len(), b.len()), (3, 2));
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!(generate_dataset(&b).unwrap(), generate_dataset(&d).unwrap());
    }

    #[test]
    fn brightness_shift_moves_the_range() {
        let cfg = SplitConfig { train_videos: 2, test_videos: 2, ..Default::default() };
        let shift = DomainShift { brightness: 0.3, ..DomainShift::NONE };
        let (train, test) = split_domains(&cfg, &shift).unwrap();
        for s in &test {
            assert_eq!(s.photometric.brightness, train[0].photometric.brightness.map(|b| b + 0.3));
            assert_eq!(s.photometric.contrast, train[0].photometric.contrast);
        }
        let (_, unshifted) = split_domains(&cfg, &DomainShift::NONE).unwrap();
        for (u, s) in unshifted.iter().zip(&test) {
            assert_eq!(u.objects, s.objects);
            assert_eq!(u.photometric, train[0].photometric);
        }
    }
}
