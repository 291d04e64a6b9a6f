//! DAVIS-style directory layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<video_id>/frames/00000.png   8-bit RGB
//! <root>/<video_id>/masks/00000.png    8-bit gray, 0 or 255 (optional per frame)
//! <root>/<video_id>/depth/00000.npy    float32, shape (H, W)
//! <root>/<video_id>/flow/00000.npy     float32, shape (H, W, 2) holding (dx, dy)
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

use super::synth::BACKGROUND_DEPTH;
use super::{VideoSample, VideoSequence};
use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub annotated: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub videos: Vec<ManifestVideo>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Substitute zero flow and constant depth for missing files instead of failing.
    pub synthetic_fallback: bool,
}

/// Zero-padded file name of frame `i`.
pub fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:05}.{ext}")
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::format(path, e.to_string())
}

fn npy_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, e.to_string())
}

/// Writes a row-major `h×w` mask as an 8-bit 0/255 PNG.
pub fn save_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::Shape(format!("mask has {} pixels, expected {h}x{w}", mask.len())));
    }
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([if mask[y as usize * w + x as usize] { 255 } else { 0 }]));
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads a mask PNG written by [`save_mask`] (any pixel above 127 is set).
pub fn load_mask(path: &Path, h: usize, w: usize) -> Result<Vec<bool>> {
    read_mask(path, h, w)
}

fn write_sample(dir: &Path, s: &VideoSample) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let n = h * w;
    let px = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let d = s.image.data();
        image::Rgb([px(d[i]), px(d[n + i]), px(d[2 * n + i])])
    });
    let p = dir.join("frames").join(frame_name(s.frame_index, "png"));
    img.save(&p).map_err(|e| image_err(&p, e))?;
    if let Some(m) = &s.mask {
        save_mask(&dir.join("masks").join(frame_name(s.frame_index, "png")), m, h, w)?;
    }
    let depth = Array2::from_shape_fn((h, w), |(y, x)| s.depth[y * w + x] as f32);
    let p = dir.join("depth").join(frame_name(s.frame_index, "npy"));
    write_npy(&p, &depth).map_err(|e| npy_err(&p, e))?;
    let flow = Array3::from_shape_fn((h, w, 2), |(y, x, c)| s.flow.data()[c * n + y * w + x] as f32);
    let p = dir.join("flow").join(frame_name(s.frame_index, "npy"));
    write_npy(&p, &flow).map_err(|e| npy_err(&p, e))
}

/// Writes every video plus `manifest.json` under `root`.
pub fn save_dataset(root: &Path, videos: &[VideoSequence]) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    for v in videos {
        v.validate()?;
        let dir = root.join(&v.video_id);
        for sub in ["frames", "masks", "depth", "flow"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for s in &v.samples {
            write_sample(&dir, s)?;
        }
        manifest.videos.push(ManifestVideo {
            id: v.video_id.clone(),
            frames: v.len(),
            height: v.height(),
            width: v.width(),
            annotated: v.annotated.iter().copied().collect(),
        });
    }
    let p = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * n + i] = p.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(3, h, w, data))
}

fn dims_error(path: &Path, got: (usize, usize), want: (usize, usize)) -> Error {
    Error::Shape(format!("{}: {}x{} differs from the video's {}x{}", path.display(), got.0, got.1, want.0, want.1))
}

fn read_mask(path: &Path, h: usize, w: usize) -> Result<Vec<bool>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let got = (img.height() as usize, img.width() as usize);
    if got != (h, w) {
        return Err(dims_error(path, got, (h, w)));
    }
    Ok(img.pixels().map(|p| p.0[0] > 127).collect())
}

fn read_depth(path: &Path, h: usize, w: usize) -> Result<Vec<f64>> {
    let a: Array2<f32> = read_npy(path).map_err(|e| npy_err(path, e))?;
    if a.dim() != (h, w) {
        return Err(dims_error(path, a.dim(), (h, w)));
    }
    let depth: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bad = depth.iter().filter(|&&d| !(d > 0.0 && d.is_finite())).count();
    if bad > 0 {
        return Err(Error::format(path, format!("{bad} pixels have non-positive depth")));
    }
    Ok(depth)
}

fn read_flow(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let a: Array3<f32> = read_npy(path).map_err(|e| npy_err(path, e))?;
    let (ah, aw, ac) = a.dim();
    if (ah, aw) != (h, w) || ac != 2 {
        return Err(Error::format(path, format!("flow has shape ({ah}, {aw}, {ac}), expected ({h}, {w}, 2)")));
    }
    let n = h * w;
    let mut data = vec![0.0; 2 * n];
    for ((y, x, c), &v) in a.indexed_iter() {
        data[c * n + y * w + x] = v as f64;
    }
    Ok(Tensor::from_vec(2, h, w, data))
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    frames.sort();
    Ok(frames)
}

fn load_video(root: &Path, id: &str, opts: &LoadOptions) -> Result<VideoSequence> {
    let dir = root.join(id);
    let frames = list_frames(&dir.join("frames"))?;
    if frames.is_empty() {
        return Err(Error::Dataset(format!("video `{id}` has no frames")));
    }
    let mut samples = Vec::with_capacity(frames.len());
    let mut annotated = BTreeSet::new();
    let mut dims = None;
    for (i, path) in frames.iter().enumerate() {
        let expected = dir.join("frames").join(frame_name(i, "png"));
        if *path != expected {
            return Err(Error::Dataset(format!("video `{id}`: expected {} (frames must be numbered from 0)", expected.display())));
        }
        let image = read_image(path)?;
        let (h, w) = (image.height(), image.width());
        let want = *dims.get_or_insert((h, w));
        if (h, w) != want {
            return Err(dims_error(path, (h, w), want));
        }
        let mask_path = dir.join("masks").join(frame_name(i, "png"));
        let mask = if mask_path.exists() {
            annotated.insert(i);
            Some(read_mask(&mask_path, h, w)?)
        } else {
            None
        };
        let depth_path = dir.join("depth").join(frame_name(i, "npy"));
        let has_depth = depth_path.exists();
        let depth = if has_depth {
            read_depth(&depth_path, h, w)?
        } else if opts.synthetic_fallback {
            vec![BACKGROUND_DEPTH; h * w]
        } else {
            return Err(Error::Dataset(format!("missing depth map {}", depth_path.display())));
        };
        let flow_path = dir.join("flow").join(frame_name(i, "npy"));
        let flow = if flow_path.exists() {
            read_flow(&flow_path, h, w)?
        } else if opts.synthetic_fallback {
            Tensor::zeros(2, h, w)
        } else {
            return Err(Error::Dataset(format!("missing flow map {}", flow_path.display())));
        };
        samples.push(VideoSample { frame_index: i, image, flow, depth, has_depth, mask });
    }
    Ok(VideoSequence { video_id: id.to_string(), samples, annotated })
}

/// Loads every video listed in `manifest.json`, or every subdirectory when
/// the manifest is absent.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Vec<VideoSequence>> {
    let manifest_path = root.join("manifest.json");
    let ids: Vec<String> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        m.videos.into_iter().map(|v| v.id).collect()
    } else {
        let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut ids: Vec<String> = rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        ids
    };
    if ids.is_empty() {
        return Err(Error::Dataset(format!("{} contains no videos", root.display())));
    }
    ids.iter().map(|id| load_video(root, id, opts)).collect()
}
