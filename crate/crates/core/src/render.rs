//! Stick-figure export of 3D features as numbered PNG frames.
//!
//! Framing is fixed over the whole sequence so the camera never moves.
//! Bones take the color of the body part their child joint belongs to.

use std::path::{Path, PathBuf};
use std::process::Command;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{recover_positions_3d, MotionFeatures};
use crate::projection::{project_view, View};
use crate::skeleton::Skeleton;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub view: View,
    pub background: [u8; 3],
    pub upper_color: [u8; 3],
    pub lower_color: [u8; 3],
    pub root_color: [u8; 3],
    /// Fraction of the canvas left empty on each side.
    pub margin: f64,
    pub fps: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            view: View::FRONT,
            background: [255, 255, 255],
            upper_color: [200, 40, 40],
            lower_color: [40, 70, 200],
            root_color: [30, 30, 30],
            margin: 0.1,
            fps: 20.0,
        }
    }
}

impl RenderConfig {
    /// Color of the bone ending at `joint`.
    pub fn bone_color(&self, skeleton: &Skeleton, joint: usize) -> [u8; 3] {
        if skeleton.upper_body_indices.contains(&joint) {
            self.upper_color
        } else if skeleton.lower_body_indices.contains(&joint) {
            self.lower_color
        } else {
            self.root_color
        }
    }
}

/// Draws every frame of `N × J × 3` world positions.
pub fn render_positions(positions: &Array3<f64>, skeleton: &Skeleton, config: &RenderConfig) -> Result<Vec<RgbImage>> {
    if config.width < 8 || config.height < 8 {
        return Err(Error::Render("canvas must be at least 8×8".into()));
    }
    let image_plane = project_view(positions, config.view)?;
    if image_plane.iter().any(|v| !v.is_finite()) {
        return Err(Error::Render("positions are not finite".into()));
    }
    let (n, j, _) = image_plane.dim();
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in image_plane.outer_iter() {
        for q in p.outer_iter() {
            for d in 0..2 {
                lo[d] = lo[d].min(q[d]);
                hi[d] = hi[d].max(q[d]);
            }
        }
    }
    let (w, h) = (config.width as f64, config.height as f64);
    let usable = 1.0 - 2.0 * config.margin;
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
    let scale = usable * w.min(h) / extent;
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let to_pixel = |u: f64, v: f64| -> (f32, f32) {
        (
            (w / 2.0 + (u - center[0]) * scale) as f32,
            (h / 2.0 - (v - center[1]) * scale) as f32,
        )
    };
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        let mut img = RgbImage::from_pixel(config.width, config.height, Rgb(config.background));
        for joint in 0..j {
            let Some(parent) = skeleton.parents[joint] else {
                continue;
            };
            let a = to_pixel(image_plane[[k, parent, 0]], image_plane[[k, parent, 1]]);
            let b = to_pixel(image_plane[[k, joint, 0]], image_plane[[k, joint, 1]]);
            let color = Rgb(config.bone_color(skeleton, joint));
            for (dx, dy) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)] {
                draw_line_segment_mut(&mut img, (a.0 + dx, a.1 + dy), (b.0 + dx, b.1 + dy), color);
            }
        }
        for joint in 0..j {
            let p = to_pixel(image_plane[[k, joint, 0]], image_plane[[k, joint, 1]]);
            draw_filled_circle_mut(
                &mut img,
                (p.0.round() as i32, p.1.round() as i32),
                2,
                Rgb(config.root_color),
            );
        }
        frames.push(img);
    }
    Ok(frames)
}

pub fn render_features(features: &MotionFeatures, skeleton: &Skeleton, config: &RenderConfig) -> Result<Vec<RgbImage>> {
    if !features.is_finite() {
        return Err(Error::Render("features contain non-finite values".into()));
    }
    let positions = recover_positions_3d(features, skeleton).map_err(|e| Error::Render(e.to_string()))?;
    render_positions(&positions, skeleton, config)
}

/// Writes `frame_0000.png`, `frame_0001.png`, … into `dir`.
pub fn write_frames(frames: &[RgbImage], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("frame_{i:04}.png"));
            img.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Encodes the numbered frames in `dir` with an external `ffmpeg`.
pub fn encode_video(dir: &Path, fps: f64, out: &Path) -> Result<()> {
    let status = Command::new("ffmpeg")
        .args(["-y", "-loglevel", "error", "-framerate"])
        .arg(format!("{fps}"))
        .arg("-i")
        .arg(dir.join("frame_%04d.png"))
        .args(["-pix_fmt", "yuv420p"])
        .arg(out)
        .status()
        .map_err(|e| Error::Render(format!("could not run ffmpeg: {e}")))?;
    if !status.success() {
        return Err(Error::Render(format!("ffmpeg exited with {status}")));
    }
    Ok(())
}
