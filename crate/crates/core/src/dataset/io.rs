//! On-disk sequence layout:
//!
//! ```text
//! <root>/<seq>/image/<id>.png    8-bit RGB
//! <root>/<seq>/mask/<id>.png     8-bit gray, 255 = known, 0 = hole
//! <root>/<seq>/depth/<id>.png    16-bit gray, millimetres, 0 = invalid
//! <root>/<seq>/object/<id>.png   real objects, hole-coded like masks (optional)
//! <root>/<seq>/shadow/<id>.png   shadow labels, 255 = shadow (optional)
//! <root>/<seq>/poses.txt         id + 16 row-major floats (world from camera)
//! <root>/<seq>/intrinsics.txt    fx fy cx cy
//! ```
//!
//! Frame files are looked up as `<id>.png`, then zero-padded `<id:06>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use nalgebra::{Matrix3, Matrix4};

use super::{CameraModel, Frame, MaskMap, VideoSequence};
use crate::error::{Error, Result};
use crate::geometry::FlowField;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Root of a flow cache laid out as `<cache>/<seq>/flow/<m>_<i>.bin`.
    /// Cached pairs are used in preference to recomputing from depth.
    pub flow_cache: Option<PathBuf>,
}

/// One labelled image for the shadow branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowSample {
    pub frame: Frame,
    pub object_mask: MaskMap,
    /// `[H, W]`, 1 on shadow pixels.
    pub labels: Tensor,
}

/// `<dir>/<id>.png`, or the zero-padded `<dir>/<id:06>.png`, if either exists.
pub fn frame_file(dir: &Path, id: usize) -> Option<PathBuf> {
    [format!("{id}.png"), format!("{id:06}.png")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

fn require(dir: &Path, id: usize) -> Result<PathBuf> {
    frame_file(dir, id).ok_or_else(|| Error::MissingFrame(dir.join(format!("{id}.png"))))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

fn save_image<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

pub fn read_frame(path: &Path, frame_id: usize) -> Result<Frame> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Frame::from_fn(w as usize, h as usize, frame_id, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        p.map(|v| v as f64 / 127.5 - 1.0)
    }))
}

/// 8-bit encoding; decoding changes no value by more than `1/255`.
pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let img = RgbImage::from_fn(frame.width() as u32, frame.height() as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| to_u8(frame.get(x as usize, y as usize, c))))
    });
    save_image(&img, path)
}

pub(crate) fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Gray image thresholded at 128; `true` where bright.
fn read_binary(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|p| p.0[0] >= 128).collect()))
}

pub fn read_mask(path: &Path) -> Result<MaskMap> {
    let (w, h, known) = read_binary(path)?;
    MaskMap::from_known(w, h, known)
}

pub fn write_mask(path: &Path, mask: &MaskMap) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.is_known(x as usize, y as usize) { 255 } else { 0 }])
    });
    save_image(&img, path)
}

/// Writes a `[H, W]` label map, 255 where the value is at least 0.5.
pub(crate) fn write_labels(path: &Path, labels: &Tensor) -> Result<()> {
    let (h, w) = (labels.shape()[0], labels.shape()[1]);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if labels.data()[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
    });
    save_image(&img, path)
}

fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f64>, Vec<bool>)> {
    let img = open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let depth: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 1000.0).collect();
    let valid = img.pixels().map(|p| p.0[0] > 0).collect();
    Ok((w as usize, h as usize, depth, valid))
}

fn write_depth(path: &Path, cam: &CameraModel) -> Result<()> {
    let w = cam.width();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(cam.width() as u32, cam.height() as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let mm = if cam.depth_valid()[i] {
                (cam.depth()[i] * 1000.0).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            };
            Luma([mm])
        });
    save_image(&img, path)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_floats(line: &str, what: &'static str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::format(what, format!("{t:?}: {e}"))))
        .collect()
}

pub(crate) fn read_intrinsics(path: &Path) -> Result<Matrix3<f64>> {
    let v = parse_floats(&read_text(path)?, "intrinsics")?;
    match v[..] {
        [fx, fy, cx, cy] => Ok(CameraModel::intrinsics_from(fx, fy, cx, cy)),
        _ => Err(Error::format("intrinsics", format!("expected 4 numbers, got {}", v.len()))),
    }
}

pub(crate) fn read_poses(path: &Path) -> Result<BTreeMap<usize, Matrix4<f64>>> {
    let mut poses = BTreeMap::new();
    for (n, line) in read_text(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let id = it
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| Error::format("poses", format!("line {}: bad frame id", n + 1)))?;
        let vals = parse_floats(&it.collect::<Vec<_>>().join(" "), "poses")?;
        if vals.len() != 16 {
            return Err(Error::format("poses", format!("line {}: {} values, expected 16", n + 1, vals.len())));
        }
        poses.insert(id, Matrix4::from_row_slice(&vals));
    }
    Ok(poses)
}

fn seq_dir(root: &Path, seq_id: &str) -> Result<PathBuf> {
    let dir = root.join(seq_id);
    if !dir.join("image").is_dir() {
        return Err(Error::BadSequence(format!("no sequence at {}", dir.display())));
    }
    Ok(dir)
}

/// Frame ids present under `image/`, sorted.
pub fn list_frame_ids(root: &Path, seq_id: &str) -> Result<Vec<usize>> {
    let dir = seq_dir(root, seq_id)?.join("image");
    let mut ids: Vec<usize> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| {
            let p = e.ok()?.path();
            (p.extension()? == "png").then_some(())?;
            p.file_stem()?.to_str()?.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

/// Camera for one frame, or `None` when depth, pose or intrinsics are absent.
pub fn read_camera(root: &Path, seq_id: &str, id: usize) -> Result<Option<CameraModel>> {
    let dir = seq_dir(root, seq_id)?;
    let (ip, pp) = (dir.join("intrinsics.txt"), dir.join("poses.txt"));
    let Some(dp) = frame_file(&dir.join("depth"), id) else {
        return Ok(None);
    };
    if !ip.is_file() || !pp.is_file() {
        return Ok(None);
    }
    let k = read_intrinsics(&ip)?;
    let pose = *read_poses(&pp)?
        .get(&id)
        .ok_or_else(|| Error::format("poses", format!("no pose for frame {id}")))?;
    let (w, h, depth, valid) = read_depth(&dp)?;
    CameraModel::new(k, pose, w, h, depth, valid).map(Some)
}

pub fn load_sequence(root: &Path, seq_id: &str, center_frame: usize, delta: usize) -> Result<VideoSequence> {
    load_sequence_with(root, seq_id, center_frame, delta, &LoadOptions::default())
}

/// Loads frames `center − δ ..= center + δ`. Flows come from the cache when
/// present, otherwise from depth and poses when every frame has them, and
/// are left empty otherwise.
pub fn load_sequence_with(
    root: &Path,
    seq_id: &str,
    center_frame: usize,
    delta: usize,
    opts: &LoadOptions,
) -> Result<VideoSequence> {
    let dir = seq_dir(root, seq_id)?;
    let first = center_frame
        .checked_sub(delta)
        .ok_or_else(|| Error::MissingFrame(dir.join("image").join(format!("{}", center_frame as i64 - delta as i64))))?;
    let ids: Vec<usize> = (first..=center_frame + delta).collect();

    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for &id in &ids {
        let frame = read_frame(&require(&dir.join("image"), id)?, id)?;
        let mask = read_mask(&require(&dir.join("mask"), id)?)?;
        frame.check_mask(&mask)?;
        frames.push(frame);
        masks.push(mask);
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if frames.iter().any(|f| (f.width(), f.height()) != (w, h)) {
        return Err(Error::shape(format!("frames of {seq_id} differ in resolution")));
    }

    let object_dir = dir.join("object");
    let object_masks = if object_dir.is_dir() {
        let list = ids
            .iter()
            .map(|&id| read_mask(&require(&object_dir, id)?))
            .collect::<Result<Vec<_>>>()?;
        Some(list)
    } else {
        None
    };

    let cams = ids
        .iter()
        .map(|&id| read_camera(root, seq_id, id))
        .collect::<Result<Vec<_>>>()?;
    let cameras: Option<Vec<CameraModel>> = cams.into_iter().collect();

    let mut seq = VideoSequence {
        frames,
        masks,
        flows: Vec::new(),
        target_index: delta,
        delta,
        object_masks,
        cameras,
    };
    seq.validate()?;
    if delta == 0 {
        return Ok(seq);
    }

    let cached_paths: Option<Vec<PathBuf>> = opts.flow_cache.as_ref().and_then(|cache| {
        ids.iter()
            .filter(|&&i| i != center_frame)
            .map(|&i| {
                let p = cache.join(seq_id).join("flow").join(format!("{center_frame}_{i}.bin"));
                p.is_file().then_some(p)
            })
            .collect()
    });
    let cached = cached_paths
        .map(|ps| ps.iter().map(|p| FlowField::load(p)).collect::<Result<Vec<_>>>())
        .transpose()?;
    if let Some(flows) = cached {
        seq.flows = flows;
        seq.validate()?;
    } else if seq.cameras.is_some() {
        seq.attach_flows_from_cameras()?;
    }
    Ok(seq)
}

/// Every frame with both an object mask (`mask/`) and shadow labels.
pub fn load_shadow_samples(root: &Path, seq_id: &str) -> Result<Vec<ShadowSample>> {
    let dir = seq_dir(root, seq_id)?;
    let mut out = Vec::new();
    for id in list_frame_ids(root, seq_id)? {
        let (Some(mp), Some(sp)) = (frame_file(&dir.join("mask"), id), frame_file(&dir.join("shadow"), id)) else {
            continue;
        };
        let frame = read_frame(&require(&dir.join("image"), id)?, id)?;
        let object_mask = read_mask(&mp)?;
        let (w, h, shadow) = read_binary(&sp)?;
        frame.check_mask(&object_mask)?;
        if (w, h) != (frame.width(), frame.height()) {
            return Err(Error::shape(format!("shadow labels of frame {id}")));
        }
        let labels = Tensor::from_vec(&[h, w], shadow.iter().map(|&s| s as u8 as f64).collect())?;
        out.push(ShadowSample {
            frame,
            object_mask,
            labels,
        });
    }
    Ok(out)
}

/// Everything needed to write one sequence directory.
#[derive(Debug, Clone, Default)]
pub struct SequenceFiles {
    pub frames: Vec<Frame>,
    pub masks: Vec<MaskMap>,
    pub cameras: Option<Vec<CameraModel>>,
    pub object_masks: Option<Vec<MaskMap>>,
    /// `[H, W]` shadow labels per frame.
    pub shadows: Option<Vec<Tensor>>,
}

/// Writes a sequence in the layout read by [`load_sequence`], naming files
/// by each frame's id. Cameras must share one intrinsics matrix.
pub fn save_sequence(root: &Path, seq_id: &str, files: &SequenceFiles) -> Result<()> {
    let dir = root.join(seq_id);
    if files.masks.len() != files.frames.len() {
        return Err(Error::BadSequence("one mask per frame required".into()));
    }
    for (f, m) in files.frames.iter().zip(&files.masks) {
        write_frame(&dir.join("image").join(format!("{}.png", f.frame_id)), f)?;
        write_mask(&dir.join("mask").join(format!("{}.png", f.frame_id)), m)?;
    }
    if let Some(objs) = &files.object_masks {
        for (f, m) in files.frames.iter().zip(objs) {
            write_mask(&dir.join("object").join(format!("{}.png", f.frame_id)), m)?;
        }
    }
    if let Some(sh) = &files.shadows {
        for (f, s) in files.frames.iter().zip(sh) {
            write_labels(&dir.join("shadow").join(format!("{}.png", f.frame_id)), s)?;
        }
    }
    if let Some(cams) = &files.cameras {
        let Some(c0) = cams.first() else {
            return Ok(());
        };
        let k = c0.intrinsics();
        if cams.iter().any(|c| c.intrinsics() != k) {
            return Err(Error::BadCamera("cameras of one sequence must share intrinsics".into()));
        }
        let ip = dir.join("intrinsics.txt");
        let text = format!("{} {} {} {}\n", k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
        fs::write(&ip, text).map_err(|e| Error::io(&ip, e))?;
        let mut poses = String::new();
        for (f, c) in files.frames.iter().zip(cams) {
            write_depth(&dir.join("depth").join(format!("{}.png", f.frame_id)), c)?;
            poses.push_str(&f.frame_id.to_string());
            for r in 0..4 {
                for col in 0..4 {
                    poses.push_str(&format!(" {}", c.pose()[(r, col)]));
                }
            }
            poses.push('\n');
        }
        let pp = dir.join("poses.txt");
        fs::write(&pp, poses).map_err(|e| Error::io(&pp, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, id: usize) -> Frame {
        Frame::from_fn(w, h, id, |x, y| {
            let v = ((x * 31 + y * 17 + id * 5) % 97) as f64 / 48.0 - 1.0;
            [v, (v * 0.7).sin(), -v]
        })
    }

    #[test]
    fn frame_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let f = frame(13, 7, 4);
        let p = dir.path().join("f.png");
        write_frame(&p, &f).unwrap();
        let g = read_frame(&p, 4).unwrap();
        assert!(f.pixels().max_abs_diff(g.pixels()) <= 1.0 / 255.0 + 1e-12);
    }

    #[test]
    fn missing_frame_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..5).filter(|&i| i != 3).map(|i| frame(8, 8, i)).collect();
        let masks = vec![MaskMap::all_known(8, 8); frames.len()];
        save_sequence(
            dir.path(),
            "s",
            &SequenceFiles {
                frames,
                masks,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(load_sequence(dir.path(), "s", 2, 2), Err(Error::MissingFrame(_))));
        let one = load_sequence(dir.path(), "s", 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.flows.is_empty());
    }

    #[test]
    fn sequence_round_trip_with_cameras() {
        let dir = tempfile::tempdir().unwrap();
        let (w, h) = (8, 6);
        let k = CameraModel::intrinsics_from(20.0, 20.0, 3.5, 2.5);
        let cams: Vec<_> = (0..3)
            .map(|i| {
                let mut pose = Matrix4::identity();
                pose[(0, 3)] = 0.1 * i as f64;
                CameraModel::new(k, pose, w, h, vec![4.0; w * h], vec![true; w * h]).unwrap()
            })
            .collect();
        let frames: Vec<_> = (10..13).map(|i| frame(w, h, i)).collect();
        let masks = vec![MaskMap::with_rect_hole(w, h, 2, 2, 3, 2); 3];
        save_sequence(
            dir.path(),
            "s",
            &SequenceFiles {
                frames,
                masks: masks.clone(),
                cameras: Some(cams),
                ..Default::default()
            },
        )
        .unwrap();
        let seq = load_sequence(dir.path(), "s", 11, 1).unwrap();
        assert_eq!(seq.masks, masks);
        assert_eq!(seq.flows.len(), 2);
        // reference 0 sits 0.1 left of the target: dx = +fx·0.1/Z
        let (dx, dy) = seq.flow_to(0).unwrap().get(3, 3);
        assert!((dx - 20.0 * 0.1 / 4.0).abs() < 1e-9 && dy.abs() < 1e-9);
        assert_eq!(list_frame_ids(dir.path(), "s").unwrap(), vec![10, 11, 12]);
    }

    #[test]
    fn mismatched_resolution_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![frame(8, 8, 0), frame(8, 6, 1), frame(8, 8, 2)];
        let masks = vec![MaskMap::all_known(8, 8), MaskMap::all_known(8, 6), MaskMap::all_known(8, 8)];
        save_sequence(
            dir.path(),
            "s",
            &SequenceFiles {
                frames,
                masks,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(load_sequence(dir.path(), "s", 1, 1), Err(Error::ShapeMismatch(_))));
    }
}
