//! Video and dataset I/O.
//!
//! Two on-disk forms are supported:
//!
//! * `.vseq` — a raw little-endian `f64` dump with a small header. Exact
//!   round trip; the fixture format for tests.
//! * a directory of 16-bit RGB PNG frames (`%05d.png`) — lossless in its
//!   16-bit quantization; the dataset/demo format.
//!
//! Dataset directory layout:
//!
//! ```text
//! <root>/clips/<id>/frames/%05d.png     corrupted input frames
//! <root>/clips/<id>/gt_masks/%05d.png   ground-truth masks {0,255}
//! <root>/clips/<id>/clean/%05d.png      clean supervision targets
//! <root>/clips/<id>/sideinfo.json       codec side information
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};

use super::{MaskSequence, VideoSequence};
use crate::error::{Error, Result};
use crate::sideinfo::{parse_sidecar, write_sidecar, SideInfo};

const VSEQ_MAGIC: &[u8; 4] = b"VSEQ";
const VSEQ_VERSION: u32 = 1;

/// Save a sequence. `.vseq` paths get the raw dump; any other path is
/// treated as a directory of 16-bit PNG frames.
pub fn save_video(path: &Path, video: &VideoSequence) -> Result<()> {
    video.validate()?;
    if path.extension().map(|e| e == "vseq").unwrap_or(false) {
        save_vseq(path, video)
    } else {
        save_png_dir(path, video)
    }
}

/// Load a sequence saved by [`save_video`].
pub fn load_video(path: &Path) -> Result<VideoSequence> {
    if path.extension().map(|e| e == "vseq").unwrap_or(false) {
        load_vseq(path)
    } else {
        load_png_dir(path)
    }
}

fn save_vseq(path: &Path, video: &VideoSequence) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(VSEQ_MAGIC)?;
    w.write_all(&VSEQ_VERSION.to_le_bytes())?;
    for d in video.frames.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    w.write_all(&video.fps.to_le_bytes())?;
    for v in video.frames.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn load_vseq(path: &Path) -> Result<VideoSequence> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Parse(format!("{}: truncated header", path.display())))?;
    if &magic != VSEQ_MAGIC {
        return Err(Error::Parse(format!(
            "{}: bad magic {:?}, not a vseq file",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VSEQ_VERSION {
        return Err(Error::Parse(format!(
            "{}: unsupported vseq version {version}",
            path.display()
        )));
    }
    let mut dims = [0usize; 4];
    let mut u64buf = [0u8; 8];
    for d in dims.iter_mut() {
        r.read_exact(&mut u64buf)?;
        *d = u64::from_le_bytes(u64buf) as usize;
    }
    if dims[3] != 3 {
        return Err(Error::Parse(format!(
            "{}: channel dim {} != 3",
            path.display(),
            dims[3]
        )));
    }
    r.read_exact(&mut u64buf)?;
    let fps = f64::from_le_bytes(u64buf);
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut u64buf)
            .map_err(|_| Error::Parse(format!("{}: truncated pixel data", path.display())))?;
        data.push(f64::from_le_bytes(u64buf));
    }
    let frames = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let v = VideoSequence { frames, fps };
    v.validate()?;
    Ok(v)
}

fn save_png_dir(dir: &Path, video: &VideoSequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (h, w) = (video.height(), video.width());
    for fi in 0..video.len() {
        let mut bytes = Vec::with_capacity(h * w * 6);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let q = (video.frames[[fi, y, x, c]] * 65535.0).round() as u16;
                    bytes.extend_from_slice(&q.to_be_bytes());
                }
            }
        }
        let file = fs::File::create(dir.join(format!("{fi:05}.png")))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&bytes)?;
    }
    Ok(())
}

fn load_png_dir(dir: &Path) -> Result<VideoSequence> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    if paths.is_empty() {
        return Err(Error::MissingData(format!(
            "no .png frames in {}",
            dir.display()
        )));
    }
    paths.sort();
    let mut frames: Option<Array4<f64>> = None;
    for (fi, p) in paths.iter().enumerate() {
        let (data, w, h) = read_png_rgb16(p)?;
        let arr = frames.get_or_insert_with(|| Array4::zeros((paths.len(), h, w, 3)));
        if arr.shape()[1] != h || arr.shape()[2] != w {
            return Err(Error::ShapeMismatch(format!(
                "{}: frame size {}x{} differs from first frame",
                p.display(),
                w,
                h
            )));
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    arr[[fi, y, x, c]] = data[(y * w + x) * 3 + c] as f64 / 65535.0;
                }
            }
        }
    }
    let v = VideoSequence {
        frames: frames.unwrap(),
        fps: 24.0,
    };
    v.validate()?;
    Ok(v)
}

fn read_png_rgb16(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    let decoder = png::Decoder::new(BufReader::new(fs::File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Parse(format!(
            "{}: expected 16-bit RGB png, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(2) {
        data.push(u16::from_be_bytes([px[0], px[1]]));
    }
    Ok((data, w, h))
}

/// Masks as 8-bit grayscale PNGs with values {0, 255}.
pub fn save_mask_sequence(dir: &Path, masks: &MaskSequence) -> Result<()> {
    if !masks.binary {
        return Err(Error::InvalidArgument(
            "only binary masks are written to disk".into(),
        ));
    }
    fs::create_dir_all(dir)?;
    let sh = masks.masks.shape().to_vec();
    let (h, w) = (sh[1], sh[2]);
    for fi in 0..sh[0] {
        let mut bytes = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bytes.push(if masks.masks[[fi, y, x]] == 1.0 { 255u8 } else { 0u8 });
            }
        }
        let file = fs::File::create(dir.join(format!("{fi:05}.png")))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&bytes)?;
    }
    Ok(())
}

pub fn load_mask_sequence(dir: &Path) -> Result<MaskSequence> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    if paths.is_empty() {
        return Err(Error::MissingData(format!(
            "no .png masks in {}",
            dir.display()
        )));
    }
    paths.sort();
    let mut masks: Option<Array3<f64>> = None;
    for (fi, p) in paths.iter().enumerate() {
        let decoder = png::Decoder::new(BufReader::new(fs::File::open(p)?));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Parse(format!(
                "{}: expected 8-bit grayscale png mask",
                p.display()
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let arr = masks.get_or_insert_with(|| Array3::zeros((paths.len(), h, w)));
        for y in 0..h {
            for x in 0..w {
                let v = buf[y * w + x];
                if v != 0 && v != 255 {
                    return Err(Error::Parse(format!(
                        "{}: mask value {v} is neither 0 nor 255",
                        p.display()
                    )));
                }
                arr[[fi, y, x]] = if v == 255 { 1.0 } else { 0.0 };
            }
        }
    }
    MaskSequence::new_binary(masks.unwrap())
}

/// One fully loaded clip.
#[derive(Clone, Debug)]
pub struct DatasetClip {
    pub id: String,
    pub frames: VideoSequence,
    pub gt_masks: MaskSequence,
    pub clean: VideoSequence,
    pub sideinfo: Vec<SideInfo>,
}

/// An in-memory dataset: every clip loaded, ordered by clip id.
pub struct Dataset {
    pub clips: Vec<DatasetClip>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let clips_dir = root.join("clips");
        if !clips_dir.is_dir() {
            return Err(Error::MissingData(format!(
                "{} has no clips/ directory",
                root.display()
            )));
        }
        let mut ids: Vec<String> = fs::read_dir(&clips_dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(Error::MissingData(format!(
                "no clips under {}",
                clips_dir.display()
            )));
        }
        let mut clips = Vec::with_capacity(ids.len());
        for id in ids {
            let dir = clips_dir.join(&id);
            let frames = load_video(&dir.join("frames"))?;
            let gt_masks = load_mask_sequence(&dir.join("gt_masks"))?;
            let clean = load_video(&dir.join("clean"))?;
            let sideinfo = parse_sidecar(&dir.join("sideinfo.json"))?;
            if !gt_masks.matches(&frames) {
                return Err(Error::ShapeMismatch(format!(
                    "clip {id}: gt_masks do not match frames"
                )));
            }
            if sideinfo.len() != frames.len() {
                return Err(Error::ShapeMismatch(format!(
                    "clip {id}: sideinfo has {} entries for {} frames",
                    sideinfo.len(),
                    frames.len()
                )));
            }
            clips.push(DatasetClip {
                id,
                frames,
                gt_masks,
                clean,
                sideinfo,
            });
        }
        Ok(Dataset { clips })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for clip in &self.clips {
            let dir = root.join("clips").join(&clip.id);
            save_video(&dir.join("frames"), &clip.frames)?;
            save_mask_sequence(&dir.join("gt_masks"), &clip.gt_masks)?;
            save_video(&dir.join("clean"), &clip.clean)?;
            write_sidecar(&dir.join("sideinfo.json"), &clip.sideinfo)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}
