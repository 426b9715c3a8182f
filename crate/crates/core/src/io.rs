//! On-disk formats: P6 frames, run-length masks in JSON, dataset
//! directories and checkpoints (raw little-endian `f64` plus a TOML
//! manifest).

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{Clip, ObjectSpec};
use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::mask::{Mask, Rle};
use crate::model::Model;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{AdamState, Trainer};

/// Encode a `[H, W, 3]` frame in `[0, 1]` as binary PPM.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::contract("encode_ppm", format!("expected [H, W, 3], got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Parse a binary PPM with maxval 255 into `[H, W, 3]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| Error::format("ppm", msg);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * 3 {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h * 3, body.len())));
    }
    Tensor::new(&[h, w, 3], body.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Bilinear resize of a `[H, W, 3]` frame, pixel centres aligned.
pub fn resize_frame(frame: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::contract("resize_frame", format!("expected [H, W, 3], got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let src = |o: usize, n: usize, m: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(n - 1), x - lo as f64)
    };
    Ok(Tensor::from_fn(&[height, width, 3], |i| {
        let c = i % 3;
        let (y, x) = (i / 3 / width, i / 3 % width);
        let (y0, y1, fy) = src(y, h, height);
        let (x0, x1, fx) = src(x, w, width);
        let at = |yy: usize, xx: usize| frame.data()[(yy * w + xx) * 3 + c];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }))
}

/// Nearest-neighbour resize of a mask.
pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Mask {
    Mask::from_fn(height, width, |y, x| {
        mask.get(y * mask.height / height, x * mask.width / width)
    })
}

/// Resize every frame to `height x width`, bilinear.
pub fn resize_frames(frames: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 {
        return Err(Error::contract("resize_frames", format!("expected [T, H, W, 3], got {s:?}")));
    }
    if (s[1], s[2]) == (height, width) {
        return Ok(frames.clone());
    }
    let px = s[1] * s[2] * 3;
    let mut out = Vec::with_capacity(s[0] * height * width * 3);
    for t in 0..s[0] {
        let f = Tensor::new(&[s[1], s[2], 3], frames.data()[t * px..(t + 1) * px].to_vec())?;
        out.extend(resize_frame(&f, height, width)?.into_data());
    }
    Tensor::new(&[s[0], height, width, 3], out)
}

/// Frames bilinear, ground-truth masks nearest-neighbour; flags unchanged.
pub fn resize_clip(clip: &Clip, height: usize, width: usize) -> Result<Clip> {
    if (clip.height(), clip.width()) == (height, width) {
        return Ok(clip.clone());
    }
    let (n, t) = (clip.gt.objects(), clip.frame_count());
    let mut masks = Vec::with_capacity(n * t * height * width);
    for o in 0..n {
        for f in 0..t {
            masks.extend(resize_mask(&clip.mask(o, f), height, width).to_f64());
        }
    }
    Ok(Clip {
        frames: resize_frames(&clip.frames, height, width)?,
        gt: GroundTruth::new(Tensor::new(&[n, t, height, width], masks)?, clip.gt.flags.clone())?,
        ..clip.clone()
    })
}

/// Every `*.ppm` in `dir`, in file-name order, stacked to `[T, H, W, 3]`.
pub fn load_frames(dir: &Path) -> Result<Tensor> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir.display().to_string(), "no .ppm frames"));
    }
    let mut data = Vec::new();
    let mut hw = None;
    for p in &paths {
        let f = decode_ppm(&fs::read(p)?)?;
        let shape = (f.shape()[0], f.shape()[1]);
        if *hw.get_or_insert(shape) != shape {
            return Err(Error::format(p.display().to_string(), "frame size differs from the first frame"));
        }
        data.extend(f.into_data());
    }
    let (h, w) = hw.expect("non-empty");
    Tensor::new(&[paths.len(), h, w, 3], data)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serialises");
    s.push('\n');
    s.into_bytes()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// A mask sequence as stored next to inference output.
pub fn save_masks(path: &Path, masks: &[Mask]) -> Result<()> {
    let rles: Vec<Rle> = masks.iter().map(Mask::to_rle).collect();
    write(path, json(&rles))
}

pub fn load_masks(path: &Path) -> Result<Vec<Mask>> {
    let rles: Vec<Rle> = read_json(path)?;
    rles.iter().map(Mask::from_rle).collect()
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    id: String,
    query: String,
    target: usize,
    objects: Vec<ObjectSpec>,
    /// Per object, one RLE per frame.
    masks: Vec<Vec<Rle>>,
    flags: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    clips: Vec<String>,
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:03}.ppm"))
}

/// `dir/index.json` listing the clips and one directory per clip with
/// `frame_NNN.ppm` files and `clip.json` (query, objects, masks, flags).
pub fn save_dataset(dir: &Path, clips: &[Clip]) -> Result<()> {
    for clip in clips {
        let cdir = dir.join(&clip.id);
        for t in 0..clip.frame_count() {
            let (h, w) = (clip.height(), clip.width());
            let px = h * w * 3;
            let frame = Tensor::new(&[h, w, 3], clip.frames.data()[t * px..(t + 1) * px].to_vec())?;
            write(&frame_path(&cdir, t), encode_ppm(&frame)?)?;
        }
        let n = clip.objects.len();
        let meta = ClipMeta {
            id: clip.id.clone(),
            query: clip.query.clone(),
            target: clip.target,
            objects: clip.objects.clone(),
            masks: (0..n)
                .map(|o| (0..clip.frame_count()).map(|t| clip.mask(o, t).to_rle()).collect())
                .collect(),
            flags: (0..n)
                .map(|o| (0..clip.frame_count()).map(|t| clip.gt.flags.at(&[o, t])).collect())
                .collect(),
        };
        write(&cdir.join("clip.json"), json(&meta))?;
    }
    let index = DatasetIndex {
        clips: clips.iter().map(|c| c.id.clone()).collect(),
    };
    write(&dir.join("index.json"), json(&index))
}

pub fn load_clip(dir: &Path) -> Result<Clip> {
    let meta: ClipMeta = read_json(&dir.join("clip.json"))?;
    let n = meta.objects.len();
    let t = meta.masks.first().map_or(0, Vec::len);
    if n == 0 || t == 0 || meta.masks.len() != n || meta.flags.len() != n {
        return Err(Error::format("clip", format!("{}: inconsistent object lists", meta.id)));
    }
    let mut frames = Vec::new();
    let mut hw = None;
    for f in 0..t {
        let fr = decode_ppm(&fs::read(frame_path(dir, f))?)?;
        hw.get_or_insert((fr.shape()[0], fr.shape()[1]));
        if Some((fr.shape()[0], fr.shape()[1])) != hw {
            return Err(Error::format("clip", format!("{}: frame sizes differ", meta.id)));
        }
        frames.extend(fr.into_data());
    }
    let (h, w) = hw.expect("at least one frame");
    let mut masks = Vec::with_capacity(n * t * h * w);
    for per_obj in &meta.masks {
        if per_obj.len() != t {
            return Err(Error::format("clip", format!("{}: mask count differs per object", meta.id)));
        }
        for rle in per_obj {
            let m = Mask::from_rle(rle)?;
            if (m.height, m.width) != (h, w) {
                return Err(Error::format("clip", format!("{}: mask size differs from frames", meta.id)));
            }
            masks.extend(m.to_f64());
        }
    }
    let flags: Vec<f64> = meta.flags.concat();
    Ok(Clip {
        id: meta.id,
        frames: Tensor::new(&[t, h, w, 3], frames)?,
        query: meta.query,
        objects: meta.objects,
        target: meta.target,
        gt: GroundTruth::new(Tensor::new(&[n, t, h, w], masks)?, Tensor::new(&[n, t], flags)?)?,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Clip>> {
    let index: DatasetIndex = read_json(&dir.join("index.json"))?;
    index.clips.iter().map(|id| load_clip(&dir.join(id))).collect()
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    /// Hex of the 32-byte key.
    seed: String,
    stream: String,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f64` elements into the data file.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    step: u64,
    epoch: usize,
    rng: RngState,
    tensors: Vec<TensorEntry>,
    config: Config,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATA_FILE: &str = "tensors.bin";
const ADAM_M: &str = "adam.m:";
const ADAM_V: &str = "adam.v:";

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        Checkpoint {
            config: tr.cfg.clone(),
            step: tr.adam.step,
            epoch: tr.epoch,
            rng: tr.rng.clone(),
            params: tr.model.params.clone(),
            adam: Some(tr.adam.clone()),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let model = Model {
            cfg: self.config.model.clone(),
            params: self.params,
        };
        let adam = match self.adam {
            Some(a) => a,
            None => {
                let mut a = AdamState::new(&model.params);
                a.step = self.step;
                a
            }
        };
        Ok(Trainer {
            cfg: self.config,
            model,
            adam,
            rng: self.rng,
            epoch: self.epoch,
            augment: true,
        })
    }

    pub fn model(&self) -> Model {
        Model {
            cfg: self.config.model.clone(),
            params: self.params.clone(),
        }
    }

    /// Write `dir/manifest.toml` and `dir/tensors.bin`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut named: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(a) = &self.adam {
            named.extend(a.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
            named.extend(a.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
        }
        let mut bytes = Vec::new();
        let mut tensors = Vec::with_capacity(named.len());
        let mut offset = 0;
        for (name, t) in named {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let manifest = Manifest {
            step: self.step,
            epoch: self.epoch,
            rng: RngState {
                seed,
                stream: self.rng.get_stream().to_string(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            tensors,
            config: self.config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        write(&dir.join(MANIFEST_FILE), text)?;
        write(&dir.join(DATA_FILE), bytes)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format("checkpoint", msg);
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
        manifest.config.validate()?;
        let bytes = fs::read(dir.join(DATA_FILE))?;
        if bytes.len() % 8 != 0 {
            return Err(bad(format!("data file of {} bytes is not a whole number of f64", bytes.len())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of eight")))
            .collect();
        let mut params = ParamSet::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor {} runs past the data file", e.name)))?;
            let t = Tensor::new(&e.shape, data.to_vec())?;
            if let Some(name) = e.name.strip_prefix(ADAM_M) {
                m.insert(name.to_string(), t);
            } else if let Some(name) = e.name.strip_prefix(ADAM_V) {
                v.insert(name.to_string(), t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        let adam = (!m.is_empty()).then_some(AdamState {
            step: manifest.step,
            m,
            v,
        });
        let seed_bytes: Vec<u8> = (0..manifest.rng.seed.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(manifest.rng.seed.get(i..i + 2).unwrap_or("zz"), 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("rng seed is not hex".into()))?;
        let seed: [u8; 32] = seed_bytes.try_into().map_err(|_| bad("rng seed must be 32 bytes".into()))?;
        let parse = |s: &str| s.parse::<u128>().map_err(|_| bad(format!("bad rng counter `{s}`")));
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(parse(&manifest.rng.stream)? as u64);
        rng.set_word_pos(parse(&manifest.rng.word_pos)?);
        Ok(Checkpoint {
            config: manifest.config,
            step: manifest.step,
            epoch: manifest.epoch,
            rng,
            params,
            adam,
        })
    }
}
