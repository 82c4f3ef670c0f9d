//! Dataset preparation (downsample, optional external codec round trip,
//! JSON-lines manifest), temporal windowing, cropping and augmentation.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image_io::{bicubic_downsample, load_frame, save_frame};
use crate::model::{bilinear_upsample, WINDOW};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationMode {
    Qp,
    Crf,
    None,
}

impl std::str::FromStr for DegradationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qp" => Ok(Self::Qp),
            "crf" => Ok(Self::Crf),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unknown degradation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub mode: DegradationMode,
    /// QP or CRF value; absent for `none`.
    pub value: Option<u32>,
    /// Shell template with `{input}`, `{output}`, `{qp}`, `{crf}` placeholders.
    pub encoder_cmd: Option<String>,
    pub scale: usize,
}

impl Degradation {
    pub fn none(scale: usize) -> Self {
        Self {
            mode: DegradationMode::None,
            value: None,
            encoder_cmd: None,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.scale >= 1, Config, "scale must be >= 1");
        if self.mode != DegradationMode::None {
            ensure!(self.value.is_some(), Config, "{:?} degradation needs a value", self.mode);
            ensure!(self.encoder_cmd.is_some(), Config, "{:?} degradation needs an encoder command", self.mode);
        }
        Ok(())
    }

    /// Encoder command with placeholders substituted.
    pub fn command(&self, input: &Path, output: &Path) -> Option<String> {
        let template = self.encoder_cmd.as_ref()?;
        let value = self.value.map(|v| v.to_string()).unwrap_or_default();
        let (qp, crf) = match self.mode {
            DegradationMode::Qp => (value.as_str(), ""),
            DegradationMode::Crf => ("", value.as_str()),
            DegradationMode::None => ("", ""),
        };
        Some(
            template
                .replace("{input}", &input.display().to_string())
                .replace("{output}", &output.display().to_string())
                .replace("{qp}", qp)
                .replace("{crf}", crf),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceStatus {
    Ok,
    Failed,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub hr_frames: Vec<PathBuf>,
    pub lr_frames: Vec<PathBuf>,
    pub degradation: Degradation,
    pub status: SequenceStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for s in &self.sequences {
            writeln!(f, "{}", serde_json::to_string(s)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut sequences = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                sequences.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { sequences })
    }

    pub fn usable(&self) -> impl Iterator<Item = &SequenceEntry> {
        self.sequences.iter().filter(|s| s.status == SequenceStatus::Ok)
    }

    /// Checks frame counts, file presence and LR/HR size ratios of usable sequences.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.usable().next().is_some(), Data, "manifest has no usable sequences");
        for s in self.usable() {
            s.degradation.validate()?;
            ensure!(!s.hr_frames.is_empty(), Data, "sequence {} has no frames", s.name);
            ensure!(
                s.hr_frames.len() == s.lr_frames.len(),
                Data,
                "sequence {}: {} HR frames but {} LR frames",
                s.name,
                s.hr_frames.len(),
                s.lr_frames.len()
            );
            for (hr, lr) in s.hr_frames.iter().zip(&s.lr_frames) {
                let (hw, hh) = image_dims(hr)?;
                let (lw, lh) = image_dims(lr)?;
                let k = s.degradation.scale as u32;
                ensure!(
                    hw == lw * k && hh == lh * k,
                    Data,
                    "sequence {}: {} is {hw}x{hh} but {} is {lw}x{lh} at scale {k}",
                    s.name,
                    hr.display(),
                    lr.display()
                );
            }
        }
        Ok(())
    }
}

fn image_dims(path: &Path) -> Result<(u32, u32)> {
    ensure!(path.is_file(), Data, "missing frame {}", path.display());
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Sequence directories under `src_dir`; `src_dir` itself when it holds frames directly.
fn sequence_dirs(src_dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !png_files(src_dir)?.is_empty() {
        let name = src_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "seq".into());
        return Ok(vec![(name, src_dir.to_path_buf())]);
    }
    let mut dirs: Vec<_> = fs::read_dir(src_dir)
        .map_err(|e| Error::io(src_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), p))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn run_encoder(cmd: &str) -> std::result::Result<(), String> {
    let out = Command::new("sh").arg("-c").arg(cmd).output().map_err(|e| format!("spawn failed: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "encoder exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// Downsamples every HR frame (`channels = 1` converts to luma first), runs the
/// encoder round trip when configured, writes LR PNGs under `out_dir/lr/<seq>`
/// and the manifest to `out_dir/manifest.jsonl`.
///
/// The encoder receives a directory of downsampled PNGs as `{input}` and must
/// leave decoded PNGs with the same file names in `{output}`.
pub fn prepare_dataset(src_dir: &Path, out_dir: &Path, degradation: &Degradation, channels: usize) -> Result<DatasetManifest> {
    degradation.validate()?;
    let seqs = sequence_dirs(src_dir)?;
    ensure!(!seqs.is_empty(), Data, "no sequences found in {}", src_dir.display());
    let mut manifest = DatasetManifest::default();
    for (name, dir) in seqs {
        let hr_frames = png_files(&dir)?;
        ensure!(!hr_frames.is_empty(), Data, "sequence {name} has no PNG frames");
        let lr_dir = out_dir.join("lr").join(&name);
        let stage_dir = if degradation.mode == DegradationMode::None {
            lr_dir.clone()
        } else {
            out_dir.join("downsampled").join(&name)
        };
        fs::create_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;
        fs::create_dir_all(&lr_dir).map_err(|e| Error::io(&lr_dir, e))?;
        let mut lr_frames = Vec::with_capacity(hr_frames.len());
        for hr in &hr_frames {
            let frame = load_frame(hr, channels)?;
            let lr = bicubic_downsample(&frame, degradation.scale)?;
            let file = hr.file_name().expect("frame file name");
            save_frame(&stage_dir.join(file), &lr)?;
            lr_frames.push(lr_dir.join(file));
        }
        let mut entry = SequenceEntry {
            name: name.clone(),
            hr_frames,
            lr_frames,
            degradation: degradation.clone(),
            status: SequenceStatus::Ok,
            error: None,
        };
        if let Some(cmd) = degradation.command(&stage_dir, &lr_dir) {
            let outcome = run_encoder(&cmd).and_then(|_| {
                match entry.lr_frames.iter().find(|p| !p.is_file()) {
                    Some(p) => Err(format!("encoder did not produce {}", p.display())),
                    None => Ok(()),
                }
            });
            if let Err(e) = outcome {
                log::warn!("sequence {name} failed: {e}");
                entry.status = SequenceStatus::Failed;
                entry.error = Some(e);
            }
        }
        manifest.sequences.push(entry);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Frame indices `t-3 ..= t+3` with reflection at the sequence ends.
pub fn sample_window(len: usize, t: usize) -> [usize; WINDOW] {
    assert!(len >= 1, "empty sequence");
    let r = (WINDOW / 2) as isize;
    std::array::from_fn(|i| crate::tensor::reflect(t as isize + i as isize - r, len))
}

/// Decoded frames of one sequence.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub lr: Vec<Tensor<f32>>,
    pub hr: Vec<Tensor<f32>>,
    pub scale: usize,
}

impl Sequence {
    pub fn load(entry: &SequenceEntry, channels: usize) -> Result<Self> {
        let lr = entry.lr_frames.iter().map(|p| load_frame(p, channels)).collect::<Result<Vec<_>>>()?;
        let hr = entry.hr_frames.iter().map(|p| load_frame(p, channels)).collect::<Result<Vec<_>>>()?;
        Self::new(entry.name.clone(), lr, hr, entry.degradation.scale)
    }

    pub fn new(name: String, lr: Vec<Tensor<f32>>, hr: Vec<Tensor<f32>>, scale: usize) -> Result<Self> {
        ensure!(!lr.is_empty() && lr.len() == hr.len(), Data, "sequence {name}: frame count mismatch");
        let (c, h, w) = lr[0].chw();
        for (l, r) in lr.iter().zip(&hr) {
            ensure!(l.chw() == (c, h, w), Data, "sequence {name}: LR frames differ in size");
            ensure!(
                r.chw() == (c, h * scale, w * scale),
                Data,
                "sequence {name}: HR frame {:?} does not match LR {:?} at scale {scale}",
                r.shape(),
                l.shape()
            );
        }
        Ok(Self { name, lr, hr, scale })
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    pub fn sample(&self, t: usize) -> TrainSample {
        let lr: Vec<_> = sample_window(self.len(), t).iter().map(|&i| self.lr[i].clone()).collect();
        let up = bilinear_upsample(&lr[WINDOW / 2], self.scale);
        TrainSample {
            lr,
            hr: self.hr[t].clone(),
            up,
        }
    }
}

pub fn load_manifest_sequences(manifest: &DatasetManifest, channels: usize) -> Result<Vec<Sequence>> {
    manifest.usable().map(|e| Sequence::load(e, channels)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub lr: Vec<Tensor<f32>>,
    pub hr: Tensor<f32>,
    /// Bilinear upsample of the centre LR frame.
    pub up: Tensor<f32>,
}

/// Randomness key; sampling never depends on worker identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleKey {
    pub seed: u64,
    pub epoch: u64,
    pub index: u64,
}

impl SampleKey {
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.index);
        rng
    }
}

/// One of the 8 symmetries of the square: bit 0 flips x, bit 1 flips y, bit 2 transposes (applied last).
pub fn dihedral(x: &Tensor<f32>, t: u8) -> Tensor<f32> {
    let (c, h, w) = x.chw();
    let transpose = t & 4 != 0;
    let (oh, ow) = if transpose { (w, h) } else { (h, w) };
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (k, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
        let (mut sy, mut sx) = if transpose { (xx, y) } else { (y, xx) };
        if t & 1 != 0 {
            sx = w - 1 - sx;
        }
        if t & 2 != 0 {
            sy = h - 1 - sy;
        }
        x.data()[(k * h + sy) * w + sx]
    })
}

pub fn crop(x: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let (c, sh, sw) = x.chw();
    assert!(y0 + h <= sh && x0 + w <= sw, "crop out of bounds");
    Tensor::from_fn(&[c, h, w], |i| {
        let (k, y, xx) = (i / (h * w), (i / w) % h, i % w);
        x.data()[(k * sh + y0 + y) * sw + x0 + xx]
    })
}

/// Crops an HR patch of `patch` pixels (LR `patch/scale`, aligned by the scale)
/// and applies one random dihedral transform to every frame. `patch = 0` keeps
/// whole frames.
pub fn crop_and_augment(sample: &TrainSample, patch: usize, scale: usize, augment: bool, key: SampleKey) -> Result<TrainSample> {
    let (_, h, w) = sample.lr[0].chw();
    let mut rng = key.rng();
    let (lh, lw, y0, x0) = if patch == 0 {
        (h, w, 0, 0)
    } else {
        ensure!(patch % scale == 0, Invalid, "patch {patch} is not divisible by scale {scale}");
        let lp = patch / scale;
        ensure!(lp <= h && lp <= w, Invalid, "patch {patch} larger than frame {}x{}", h * scale, w * scale);
        (lp, lp, rng.random_range(0..=h - lp), rng.random_range(0..=w - lp))
    };
    let t: u8 = if augment { rng.random_range(0..8) } else { 0 };
    let lr = sample.lr.iter().map(|f| dihedral(&crop(f, y0, x0, lh, lw), t)).collect();
    let hr_crop = |f: &Tensor<f32>| dihedral(&crop(f, y0 * scale, x0 * scale, lh * scale, lw * scale), t);
    Ok(TrainSample {
        lr,
        hr: hr_crop(&sample.hr),
        up: hr_crop(&sample.up),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows() {
        assert_eq!(sample_window(10, 5), [2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(sample_window(10, 0), [3, 2, 1, 0, 1, 2, 3]);
        assert_eq!(sample_window(10, 9), [6, 7, 8, 9, 8, 7, 6]);
        assert_eq!(sample_window(1, 0), [0; 7]);
        assert!(sample_window(2, 0).iter().all(|&i| i < 2));
    }

    #[test]
    fn dihedral_group() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| i as f32);
        let mut seen = Vec::new();
        for t in 0..8 {
            let y = dihedral(&x, t);
            assert_eq!(y.sum(), x.sum());
            assert!(!seen.contains(&y));
            seen.push(y);
        }
        // horizontal flip is an involution and maps column j to w-1-j
        let f = dihedral(&x, 1);
        assert_eq!(dihedral(&f, 1), x);
        assert_eq!(f.data()[0], x.data()[4]);
    }

    fn sample(h: usize, w: usize) -> TrainSample {
        let lr: Vec<_> = (0..7).map(|k| Tensor::from_fn(&[1, h, w], |i| (i + 100 * k) as f32)).collect();
        let hr = Tensor::from_fn(&[1, 4 * h, 4 * w], |i| {
            let (y, x) = (i / (4 * w), i % (4 * w));
            ((y / 4) * w + x / 4 + 300) as f32
        });
        let up = bilinear_upsample(&lr[3], 4);
        TrainSample { lr, hr, up }
    }

    #[test]
    fn crop_keeps_lr_hr_correspondence() {
        let s = sample(8, 8);
        let key = SampleKey {
            seed: 1,
            epoch: 0,
            index: 0,
        };
        for aug in [false, true] {
            for index in 0..8 {
                let out = crop_and_augment(&s, 16, 4, aug, SampleKey { index, ..key }).unwrap();
                assert_eq!(out.lr[0].shape(), &[1, 4, 4]);
                assert_eq!(out.hr.shape(), &[1, 16, 16]);
                // hr pixel (4y+a, 4x+b) came from the LR centre pixel (y, x)
                for y in 0..4 {
                    for x in 0..4 {
                        for (a, b) in [(0, 0), (3, 2), (1, 3)] {
                            let hv = out.hr.data()[(4 * y + a) * 16 + 4 * x + b];
                            assert_eq!(hv, out.lr[3].data()[y * 4 + x]);
                        }
                    }
                }
            }
        }
        let a = crop_and_augment(&s, 16, 4, true, key).unwrap();
        assert_eq!(a, crop_and_augment(&s, 16, 4, true, key).unwrap());
        assert!(crop_and_augment(&s, 64, 4, true, key).is_err());
        assert!(crop_and_augment(&s, 18, 4, true, key).is_err());
    }

    #[test]
    fn flip_then_crop_equals_crop_then_flip() {
        let x = Tensor::from_fn(&[1, 8, 8], |i| i as f32);
        let (y0, x0, n) = (2, 1, 4);
        let a = crop(&dihedral(&x, 1), y0, x0, n, n);
        let b = dihedral(&crop(&x, y0, 8 - x0 - n, n, n), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_command_substitution() {
        let d = Degradation {
            mode: DegradationMode::Qp,
            value: Some(37),
            encoder_cmd: Some("enc -q {qp} {input} {output} {crf}".into()),
            scale: 4,
        };
        assert_eq!(d.command(Path::new("/a"), Path::new("/b")).unwrap(), "enc -q 37 /a /b ");
        assert!(Degradation::none(4).command(Path::new("/a"), Path::new("/b")).is_none());
        assert!(Degradation { value: None, ..d }.validate().is_err());
    }
}
