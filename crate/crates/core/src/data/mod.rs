//! Stem datasets laid out as `root/{train,test}/<track>/<stem>.wav`.

mod augment;
mod toy;

pub use augment::{augment, AugmentConfig};
pub use toy::{toy_track, write_toy_dataset, ToyConfig, TOY_SOURCES};

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::Rng;

use crate::signal::{read_wav_segment, wav_info, write_wav, MonoPolicy, WavFormat, Waveform};
use crate::{Error, Result};

pub const MUSDB_SOURCES: [&str; 4] = ["vocals", "drums", "bass", "other"];
pub const MIXTURE: &str = "mixture";
pub const VALIDATION_LIST: &str = "validation.txt";

/// Relative ℓ₂ deviation of the mixture from the stem sum above which a
/// warning is logged.
const ADDITIVITY_TOLERANCE: f64 = 1e-3;

/// One song: the mixture and its stems, all aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct StemTrack {
    pub name: String,
    pub mixture: Waveform,
    pub sources: Vec<(String, Waveform)>,
}

impl StemTrack {
    pub fn new(name: impl Into<String>, mixture: Waveform, sources: Vec<(String, Waveform)>) -> Result<Self> {
        let name = name.into();
        for (stem, w) in &sources {
            if w.len() != mixture.len() || w.sample_rate() != mixture.sample_rate() {
                return Err(Error::Track {
                    track: name,
                    detail: format!(
                        "stem `{stem}` has {} samples @ {} Hz, mixture {} @ {} Hz",
                        w.len(),
                        w.sample_rate(),
                        mixture.len(),
                        mixture.sample_rate()
                    ),
                });
            }
        }
        let track = Self { name, mixture, sources };
        let dev = track.additivity_error();
        if dev > ADDITIVITY_TOLERANCE {
            warn!("track `{}`: mixture deviates from the stem sum by {dev:.2e} (relative ℓ₂)", track.name);
        }
        Ok(track)
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        self.mixture.sample_rate()
    }

    pub fn seconds(&self) -> f64 {
        self.mixture.seconds()
    }

    pub fn source(&self, stem: &str) -> Option<&Waveform> {
        self.sources.iter().find(|(s, _)| s == stem).map(|(_, w)| w)
    }

    pub fn source_names(&self) -> Vec<&str> {
        self.sources.iter().map(|(s, _)| s.as_str()).collect()
    }

    /// `‖x − Σ sᵢ‖ / ‖x‖`.
    pub fn additivity_error(&self) -> f64 {
        let mut err = 0.0;
        for ch in 0..2 {
            for (i, x) in self.mixture.channel(ch).iter().enumerate() {
                let sum: f64 = self.sources.iter().map(|(_, w)| w.channel(ch)[i] as f64).sum();
                err += (*x as f64 - sum).powi(2);
            }
        }
        (err / self.mixture.energy().max(f64::MIN_POSITIVE)).sqrt()
    }

    /// Samples `start..start + len` of every waveform.
    pub fn segment(&self, start: usize, len: usize) -> Self {
        Self {
            name: self.name.clone(),
            mixture: self.mixture.segment(start, start + len),
            sources: self.sources.iter().map(|(s, w)| (s.clone(), w.segment(start, start + len))).collect(),
        }
    }

    /// Writes `dir/mixture.wav` and one file per stem as 32-bit float.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_wav(dir.join(format!("{MIXTURE}.wav")), &self.mixture, WavFormat::Float32)?;
        for (stem, w) in &self.sources {
            write_wav(dir.join(format!("{stem}.wav")), w, WavFormat::Float32)?;
        }
        Ok(())
    }
}

/// Uniform start offset of a `len`-sample excerpt.
fn excerpt_offset<R: Rng + ?Sized>(track: &str, total: usize, len: usize, rng: &mut R) -> Result<usize> {
    if len == 0 || len > total {
        return Err(Error::Track {
            track: track.into(),
            detail: format!("cannot take a {len}-sample excerpt from {total} samples"),
        });
    }
    Ok(rng.gen_range(0..=total - len))
}

/// An aligned `seconds`-long excerpt at a uniformly random offset.
pub fn random_excerpt<R: Rng + ?Sized>(track: &StemTrack, seconds: f64, rng: &mut R) -> Result<StemTrack> {
    let len = (seconds * track.sample_rate() as f64).round() as usize;
    let start = excerpt_offset(&track.name, track.len(), len, rng)?;
    Ok(track.segment(start, len))
}

/// A track on disk, indexed from WAV headers; audio is read on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRef {
    pub name: String,
    pub dir: PathBuf,
    pub sources: Vec<String>,
    pub frames: usize,
    pub sample_rate: u32,
    pub mono: MonoPolicy,
}

impl TrackRef {
    fn stem_path(&self, stem: &str) -> PathBuf {
        self.dir.join(format!("{stem}.wav"))
    }

    pub fn seconds(&self) -> f64 {
        self.frames as f64 / self.sample_rate as f64
    }

    pub fn load(&self) -> Result<StemTrack> {
        self.load_segment(0, self.frames)
    }

    pub fn load_segment(&self, start: usize, len: usize) -> Result<StemTrack> {
        let read = |stem: &str| read_wav_segment(self.stem_path(stem), self.mono, start, len);
        let mixture = read(MIXTURE)?;
        let sources = self.sources.iter().map(|s| Ok((s.clone(), read(s)?))).collect::<Result<_>>()?;
        StemTrack::new(self.name.clone(), mixture, sources)
    }

    /// Like [`random_excerpt`] but decodes only the excerpt.
    pub fn random_excerpt<R: Rng + ?Sized>(&self, seconds: f64, rng: &mut R) -> Result<StemTrack> {
        let len = (seconds * self.sample_rate as f64).round() as usize;
        let start = excerpt_offset(&self.name, self.frames, len, rng)?;
        self.load_segment(start, len)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TrackRef>,
    pub validation: Vec<TrackRef>,
    pub test: Vec<TrackRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub sources: Vec<String>,
    /// Track names moved from `train` to `validation`; defaults to
    /// `root/validation.txt` when present.
    pub validation_list: Option<PathBuf>,
    pub mono: MonoPolicy,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { sources: MUSDB_SOURCES.map(String::from).to_vec(), validation_list: None, mono: MonoPolicy::Reject }
    }
}

fn index_track(dir: &Path, opts: &DatasetOptions) -> Result<TrackRef> {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let track_err = |detail: String| Error::Track { track: name.clone(), detail };
    let mut shape: Option<(usize, u32, String)> = None;
    for stem in std::iter::once(MIXTURE).chain(opts.sources.iter().map(String::as_str)) {
        let path = dir.join(format!("{stem}.wav"));
        if !path.is_file() {
            return Err(track_err(format!("missing stem `{stem}` ({})", path.display())));
        }
        let info = wav_info(&path)?;
        if info.channels == 1 && opts.mono == MonoPolicy::Reject {
            return Err(track_err(format!("stem `{stem}` is mono")));
        }
        match &shape {
            None => shape = Some((info.frames, info.sample_rate, stem.to_string())),
            Some((frames, rate, first)) if (*frames, *rate) != (info.frames, info.sample_rate) => {
                return Err(track_err(format!(
                    "stem `{stem}` has {} samples @ {} Hz but `{first}` has {frames} @ {rate} Hz",
                    info.frames, info.sample_rate
                )))
            }
            Some(_) => {}
        }
    }
    let (frames, sample_rate, _) = shape.expect("mixture is always indexed");
    Ok(TrackRef { name, dir: dir.to_path_buf(), sources: opts.sources.clone(), frames, sample_rate, mono: opts.mono })
}

fn scan_split(dir: &Path, opts: &DatasetOptions) -> Result<Vec<TrackRef>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| index_track(d, opts)).collect()
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Indexes `root/train` and `root/test`. Missing split directories are empty.
pub fn scan_dataset(root: impl AsRef<Path>, opts: &DatasetOptions) -> Result<DatasetSplit> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let mut train = scan_split(&root.join("train"), opts)?;
    let test = scan_split(&root.join("test"), opts)?;
    let list = match &opts.validation_list {
        Some(p) => Some(p.clone()),
        None => Some(root.join(VALIDATION_LIST)).filter(|p| p.is_file()),
    };
    let mut validation = Vec::new();
    if let Some(list) = list {
        for name in read_list(&list)? {
            match train.iter().position(|t| t.name == name) {
                Some(i) => validation.push(train.remove(i)),
                None => {
                    return Err(Error::Track {
                        track: name,
                        detail: format!("listed in {} but not found under train/", list.display()),
                    })
                }
            }
        }
    }
    if let Some(t) = test.iter().find(|t| train.iter().chain(&validation).any(|u| u.name == t.name)) {
        return Err(Error::Track { track: t.name.clone(), detail: "appears in both train and test".into() });
    }
    Ok(DatasetSplit { train, validation, test })
}
