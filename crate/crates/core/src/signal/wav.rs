use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::{Error, Result};

/// What to do with single-channel input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MonoPolicy {
    #[default]
    Reject,
    Duplicate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WavFormat {
    #[default]
    Pcm16,
    Float32,
}

/// Header facts needed to index a file without decoding it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WavInfo {
    pub channels: u16,
    pub sample_rate: u32,
    /// Samples per channel.
    pub frames: usize,
}

pub fn wav_info(path: impl AsRef<Path>) -> Result<WavInfo> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|source| Error::Wav { path: path.to_path_buf(), source })?;
    let spec = reader.spec();
    Ok(WavInfo { channels: spec.channels, sample_rate: spec.sample_rate, frames: reader.duration() as usize })
}

pub fn read_wav(path: impl AsRef<Path>, mono: MonoPolicy) -> Result<Waveform> {
    read(path.as_ref(), mono, None)
}

/// `len` samples per channel starting at sample `start`.
pub fn read_wav_segment(path: impl AsRef<Path>, mono: MonoPolicy, start: usize, len: usize) -> Result<Waveform> {
    read(path.as_ref(), mono, Some((start, len)))
}

fn read(path: &Path, mono: MonoPolicy, range: Option<(usize, usize)>) -> Result<Waveform> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    match (spec.channels, mono) {
        (2, _) | (1, MonoPolicy::Duplicate) => {}
        (1, MonoPolicy::Reject) => {
            return Err(Error::Signal(format!(
                "{} is mono; stereo input is required (use --dup-mono to duplicate the channel)",
                path.display()
            )))
        }
        (n, _) => return Err(Error::Signal(format!("{}: {n} channels, expected stereo", path.display()))),
    }
    let frames = reader.duration() as usize;
    let (start, len) = range.unwrap_or((0, frames));
    if start + len > frames {
        return Err(Error::Signal(format!(
            "{}: samples {start}..{} requested from a {frames}-sample file",
            path.display(),
            start + len
        )));
    }
    reader.seek(start as u32).map_err(|e| Error::io(path, e))?;
    let count = len * spec.channels as usize;
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => {
            reader.samples::<f32>().take(count).collect::<Result<_, _>>().map_err(wav_err)?
        }
        (SampleFormat::Int, bits @ 1..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f32;
            reader
                .samples::<i32>()
                .take(count)
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(Error::Signal(format!("{}: unsupported sample format {fmt:?}/{bits} bit", path.display())))
        }
    };
    let (left, right) = if spec.channels == 2 {
        samples.chunks_exact(2).map(|f| (f[0], f[1])).unzip()
    } else {
        (samples.clone(), samples)
    };
    Waveform::new(left, right, spec.sample_rate)
}

/// Writes stereo audio; PCM output is clipped to `[-1, 1]`.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec { channels: 2, sample_rate: w.sample_rate(), bits_per_sample: bits, sample_format };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for (l, r) in w.channel(0).iter().zip(w.channel(1)) {
        for v in [*l, *r] {
            match format {
                WavFormat::Pcm16 => writer.write_sample((v.clamp(-1.0, 1.0) * 32767.0).round() as i16),
                WavFormat::Float32 => writer.write_sample(v),
            }
            .map_err(wav_err)?;
        }
    }
    writer.finalize().map_err(wav_err)
}
