//! Multichannel WAV input and 32-bit float output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::stft::Wave;

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav { path: path.to_path_buf(), source }
}

/// Reads 32-bit float or 16-bit integer PCM into planar channels.
pub fn read_wav(path: &Path) -> Result<Wave> {
    let reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()
        }
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (format, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported sample format {format:?} with {bits} bits (expected 32-bit float or 16-bit PCM)",
                path.display()
            )))
        }
    }
    .map_err(wav_err(path))?;
    if channels == 0 || interleaved.len() % channels != 0 {
        return Err(Error::Data(format!("{}: truncated multichannel frame", path.display())));
    }
    let mut planar = vec![Vec::with_capacity(interleaved.len() / channels); channels];
    for frame in interleaved.chunks_exact(channels) {
        for (ch, v) in planar.iter_mut().zip(frame) {
            ch.push(*v);
        }
    }
    Wave::new(spec.sample_rate, planar)
}

/// Writes interleaved 32-bit float PCM.
pub fn write_wav(path: &Path, wave: &Wave) -> Result<()> {
    let spec = WavSpec {
        channels: u16::try_from(wave.num_channels())
            .map_err(|_| Error::InvalidArgument(format!("{} channels do not fit a WAV header", wave.num_channels())))?,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for i in 0..wave.len() {
        for ch in &wave.channels {
            writer.write_sample(ch[i] as f32).map_err(wav_err(path))?;
        }
    }
    writer.finalize().map_err(wav_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.wav");
        let wave = Wave::new(8000, vec![vec![0.25, -1.5, f64::from(3.0e-7f32)], vec![1.0, 0.0, -0.125]]).unwrap();
        write_wav(&path, &wave).unwrap();
        assert_eq!(read_wav(&path).unwrap(), wave);
    }

    #[test]
    fn sixteen_bit_input_is_scaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i16.wav");
        let spec = WavSpec { channels: 1, sample_rate: 16000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.write_sample(-32768i16).unwrap();
        w.finalize().unwrap();
        assert_eq!(read_wav(&path).unwrap().channels[0], vec![0.5, -1.0]);
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        std::fs::write(&path, b"not a wav file").unwrap();
        assert!(read_wav(&path).is_err());
    }
}
