use std::f64::consts::TAU;
use std::path::Path;

use crate::backend::{AudioInfo, TokenFrame};
use crate::error::{Error, Result};

pub const MOCK_SAMPLE_RATE: u32 = 32_000;

/// Tone frequency for a token: 110 Hz times a semitone per token.
pub fn token_frequency(token: u32) -> f64 {
    110.0 * 2f64.powf(token as f64 / 12.0)
}

/// Writes frames as 16-bit mono PCM, one tone per frame.
///
/// Channels are mixed with equal weight. The phase of each channel is
/// carried across frames so frame joins are click-free.
pub fn render_wav(frames: &[TokenFrame], frame_rate: f64, path: &Path) -> Result<AudioInfo> {
    let samples_per_frame = (MOCK_SAMPLE_RATE as f64 / frame_rate).round() as u64;
    if samples_per_frame == 0 {
        return Err(Error::Parameter(format!(
            "frame rate {frame_rate} exceeds the render sample rate"
        )));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: MOCK_SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_error)?;
    let channels = frames.first().map_or(1, |f| f.len().max(1));
    let mut phases = vec![0.0f64; channels];
    let dt = 1.0 / MOCK_SAMPLE_RATE as f64;
    for frame in frames {
        let steps: Vec<f64> = frame.iter().map(|&t| TAU * token_frequency(t) * dt).collect();
        for _ in 0..samples_per_frame {
            let mut mix = 0.0;
            for (phase, step) in phases.iter_mut().zip(&steps) {
                mix += phase.sin();
                *phase = (*phase + step) % TAU;
            }
            let amplitude = 0.5 * mix / channels as f64;
            writer
                .write_sample((amplitude * i16::MAX as f64).round() as i16)
                .map_err(wav_error)?;
        }
    }
    writer.finalize().map_err(wav_error)?;
    let samples = samples_per_frame * frames.len() as u64;
    Ok(AudioInfo {
        path: path.to_path_buf(),
        sample_rate: MOCK_SAMPLE_RATE,
        samples,
        duration_seconds: samples as f64 / MOCK_SAMPLE_RATE as f64,
    })
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Internal(format!("wav: {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_semitone_per_token() {
        assert_eq!(token_frequency(0), 110.0);
        assert!((token_frequency(12) - 220.0).abs() < 1e-12);
        assert!((token_frequency(7) / token_frequency(6) - 2f64.powf(1.0 / 12.0)).abs() < 1e-12);
    }

    #[test]
    fn five_hundred_frames_is_ten_seconds() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.wav");
        let frames: Vec<TokenFrame> = (0..500).map(|i| TokenFrame::single(i % 64)).collect();
        let info = render_wav(&frames, 50.0, &path).unwrap();
        assert!((info.duration_seconds - 10.0).abs() <= 0.02);
        let reader = hound::WavReader::open(&path).unwrap();
        assert_eq!(reader.duration() as u64, info.samples);
        assert_eq!(reader.spec().sample_rate, MOCK_SAMPLE_RATE);
    }
}
