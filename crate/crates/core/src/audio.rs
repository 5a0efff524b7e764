//! Mono PCM WAV input/output, ingest resampling and fixed-window
//! segmentation.
//!
//! Readers accept PCM 16-bit and IEEE float 32-bit RIFF/WAVE files with one
//! or two channels (stereo is averaged down to mono). The writer always
//! produces the canonical 44-byte-header 16-bit little-endian mono form.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ResampleMap;

/// The operating rate of the models: every ingested file is resampled here.
pub const CANONICAL_RATE: u32 = 16000;
/// One model window is one second at the canonical rate.
pub const WINDOW_LEN: usize = 16000;

/// Mono audio in `[-1, 1]` at a known sample rate.
#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Waveform> {
        if sample_rate == 0 {
            return Err(Error::contract("waveform: sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("waveform: non-finite sample"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

// ── WAV reading ──────────────────────────────────────────────────────────

fn read_u32le(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

fn read_u16le(buf: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([buf[at], buf[at + 1]])
}

/// Read a RIFF/WAVE file: PCM16 or float32, 1-2 channels, any sample rate.
/// Stereo is downmixed by averaging; 16-bit words map to `[-1, 1)` by
/// division by 32768.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;

    if bytes.len() < 12 {
        return Err(Error::Parse("file too short for a RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::Parse("missing RIFF chunk id".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::Parse("RIFF form type is not WAVE".into()));
    }

    // Walk chunks: need fmt then data.
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<(usize, usize)> = None; // (offset, len)
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32le(&bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::Parse(format!(
                "chunk '{}' overruns the file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Parse("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((
                    read_u16le(&bytes, body),
                    read_u16le(&bytes, body + 2),
                    read_u32le(&bytes, body + 4),
                    read_u16le(&bytes, body + 14),
                ));
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {}
        }
        pos = body + size + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| Error::Parse("missing fmt chunk".into()))?;
    let (doff, dlen) = data.ok_or_else(|| Error::Parse("missing data chunk".into()))?;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedFormat(format!("{channels} channels")));
    }
    if rate == 0 {
        return Err(Error::Parse("fmt chunk declares zero sample rate".into()));
    }
    let ch = channels as usize;
    let data_bytes = &bytes[doff..doff + dlen];

    let samples: Vec<f64> = match (format, bits) {
        (1, 16) => {
            let frame = 2 * ch;
            let n = data_bytes.len() / frame;
            (0..n)
                .map(|i| {
                    let mut acc = 0.0;
                    for c in 0..ch {
                        let at = i * frame + c * 2;
                        let v = i16::from_le_bytes([data_bytes[at], data_bytes[at + 1]]);
                        acc += v as f64 / 32768.0;
                    }
                    acc / ch as f64
                })
                .collect()
        }
        (3, 32) => {
            let frame = 4 * ch;
            let n = data_bytes.len() / frame;
            (0..n)
                .map(|i| {
                    let mut acc = 0.0;
                    for c in 0..ch {
                        let at = i * frame + c * 4;
                        let v = f32::from_le_bytes([
                            data_bytes[at],
                            data_bytes[at + 1],
                            data_bytes[at + 2],
                            data_bytes[at + 3],
                        ]);
                        acc += v as f64;
                    }
                    acc / ch as f64
                })
                .collect()
        }
        (f, b) => {
            return Err(Error::UnsupportedFormat(format!(
                "wave format tag {f} with {b} bits per sample"
            )))
        }
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse("data chunk contains non-finite floats".into()));
    }
    Waveform::new(samples, rate)
}

/// Quantize one sample to the 16-bit grid: clamp, scale by 32768,
/// round half away from zero.
pub fn quantize_i16(v: f64) -> i16 {
    let clamped = v.clamp(-1.0, 1.0 - 1.0 / 32768.0);
    let scaled = clamped * 32768.0;
    let rounded = if scaled >= 0.0 {
        (scaled + 0.5).floor()
    } else {
        (scaled - 0.5).ceil()
    };
    rounded.clamp(-32768.0, 32767.0) as i16
}

/// Write mono PCM16 with the canonical 44-byte header.
pub fn write_wav(wave: &Waveform, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let data_len = (wave.samples.len() * 2) as u32;
    let mut header = Vec::with_capacity(44);
    header.extend_from_slice(b"RIFF");
    header.extend_from_slice(&(36 + data_len).to_le_bytes());
    header.extend_from_slice(b"WAVE");
    header.extend_from_slice(b"fmt ");
    header.extend_from_slice(&16u32.to_le_bytes());
    header.extend_from_slice(&1u16.to_le_bytes()); // PCM
    header.extend_from_slice(&1u16.to_le_bytes()); // mono
    header.extend_from_slice(&wave.sample_rate.to_le_bytes());
    header.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes()); // byte rate
    header.extend_from_slice(&2u16.to_le_bytes()); // block align
    header.extend_from_slice(&16u16.to_le_bytes());
    header.extend_from_slice(b"data");
    header.extend_from_slice(&data_len.to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut body = Vec::with_capacity(wave.samples.len() * 2);
    for &v in &wave.samples {
        body.extend_from_slice(&quantize_i16(v).to_le_bytes());
    }
    w.write_all(&body).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Linear-interpolation resampling to `target_rate`
/// (output length `round(len * target/src)`).
pub fn resample_linear(wave: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::contract("resample: target rate must be positive"));
    }
    if target_rate == wave.sample_rate || wave.is_empty() {
        return Ok(Waveform {
            samples: wave.samples.clone(),
            sample_rate: target_rate,
        });
    }
    let out_len =
        ((wave.len() as f64) * target_rate as f64 / wave.sample_rate as f64).round() as usize;
    let out_len = out_len.max(1);
    let map = ResampleMap::new(wave.len(), out_len);
    let mut out = vec![0.0; out_len];
    map.apply(&wave.samples, &mut out);
    Waveform::new(out, target_rate)
}

// ── segmentation ─────────────────────────────────────────────────────────

/// Non-overlapping fixed-length windowing of one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    pub segment_length: usize,
    /// Equal to `segment_length`: windows do not overlap.
    pub hop: usize,
    pub count: usize,
    /// True when the last window is a zero-padded partial.
    pub padded_tail: bool,
    /// Original clip length, so assembly can undo tail padding.
    pub total_len: usize,
}

impl SegmentPlan {
    pub fn for_len(total_len: usize, segment_length: usize) -> Result<SegmentPlan> {
        if segment_length == 0 {
            return Err(Error::contract("segment plan: window must be positive"));
        }
        if total_len == 0 {
            return Err(Error::contract("segment plan: clip is empty"));
        }
        let count = total_len.div_ceil(segment_length);
        Ok(SegmentPlan {
            segment_length,
            hop: segment_length,
            count,
            padded_tail: total_len % segment_length != 0,
            total_len,
        })
    }
}

/// Split into `plan.count` windows; the final partial window is
/// zero-padded on the right.
pub fn segment(samples: &[f64], plan: &SegmentPlan) -> Result<Vec<Vec<f64>>> {
    if samples.len() != plan.total_len {
        return Err(Error::contract(format!(
            "segment: plan covers {} samples, clip has {}",
            plan.total_len,
            samples.len()
        )));
    }
    let mut out = Vec::with_capacity(plan.count);
    for i in 0..plan.count {
        let start = i * plan.segment_length;
        let end = (start + plan.segment_length).min(samples.len());
        let mut seg = samples[start..end].to_vec();
        seg.resize(plan.segment_length, 0.0);
        out.push(seg);
    }
    Ok(out)
}

/// Concatenate windows back into a clip, dropping tail padding.
pub fn assemble(segments: &[Vec<f64>], plan: &SegmentPlan) -> Result<Vec<f64>> {
    if segments.len() != plan.count {
        return Err(Error::contract(format!(
            "assemble: plan expects {} segments, got {}",
            plan.count,
            segments.len()
        )));
    }
    let mut out = Vec::with_capacity(plan.count * plan.segment_length);
    for seg in segments {
        if seg.len() != plan.segment_length {
            return Err(Error::contract("assemble: segment length mismatch"));
        }
        out.extend_from_slice(seg);
    }
    out.truncate(plan.total_len);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_scale_law() {
        assert_eq!(quantize_i16(0.0), 0);
        assert_eq!(quantize_i16(-1.0), -32768);
        assert_eq!(quantize_i16(1.5), 32767); // clamped
        assert_eq!(quantize_i16(0.5), 16384);
    }

    #[test]
    fn wav_roundtrip_preserves_sample_words() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..777)
            .map(|i| ((i * 37 % 200) as f64 / 100.0 - 1.0).clamp(-1.0, 1.0 - 1.0 / 32768.0))
            .collect();
        let wave = Waveform::new(samples.clone(), 16000).unwrap();
        write_wav(&wave, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.len(), wave.len());
        // Write the re-read file again: data chunks must be byte-identical.
        let path2 = dir.path().join("t2.wav");
        write_wav(&back, &path2).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn silent_waveform_writes_zero_data_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        write_wav(&Waveform::new(vec![0.0; 64], 16000).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 44 + 128);
        assert!(bytes[44..].iter().all(|&b| b == 0));
    }

    #[test]
    fn malformed_header_names_offending_part() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"RIFFxxxxWAVEjunkjunkjunk").unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(matches!(err, Error::Parse(_)), "{err}");
    }

    #[test]
    fn unsupported_codec_reports_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alaw.wav");
        // format tag 6 (a-law), 8 bits.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&6u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&8000u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_wav(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn stereo_downmix_of_identical_channels_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let vals: Vec<i16> = vec![100, -200, 3000, -32768, 32767];
        let mut bytes = Vec::new();
        let dlen = (vals.len() * 4) as u32;
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36 + dlen).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes()); // stereo
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&dlen.to_le_bytes());
        for v in &vals {
            bytes.extend_from_slice(&v.to_le_bytes());
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();
        let wave = read_wav(&path).unwrap();
        for (s, v) in wave.samples.iter().zip(vals.iter()) {
            assert!((s - *v as f64 / 32768.0).abs() < 1e-12);
        }
        assert!((wave.samples[3] + 1.0).abs() < 1e-12); // -32768 -> -1.0
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let wave = Waveform::new(vec![0.1, -0.2, 0.3], 16000).unwrap();
        let out = resample_linear(&wave, 16000).unwrap();
        assert_eq!(out.samples, wave.samples);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let wave = Waveform::new(vec![0.25; 1000], 16000).unwrap();
        let out = resample_linear(&wave, 44100).unwrap();
        assert!(out.samples.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn sine_survives_rate_roundtrip() {
        let sr = 16000;
        let n = sr as usize;
        let sine: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr as f64).sin() * 0.5)
            .collect();
        let wave = Waveform::new(sine.clone(), sr).unwrap();
        let up = resample_linear(&wave, 44100).unwrap();
        let back = resample_linear(&up, sr).unwrap();
        let m = back.len().min(n);
        let trim = 100..m - 100;
        let a = &sine[trim.clone()];
        let b = &back.samples[trim];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(dot / (na * nb) >= 0.999, "corr {}", dot / (na * nb));
    }

    #[test]
    fn segment_counts() {
        let plan = SegmentPlan::for_len(32000, 16000).unwrap();
        assert_eq!(plan.count, 2);
        assert!(!plan.padded_tail);

        let plan = SegmentPlan::for_len(17000, 16000).unwrap();
        assert_eq!(plan.count, 2);
        assert!(plan.padded_tail);
        let segs = segment(&vec![1.0; 17000], &plan).unwrap();
        assert_eq!(segs[1][..1000], vec![1.0; 1000][..]);
        assert!(segs[1][1000..].iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn segment_assemble_roundtrip(len in 1usize..5000, window in 1usize..700) {
            let samples: Vec<f64> = (0..len).map(|i| (i as f64 * 0.01).sin()).collect();
            let plan = SegmentPlan::for_len(len, window).unwrap();
            let segs = segment(&samples, &plan).unwrap();
            let back = assemble(&segs, &plan).unwrap();
            prop_assert_eq!(back, samples);
        }

        #[test]
        fn wav_roundtrip_arbitrary_samples(samples in proptest::collection::vec(-1.5f64..1.5, 1..400)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.wav");
            let wave = Waveform::new(samples, 8000).unwrap();
            write_wav(&wave, &path).unwrap();
            let back = read_wav(&path).unwrap();
            // Re-writing what we read must reproduce the bytes exactly.
            let path2 = dir.path().join("p2.wav");
            write_wav(&back, &path2).unwrap();
            prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        }
    }
}
