use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::geometry::Box;
use super::scene::Sequence;
use super::track::Metrics;
use crate::error::{contract_err, dim_err, Result, SbtError};
use crate::tensor::{Float, Tensor};

fn format_err(msg: String) -> SbtError {
    SbtError::Format(msg)
}

pub fn frame_name(index: usize) -> String {
    format!("{:08}.ppm", index + 1)
}

/// Binary PPM (P6) from a `[3,h,w]` tensor with values in `[0,1]`.
pub fn encode_ppm<F: Float>(img: &Tensor<F>) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(dim_err!("PPM needs [3,h,w], got {:?}", img.shape()));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    out.reserve(3 * w * h);
    for p in 0..w * h {
        for ch in 0..3 {
            out.push(to_byte(d[ch * w * h + p].as_f64()));
        }
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5) from a `[1,h,w]` or `[h,w]` map, min-max stretched.
pub fn encode_pgm<F: Float>(map: &Tensor<F>) -> Result<Vec<u8>> {
    let (h, w) = match map.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(dim_err!("PGM needs [1,h,w], got {s:?}")),
    };
    let vals: Vec<f64> = map.data().iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(vals.iter().map(|v| to_byte((v - lo) / range)));
    Ok(out)
}

/// Parses a binary PPM (P6, maxval ≤ 255) into `[3,h,w]` with values in `[0,1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format_err(format!("unsupported image magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format_err(format!("bad PPM header field {s:?}")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(format_err(format!("unsupported PPM maxval {max}")));
    }
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| format_err("truncated PPM data".into()))?;
    let mut data = vec![0.0f32; 3 * w * h];
    for p in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + p] = body[3 * p + ch] as f32 / max as f32;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn format_boxes(boxes: &[Box]) -> String {
    let mut s = String::new();
    for b in boxes {
        let [x, y, w, h] = b.xywh();
        writeln!(s, "{x:.4},{y:.4},{w:.4},{h:.4}").expect("write to string");
    }
    s
}

/// One `x,y,w,h` box per non-empty line (commas, tabs or spaces).
pub fn parse_boxes(text: &str) -> Result<Vec<Box>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<f64>().map_err(|_| format_err(format!("line {}: bad number {t:?}", i + 1))))
                .collect::<Result<_>>()?;
            let [x, y, w, h] = v[..] else {
                return Err(format_err(format!("line {}: expected 4 values, got {}", i + 1, v.len())));
            };
            Box::from_xywh(x, y, w, h)
        })
        .collect()
}

pub fn write_boxes(path: &Path, boxes: &[Box]) -> Result<()> {
    fs::write(path, format_boxes(boxes))?;
    Ok(())
}

pub fn read_boxes(path: &Path) -> Result<Vec<Box>> {
    parse_boxes(&fs::read_to_string(path)?)
}

/// Writes numbered PPM frames and `groundtruth.txt` into `dir`.
pub fn write_sequence<F: Float>(dir: &Path, seq: &Sequence<F>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        fs::write(dir.join(frame_name(i)), encode_ppm(f)?)?;
    }
    write_boxes(&dir.join("groundtruth.txt"), &seq.gt)
}

/// All `.ppm` frames of a directory in file-name order.
pub fn read_frames(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    let frames: Vec<Tensor<f32>> = paths.iter().map(|p| decode_ppm(&fs::read(p)?)).collect::<Result<_>>()?;
    if frames.is_empty() {
        return Err(contract_err!("no frames in {}", dir.display()));
    }
    Ok(frames)
}

/// Reads a sequence directory; distractor boxes are not stored on disk.
pub fn read_sequence(dir: &Path) -> Result<Sequence<f32>> {
    let frames = read_frames(dir)?;
    let gt = read_boxes(&dir.join("groundtruth.txt"))?;
    if gt.len() != frames.len() {
        return Err(contract_err!("{} frames but {} ground-truth boxes in {}", frames.len(), gt.len(), dir.display()));
    }
    let distractors = vec![Vec::new(); frames.len()];
    Ok(Sequence { frames, gt, distractors, seed: 0 })
}

pub fn metrics_csv(rows: &[(String, Metrics)]) -> String {
    let mut s = String::from("sequence,AO,SR50,SR75\n");
    for (name, m) in rows {
        writeln!(s, "{name},{:.6},{:.6},{:.6}", m.ao, m.sr50, m.sr75).expect("write to string");
    }
    s
}

pub fn write_metrics(path: &Path, rows: &[(String, Metrics)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}
