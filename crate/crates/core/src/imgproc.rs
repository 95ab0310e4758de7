//! Resampling, raster file I/O and small visualisation helpers.
//!
//! Images are `C×H×W` tensors with values in `[-1, 1]`. The canonical on-disk
//! format is PFM (32-bit float, lossless for data generated at `f32` precision);
//! PNG is written only for previews.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let src_coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = (dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let s = s.clamp(0.0, (n_in - 1) as f64);
        let i0 = (s.floor() as usize).min(n_in - 1);
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| src_coord(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| src_coord(x, w, out_w)).collect();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        for (oy, &(y0, y1, ay)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, ax)) in xs.iter().enumerate() {
                let top = (1.0 - ax) * t.at3(ch, y0, x0) + ax * t.at3(ch, y0, x1);
                let bot = (1.0 - ax) * t.at3(ch, y1, x0) + ax * t.at3(ch, y1, x1);
                out.set3(ch, oy, ox, (1.0 - ay) * top + ay * bot);
            }
        }
    }
    Ok(out)
}

/// Box-average downsampling by an integer factor.
pub fn resize_area(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    if h % out_h != 0 || w % out_w != 0 {
        return shape_err(format!("area resize {h}x{w} -> {out_h}x{out_w} needs integer factors"));
    }
    let (fy, fx) = (h / out_h, w / out_w);
    let norm = 1.0 / (fy * fx) as f64;
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = out.at3(ch, y / fy, x / fx) + t.at3(ch, y, x) * norm;
                out.set3(ch, y / fy, x / fx, v);
            }
        }
    }
    Ok(out)
}

/// Write a 1- or 3-channel image as little-endian PFM (`Pf` / `PF`).
pub fn write_pfm(t: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = t.chw()?;
    let tag = match c {
        1 => "Pf",
        3 => "PF",
        _ => return shape_err(format!("PFM holds 1 or 3 channels, got {c}")),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "{tag}\n{w} {h}\n-1.0\n")?;
    // PFM rows run bottom to top, channels interleaved
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                f.write_all(&(t.at3(ch, y, x) as f32).to_le_bytes())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::Dataset {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim().to_string())
    };
    let c = match next_line(&mut r)?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(bad(format!("not a PFM file (`{other}`)"))),
    };
    let dims = next_line(&mut r)?;
    let mut it = dims.split_whitespace().map(|v| v.parse::<usize>());
    let (Some(Ok(w)), Some(Ok(h))) = (it.next(), it.next()) else {
        return Err(bad(format!("bad dimensions `{dims}`")));
    };
    let scale: f64 = next_line(&mut r)?
        .parse()
        .map_err(|_| bad("bad scale".into()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != c * h * w * 4 {
        return Err(bad(format!("payload is {} bytes, expected {}", body.len(), c * h * w * 4)));
    }
    let mut t = Tensor::zeros(&[c, h, w]);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
        let ch = i % c;
        let px = i / c;
        let (row, x) = (px / w, px % w);
        t.set3(ch, h - 1 - row, x, v);
    }
    Ok(t)
}

/// 8-bit RGB (or gray) bytes of an image in `[-1, 1]`.
pub fn to_rgb8(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (c, h, w) = t.chw()?;
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = t.at3(if c == 3 { ch } else { 0 }, y, x);
                out.push((((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok((h, w, out))
}

pub fn write_png(t: &Tensor, path: &Path) -> Result<()> {
    let (h, w, bytes) = to_rgb8(t)?;
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image(e.to_string()))
}

/// Colour-wheel rendering of a flow (hue = direction, saturation = magnitude).
pub fn flow_to_image(flow: &Tensor, max_mag: Option<f64>) -> Result<Tensor> {
    let (c, h, w) = flow.chw()?;
    if c != 2 {
        return shape_err("flow image needs a 2-channel flow");
    }
    let n = h * w;
    let d = flow.data();
    let norm = max_mag
        .unwrap_or_else(|| (0..n).map(|i| d[i].hypot(d[n + i])).fold(0.0, f64::max))
        .max(1e-9);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (u, v) = (d[i], d[n + i]);
            let mag = (u.hypot(v) / norm).min(1.0);
            let hue = (v.atan2(u) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
            let rgb = hsv_to_rgb(hue, mag);
            for (ch, val) in rgb.iter().enumerate() {
                out.set3(ch, y, x, val * 2.0 - 1.0);
            }
        }
    }
    Ok(out)
}

fn hsv_to_rgb(h6: f64, s: f64) -> [f64; 3] {
    let f = h6 - h6.floor();
    let (p, q, t) = (1.0 - s, 1.0 - s * f, 1.0 - s * (1.0 - f));
    match h6 as usize % 6 {
        0 => [1.0, t, p],
        1 => [q, 1.0, p],
        2 => [p, 1.0, t],
        3 => [p, q, 1.0],
        4 => [t, p, 1.0],
        _ => [1.0, p, q],
    }
}

/// Map a `1×H×W` map in `[0, 1]` to a gray image in `[-1, 1]`.
pub fn heatmap(t: &Tensor) -> Result<Tensor> {
    let (c, _, _) = t.chw()?;
    if c != 1 {
        return shape_err("heatmap needs one channel");
    }
    Ok(t.map(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0))
}
