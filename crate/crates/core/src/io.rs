//! File formats: `TEN1` exact text tensors and binary netpbm (`P5`/`P6`) previews.
//!
//! `TEN1` layout:
//!
//! ```text
//! TEN1
//! dims 3 16 16
//! <values, whitespace separated, row-major>
//! ```
//!
//! Values are written with 17 significant digits, so a write/read cycle reproduces
//! every finite `f64` bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{checked_numel, Tensor};

pub const TEN1_MAGIC: &str = "TEN1";

pub fn format_ten1(tensor: &Tensor) -> String {
    let shape = tensor.shape();
    let row = *shape.last().unwrap_or(&1);
    let mut out = String::with_capacity(tensor.len() * 24 + 32);
    out.push_str(TEN1_MAGIC);
    out.push('\n');
    out.push_str("dims");
    for d in shape {
        out.push(' ');
        out.push_str(&d.to_string());
    }
    out.push('\n');
    for line in tensor.as_slice().chunks(row.max(1)) {
        let cells: Vec<String> = line.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_ten1(text: &str, path: &Path) -> Result<Tensor> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    match lines.next() {
        Some((_, l)) if l.trim() == TEN1_MAGIC => {}
        Some((n, l)) => return Err(err(n, format!("expected `{TEN1_MAGIC}`, found `{}`", l.trim()))),
        None => return Err(err(1, "empty file".into())),
    }

    let (dims_line, dims_text) = lines.next().ok_or_else(|| err(2, "missing dims line".into()))?;
    let mut tokens = dims_text.split_whitespace();
    if tokens.next() != Some("dims") {
        return Err(err(dims_line, "expected `dims d1 d2 ...`".into()));
    }
    let shape = tokens
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| err(dims_line, format!("bad dimension `{tok}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let expected = checked_numel(&shape).map_err(|_| err(dims_line, format!("empty shape {shape:?}")))?;

    let mut data = Vec::with_capacity(expected);
    let mut last_line = dims_line;
    for (n, line) in lines {
        last_line = n;
        for tok in line.split_whitespace() {
            if data.len() == expected {
                return Err(err(n, format!("more than {expected} values for dims {shape:?}")));
            }
            let v: f64 = tok.parse().map_err(|_| err(n, format!("non-numeric token `{tok}`")))?;
            if !v.is_finite() {
                return Err(err(n, format!("non-finite value `{tok}`")));
            }
            data.push(v);
        }
    }
    if data.len() != expected {
        return Err(err(
            last_line,
            format!("dims {shape:?} need {expected} values, found {}", data.len()),
        ));
    }
    Tensor::new(data, shape)
}

pub fn write_ten1(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_ten1(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_ten1(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ten1(&text, path)
}

/// Encodes `[1,H,W]` as `P5` or `[3,H,W]` as `P6`, clamping to `[0, peak]`.
pub fn encode_netpbm(tensor: &Tensor, peak: f64) -> Result<Vec<u8>> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak must be positive, got {peak}")));
    }
    let (c, h, w) = tensor
        .image_dims()
        .ok_or_else(|| Error::Incompatible(format!("image shape required, got {:?}", tensor.shape())))?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Incompatible(format!("unsupported channel count {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let data = tensor.as_slice();
    let plane = h * w;
    out.reserve(c * plane);
    for p in 0..plane {
        for ch in 0..c {
            let v = (data[ch * plane + p] / peak).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = next_token(bytes).ok_or_else(|| err("empty file".into()))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(err(format!("unsupported netpbm magic `{other}`"))),
    };
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(bytes).ok_or_else(|| err(format!("truncated header: missing {name}")))?;
        *slot = tok.parse().map_err(|_| err(format!("bad {name} `{tok}`")))?;
    }
    let [w, h, maxval] = header;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(err(format!("unsupported header {w}x{h} maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let raster = &bytes[(pos + 1).min(bytes.len())..];
    let plane = w * h;
    if raster.len() < channels * plane {
        return Err(err(format!(
            "truncated raster: need {} bytes, found {}",
            channels * plane,
            raster.len()
        )));
    }
    let mut data = vec![0.0; channels * plane];
    for p in 0..plane {
        for ch in 0..channels {
            data[ch * plane + p] = f64::from(raster[p * channels + ch]) / maxval as f64;
        }
    }
    Tensor::new(data, vec![channels, h, w])
}

pub fn write_image(path: impl AsRef<Path>, tensor: &Tensor, peak: f64) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_netpbm(tensor, peak)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a `P5`/`P6` file into `[C,H,W]` with values in `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes, path)
}
