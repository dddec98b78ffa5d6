//! Binary PPM (P6) and PGM (P5) codec. Decoding maps 8-bit samples to
//! `[0,1]` floats in a `[3,H,W]` tensor (grayscale replicates across
//! channels); encoding writes P6 with maxval 255.

use crate::data::DataError;
use crate::tensor::Tensor;

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\r' | b'\n')
}

/// Read the next header token, skipping whitespace and `#` comments.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], DataError> {
    loop {
        while *pos < bytes.len() && is_space(bytes[*pos]) {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !is_space(bytes[*pos]) {
        *pos += 1;
    }
    if start == *pos {
        return Err(DataError::Decode("truncated header".to_string()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_usize(token: &[u8]) -> Result<usize, DataError> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DataError::Decode("bad header number".to_string()))
}

/// Decode P6/P5 bytes into a `[3,H,W]` tensor of `[0,1]` floats.
pub fn decode(bytes: &[u8]) -> Result<Tensor, DataError> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic {
        b"P6" => 3usize,
        b"P5" => 1usize,
        _ => return Err(DataError::Decode("not a binary PPM/PGM (P6/P5)".to_string())),
    };
    let width = parse_usize(next_token(bytes, &mut pos)?)?;
    let height = parse_usize(next_token(bytes, &mut pos)?)?;
    let maxval = parse_usize(next_token(bytes, &mut pos)?)?;
    if width == 0 || height == 0 {
        return Err(DataError::Decode("zero image dimension".to_string()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(DataError::Decode(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates header and payload.
    if pos >= bytes.len() || !is_space(bytes[pos]) {
        return Err(DataError::Decode("missing header terminator".to_string()));
    }
    pos += 1;
    let need = width * height * channels;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| DataError::Decode("truncated pixel data".to_string()))?;

    let mut data = vec![0.0f32; 3 * height * width];
    let plane = height * width;
    let scale = 1.0 / maxval as f32;
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            if channels == 3 {
                for c in 0..3 {
                    data[c * plane + i] = payload[i * 3 + c] as f32 * scale;
                }
            } else {
                let v = payload[i] as f32 * scale;
                for c in 0..3 {
                    data[c * plane + i] = v;
                }
            }
        }
    }
    Ok(Tensor::new(vec![3, height, width], data).expect("length computed"))
}

/// Encode a `[3,H,W]` tensor of `[0,1]` floats as binary P6, maxval 255.
pub fn encode(image: &Tensor) -> Result<Vec<u8>, DataError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(DataError::Decode(format!("expected [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = image.data()[c * plane + i].clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}
