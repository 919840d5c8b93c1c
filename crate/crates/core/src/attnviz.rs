//! Attention maps as grayscale images.

use std::path::Path;

use crate::backbone::{AttentionMap, Image, TokenRole};
use crate::error::{Error, Result};

pub const PGM_SIZE: usize = 32;

/// Attention of one query row over the image tokens of `view`, laid out on
/// the `grid × grid` token grid.
pub fn image_attention(map: &AttentionMap, query: usize, view: usize, grid: usize) -> Result<Vec<f32>> {
    if query >= map.weights.rows() {
        return Err(Error::InvalidArgument(format!(
            "query {query} outside {} tokens",
            map.weights.rows()
        )));
    }
    let row = map.weights.row(query);
    let mut out = vec![0.0; grid * grid];
    let mut seen = 0;
    for (k, role) in map.roles.iter().enumerate() {
        if let TokenRole::Image { view: v, index } = *role {
            if v == view && index < out.len() {
                out[index] = row[k];
                seen += 1;
            }
        }
    }
    if seen == 0 {
        return Err(Error::InvalidArgument(format!(
            "query {query} has no image keys in view {view}"
        )));
    }
    Ok(out)
}

/// Bilinear resize of a `g × g` grid to `size × size`, sampling at pixel
/// centres with edge clamping.
pub fn upsample_bilinear(grid: &[f32], g: usize, size: usize) -> Vec<f32> {
    let coord = |i: usize| -> (usize, usize, f32) {
        let s = ((i as f32 + 0.5) * g as f32 / size as f32 - 0.5).clamp(0.0, (g - 1) as f32);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(g - 1);
        (lo, hi, s - lo as f32)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for x in 0..size {
            let (x0, x1, fx) = coord(x);
            let top = grid[y0 * g + x0] * (1.0 - fx) + grid[y0 * g + x1] * fx;
            let bot = grid[y1 * g + x0] * (1.0 - fx) + grid[y1 * g + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Scales so the largest value maps to 255.
pub fn to_gray(values: &[f32]) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0f32, f32::max);
    values
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Parses binary PGM with maxval 255 as written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::InvalidArgument(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("header"))?
                .to_string(),
        );
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated data"))?;
    Ok((w, h, data.to_vec()))
}

/// Binary PPM with the rendered view on the left and the heat map on the
/// right, both at the view's resolution.
pub fn composite_ppm(view: &Image, heat: &[u8]) -> Result<Vec<u8>> {
    if heat.len() != view.height * view.width {
        return Err(Error::InvalidArgument("heat map and view sizes differ".into()));
    }
    let (h, w) = (view.height, view.width);
    let mut out = format!("P6\n{} {h}\n255\n", 2 * w).into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.extend(view.pixel(y, x).map(|c| (c * 255.0).round() as u8));
        }
        for x in 0..w {
            let v = heat[y * w + x];
            out.extend([v, v, v]);
        }
    }
    Ok(out)
}

/// Writes `<stem>.pgm` and `<stem>_composite.ppm` into `dir`; returns the
/// PGM pixels.
pub fn dump_attention_pgm(
    map: &AttentionMap,
    query: usize,
    view: &Image,
    view_index: usize,
    grid: usize,
    dir: &Path,
    stem: &str,
) -> Result<Vec<u8>> {
    let cells = image_attention(map, query, view_index, grid)?;
    let gray = to_gray(&upsample_bilinear(&cells, grid, PGM_SIZE));
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.pgm")), encode_pgm(PGM_SIZE, PGM_SIZE, &gray))?;
    if view.height == PGM_SIZE && view.width == PGM_SIZE {
        std::fs::write(dir.join(format!("{stem}_composite.ppm")), composite_ppm(view, &gray)?)?;
    }
    Ok(gray)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn map(row: Vec<f32>, grid: usize) -> AttentionMap {
        let mut roles = vec![TokenRole::Text];
        roles.extend((0..grid * grid).map(|index| TokenRole::Image { view: 0, index }));
        let n = roles.len();
        let mut w = vec![0.0; n * n];
        w[..n].copy_from_slice(&row);
        AttentionMap {
            layer: 1,
            weights: Tensor::new(vec![n, n], w).unwrap(),
            roles,
        }
    }

    #[test]
    fn uniform_attention_is_constant() {
        let m = map(vec![1.0 / 17.0; 17], 4);
        let px = to_gray(&upsample_bilinear(&image_attention(&m, 0, 0, 4).unwrap(), 4, 32));
        assert!(px.iter().all(|&p| p == px[0]));
    }

    #[test]
    fn one_hot_peaks_inside_its_cell() {
        for (i, j) in [(0, 0), (1, 2), (3, 3), (2, 0)] {
            let mut row = vec![0.0; 17];
            row[1 + i * 4 + j] = 1.0;
            let up = upsample_bilinear(&image_attention(&map(row, 4), 0, 0, 4).unwrap(), 4, 32);
            let best = (0..up.len()).max_by(|&a, &b| up[a].total_cmp(&up[b])).unwrap();
            let (y, x) = (best / 32, best % 32);
            assert_eq!((y / 8, x / 8), (i, j));
        }
    }

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..32 * 32).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = encode_pgm(32, 32, &px);
        assert_eq!(decode_pgm(&bytes).unwrap(), (32, 32, px));
        assert!(decode_pgm(b"P6\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn text_only_query_row_is_an_error() {
        let m = AttentionMap {
            layer: 1,
            weights: Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap(),
            roles: vec![TokenRole::Text; 2],
        };
        assert!(image_attention(&m, 0, 0, 4).is_err());
        assert!(image_attention(&map(vec![0.0; 17], 4), 0, 1, 4).is_err());
    }
}
